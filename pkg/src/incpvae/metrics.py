"""ELBO-ratio uncertainty, INCP-KL-ratio detection and ranking metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .diffcore import ContractError
from .model import IncpConfig, ModelParams, evaluate_elbo, evaluate_incp_kl


class DegenerateCalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class Calibration:
    ielbo_max: float
    dkl_ood_max: float
    seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.ielbo_max) and math.isfinite(self.dkl_ood_max)):
            raise DegenerateCalibrationError(f"non-finite calibration {self}")

    @property
    def sign_degenerate(self) -> bool:
        """Ratios only read as uncertainty when every ELBO, the maximum included, is negative."""
        return self.ielbo_max >= 0

    def to_dict(self) -> dict:
        return {**asdict(self), "sign_degenerate": self.sign_degenerate}


@dataclass(frozen=True)
class DetectionResult:
    klr: np.ndarray
    label: np.ndarray
    incp_kl: np.ndarray

    def __len__(self) -> int:
        return len(self.klr)


@dataclass(frozen=True)
class UncertaintyReport:
    level: float
    u: np.ndarray
    elbo: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.u))

    @property
    def std(self) -> float:
        return float(np.std(self.u))


def _nonempty(x, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ContractError(f"{what} is empty")
    return x


def calibrate(params: ModelParams, id_test: np.ndarray, ood_cal: np.ndarray, ood_src: np.ndarray,
              cfg: IncpConfig, seed: int = 0, workers: int = 1) -> Calibration:
    """Maxima of ELBO over ``id_test`` and of INCP-KL over the paired calibration OOD set."""
    _nonempty(np.arange(len(id_test)), "ID test set")
    _nonempty(np.arange(len(ood_cal)), "OOD calibration set")
    elbos = evaluate_elbo(params, id_test, seed, workers=workers)
    kls = evaluate_incp_kl(params, ood_src, ood_cal, cfg, seed, workers=workers)
    return calibration_from_scores(elbos, kls, seed)


def calibration_from_scores(elbos, kls, seed: int = 0) -> Calibration:
    return Calibration(float(np.max(_nonempty(elbos, "ELBO scores"))),
                       float(np.max(_nonempty(kls, "INCP-KL scores"))), seed)


def ratio_u(elbos, cal: Calibration) -> np.ndarray:
    """U = ELBO / I-ELBO(x_max)."""
    if cal.ielbo_max == 0:
        raise DegenerateCalibrationError("I-ELBO(x_max) is zero")
    return np.asarray(elbos, dtype=np.float64) / cal.ielbo_max


def elbo_ratio(params: ModelParams, x0: np.ndarray, cal: Calibration) -> np.ndarray:
    return ratio_u(evaluate_elbo(params, x0, cal.seed), cal)


def klr_from_scores(kls, cal: Calibration) -> DetectionResult:
    if not cal.dkl_ood_max > 0:
        raise DegenerateCalibrationError(f"D_KL(OOD_max) must be positive, got {cal.dkl_ood_max}")
    kls = np.asarray(kls, dtype=np.float64)
    klr = kls / cal.dkl_ood_max
    return DetectionResult(klr=klr, label=(klr <= 1.0).astype(np.int64), incp_kl=kls)


def klr_detect(params: ModelParams, x0: np.ndarray, cal: Calibration, cfg: IncpConfig,
               source: np.ndarray | None = None) -> DetectionResult:
    """KLR = INCP-KL(x0) / D_KL(OOD_max); label 1 (OOD) iff KLR ≤ 1.

    Without a paired ``source`` the target mean is the encoding of ``x0`` itself.
    """
    source = x0 if source is None else source
    return klr_from_scores(evaluate_incp_kl(params, source, x0, cfg, cal.seed), cal)


# ---------------------------------------------------------------- ranking metrics


def auroc(scores_pos, scores_neg) -> float:
    """P(pos > neg) + ½·P(pos = neg), via average ranks (Mann–Whitney U)."""
    pos = _nonempty(scores_pos, "positive scores")
    neg = _nonempty(scores_neg, "negative scores")
    ranks = rankdata(np.concatenate([pos, neg]))
    n_pos, n_neg = len(pos), len(neg)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores_pos, scores_neg) -> float:
    """Average precision: Σ (R_k − R_{k−1})·P_k over descending distinct thresholds."""
    pos = _nonempty(scores_pos, "positive scores")
    neg = _nonempty(scores_neg, "negative scores")
    scores = np.concatenate([pos, neg])
    truth = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    order = np.argsort(-scores, kind="mergesort")
    scores, truth = scores[order], truth[order]
    # last index of each run of tied scores
    ends = np.r_[np.flatnonzero(np.diff(scores)), len(scores) - 1]
    tp = np.cumsum(truth)[ends]
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / len(pos)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


# ---------------------------------------------------------------- exports


def histogram_export(values, bins: int, path, value_range: tuple[float, float] | None = None) -> np.ndarray:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    counts, edges = np.histogram(values, bins=bins, range=value_range)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("bin_left", "bin_right", "count"))
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow((repr(float(lo)), repr(float(hi)), int(c)))
    return counts


def write_scores(path, scores: Sequence[float], labels: Sequence[int], extra: dict[str, Sequence] | None = None) -> None:
    """``score,label`` rows, followed by any extra named columns."""
    extra = extra or {}
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("score", "label", *extra))
        for i, (s, lab) in enumerate(zip(scores, labels)):
            w.writerow((repr(float(s)), int(lab), *(_fmt(col[i]) for col in extra.values())))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialise {type(v).__name__}")
