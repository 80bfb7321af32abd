"""Desk-scale experiment: small MLP on 14×14 images, ratio detection and uncertainty trend.

One function runs the whole pipeline so the acceptance suite and
``scripts/run_desk.py`` report the same numbers.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

from . import data as D
from . import metrics as M
from . import model as mdl


@dataclass(frozen=True)
class DeskConfig:
    dataset: str = "fashionmnist"
    foreign: str = "mnist"
    n_train: int = 2000
    n_test: int = 1000
    n_foreign: int = 1000
    downscale: int = 2
    latent_dim: int = 16
    hidden: tuple[int, ...] = (256, 64)
    train_noise: float = 0.00028
    noise_levels: tuple[float, ...] = (0.0001, 0.00028, 0.1)
    gamma: float = 100.0
    sigma_ood: float = math.exp(0.65)
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0
    data_dir: str | None = None


@dataclass
class DeskResult:
    config: DeskConfig
    detection: dict = field(default_factory=dict)
    uncertainty: list[dict] = field(default_factory=list)
    likelihood: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _load(cfg: DeskConfig, name: str, split: str, n: int, seed: int) -> D.Dataset:
    ds = D.load_named(name, split, cfg.data_dir, seed=seed, n=n)
    return D.downscale(ds, cfg.downscale) if cfg.downscale > 1 else ds


def load_sets(cfg: DeskConfig) -> tuple[D.Dataset, D.Dataset, D.Dataset]:
    """(ID train subset, ID test subset, foreign test subset)."""
    return (_load(cfg, cfg.dataset, "train", cfg.n_train, cfg.seed),
            _load(cfg, cfg.dataset, "test", cfg.n_test, cfg.seed + 1),
            _load(cfg, cfg.foreign, "test", cfg.n_foreign, cfg.seed + 2))


def fit(cfg: DeskConfig, train: D.Dataset, mode: str) -> mdl.ModelParams:
    arch = mdl.Architecture("mlp", train.shape, cfg.latent_dim, cfg.hidden)
    incp = mdl.IncpConfig(gamma=cfg.gamma if mode == "incpvae" else 0.0, sigma_ood=cfg.sigma_ood,
                          noise=D.NoiseSpec(cfg.train_noise, seed=cfg.seed + 10))
    ood = D.add_noise(train, incp.noise).flat() if mode == "incpvae" else None
    tcfg = mdl.TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, epochs=cfg.epochs, seed=cfg.seed)
    return mdl.train(train.flat(), ood, incp, tcfg, arch, mode=mode).params


def detection(cfg: DeskConfig, params: mdl.ModelParams, test: D.Dataset, foreign: D.Dataset) -> dict:
    """Calibration OOD (noisy test images, paired) against self-paired foreign images.

    Positive class is the calibration OOD; a smaller KLR is more OOD-like, so -KLR is the score.
    """
    incp = mdl.IncpConfig(gamma=cfg.gamma, sigma_ood=cfg.sigma_ood)
    cal_ood = D.add_noise(test, D.NoiseSpec(cfg.train_noise, seed=cfg.seed + 20))
    elbo_id = mdl.evaluate_elbo(params, test.flat(), cfg.seed)
    kl_cal = mdl.evaluate_incp_kl(params, test.flat(), cal_ood.flat(), incp, cfg.seed)
    kl_for = mdl.evaluate_incp_kl(params, foreign.flat(), foreign.flat(), incp, cfg.seed)
    cal = M.calibration_from_scores(elbo_id, kl_cal, cfg.seed)
    r_cal, r_for = M.klr_from_scores(kl_cal, cal), M.klr_from_scores(kl_for, cal)
    return {"auroc": M.auroc(-r_cal.klr, -r_for.klr), "auprc": M.auprc(-r_cal.klr, -r_for.klr),
            "calibration": cal.to_dict(),
            "mean_incp_kl_cal": float(kl_cal.mean()), "mean_incp_kl_foreign": float(kl_for.mean()),
            "labelled_ood_cal": float(r_cal.label.mean()), "labelled_ood_foreign": float(r_for.label.mean())}


def uncertainty(cfg: DeskConfig, params: mdl.ModelParams, test: D.Dataset) -> list[dict]:
    elbo_id = mdl.evaluate_elbo(params, test.flat(), cfg.seed)
    cal = M.Calibration(float(elbo_id.max()), 1.0, cfg.seed)
    rows = []
    for i, sigma in enumerate(cfg.noise_levels):
        noisy = D.add_noise(test, D.NoiseSpec(sigma, seed=cfg.seed + 30 + i))
        elbos = mdl.evaluate_elbo(params, noisy.flat(), cfg.seed)
        u = M.ratio_u(elbos, cal)
        rows.append({"sigma": sigma, "mean_u": float(u.mean()), "std_u": float(u.std()),
                     "mean_elbo": float(elbos.mean()), "sign_degenerate": cal.sign_degenerate})
    return rows


def likelihood(cfg: DeskConfig, params: mdl.ModelParams, test: D.Dataset, foreign: D.Dataset) -> dict:
    """ELBO of a plain VAE on ID test vs foreign images; positive class = foreign, score = -ELBO."""
    e_id = mdl.evaluate_elbo(params, test.flat(), cfg.seed)
    e_for = mdl.evaluate_elbo(params, foreign.flat(), cfg.seed)
    se_id = float(e_id.std(ddof=1) / math.sqrt(len(e_id)))
    return {"mean_elbo_id": float(e_id.mean()), "se_elbo_id": se_id, "mean_elbo_foreign": float(e_for.mean()),
            "auroc": M.auroc(-e_for, -e_id),
            "direction_holds": bool(e_for.mean() >= e_id.mean() - se_id)}


def run(cfg: DeskConfig, with_vae: bool = True) -> DeskResult:
    res = DeskResult(cfg)
    train, test, foreign = load_sets(cfg)
    t0 = time.perf_counter()
    params = fit(cfg, train, "incpvae")
    res.seconds["train_incpvae"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    res.detection = detection(cfg, params, test, foreign)
    res.seconds["detect"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    res.uncertainty = uncertainty(cfg, params, test)
    res.seconds["uncertainty"] = time.perf_counter() - t0
    if with_vae:
        t0 = time.perf_counter()
        vae = fit(cfg, train, "vae")
        res.likelihood = likelihood(cfg, vae, test, foreign)
        res.seconds["train_vae"] = time.perf_counter() - t0
    return res
