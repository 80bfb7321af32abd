"""``incpvae`` command line: train, gen-ood, eval-uncertainty, detect-ood, export.

Settings resolve as built-in defaults, then ``--config`` JSON, then flags.
Every command writes ``config.resolved.json`` into its output directory;
feeding that file back through ``--config`` replays the run exactly.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as M
from . import model as mdl

log = logging.getLogger("incpvae")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
RESOLVED = "config.resolved.json"
CHECKPOINT = "model.incp"


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class ExperimentConfig:
    dataset: str = "fashionmnist"
    foreign: str | None = None
    mode: str = "incpvae"
    arch: str = "mlp"
    latent_dim: int | None = None
    hidden: list[int] = field(default_factory=lambda: [256, 64])
    downscale: int = 1
    n_train: int | None = None
    eval_samples: int = 1000
    split: str = "test"
    noise_levels: list[float] | None = None
    noise_seeds: list[int] | None = None
    train_noise: float | None = None
    clamp: bool = True
    gamma: float = 1.0
    sigma_ood: float | None = None
    target: str = "mean"
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0
    bins: int = 50
    workers: int = 1
    data_dir: str | None = None
    out_dir: str = "runs/default"
    checkpoint: str | None = None
    inputs: list[str] = field(default_factory=list)

    def resolve(self) -> "ExperimentConfig":
        """Fill dataset-dependent defaults and validate; all problems are reported together."""
        c = dataclasses.replace(self)
        problems = []
        if c.dataset not in D.SOURCES:
            problems.append(f"dataset must be one of {D.SOURCES}, got {c.dataset!r}")
        if c.mode not in ("vae", "incpvae"):
            problems.append(f"mode must be 'vae' or 'incpvae', got {c.mode!r}")
        if c.arch not in ("mlp", "conv_table8_9"):
            problems.append(f"arch must be 'mlp' or 'conv_table8_9', got {c.arch!r}")
        if c.target not in ("mean", "sample"):
            problems.append(f"target must be 'mean' or 'sample', got {c.target!r}")
        if c.foreign is None:
            c.foreign = D.FOREIGN.get(c.dataset)
        if c.latent_dim is None:
            c.latent_dim = 2 if c.dataset == "synthetic2d" else 16
        if c.noise_levels is None:
            c.noise_levels = list(D.NOISE_LEVELS.get(c.dataset, (0.01, 0.05, 0.1)))
        if c.noise_seeds is None:
            c.noise_seeds = [c.seed + 1 + i for i in range(len(c.noise_levels))]
        if len(c.noise_seeds) != len(c.noise_levels):
            problems.append("noise_seeds and noise_levels differ in length")
        if c.train_noise is None:
            c.train_noise = D.NOISE_LEVELS.get(c.dataset, (0.01, 0.05))[1]
        if c.sigma_ood is None:
            c.sigma_ood = D.sigma_ood_default(c.dataset)
        if c.mode == "vae":
            c.gamma = 0.0
        for name in ("lr", "sigma_ood"):
            if not getattr(c, name) > 0:
                problems.append(f"{name} must be > 0")
        if c.gamma < 0:
            problems.append("gamma must be >= 0")
        if any(s < 0 for s in c.noise_levels) or c.train_noise < 0:
            problems.append("noise levels must be >= 0")
        for name in ("batch_size", "eval_samples", "downscale", "bins", "workers", "latent_dim"):
            if getattr(c, name) < 1:
                problems.append(f"{name} must be >= 1")
        if c.epochs < 0:
            problems.append("epochs must be >= 0")
        if problems:
            raise ConfigError(problems)
        return c

    def incp(self) -> mdl.IncpConfig:
        return mdl.IncpConfig(gamma=self.gamma, sigma_ood=self.sigma_ood,
                              noise=D.NoiseSpec(self.train_noise, seed=self.seed, clamp=self.clamp),
                              target=self.target)

    def train_config(self) -> mdl.TrainConfig:
        return mdl.TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, seed=self.seed)

    def architecture(self, input_shape) -> mdl.Architecture:
        return mdl.Architecture(self.arch, tuple(input_shape), self.latent_dim, tuple(self.hidden))

    def snapshot(self, command: str) -> dict:
        return {"command": command, **dataclasses.asdict(self)}


FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}


# ---------------------------------------------------------------- helpers


def _load(cfg: ExperimentConfig, name: str, split: str, n: int | None, seed: int) -> D.Dataset:
    ds = D.load_named(name, split, cfg.data_dir, seed=seed, n=n)
    if cfg.downscale > 1:
        ds = D.downscale(ds, cfg.downscale)
    return ds


def _out(cfg: ExperimentConfig, command: str) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED).write_text(json.dumps(cfg.snapshot(command), indent=2, sort_keys=True) + "\n")
    return out


def _checkpoint(cfg: ExperimentConfig, input_shape) -> mdl.ModelParams:
    path = Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out_dir) / CHECKPOINT
    params = mdl.load_checkpoint(path)
    want = cfg.architecture(input_shape)
    if params.arch != want:
        raise ConfigError([f"checkpoint architecture {params.arch.descriptor()} does not match "
                           f"config {want.descriptor()}"])
    return params


def _noisy(ds: D.Dataset, sigma: float, seed: int, clamp: bool) -> D.Dataset:
    return D.add_noise(ds, D.NoiseSpec(sigma, seed=seed, clamp=clamp))


# ---------------------------------------------------------------- commands


def cmd_train(cfg: ExperimentConfig) -> dict:
    out = _out(cfg, "train")
    ds = _load(cfg, cfg.dataset, "train", cfg.n_train, cfg.seed)
    arch = cfg.architecture(ds.shape)
    ood = None
    if cfg.mode == "incpvae":
        ood = _noisy(ds, cfg.train_noise, cfg.seed, cfg.clamp).flat()
    res = mdl.train(ds.flat(), ood, cfg.incp(), cfg.train_config(), arch, mode=cfg.mode)
    mdl.save_checkpoint(out / CHECKPOINT, res.params)
    mdl.write_trace(out / "trace.csv", res.trace)
    return {"checkpoint": str(out / CHECKPOINT), "final": res.trace[-1] if res.trace else None}


def cmd_gen_ood(cfg: ExperimentConfig) -> dict:
    """Base set plus one noisy copy per level, each level on its own seed."""
    out = _out(cfg, "gen-ood")
    ds = _load(cfg, cfg.dataset, cfg.split, cfg.eval_samples, cfg.seed)
    stem = f"{cfg.dataset}-{cfg.split}"
    D.save_dataset(out / f"{stem}-base.idx", ds)
    files = []
    for i, (sigma, seed) in enumerate(zip(cfg.noise_levels, cfg.noise_seeds)):
        path = out / f"{stem}-noise{i}.idx"
        D.save_dataset(path, _noisy(ds, sigma, seed, cfg.clamp))
        files.append({"level": i, "sigma": sigma, "seed": seed, "path": path.name})
    M.write_json(out / "gen_ood.json", {"dataset": cfg.dataset, "split": cfg.split, "levels": files})
    return {"files": files}


def cmd_eval_uncertainty(cfg: ExperimentConfig) -> dict:
    out = _out(cfg, "eval-uncertainty")
    test = _load(cfg, cfg.dataset, "test", cfg.eval_samples, cfg.seed + 100)
    params = _checkpoint(cfg, test.shape)
    elbo_id = mdl.evaluate_elbo(params, test.flat(), cfg.seed, workers=cfg.workers)
    cal = M.Calibration(float(elbo_id.max()), 1.0, cfg.seed)
    if cal.sign_degenerate:
        log.warning("I-ELBO(x_max) = %g is not negative; ELBO ratios are sign-degenerate", cal.ielbo_max)
    levels = [(0, 0.0, None)] + [(i + 1, s, seed) for i, (s, seed) in
                                 enumerate(zip(cfg.noise_levels, cfg.noise_seeds))]
    rows = []
    for level, sigma, seed in levels:
        x = test if seed is None else _noisy(test, sigma, seed, cfg.clamp)
        elbos = elbo_id if seed is None else mdl.evaluate_elbo(params, x.flat(), cfg.seed, workers=cfg.workers)
        u = M.ratio_u(elbos, cal)
        with open(out / f"uncertainty_level{level}.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("index", "sigma", "elbo", "u"))
            for i, (e, v) in enumerate(zip(elbos, u)):
                w.writerow((i, repr(float(sigma)), repr(float(e)), repr(float(v))))
        M.histogram_export(elbos, cfg.bins, out / f"elbo_hist_level{level}.csv")
        rows.append({"dataset": cfg.dataset, "mode": cfg.mode, "level": level, "sigma": sigma,
                     "mean_u": float(u.mean()), "std_u": float(u.std()), "mean_elbo": float(elbos.mean()),
                     "n": len(u)})
    _write_rows(out / "uncertainty_summary.csv", rows)
    summary = {"dataset": cfg.dataset, "mode": cfg.mode, "calibration": cal.to_dict(),
               "likelihood_proxy": "single-sample ELBO", "levels": rows}
    M.write_json(out / "uncertainty_summary.json", summary)
    return summary


def cmd_detect_ood(cfg: ExperimentConfig) -> dict:
    """INCP-KL ratio detection (incpvae) or the ELBO-threshold negative control (vae)."""
    out = _out(cfg, "detect-ood")
    test = _load(cfg, cfg.dataset, "test", cfg.eval_samples, cfg.seed + 100)
    foreign = _load(cfg, cfg.foreign, "test", cfg.eval_samples, cfg.seed + 200)
    if foreign.shape != test.shape:
        raise ConfigError([f"foreign set {cfg.foreign} has shape {foreign.shape}, model expects {test.shape}"])
    params = _checkpoint(cfg, test.shape)
    elbo_id = mdl.evaluate_elbo(params, test.flat(), cfg.seed, workers=cfg.workers)
    elbo_foreign = mdl.evaluate_elbo(params, foreign.flat(), cfg.seed, workers=cfg.workers)
    summary = {"dataset": cfg.dataset, "foreign": cfg.foreign, "mode": cfg.mode,
               "likelihood_proxy": "single-sample ELBO",
               "mean_elbo_id": float(elbo_id.mean()), "mean_elbo_foreign": float(elbo_foreign.mean())}
    M.histogram_export(elbo_id, cfg.bins, out / "elbo_hist_id.csv")
    M.histogram_export(elbo_foreign, cfg.bins, out / "elbo_hist_foreign.csv")
    if cfg.mode == "vae":
        # positive class = foreign (OOD); lower ELBO means more OOD
        pos, neg = -elbo_foreign, -elbo_id
        M.write_scores(out / "detect_scores.csv", np.r_[pos, neg], np.r_[np.ones(len(pos)), np.zeros(len(neg))])
        summary.update(detector="likelihood", auroc=M.auroc(pos, neg), auprc=M.auprc(pos, neg))
    else:
        incp = cfg.incp()
        cal_ood = _noisy(test, cfg.train_noise, cfg.noise_seeds[0] + 1000, cfg.clamp)
        kl_cal = mdl.evaluate_incp_kl(params, test.flat(), cal_ood.flat(), incp, cfg.seed, workers=cfg.workers)
        kl_foreign = mdl.evaluate_incp_kl(params, foreign.flat(), foreign.flat(), incp, cfg.seed,
                                          workers=cfg.workers)
        cal = M.calibration_from_scores(elbo_id, kl_cal, cfg.seed)
        r_cal, r_foreign = M.klr_from_scores(kl_cal, cal), M.klr_from_scores(kl_foreign, cal)
        klr = np.r_[r_cal.klr, r_foreign.klr]
        truth = np.r_[np.ones(len(r_cal)), np.zeros(len(r_foreign))]
        M.write_scores(out / "detect_scores.csv", klr, truth,
                       {"incp_kl": np.r_[r_cal.incp_kl, r_foreign.incp_kl],
                        "predicted": np.r_[r_cal.label, r_foreign.label]})
        M.histogram_export(np.r_[kl_cal, kl_foreign], cfg.bins, out / "incp_kl_hist.csv")
        # positive class = calibration OOD; a smaller ratio means more OOD-like
        summary.update(detector="incp_kl_ratio", calibration=cal.to_dict(),
                       auroc=M.auroc(-r_cal.klr, -r_foreign.klr), auprc=M.auprc(-r_cal.klr, -r_foreign.klr),
                       label_accuracy=float(np.mean(np.r_[r_cal.label, r_foreign.label] == truth)),
                       mean_incp_kl_cal=float(kl_cal.mean()), mean_incp_kl_foreign=float(kl_foreign.mean()))
    M.write_json(out / "detect_summary.json", summary)
    return summary


def cmd_export(cfg: ExperimentConfig) -> dict:
    """Concatenate summary CSVs keyed by (dataset, mode, level); duplicate keys are an error."""
    if not cfg.inputs:
        raise ConfigError(["export needs at least one input file"])
    out = _out(cfg, "export")
    header, rows, seen = None, [], {}
    for path in cfg.inputs:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if header is None:
                header = reader.fieldnames
                missing = {"dataset", "mode", "level"} - set(header or ())
                if missing:
                    raise ConfigError([f"{path}: missing key columns {sorted(missing)}"])
            elif reader.fieldnames != header:
                raise ConfigError([f"{path}: columns {reader.fieldnames} do not match {header}"])
            for row in reader:
                key = (row["dataset"], row["mode"], row["level"])
                if key in seen:
                    raise ConfigError([f"{path}: key {key} already provided by {seen[key]}"])
                seen[key] = path
                rows.append(row)
    _write_rows(out / "merged.csv", rows, header)
    M.write_json(out / "merged.json", {"rows": rows})
    return {"rows": len(rows)}


def _write_rows(path: Path, rows: list[dict], header=None) -> None:
    header = header or list(rows[0])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


COMMANDS = {
    "train": cmd_train,
    "gen-ood": cmd_gen_ood,
    "eval-uncertainty": cmd_eval_uncertainty,
    "detect-ood": cmd_detect_ood,
    "export": cmd_export,
}


# ---------------------------------------------------------------- argument parsing


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="incpvae", description="Noise-contrastive-prior VAE experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file of ExperimentConfig fields")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--data-dir", dest="data_dir")
        p.add_argument("--dataset")
        p.add_argument("--foreign")
        p.add_argument("--mode", choices=("vae", "incpvae"))
        p.add_argument("--arch", choices=("mlp", "conv_table8_9"))
        p.add_argument("--latent-dim", dest="latent_dim", type=int)
        p.add_argument("--downscale", type=int)
        p.add_argument("--n-train", dest="n_train", type=int)
        p.add_argument("--gamma", type=float)
        p.add_argument("--sigma-ood", dest="sigma_ood", type=float)
        p.add_argument("--noise-levels", dest="noise_levels", type=_floats)
        p.add_argument("--train-noise", dest="train_noise", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--eval-samples", dest="eval_samples", type=int)
        p.add_argument("--split")
        p.add_argument("--workers", type=int)
        p.add_argument("--checkpoint")
        p.add_argument("--log-level", default="WARNING")
        if name == "export":
            p.add_argument("inputs", nargs="*")
    return ap


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    values: dict = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        raw.pop("command", None)
        unknown = sorted(set(raw) - FIELDS)
        if unknown:
            raise ConfigError([f"unknown config keys {unknown}"])
        values.update(raw)
    for key, value in vars(args).items():
        if key in FIELDS and value is not None and not (key == "inputs" and not value):
            values[key] = value
    return ExperimentConfig(**values).resolve()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        result = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, D.FormatError, mdl.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (mdl.NumericalError, M.DegenerateCalibrationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result, indent=2, sort_keys=True, default=M._json_default))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
