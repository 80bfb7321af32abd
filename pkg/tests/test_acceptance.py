"""Acceptance criteria 1 to 8, one PASS/FAIL line each.

Criteria 4 to 6 need FashionMNIST and MNIST IDX files under ``$INCPVAE_DATA_DIR``
(see README). Without them those criteria fail with a "missing data" line.
When Animal-MNIST is present the same pipeline also runs on it and prints
INFO lines; those numbers never decide a criterion.
"""

import json
import math
import time

import numpy as np
import pytest

from incpvae import cli
from incpvae import diffcore as dc
from incpvae import metrics as M
from incpvae import model as mdl
from incpvae.data import NoiseSpec, add_noise, load_named, make_synthetic2d
from incpvae.desk import DeskConfig, detection, fit, likelihood, load_sets, uncertainty
from incpvae.distributions import DiagGaussian, kl_diag_gaussian
from conftest import ACCEPTANCE_LINES, numeric_grad, rel_err
from oracles import auprc_steps, auroc_pairs, mc_kl


def report(n, ok: bool, msg: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {msg}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def info(msg: str) -> None:
    ACCEPTANCE_LINES.append(f"[INFO] {msg}")
    print(f"[INFO] {msg}")


# ---------------------------------------------------------------- 1. gradients


def _fd(build, arrays):
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [dc.tensor(a, requires_grad=True) for a in arrays]
    analytic = dc.backward(build(*ts), ts)
    numeric = numeric_grad(lambda *xs: build(*[dc.tensor(x) for x in xs]).item(), arrays)
    return max(rel_err(a, b) for a, b in zip(analytic, numeric))


def _away_from_kink(x):
    return np.where(np.abs(x) < 1e-3, 0.5, x)


def _op_cases(r):
    """(name, tolerance, build, inputs) for every differentiable op, random shapes and values."""
    n, m = r.integers(2, 5), r.integers(2, 5)
    a, b = r.normal(size=(n, m)), r.normal(size=(n, m))
    pos = r.uniform(0.2, 3.0, size=(n, m))
    probe = r.normal(size=(n, m))
    elem = lambda f: (lambda t: dc.sum(f(t) * probe))
    cases = [
        ("add", 1e-4, lambda s, t: dc.sum(dc.add(s, t) * probe), [a, b]),
        ("sub", 1e-4, lambda s, t: dc.sum(dc.sub(s, t) * probe), [a, b]),
        ("mul", 1e-4, lambda s, t: dc.sum(dc.mul(s, t) * probe), [a, b]),
        ("div", 1e-4, lambda s, t: dc.sum(dc.div(s, t) * probe), [a, pos]),
        ("negate", 1e-4, elem(dc.negate), [a]),
        ("square", 1e-4, elem(dc.square), [a]),
        ("exp", 1e-4, elem(dc.exp), [a]),
        ("log", 1e-4, elem(dc.log), [pos]),
        ("sigmoid", 1e-4, elem(dc.sigmoid), [a]),
        ("softplus", 1e-4, elem(dc.softplus), [a]),
        ("leaky_relu", 1e-4, elem(lambda t: dc.leaky_relu(t, 0.01)), [_away_from_kink(a)]),
    ]
    k = r.integers(1, 4)
    w, bias = r.normal(size=(m, k)), r.normal(size=k)
    cases += [
        ("sum", 1e-3, lambda t: dc.sum(dc.square(dc.sum(t, axis=0))), [a]),
        ("mean", 1e-3, lambda t: dc.sum(dc.square(dc.mean(t, axis=1))), [a]),
        ("reshape", 1e-3, lambda t: dc.sum(dc.reshape(t, (m, n)) * probe.reshape(m, n)), [a]),
        ("transpose", 1e-3, lambda t: dc.sum(dc.transpose(t, (1, 0)) * probe.T), [a]),
        ("slice_last", 1e-3, lambda t: dc.sum(dc.square(dc.slice_last(t, 0, 1))), [a]),
        ("matmul", 1e-3, lambda s, t: dc.sum(dc.square(dc.matmul(s, t))), [a, w]),
        ("linear", 1e-3, lambda s, t, c: dc.sum(dc.square(dc.linear(s, t, c))), [a, w, bias]),
    ]
    side, stride, pad = int(r.integers(4, 7)), int(r.integers(1, 3)), int(r.integers(0, 2))
    x = r.normal(size=(1, 2, side, side))
    kern, cb = r.normal(size=(2, 2, 3, 3)), r.normal(size=2)
    out = dc.conv_output_size(side, 3, stride, pad)
    p_conv = r.normal(size=(1, 2, out, out))
    cases.append(("conv2d", 1e-3, lambda s, t, c: dc.sum(dc.conv2d(s, t, c, stride, pad) * p_conv), [x, kern, cb]))
    op = int(r.integers(0, stride))
    xs = r.normal(size=(1, 2, 3, 3))
    tside = (3 - 1) * stride - 2 * pad + 3 + op
    p_t = r.normal(size=(1, 2, tside, tside))
    cases.append(("conv_transpose2d", 1e-3,
                  lambda s, t, c: dc.sum(dc.conv_transpose2d(s, t, c, stride, pad, op) * p_t), [xs, kern, cb]))
    return cases


def _loss_case(seed):
    arch = mdl.Architecture("mlp", (1, 4, 1), latent_dim=2, hidden=(8,))
    r = np.random.default_rng(seed)
    params = mdl.ModelParams.init(arch, seed)
    x = r.uniform(0.05, 0.95, size=(3, 4))
    xn = np.clip(x + 0.1 * r.standard_normal((3, 4)), 0, 1)
    eps = r.standard_normal((3, 2))
    cfg = mdl.IncpConfig(gamma=float(r.uniform(0.1, 5.0)))
    loss, _ = mdl.incpvae_loss(params, x, xn, cfg, eps)
    analytic = dc.backward(loss, params.values())
    q0 = mdl.encode(params.frozen(), x)
    q0 = DiagGaussian(dc.tensor(q0.mean.data.copy()), dc.tensor(q0.log_var.data.copy()))

    def f(*_):
        # the stop-gradient target stays at its value for the unperturbed parameters
        neg = dc.mean(dc.negate(mdl.elbo(params, x, eps)))
        return dc.add(neg, dc.mul(cfg.gamma, dc.mean(mdl.incp_kl(params, x, xn, cfg, q_clean=q0)))).item()

    numeric = numeric_grad(f, [t.data for t in params.values()])
    return max(rel_err(a, b) for a, b in zip(analytic, numeric))


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    failures = []
    with dc.precision(np.float64):
        for seed in range(100):
            r = np.random.default_rng(seed)
            for name, tol, build, inputs in _op_cases(r):
                err = _fd(build, inputs)
                worst[name] = max(worst.get(name, 0.0), err)
                if err > tol:
                    failures.append((seed, name, err))
            err = _loss_case(seed)
            worst["incpvae_loss"] = max(worst.get("incpvae_loss", 0.0), err)
            if err > 1e-3:
                failures.append((seed, "incpvae_loss", err))
    secs = time.perf_counter() - t0
    elem = max(v for k, v in worst.items() if k in ("add", "sub", "mul", "div", "negate", "square", "exp",
                                                      "log", "sigmoid", "softplus", "leaky_relu"))
    ok = not failures and secs < 60
    report(1, ok, f"{len(worst)} ops x 100 configs, worst elementwise rel.err {elem:.2e} (tol 1e-4), "
                  f"worst structural {max(worst.values()):.2e} (tol 1e-3), incpvae_loss "
                  f"{worst['incpvae_loss']:.2e}, {secs:.1f}s (limit 60s)")
    assert ok, failures[:5]


# ---------------------------------------------------------------- 2. KL oracle


def test_criterion_2_kl_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    with dc.precision(np.float64):
        for i in range(20):
            r = np.random.default_rng(100 + i)
            mq, mp = r.normal(size=8), r.normal(size=8)
            lvq, lvp = r.uniform(-1.5, 1.5, 8), r.uniform(-1.5, 1.5, 8)
            closed = kl_diag_gaussian(DiagGaussian(dc.tensor(mq), dc.tensor(lvq)),
                                      DiagGaussian(dc.tensor(mp), dc.tensor(lvp))).item()
            worst = max(worst, abs(mc_kl(mq, lvq, mp, lvp, 1_000_000, seed=i) - closed) / closed)
        q = DiagGaussian.standard((1, 8))
        p = DiagGaussian.isotropic(dc.tensor(np.zeros((1, 8))), math.exp(0.65))
        per_dim = kl_diag_gaussian(q, p).item() / 8
    secs = time.perf_counter() - t0
    ok = worst <= 0.01 and abs(per_dim - 0.28627) <= 1e-4 and secs < 120
    report(2, ok, f"20 pairs, worst Monte-Carlo rel. gap {worst:.2e} (tol 1e-2); N(0,1) vs N(0,e^1.3) "
                  f"per-dim {per_dim:.6f} (target 0.28627 +- 1e-4); {secs:.1f}s (limit 120s)")
    assert ok


# ---------------------------------------------------------------- 3. reduction identity


def test_criterion_3_gamma_zero_reduction():
    ds = make_synthetic2d(512, seed=0)
    noisy = add_noise(ds, NoiseSpec(0.05, seed=1))
    arch = mdl.Architecture("mlp", ds.shape, 2, (32, 16))
    tcfg = mdl.TrainConfig(lr=1e-3, batch_size=32, epochs=10, seed=4, max_steps=50)
    a = mdl.train(ds.flat(), noisy.flat(), mdl.IncpConfig(gamma=0.0), tcfg, arch, mode="incpvae")
    b = mdl.train(ds.flat(), None, mdl.IncpConfig(gamma=0.0), tcfg, arch, mode="vae")
    same_steps = [(s["neg_ielbo"], s["total"]) for s in a.steps] == [(s["neg_ielbo"], s["total"]) for s in b.steps]
    same_params = all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params.names())
    ok = len(a.steps) == 50 and same_steps and same_params
    report(3, ok, f"gamma=0 INCPVAE vs VAE over {len(a.steps)} steps: loss trace identical={same_steps}, "
                  f"parameters bitwise identical={same_params}")
    assert ok


# ---------------------------------------------------------------- 4 to 6. desk scale


def _desk(cfg: DeskConfig):
    t0 = time.perf_counter()
    train, test, foreign = load_sets(cfg)
    params = fit(cfg, train, "incpvae")
    det = detection(cfg, params, test, foreign)
    t_det = time.perf_counter() - t0
    t0 = time.perf_counter()
    unc = uncertainty(cfg, params, test)
    t_unc = time.perf_counter() - t0
    vae = fit(cfg, train, "vae")
    lik = likelihood(cfg, vae, test, foreign)
    return {"detection": det, "uncertainty": unc, "likelihood": lik, "t_det": t_det, "t_unc": t_unc}


@pytest.fixture(scope="module")
def desk():
    cfg = DeskConfig()
    try:
        load_named(cfg.dataset, "test", cfg.data_dir, n=1)
        load_named(cfg.foreign, "test", cfg.data_dir, n=1)
    except FileNotFoundError as exc:
        return {"missing": str(exc)}
    return _desk(cfg)


@pytest.fixture(scope="module")
def proxy():
    cfg = DeskConfig(dataset="animalmnist", foreign="mnist")
    try:
        load_named(cfg.dataset, "test", cfg.data_dir, n=1)
        load_named(cfg.foreign, "test", cfg.data_dir, n=1)
    except FileNotFoundError:
        return None
    return _desk(cfg)


def _trend(rows):
    return " < ".join(f"{r['mean_u']:.4f}" for r in rows), all(
        b["mean_u"] > a["mean_u"] for a, b in zip(rows, rows[1:]))


def test_criterion_4_detection(desk, proxy):
    if proxy:
        d = proxy["detection"]
        info(f"criterion 4 proxy (Animal-MNIST ID vs MNIST, same recipe): AUROC {d['auroc']:.3f}, "
             f"AUPRC {d['auprc']:.3f}, {proxy['t_det']:.0f}s")
    if "missing" in desk:
        report(4, False, f"FashionMNIST/MNIST missing ({desk['missing']}); not evaluated")
        pytest.fail(desk["missing"])
    d = desk["detection"]
    ok = d["auroc"] >= 0.95 and d["auprc"] >= 0.95 and desk["t_det"] <= 900
    report(4, ok, f"INCP-KL ratio, calibration OOD vs 1000 MNIST: AUROC {d['auroc']:.3f}, AUPRC {d['auprc']:.3f} "
                  f"(need >= 0.95 each), {desk['t_det']:.0f}s (limit 900s)")
    assert ok


def test_criterion_5_uncertainty(desk, proxy):
    if proxy:
        trend, mono = _trend(proxy["uncertainty"])
        info(f"criterion 5 proxy: mean U {trend} strictly increasing={mono}")
    if "missing" in desk:
        report(5, False, f"FashionMNIST missing ({desk['missing']}); not evaluated")
        pytest.fail(desk["missing"])
    trend, mono = _trend(desk["uncertainty"])
    ok = mono and desk["t_unc"] <= 120 and not desk["uncertainty"][0]["sign_degenerate"]
    report(5, ok, f"mean U over sigma0<sigma1<sigma2: {trend}, strictly increasing={mono}, "
                  f"{desk['t_unc']:.1f}s (limit 120s)")
    assert ok


def test_criterion_6_likelihood_direction(desk, proxy):
    if proxy:
        p = proxy["likelihood"]
        info(f"criterion 6 proxy: VAE mean ELBO foreign {p['mean_elbo_foreign']:.2f} vs ID "
             f"{p['mean_elbo_id']:.2f} (SE {p['se_elbo_id']:.2f}), direction holds={p['direction_holds']}")
    if "missing" in desk:
        report(6, False, f"FashionMNIST/MNIST missing ({desk['missing']}); not evaluated")
        pytest.fail(desk["missing"])
    p = desk["likelihood"]
    ok = p["direction_holds"]
    report(6, ok, f"VAE mean ELBO MNIST {p['mean_elbo_foreign']:.2f} >= FashionMNIST {p['mean_elbo_id']:.2f} - "
                  f"SE {p['se_elbo_id']:.2f}: {ok} (likelihood AUROC {p['auroc']:.3f}, informational)")
    assert ok


# ---------------------------------------------------------------- 7. metric oracles


def test_criterion_7_metric_oracles():
    r = np.random.default_rng(7)
    worst = 0.0
    for i in range(200):
        n_pos, n_neg = r.integers(1, 51, size=2)
        # a coarse grid forces ties in about half the sets
        if i % 2:
            pos, neg = r.integers(0, 8, n_pos) / 4.0, r.integers(0, 8, n_neg) / 4.0
        else:
            pos, neg = r.normal(size=n_pos), r.normal(size=n_neg)
        worst = max(worst, abs(M.auroc(pos, neg) - auroc_pairs(pos, neg)),
                    abs(M.auprc(pos, neg) - auprc_steps(pos, neg)))
    ok = worst <= 1e-12
    report(7, ok, f"200 random score sets (size <= 50): worst |metric - brute force| {worst:.1e} (tol 1e-12)")
    assert ok


# ---------------------------------------------------------------- 8. determinism and persistence


def _outputs(root):
    return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if p.name != cli.RESOLVED}


def test_criterion_8_determinism(tmp_path):
    fast = ["--dataset", "synthetic2d", "--epochs", "3", "--n-train", "300", "--lr", "1e-3",
            "--eval-samples", "150"]
    first, mismatched = tmp_path / "first", []
    summary = first / "s.csv"
    for cmd in ("train", "gen-ood", "eval-uncertainty", "detect-ood", "export"):
        extra = [str(first / "uncertainty_summary.csv")] if cmd == "export" else []
        assert cli.main([cmd, *fast, "--out-dir", str(first), *extra]) == 0
        snap = tmp_path / f"{cmd}.json"
        snap.write_bytes((first / cli.RESOLVED).read_bytes())
        before = _outputs(first)
        replay = tmp_path / f"replay-{cmd}"
        args = [cmd, "--config", str(snap), "--out-dir", str(replay)]
        if cmd in ("eval-uncertainty", "detect-ood"):
            args += ["--checkpoint", str(first / cli.CHECKPOINT)]
        assert cli.main(args) == 0
        produced = _outputs(replay)
        mismatched += [f"{cmd}:{k}" for k in produced if produced[k] != before.get(k)]
    params = mdl.ModelParams.init(mdl.Architecture("conv_table8_9", (8, 8, 1), 3), 1)
    mdl.save_checkpoint(tmp_path / "m.incp", params)
    back = mdl.load_checkpoint(tmp_path / "m.incp")
    exact = all(np.array_equal(params[k].data, back[k].data) for k in params.names()) and back.arch == params.arch
    ok = not mismatched and exact
    report(8, ok, f"5 commands replayed from resolved-config snapshots, differing files: {mismatched or 'none'}; "
                  f"checkpoint round-trip exact={exact}")
    assert ok
