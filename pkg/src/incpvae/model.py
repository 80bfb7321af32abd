"""Encoder/decoder networks, the VAE and INCPVAE objectives, Adam and training."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .data import NoiseSpec
from .diffcore import ContractError, DomainError, Tensor, generator
from .distributions import (BernoulliImage, DiagGaussian, bernoulli_log_prob, kl_diag_gaussian,
                            reparam_sample)

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
CHECKPOINT_MAGIC = b"INCP"
CHECKPOINT_VERSION = 1
TRACE_HEADER = ("epoch", "neg_ielbo", "incp_kl", "total")


class NumericalError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        self.diagnostics = diagnostics
        super().__init__(f"{message}: {diagnostics}")


@dataclass(frozen=True)
class IncpConfig:
    gamma: float = 1.0
    sigma_ood: float = math.exp(0.65)
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(sigma=0.00028))
    # "mean": target is the posterior mean of the paired clean input.
    # "sample": a reparameterised draw from that posterior (still gradient-blocked).
    target: str = "mean"

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.sigma_ood > 0:
            raise ValueError(f"sigma_ood must be > 0, got {self.sigma_ood}")
        if self.target not in ("mean", "sample"):
            raise ValueError(f"target must be 'mean' or 'sample', got {self.target!r}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0
    checkpoint_path: str | None = None
    checkpoint_every: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")


# ---------------------------------------------------------------- architecture


@dataclass(frozen=True)
class Architecture:
    """``mlp`` or ``conv_table8_9`` over H×W×C inputs."""

    kind: str
    input_shape: tuple[int, int, int]
    latent_dim: int
    hidden: tuple[int, ...] = (256, 64)
    alpha: float = LEAKY_SLOPE

    def __post_init__(self):
        if self.kind not in ("mlp", "conv_table8_9"):
            raise ValueError(f"unknown architecture {self.kind!r}")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(s) for s in self.hidden))

    @property
    def n_pixels(self) -> int:
        return int(np.prod(self.input_shape))

    def descriptor(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_descriptor(cls, text: str) -> "Architecture":
        d = json.loads(text)
        return cls(d["kind"], tuple(d["input_shape"]), d["latent_dim"], tuple(d["hidden"]), d["alpha"])


# 5×5 kernels; padding 2 keeps 28→14→7→7 (and 32→16→8→8) so the flattened
# width is 32·7·7 = 1568 ahead of the 3136-unit dense layer.
CONV_KERNEL = 5
CONV_PAD = 2
ENCODER_CONVS = ((256, 2), (32, 2), (32, 1))
DECODER_CONVS = ((32, 1), (256, 2))


def _conv_spatial(side: int) -> list[int]:
    sizes = [side]
    for _, stride in ENCODER_CONVS:
        sizes.append(dc.conv_output_size(sizes[-1], CONV_KERNEL, stride, CONV_PAD))
    return sizes


def _conv_widths(arch: Architecture) -> tuple[int, int]:
    """(flattened conv features, dense units): 1568/3136 at 28×28, 2048/4096 at 32×32."""
    side = _conv_spatial(arch.input_shape[0])[-1]
    flat = ENCODER_CONVS[-1][0] * side * side
    return flat, 2 * flat


def _he_uniform(rng, shape, fan_in: int, alpha: float) -> np.ndarray:
    bound = math.sqrt(6.0 / ((1.0 + alpha**2) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


class ModelParams:
    """Named parameter tensors plus the architecture they instantiate.

    Encoder parameters are prefixed ``enc.``, decoder parameters ``dec.``.
    """

    def __init__(self, arch: Architecture, tensors: dict[str, Tensor]):
        self.arch = arch
        self.tensors = dict(tensors)

    @classmethod
    def init(cls, arch: Architecture, seed: int) -> "ModelParams":
        rng = generator(seed, "init")
        shapes = parameter_shapes(arch)
        tensors = {}
        for name, shape in shapes.items():
            if name.endswith(".b"):
                value = np.zeros(shape)
            else:
                fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
                if name.startswith("dec.deconv"):
                    fan_in = shape[0] * shape[2] * shape[3]
                value = _he_uniform(rng, shape, fan_in, arch.alpha)
            tensors[name] = Tensor(value, requires_grad=True, name=name)
        return cls(arch, tensors)

    @classmethod
    def zeros(cls, arch: Architecture) -> "ModelParams":
        return cls(arch, {name: Tensor(np.zeros(shape), requires_grad=True, name=name)
                          for name, shape in parameter_shapes(arch).items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                                       for k, v in self.tensors.items()})

    def frozen(self) -> "ModelParams":
        """Read-only copy whose tensors record no graph."""
        return ModelParams(self.arch, {k: Tensor(v.data.copy(), name=k) for k, v in self.tensors.items()})

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def encoder_width(self) -> int:
        return self.tensors["enc.head.W"].shape[1]


def parameter_shapes(arch: Architecture) -> dict[str, tuple[int, ...]]:
    L, D = arch.latent_dim, arch.n_pixels
    shapes: dict[str, tuple[int, ...]] = {}
    if arch.kind == "mlp":
        widths = (D, *arch.hidden)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            shapes[f"enc.fc{i}.W"], shapes[f"enc.fc{i}.b"] = (a, b), (b,)
        shapes["enc.head.W"], shapes["enc.head.b"] = (widths[-1], 2 * L), (2 * L,)
        widths = (L, *reversed(arch.hidden))
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            shapes[f"dec.fc{i}.W"], shapes[f"dec.fc{i}.b"] = (a, b), (b,)
        shapes["dec.out.W"], shapes["dec.out.b"] = (widths[-1], D), (D,)
        return shapes
    h, w, c = arch.input_shape
    if h != w:
        raise ValueError("conv_table8_9 expects square images")
    in_ch = c
    for i, (out_ch, _) in enumerate(ENCODER_CONVS):
        shapes[f"enc.conv{i}.W"], shapes[f"enc.conv{i}.b"] = (out_ch, in_ch, CONV_KERNEL, CONV_KERNEL), (out_ch,)
        in_ch = out_ch
    flat, dense = _conv_widths(arch)
    shapes["enc.dense.W"], shapes["enc.dense.b"] = (flat, dense), (dense,)
    shapes["enc.head.W"], shapes["enc.head.b"] = (dense, 2 * L), (2 * L,)
    shapes["dec.dense0.W"], shapes["dec.dense0.b"] = (L, dense), (dense,)
    shapes["dec.dense1.W"], shapes["dec.dense1.b"] = (dense, flat), (flat,)
    in_ch = ENCODER_CONVS[-1][0]
    for i, (out_ch, _) in enumerate(DECODER_CONVS):
        shapes[f"dec.deconv{i}.W"], shapes[f"dec.deconv{i}.b"] = (in_ch, out_ch, CONV_KERNEL, CONV_KERNEL), (out_ch,)
        in_ch = out_ch
    shapes["dec.deconv2.W"], shapes["dec.deconv2.b"] = (in_ch, c, CONV_KERNEL, CONV_KERNEL), (c,)
    return shapes


# ---------------------------------------------------------------- networks


def _as_batch(params: ModelParams, x) -> Tensor:
    x = dc.as_tensor(x)
    arch = params.arch
    if x.ndim == 4 and x.shape[1:] == arch.input_shape:
        x = dc.reshape(x, (x.shape[0], arch.n_pixels))
    if x.ndim == 1 and x.shape[0] == arch.n_pixels:
        x = dc.reshape(x, (1, arch.n_pixels))
    if x.ndim != 2 or x.shape[1] != arch.n_pixels:
        raise ContractError(f"input shape {x.shape} does not match architecture input {arch.input_shape}")
    return x


def encoder_features(params: ModelParams, x) -> Tensor:
    """Activations feeding the Gaussian heads (width 3136 for conv at 28×28)."""
    arch, p = params.arch, params.tensors
    x = _as_batch(params, x)
    a = arch.alpha
    if arch.kind == "mlp":
        h = x
        for i in range(len(arch.hidden)):
            h = dc.leaky_relu(dc.linear(h, p[f"enc.fc{i}.W"], p[f"enc.fc{i}.b"]), a)
        return h
    hh, ww, c = arch.input_shape
    h = dc.transpose(dc.reshape(x, (x.shape[0], hh, ww, c)), (0, 3, 1, 2))
    for i, (_, stride) in enumerate(ENCODER_CONVS):
        h = dc.leaky_relu(dc.conv2d(h, p[f"enc.conv{i}.W"], p[f"enc.conv{i}.b"], stride, CONV_PAD), a)
    h = dc.reshape(h, (h.shape[0], -1))
    return dc.leaky_relu(dc.linear(h, p["enc.dense.W"], p["enc.dense.b"]), a)


def encode(params: ModelParams, x) -> DiagGaussian:
    """q(z|x) as (mean, log-variance) heads of one linear layer."""
    h = encoder_features(params, x)
    out = dc.linear(h, params["enc.head.W"], params["enc.head.b"])
    L = params.arch.latent_dim
    return DiagGaussian(dc.slice_last(out, 0, L), dc.slice_last(out, L, 2 * L))


def decode(params: ModelParams, z) -> BernoulliImage:
    """Pixel logits, flattened in H×W×C order."""
    arch, p, a = params.arch, params.tensors, params.arch.alpha
    z = dc.as_tensor(z)
    if z.ndim == 1:
        z = dc.reshape(z, (1, z.shape[0]))
    if z.ndim != 2 or z.shape[1] != arch.latent_dim:
        raise ContractError(f"latent shape {z.shape} does not match latent dimension {arch.latent_dim}")
    if arch.kind == "mlp":
        h = z
        for i in range(len(arch.hidden)):
            h = dc.leaky_relu(dc.linear(h, p[f"dec.fc{i}.W"], p[f"dec.fc{i}.b"]), a)
        return BernoulliImage(dc.linear(h, p["dec.out.W"], p["dec.out.b"]))
    hh, ww, c = arch.input_shape
    side = _conv_spatial(hh)[-1]
    h = dc.leaky_relu(dc.linear(z, p["dec.dense0.W"], p["dec.dense0.b"]), a)
    h = dc.leaky_relu(dc.linear(h, p["dec.dense1.W"], p["dec.dense1.b"]), a)
    h = dc.reshape(h, (h.shape[0], ENCODER_CONVS[-1][0], side, side))
    strides = [s for _, s in DECODER_CONVS] + [ENCODER_CONVS[0][1]]
    targets = list(reversed(_conv_spatial(hh)[:-1]))  # spatial sizes to restore
    for i, stride in enumerate(strides):
        want = targets[i]
        natural = (h.shape[2] - 1) * stride - 2 * CONV_PAD + CONV_KERNEL
        h = dc.conv_transpose2d(h, p[f"dec.deconv{i}.W"], p[f"dec.deconv{i}.b"], stride, CONV_PAD,
                                output_padding=want - natural)
        if i < len(strides) - 1:
            h = dc.leaky_relu(h, a)
    logits = dc.reshape(dc.transpose(h, (0, 2, 3, 1)), (h.shape[0], arch.n_pixels))
    return BernoulliImage(logits)


# ---------------------------------------------------------------- objectives


def elbo_terms(params: ModelParams, x, eps) -> tuple[Tensor, Tensor, DiagGaussian]:
    """(reconstruction log-likelihood, KL to N(0, I), posterior), one value per row."""
    x = _as_batch(params, x)
    q = encode(params, x)
    z = reparam_sample(q, eps)
    rec = bernoulli_log_prob(decode(params, z), x)
    kl = kl_diag_gaussian(q, DiagGaussian.standard(q.mean.shape))
    return rec, kl, q


def elbo(params: ModelParams, x, eps) -> Tensor:
    """Single-sample ELBO per row; on noisy inputs this is the O-ELBO."""
    rec, kl, _ = elbo_terms(params, x, eps)
    return dc.sub(rec, kl)


def ood_target(params: ModelParams, x, cfg: IncpConfig, eps=None, q_clean: DiagGaussian | None = None) -> DiagGaussian:
    """N(μ, σ_ood² I) centred on the clean input's posterior, with no gradient into μ."""
    q = q_clean if q_clean is not None else encode(params, x)
    if cfg.target == "sample":
        if eps is None:
            raise ContractError("target='sample' needs eps")
        centre = dc.detach(reparam_sample(q, eps))
    else:
        centre = dc.detach(q.mean)
    return DiagGaussian.isotropic(centre, cfg.sigma_ood)


def incp_kl(params: ModelParams, x, x_noisy, cfg: IncpConfig, eps=None,
            q_clean: DiagGaussian | None = None) -> Tensor:
    """KL(q(z̃|x̃) ‖ N(μ_x, σ_ood² I)) per row, x̃ paired row-by-row with x."""
    x, x_noisy = _as_batch(params, x), _as_batch(params, x_noisy)
    if x.shape != x_noisy.shape:
        raise ContractError(f"unpaired inputs: {x.shape} vs {x_noisy.shape}")
    target = ood_target(params, x, cfg, eps, q_clean)
    return kl_diag_gaussian(encode(params, x_noisy), target)


def incpvae_loss(params: ModelParams, x, x_noisy, cfg: IncpConfig, eps, eps_target=None,
                 mode: str = "incpvae") -> tuple[Tensor, dict[str, float]]:
    """mean(−ELBO(x)) + γ·mean(INCP-KL(x, x̃)); ``mode='vae'`` never builds the INCP-KL path."""
    x = _as_batch(params, x)
    if x.shape[0] == 0:
        raise ContractError("empty batch")
    rec, kl, q = elbo_terms(params, x, eps)
    neg_ielbo = dc.mean(dc.sub(kl, rec))
    if mode == "vae":
        return neg_ielbo, {"neg_ielbo": neg_ielbo.item(), "incp_kl": 0.0, "total": neg_ielbo.item()}
    if mode != "incpvae":
        raise ValueError(f"unknown mode {mode!r}")
    kl_ood = dc.mean(incp_kl(params, x, x_noisy, cfg, eps_target, q_clean=q))
    total = dc.add(neg_ielbo, dc.mul(cfg.gamma, kl_ood))
    return total, {"neg_ielbo": neg_ielbo.item(), "incp_kl": kl_ood.item(), "total": total.item()}


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, t in params.tensors.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(t.data))
        v = state.v.setdefault(name, np.zeros_like(t.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        t.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(t.data.dtype)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: ModelParams
    trace: list[dict]
    steps: list[dict]


def train(id_data: np.ndarray, ood_data: np.ndarray | None, cfg: IncpConfig, tcfg: TrainConfig,
          arch: Architecture, mode: str = "incpvae", params: ModelParams | None = None) -> TrainResult:
    """Mini-batch Adam on flattened inputs; ``ood_data[i]`` is the noisy copy of ``id_data[i]``."""
    x_all = np.asarray(id_data, dtype=np.float32).reshape(len(id_data), -1)
    if mode == "incpvae":
        if ood_data is None:
            raise ContractError("incpvae training needs paired OOD inputs")
        ood_all = np.asarray(ood_data, dtype=np.float32).reshape(len(ood_data), -1)
        if ood_all.shape != x_all.shape:
            raise ContractError(f"OOD set {ood_all.shape} is not paired with ID set {x_all.shape}")
    else:
        ood_all = None
    params = params if params is not None else ModelParams.init(arch, tcfg.seed)
    state = AdamState()
    shuffle_rng = generator(tcfg.seed, "shuffle")
    eps_rng = generator(tcfg.seed, "reparam")
    target_rng = generator(tcfg.seed, "target")
    L = arch.latent_dim
    trace, steps = [], []
    n = len(x_all)
    step = 0
    for epoch in range(tcfg.epochs):
        order = shuffle_rng.permutation(n)
        sums = {"neg_ielbo": 0.0, "incp_kl": 0.0, "total": 0.0}
        count = 0
        for b, start in enumerate(range(0, n, tcfg.batch_size)):
            idx = order[start:start + tcfg.batch_size]
            eps = eps_rng.standard_normal((len(idx), L))
            eps_t = target_rng.standard_normal((len(idx), L)) if cfg.target == "sample" else None
            x_ood = ood_all[idx] if ood_all is not None else None
            params.zero_grad()
            where = {"epoch": epoch, "batch": b, "step": step}
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, parts = incpvae_loss(params, x_all[idx], x_ood, cfg, eps, eps_t, mode=mode)
            except DomainError as exc:
                raise NumericalError("non-finite activations", {**where, "cause": str(exc)}) from exc
            if not all(math.isfinite(v) for v in parts.values()):
                raise NumericalError("non-finite loss", {**where, **parts})
            grads = dc.backward(loss, params.values())
            adam_step(params, dict(zip(params.names(), grads)), state, tcfg.lr)
            steps.append({"step": step, **parts})
            for k in sums:
                sums[k] += parts[k] * len(idx)
            count += len(idx)
            step += 1
            if tcfg.max_steps is not None and step >= tcfg.max_steps:
                break
        row = {"epoch": epoch, **{k: v / count for k, v in sums.items()}}
        trace.append(row)
        log.info("epoch %d  -I-ELBO %.4f  INCP-KL %.4f  total %.4f", epoch, row["neg_ielbo"],
                 row["incp_kl"], row["total"])
        if tcfg.checkpoint_path and tcfg.checkpoint_every and (epoch + 1) % tcfg.checkpoint_every == 0:
            save_checkpoint(tcfg.checkpoint_path, params)
        if tcfg.max_steps is not None and step >= tcfg.max_steps:
            break
    if tcfg.checkpoint_path:
        save_checkpoint(tcfg.checkpoint_path, params)
    return TrainResult(params, trace, steps)


# ---------------------------------------------------------------- evaluation


def _sharded(fn, n: int, batch_size: int, workers: int) -> np.ndarray:
    chunks = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    if workers <= 1:
        parts = [fn(a, b) for a, b in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda ab: fn(*ab), chunks))
    return np.concatenate(parts) if parts else np.zeros(0)


def evaluate_elbo(params: ModelParams, x: np.ndarray, seed: int, batch_size: int = 256,
                  workers: int = 1) -> np.ndarray:
    """Per-sample ELBO with one eps draw per row from the (seed, "eval") stream."""
    frozen = params.frozen()
    x = np.asarray(x, dtype=np.float32).reshape(len(x), -1)
    eps = generator(seed, "eval").standard_normal((len(x), params.arch.latent_dim))
    return _sharded(lambda a, b: elbo(frozen, x[a:b], eps[a:b]).data.astype(np.float64),
                    len(x), batch_size, workers)


def evaluate_incp_kl(params: ModelParams, x_src: np.ndarray, x_noisy: np.ndarray, cfg: IncpConfig,
                     seed: int = 0, batch_size: int = 256, workers: int = 1) -> np.ndarray:
    """Per-sample INCP-KL of ``x_noisy`` against targets built from ``x_src``."""
    frozen = params.frozen()
    x_src = np.asarray(x_src, dtype=np.float32).reshape(len(x_src), -1)
    x_noisy = np.asarray(x_noisy, dtype=np.float32).reshape(len(x_noisy), -1)
    eps = generator(seed, "target").standard_normal((len(x_src), params.arch.latent_dim)) \
        if cfg.target == "sample" else None
    return _sharded(lambda a, b: incp_kl(frozen, x_src[a:b], x_noisy[a:b], cfg,
                                         None if eps is None else eps[a:b]).data.astype(np.float64),
                    len(x_src), batch_size, workers)


# ---------------------------------------------------------------- persistence


def save_checkpoint(path, params: ModelParams) -> None:
    """``INCP`` | u32 version | descriptor | u32 count | records, all little-endian.

    A record is u32 name length, name bytes, u32 rank, u32 dims, float32 values.
    """
    desc = params.arch.descriptor().encode("utf-8")
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", CHECKPOINT_VERSION, len(desc)) + desc
    out += struct.pack("<I", len(params.tensors))
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape)
        out += t.data.astype("<f4").tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(out))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    pos = 0

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    def take_bytes(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        pos += n
        return raw[pos - n:pos]

    if take_bytes(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an INCP checkpoint")
    version, desc_len = take("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    arch = Architecture.from_descriptor(take_bytes(desc_len).decode("utf-8"))
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = take_bytes(nlen).decode("utf-8")
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        n = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(take_bytes(4 * n), dtype="<f4").reshape(dims)
        tensors[name] = Tensor(values.astype(np.float32), requires_grad=True, name=name)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes after the last record")
    expected = parameter_shapes(arch)
    if {k: v.shape for k, v in tensors.items()} != expected:
        raise CheckpointError(f"{path}: parameter set does not match architecture {arch.kind}")
    return ModelParams(arch, tensors)


def write_trace(path, trace: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for row in trace:
            w.writerow([row["epoch"], repr(float(row["neg_ielbo"])), repr(float(row["incp_kl"])),
                        repr(float(row["total"]))])
