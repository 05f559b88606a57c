"""Minimal differentiable-computation substrate.

Everything trainable in this package runs through here: seeded parameter
initialization, the two optimizers (Adam and SGD with momentum), a
deterministic single-threaded training loop, a central-difference gradient
checker, and a byte-stable checkpoint format.

Tensors and autodiff are provided by torch (CPU). Training defaults to
float64; gradient checks are always float64.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import torch

from .errors import SignatureError, TrainingDivergedError, ValidationError

DEFAULT_DTYPE = torch.float64

OPTIMIZER_KINDS = ("adam", "sgd-momentum")


def new_generator(seed: int) -> torch.Generator:
    """Fresh torch RNG seeded with `seed`."""
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def seeded_uniform_(tensor: torch.Tensor, fan_in: int, generator: torch.Generator) -> torch.Tensor:
    """In-place uniform init on [-1/sqrt(fan_in), 1/sqrt(fan_in)].

    The initialization scheme is our choice; it is applied uniformly to every
    weight tensor in the repo so that models are a pure function of their seed.
    """
    bound = 1.0 / math.sqrt(max(1, fan_in))
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)
    return tensor


def init_module(module: torch.nn.Module, seed: int) -> torch.nn.Module:
    """Re-initialize all Linear/Conv2d parameters of `module` from `seed`.

    Parameters are visited in named order, so the result is deterministic
    regardless of how the module was constructed.
    """
    g = new_generator(seed)
    for _, sub in sorted(module.named_modules(), key=lambda kv: kv[0]):
        if isinstance(sub, torch.nn.Linear):
            fan_in = sub.in_features
            seeded_uniform_(sub.weight, fan_in, g)
            if sub.bias is not None:
                seeded_uniform_(sub.bias, fan_in, g)
        elif isinstance(sub, torch.nn.Conv2d):
            fan_in = sub.in_channels * sub.kernel_size[0] * sub.kernel_size[1]
            seeded_uniform_(sub.weight, fan_in, g)
            if sub.bias is not None:
                seeded_uniform_(sub.bias, fan_in, g)
    return module


@dataclass
class ParamBlock:
    """A named set of tensors with a trainability flag."""

    name: str
    tensors: dict[str, torch.Tensor]
    trainable: bool = True


def named_tensors(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    """Flat name -> parameter map in deterministic (sorted) order."""
    return {name: p for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0])}


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str
    learning_rate: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 1

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValidationError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "batch_size": self.batch_size,
        }

    @staticmethod
    def from_dict(d: dict) -> "OptimizerConfig":
        return OptimizerConfig(**d)


# Stage presets (translation / metric / classification).
TRANSLATION_OPT = OptimizerConfig("adam", 2e-4, batch_size=3)
METRIC_OPT = OptimizerConfig("sgd-momentum", 1e-3, momentum=0.9, batch_size=180)
CLASSIFIER_OPT = OptimizerConfig("adam", 5e-4, batch_size=180)


class SGDMomentum:
    """v <- momentum*v + g;  p <- p - lr*v  (velocity starts at zero)."""

    def __init__(self, params: Sequence[torch.Tensor], cfg: OptimizerConfig, lr_scale: Sequence[float] | None = None):
        self.params = list(params)
        self.cfg = cfg
        self.lr_scale = list(lr_scale) if lr_scale is not None else [1.0] * len(self.params)
        self.velocity = [torch.zeros_like(p) for p in self.params]

    def step(self):
        with torch.no_grad():
            for p, v, s in zip(self.params, self.velocity, self.lr_scale):
                if p.grad is None:
                    continue
                v.mul_(self.cfg.momentum).add_(p.grad)
                p.add_(v, alpha=-self.cfg.learning_rate * s)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    """Bias-corrected Adam: m/(1-b1^t), v/(1-b2^t), p -= lr*mhat/(sqrt(vhat)+eps)."""

    def __init__(self, params: Sequence[torch.Tensor], cfg: OptimizerConfig, lr_scale: Sequence[float] | None = None):
        self.params = list(params)
        self.cfg = cfg
        self.lr_scale = list(lr_scale) if lr_scale is not None else [1.0] * len(self.params)
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.epsilon
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        with torch.no_grad():
            for p, m, v, s in zip(self.params, self.m, self.v, self.lr_scale):
                if p.grad is None:
                    continue
                g = p.grad
                m.mul_(b1).add_(g, alpha=1.0 - b1)
                v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
                mhat = m / bc1
                vhat = v / bc2
                p.add_(mhat / (vhat.sqrt() + eps), alpha=-self.cfg.learning_rate * s)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def make_optimizer(params: Sequence[torch.Tensor], cfg: OptimizerConfig, lr_scale: Sequence[float] | None = None):
    if cfg.kind == "adam":
        return Adam(params, cfg, lr_scale)
    return SGDMomentum(params, cfg, lr_scale)


def forward(model: torch.nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Run `model` on `x`, checking the declared input signature and finiteness.

    A model may declare `input_signature` as a tuple of trailing extents
    (channels, height, width for image models); mismatches raise SignatureError.
    """
    sig = getattr(model, "input_signature", None)
    if sig is not None:
        trailing = tuple(x.shape[-len(sig):])
        if trailing != tuple(sig):
            raise SignatureError(f"input trailing shape {trailing} != signature {tuple(sig)}")
    out = model(x)
    if not torch.isfinite(out).all():
        raise ValidationError("model produced non-finite output")
    return out


def train_steps(
    model: torch.nn.Module,
    data_iter: Iterator,
    loss_fn: Callable[[torch.nn.Module, object], torch.Tensor],
    cfg: OptimizerConfig,
    steps: int,
    seed: int,
    lr_scale: Sequence[float] | None = None,
) -> list[float]:
    """Run `steps` optimizer updates; returns the per-step loss trace.

    Deterministic given (model state, data order, cfg, seed): the seed is
    reserved for loss functions that draw randomness and is exposed to them
    via `loss_fn(model, batch)` closures created by the caller.
    """
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    params = [p for p in model.parameters() if p.requires_grad]
    opt = make_optimizer(params, cfg, lr_scale)
    trace: list[float] = []
    for step in range(steps):
        batch = next(data_iter)
        opt.zero_grad()
        loss = loss_fn(model, batch)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergedError(step)
        loss.backward()
        opt.step()
        trace.append(value)
    return trace


@dataclass
class GradCheckEntry:
    index: int
    coord: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst: GradCheckEntry | None
    n_coords: int
    failure: str | None = None

    def __bool__(self) -> bool:
        return self.passed


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    step: float = 1e-5,
    tol: float = 1e-3,
) -> GradCheckReport:
    """Compare autograd gradients of `loss_fn()` against central differences.

    For every coordinate of every tensor in `params`, reports
    |analytic - numeric| / max(1, |analytic|); the check passes iff all
    coordinates are below `tol`. A non-finite loss at any perturbed point
    fails the check with the offending coordinate identified.
    """
    if step <= 0:
        raise ValidationError("step must be > 0")
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise ValidationError("grad_check requires float64 parameters")
        p.requires_grad_(True)

    loss = loss_fn()
    if loss.dim() != 0:
        raise ValidationError("loss_fn must be scalar-valued")
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    worst: GradCheckEntry | None = None
    max_rel = 0.0
    n_coords = 0
    with torch.no_grad():
        for idx, (p, g) in enumerate(zip(params, grads)):
            g_dense = torch.zeros_like(p) if g is None else g
            flat = p.reshape(-1)
            for k in range(flat.numel()):
                n_coords += 1
                orig = flat[k].item()
                flat[k] = orig + step
                f_plus = float(loss_fn().detach())
                flat[k] = orig - step
                f_minus = float(loss_fn().detach())
                flat[k] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    coord = tuple(int(c) for c in torch.unravel_index(torch.tensor(k), p.shape))
                    return GradCheckReport(
                        passed=False, max_rel_err=math.inf, worst=None, n_coords=n_coords,
                        failure=f"non-finite loss at param {idx} coord {coord}",
                    )
                numeric = (f_plus - f_minus) / (2.0 * step)
                analytic = float(g_dense.reshape(-1)[k])
                rel = abs(analytic - numeric) / max(1.0, abs(analytic))
                if rel >= max_rel:
                    coord = tuple(int(c) for c in torch.unravel_index(torch.tensor(k), p.shape))
                    worst = GradCheckEntry(idx, coord, analytic, numeric, rel)
                    max_rel = rel
    return GradCheckReport(passed=max_rel < tol, max_rel_err=max_rel, worst=worst, n_coords=n_coords)


# ---------------------------------------------------------------------------
# Checkpoint container: versioned binary, byte-stable for identical contents.
# Layout: magic, 8-byte big-endian header length, JSON header (sorted keys),
# then raw little-endian tensor buffers in header index order.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MXFCKPT1"
CHECKPOINT_SCHEMA = "matxfer-checkpoint-v1"

_DTYPE_TAGS = {torch.float64: "f8", torch.float32: "f4", torch.int64: "i8"}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    seed: int
    optimizer: OptimizerConfig | None
    schema: str = CHECKPOINT_SCHEMA
    extra: dict = field(default_factory=dict)


def save_checkpoint(
    path,
    tensors: dict[str, torch.Tensor],
    seed: int,
    optimizer: OptimizerConfig | None = None,
    extra: dict | None = None,
) -> None:
    index = []
    buffers = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous()
        if t.dtype not in _DTYPE_TAGS:
            raise ValidationError(f"unsupported checkpoint dtype {t.dtype}")
        raw = t.numpy().tobytes()
        index.append({
            "name": name,
            "dtype": _DTYPE_TAGS[t.dtype],
            "shape": list(t.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        buffers.append(raw)
        offset += len(raw)
    header = {
        "schema": CHECKPOINT_SCHEMA,
        "seed": int(seed),
        "optimizer": optimizer.to_dict() if optimizer is not None else None,
        "extra": extra or {},
        "index": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "big"))
        fh.write(blob)
        for raw in buffers:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    import numpy as np

    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValidationError("not a matxfer checkpoint")
        n = int.from_bytes(fh.read(8), "big")
        header = json.loads(fh.read(n).decode("utf-8"))
        if header.get("schema") != CHECKPOINT_SCHEMA:
            raise ValidationError(f"unsupported checkpoint schema {header.get('schema')!r}")
        payload = fh.read()
    tensors = {}
    for entry in header["index"]:
        raw = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        dtype = _TAG_DTYPES[entry["dtype"]]
        arr = np.frombuffer(raw, dtype=str(dtype).replace("torch.", "")).copy()
        tensors[entry["name"]] = torch.from_numpy(arr).to(dtype).reshape(entry["shape"])
    opt = header.get("optimizer")
    return Checkpoint(
        tensors=tensors,
        seed=header["seed"],
        optimizer=OptimizerConfig.from_dict(opt) if opt else None,
        extra=header.get("extra", {}),
    )


def load_into_module(module: torch.nn.Module, ckpt: Checkpoint) -> None:
    own = named_tensors(module)
    missing = set(own) - set(ckpt.tensors)
    if missing:
        raise ValidationError(f"checkpoint missing tensors: {sorted(missing)}")
    with torch.no_grad():
        for name, p in own.items():
            src = ckpt.tensors[name]
            if tuple(src.shape) != tuple(p.shape):
                raise ValidationError(f"shape mismatch for {name}: {tuple(src.shape)} vs {tuple(p.shape)}")
            p.copy_(src.to(p.dtype))
