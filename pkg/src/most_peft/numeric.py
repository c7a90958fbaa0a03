"""Dense tensor arithmetic, seeded initialization, gradient checking and optimizers.

Tensors are plain ``numpy.ndarray`` objects. Float64 is the default working
precision; float32 can be selected per run with :func:`set_precision`.

Random numbers come from numpy's ``PCG64`` bit generator; normal draws use
numpy's ziggurat sampler (``Generator.standard_normal``). Both are stable
across numpy releases, so seeded outputs can be frozen into tests.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

_DTYPES = {"f64": np.float64, "f32": np.float32}
_precision = "f64"


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ConfigError(f"unknown precision {name!r}; expected 'f32' or 'f64'")
    global _precision
    _precision = name


def get_precision() -> str:
    return _precision


def default_dtype():
    return _DTYPES[_precision]


def as_tensor(data, dtype=None, name: str = "tensor") -> np.ndarray:
    """Convert external input to a tensor, rejecting NaN/Inf."""
    arr = np.asarray(data, dtype=dtype or default_dtype())
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def matmul(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    if A.ndim != 2 or B.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {A.shape} and {B.shape}")
    if A.shape[1] != B.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {A.shape} x {B.shape}")
    return A @ B


def batched_matmul(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Per-batch product of ``A[b×m×k]`` and ``B[b×k×n]``."""
    if A.ndim != 3 or B.ndim != 3:
        raise DimensionError(f"batched_matmul expects 3-D operands, got {A.shape} and {B.shape}")
    if A.shape[0] != B.shape[0]:
        raise DimensionError(f"batch extents differ: {A.shape[0]} vs {B.shape[0]}")
    if A.shape[2] != B.shape[1]:
        raise DimensionError(f"inner extents differ: {A.shape} x {B.shape}")
    return np.matmul(A, B)


def gaussian_init(shape: Sequence[int], sigma: float, seed: int, dtype=None) -> np.ndarray:
    """i.i.d. N(0, sigma^2) draws from PCG64(seed), ziggurat normals."""
    if sigma < 0:
        raise ConfigError(f"sigma must be nonnegative, got {sigma}")
    rng = make_rng(seed)
    out = rng.standard_normal(tuple(shape)) * sigma
    return out.astype(dtype or default_dtype(), copy=False)


# --------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    per_input: List[float] = field(default_factory=list)


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b)) / scale) if a.size else 0.0


def finite_diff_check(op, inputs: Sequence[np.ndarray], h: float = 1e-5, tol: float = 1e-5,
                      cotangent: Optional[np.ndarray] = None, seed: int = 0,
                      wrt: Optional[Iterable[int]] = None) -> GradCheckReport:
    """Compare ``op.vjp`` against central differences contracted with one cotangent.

    ``op`` needs ``forward(*inputs)`` and ``vjp(inputs, g)`` returning one
    cotangent per input. The error for input ``i`` is
    ``max|analytic - numeric| / max(|analytic|, |numeric|, 1)``.
    """
    if h <= 0:
        raise ConfigError("finite-difference step must be positive")
    name = getattr(op, "name", type(op).__name__)
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    for x in inputs:
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite input to {name}")
    out = np.asarray(op.forward(*inputs), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite output from {name}")
    if cotangent is None:
        cotangent = make_rng(seed).standard_normal(out.shape)
    analytic = op.vjp(inputs, cotangent)
    indices = range(len(inputs)) if wrt is None else list(wrt)
    errs = []
    for i in indices:
        x = inputs[i]
        num = np.zeros_like(x)
        flat = x.reshape(-1)
        nflat = num.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = np.vdot(cotangent, op.forward(*inputs))
            flat[j] = orig - h
            fm = np.vdot(cotangent, op.forward(*inputs))
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite value while perturbing {name}")
            nflat[j] = (fp - fm) / (2 * h)
        a = np.asarray(analytic[i], dtype=np.float64)
        if a.shape != x.shape:
            raise DimensionError(f"{name}: vjp shape {a.shape} != input shape {x.shape}")
        errs.append(_rel_err(a, num))
    worst = max(errs) if errs else 0.0
    return GradCheckReport(worst, worst <= tol, errs)


def grad_check_params(loss_fn: Callable[[], float], params: Dict[str, np.ndarray],
                      analytic: Dict[str, np.ndarray], h: float = 1e-5,
                      max_entries: Optional[int] = None, seed: int = 0) -> Dict[str, float]:
    """Central-difference check of a scalar loss against analytic parameter grads.

    Parameters are perturbed in place. ``max_entries`` subsamples large tensors.
    Returns the relative error per parameter name.
    """
    rng = make_rng(seed)
    errs = {}
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(idx.size)
        for k, j in enumerate(idx):
            orig = flat[j]
            flat[j] = orig + h
            fp = loss_fn()
            flat[j] = orig - h
            fm = loss_fn()
            flat[j] = orig
            num[k] = (fp - fm) / (2 * h)
        if not np.all(np.isfinite(num)):
            raise NumericError(f"non-finite finite-difference gradient for {name}")
        errs[name] = _rel_err(analytic[name].reshape(-1)[idx], num)
    return errs


# --------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.05
    eps: float = 1e-8
    kind: str = "adamw"
    momentum: float = 0.0
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd(lr: float = 0.1, momentum: float = 0.0, weight_decay: float = 0.0) -> OptimizerState:
    return OptimizerState(lr=lr, momentum=momentum, weight_decay=weight_decay, kind="sgd")


def adamw(lr: float = 1e-3, betas=(0.9, 0.999), weight_decay: float = 0.05,
          eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(lr=lr, betas=tuple(betas), weight_decay=weight_decay, eps=eps)


def optimizer_step(state: OptimizerState, params: Dict[str, np.ndarray],
                   grads: Dict[str, np.ndarray], lr: Optional[float] = None,
                   no_decay: Iterable[str] = ()) -> None:
    """Update ``params`` in place. Names absent from ``grads`` are left alone."""
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    no_decay = set(no_decay)
    for name, g in grads.items():
        p = params[name]
        wd = 0.0 if name in no_decay else state.weight_decay
        if g.shape != p.shape:
            raise DimensionError(f"grad for {name} has shape {g.shape}, param {p.shape}")
        if state.kind == "sgd":
            if wd:
                p -= lr * wd * p
            if state.momentum:
                buf = state.m.setdefault(name, np.zeros_like(p))
                buf *= state.momentum
                buf += g
                g = buf
            p -= lr * g
            continue
        b1, b2 = state.betas
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        # decoupled decay
        p -= lr * wd * p
        p -= lr * mhat / (np.sqrt(vhat) + state.eps)


def cosine_lr(base_lr: float, step: int, total: int, warmup: int = 0, min_lr: float = 0.0) -> float:
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    frac = min(max(frac, 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * frac))
