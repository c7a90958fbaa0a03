"""Point Monarch deltas, the MoST linear layer, merging and the fusion head.

A MoST layer computes ``X @ W0 + bias + K((K X) @ M)`` where ``W0`` and
``bias`` are frozen, ``M`` is a Monarch matrix and ``K = I + lam * (A * D)``
is the K-Rectify token operator of the current cloud. ``L = 0`` and ``lam = 0``
at initialization, so the delta starts at exactly zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, UsageError
from .geometry import KnnGraph, k_rectify_apply
from .numeric import default_dtype, gaussian_init
from .structured import MonarchMatrix, child_seed, init_monarch


def most_sigma(d_in: int, d_out: int) -> float:
    """Init std of ``R``: ``sqrt(min(d_in, d_out) / d_in**2)``."""
    return math.sqrt(min(d_in, d_out) / d_in ** 2)


@dataclass
class PointMonarchDelta:
    monarch: MonarchMatrix
    lam: np.ndarray = field(default_factory=lambda: np.zeros((), dtype=default_dtype()))

    @property
    def d_in(self) -> int:
        return self.monarch.d_in

    @property
    def d_out(self) -> int:
        return self.monarch.d_out

    def params(self) -> Dict[str, np.ndarray]:
        out = dict(self.monarch.params())
        out["lam"] = self.lam
        return out

    def param_count(self) -> int:
        return self.monarch.param_count() + 1

    def apply_var(self, x, get: Callable[[str], ad.Var], neighbors) -> ad.Var:
        lam = get("lam")
        h = ad.token_mix(x, neighbors, lam)
        h = self.monarch.apply_var(h, get)
        return ad.token_mix(h, neighbors, lam)


def init_most(d_in: int, d_out: int, b: int, variant: str = "full", seed: int = 0,
              rank: Optional[int] = None, zero_left: bool = True) -> PointMonarchDelta:
    """Fresh delta: ``L = 0``, ``R ~ N(0, sigma^2)``, ``lam = 0``.

    ``zero_left=False`` also draws ``L`` (used for sparse training, where a
    zero factor in every layer of a stack would never receive gradient).
    """
    M = MonarchMatrix(d_in, d_out, b, variant, rank=rank)
    init_monarch(M, most_sigma(d_in, d_out), seed)
    if not zero_left:
        s = math.sqrt(1.0 / M.d_s)
        for i, (k, v) in enumerate(sorted(M.L.params.items())):
            M.L.params[k] = gaussian_init(v.shape, s, child_seed(seed, 7, i), dtype=default_dtype())
    return PointMonarchDelta(M)


def point_monarch_apply(delta: PointMonarchDelta, graph: KnnGraph, X: np.ndarray,
                        neighbors=None) -> np.ndarray:
    """``K (K X) M`` for one cloud: token mix, Monarch on channels, token mix.

    ``neighbors`` optionally passes a prebuilt ``graph.neighbor_matrix()``;
    it is shared by every layer of a cloud, so callers may build it once.
    """
    if X.shape[0] != graph.n_tokens:
        raise DimensionError(f"{X.shape[0]} tokens but graph has {graph.n_tokens}")
    lam = float(delta.lam)
    if neighbors is None:
        mix = lambda h: k_rectify_apply(graph, lam, h)
    else:
        mix = lambda h: h + lam * (neighbors @ h)
    return mix(delta.monarch.apply(mix(X)))


def sparse_linear_forward(delta: PointMonarchDelta, graph: KnnGraph, X: np.ndarray) -> np.ndarray:
    """Layer output when the dense weight itself is replaced by Point Monarch."""
    return point_monarch_apply(delta, graph, X)


# --------------------------------------------------------------------------
# layers


class DenseLinear:
    """Plain ``X @ W + bias``. Also the result of a drop-K merge."""

    kind = "dense"

    def __init__(self, weight: np.ndarray, bias: Optional[np.ndarray] = None):
        self.weight = weight
        self.bias = bias

    def params(self) -> Dict[str, np.ndarray]:
        return {}

    def forward(self, X: np.ndarray, graph: Optional[KnnGraph] = None) -> np.ndarray:
        if graph is not None:
            raise UsageError("merged layer takes no graph")
        out = X @ self.weight
        return out + self.bias if self.bias is not None else out

    def delta_var(self, x, get, neighbors):
        return None


class MostLinear:
    """Frozen ``W0``/``bias`` plus a trainable Point Monarch delta."""

    kind = "most"

    def __init__(self, weight: np.ndarray, bias: Optional[np.ndarray], delta: PointMonarchDelta,
                 mode: str = "train"):
        if weight.shape != (delta.d_in, delta.d_out):
            raise DimensionError(f"weight {weight.shape} vs delta {delta.d_in}x{delta.d_out}")
        self.weight = weight
        self.bias = bias
        self.delta = delta
        self.mode = mode

    def params(self) -> Dict[str, np.ndarray]:
        return {f"most.{k}": v for k, v in self.delta.params().items()}

    def forward(self, X: np.ndarray, graph: KnnGraph) -> np.ndarray:
        if self.mode != "train":
            raise UsageError(f"forward() needs train mode, layer is {self.mode!r}")
        out = X @ self.weight + point_monarch_apply(self.delta, graph, X)
        return out + self.bias if self.bias is not None else out

    def delta_var(self, x, get, neighbors):
        return self.delta.apply_var(x, lambda k: get(f"most.{k}"), neighbors)


class ExactMergedLinear:
    """Inference layer keeping both K mixes around a dense Monarch matrix."""

    kind = "exact"

    def __init__(self, weight: np.ndarray, bias: Optional[np.ndarray], monarch_dense: np.ndarray,
                 lam: float):
        self.weight = weight
        self.bias = bias
        self.monarch_dense = monarch_dense
        self.lam = float(lam)

    def params(self) -> Dict[str, np.ndarray]:
        return {}

    def forward(self, X: np.ndarray, graph: KnnGraph) -> np.ndarray:
        h = k_rectify_apply(graph, self.lam, X) @ self.monarch_dense
        out = X @ self.weight + k_rectify_apply(graph, self.lam, h)
        return out + self.bias if self.bias is not None else out

    def delta_var(self, x, get, neighbors):
        lam = ad.Var(np.asarray(self.lam))
        h = ad.matmul(ad.token_mix(x, neighbors, lam), ad.Var(self.monarch_dense))
        return ad.token_mix(h, neighbors, lam)


def merge(layer: MostLinear, mode: str = "dropK"):
    """Fold a trained delta for inference.

    ``dropK`` returns a single dense layer with ``W0 + M`` (exact only when
    ``lam == 0``); ``exact`` keeps the two K mixes and reproduces training.
    """
    M = layer.delta.monarch.materialize()
    if mode == "dropK":
        return DenseLinear(layer.weight + M, None if layer.bias is None else layer.bias.copy())
    if mode == "exact":
        return ExactMergedLinear(layer.weight.copy(),
                                 None if layer.bias is None else layer.bias.copy(),
                                 M, float(layer.delta.lam))
    raise UsageError(f"unknown merge mode {mode!r}")


class LoraLinear:
    """``X @ W0 + bias + X @ A @ B`` with ``B = 0`` at init."""

    kind = "lora"

    def __init__(self, weight: np.ndarray, bias: Optional[np.ndarray], rank: int, seed: int = 0):
        d_in, d_out = weight.shape
        if not 1 <= rank <= min(d_in, d_out):
            raise ConfigError(f"LoRA rank {rank} out of range for {d_in}x{d_out}")
        self.weight = weight
        self.bias = bias
        self.rank = rank
        self.A = gaussian_init((d_in, rank), 1.0 / math.sqrt(d_in), seed, dtype=default_dtype())
        self.B = np.zeros((rank, d_out), dtype=default_dtype())

    def params(self) -> Dict[str, np.ndarray]:
        return {"lora.A": self.A, "lora.B": self.B}

    def delta_var(self, x, get, neighbors):
        return ad.matmul(ad.matmul(x, get("lora.A")), get("lora.B"))


def lora_param_count(d_in: int, d_out: int, rank: int) -> int:
    return rank * (d_in + d_out)


# --------------------------------------------------------------------------
# fusion head


@dataclass
class FusionHeadConfig:
    layers: Tuple[int, ...] = (4, 8, 12)  # 1-based block indices

    def validate(self, depth: int) -> None:
        ls = self.layers
        if not ls or any(b <= a for a, b in zip(ls, ls[1:])) or ls[0] < 1 or ls[-1] > depth:
            raise ConfigError(f"fusion layers {ls} must increase strictly within 1..{depth}")


def mixpool(x: np.ndarray) -> np.ndarray:
    """Max-pool plus mean-pool over the token axis."""
    return x.max(axis=-2) + x.mean(axis=-2)


def fusion_head(features: Sequence[np.ndarray], class_token: np.ndarray) -> np.ndarray:
    """``concat(sum_i 2**(i-1) * mixpool(x_i), class_token)``."""
    C = class_token.shape[-1]
    out = np.zeros_like(class_token)
    for i, f in enumerate(features):
        if f.shape[-1] != C:
            raise DimensionError(f"feature {i} has {f.shape[-1]} channels, expected {C}")
        out = out + (2.0 ** i) * mixpool(f)
    return np.concatenate([out, class_token], axis=-1)


def fusion_head_var(features: Sequence[ad.Var], class_token: ad.Var) -> ad.Var:
    out = None
    for i, f in enumerate(features):
        pooled = ad.add(ad.max_(f, axis=-2), ad.mean(f, axis=-2))
        term = ad.scale(pooled, 2.0 ** i)
        out = term if out is None else ad.add(out, term)
    return ad.concat([out, class_token], axis=-1)
