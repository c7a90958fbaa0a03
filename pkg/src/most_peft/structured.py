"""Block-diagonal factors and Monarch matrices.

Row-vector convention throughout: a Monarch operator of shape
``d_in x d_out`` acts as ``X -> ((X @ R)[:, inner] @ L)[:, outer]`` where
``R`` maps ``d_in -> d_s`` and ``L`` maps ``d_s -> d_out`` with
``d_s = min(d_in, d_out)``. Both factors hold ``b`` blocks. ``inner`` is the
transpose of the reshape-transpose permutation on ``d_s`` and ``outer`` the
reshape-transpose permutation on ``d_out``; in the square case this is
``M = P L P^T R`` written for row vectors.

Blocks may be dense, low-rank (``U @ V``) or Kronecker (``A kron B``).
A joint low-rank layout shares one inner factor ``S`` between ``R`` and ``L``:
``R_i = U_i @ S`` and ``L_i = S.T @ V_i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.linalg import block_diag

from . import autodiff as ad
from .errors import ConfigError, DimensionError
from .numeric import default_dtype, gaussian_init

BLOCK_KINDS = ("full", "lowrank", "kronecker")

# (L kind, R kind) per named variant; "joint" is the shared low-rank layout
VARIANTS: Dict[str, object] = {
    "full": ("full", "full"),
    "I": ("lowrank", "lowrank"),
    "II": ("kronecker", "kronecker"),
    "III": "joint",
    "IV": ("full", "lowrank"),
    "V": ("full", "kronecker"),
    "VI": ("lowrank", "kronecker"),
}
VARIANT_ALIASES = {"lowrank": "I", "kronecker": "II", "joint": "III", "jointlowrank": "III"}


def resolve_variant(variant: str):
    key = variant if variant in VARIANTS else VARIANT_ALIASES.get(variant.lower(), variant.lower())
    if key not in VARIANTS:
        raise ConfigError(f"unknown block variant {variant!r}")
    return VARIANTS[key]


def child_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


# --------------------------------------------------------------------------
# permutations


def make_permutation(b: int, m: int) -> np.ndarray:
    """Reshape-transpose permutation: ``y = x[perm]`` gives ``y[j*b + i] = x[i*m + j]``.

    The inverse of ``make_permutation(b, m)`` is ``make_permutation(m, b)``.
    """
    if b < 1 or m < 1:
        raise ConfigError("permutation extents must be positive")
    return np.arange(b * m).reshape(b, m).T.reshape(-1)


def permutation_matrix(perm: np.ndarray) -> np.ndarray:
    """Dense ``P`` with ``P @ x == x[perm]``."""
    n = len(perm)
    P = np.zeros((n, n))
    P[np.arange(n), perm] = 1.0
    return P


# --------------------------------------------------------------------------
# block parameterizations


def default_rank(rows: int, cols: int) -> int:
    return max(1, math.ceil(min(rows, cols) / 4))


def near_square_split(n: int) -> Tuple[int, int]:
    a = int(math.isqrt(n))
    while n % a:
        a -= 1
    return a, n // a


@dataclass
class BlockParameterization:
    """One block: ``full`` (dense), ``lowrank`` (U @ V) or ``kronecker`` (A kron B)."""

    kind: str
    tensors: Dict[str, np.ndarray]

    def materialize(self) -> np.ndarray:
        return block_param_materialize(self)


def block_param_materialize(p: BlockParameterization) -> np.ndarray:
    t = p.tensors
    if p.kind == "full":
        return t["W"]
    if p.kind == "lowrank":
        U, V = t["U"], t["V"]
        if U.ndim != 2 or V.ndim != 2 or U.shape[1] != V.shape[0]:
            raise ConfigError(f"low-rank factors do not chain: {U.shape} x {V.shape}")
        if U.shape[1] > min(U.shape[0], V.shape[1]):
            raise ConfigError(f"rank {U.shape[1]} exceeds block extents {U.shape[0]}x{V.shape[1]}")
        return U @ V
    if p.kind == "kronecker":
        A, B = t["A"], t["B"]
        if A.ndim != 2 or B.ndim != 2:
            raise ConfigError("kronecker factors must be matrices")
        return np.kron(A, B)
    raise ConfigError(f"unknown block kind {p.kind!r}")


@dataclass
class BlockDiagonalFactor:
    """``n_blocks`` blocks of ``block_rows x block_cols`` on the diagonal.

    Parameters are stored stacked along a leading block axis.
    """

    kind: str
    n_blocks: int
    block_rows: int
    block_cols: int
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    rank: Optional[int] = None
    kron_split: Optional[Tuple[int, int, int, int]] = None  # a1, a2, b1, b2

    @property
    def in_dim(self) -> int:
        return self.n_blocks * self.block_rows

    @property
    def out_dim(self) -> int:
        return self.n_blocks * self.block_cols

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        b, r, c = self.n_blocks, self.block_rows, self.block_cols
        if self.kind == "full":
            return {"W": (b, r, c)}
        if self.kind == "lowrank":
            return {"U": (b, r, self.rank), "V": (b, self.rank, c)}
        a1, a2, b1, b2 = self.kron_split
        return {"A": (b, a1, a2), "B": (b, b1, b2)}

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())

    def block(self, i: int) -> BlockParameterization:
        return BlockParameterization(self.kind, {k: v[i] for k, v in self.params.items()})

    def blocks_var(self, get: Callable[[str], ad.Var]) -> ad.Var:
        """Stacked dense blocks ``[b, rows, cols]`` as a differentiable value."""
        if self.kind == "full":
            return get("W")
        if self.kind == "lowrank":
            return ad.matmul(get("U"), get("V"))
        a1, a2, b1, b2 = self.kron_split
        A = ad.reshape(get("A"), (self.n_blocks, a1, 1, a2, 1))
        B = ad.reshape(get("B"), (self.n_blocks, 1, b1, 1, b2))
        return ad.reshape(ad.mul(A, B), (self.n_blocks, self.block_rows, self.block_cols))

    def blocks(self) -> np.ndarray:
        return self.blocks_var(lambda k: ad.Var(self.params[k])).value

    def materialize(self) -> np.ndarray:
        return block_diag(*[block_param_materialize(self.block(i)) for i in range(self.n_blocks)])


def make_factor(kind: str, n_blocks: int, block_rows: int, block_cols: int,
                rank: Optional[int] = None) -> BlockDiagonalFactor:
    if kind not in BLOCK_KINDS:
        raise ConfigError(f"unknown block kind {kind!r}")
    f = BlockDiagonalFactor(kind, n_blocks, block_rows, block_cols)
    if kind == "lowrank":
        f.rank = rank or default_rank(block_rows, block_cols)
        if f.rank > min(block_rows, block_cols):
            raise ConfigError(f"rank {f.rank} exceeds block extents {block_rows}x{block_cols}")
    elif kind == "kronecker":
        a1, b1 = near_square_split(block_rows)
        a2, b2 = near_square_split(block_cols)
        f.kron_split = (a1, a2, b1, b2)
    f.params = {k: np.zeros(s, dtype=default_dtype()) for k, s in f.shapes().items()}
    return f


def block_diag_apply(F: BlockDiagonalFactor, X: np.ndarray) -> np.ndarray:
    """``X @ materialize(F)`` via a per-block batched product."""
    if X.shape[-1] != F.in_dim:
        raise DimensionError(f"input has {X.shape[-1]} columns, factor expects {F.in_dim}")
    lead = X.shape[:-1]
    xb = X.reshape(*lead, F.n_blocks, F.block_rows)
    return ad.block_matmul(xb, F.blocks()).value.reshape(*lead, F.out_dim)


# --------------------------------------------------------------------------
# Monarch


class MonarchMatrix:
    """Two block-diagonal factors joined by reshape-transpose permutations.

    ``R`` maps ``d_in -> d_s`` and ``L`` maps ``d_s -> d_out``. Parameter
    names are ``"R.<name>"``, ``"L.<name>"`` and, for the joint layout,
    ``"S"`` (the shared inner factor).
    """

    def __init__(self, d_in: int, d_out: int, b: int, variant: str = "full",
                 rank: Optional[int] = None):
        check_divisible(d_in, d_out, b)
        self.d_in, self.d_out, self.b = d_in, d_out, b
        self.variant = variant
        self.d_s = min(d_in, d_out)
        ms = self.d_s // b
        layout = resolve_variant(variant)
        self.joint = layout == "joint"
        if self.joint:
            r = rank or default_rank(ms, ms)
            if r > ms:
                raise ConfigError(f"joint rank {r} exceeds inner block size {ms}")
            self.rank = r
            self.R = make_factor("lowrank", b, d_in // b, ms, rank=r)
            self.L = make_factor("lowrank", b, ms, d_out // b, rank=r)
            del self.R.params["V"], self.L.params["U"]
            dt = default_dtype()
            self.shared = np.zeros((r, ms), dtype=dt)
        else:
            left, right = layout
            self.R = make_factor(right, b, d_in // b, ms, rank=rank)
            self.L = make_factor(left, b, ms, d_out // b, rank=rank)
            self.shared = None
        self.inner_perm = make_permutation(ms, b)
        self.outer_perm = make_permutation(b, d_out // b)

    # -- parameters ---------------------------------------------------------

    def params(self) -> Dict[str, np.ndarray]:
        out = {f"R.{k}": v for k, v in self.R.params.items()}
        out.update({f"L.{k}": v for k, v in self.L.params.items()})
        if self.joint:
            out["S"] = self.shared
        return out

    def set_params(self, params: Dict[str, np.ndarray]) -> None:
        for name, v in params.items():
            head, _, key = name.partition(".")
            if name == "S":
                self.shared = v
            elif head == "R":
                self.R.params[key] = v
            elif head == "L":
                self.L.params[key] = v
            else:
                raise ConfigError(f"unknown Monarch parameter {name!r}")

    def param_count(self) -> int:
        return sum(v.size for v in self.params().values())

    # -- factor blocks ----------------------------------------------------

    def _blocks(self, get: Callable[[str], ad.Var]):
        if self.joint:
            S = get("S")
            R = ad.matmul(get("R.U"), S)
            L = ad.matmul(ad.transpose(S, (1, 0)), get("L.V"))
            return R, L
        R = self.R.blocks_var(lambda k: get(f"R.{k}"))
        L = self.L.blocks_var(lambda k: get(f"L.{k}"))
        return R, L

    def factor_blocks(self) -> Tuple[np.ndarray, np.ndarray]:
        p = self.params()
        R, L = self._blocks(lambda k: ad.Var(p[k]))
        return R.value, L.value

    # -- application ------------------------------------------------------

    def apply_var(self, x: ad.Var, get: Callable[[str], ad.Var]) -> ad.Var:
        """Differentiable fast path for ``x[..., d_in] -> [..., d_out]``."""
        x = ad.const(x)
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"Monarch expects {self.d_in} input channels, got {x.shape[-1]}")
        lead = x.shape[:-1]
        b = self.b
        R, L = self._blocks(get)
        z = ad.block_matmul(ad.reshape(x, (*lead, b, self.d_in // b)), R)
        z = ad.permute(ad.reshape(z, (*lead, self.d_s)), self.inner_perm, axis=-1)
        y = ad.block_matmul(ad.reshape(z, (*lead, b, self.d_s // b)), L)
        return ad.permute(ad.reshape(y, (*lead, self.d_out)), self.outer_perm, axis=-1)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Plain numpy forward, same math as :meth:`apply_var` without graph nodes."""
        X = np.asarray(X)
        if X.shape[-1] != self.d_in:
            raise DimensionError(f"Monarch expects {self.d_in} input channels, got {X.shape[-1]}")
        lead = X.shape[:-1]
        R, L = self.factor_blocks()
        z = _bmm(X.reshape(-1, self.b, self.d_in // self.b), R)[:, self.inner_perm]
        y = _bmm(z.reshape(-1, self.b, self.d_s // self.b), L)[:, self.outer_perm]
        return y.reshape(*lead, self.d_out)

    def materialize(self) -> np.ndarray:
        """Dense ``d_in x d_out`` matrix built from explicit permutation matrices."""
        Rb, Lb = self.factor_blocks()
        Rd = block_diag(*Rb)
        Ld = block_diag(*Lb)
        Pin = permutation_matrix(self.inner_perm)
        Pout = permutation_matrix(self.outer_perm)
        return Rd @ Pin.T @ Ld @ Pout.T

    def flops(self, G: int) -> int:
        """Multiply-adds of :meth:`apply` on ``G`` rows, counted as 2 per MAC."""
        return 2 * G * (self.R.in_dim * self.R.block_cols + self.L.in_dim * self.L.block_cols)


def _bmm(x: np.ndarray, blocks: np.ndarray) -> np.ndarray:
    # x [N, b, m] against blocks [b, m, n] -> [N, b*n]
    out = np.matmul(x.transpose(1, 0, 2), blocks)
    return out.transpose(1, 0, 2).reshape(x.shape[0], -1)


def monarch_apply(M: MonarchMatrix, X: np.ndarray) -> np.ndarray:
    return M.apply(X)


def monarch_materialize(M: MonarchMatrix) -> np.ndarray:
    return M.materialize()


def check_divisible(d_in: int, d_out: int, b: int) -> None:
    if b < 1 or d_in % b or d_out % b:
        raise ConfigError(f"block count {b} must divide both {d_in} and {d_out}")


def monarch_param_count(d_in: int, d_out: int, b: int, variant: str = "full",
                        rank: Optional[int] = None) -> int:
    """Closed-form trainable scalar count of a Monarch operator.

    >>> monarch_param_count(384, 384, 16)
    18432
    >>> monarch_param_count(384, 1536, 16)
    46080
    """
    check_divisible(d_in, d_out, b)
    d_s = min(d_in, d_out)
    ms = d_s // b
    r_shape = (d_in // b, ms)
    l_shape = (ms, d_out // b)
    layout = resolve_variant(variant)
    if layout == "joint":
        r = rank or default_rank(ms, ms)
        return b * r * (r_shape[0] + l_shape[1]) + r * ms

    def per_block(kind, rows, cols):
        if kind == "full":
            return rows * cols
        if kind == "lowrank":
            return (rank or default_rank(rows, cols)) * (rows + cols)
        a1, b1 = near_square_split(rows)
        a2, b2 = near_square_split(cols)
        return a1 * a2 + b1 * b2

    left, right = layout
    return b * (per_block(right, *r_shape) + per_block(left, *l_shape))


def init_monarch(M: MonarchMatrix, sigma: float, seed: int) -> MonarchMatrix:
    """Zero ``L``, Gaussian ``R`` whose materialized entries have std ``sigma``.

    Sub-factors get a per-entry std chosen so products keep variance
    ``sigma**2``; the zero factor of ``L`` is the one the gradient reaches first.
    """
    dt = default_dtype()

    def draw(shape, s, k):
        return gaussian_init(shape, s, child_seed(seed, k), dtype=dt)

    if M.joint:
        s = (sigma ** 2 / M.rank) ** 0.25
        M.R.params["U"] = draw(M.R.params["U"].shape, s, 0)
        M.shared = draw(M.shared.shape, s, 1)
        M.L.params["V"] = np.zeros(M.L.params["V"].shape, dtype=dt)
        return M
    R = M.R
    if R.kind == "full":
        R.params["W"] = draw(R.params["W"].shape, sigma, 0)
    elif R.kind == "lowrank":
        s = (sigma ** 2 / R.rank) ** 0.25
        R.params["U"] = draw(R.params["U"].shape, s, 0)
        R.params["V"] = draw(R.params["V"].shape, s, 1)
    else:
        s = math.sqrt(sigma)
        R.params["A"] = draw(R.params["A"].shape, s, 0)
        R.params["B"] = draw(R.params["B"].shape, s, 1)
    L = M.L
    for k in L.params:
        L.params[k] = np.zeros(L.params[k].shape, dtype=dt)
    if L.kind == "lowrank":
        L.params["V"] = draw(L.params["V"].shape, (sigma ** 2 / L.rank) ** 0.25, 2)
    elif L.kind == "kronecker":
        L.params["B"] = draw(L.params["B"].shape, math.sqrt(sigma), 2)
    return M
