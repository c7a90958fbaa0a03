"""A small point-cloud transformer used as the frozen backbone.

Patch embedding is a two-stage shared point MLP with max pooling (the
mini-PointNet used by masked-point backbones). Blocks are pre-norm attention
and GELU FFN with residuals. The classifier reads the fusion head output.
All parameters live in one flat dict of named arrays; PEFT adapters attach
to linear layers by name and contribute their own named arrays.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Dict, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .errors import ConfigError, FormatError
from .geometry import KnnGraph, fps, group_points, knn, normalize_unit_sphere
from .numeric import default_dtype, gaussian_init
from .peft import FusionHeadConfig, fusion_head_var
from .structured import child_seed

PROJECTIONS = ("qkv", "proj", "fc1", "fc2")
PATCH_IN = 6  # per point: offset from patch center, then the center


@dataclass
class ModelConfig:
    depth: int = 4
    dim: int = 96
    heads: int = 4
    mlp_ratio: int = 4
    n_patches: int = 32
    group_size: int = 8
    n_classes: int = 6
    knn_k: int = 4
    embed_hidden: Tuple[int, int] = (128, 256)
    fusion_layers: Tuple[int, ...] = (2, 3, 4)

    def __post_init__(self):
        self.embed_hidden = tuple(self.embed_hidden)
        self.fusion_layers = tuple(self.fusion_layers)

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.knn_k < 0 or self.n_patches < 1:
            raise ConfigError("knn_k must be nonnegative and n_patches positive")
        FusionHeadConfig(self.fusion_layers).validate(self.depth)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["embed_hidden"] = list(self.embed_hidden)
        d["fusion_layers"] = list(self.fusion_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def linear_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, int]]:
    """(d_in, d_out) of every adaptable projection, keyed by full name."""
    C, H = cfg.dim, cfg.dim * cfg.mlp_ratio
    out = {}
    for i in range(cfg.depth):
        out[f"blocks.{i}.attn.qkv"] = (C, 3 * C)
        out[f"blocks.{i}.attn.proj"] = (C, C)
        out[f"blocks.{i}.mlp.fc1"] = (C, H)
        out[f"blocks.{i}.mlp.fc2"] = (H, C)
    return out


def init_params(cfg: ModelConfig, seed: int = 0) -> Dict[str, np.ndarray]:
    """Truncation-free Gaussian init; linear weights use std sqrt(1/d_in)."""
    cfg.validate()
    dt = default_dtype()
    params: Dict[str, np.ndarray] = {}
    counter = iter(range(10_000))

    def lin(name, d_in, d_out, std=None):
        s = std if std is not None else math.sqrt(1.0 / d_in)
        params[f"{name}.weight"] = gaussian_init((d_in, d_out), s, child_seed(seed, next(counter)), dt)
        params[f"{name}.bias"] = np.zeros(d_out, dtype=dt)

    def norm(name, d):
        params[f"{name}.weight"] = np.ones(d, dtype=dt)
        params[f"{name}.bias"] = np.zeros(d, dtype=dt)

    h1, h2 = cfg.embed_hidden
    C = cfg.dim
    lin("embed.fc1", PATCH_IN, h1)
    lin("embed.fc2", h1, h2)
    lin("embed.fc3", 2 * h2, h2)
    lin("embed.fc4", h2, C)
    params["cls_token"] = gaussian_init((C,), 0.02, child_seed(seed, next(counter)), dt)
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        norm(f"{p}.norm1", C)
        lin(f"{p}.attn.qkv", C, 3 * C)
        lin(f"{p}.attn.proj", C, C, std=math.sqrt(1.0 / C) / math.sqrt(2 * cfg.depth))
        norm(f"{p}.norm2", C)
        lin(f"{p}.mlp.fc1", C, C * cfg.mlp_ratio)
        lin(f"{p}.mlp.fc2", C * cfg.mlp_ratio, C,
            std=math.sqrt(1.0 / (C * cfg.mlp_ratio)) / math.sqrt(2 * cfg.depth))
    norm("norm", C)
    lin("head", 2 * C, cfg.n_classes, std=0.01)
    return params


# --------------------------------------------------------------------------
# point clouds -> patches


@dataclass
class PreparedCloud:
    groups: np.ndarray   # [G, S, 3], each patch centered on its center
    centers: np.ndarray  # [G, 3]
    graph: KnnGraph


def prepare_cloud(points: np.ndarray, cfg: ModelConfig) -> PreparedCloud:
    points = normalize_unit_sphere(points)
    if len(points) < cfg.n_patches:
        raise ConfigError(f"cloud has {len(points)} points, fewer than {cfg.n_patches} patches")
    center_idx = fps(points, cfg.n_patches, 0)
    centers = points[center_idx]
    idx = group_points(points, centers, min(cfg.group_size, len(points)))
    groups = points[idx] - centers[:, None, :]
    graph = knn(centers, min(cfg.knn_k, cfg.n_patches - 1))
    return PreparedCloud(groups.astype(default_dtype()), centers, graph)


def patch_inputs(clouds: Sequence[PreparedCloud]) -> np.ndarray:
    """Per point: offset from its patch center, then the center itself."""
    g = np.stack([c.groups for c in clouds])
    c = np.stack([c.centers for c in clouds]).astype(g.dtype)
    return np.concatenate([g, np.broadcast_to(c[:, :, None, :], g.shape)], axis=-1)


def batch_neighbors(graphs: Sequence[KnnGraph]) -> sp.csr_matrix:
    """Neighbor operator over ``[cls, patch_1..patch_G]`` per cloud; cls rows are empty."""
    mats = []
    for g in graphs:
        N = g.neighbor_matrix()
        mats.append(sp.block_diag([sp.csr_matrix((1, 1)), N]))
    return sp.block_diag(mats, format="csr").astype(default_dtype())


# --------------------------------------------------------------------------
# model


class Model:
    """Named parameters, trainable set and PEFT adapters for one backbone."""

    def __init__(self, cfg: ModelConfig, params: Dict[str, np.ndarray]):
        cfg.validate()
        self.cfg = cfg
        self.params = params
        self.adapters: Dict[str, object] = {}
        self.trainable: set = set(params)
        self.method = "full"

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        return cls(cfg, init_params(cfg, seed))

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def named_parameters(self) -> Dict[str, np.ndarray]:
        out = dict(self.params)
        for name, a in self.adapters.items():
            for k, v in a.params().items():
                out[f"{name}.{k}"] = v
        return out

    def trainable_parameters(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.named_parameters().items() if k in self.trainable}

    def trainable_count(self) -> int:
        return sum(v.size for v in self.trainable_parameters().values())

    def total_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def freeze_all(self) -> None:
        self.trainable = set()

    def load_state(self, entries: Dict[str, Tuple[np.ndarray, bool]]) -> None:
        """Copy saved tensors in place; validates every entry before touching any."""
        own = self.named_parameters()
        for name, (arr, _) in entries.items():
            if name not in own:
                raise FormatError(f"unknown tensor {name!r} in checkpoint")
            if arr.shape != own[name].shape:
                raise FormatError(f"shape mismatch for {name!r}: checkpoint {arr.shape}, "
                                  f"model {own[name].shape}")
        missing = set(own) - set(entries)
        if missing:
            raise FormatError(f"checkpoint lacks tensor {sorted(missing)[0]!r}")
        for name, (arr, _) in entries.items():
            np.copyto(own[name], arr.astype(own[name].dtype))
        self.trainable = {name for name, (_, t) in entries.items() if t}

    # -- forward --------------------------------------------------------

    def _linear(self, tape: ad.Tape, name: str, x: ad.Var, neighbors) -> ad.Var:
        a = self.adapters.get(name)
        if a is not None and getattr(a, "replaces_weight", False):
            y = a.delta_var(x, lambda k: tape[f"{name}.{k}"], neighbors)
            return ad.add(y, tape[f"{name}.bias"])
        y = ad.add(ad.matmul(x, tape[f"{name}.weight"]), tape[f"{name}.bias"])
        if a is not None:
            d = a.delta_var(x, lambda k: tape[f"{name}.{k}"], neighbors)
            if d is not None:
                y = ad.add(y, d)
        return y

    def _norm(self, tape, name, x):
        return ad.add(ad.mul(ad.layernorm(x), tape[f"{name}.weight"]), tape[f"{name}.bias"])

    def embed_var(self, tape: ad.Tape, groups: np.ndarray) -> ad.Var:
        """``[B, G, S, 6]`` patch inputs -> ``[B, G, C]`` tokens."""
        x = ad.Var(groups)
        f = ad.relu(self._linear(tape, "embed.fc1", x, None))
        f = self._linear(tape, "embed.fc2", f, None)
        g = ad.max_(f, axis=-2)
        g = ad.broadcast_to(ad.reshape(g, (*g.shape[:-1], 1, g.shape[-1])), f.shape)
        f = ad.relu(self._linear(tape, "embed.fc3", ad.concat([g, f], axis=-1), None))
        f = self._linear(tape, "embed.fc4", f, None)
        return ad.max_(f, axis=-2)

    def _block(self, tape, i, x, neighbors):
        cfg = self.cfg
        B, T, C = x.shape
        H = cfg.heads
        dh = C // H
        p = f"blocks.{i}"
        h = self._norm(tape, f"{p}.norm1", x)
        qkv = self._linear(tape, f"{p}.attn.qkv", h, neighbors)
        qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, H, dh)), (2, 0, 3, 1, 4))
        q, k, v = (ad.index(qkv, j) for j in range(3))
        att = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh)))
        o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, C))
        x = ad.add(x, self._linear(tape, f"{p}.attn.proj", o, neighbors))
        h = self._norm(tape, f"{p}.norm2", x)
        h = ad.gelu(self._linear(tape, f"{p}.mlp.fc1", h, neighbors))
        return ad.add(x, self._linear(tape, f"{p}.mlp.fc2", h, neighbors))

    def forward_tokens(self, tape: ad.Tape, tokens: ad.Var, graphs: Sequence[KnnGraph],
                       return_features: bool = False):
        """Transformer, fusion head and classifier on ``[B, G, C]`` patch tokens."""
        tokens = ad.const(tokens)
        B, G, C = tokens.shape
        neighbors = batch_neighbors(graphs)
        cls = ad.broadcast_to(ad.reshape(tape["cls_token"], (1, 1, C)), (B, 1, C))
        x = ad.concat([cls, tokens], axis=1)
        fused = []
        for i in range(self.cfg.depth):
            x = self._block(tape, i, x, neighbors)
            if i + 1 in self.cfg.fusion_layers:
                fused.append(x)
        feats = [ad.index(self._norm(tape, "norm", f), (slice(None), slice(1, None))) for f in fused]
        cls_out = ad.index(self._norm(tape, "norm", x), (slice(None), 0))
        z = fusion_head_var(feats, cls_out)
        logits = self._linear(tape, "head", z, None)
        if return_features:
            return logits, x
        return logits

    def forward(self, tape: ad.Tape, clouds: Sequence[PreparedCloud], tokens=None,
                return_features: bool = False):
        if tokens is None:
            tokens = self.embed_var(tape, patch_inputs(clouds))
        return self.forward_tokens(tape, tokens, [c.graph for c in clouds], return_features)

    def tape(self) -> ad.Tape:
        return ad.Tape(self.named_parameters(), self.trainable)

    def logits(self, clouds: Sequence[PreparedCloud], tokens=None) -> np.ndarray:
        return self.forward(self.tape_frozen(), clouds, tokens).value

    def tape_frozen(self) -> ad.Tape:
        return ad.Tape(self.named_parameters(), ())

    def embed_tokens(self, clouds: Sequence[PreparedCloud]) -> np.ndarray:
        return self.embed_var(self.tape_frozen(), patch_inputs(clouds)).value

    def embed_is_frozen(self) -> bool:
        return not any(k.startswith("embed.") for k in self.trainable)


def patch_embed(model: Model, points: np.ndarray):
    """One cloud -> (tokens ``[G, C]``, centers ``[G, 3]``, KNN graph)."""
    pc = prepare_cloud(points, model.cfg)
    tokens = model.embed_tokens([pc])[0]
    return tokens, pc.centers, pc.graph


def forward_classify(model: Model, points: np.ndarray) -> np.ndarray:
    pc = prepare_cloud(points, model.cfg)
    return model.logits([pc])[0]
