"""Fine-tuning methods: MoST injection, LoRA, BitFit, linear probing, merging."""
from __future__ import annotations

from typing import Dict, Iterable, Optional

from .backbone import PATCH_IN, PROJECTIONS, Model, linear_shapes
from .errors import ConfigError, UsageError
from .peft import (DenseLinear, LoraLinear, MostLinear, init_most, lora_param_count, merge)
from .structured import child_seed, monarch_param_count

HEAD = ("head.weight", "head.bias")


def resolve_targets(model: Model, targets: Iterable[str]):
    shapes = linear_shapes(model.cfg)
    out = []
    for t in targets:
        if t not in PROJECTIONS:
            raise ConfigError(f"unknown projection target {t!r}; expected one of {PROJECTIONS}")
        out.extend(n for n in shapes if n.endswith(f".{t}"))
    return sorted(set(out), key=list(shapes).index)


def linear_probe(model: Model) -> Model:
    model.adapters = {}
    model.trainable = set(HEAD)
    model.method = "linear-probe"
    return model


def bitfit(model: Model) -> Model:
    model.trainable = {k for k in model.params if k.endswith(".bias")} | set(HEAD)
    model.method = "bitfit"
    return model


def full_finetune(model: Model) -> Model:
    model.trainable = set(model.named_parameters())
    model.method = "full"
    return model


def inject_most(model: Model, targets: Iterable[str] = PROJECTIONS, b: int = 16,
                variant: str = "full", seed: int = 0, rank: Optional[int] = None) -> Model:
    """Wrap every target projection as a MoST layer; train deltas, lambdas and head only."""
    names = resolve_targets(model, targets)
    linear_probe(model)
    for i, name in enumerate(names):
        W = model.params[f"{name}.weight"]
        delta = init_most(W.shape[0], W.shape[1], b, variant, seed=child_seed(seed, i), rank=rank)
        model.adapters[name] = MostLinear(W, model.params[f"{name}.bias"], delta)
    model.trainable |= {k for k in model.named_parameters() if ".most." in k}
    model.method = f"most(b={b},{variant})"
    return model


def inject_lora(model: Model, rank: int, targets: Iterable[str] = PROJECTIONS, seed: int = 0) -> Model:
    names = resolve_targets(model, targets)
    linear_probe(model)
    for i, name in enumerate(names):
        W = model.params[f"{name}.weight"]
        model.adapters[name] = LoraLinear(W, model.params[f"{name}.bias"], rank, seed=child_seed(seed, i))
    model.trainable |= {k for k in model.named_parameters() if ".lora." in k}
    model.method = f"lora(r={rank})"
    return model


class SparseMonarchLinear(MostLinear):
    """Point Monarch replacing the dense weight entirely; bias stays."""

    kind = "sparse"
    replaces_weight = True

    def forward(self, X, graph):
        from .peft import point_monarch_apply
        return point_monarch_apply(self.delta, graph, X) + self.bias


def make_sparse(model: Model, targets: Iterable[str] = PROJECTIONS, b: int = 4,
                variant: str = "full", seed: int = 0) -> Model:
    """Replace target projections by trainable Point Monarch layers (no dense weight)."""
    for i, name in enumerate(resolve_targets(model, targets)):
        W = model.params.pop(f"{name}.weight")
        model.trainable.discard(f"{name}.weight")
        delta = init_most(W.shape[0], W.shape[1], b, variant, seed=child_seed(seed, i), zero_left=False)
        model.adapters[name] = SparseMonarchLinear(W * 0, model.params[f"{name}.bias"], delta)
    model.trainable |= {k for k in model.named_parameters() if ".most." in k}
    return model


def merge_model(model: Model, mode: str = "dropK") -> Model:
    """Inference copy with every MoST adapter folded per ``mode``."""
    out = model.clone()
    for name, a in list(out.adapters.items()):
        if not isinstance(a, MostLinear) or isinstance(a, SparseMonarchLinear):
            continue
        m = merge(a, mode)
        if isinstance(m, DenseLinear):
            out.params[f"{name}.weight"] = m.weight
            del out.adapters[name]
        else:
            out.adapters[name] = m
    out.trainable = set()
    return out


def apply_method(model: Model, method: str, b: int = 8, variant: str = "full",
                 rank: Optional[int] = None, seed: int = 0,
                 targets: Iterable[str] = PROJECTIONS) -> Model:
    """Set up ``model`` for one fine-tuning method. LoRA rank defaults to 4."""
    if method == "full":
        return full_finetune(model)
    if method == "linear-probe":
        return linear_probe(model)
    if method == "bitfit":
        return bitfit(model)
    if method == "lora":
        return inject_lora(model, rank or 4, targets, seed=seed)
    if method == "most":
        return inject_most(model, targets, b, variant, seed=seed, rank=rank)
    raise UsageError(f"unknown method {method!r}")


# --------------------------------------------------------------------------
# closed-form audits


def most_delta_count(shapes: Dict[str, tuple], b: int, variant: str = "full",
                     rank: Optional[int] = None) -> int:
    return sum(monarch_param_count(di, do, b, variant, rank) for di, do in shapes.values())


def audit_counts(cfg, method: str, b: int = 8, variant: str = "full", rank: Optional[int] = None,
                 targets: Iterable[str] = PROJECTIONS) -> Dict[str, int]:
    """Trainable counts from formulas only, without building any arrays."""
    shapes = {n: s for n, s in linear_shapes(cfg).items() if n.split(".")[-1] in set(targets)}
    C, ncls = cfg.dim, cfg.n_classes
    head = 2 * C * ncls + ncls
    h1, h2 = cfg.embed_hidden
    H = C * cfg.mlp_ratio
    embed = (PATCH_IN * h1 + h1) + (h1 * h2 + h2) + (2 * h2 * h2 + h2) + (h2 * C + C)
    per_block = 4 * C + (C * 3 * C + 3 * C) + (C * C + C) + (C * H + H) + (H * C + C)
    full = embed + C + cfg.depth * per_block + 2 * C + head
    out = {"head": head, "full_model": full}
    if method == "full":
        out.update(backbone=full - head, total=full)
    elif method == "linear-probe":
        out.update(backbone=0, total=head)
    elif method == "bitfit":
        biases = (h1 + h2 + h2 + C) + cfg.depth * (2 * C + 3 * C + C + H + C) + C
        out.update(backbone=biases, total=biases + head)
    elif method == "lora":
        n = sum(lora_param_count(di, do, rank or 4) for di, do in shapes.values())
        out.update(backbone=n, total=n + head)
    elif method == "most":
        n = most_delta_count(shapes, b, variant, rank)
        out.update(backbone=n, lambdas=len(shapes), total=n + len(shapes) + head)
    else:
        raise UsageError(f"unknown method {method!r}")
    return out


def pointmae_like_config(n_classes: int = 15):
    from .backbone import ModelConfig
    return ModelConfig(depth=12, dim=384, heads=6, mlp_ratio=4, n_patches=64, group_size=32,
                       n_classes=n_classes, fusion_layers=(4, 8, 12))


def matched_lora_rank(cfg, b: int, variant: str = "full",
                      targets: Iterable[str] = PROJECTIONS) -> int:
    """LoRA rank whose delta count is closest to MoST's at block count ``b``."""
    target = audit_counts(cfg, "most", b, variant, targets=targets)["backbone"]
    per_rank = audit_counts(cfg, "lora", rank=1, targets=targets)["backbone"]
    return max(1, int(round(target / per_rank)))
