"""Training, evaluation and reporting pipelines behind the command line."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .backbone import Model, ModelConfig, PreparedCloud, prepare_cloud
from .errors import NumericError
from .geometry import local_feature_distance
from .methods import (PROJECTIONS, apply_method, audit_counts, matched_lora_rank, merge_model,
                      pointmae_like_config)
from .numeric import adamw, cosine_lr, default_dtype, make_rng, optimizer_step
from .peft import MostLinear
from .structured import check_divisible


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup: int = 0
    seed: int = 0


@dataclass
class Split:
    labels: np.ndarray
    clouds: List[PreparedCloud]
    tokens: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.labels)


def prepare(labels, clouds, cfg: ModelConfig) -> Split:
    return Split(np.asarray(labels), [prepare_cloud(c, cfg) for c in clouds])


def _batches(n: int, size: int, rng: Optional[np.random.Generator]):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for s in range(0, n, size):
        yield order[s:s + size]


def logits(model: Model, data: Split, batch_size: int = 64, use_cache: bool = True) -> np.ndarray:
    out = []
    for idx in _batches(len(data), batch_size, None):
        toks = data.tokens[idx] if (use_cache and data.tokens is not None) else None
        out.append(model.logits([data.clouds[i] for i in idx], tokens=toks))
    return np.concatenate(out)


def accuracy(model: Model, data: Split, use_cache: bool = True) -> float:
    return float((logits(model, data, use_cache=use_cache).argmax(axis=1) == data.labels).mean())


def cache_tokens(model: Model, *splits: Split) -> None:
    """Precompute patch tokens when the embedding is frozen (it never changes)."""
    for s in splits:
        s.tokens = None
        if model.embed_is_frozen():
            s.tokens = np.concatenate([model.embed_tokens([s.clouds[i] for i in idx])
                                       for idx in _batches(len(s), 64, None)])


def train(model: Model, data: Split, tc: TrainConfig) -> List[float]:
    """AdamW with cosine decay; returns the mean training loss per epoch."""
    rng = make_rng(tc.seed)
    opt = adamw(lr=tc.lr, weight_decay=tc.weight_decay)
    steps_per_epoch = -(-len(data) // tc.batch_size)
    total = tc.epochs * steps_per_epoch
    losses = []
    step = 0
    for _ in range(tc.epochs):
        epoch_loss = 0.0
        for idx in _batches(len(data), tc.batch_size, rng):
            tape = model.tape()
            toks = data.tokens[idx] if data.tokens is not None else None
            out = model.forward(tape, [data.clouds[i] for i in idx], tokens=toks)
            loss = ad.cross_entropy(out, data.labels[idx])
            if not np.isfinite(loss.value):
                raise NumericError("loss became non-finite")
            ad.backward(loss)
            grads = tape.grads()
            params = model.trainable_parameters()
            # no decay on biases, norms, lambdas, class token
            no_decay = [k for k, p in params.items() if p.ndim < 2]
            optimizer_step(opt, params, grads, lr=cosine_lr(tc.lr, step, total, tc.warmup),
                           no_decay=no_decay)
            epoch_loss += float(loss.value) * len(idx)
            step += 1
        losses.append(epoch_loss / len(data))
    return losses


def feature_distance(model: Model, data: Split, batch_size: int = 64) -> float:
    """Mean local feature distance of final-block patch tokens over a split."""
    vals = []
    tape = model.tape_frozen()
    for idx in _batches(len(data), batch_size, None):
        toks = data.tokens[idx] if data.tokens is not None else None
        clouds = [data.clouds[i] for i in idx]
        _, x = model.forward(tape, clouds, tokens=toks, return_features=True)
        for j, c in enumerate(clouds):
            vals.append(local_feature_distance(c.graph, x.value[j, 1:]))
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# pipelines


def pretrain(cfg: ModelConfig, train_set: Split, tc: TrainConfig, test_set: Optional[Split] = None,
             model_seed: int = 0):
    t0 = time.perf_counter()
    model = Model.create(cfg, model_seed)
    losses = train(model, train_set, tc)
    report = {
        "method": "pretrain",
        "trainable_params": model.trainable_count(),
        "audit_params": audit_counts(cfg, "full")["total"],
        "losses": losses,
        "train_accuracy": accuracy(model, train_set),
        "seed": tc.seed,
        "config": {"model": cfg.to_dict(), "train": asdict(tc)},
    }
    if test_set is not None:
        report["test_accuracy"] = accuracy(model, test_set)
    report["timing"] = {"wall_clock_s": time.perf_counter() - t0}
    return model, report


def adapt_head(model: Model, n_classes: int, seed: int) -> Model:
    """Fresh classifier for a new label space (zero-init bias, small weights)."""
    from .numeric import gaussian_init
    if model.cfg.n_classes != n_classes:
        model.cfg.n_classes = n_classes
        model.params["head.weight"] = gaussian_init((2 * model.cfg.dim, n_classes), 0.01, seed,
                                                    default_dtype())
        model.params["head.bias"] = np.zeros(n_classes, dtype=default_dtype())
    return model


def finetune(pretrained: Model, train_set: Split, test_set: Split, method: str, tc: TrainConfig,
             b: int = 8, variant: str = "full", rank: Optional[int] = None,
             targets=PROJECTIONS, n_classes: Optional[int] = None):
    t0 = time.perf_counter()
    model = pretrained.clone()
    n_classes = n_classes or int(max(train_set.labels.max(), test_set.labels.max())) + 1
    adapt_head(model, n_classes, tc.seed)
    if method == "lora" and rank is None:
        rank = matched_lora_rank(model.cfg, b, variant, targets)
    apply_method(model, method, b=b, variant=variant, rank=rank, seed=tc.seed, targets=targets)
    cache_tokens(model, train_set, test_set)
    audit = audit_counts(model.cfg, method, b=b, variant=variant, rank=rank, targets=targets)
    losses = train(model, train_set, tc)
    report = {
        "method": model.method,
        "trainable_params": model.trainable_count(),
        "audit_params": audit["total"],
        "full_model_params": audit["full_model"],
        "losses": losses,
        "train_accuracy": accuracy(model, train_set),
        "test_accuracy": accuracy(model, test_set),
        "local_feature_distance": feature_distance(model, test_set),
        "seed": tc.seed,
        "config": {"model": model.cfg.to_dict(), "train": asdict(tc), "method": method, "b": b,
                   "variant": variant, "rank": rank, "targets": list(targets)},
    }
    if method == "most":
        report["merge"] = merge_report(model, test_set)
    report["timing"] = {"wall_clock_s": time.perf_counter() - t0}
    return model, report


def merge_report(model: Model, test_set: Split) -> dict:
    """Accuracies of train-mode, exact-merge and drop-K models plus per-layer drift."""
    train_logits = logits(model, test_set)
    exact = merge_model(model, "exact")
    dropk = merge_model(model, "dropK")
    exact_logits = logits(exact, test_set)
    drop_logits = logits(dropk, test_set)
    acc = lambda z: float((z.argmax(axis=1) == test_set.labels).mean())
    # per-layer relative deviation of dropK vs exact on the first test cloud's tokens
    pc = test_set.clouds[0]
    x = np.random.default_rng(0).standard_normal((pc.graph.n_tokens, model.cfg.dim))
    deviation = {}
    for name, a in model.adapters.items():
        if isinstance(a, MostLinear):
            xin = x if a.weight.shape[0] == x.shape[1] else \
                np.random.default_rng(1).standard_normal((pc.graph.n_tokens, a.weight.shape[0]))
            e = a.forward(xin, pc.graph)
            d = xin @ (a.weight + a.delta.monarch.materialize()) + a.bias
            deviation[name] = float(np.linalg.norm(e - d) / np.linalg.norm(e))
    return {
        "train_mode_accuracy": acc(train_logits),
        "exact_accuracy": acc(exact_logits),
        "dropK_accuracy": acc(drop_logits),
        "exact_max_abs_logit_diff": float(np.abs(exact_logits - train_logits).max()),
        "dropK_max_abs_logit_diff": float(np.abs(drop_logits - train_logits).max()),
        "lambdas": {n: float(a.delta.lam) for n, a in model.adapters.items() if isinstance(a, MostLinear)},
        "dropK_relative_deviation": deviation,
    }


@dataclass
class StudyConfig:
    """Desk-scale transfer study: pretrain on ``source``, fine-tune on ``target``."""
    source_classes: int = 6
    source_per_class: int = 40
    target_classes: int = 4
    target_per_class: int = 60
    n_points: int = 256
    target_noise: float = 0.03
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=15, batch_size=16, lr=1e-3, warmup=10))
    finetune_epochs: int = 10
    finetune_lr: float = 3e-3
    full_lr: float = 5e-4  # all weights move; a smaller step keeps the backbone intact
    batch_size: int = 16
    methods: Sequence[str] = ("full", "linear-probe", "bitfit", "lora", "most")
    seeds: Sequence[int] = (0, 1, 2, 3, 4)
    b: int = 8
    data_seed: int = 1


def transfer_study(sc: StudyConfig = StudyConfig(), cfg: Optional[ModelConfig] = None,
                   log=None) -> dict:
    """Pretrain once, then fine-tune every method over every seed.

    Returns per-run reports plus a per-method summary (mean/min/max test
    accuracy, trainable count, total wall time).
    """
    from . import data as D
    cfg = cfg or ModelConfig(n_classes=sc.source_classes)
    say = log or (lambda *_: None)
    y, c = D.generate(sc.source_classes, sc.source_per_class, sc.n_points, 0.0, sc.data_seed, "source")
    (ytr, ctr), (yte, cte) = D.split(y, c)
    src_tr, src_te = prepare(ytr, ctr, cfg), prepare(yte, cte, cfg)
    model, pre = pretrain(cfg, src_tr, sc.pretrain, src_te)
    say(f"pretrain: test acc {pre['test_accuracy']:.3f} in {pre['timing']['wall_clock_s']:.1f}s")
    y, c = D.generate(sc.target_classes, sc.target_per_class, sc.n_points, sc.target_noise,
                      sc.data_seed + 1, "target")
    (ytr, ctr), (yte, cte) = D.split(y, c)
    tr, te = prepare(ytr, ctr, cfg), prepare(yte, cte, cfg)
    runs, summary = [], {}
    for m in sc.methods:
        accs, wall = [], 0.0
        for s in sc.seeds:
            lr = sc.full_lr if m == "full" else sc.finetune_lr
            tc = TrainConfig(epochs=sc.finetune_epochs, batch_size=sc.batch_size, lr=lr, seed=s)
            _, rep = finetune(model, tr, te, m, tc, b=sc.b)
            runs.append(rep)
            accs.append(rep["test_accuracy"])
            wall += rep["timing"]["wall_clock_s"]
        summary[m] = {"mean": float(np.mean(accs)), "min": min(accs), "max": max(accs),
                      "accuracies": accs, "trainable_params": rep["trainable_params"],
                      "wall_clock_s": wall}
        say(f"{m}: mean {summary[m]['mean']:.3f} range [{min(accs):.3f}, {max(accs):.3f}] "
            f"params {rep['trainable_params']} in {wall:.0f}s")
    return {"pretrain": pre, "runs": runs, "summary": summary}


# --------------------------------------------------------------------------
# benchmarks and audits


def bench(d: int, bs: Sequence[int], G: int, repeats: int = 5, K: int = 4, seed: int = 0,
          dtype=np.float32) -> List[dict]:
    """Analytic multiply-add counts and best-of-``repeats`` wall time per apply."""
    from .geometry import knn
    from .peft import point_monarch_apply, init_most
    for b in bs:
        check_divisible(d, d, b)
    rng = make_rng(seed)
    X = rng.standard_normal((G, d)).astype(dtype)
    W = rng.standard_normal((d, d)).astype(dtype)
    graph = knn(rng.standard_normal((G, 3)), K)
    nbr = graph.neighbor_matrix().astype(dtype)  # built once per cloud, reused by all layers

    def best(fn):
        ts = []
        for _ in range(repeats):
            t = time.perf_counter()
            fn()
            ts.append(time.perf_counter() - t)
        return min(ts)

    rows = []
    dense_flops = 2 * G * d * d
    t_dense = best(lambda: X @ W)
    for b in bs:
        delta = init_most(d, d, b, seed=seed)
        M = delta.monarch
        for k, v in M.params().items():
            M.set_params({k: (rng.standard_normal(v.shape) * 0.1).astype(dtype)})
        delta.lam[...] = 0.5
        mflops = M.flops(G)
        rows.append({
            "d": d, "b": b, "G": G, "K": K,
            "dense_flops": dense_flops,
            "monarch_flops": mflops,
            "point_monarch_flops": mflops + 2 * 2 * G * K * d,
            "flop_ratio": mflops / dense_flops,
            "dense_s": t_dense,
            "monarch_s": best(lambda: M.apply(X)),
            "point_monarch_s": best(lambda: point_monarch_apply(delta, graph, X, nbr)),
        })
    return rows


def audit_table(model_shape: str, method: str, b: int = 32, variant: str = "full",
                rank: Optional[int] = None, n_classes: int = 15) -> dict:
    if model_shape == "toy":
        cfg = ModelConfig(n_classes=n_classes)
    elif model_shape == "pointmae-like":
        cfg = pointmae_like_config(n_classes)
    else:
        from .errors import UsageError
        raise UsageError(f"unknown model shape {model_shape!r}")
    counts = audit_counts(cfg, method, b=b, variant=variant, rank=rank)
    out = {"model_shape": model_shape, "method": method, "b": b, "variant": variant, **counts}
    if model_shape == "pointmae-like" and method == "most":
        out["bracket"] = [600_000, 1_000_000]
        out["in_bracket"] = 600_000 <= counts["backbone"] <= 1_000_000
    return out


def dump_json(obj, path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def without_wall_clock(obj):
    """Copy of a report with timing fields removed, for golden comparison."""
    if isinstance(obj, dict):
        return {k: without_wall_clock(v) for k, v in obj.items()
                if k not in ("timing", "wall_clock_s")}
    if isinstance(obj, list):
        return [without_wall_clock(v) for v in obj]
    return obj
