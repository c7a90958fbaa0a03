import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from most_peft import autodiff as ad
from most_peft.backbone import Model, ModelConfig
from most_peft.errors import ConfigError, DimensionError, UsageError
from most_peft.geometry import build_k_matrix, k_rectify_apply, knn
from most_peft.methods import (audit_counts, inject_lora, inject_most, linear_probe,
                               matched_lora_rank, merge_model)
from most_peft.numeric import adamw, make_rng, optimizer_step
from most_peft.peft import (FusionHeadConfig, MostLinear, fusion_head, init_most, merge, mixpool,
                            most_sigma, point_monarch_apply, sparse_linear_forward)
from most_peft.structured import monarch_param_count


def trained_delta(d_in, d_out, b, lam, seed, variant="full"):
    """A delta with every factor randomized, as if after training."""
    delta = init_most(d_in, d_out, b, variant, seed=seed)
    rng = make_rng(seed + 1)
    delta.monarch.set_params({k: rng.standard_normal(v.shape) * 0.3
                              for k, v in delta.monarch.params().items()})
    delta.lam[...] = lam
    return delta


def most_layer(d_in, d_out, b, lam, seed):
    rng = make_rng(seed)
    return MostLinear(rng.standard_normal((d_in, d_out)), rng.standard_normal(d_out),
                      trained_delta(d_in, d_out, b, lam, seed))


def graph(G, K, seed):
    return knn(make_rng(seed).standard_normal((G, 3)), K)


# init


def test_sigma_example():
    assert most_sigma(384, 384) == pytest.approx(0.051031, abs=5e-7)
    assert most_sigma(96, 384) == pytest.approx(np.sqrt(96 / 96 ** 2))
    assert most_sigma(384, 96) == pytest.approx(np.sqrt(96 / 384 ** 2))


def test_init_contract():
    d = init_most(16, 16, 4, seed=3)
    p = d.monarch.params()
    assert not p["L.W"].any()
    assert p["R.W"].any()
    assert float(d.lam) == 0.0
    assert np.array_equal(init_most(16, 16, 4, seed=3).monarch.params()["R.W"], p["R.W"])
    assert not np.array_equal(init_most(16, 16, 4, seed=4).monarch.params()["R.W"], p["R.W"])
    with pytest.raises(ConfigError):
        init_most(16, 18, 4)


def test_init_r_statistics():
    R = init_most(384, 384, 4, seed=0).monarch.params()["R.W"]
    assert R.std() == pytest.approx(most_sigma(384, 384), rel=0.02)


@pytest.mark.parametrize("variant", ["full", "I", "II", "III", "IV", "V", "VI"])
def test_init_is_zero_delta(variant):
    d = init_most(16, 32, 4, variant, seed=1)
    d.lam[...] = 0.7  # even a nonzero lam cannot revive a zero L
    X = make_rng(2).standard_normal((10, 16))
    assert not point_monarch_apply(d, graph(10, 3, 0), X).any()


def test_layer_at_init_equals_frozen():
    rng = make_rng(4)
    W, b = rng.standard_normal((16, 8)), rng.standard_normal(8)
    layer = MostLinear(W, b, init_most(16, 8, 4, seed=5))
    X = rng.standard_normal((12, 16))
    assert np.array_equal(layer.forward(X, graph(12, 4, 1)), X @ W + b)


# Point Monarch


def test_lam_zero_reduces_to_monarch():
    d = trained_delta(16, 16, 4, 0.0, 0)
    X = make_rng(1).standard_normal((8, 16))
    assert np.abs(point_monarch_apply(d, graph(8, 3, 2), X) - d.monarch.apply(X)).max() < 1e-14


@pytest.mark.parametrize("d_in,d_out", [(16, 16), (8, 24), (24, 8)])
@pytest.mark.parametrize("lam", [0.0, 0.3, 1.0])
def test_point_monarch_matches_dense_oracle(d_in, d_out, lam):
    for seed in range(5):
        d = trained_delta(d_in, d_out, 4, lam, seed)
        g = graph(8, 3, seed)
        X = make_rng(50 + seed).standard_normal((8, d_in))
        Kd = build_k_matrix(g, lam).to_dense()
        ref = Kd @ ((Kd @ X) @ d.monarch.materialize())
        assert np.abs(point_monarch_apply(d, g, X) - ref).max() < 1e-12


@given(st.integers(0, 1000), st.floats(-1, 1))
@settings(max_examples=25, deadline=None)
def test_token_and_channel_mixing_commute(seed, lam):
    d = trained_delta(16, 8, 4, lam, seed)
    g = graph(10, 4, seed)
    X = make_rng(seed + 7).standard_normal((10, 16))
    a = d.monarch.apply(k_rectify_apply(g, lam, X))
    b = k_rectify_apply(g, lam, d.monarch.apply(X))
    assert np.abs(a - b).max() < 1e-12


def test_point_monarch_shape_error():
    with pytest.raises(DimensionError):
        point_monarch_apply(init_most(8, 8, 2), graph(6, 2, 0), np.ones((5, 8)))


def test_most_forward_w0_zero_equals_delta():
    d = trained_delta(16, 16, 4, 0.4, 1)
    layer = MostLinear(np.zeros((16, 16)), None, d)
    g = graph(9, 3, 3)
    X = make_rng(8).standard_normal((9, 16))
    assert np.array_equal(layer.forward(X, g), point_monarch_apply(d, g, X))


def test_most_forward_grad_only_reaches_delta():
    layer = most_layer(8, 8, 2, 0.3, 0)
    g = graph(6, 2, 1)
    N = g.neighbor_matrix()
    params = {"W": layer.weight, **layer.params()}
    tape = ad.Tape(params, trainable=set(layer.params()))
    x = ad.Var(make_rng(2).standard_normal((6, 8)))
    y = ad.add(ad.matmul(x, tape["W"]), layer.delta_var(x, lambda k: tape[k], N))
    ad.backward(ad.sum_(ad.mul(y, y)))
    grads = tape.grads()
    assert "W" not in grads
    assert set(grads) == {"most.R.W", "most.L.W", "most.lam"}


def test_most_forward_l_gradient_check():
    from most_peft.numeric import finite_diff_check
    layer = most_layer(8, 8, 2, 0.3, 0)
    g = graph(6, 2, 1)
    N = g.neighbor_matrix()
    X = make_rng(3).standard_normal((6, 8))
    R, lam = layer.delta.monarch.params()["R.W"], layer.delta.lam

    def fn(L):
        get = {"most.R.W": ad.Var(R), "most.L.W": L, "most.lam": ad.Var(lam)}.__getitem__
        return ad.add(ad.matmul(ad.Var(X), ad.Var(layer.weight)), layer.delta_var(ad.Var(X), get, N))

    rep = finite_diff_check(ad.FunctionOp(fn, "most.L"), [layer.delta.monarch.params()["L.W"]])
    assert rep.max_rel_err < 1e-5


# merging


def test_merge_lam_zero_drop_k_matches_train():
    layer = most_layer(16, 16, 4, 0.0, 0)
    g = graph(12, 4, 0)
    X = make_rng(1).standard_normal((12, 16))
    assert np.abs(merge(layer, "dropK").forward(X) - layer.forward(X, g)).max() < 1e-12


def test_merge_exact_matches_train_any_lam():
    for seed in range(20):
        layer = most_layer(16, 24, 8, 0.2 + 0.04 * seed, seed)
        g = graph(12, 4, seed)
        X = make_rng(100 + seed).standard_normal((12, 16))
        assert np.abs(merge(layer, "exact").forward(X, g) - layer.forward(X, g)).max() < 1e-12


def test_merge_untrained_delta_keeps_w0():
    rng = make_rng(0)
    W = rng.standard_normal((8, 8))
    layer = MostLinear(W, None, init_most(8, 8, 2, seed=1))
    assert np.array_equal(merge(layer, "dropK").weight, W)
    assert np.array_equal(merge(layer, "exact").weight, W)
    assert not merge(layer, "exact").monarch_dense.any()


def test_merge_modes_and_usage_errors():
    layer = most_layer(8, 8, 2, 0.5, 0)
    with pytest.raises(UsageError):
        merge(layer, "sideways")
    with pytest.raises(UsageError):
        merge(layer, "dropK").forward(np.ones((6, 8)), graph(6, 2, 0))
    layer.mode = "merged-dropK"
    with pytest.raises(UsageError):
        layer.forward(np.ones((6, 8)), graph(6, 2, 0))


def test_drop_k_deviation_grows_with_lam():
    g = graph(12, 4, 0)
    X = make_rng(1).standard_normal((12, 16))
    devs = []
    for lam in (0.0, 0.1, 0.5):
        layer = most_layer(16, 16, 4, lam, 0)
        e, d = layer.forward(X, g), merge(layer, "dropK").forward(X)
        devs.append(np.linalg.norm(e - d) / np.linalg.norm(e))
    assert devs[0] < 1e-14 < devs[1] < devs[2]


# sparse training


def test_sparse_layer_count_and_identity():
    d = init_most(384, 384, 16, zero_left=False)
    assert d.param_count() == 18_433
    assert d.monarch.params()["L.W"].any()
    g = graph(6, 2, 0)
    X = make_rng(0).standard_normal((6, 384))
    assert np.array_equal(sparse_linear_forward(d, g, X), point_monarch_apply(d, g, X))


def test_sparse_mlp_fits_monarch_teacher():
    G, d, b = 16, 8, 2
    g = graph(G, 3, 0)
    N = g.neighbor_matrix()
    teacher = trained_delta(d, d, b, 0.0, 9).monarch
    X = make_rng(1).standard_normal((64, G, d)) * 0.5
    Y = teacher.apply(X)
    layers = [init_most(d, d, b, seed=s, zero_left=False) for s in (2, 3)]
    params = {f"{i}.{k}": v for i, l in enumerate(layers) for k, v in l.params().items()}
    neighbors = sp.block_diag([N] * 8, format="csr")
    opt = adamw(lr=1e-2, weight_decay=0.0)
    for step in range(600):
        idx = np.arange(8) + 8 * (step % 8)
        tape = ad.Tape(params, set(params))
        h = ad.Var(X[idx])
        for i, l in enumerate(layers):
            h = ad.reshape(h, (8 * G, d))
            h = l.apply_var(h, lambda k, i=i: tape[f"{i}.{k}"], neighbors)
        loss = ad.mse(ad.reshape(h, (8, G, d)), Y[idx])
        ad.backward(loss)
        optimizer_step(opt, params, tape.grads())
    final = np.mean((_sparse_stack(layers, g, X) - Y) ** 2)
    assert final < 1e-3


def _sparse_stack(layers, g, X):
    out = []
    for x in X:
        h = x
        for l in layers:
            h = sparse_linear_forward(l, g, h)
        out.append(h)
    return np.stack(out)


# fusion head


def test_mixpool_constant_tokens():
    c = np.array([1.5, -2.0, 0.25])
    assert np.array_equal(mixpool(np.tile(c, (7, 1))), 2 * c)


def test_fusion_head_examples():
    rng = make_rng(0)
    f, cls = rng.standard_normal((9, 4)), rng.standard_normal(4)
    assert np.array_equal(fusion_head([f], cls), np.concatenate([mixpool(f), cls]))
    out = fusion_head([f, f, f], cls)
    assert np.allclose(out[:4], 7 * mixpool(f), atol=1e-14)
    assert np.array_equal(out[4:], cls)
    with pytest.raises(DimensionError):
        fusion_head([f, np.ones((9, 3))], cls)


def test_fusion_config_validation():
    FusionHeadConfig((4, 8, 12)).validate(12)
    for bad in [(8, 4), (4, 4), (0, 2), (4, 13), ()]:
        with pytest.raises(ConfigError):
            FusionHeadConfig(bad).validate(12)


# injection


def small_model(n_classes=4):
    return Model.create(ModelConfig(depth=2, dim=16, heads=2, n_patches=8, group_size=4,
                                    n_classes=n_classes, embed_hidden=(8, 16), knn_k=3,
                                    fusion_layers=(1, 2)), seed=0)


def test_inject_most_counts_and_hygiene():
    m = inject_most(small_model(), b=4)
    shapes = [(16, 48), (16, 16), (16, 64), (64, 16)]
    expected = 2 * sum(monarch_param_count(a, c, 4) for a, c in shapes) + 2 * 4 + (32 * 4 + 4)
    assert m.trainable_count() == expected
    assert m.trainable_count() == audit_counts(m.cfg, "most", 4)["total"]
    for name in m.trainable:
        assert name in ("head.weight", "head.bias") or ".most." in name
    allowed = {"R.W", "L.W", "lam"}
    assert {n.split(".most.")[1] for n in m.trainable if ".most." in n} == allowed


def test_inject_most_empty_targets_is_linear_probe():
    m = inject_most(small_model(), targets=(), b=4)
    assert m.trainable == {"head.weight", "head.bias"}
    assert m.trainable_count() == linear_probe(small_model()).trainable_count()


def test_inject_most_unknown_target():
    with pytest.raises(ConfigError):
        inject_most(small_model(), targets=("qkv", "gate"))


def test_block_count_scaling():
    cfg = small_model().cfg
    cfg8 = ModelConfig(depth=12, dim=384, n_classes=15)
    a = audit_counts(cfg8, "most", 8)["backbone"]
    b = audit_counts(cfg8, "most", 32)["backbone"]
    assert a == 4 * b
    assert audit_counts(cfg, "most", 2)["backbone"] == 2 * audit_counts(cfg, "most", 4)["backbone"]


def test_pointmae_like_delta_count():
    cfg = ModelConfig(depth=12, dim=384, heads=6, n_classes=15, fusion_layers=(4, 8, 12))
    per_layer = (monarch_param_count(384, 1152, 32) + monarch_param_count(384, 384, 32)
                 + monarch_param_count(384, 1536, 32) + monarch_param_count(1536, 384, 32))
    assert per_layer == 18_432 + 9_216 + 23_040 + 23_040
    counts = audit_counts(cfg, "most", 32)
    assert counts["backbone"] == 12 * per_layer == 884_736
    assert counts["lambdas"] == 48


def test_zero_init_model_matches_frozen():
    from most_peft.backbone import prepare_cloud
    from most_peft.data import generate
    base = small_model()
    _, clouds = generate(2, 2, 64, 0.0, 0)
    pcs = [prepare_cloud(c, base.cfg) for c in clouds]
    ref = base.logits(pcs)
    for variant in ("full", "I", "II", "III"):
        m = inject_most(base.clone(), b=4, variant=variant)
        assert np.abs(m.logits(pcs) - ref).max() < 1e-12
    lo = inject_lora(base.clone(), rank=2)
    assert np.abs(lo.logits(pcs) - ref).max() < 1e-12


def test_model_merges():
    from most_peft.backbone import prepare_cloud
    from most_peft.data import generate
    m = inject_most(small_model(), b=4, seed=1)
    rng = make_rng(3)
    for a in m.adapters.values():
        d = a.delta
        d.monarch.set_params({k: rng.standard_normal(v.shape) * 0.1 for k, v in d.monarch.params().items()})
        d.lam[...] = 0.3
    _, clouds = generate(2, 3, 64, 0.0, 1)
    pcs = [prepare_cloud(c, m.cfg) for c in clouds]
    train = m.logits(pcs)
    assert np.abs(merge_model(m, "exact").logits(pcs) - train).max() < 1e-12
    drop = merge_model(m, "dropK")
    assert not drop.adapters and not drop.trainable
    for a in m.adapters.values():
        a.delta.lam[...] = 0.0
    assert np.abs(merge_model(m, "dropK").logits(pcs) - m.logits(pcs)).max() < 1e-12


def test_matched_lora_rank_toy():
    cfg = ModelConfig(n_classes=4)
    r = matched_lora_rank(cfg, 8)
    most = audit_counts(cfg, "most", 8)["backbone"]
    lora = audit_counts(cfg, "lora", rank=r)["backbone"]
    assert abs(lora - most) <= audit_counts(cfg, "lora", rank=1)["backbone"] / 2
