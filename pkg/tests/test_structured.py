import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from most_peft.errors import ConfigError, DimensionError
from most_peft.numeric import make_rng
from most_peft.structured import (VARIANTS, BlockParameterization, MonarchMatrix, block_diag_apply,
                                  block_param_materialize, make_factor, make_permutation,
                                  monarch_apply, monarch_materialize, monarch_param_count,
                                  permutation_matrix)

SHAPES = [(8, 8), (16, 16), (8, 24), (24, 8)]


def randomize(M, seed, scale=1.0):
    rng = make_rng(seed)
    M.set_params({k: rng.standard_normal(v.shape) * scale for k, v in M.params().items()})
    return M


def kron_loops(A, B):
    p, q = A.shape
    r, s = B.shape
    K = np.zeros((p * r, q * s))
    for i in range(p):
        for j in range(q):
            for k in range(r):
                for l in range(s):
                    K[i * r + k, j * s + l] = A[i, j] * B[k, l]
    return K


# permutations


def test_permutation_examples():
    assert list(make_permutation(1, 5)) == [0, 1, 2, 3, 4]
    x = np.array([10, 11, 12, 13])
    assert list(x[make_permutation(2, 2)]) == [10, 12, 11, 13]


def test_permutation_definition():
    b, m = 3, 4
    x = np.arange(b * m) * 1.5
    y = x[make_permutation(b, m)]
    for i in range(b):
        for j in range(m):
            assert y[j * b + i] == x[i * m + j]


def test_permutation_b2_m3_inverse():
    x = make_rng(0).standard_normal(6)
    y = x[make_permutation(2, 3)]
    assert np.array_equal(y[make_permutation(3, 2)], x)


@given(st.integers(1, 12), st.integers(1, 12))
def test_permutation_involution(b, m):
    x = np.arange(b * m)
    assert np.array_equal(x[make_permutation(b, m)][make_permutation(m, b)], x)


def test_permutation_rejects_empty():
    with pytest.raises(ConfigError):
        make_permutation(0, 3)


# block-diagonal factors


def test_block_diag_apply_diagonal_case():
    F = make_factor("full", 4, 1, 1)
    F.params["W"] = np.array([2.0, -1.0, 0.5, 3.0]).reshape(4, 1, 1)
    X = make_rng(1).standard_normal((3, 4))
    assert np.array_equal(block_diag_apply(F, X), X * [2.0, -1.0, 0.5, 3.0])


def test_block_diag_apply_single_block_is_matmul():
    F = make_factor("full", 1, 5, 3)
    F.params["W"] = make_rng(2).standard_normal((1, 5, 3))
    X = make_rng(3).standard_normal((4, 5))
    assert np.abs(block_diag_apply(F, X) - X @ F.params["W"][0]).max() < 1e-14


@pytest.mark.parametrize("kind", ["full", "lowrank", "kronecker"])
def test_block_diag_apply_matches_materialized(kind):
    F = make_factor(kind, 4, 4, 4)
    rng = make_rng(4)
    F.params = {k: rng.standard_normal(v.shape) for k, v in F.params.items()}
    X = rng.standard_normal((5, 16))
    D = F.materialize()
    assert np.abs(block_diag_apply(F, X) - X @ D).max() < 1e-12
    # nothing outside the diagonal blocks
    mask = np.kron(np.eye(4), np.ones((4, 4)))
    assert not D[mask == 0].any()


def test_block_diag_apply_shape_error():
    with pytest.raises(DimensionError):
        block_diag_apply(make_factor("full", 2, 3, 3), np.ones((2, 5)))


def test_block_param_materialize_examples():
    B = make_rng(5).standard_normal((3, 3))
    p = BlockParameterization("lowrank", {"U": np.eye(3), "V": B})
    assert np.array_equal(block_param_materialize(p), B)
    k = BlockParameterization("kronecker", {"A": np.eye(2), "B": np.eye(3)})
    assert np.array_equal(block_param_materialize(k), np.eye(6))
    W = np.ones((2, 2))
    assert block_param_materialize(BlockParameterization("full", {"W": W})) is W


def test_kronecker_matches_definition():
    rng = make_rng(6)
    A, B = rng.standard_normal((2, 2)), rng.standard_normal((3, 3))
    got = block_param_materialize(BlockParameterization("kronecker", {"A": A, "B": B}))
    assert np.abs(got - kron_loops(A, B)).max() < 1e-14


def test_kronecker_factor_blocks_match_definition():
    F = make_factor("kronecker", 2, 6, 4)
    rng = make_rng(7)
    F.params = {k: rng.standard_normal(v.shape) for k, v in F.params.items()}
    for i in range(2):
        assert np.abs(F.blocks()[i] - kron_loops(F.params["A"][i], F.params["B"][i])).max() < 1e-14


def test_block_param_shape_violations():
    with pytest.raises(ConfigError):
        block_param_materialize(BlockParameterization("lowrank", {"U": np.ones((3, 2)), "V": np.ones((3, 3))}))
    with pytest.raises(ConfigError):
        block_param_materialize(BlockParameterization("lowrank", {"U": np.ones((2, 3)), "V": np.ones((3, 2))}))
    with pytest.raises(ConfigError):
        block_param_materialize(BlockParameterization("wavelet", {}))


# Monarch


def test_monarch_hand_expanded_4x4():
    M = MonarchMatrix(4, 4, 2)
    M.set_params({"R.W": np.array([[[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]]),
                  "L.W": np.array([[[0.0, 1.0], [1.0, 0.0]], [[2.0, 0.0], [0.0, 3.0]]])})
    # u = x R; z = (u0, u2, u1, u3); y = (u2, u0, 2 u1, 3 u3); out = (u2, 2 u1, u0, 3 u3)
    expected = np.array([[0, 4, 1, 0],
                         [0, 8, 3, 0],
                         [5, 0, 0, 18],
                         [7, 0, 0, 24]], dtype=float)
    assert np.array_equal(monarch_materialize(M), expected)
    x = np.array([[1.0, -1.0, 2.0, 0.5]])
    assert np.abs(monarch_apply(M, x) - x @ expected).max() < 1e-14


def test_monarch_identity_blocks():
    M = MonarchMatrix(12, 12, 3)
    M.set_params({"R.W": np.broadcast_to(np.eye(4), (3, 4, 4)).copy(),
                  "L.W": np.broadcast_to(np.eye(4), (3, 4, 4)).copy()})
    assert np.array_equal(monarch_materialize(M), np.eye(12))


def test_monarch_zero_left():
    M = randomize(MonarchMatrix(16, 16, 4), 0)
    M.set_params({"L.W": np.zeros_like(M.params()["L.W"])})
    assert not monarch_apply(M, make_rng(1).standard_normal((3, 16))).any()
    assert not monarch_materialize(M).any()


def test_monarch_b1_is_dense_product():
    M = randomize(MonarchMatrix(6, 9, 1), 3)
    R, L = M.params()["R.W"][0], M.params()["L.W"][0]
    assert np.abs(monarch_materialize(M) - R @ L).max() < 1e-13


@pytest.mark.parametrize("variant", sorted(VARIANTS))
@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("b", [1, 2, 4, 8])
def test_fast_path_matches_materialization(variant, shape, b):
    d_in, d_out = shape
    for seed in range(20):
        M = randomize(MonarchMatrix(d_in, d_out, b, variant), seed)
        X = make_rng(1000 + seed).standard_normal((3, d_in))
        assert np.abs(monarch_apply(M, X) - X @ monarch_materialize(M)).max() < 1e-12


def test_monarch_shape_errors():
    with pytest.raises(ConfigError):
        MonarchMatrix(10, 12, 4)
    with pytest.raises(DimensionError):
        monarch_apply(MonarchMatrix(8, 8, 2), np.ones((2, 6)))


# counts


def test_param_count_examples():
    assert monarch_param_count(384, 384, 16) == 18_432
    assert monarch_param_count(384, 1536, 16) == 46_080
    assert monarch_param_count(384, 384, 1) == 294_912
    with pytest.raises(ConfigError):
        monarch_param_count(384, 384, 7)


@given(st.sampled_from(sorted(VARIANTS)), st.sampled_from(SHAPES + [(16, 64), (64, 16)]),
       st.sampled_from([1, 2, 4, 8]))
@settings(max_examples=60, deadline=None)
def test_param_count_matches_storage(variant, shape, b):
    M = MonarchMatrix(*shape, b, variant)
    assert M.param_count() == monarch_param_count(*shape, b, variant)


def test_square_full_count_is_2d2_over_b():
    for d, b in itertools.product([8, 16, 96], [1, 2, 4, 8]):
        assert monarch_param_count(d, d, b) == 2 * d * d // b


@pytest.mark.parametrize("d_in,d_out,b", [(384, 384, 16), (96, 384, 8), (384, 384, 32)])
def test_variant_ordering(d_in, d_out, b):
    n = {v: monarch_param_count(d_in, d_out, b, v) for v in ("II", "III", "I", "full")}
    assert n["II"] < n["III"] < n["I"] < n["full"]


def test_b1_represents_any_dense_product():
    rng = make_rng(8)
    A, B = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
    M = MonarchMatrix(5, 5, 1)
    M.set_params({"R.W": A[None], "L.W": B[None]})
    assert np.abs(monarch_materialize(M) - A @ B).max() < 1e-13


def test_permutation_matrix_convention():
    perm = make_permutation(2, 3)
    x = np.arange(6.0)
    assert np.array_equal(permutation_matrix(perm) @ x, x[perm])
