"""Monarch matrices: structure, parameter counts and speed.

Builds a square Monarch operator, checks the fast block path against the
explicitly materialized matrix, then compares the storage and FLOP budget of
each block variant against a dense layer.

    python demos/monarch_operator.py
"""
import numpy as np

from most_peft.harness import bench
from most_peft.numeric import make_rng
from most_peft.structured import MonarchMatrix, init_monarch, monarch_param_count

d, b = 384, 16
M = init_monarch(MonarchMatrix(d, d, b), sigma=0.05, seed=0)
rng = make_rng(1)
M.set_params({k: rng.standard_normal(v.shape) * 0.05 for k, v in M.params().items()})

X = rng.standard_normal((64, d))
dense = M.materialize()
print(f"fast path vs materialized: max abs diff {np.abs(M.apply(X) - X @ dense).max():.2e}")
print(f"dense {d}x{d}: {d * d:,} params, Monarch b={b}: {M.param_count():,} (2d^2/b)")

# the materialized matrix is dense even though only 2d^2/b numbers define it
print(f"nonzeros in materialized matrix: {np.count_nonzero(dense):,}")

print("\nblock variants at d=384, b=32:")
for v in ("full", "I", "II", "III", "IV", "V", "VI"):
    print(f"  {v:>4}: {monarch_param_count(d, d, 32, v):>7,}")

print("\nwall time per apply (f32, G=64 tokens):")
for row in bench(d, [1, 4, 16], 64, repeats=30, dtype=np.float32):
    print(f"  b={row['b']:>2}  flops {row['monarch_flops']:>10,} vs dense {row['dense_flops']:,}"
          f"  time {row['monarch_s'] * 1e6:6.0f}us vs {row['dense_s'] * 1e6:.0f}us")
