"""Merging a MoST layer for inference.

The trained delta is ``K (K X) M``. Folding ``M`` into the frozen weight
("dropK") gives a plain dense layer but discards the input-dependent token
mixing, so it is exact only at lambda = 0. The "exact" merge keeps both mixes
around a dense ``M`` and matches the training forward to rounding.

    python demos/merge_fidelity.py
"""
import numpy as np

from most_peft.geometry import knn
from most_peft.numeric import make_rng
from most_peft.peft import MostLinear, init_most, merge

rng = make_rng(0)
d = 96
W0, bias = rng.standard_normal((d, d)) * 0.1, np.zeros(d)
g = knn(rng.standard_normal((32, 3)), 4)
X = rng.standard_normal((32, d))

print("lambda   exact diff   dropK relative deviation")
for lam in (0.0, 0.05, 0.2, 0.5, 1.0):
    delta = init_most(d, d, 8, seed=1)
    delta.monarch.set_params({k: rng.standard_normal(v.shape) * 0.1
                              for k, v in delta.monarch.params().items()})
    delta.lam[...] = lam
    layer = MostLinear(W0, bias, delta)
    ref = layer.forward(X, g)
    exact = np.abs(merge(layer, "exact").forward(X, g) - ref).max()
    drop = merge(layer, "dropK").forward(X)
    print(f"{lam:6.2f}   {exact:10.1e}   {np.linalg.norm(drop - ref) / np.linalg.norm(ref):.4f}")
