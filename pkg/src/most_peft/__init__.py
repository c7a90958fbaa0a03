"""Monarch-structured fine-tuning deltas for point-cloud transformers.

Main entry points:

* :class:`~most_peft.structured.MonarchMatrix` and :func:`monarch_param_count`
* :func:`~most_peft.geometry.knn`, :func:`k_rectify_apply`, :func:`build_k_matrix`
* :class:`~most_peft.peft.MostLinear`, :func:`init_most`, :func:`merge`
* :class:`~most_peft.backbone.Model` and the methods in :mod:`most_peft.methods`
"""
from .errors import ConfigError, DimensionError, FormatError, MostError, NumericError, UsageError
from .geometry import KnnGraph, build_k_matrix, fps, k_rectify_apply, knn, local_feature_distance
from .numeric import finite_diff_check, gaussian_init, set_precision
from .peft import MostLinear, PointMonarchDelta, fusion_head, init_most, merge, point_monarch_apply
from .structured import MonarchMatrix, make_permutation, monarch_param_count

__all__ = [
    "ConfigError", "DimensionError", "FormatError", "MostError", "NumericError", "UsageError",
    "KnnGraph", "build_k_matrix", "fps", "k_rectify_apply", "knn", "local_feature_distance",
    "finite_diff_check", "gaussian_init", "set_precision",
    "MostLinear", "PointMonarchDelta", "fusion_head", "init_most", "merge", "point_monarch_apply",
    "MonarchMatrix", "make_permutation", "monarch_param_count",
]
__version__ = "0.1.0"
