"""Synthetic point-cloud shapes.

Six surface families (sphere, box, torus, cylinder, cone, helix) sampled with a
random pose, scale jitter and Gaussian noise, then normalized to the unit
sphere. The ``source`` task labels clouds by family. The ``target`` task is a
shifted 4-way problem: two families, each either stretched or squashed along
its own axis, observed with extra noise. Telling the stretch apart needs
features the source task never asked for.
"""
from __future__ import annotations

from typing import List, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigError
from .numeric import make_rng

SHAPES = ("sphere", "box", "torus", "cylinder", "cone", "helix")

# class -> (shape, axial stretch)
TARGET_CLASSES: Tuple[Tuple[str, float], ...] = (
    ("cylinder", 0.6),
    ("cylinder", 1.6),
    ("cone", 0.6),
    ("cone", 1.6),
)


def sample_surface(shape: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if shape == "sphere":
        p = rng.standard_normal((n, 3))
        return p / np.linalg.norm(p, axis=1, keepdims=True)
    if shape == "box":
        p = rng.uniform(-1, 1, (n, 3))
        axis = rng.integers(0, 3, n)
        p[np.arange(n), axis] = rng.choice([-1.0, 1.0], n)
        return p
    if shape == "torus":
        u, v = rng.uniform(0, 2 * np.pi, (2, n))
        R, r = 1.0, 0.35
        return np.stack([(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u),
                         r * np.sin(v)], axis=1)
    if shape == "cylinder":
        u = rng.uniform(0, 2 * np.pi, n)
        z = rng.uniform(-1, 1, n)
        r = 0.6
        p = np.stack([r * np.cos(u), r * np.sin(u), z], axis=1)
        cap = rng.random(n) < r / (r + 2.0)  # cap share by area
        rad = r * np.sqrt(rng.random(cap.sum()))
        p[cap, 0] = rad * np.cos(u[cap])
        p[cap, 1] = rad * np.sin(u[cap])
        p[cap, 2] = rng.choice([-1.0, 1.0], cap.sum())
        return p
    if shape == "cone":
        u = rng.uniform(0, 2 * np.pi, n)
        s = np.sqrt(rng.random(n))  # uniform over lateral area
        return np.stack([s * np.cos(u), s * np.sin(u), 1.0 - 2.0 * s], axis=1)
    if shape == "helix":
        t = rng.uniform(0, 4 * np.pi, n)
        a = rng.uniform(0, 2 * np.pi, n)
        tube = 0.12
        c = np.stack([np.cos(t), np.sin(t), t / (2 * np.pi) - 1.0], axis=1)
        normal = np.stack([np.cos(t), np.sin(t), np.zeros(n)], axis=1)
        return c + tube * (np.cos(a)[:, None] * normal + np.sin(a)[:, None] * np.array([0, 0, 1.0]))
    raise ConfigError(f"unknown shape {shape!r}")


def make_cloud(shape: str, n: int, rng: np.random.Generator, noise: float = 0.0,
               stretch: float = 1.0, full_rotation: bool = True) -> np.ndarray:
    p = sample_surface(shape, n, rng)
    p = p * np.array([1.0, 1.0, stretch])
    p = p * rng.uniform(0.85, 1.15)
    rot = Rotation.random(random_state=rng) if full_rotation else \
        Rotation.from_euler("z", rng.uniform(0, 2 * np.pi))
    p = rot.apply(p)
    if noise > 0:
        p = p + noise * rng.standard_normal(p.shape)
    # shapes are built around the origin; only rescale
    return p / np.sqrt((p * p).sum(axis=1)).max()


def class_table(task: str, classes: int):
    if task == "source":
        if not 1 <= classes <= len(SHAPES):
            raise ConfigError(f"classes must be in 1..{len(SHAPES)}, got {classes}")
        return [(s, 1.0) for s in SHAPES[:classes]]
    if task == "target":
        if not 1 <= classes <= len(TARGET_CLASSES):
            raise ConfigError(f"target task has at most {len(TARGET_CLASSES)} classes")
        return list(TARGET_CLASSES[:classes])
    raise ConfigError(f"unknown task {task!r}")


def generate(classes: int, samples_per_class: int, n_points: int, noise: float, seed: int,
             task: str = "source") -> Tuple[np.ndarray, List[np.ndarray]]:
    """Class-balanced samples in class-interleaved order; fully determined by ``seed``."""
    table = class_table(task, classes)
    if samples_per_class < 1 or n_points < 1:
        raise ConfigError("samples_per_class and n_points must be positive")
    rng = make_rng(seed)
    labels, clouds = [], []
    for _ in range(samples_per_class):
        for y, (shape, stretch) in enumerate(table):
            labels.append(y)
            clouds.append(make_cloud(shape, n_points, rng, noise, stretch))
    return np.asarray(labels, dtype=np.int64), clouds


def split(labels: np.ndarray, clouds: List[np.ndarray], test_fraction: float = 0.25):
    """Deterministic split: every k-th round of the interleaved order goes to test."""
    n_cls = int(labels.max()) + 1
    rounds = len(labels) // n_cls
    step = max(2, int(round(1.0 / test_fraction)))
    is_test = np.array([(i // n_cls) % step == step - 1 for i in range(len(labels))])
    if rounds * n_cls != len(labels):
        is_test[rounds * n_cls:] = False
    tr = np.flatnonzero(~is_test)
    te = np.flatnonzero(is_test)
    return ((labels[tr], [clouds[i] for i in tr]), (labels[te], [clouds[i] for i in te]))
