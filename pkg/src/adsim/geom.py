"""Rotation and integration primitives shared by every dynamics layer.

All functions accept plain float64 arrays or tape nodes (see :mod:`adsim.tape`)
and work on batched inputs: rotations are ``[..., 3, 3]``, vectors ``[..., 3]``,
flat states ``[..., n]``.
"""

from __future__ import annotations

import numpy as np

from . import tape as ad
from .tape import skew  # public geom op, recorded as a single tape primitive

__all__ = [
    "GRAVITY", "GRAVITY_VEC",
    "skew", "rk4_step", "reorthonormalize",
    "rotation_about_axis", "random_tilt",
    "NonFiniteStageError", "DegenerateRotationError",
]

GRAVITY = 9.81
GRAVITY_VEC = np.array([0.0, 0.0, -GRAVITY])


class NonFiniteStageError(Exception):
    """An RK4 stage derivative came back NaN/inf; carries the stage index."""

    def __init__(self, stage: int):
        self.stage = stage
        super().__init__(f"non-finite derivative at RK4 stage {stage}")


class DegenerateRotationError(Exception):
    pass


def rk4_step(f, x, u, dt: float):
    """One classical Runge-Kutta 4 step of dx/dt = f(x, u).

    `u` is held constant across the four stages (zero-order hold). `x` may be
    a plain array or a tape node; `f` must handle whichever it receives.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    k1 = f(x, u)
    _check_stage(k1, 1)
    k2 = f(ad.axpy(x, k1, 0.5 * dt), u)
    _check_stage(k2, 2)
    k3 = f(ad.axpy(x, k2, 0.5 * dt), u)
    _check_stage(k3, 3)
    k4 = f(ad.axpy(x, k3, dt), u)
    _check_stage(k4, 4)
    return ad.rk4_combine(x, k1, k2, k3, k4, dt)


def _check_stage(k, stage: int) -> None:
    if not np.all(np.isfinite(ad.value_of(k))):
        raise NonFiniteStageError(stage)


def reorthonormalize(R):
    """Project a near-rotation back onto SO(3).

    Gram-Schmidt on the rows with the third row rebuilt as a cross product,
    so the result is exactly right-handed (det = +1). Differentiable; used
    inside taped rollouts after each integration step. Inputs farther than
    ~0.1 (Frobenius) from orthonormal are rejected as degenerate.
    """
    Rv = ad.value_of(R)
    if Rv.shape[-2:] != (3, 3):
        raise ValueError(f"expected [..., 3, 3] rotation, got {Rv.shape}")
    r0 = Rv[..., 0, :]
    n0 = np.linalg.norm(r0, axis=-1)
    if np.any(n0 < 0.5):
        raise DegenerateRotationError("first row near zero")
    r1 = Rv[..., 1, :]
    e0 = r0 / n0[..., None]
    w = r1 - np.sum(e0 * r1, axis=-1, keepdims=True) * e0
    if np.any(np.linalg.norm(w, axis=-1) < 0.5):
        raise DegenerateRotationError("first two rows near collinear")
    return ad.gram_schmidt_rows(R)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix (plain numpy; used for test fixtures and
    initial-state sampling)."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = ad.value_of(skew(a))
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def random_tilt(rng: np.random.Generator, max_angle: float) -> np.ndarray:
    """Rotation by a uniform angle in [0, max_angle] about a random axis."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return rotation_about_axis(axis, rng.uniform(0.0, max_angle))
