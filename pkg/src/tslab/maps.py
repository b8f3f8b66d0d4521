"""Periodic maps ``Z = id + w`` on the torus: composition, inversion, Jacobians."""

from __future__ import annotations

import numpy as np

from .spectral import SpectralField, TorusGrid, evaluate, gradient, transform

__all__ = [
    "NotADiffeomorphismError",
    "jacobian",
    "jacobian_determinant",
    "check_diffeomorphism",
    "compose",
    "inverse_displacement",
]


class NotADiffeomorphismError(ValueError):
    """The map folds over itself somewhere on the grid."""


def jacobian(disp: SpectralField) -> np.ndarray:
    """Pointwise ``I + grad w`` as an array of shape ``(d, d, N, ..., N)``."""
    g = disp.grid
    jac = gradient(disp).values().reshape((g.dim, g.dim) + g.shape)
    return jac + np.eye(g.dim).reshape((g.dim, g.dim) + (1,) * g.dim)


def jacobian_determinant(disp: SpectralField) -> np.ndarray:
    jac = jacobian(disp)
    return np.linalg.det(np.moveaxis(jac, (0, 1), (-2, -1)))


def check_diffeomorphism(disp: SpectralField) -> float:
    """Return the minimum Jacobian determinant; raise if it is not positive."""
    det_min = float(jacobian_determinant(disp).min())
    if det_min <= 0:
        raise NotADiffeomorphismError(f"Jacobian determinant reaches {det_min:.3e}")
    return det_min


def compose(f: SpectralField, disp: SpectralField, grid: TorusGrid | None = None) -> SpectralField:
    """``f o (id + disp)`` sampled on ``grid`` (default: the field's grid)."""
    grid = grid or f.grid
    x = grid.points.reshape(grid.dim, -1)
    w = evaluate(disp, x) if disp.grid != grid else disp.values().reshape(grid.dim, -1)
    vals = evaluate(f, x + w)
    return transform(vals.reshape((f.components,) + grid.shape), grid)


def inverse_displacement(
    disp: SpectralField,
    points: np.ndarray | None = None,
    tol: float = 1e-12,
    max_iter: int = 500,
) -> np.ndarray:
    """Displacement ``z`` with ``(id + disp)(x + z) = x`` at the given points.

    Solves ``y = x - disp(y)`` by fixed-point iteration, undamped when
    ``|grad disp| < 1/2`` and with damping 1/2 otherwise. Returns ``y - x``
    with shape ``(d, P)``.
    """
    g = disp.grid
    x = g.points.reshape(g.dim, -1) if points is None else np.asarray(points, float).reshape(g.dim, -1)
    grad_sup = float(np.abs(gradient(disp).values()).max())
    theta = 1.0 if grad_sup < 0.5 else 0.5
    y = x - evaluate(disp, x)
    for _ in range(max_iter):
        y_new = (1 - theta) * y + theta * (x - evaluate(disp, y))
        step = float(np.max(np.abs(y_new - y)))
        y = y_new
        if step < tol:
            return y - x
    raise NotADiffeomorphismError(f"inverse map did not converge (last step {step:.2e})")
