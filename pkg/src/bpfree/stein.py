"""Derivative-free derivatives of Gaussian-smoothed functions.

For ``u(x) = E f(x + delta)``, ``delta ~ N(0, sigma^2 I)``:

    grad u(x)      = E[ delta / (2 sigma^2) * (f(x + delta) - f(x - delta)) ]
    laplacian u(x) = E[ (|delta|^2 - sigma^2 D) / (2 sigma^4)
                        * (f(x + delta) + f(x - delta) - 2 f(x)) ]

The expectations are taken either with i.i.d. Monte Carlo draws ("mc") or
with a symmetric sparse grid ("sg"). Vector-valued ``f`` is handled
componentwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quadrature import SparseGrid, smolyak_build

__all__ = [
    "SmoothedModel",
    "SteinResult",
    "stein_offsets",
    "stein_estimates",
    "smoothed_value",
    "stein_grad",
    "stein_laplacian",
]


@dataclass
class SmoothedModel:
    """``base`` maps an ``(n, dim)`` array to ``(n,)`` or ``(n, k)`` outputs.

    Passing ``grid`` selects sparse-grid mode; the grid must be built for
    ``N(0, I)`` (``sigma = 1``) and is rescaled here. Otherwise ``n_samples``
    Monte Carlo draws are used, seeded from ``(seed, point index)``.
    """

    base: object
    dim: int
    sigma: float = 0.1
    grid: SparseGrid | None = None
    n_samples: int = 1024
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.grid is not None and self.grid.dim != self.dim:
            raise ValueError(f"grid dimension {self.grid.dim} does not match input dimension {self.dim}")
        if self.grid is None and self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    @classmethod
    def sparse(cls, base, dim, sigma=0.1, level=3):
        return cls(base, dim, sigma, grid=smolyak_build(dim, level))

    @property
    def mode(self):
        return "sg" if self.grid is not None else "mc"


@dataclass
class SteinResult:
    value: np.ndarray
    grad: np.ndarray
    laplacian: np.ndarray
    queries: int


def stein_offsets(model: SmoothedModel, n_points=1, first_index=0):
    """Perturbations and weights: ``deltas`` is ``(n, dim)`` (sg) or ``(n_points, n, dim)`` (mc)."""
    if model.grid is not None:
        grid = model.grid.scaled(model.sigma)
        return grid.nodes, grid.weights
    deltas = np.stack([
        model.sigma * np.random.default_rng([model.seed, first_index + i]).standard_normal(
            (model.n_samples, model.dim)
        )
        for i in range(n_points)
    ])
    return deltas, np.full(model.n_samples, 1.0 / model.n_samples)


def stein_estimates(f, x, deltas, weights, sigma, laplacian_dims=None) -> SteinResult:
    """Smoothed value, gradient and Laplacian at every row of ``x``.

    ``laplacian_dims`` restricts the Laplacian to a subset of coordinates
    (the weight then uses ``|delta_S|^2 - sigma^2 |S|``); the gradient always
    covers every coordinate. ``f`` sees one ``(n, dim)`` array per call
    group and must be vectorized over rows.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    B, dim = x.shape
    deltas = np.asarray(deltas, dtype=float)
    shared = deltas.ndim == 2
    if deltas.shape[-1] != dim:
        raise ValueError(f"perturbations have dimension {deltas.shape[-1]}, inputs {dim}")
    n = deltas.shape[-2]
    d = np.broadcast_to(deltas, (B, n, dim))

    plus = x[:, None, :] + d
    minus = x[:, None, :] - d
    stacked = np.concatenate([plus.reshape(-1, dim), minus.reshape(-1, dim), x])
    out = np.asarray(f(stacked), dtype=float)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("base function returned a non-finite value")
    scalar = out.ndim == 1
    out = out.reshape(len(stacked), -1)
    k = out.shape[1]
    fp = out[: B * n].reshape(B, n, k)
    fm = out[B * n : 2 * B * n].reshape(B, n, k)
    f0 = out[2 * B * n :].reshape(B, 1, k)

    w = np.asarray(weights, dtype=float)
    value = np.einsum("j,bjk->bk", w, 0.5 * (fp + fm))
    grad = np.einsum("j,bjd,bjk->bdk", w, d, fp - fm) / (2.0 * sigma**2)

    if laplacian_dims is None:
        sq = np.sum(d**2, axis=-1)
        n_lap = dim
    else:
        sel = np.asarray(laplacian_dims)
        sq = np.sum(d[..., sel] ** 2, axis=-1)
        n_lap = len(sel)
    lap_weight = (sq - sigma**2 * n_lap) / (2.0 * sigma**4)
    lap = np.einsum("j,bj,bjk->bk", w, lap_weight, fp + fm - 2.0 * f0)

    if scalar:
        value, grad, lap = value[:, 0], grad[..., 0], lap[:, 0]
    return SteinResult(value, grad, lap, B * (2 * n + 1))


def _run(model, x, laplacian_dims=None):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[1] != model.dim:
        raise ValueError(f"input has dimension {pts.shape[1]}, model expects {model.dim}")
    deltas, weights = stein_offsets(model, len(pts))
    res = stein_estimates(model.base, pts, deltas, weights, model.sigma, laplacian_dims)
    if single:
        return SteinResult(res.value[0], res.grad[0], res.laplacian[0], res.queries)
    return res


def smoothed_value(model: SmoothedModel, x):
    """``E f(x + delta)``; in mc mode the draws are used antithetically."""
    return _run(model, x).value


def stein_grad(model: SmoothedModel, x):
    return _run(model, x).grad


def stein_laplacian(model: SmoothedModel, x, laplacian_dims=None):
    return _run(model, x, laplacian_dims).laplacian
