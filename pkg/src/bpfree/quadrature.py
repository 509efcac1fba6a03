"""Gauss-Hermite rules and Smolyak sparse grids for expectations under N(0, I).

The univariate rule at level ``l`` is the ``l``-point probabilists'
Gauss-Hermite rule (exact to degree ``2l - 1``). The level-``k`` Smolyak rule
in ``D`` dimensions combines tensor products of these rules with the
combination-technique coefficients

    (-1) ** (k - 1 - q) * binom(D - 1, k - 1 - q),   q = max(0, k - D) .. k - 1,

over multi-indices ``l >= 1`` with ``sum(l) = D + q``. Coincident nodes are
merged by summing their weights, so each node is evaluated once.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations

import numpy as np

__all__ = [
    "UnivariateRule",
    "SparseGrid",
    "gauss_hermite",
    "smolyak_build",
    "integrate",
    "save_grid",
    "load_grid",
    "cached_grid",
]

_SNAP = 1e-12


@dataclass(frozen=True)
class UnivariateRule:
    level: int
    nodes: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class SparseGrid:
    dim: int
    level: int
    nodes: np.ndarray  # (n, dim), already multiplied by sigma
    weights: np.ndarray  # (n,)
    sigma: float = 1.0

    def __len__(self):
        return len(self.weights)

    def scaled(self, sigma: float) -> "SparseGrid":
        """Same rule for N(0, sigma^2 I); weights are unchanged."""
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        return SparseGrid(self.dim, self.level, self.nodes * (sigma / self.sigma), self.weights, sigma)


@lru_cache(maxsize=None)
def _gauss_hermite(n):
    x, w = np.polynomial.hermite_e.hermegauss(n)
    w = w / math.sqrt(2.0 * math.pi)
    # enforce exact symmetry so mirrored nodes dedupe and cancel exactly
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    x[np.abs(x) < _SNAP] = 0.0
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_hermite(n: int) -> UnivariateRule:
    """``n``-point rule for the standard normal density (weights sum to 1)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x, w = _gauss_hermite(n)
    return UnivariateRule(n, x, w)


def _compositions(total, parts):
    """All tuples of ``parts`` positive integers summing to ``total``."""
    if parts == 1:
        yield (total,)
        return
    for first in range(1, total - parts + 2):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def _sparse_indices(dim, excess):
    """Multi-indices ``l >= 1`` with ``sum(l) = dim + excess``.

    Enumerated through the few coordinates that exceed 1, which keeps the
    cost polynomial in ``dim`` for small levels.
    """
    if excess == 0:
        yield (1,) * dim
        return
    for n_active in range(1, min(excess, dim) + 1):
        for active in combinations(range(dim), n_active):
            for extra in _compositions(excess, n_active):
                index = [1] * dim
                for pos, e in zip(active, extra):
                    index[pos] = 1 + e
                yield tuple(index)


def smolyak_build(dim: int, level: int, sigma: float = 1.0) -> SparseGrid:
    """Deduplicated level-``level`` Smolyak rule in ``dim`` dimensions.

    Nodes are sorted lexicographically, so identical ``(dim, level)`` builds
    give identical node orderings.
    """
    if dim < 1 or level < 1:
        raise ValueError("dim and level must be >= 1")
    acc: dict[tuple, float] = {}
    for q in range(max(0, level - dim), level):
        coeff = (-1) ** (level - 1 - q) * math.comb(dim - 1, level - 1 - q)
        for index in _sparse_indices(dim, q):
            _accumulate(acc, index, coeff)
    keys = sorted(acc)
    nodes = np.array(keys, dtype=float).reshape(len(keys), dim)
    weights = np.array([acc[k] for k in keys])
    grid = SparseGrid(dim, level, nodes, weights)
    return grid if sigma == 1.0 else grid.scaled(sigma)


def _accumulate(acc, index, coeff):
    # only coordinates with level > 1 vary; level-1 coordinates sit at 0
    active = [(pos, l) for pos, l in enumerate(index) if l > 1]
    base = [0.0] * len(index)
    rules = [_gauss_hermite(l) for _, l in active]
    sizes = [len(r[0]) for r in rules]
    for combo in np.ndindex(*sizes) if sizes else [()]:
        node = list(base)
        w = float(coeff)
        for (pos, _), (x, wx), i in zip(active, rules, combo):
            node[pos] = float(x[i])
            w *= float(wx[i])
        key = tuple(node)
        acc[key] = acc.get(key, 0.0) + w


def integrate(grid: SparseGrid, f) -> np.ndarray | float:
    """``sum_j w_j f(node_j)``; ``f`` maps an ``(n, dim)`` array to ``(n,)`` or ``(n, ...)``."""
    values = np.asarray(f(grid.nodes), dtype=float)
    if values.shape[:1] != (len(grid),):
        raise ValueError("f must return one value (or row) per node")
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("integrand is not finite on every node")
    out = np.tensordot(grid.weights, values, axes=(0, 0))
    return float(out) if np.ndim(out) == 0 else out


def save_grid(path, grid: SparseGrid) -> None:
    np.savez(path, dim=grid.dim, level=grid.level, sigma=grid.sigma, nodes=grid.nodes, weights=grid.weights)


def load_grid(path) -> SparseGrid:
    with np.load(path) as data:
        return SparseGrid(
            int(data["dim"]), int(data["level"]), data["nodes"], data["weights"], float(data["sigma"])
        )


def cached_grid(dim: int, level: int, cache_dir=None) -> SparseGrid:
    """Unit-sigma grid, read from ``cache_dir`` when present and written there otherwise."""
    if cache_dir is None:
        return smolyak_build(dim, level)
    path = os.path.join(cache_dir, f"smolyak_d{dim}_k{level}.npz")
    if os.path.exists(path):
        grid = load_grid(path)
        if grid.dim == dim and grid.level == level and grid.sigma == 1.0:
            return grid
    grid = smolyak_build(dim, level)
    os.makedirs(cache_dir, exist_ok=True)
    save_grid(path, grid)
    return grid
