"""Tensor-train (TT) compressed linear layers.

A weight matrix ``W`` of shape ``(M, N)`` with ``M = prod(in_factors)`` and
``N = prod(out_factors)`` is stored as ``L`` cores, core ``k`` shaped
``(r[k], m[k], n[k], r[k+1])``. Entry ``W[i, j]`` is the matrix product of the
core slices ``G_k[:, i_k, j_k, :]`` where ``(i_1..i_L)`` is the row-major
mixed-radix expansion of ``i`` over ``in_factors`` (``i_1`` most significant)
and likewise ``j`` over ``out_factors``.

The forward convention is ``y = x @ W + bias``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TTShape",
    "TTLinear",
    "tt_reconstruct",
    "tt_dense",
    "tt_matvec",
    "tt_contract",
    "tt_partials",
    "tt_core_environment",
    "parameter_count",
    "init_cores",
    "layer_to_record",
    "layer_from_record",
]


@dataclass(frozen=True)
class TTShape:
    in_factors: tuple[int, ...]
    out_factors: tuple[int, ...]
    ranks: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "in_factors", tuple(int(v) for v in self.in_factors))
        object.__setattr__(self, "out_factors", tuple(int(v) for v in self.out_factors))
        object.__setattr__(self, "ranks", tuple(int(v) for v in self.ranks))
        if len(self.in_factors) < 1 or len(self.in_factors) != len(self.out_factors):
            raise ValueError("in_factors and out_factors must have equal length >= 1")
        if len(self.ranks) != len(self.in_factors) + 1:
            raise ValueError("ranks must have length L + 1")
        if self.ranks[0] != 1 or self.ranks[-1] != 1:
            raise ValueError("boundary ranks must be 1")
        if min(self.in_factors + self.out_factors + self.ranks) < 1:
            raise ValueError("factors and ranks must be positive")

    @property
    def order(self) -> int:
        return len(self.in_factors)

    @property
    def rows(self) -> int:
        return math.prod(self.in_factors)

    @property
    def cols(self) -> int:
        return math.prod(self.out_factors)

    def core_shape(self, k: int) -> tuple[int, int, int, int]:
        return (self.ranks[k], self.in_factors[k], self.out_factors[k], self.ranks[k + 1])

    @property
    def core_sizes(self) -> list[int]:
        return [math.prod(self.core_shape(k)) for k in range(self.order)]


@dataclass
class TTLinear:
    shape: TTShape
    cores: list[np.ndarray]
    bias: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if len(self.cores) != self.shape.order:
            raise ValueError(f"expected {self.shape.order} cores, got {len(self.cores)}")
        self.cores = [np.asarray(c, dtype=float) for c in self.cores]
        for k, core in enumerate(self.cores):
            if core.shape != self.shape.core_shape(k):
                raise ValueError(
                    f"core {k} has shape {core.shape}, expected {self.shape.core_shape(k)}"
                )
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=float)
            if self.bias.shape != (self.shape.cols,):
                raise ValueError(f"bias must have length {self.shape.cols}")


def parameter_count(layer: TTLinear | TTShape, bias: bool | None = None) -> int:
    """Number of trainable scalars: core entries plus the bias length."""
    if isinstance(layer, TTLinear):
        shape = layer.shape
        has_bias = layer.bias is not None if bias is None else bias
    else:
        shape = layer
        has_bias = bool(bias)
    return sum(shape.core_sizes) + (shape.cols if has_bias else 0)


def tt_reconstruct(layer: TTLinear) -> np.ndarray:
    """Dense ``(M, N)`` matrix represented by the cores."""
    shape = layer.shape
    # acc: (rows_so_far, cols_so_far, r)
    acc = np.ones((1, 1, 1))
    for core in layer.cores:
        r0, m, n, r1 = core.shape
        acc = np.einsum("ija,amnb->imjnb", acc, core)
        acc = acc.reshape(acc.shape[0] * m, acc.shape[2] * n, r1)
    return acc[:, :, 0].reshape(shape.rows, shape.cols)


def tt_dense(cores) -> np.ndarray:
    """Dense weight from cores that may share a leading parameter-batch axis.

    Returns ``(M, N)`` or ``(P, M, N)``.
    """
    first = np.asarray(cores[0])
    if first.ndim == 4:
        return tt_dense([np.asarray(c)[None] for c in cores])[0]
    P = first.shape[0]
    acc = np.ones((P, 1, 1, 1))
    for core in cores:
        m, n, r1 = core.shape[2], core.shape[3], core.shape[4]
        acc = np.einsum("pija,pamnb->pimjnb", acc, core, optimize=True)
        acc = acc.reshape(P, acc.shape[1] * m, acc.shape[3] * n, r1)
    return acc[..., 0]


def tt_contract(shape: TTShape, cores, x: np.ndarray) -> np.ndarray:
    """Compute ``x @ W`` without forming ``W``.

    ``x`` has shape ``(*batch, M)``. Each core may carry leading parameter-batch
    axes ``(P, r, m, n, r')``; in that case ``x`` must be ``(P, B, M)`` or
    ``(B, M)`` and the result is ``(P, B, N)``. Cores are swept left to right.
    """
    first = np.asarray(cores[0])
    nprefix = first.ndim - 4
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != shape.rows:
        raise ValueError(f"input has length {x.shape[-1]}, layer expects {shape.rows}")

    if nprefix == 0:
        batch = x.shape[:-1]
        t = x.reshape(1, -1, shape.rows)
        cores = [np.asarray(c)[None] for c in cores]
    elif nprefix == 1:
        P = first.shape[0]
        if x.ndim == 2:
            x = np.broadcast_to(x, (P,) + x.shape)
        if x.ndim != 3 or x.shape[0] != P:
            raise ValueError("batched cores need x shaped (P, B, M) or (B, M)")
        batch = None
        t = x
    else:
        raise ValueError("cores may carry at most one leading batch axis")

    P, B = t.shape[0], t.shape[1]
    done = 1
    remaining = shape.rows
    # t holds (P, B*done, r, m_k * rest) flattened as (P, B, done, r, m, rest)
    t = t.reshape(P, B, 1, 1, shape.rows)
    for k, core in enumerate(cores):
        r0, m, n, r1 = core.shape[-4:]
        remaining //= m
        t = t.reshape(P, B, done, r0, m, remaining)
        # move the contracted (r0, m) axes last
        t = t.transpose(0, 1, 2, 5, 3, 4).reshape(P, B * done * remaining, r0 * m)
        t = np.matmul(t, core.reshape(P, r0 * m, n * r1))
        # (P, B, done, rest, n, r1) -> (P, B, done, n, r1, rest)
        t = t.reshape(P, B, done, remaining, n, r1).transpose(0, 1, 2, 4, 5, 3)
        done *= n
        t = t.reshape(P, B, done, r1, remaining)
    out = t.reshape(P, B, shape.cols)
    if nprefix == 0:
        return out.reshape(batch + (shape.cols,))
    return out


def tt_matvec(layer: TTLinear, x: np.ndarray) -> np.ndarray:
    """Apply the layer: ``y_j = sum_i W[i, j] x_i + bias_j``.

    ``x`` may be a single vector of length M or a ``(B, M)`` batch.
    """
    y = tt_contract(layer.shape, layer.cores, x)
    if layer.bias is not None:
        y = y + layer.bias
    return y


def tt_partials(cores):
    """Left and right partial products around every core.

    ``lefts[k]`` is ``(prod m_<k, prod n_<k, r_k)`` and ``rights[k]`` is
    ``(r_{k+1}, prod m_>k, prod n_>k)``, both in row-major multi-index order.
    """
    lefts = [np.ones((1, 1, 1))]
    for core in cores[:-1]:
        acc = np.einsum("ija,amnb->imjnb", lefts[-1], core)
        lefts.append(acc.reshape(acc.shape[0] * core.shape[1], acc.shape[2] * core.shape[2], -1))
    rights = [np.ones((1, 1, 1))]
    for core in reversed(cores[1:]):
        # (a, m, n, M>, N>) -> (a, m*M>, n*N>)
        acc = np.einsum("amnb,bij->amnij", core, rights[-1]).transpose(0, 1, 3, 2, 4)
        rights.append(acc.reshape(core.shape[0], core.shape[1] * acc.shape[2], core.shape[2] * acc.shape[4]))
    return lefts, rights[::-1]


def tt_core_environment(shape: TTShape, cores, x, k, partials=None):
    """Sensitivity of ``x @ W`` to the entries of core ``k``.

    Returns ``E`` shaped ``(B, N_<k, r_k, m_k, r_{k+1}, N_>k)`` such that
    raising ``G_k[a, i, j, c]`` by ``h`` adds ``h * E[:, :, a, i, c, :]`` to the
    output block whose ``k``-th output digit equals ``j``. The map is exact
    because each core enters ``W`` linearly.
    """
    lefts, rights = partials or tt_partials(cores)
    left, right = lefts[k], rights[k]
    x = np.atleast_2d(x)
    B = x.shape[0]
    m = shape.in_factors[k]
    xb = x.reshape(B, left.shape[0], m, right.shape[1])
    u = np.einsum("bIiK,IJa->bJaiK", xb, left, optimize=True)
    return np.einsum("bJaiK,cKL->bJaicL", u, right, optimize=True)


def init_cores(shape: TTShape, rng: np.random.Generator, variance: float | None = None):
    """I.i.d. Gaussian cores whose reconstructed entries have the given variance.

    Each entry of ``W`` is a sum of ``prod(internal ranks)`` products of ``L``
    core entries, so the per-core standard deviation is
    ``(variance / prod(ranks)) ** (1 / (2L))``. Defaults to the Glorot
    variance ``2 / (M + N)``.
    """
    if variance is None:
        variance = 2.0 / (shape.rows + shape.cols)
    internal = math.prod(shape.ranks[1:-1])
    std = (variance / internal) ** (1.0 / (2 * shape.order))
    return [rng.normal(0.0, std, size=shape.core_shape(k)) for k in range(shape.order)]


def layer_to_record(layer: TTLinear) -> dict:
    """JSON-compatible record; cores are flattened in row-major order."""
    return {
        "kind": "tt",
        "in_factors": list(layer.shape.in_factors),
        "out_factors": list(layer.shape.out_factors),
        "ranks": list(layer.shape.ranks),
        "cores": [c.ravel().tolist() for c in layer.cores],
        "bias": None if layer.bias is None else layer.bias.tolist(),
    }


def layer_from_record(record: dict) -> TTLinear:
    if record.get("kind") != "tt":
        raise ValueError("not a TT layer record")
    shape = TTShape(record["in_factors"], record["out_factors"], record["ranks"])
    cores = [
        np.asarray(flat, dtype=float).reshape(shape.core_shape(k))
        for k, flat in enumerate(record["cores"])
    ]
    bias = record.get("bias")
    return TTLinear(shape, cores, None if bias is None else np.asarray(bias, dtype=float))
