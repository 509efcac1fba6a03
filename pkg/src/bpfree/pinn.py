"""Residual-based training for the Hamilton-Jacobi-Bellman test problem.

The PDE on ``[0, 1]^D x [0, 1]`` is

    u_t + laplacian_x u - coef * |grad_x u|^2 = rhs,    u(x, 1) = |x|_1

with ``rhs = -(1 + coef * D)`` so that ``u = |x|_1 + 1 - t`` solves it. The
network output ``f(x, t)`` is wrapped as

    u = (1 - t) f + |x|_1 + 1 - t        (gated, default)
    u = f + |x|_1 + 1 - t                (additive)

The gated form meets the terminal condition for every parameter value. The
additive form meets it only where ``f(x, 1) = 0``, and a constant shift of
``f`` leaves the residual unchanged.

Derivatives of ``u`` come from one of four backends:

* ``AD``: exact forward-mode derivatives of the network (reference only).
* ``FD``: central differences with step ``h``.
* ``SE``: Stein estimates under Gaussian smoothing, Monte Carlo offsets.
* ``SG``: Stein estimates with a symmetric sparse grid.

Every backend differentiates the network term only; the closed-form
part ``|x|_1 + 1 - t`` contributes ``sign(x)``, ``-1`` and 0. The smoothed
backends smooth ``f`` over the joint ``(x, t)`` input.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import zo
from .grad_oracle import exact_pinn_derivatives
from .model import Network, mlp
from .quadrature import cached_grid, smolyak_build
from .seeds import seed_streams
from .stein import SmoothedModel, stein_estimates, stein_offsets

__all__ = [
    "HJBProblem",
    "AD",
    "FD",
    "SE",
    "SG",
    "parse_mode",
    "TransformedNet",
    "fd_derivatives",
    "derivatives",
    "residual",
    "pinn_loss",
    "PinnLoss",
    "PinnConfig",
    "hjb_mlp",
    "train_pinn",
    "run_hjb",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HJBProblem:
    dim: int
    coef: float = 0.05
    rhs: float | None = None
    horizon: float = 1.0
    boundary_weight: float = 0.0
    initial_weight: float = 0.0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be >= 1")
        if self.rhs is None:
            object.__setattr__(self, "rhs", -(1.0 + self.coef * self.dim))

    def exact(self, x, t):
        x = np.atleast_2d(x)
        return np.abs(x).sum(axis=1) + 1.0 - np.asarray(t, dtype=float)

    def terminal(self, x):
        return np.abs(np.atleast_2d(x)).sum(axis=1)

    def residual_from(self, u_t, grad, lap):
        """Pointwise residual from derivative estimates; ``grad`` has the space axis last."""
        return u_t + lap - self.coef * np.sum(grad**2, axis=-1) - self.rhs

    def sample(self, rng, n):
        """``n`` uniform collocation points ``(x, t)`` in the open domain."""
        return rng.uniform(0.0, 1.0, (n, self.dim)), rng.uniform(0.0, self.horizon, n)


@dataclass(frozen=True)
class AD:
    name = "ad"


@dataclass(frozen=True)
class FD:
    h: float = 0.01
    name = "fd"

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("finite-difference step must be positive")


@dataclass(frozen=True)
class SE:
    n_samples: int = 1024
    sigma: float = 0.1
    name = "se"

    def __post_init__(self):
        if self.n_samples < 1 or not self.sigma > 0:
            raise ValueError("SE mode needs n_samples >= 1 and sigma > 0")


@dataclass(frozen=True)
class SG:
    level: int = 3
    sigma: float = 0.1
    name = "sg"

    def __post_init__(self):
        if self.level < 1 or not self.sigma > 0:
            raise ValueError("SG mode needs level >= 1 and sigma > 0")


def parse_mode(name, h=0.01, n_samples=1024, sigma=0.1, level=3):
    modes = {"ad": lambda: AD(), "fd": lambda: FD(h), "se": lambda: SE(n_samples, sigma), "sg": lambda: SG(level, sigma)}
    if name not in modes:
        raise ValueError(f"unknown derivative mode {name!r}")
    return modes[name]()


TRANSFORMS = ("gated", "additive")


class TransformedNet:
    """Solution ansatz around a network with ``D + 1`` inputs ``(x, t)``."""

    def __init__(self, base: Network, transform="gated", horizon=1.0):
        if base.out_dim != 1:
            raise ValueError("base network must have a scalar output")
        if transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {transform!r}")
        self.base = base
        self.dim = base.in_dim - 1
        self.transform = transform
        self.horizon = horizon

    def network_fn(self, params):
        """Network term on rows ``(n, D + 1)`` -> ``(n,)``, or ``(n, P)`` for a parameter stack."""
        params = np.asarray(params, dtype=float)
        gated = self.transform == "gated"

        def f(z):
            out = self.base.forward(params, z)[..., 0]
            if gated:
                out = out * (self.horizon - z[:, -1])
            return out.T if params.ndim == 2 else out

        return f

    def value(self, params, x, t):
        x = np.atleast_2d(x)
        z = np.column_stack([x, np.broadcast_to(t, (len(x),))])
        return self.network_fn(params)(z) + self._closed_form(x, t, np.ndim(params) == 2)

    def _closed_form(self, x, t, stacked):
        g = np.abs(x).sum(axis=1) + 1.0 - np.broadcast_to(t, (len(x),))
        return g[:, None] if stacked else g


def fd_derivatives(fn, x, t, h=0.01):
    """Central-difference ``(u_t, grad_x u, laplacian_x u)`` of ``fn`` on joint rows.

    ``fn`` maps ``(n, D + 1)`` rows to ``(n,)`` (or ``(n, P)``). Uses
    ``2 (D + 1) + 1`` evaluations per point.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    B, D = x.shape
    z = np.column_stack([x, np.broadcast_to(np.asarray(t, dtype=float), (B,))])
    steps = h * np.eye(D + 1)
    rows = np.concatenate([z, (z[:, None, :] + steps).reshape(-1, D + 1), (z[:, None, :] - steps).reshape(-1, D + 1)])
    out = np.asarray(fn(rows), dtype=float)
    tail = out.shape[1:]
    f0 = out[:B]
    fp = out[B : B + B * (D + 1)].reshape((B, D + 1) + tail)
    fm = out[B + B * (D + 1) :].reshape((B, D + 1) + tail)
    first = (fp - fm) / (2.0 * h)
    second = (fp + fm - 2.0 * f0[:, None]) / h**2
    # move a trailing parameter axis to the front
    if tail:
        first, second = np.moveaxis(first, -1, 0), np.moveaxis(second, -1, 0)
    return first[..., D], first[..., :D], second[..., :D].sum(axis=-1)


def _exact(tnet, params, x, t):
    if tnet.transform == "gated":
        return exact_pinn_derivatives(tnet.base, params, x, t, gate=tnet.horizon)
    return exact_pinn_derivatives(tnet.base, params, x, t)


def _stein_derivatives(tnet, params, x, t, deltas, weights, sigma):
    D = tnet.dim
    z = np.column_stack([x, np.broadcast_to(t, (len(x),))])
    res = stein_estimates(tnet.network_fn(params), z, deltas, weights, sigma, laplacian_dims=np.arange(D))
    grad, lap = res.grad, res.laplacian
    if np.ndim(params) == 2:
        # (B, D+1, P) -> (P, B, D+1)
        grad, lap = np.moveaxis(grad, -1, 0), np.moveaxis(lap, -1, 0)
    return grad[..., D], grad[..., :D], lap


def _stein_offsets(mode, dim, n_points, rng=None, grid=None):
    if isinstance(mode, SG):
        grid = grid if grid is not None else smolyak_build(dim, mode.level)
        model = SmoothedModel(None, dim, mode.sigma, grid=grid)
        return stein_offsets(model)
    rng = rng or np.random.default_rng(0)
    deltas = mode.sigma * rng.standard_normal((n_points, mode.n_samples, dim))
    return deltas, np.full(mode.n_samples, 1.0 / mode.n_samples)


def derivatives(tnet: TransformedNet, params, x, t, mode, offsets=None, rng=None):
    """``(u_t, grad_x u, laplacian_x u)`` of the transformed network.

    ``params`` may be a single vector or a ``(P, d)`` stack; the outputs then
    gain a leading ``P`` axis (AD mode excepted: stacks are looped).
    ``offsets`` fixes the Stein perturbations ``(deltas, weights)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (len(x),))
    params = np.asarray(params, dtype=float)
    if isinstance(mode, AD):
        if params.ndim == 2:
            parts = [_exact(tnet, p, x, t) for p in params]
            return tuple(np.stack(p) for p in zip(*parts))
        return _exact(tnet, params, x, t)
    if isinstance(mode, FD):
        u_t, grad, lap = fd_derivatives(tnet.network_fn(params), x, t, mode.h)
    elif isinstance(mode, (SE, SG)):
        deltas, weights = offsets if offsets is not None else _stein_offsets(mode, tnet.dim + 1, len(x), rng)
        u_t, grad, lap = _stein_derivatives(tnet, params, x, t, deltas, weights, mode.sigma)
    else:
        raise TypeError(f"unknown derivative mode {mode!r}")
    return u_t - 1.0, grad + np.sign(x), lap


def residual(problem: HJBProblem, tnet: TransformedNet, params, x, t, mode=AD(), offsets=None, rng=None):
    return problem.residual_from(*derivatives(tnet, params, x, t, mode, offsets, rng))


def pinn_loss(problem, tnet, params, x, t, mode=AD(), offsets=None, rng=None):
    """Mean squared residual over the collocation batch.

    Terminal and boundary terms are included with the problem's weights,
    which default to zero because the transform enforces ``u(x, 1)``.
    """
    if len(np.atleast_2d(x)) == 0:
        raise ValueError("empty collocation batch")
    r = residual(problem, tnet, params, x, t, mode, offsets, rng)
    if not np.all(np.isfinite(r)):
        raise zo.DivergedLossError("non-finite PDE residual")
    loss = np.mean(r**2, axis=-1)
    x = np.atleast_2d(x)
    if problem.initial_weight:
        loss = loss + problem.initial_weight * _mismatch(problem, tnet, params, x, problem.horizon)
    if problem.boundary_weight:
        # project each point onto the face x_0 = 0
        xb = x.copy()
        xb[:, 0] = 0.0
        loss = loss + problem.boundary_weight * _mismatch(problem, tnet, params, xb, t)
    return loss


def _mismatch(problem, tnet, params, x, t):
    """Mean squared gap between ``u`` and the exact solution at ``(x, t)``."""
    err = tnet.value(params, x, t)
    target = problem.exact(x, np.broadcast_to(t, (len(x),)))
    err = err - (target[:, None] if err.ndim == 2 else target)
    return np.mean(err**2, axis=0)


class PinnLoss:
    """Loss oracle on one frozen collocation batch (and frozen Stein offsets)."""

    def __init__(self, problem, tnet, x, t, mode, offsets=None, chunk_points=None):
        self.problem = problem
        self.tnet = tnet
        self.x = x
        self.t = t
        self.mode = mode
        self.offsets = offsets
        self.chunk_points = chunk_points or len(x)

    def _residuals(self, params):
        parts = []
        for s in range(0, len(self.x), self.chunk_points):
            sl = slice(s, s + self.chunk_points)
            offsets = self.offsets
            if offsets is not None and offsets[0].ndim == 3:
                offsets = (offsets[0][sl], offsets[1])
            parts.append(residual(self.problem, self.tnet, params, self.x[sl], self.t[sl], self.mode, offsets))
        r = np.concatenate(parts, axis=-1)
        if not np.all(np.isfinite(r)):
            raise zo.DivergedLossError("non-finite PDE residual")
        return r

    def __call__(self, theta):
        return float(np.mean(self._residuals(theta) ** 2))

    def many(self, thetas):
        return np.mean(self._residuals(thetas) ** 2, axis=-1)


def _three_factors(n):
    """Most balanced ``a * b * c = n`` with ``a <= b <= c``."""
    best = (1, 1, n)
    for a in range(1, round(n ** (1 / 3)) + 2):
        if n % a:
            continue
        for b in range(a, math.isqrt(n // a) + 1):
            if (n // a) % b == 0:
                c = n // a // b
                if c - a < best[2] - best[0]:
                    best = (a, b, c)
    return best


def hjb_mlp(dim, kind="tt", rng=None, width=768, rank=4, output_scale=1.0, hidden_factors=None):
    """Sine-activated MLP with ``dim + 1`` inputs and two hidden layers.

    ``kind="dense"`` gives a ``(D + 1) -> width -> width -> 1`` network.
    ``kind="tt"`` uses three-core TT layers: for width 768 the input layer
    folds ``(1, D + 1, 1) -> (6, 4, 32)``, the hidden layer
    ``(6, 4, 32) -> (6, 4, 32)`` and the output layer ``(6, 4, 32) -> (1, 1, 1)``,
    all with internal rank ``rank``. Other widths fold into their most
    balanced three factors unless ``hidden_factors`` is given.
    """
    rng = rng or np.random.default_rng(0)
    sizes = [dim + 1, width, width, 1]
    if kind == "dense":
        return mlp(sizes, "sine", rng, output_scale=output_scale)
    if kind != "tt":
        raise ValueError(f"unknown model kind {kind!r}")
    if hidden_factors is None:
        hidden_factors = (6, 4, 32) if width == 768 else _three_factors(width)
    hidden = tuple(hidden_factors)
    if math.prod(hidden) != width or len(hidden) != 3:
        raise ValueError(f"hidden factors {hidden} do not give width {width}")
    ranks = (1, rank, rank, 1)
    tt = {
        0: ((1, dim + 1, 1), hidden, ranks),
        1: (hidden, hidden, ranks),
        2: (hidden, (1, 1, 1), ranks),
    }
    return mlp(sizes, "sine", rng, tt=tt, output_scale=output_scale)


@dataclass
class PinnConfig:
    dim: int = 4
    model: str = "tt"
    width: int = 768
    rank: int = 4
    transform: str = "gated"
    hidden_factors: tuple | None = None
    output_scale: float = 1.0
    mode: object = field(default_factory=SG)
    epochs: int = 20
    steps_per_epoch: int = 50
    batch_size: int = 100
    n_val: int = 10_000
    n_samples: int = 10
    mu: float = 0.1
    lr: zo.LRSchedule = field(default_factory=zo.LRSchedule)
    distribution: str = "gaussian"
    seed: int = 0
    chunk_points: int | None = None
    workers: int = 1
    grid_cache: str | None = None


def predict(tnet, params, x, t, mode, grid=None, chunk_points=2000, seed=0):
    """``u`` as seen by the chosen backend: smoothed in SE/SG modes, plain otherwise."""
    if isinstance(mode, (AD, FD)):
        return tnet.value(params, x, t)
    z = np.column_stack([x, np.broadcast_to(t, (len(x),))])
    dim = tnet.dim + 1
    f = tnet.network_fn(params)
    out = []
    if isinstance(mode, SG):
        grid = (grid if grid is not None else smolyak_build(dim, mode.level)).scaled(mode.sigma)
        for s in range(0, len(z), chunk_points):
            zc = z[s : s + chunk_points]
            vals = f((zc[:, None, :] + grid.nodes).reshape(-1, dim)).reshape(len(zc), len(grid))
            out.append(vals @ grid.weights)
    else:
        rng = np.random.default_rng(seed)
        for s in range(0, len(z), chunk_points):
            zc = z[s : s + chunk_points]
            d = mode.sigma * rng.standard_normal((len(zc), mode.n_samples, dim))
            out.append(f((zc[:, None, :] + d).reshape(-1, dim)).reshape(len(zc), -1).mean(axis=1))
    return np.concatenate(out) + tnet._closed_form(np.atleast_2d(x), t, False)


def train_pinn(problem: HJBProblem, tnet: TransformedNet, theta0, config: PinnConfig, streams=None, log_epoch=None):
    """ZO-signRGE on the residual loss with a fresh collocation batch per step.

    The recorded ``val_metric`` is the mean squared error of ``u`` against the
    exact solution on ``config.n_val`` fixed uniform points.
    """
    streams = streams or seed_streams(config.seed)
    colloc = streams["collocation"]
    mode = config.mode
    grid = cached_grid(tnet.dim + 1, mode.level, config.grid_cache) if isinstance(mode, SG) else None
    val_x, val_t = problem.sample(np.random.default_rng([config.seed, 1]), config.n_val)
    val_u = problem.exact(val_x, val_t)

    def evaluate(theta):
        return float(np.mean((predict(tnet, theta, val_x, val_t, mode, grid, seed=config.seed) - val_u) ** 2))

    sg_offsets = _stein_offsets(mode, tnet.dim + 1, 0, grid=grid) if grid is not None else None
    drawn = 0  # collocation points sampled so far; indexes the MC offset seeds

    def batches(epoch, rng):
        nonlocal drawn
        for _ in range(config.steps_per_epoch):
            x, t = problem.sample(colloc, config.batch_size)
            offsets = sg_offsets
            if isinstance(mode, SE):
                model = SmoothedModel(None, tnet.dim + 1, mode.sigma, n_samples=mode.n_samples, seed=config.seed)
                offsets = stein_offsets(model, len(x), first_index=drawn)
            drawn += len(x)
            yield PinnLoss(problem, tnet, x, t, mode, offsets, config.chunk_points)

    optimizer = zo.SignRGE(config.n_samples, config.mu, config.lr, config.distribution, workers=config.workers)
    return zo.train(batches, theta0, optimizer, config.epochs, streams["perturb"], evaluate=evaluate, log=log_epoch)


def run_hjb(config: PinnConfig, log_epoch=None):
    """Build the configured network and train it; returns ``(trace, problem, tnet)``."""
    problem = HJBProblem(config.dim)
    streams = seed_streams(config.seed)
    base = hjb_mlp(config.dim, config.model, streams["init"], config.width, config.rank, config.output_scale, config.hidden_factors)
    tnet = TransformedNet(base, config.transform)
    log.info("HJB D=%d, %s model with %d parameters, mode %s", config.dim, config.model, base.num_params, config.mode.name)
    trace = train_pinn(problem, tnet, base.pack(), config, streams, log_epoch)
    base.unpack(trace.theta)
    trace.optimizer_state = {"stage": "sign-rge"}
    return trace, problem, tnet
