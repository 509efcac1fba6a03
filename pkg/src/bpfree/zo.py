"""Zeroth-order gradient estimators and optimizers.

A loss oracle is any callable mapping a parameter vector to a scalar. If it
also has a ``many`` method taking a ``(P, d)`` stack and returning ``(P,)``
losses, the estimators use it to evaluate perturbations in chunks. An
optional ``coordinates(theta, mu, indices)`` method returning the losses at
``theta + mu * e_i`` lets the coordinate-wise estimator skip building the
perturbed vectors.

All queries inside one estimate go to the same oracle, so mini-batch losses
are differenced against a common function.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DivergedLossError",
    "ZoEstimate",
    "evaluate_losses",
    "rge_estimate",
    "cge_estimate",
    "sgd_step",
    "sign_step",
    "momentum_step",
    "LRSchedule",
    "SignRGE",
    "RGE",
    "CGE",
    "FirstOrder",
    "HybridSchedule",
    "Hybrid",
    "EpochRecord",
    "Trace",
    "train",
    "hybrid_train",
]

TRACE_COLUMNS = ("epoch", "stage", "train_loss", "val_metric", "cumulative_queries", "wall_time")


class DivergedLossError(FloatingPointError):
    """A loss query returned a non-finite value. ``trace`` holds the partial run."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class ZoEstimate:
    grad: np.ndarray
    queries: int
    loss: float = math.nan  # loss at the unperturbed point


def evaluate_losses(oracle, thetas, chunk_size=256, workers=1) -> np.ndarray:
    """Loss at every row of ``thetas``, in row order."""
    thetas = np.asarray(thetas, dtype=float)
    many = getattr(oracle, "many", None)
    if many is None:
        chunks = [thetas[i : i + 1] for i in range(len(thetas))]

        def run(chunk):
            return np.array([float(oracle(chunk[0]))])

    else:
        chunks = [thetas[i : i + chunk_size] for i in range(0, len(thetas), chunk_size)]

        def run(chunk):
            return np.asarray(many(chunk), dtype=float).reshape(len(chunk))

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    values = np.concatenate(parts)
    if not np.all(np.isfinite(values)):
        raise DivergedLossError("loss oracle returned a non-finite value")
    return values


def _directions(rng, n, d, distribution):
    if distribution == "gaussian":
        return rng.standard_normal((n, d))
    if distribution == "rademacher":
        return rng.choice(np.array([-1.0, 1.0]), size=(n, d))
    raise ValueError(f"unknown perturbation distribution {distribution!r}")


def rge_estimate(oracle, theta, n_samples, mu, rng, distribution="gaussian", chunk_size=256, workers=1):
    """Randomized gradient estimate from ``n_samples`` forward differences.

    ``grad = sum_i (L(theta + mu xi_i) - L(theta)) xi_i / (N mu)``; the base
    loss is evaluated once, so ``N + 1`` queries are consumed.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not mu > 0:
        raise ValueError("mu must be positive")
    theta = np.asarray(theta, dtype=float)
    xi = _directions(rng, n_samples, theta.size, distribution)
    thetas = np.vstack([theta[None, :], theta + mu * xi])
    values = evaluate_losses(oracle, thetas, chunk_size, workers)
    coeff = (values[1:] - values[0]) / (n_samples * mu)
    return ZoEstimate(coeff @ xi, n_samples + 1, float(values[0]))


def cge_estimate(oracle, theta, mu, chunk_size=256, workers=1):
    """Coordinate-wise forward differences; ``d + 1`` queries."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    theta = np.asarray(theta, dtype=float)
    d = theta.size
    base = evaluate_losses(oracle, theta[None, :])[0]
    coordinates = getattr(oracle, "coordinates", None)
    grad = np.empty(d)
    for start in range(0, d, chunk_size):
        stop = min(start + chunk_size, d)
        if coordinates is not None:
            values = np.asarray(coordinates(theta, mu, np.arange(start, stop)), dtype=float)
            if not np.all(np.isfinite(values)):
                raise DivergedLossError("loss oracle returned a non-finite value")
        else:
            block = np.repeat(theta[None, :], stop - start, axis=0)
            block[np.arange(stop - start), np.arange(start, stop)] += mu
            values = evaluate_losses(oracle, block, chunk_size, workers)
        grad[start:stop] = (values - base) / mu
    return ZoEstimate(grad, d + 1, float(base))


def sgd_step(theta, estimate, lr):
    return theta - lr * estimate.grad


def sign_step(theta, estimate, lr):
    """Move each coordinate by ``lr`` against the sign of its estimate; sign(0) = 0."""
    return theta - lr * np.sign(estimate.grad)


def momentum_step(theta, estimate, buffer, momentum, lr):
    """Heavy-ball step: ``b = m b + g`` (``b = g`` on the first call), ``theta -= lr b``."""
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    new_buffer = estimate.grad.copy() if buffer is None else momentum * buffer + estimate.grad
    return theta - lr * new_buffer, new_buffer


@dataclass
class LRSchedule:
    """Step decay: ``lr * decay ** (epoch // every)`` with zero-based epochs."""

    lr: float = 1e-3
    decay: float = 0.9
    every: int = 10

    def __call__(self, epoch):
        return self.lr * self.decay ** (epoch // self.every)


class SignRGE:
    stage = "sign-rge"

    def __init__(self, n_samples=10, mu=0.1, lr=None, distribution="gaussian", chunk_size=256, workers=1):
        self.n_samples = n_samples
        self.mu = mu
        self.lr = lr or LRSchedule()
        self.distribution = distribution
        self.chunk_size = chunk_size
        self.workers = workers

    def estimate(self, oracle, theta, rng):
        return rge_estimate(
            oracle, theta, self.n_samples, self.mu, rng, self.distribution, self.chunk_size, self.workers
        )

    def update(self, theta, est, epoch):
        return sign_step(theta, est, self.lr(epoch))

    def step(self, oracle, theta, epoch, rng):
        est = self.estimate(oracle, theta, rng)
        return self.update(theta, est, epoch), est

    def end_epoch(self, train_loss):
        pass

    def state(self):
        return {"stage": self.stage}


class RGE(SignRGE):
    """Plain ZO-SGD on the randomized estimate."""

    stage = "rge"

    def update(self, theta, est, epoch):
        return sgd_step(theta, est, self.lr(epoch))


class CGE:
    """Coordinate-wise estimate with heavy-ball momentum."""

    stage = "cge"

    def __init__(self, mu=0.01, momentum=0.9, lr=None, chunk_size=256, workers=1):
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        self.mu = mu
        self.momentum = momentum
        self.lr = lr or LRSchedule()
        self.chunk_size = chunk_size
        self.workers = workers
        self.buffer = None

    def step(self, oracle, theta, epoch, rng):
        est = cge_estimate(oracle, theta, self.mu, self.chunk_size, self.workers)
        theta, self.buffer = momentum_step(theta, est, self.buffer, self.momentum, self.lr(epoch))
        return theta, est

    def end_epoch(self, train_loss):
        pass

    def state(self):
        out = {"stage": self.stage}
        if self.buffer is not None:
            out["momentum_buffer"] = self.buffer
        return out


class FirstOrder:
    """SGD on exact gradients; the oracle must provide ``value_and_grad``."""

    stage = "first-order"

    def __init__(self, lr=None, momentum=0.0):
        self.lr = lr or LRSchedule()
        self.momentum = momentum
        self.buffer = None

    def step(self, oracle, theta, epoch, rng):
        loss, grad = oracle.value_and_grad(theta)
        if not np.isfinite(loss):
            raise DivergedLossError("loss oracle returned a non-finite value")
        est = ZoEstimate(grad, 1, float(loss))
        theta, self.buffer = momentum_step(theta, est, self.buffer, self.momentum, self.lr(epoch))
        return theta, est

    def end_epoch(self, train_loss):
        pass

    def state(self):
        return {"stage": self.stage}


@dataclass
class HybridSchedule:
    """Coarse ZO-signRGE stage, then momentum ZO-CGE once progress stalls.

    The switch fires when the relative improvement of the epoch-mean training
    loss, ``max(0, (prev - cur) / |prev|)``, stays below ``switch_tol`` for
    ``patience`` consecutive epochs. The first epoch is compared with the
    loss at the initial parameters.
    """

    coarse_samples: int = 10
    coarse_mu: float = 0.1
    coarse_lr: LRSchedule = field(default_factory=LRSchedule)
    fine_mu: float = 0.01
    momentum: float = 0.9
    fine_lr: LRSchedule = field(default_factory=LRSchedule)
    switch_tol: float = 1e-3
    patience: int = 3
    distribution: str = "gaussian"

    def __post_init__(self):
        if self.coarse_samples < 1:
            raise ValueError("coarse_samples must be >= 1")
        if not (self.coarse_mu > 0 and self.fine_mu > 0):
            raise ValueError("sampling radii must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


class Hybrid:
    def __init__(self, schedule: HybridSchedule, chunk_size=256, workers=1):
        self.schedule = schedule
        self.coarse = SignRGE(
            schedule.coarse_samples, schedule.coarse_mu, schedule.coarse_lr,
            schedule.distribution, chunk_size, workers,
        )
        self.fine = CGE(schedule.fine_mu, schedule.momentum, schedule.fine_lr, chunk_size, workers)
        self.active = self.coarse
        self.reference = None
        self.stalled = 0

    @property
    def stage(self):
        return self.active.stage

    def step(self, oracle, theta, epoch, rng):
        theta_new, est = self.active.step(oracle, theta, epoch, rng)
        if self.reference is None:
            self.reference = est.loss
        return theta_new, est

    def end_epoch(self, train_loss):
        if self.active is self.fine:
            return
        prev = self.reference
        improvement = max(0.0, (prev - train_loss) / abs(prev)) if prev else 0.0
        self.reference = train_loss
        self.stalled = self.stalled + 1 if improvement < self.schedule.switch_tol else 0
        if self.stalled >= self.schedule.patience:
            self.active = self.fine

    def state(self):
        out = self.active.state()
        out["stalled_epochs"] = self.stalled
        return out


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    train_loss: float
    val_metric: float
    cumulative_queries: int
    wall_time: float


@dataclass
class Trace:
    records: list[EpochRecord] = field(default_factory=list)
    theta: np.ndarray | None = None
    diverged: bool = False
    # (cumulative_queries, val_metric) after every step when requested
    step_metrics: list[tuple[int, float]] = field(default_factory=list)

    @property
    def stages(self):
        return [r.stage for r in self.records]

    @property
    def total_queries(self):
        return self.records[-1].cumulative_queries if self.records else 0

    def to_csv(self, path, wall_time=True):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            for r in self.records:
                writer.writerow([
                    r.epoch, r.stage, repr(float(r.train_loss)), repr(float(r.val_metric)),
                    r.cumulative_queries, f"{r.wall_time:.3f}" if wall_time else "",
                ])


def train(batches, theta0, optimizer, epochs, rng, evaluate=None, eval_every_step=None, log=None):
    """Generic epoch loop shared by all optimizers.

    ``batches(epoch, rng)`` yields one loss oracle per optimizer step.
    ``evaluate(theta)`` returns the validation metric recorded each epoch.
    ``eval_every_step`` (an integer k) additionally records
    ``(cumulative_queries, evaluate(theta))`` every k steps.
    """
    theta = np.array(theta0, dtype=float)
    trace = Trace(theta=theta)
    queries = 0
    start = time.perf_counter()
    step = 0
    try:
        for epoch in range(epochs):
            stage = optimizer.stage
            losses = []
            for oracle in batches(epoch, rng):
                theta, est = optimizer.step(oracle, theta, epoch, rng)
                queries += est.queries
                losses.append(est.loss)
                step += 1
                if eval_every_step and evaluate is not None and step % eval_every_step == 0:
                    trace.step_metrics.append((queries, float(evaluate(theta))))
            if not np.all(np.isfinite(theta)):
                raise DivergedLossError("parameters became non-finite")
            train_loss = float(np.mean(losses)) if losses else math.nan
            val = float(evaluate(theta)) if evaluate is not None else math.nan
            trace.records.append(
                EpochRecord(epoch + 1, stage, train_loss, val, queries, time.perf_counter() - start)
            )
            trace.theta = theta
            if log is not None:
                log(trace.records[-1])
            optimizer.end_epoch(train_loss)
    except DivergedLossError as err:
        trace.diverged = True
        trace.theta = theta
        raise DivergedLossError(str(err), trace) from err
    trace.theta = theta
    return trace


def hybrid_train(batches, theta0, schedule: HybridSchedule, epochs, rng, evaluate=None, **kwargs):
    """Two-stage ZO training: sign-RGE until the switch rule fires, then momentum CGE."""
    chunk_size = kwargs.pop("chunk_size", 256)
    workers = kwargs.pop("workers", 1)
    return train(batches, theta0, Hybrid(schedule, chunk_size, workers), epochs, rng, evaluate, **kwargs)
