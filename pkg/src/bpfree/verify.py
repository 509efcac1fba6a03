"""Fast self-checks behind ``bpfree verify``.

Each check returns ``(name, passed, detail)``. They use fixed seeds and run
in a few seconds, so they double as an installation smoke test.
"""

from __future__ import annotations

import math
from itertools import product

import numpy as np

from .grad_oracle import exact_grad_mlp, fd_check
from .mnist import build_mnist_mlp
from .model import mlp
from .pinn import AD, FD, HJBProblem, TransformedNet, hjb_mlp, residual
from .quadrature import integrate, smolyak_build
from .stein import SmoothedModel, stein_grad, stein_laplacian
from .tt import TTLinear, TTShape, init_cores, tt_matvec, tt_reconstruct


def check_tt(n=20, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        L = int(rng.integers(2, 5))
        shape = TTShape(
            rng.integers(1, 5, L), rng.integers(1, 5, L), (1, *rng.integers(1, 9, L - 1), 1)
        )
        layer = TTLinear(shape, init_cores(shape, rng), rng.standard_normal(shape.cols))
        x = rng.standard_normal((3, shape.rows))
        ref = x @ tt_reconstruct(layer) + layer.bias
        worst = max(worst, np.linalg.norm(tt_matvec(layer, x) - ref) / np.linalg.norm(ref))
    return "tt matvec vs dense", worst < 1e-10, f"max relative error {worst:.2e}"


def check_param_counts():
    got = (
        build_mnist_mlp("dense").num_params,
        build_mnist_mlp("tt", 6).num_params,
        hjb_mlp(20, "dense").num_params,
        hjb_mlp(20, "tt").num_params,
    )
    want = (814090, 3962, 608257, 7745)
    return "parameter counts", got == want, f"{got}"


def check_grid_sizes():
    sizes = {d: len(smolyak_build(d, 3)) for d in (*range(2, 11), 21)}
    ok = all(n == 2 * d * d + 2 * d + 1 for d, n in sizes.items())
    return "sparse grid node counts", ok, f"D=21 -> {sizes[21]} nodes"


def _gaussian_moment(k):
    return 0 if k % 2 else math.prod(range(k - 1, 0, -2))


def check_quadrature(dim=3):
    grid = smolyak_build(dim, 3)
    worst = 0.0
    for powers in product(range(6), repeat=dim):
        if sum(powers) > 5:
            continue
        got = integrate(grid, lambda z: np.prod(z ** np.array(powers), axis=1))
        want = math.prod(_gaussian_moment(p) for p in powers)
        worst = max(worst, abs(got - want) / max(1.0, abs(want)))
    return "quadrature exactness (degree 5)", worst < 1e-8, f"max error {worst:.2e}"


def check_stein(dim=6, seed=1):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((dim, dim))
    A = A + A.T
    b = rng.standard_normal(dim)
    model = SmoothedModel.sparse(lambda z: 0.5 * np.einsum("ni,ij,nj->n", z, A, z) + z @ b, dim, 0.3)
    x = rng.standard_normal(dim)
    g_err = np.abs(stein_grad(model, x) - (A @ x + b)).max()
    l_err = abs(stein_laplacian(model, x) - np.trace(A))
    ok = g_err < 1e-8 * (1 + np.abs(A @ x + b).max()) and l_err < 1e-8 * (1 + abs(np.trace(A)))
    return "stein exactness on quadratics", ok, f"grad {g_err:.1e}, laplacian {l_err:.1e}"


def check_grad_oracle(seed=2):
    rng = np.random.default_rng(seed)
    net = mlp([6, 8, 3], "sine", rng, tt={0: ((2, 3), (2, 4), (1, 2, 1))})
    theta = net.pack()
    x, y = rng.standard_normal((5, 6)), rng.integers(0, 3, 5)
    exact = exact_grad_mlp(net, theta, x, y).grad
    approx = fd_check(lambda th: exact_grad_mlp(net, th, x, y).loss, theta)
    err = np.linalg.norm(exact - approx) / np.linalg.norm(exact)
    return "backprop oracle vs finite differences", err < 1e-6, f"relative error {err:.1e}"


def check_exact_residual(dim=4, seed=3):
    rng = np.random.default_rng(seed)
    problem = HJBProblem(dim)
    net = hjb_mlp(dim, "tt", rng, width=16)
    tnet = TransformedNet(net)
    x, t = problem.sample(rng, 100)
    zero = np.zeros(net.num_params)
    worst = max(np.abs(residual(problem, tnet, zero, x, t, mode)).max() for mode in (AD(), FD()))
    return "residual at the exact solution", worst < 1e-10, f"max |residual| {worst:.1e}"


CHECKS = (
    check_tt,
    check_param_counts,
    check_grid_sizes,
    check_quadrature,
    check_stein,
    check_grad_oracle,
    check_exact_residual,
)


def run_checks():
    results = []
    for check in CHECKS:
        try:
            results.append(check())
        except Exception as err:  # report and keep going
            results.append((check.__name__, False, f"{type(err).__name__}: {err}"))
    return results
