"""Exact reference gradients for the fixed architectures used in the experiments.

These are hand-derived layerwise chain rules for networks built from
``Dense``, ``TT`` and ``Activation`` layers. They back the first-order
baselines and the tests; the zeroth-order training paths never call them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import TT, Activation, Dense, Network
from .tt import TTLinear, tt_partials, tt_reconstruct

__all__ = [
    "OracleGrad",
    "UnsupportedArchitecture",
    "exact_grad_mlp",
    "tt_core_grads",
    "fd_check",
    "network_derivatives",
    "exact_pinn_derivatives",
]


class UnsupportedArchitecture(TypeError):
    pass


@dataclass
class OracleGrad:
    grad: np.ndarray
    loss: float


def _act(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0), (z > 0).astype(float), np.zeros_like(z)
    if kind == "sine":
        s = np.sin(z)
        return s, np.cos(z), -s
    if kind == "identity":
        return z, np.ones_like(z), np.zeros_like(z)
    raise UnsupportedArchitecture(f"activation {kind!r}")


def _dense_weight(layer, views):
    if isinstance(layer, TT):
        return tt_reconstruct(TTLinear(layer.shape, views[:-1]))
    return views[0]


def _check(net):
    for layer in net.layers:
        if not isinstance(layer, (Dense, TT, Activation)):
            raise UnsupportedArchitecture(f"layer type {type(layer).__name__}")


def tt_core_grads(cores, dW):
    """Gradient w.r.t. every core given ``dL/dW`` for the reconstructed matrix."""
    L = len(cores)
    ms = [c.shape[1] for c in cores]
    ns = [c.shape[2] for c in cores]
    lefts, rights = tt_partials(cores)
    grads = []
    for k in range(L):
        left, right = lefts[k], rights[k]
        Mb, Nb = left.shape[0], left.shape[1]
        Ma, Na = right.shape[1], right.shape[2]
        blk = dW.reshape(Mb, ms[k], Ma, Nb, ns[k], Na)
        grads.append(np.einsum("AiBCjD,ACa,bBD->aijb", blk, left, right, optimize=True))
    return grads


def exact_grad_mlp(net: Network, params, x, y, loss="ce") -> OracleGrad:
    """Loss and gradient over the packed parameters for a mini-batch.

    ``loss="ce"``: mean softmax cross-entropy, ``y`` integer labels.
    ``loss="mse"``: mean over samples of the summed squared error, ``y`` targets.
    """
    _check(net)
    params = np.asarray(params, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    views = net.split(params)
    dense_w = []
    acts = [x]
    pre = []
    h = x
    for layer, v in zip(net.layers, views):
        if isinstance(layer, Activation):
            pre.append(h)
            h = _act(layer.kind, h)[0]
        else:
            W = _dense_weight(layer, v)
            dense_w.append(W)
            pre.append(None)
            h = h @ W + v[-1]
        acts.append(h)

    B = x.shape[0]
    if loss == "ce":
        labels = np.asarray(y, dtype=int)
        z = h - h.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        value = -logp[np.arange(B), labels].mean()
        delta = np.exp(logp)
        delta[np.arange(B), labels] -= 1.0
        delta /= B
    elif loss == "mse":
        target = np.asarray(y, dtype=float).reshape(h.shape)
        r = h - target
        value = float(np.sum(r**2) / B)
        delta = 2.0 * r / B
    else:
        raise ValueError(f"unknown loss {loss!r}")

    grads = [None] * len(net.layers)
    w_idx = len(dense_w)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if isinstance(layer, Activation):
            delta = delta * _act(layer.kind, pre[i])[1]
            grads[i] = []
            continue
        w_idx -= 1
        W = dense_w[w_idx]
        a_in = acts[i]
        dW = a_in.T @ delta
        db = delta.sum(axis=0)
        if isinstance(layer, TT):
            cores = views[i][:-1]
            grads[i] = tt_core_grads(cores, dW) + [db]
        else:
            grads[i] = [dW, db]
        delta = delta @ W.T
    flat = np.concatenate([g.ravel() for gs in grads for g in gs])
    return OracleGrad(flat, float(value))


def fd_check(oracle, theta, h=1e-6):
    """Central-difference gradient of a scalar oracle (``2 d`` queries)."""
    theta = np.asarray(theta, dtype=float)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        grad[i] = (oracle(theta + e) - oracle(theta - e)) / (2.0 * h)
    return grad


def network_derivatives(net: Network, params, z):
    """Value, input gradient and diagonal input Hessian of a scalar-output network.

    Forward-mode propagation: for an affine map the tangents transform
    linearly; through an activation ``s = a(z)`` the diagonal second
    derivatives follow ``s'' = a''(z) (z')^2 + a'(z) z''``.
    Returns arrays shaped ``(B,)``, ``(B, n_in)``, ``(B, n_in)``.
    """
    _check(net)
    if net.out_dim != 1:
        raise UnsupportedArchitecture("network must have a scalar output")
    z = np.atleast_2d(np.asarray(z, dtype=float))
    B, n_in = z.shape
    h = z
    jac = np.broadcast_to(np.eye(n_in), (B, n_in, n_in)).copy()  # (B, input dir, width)
    hess = np.zeros((B, n_in, n_in))
    for layer, v in zip(net.layers, net.split(np.asarray(params, dtype=float))):
        if isinstance(layer, Activation):
            s, ds, d2s = _act(layer.kind, h)
            hess = d2s[:, None, :] * jac**2 + ds[:, None, :] * hess
            jac = ds[:, None, :] * jac
            h = s
        else:
            W = _dense_weight(layer, v)
            h = h @ W + v[-1]
            jac = jac @ W
            hess = hess @ W
    return h[:, 0], jac[:, :, 0], hess[:, :, 0]


def exact_pinn_derivatives(net: Network, params, x, t, gate=None):
    """``(du/dt, grad_x u, laplacian_x u)`` of ``u = f(x, t) + |x|_1 + 1 - t``.

    With ``gate=T`` the network term is ``(T - t) f(x, t)`` instead.
    ``x`` is ``(B, D)`` (or ``(D,)``), ``t`` is ``(B,)`` (or scalar). The
    ``|x|_1`` term contributes ``sign(x)`` to the gradient and nothing to the
    Laplacian away from the kinks.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (x.shape[0],))
    z = np.column_stack([x, t])
    value, jac, hess = network_derivatives(net, params, z)
    D = x.shape[1]
    f_t, grad, lap = jac[:, D], jac[:, :D], hess[:, :D].sum(axis=1)
    if gate is not None:
        g = gate - t
        f_t = g * f_t - value
        grad = g[:, None] * grad
        lap = g * lap
    u_t = f_t - 1.0
    grad = grad + np.sign(x)
    if single:
        return u_t[0], grad[0], lap[0]
    return u_t, grad, lap
