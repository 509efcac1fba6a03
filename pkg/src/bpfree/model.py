"""Forward-only networks over a flat parameter vector.

The optimizers see a model only through its packed parameter vector. The
coordinate order is: layers in order; within a dense layer the ``(in, out)``
weight matrix row-major, then the bias; within a TT layer each core row-major
in core order, then the bias. Activations own no parameters.

``Network.forward`` never mutates stored parameters. It also accepts a
``(P, d)`` stack of parameter vectors and evaluates all of them in one pass,
which is how the zeroth-order estimators batch their perturbed queries.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .tt import (
    TTLinear,
    TTShape,
    init_cores,
    layer_from_record,
    layer_to_record,
    tt_contract,
    tt_core_environment,
    tt_dense,
    tt_partials,
    tt_reconstruct,
)

__all__ = [
    "Dense",
    "TT",
    "Activation",
    "Network",
    "forward",
    "pack",
    "unpack",
    "mlp",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1

_ACTIVATIONS = {
    "relu": lambda z: np.maximum(z, 0.0),
    "sine": np.sin,
    "identity": lambda z: z,
}


class Dense:
    """Affine layer ``y = x @ weight + bias`` with weight shaped ``(in, out)``."""

    def __init__(self, weight, bias=None):
        self.weight = np.array(weight, dtype=float)
        if self.weight.ndim != 2:
            raise ValueError("dense weight must be 2-D")
        self.bias = np.zeros(self.weight.shape[1]) if bias is None else np.array(bias, dtype=float)
        if self.bias.shape != (self.weight.shape[1],):
            raise ValueError("bias length must equal the output width")

    @classmethod
    def init(cls, in_dim, out_dim, rng, variance=None):
        if variance is None:
            variance = 2.0 / (in_dim + out_dim)
        return cls(rng.normal(0.0, math.sqrt(variance), size=(in_dim, out_dim)), np.zeros(out_dim))

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    @property
    def shapes(self):
        return [self.weight.shape, self.bias.shape]

    def arrays(self):
        return [self.weight, self.bias]

    def set_arrays(self, arrays):
        self.weight, self.bias = arrays

    def dense_weight(self):
        return self.weight

    def apply(self, views, x):
        w, b = views
        if w.ndim == 3:
            return np.matmul(x, w) + b[:, None, :]
        return x @ w + b

    def weight_of(self, views):
        return views[0]

    def perturbed_blocks(self, views, a, y, mu, local):
        """Yield ``(rows, cols, values)`` describing outputs with ``local[p]`` raised by ``mu``.

        Only output columns ``cols`` change; ``values`` holds their new
        contents, shaped ``(len(rows), B, len(cols))``. A 1-D ``cols`` is shared
        by all rows, a 2-D one gives each row its own columns.
        """
        w = views[0]
        n_w = w.size
        in_w = local < n_w
        p, q = np.divmod(np.where(in_w, local, 0), w.shape[1])
        cols = np.where(in_w, q, local - n_w)
        shift = np.where(in_w[:, None], mu * a[:, p].T, mu)
        yield np.arange(len(local)), cols[:, None], (y[:, cols].T + shift)[..., None]

    def record(self):
        return {"kind": "dense", "in_dim": self.in_dim, "out_dim": self.out_dim}


class TT:
    """TT-compressed affine layer; the bias is always dense and trainable."""

    def __init__(self, layer: TTLinear):
        if layer.bias is None:
            layer.bias = np.zeros(layer.shape.cols)
        self.layer = layer

    @classmethod
    def init(cls, in_factors, out_factors, ranks, rng, variance=None):
        shape = TTShape(in_factors, out_factors, ranks)
        return cls(TTLinear(shape, init_cores(shape, rng, variance), np.zeros(shape.cols)))

    @property
    def shape(self) -> TTShape:
        return self.layer.shape

    @property
    def in_dim(self):
        return self.layer.shape.rows

    @property
    def out_dim(self):
        return self.layer.shape.cols

    @property
    def shapes(self):
        s = self.layer.shape
        return [s.core_shape(k) for k in range(s.order)] + [(s.cols,)]

    def arrays(self):
        return list(self.layer.cores) + [self.layer.bias]

    def set_arrays(self, arrays):
        self.layer.cores = list(arrays[:-1])
        self.layer.bias = arrays[-1]

    def dense_weight(self):
        return tt_reconstruct(self.layer)

    def apply(self, views, x):
        *cores, b = views
        shape = self.layer.shape
        if math.prod(x.shape[-2:-1]) > max(shape.rows, shape.cols):
            # large batches amortize forming the dense weight
            y = np.matmul(x, tt_dense(cores))
        else:
            y = tt_contract(shape, cores, x)
        if b.ndim == 2:
            return y + b[:, None, :]
        return y + b

    def weight_of(self, views):
        return tt_dense(views[:-1])

    def perturbed_blocks(self, views, a, y, mu, local):
        # a core entry G_k[a, i, j, c] only touches outputs whose k-th digit is j
        *cores, _ = views
        shape = self.layer.shape
        rows = np.arange(len(local))
        bounds = np.cumsum([0] + shape.core_sizes)
        bias = local >= bounds[-1]
        if bias.any():
            cols = local[bias] - bounds[-1]
            yield rows[bias], cols[:, None], (y[:, cols].T + mu)[..., None]
        partials = None
        grid = np.arange(shape.cols)
        for k in range(shape.order):
            sel = (local >= bounds[k]) & (local < bounds[k + 1])
            if not sel.any():
                continue
            if partials is None:
                partials = tt_partials(cores)
            env = tt_core_environment(shape, cores, a, k, partials)
            B, n_left, _, _, _, n_right = env.shape
            digits = grid.reshape(n_left, shape.out_factors[k], n_right)
            ai, ii, ji, ci = np.unravel_index(local[sel] - bounds[k], shape.core_shape(k))
            for j in np.unique(ji):
                hit = ji == j
                cols = digits[:, j, :].ravel()
                change = env[:, :, ai[hit], ii[hit], ci[hit], :].transpose(2, 0, 1, 3)
                yield rows[sel][hit], cols, y[:, cols] + mu * change.reshape(hit.sum(), B, -1)

    def record(self):
        s = self.layer.shape
        return {
            "kind": "tt",
            "in_factors": list(s.in_factors),
            "out_factors": list(s.out_factors),
            "ranks": list(s.ranks),
        }


@dataclass
class Activation:
    kind: str

    def __post_init__(self):
        if self.kind not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}")

    shapes = ()

    def arrays(self):
        return []

    def set_arrays(self, arrays):
        pass

    def apply(self, views, x):
        return _ACTIVATIONS[self.kind](x)

    def record(self):
        return {"kind": "activation", "activation": self.kind}


class Network:
    def __init__(self, layers):
        self.layers = list(layers)
        width = None
        for layer in self.layers:
            if isinstance(layer, Activation):
                continue
            if width is not None and layer.in_dim != width:
                raise ValueError(f"layer expects width {layer.in_dim}, previous layer gives {width}")
            width = layer.out_dim
        affine = [l for l in self.layers if not isinstance(l, Activation)]
        if not affine:
            raise ValueError("network needs at least one affine layer")
        self.in_dim = affine[0].in_dim
        self.out_dim = affine[-1].out_dim
        self._shapes = [list(l.shapes) for l in self.layers]
        self._sizes = [[math.prod(s) for s in shapes] for shapes in self._shapes]

    @property
    def num_params(self) -> int:
        return sum(sum(sizes) for sizes in self._sizes)

    def layer_offsets(self):
        """``(start, stop)`` of each layer's slice in the packed vector."""
        out, pos = [], 0
        for sizes in self._sizes:
            out.append((pos, pos + sum(sizes)))
            pos += sum(sizes)
        return out

    def pack(self) -> np.ndarray:
        parts = [a.ravel() for layer in self.layers for a in layer.arrays()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def unpack(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got shape {theta.shape}")
        for layer, views in zip(self.layers, self.split(theta)):
            layer.set_arrays([v.copy() for v in views])

    def split(self, theta):
        """Per-layer lists of views into ``theta`` (shape ``(d,)`` or ``(P, d)``)."""
        prefix = theta.shape[:-1]
        out, pos = [], 0
        for shapes, sizes in zip(self._shapes, self._sizes):
            views = []
            for shape, size in zip(shapes, sizes):
                views.append(theta[..., pos : pos + size].reshape(prefix + tuple(shape)))
                pos += size
            out.append(views)
        return out

    def forward(self, theta, x) -> np.ndarray:
        """Network output for input ``x`` (``(in,)`` or ``(B, in)``).

        With ``theta`` shaped ``(P, d)`` the result is ``(P, B, out)``.
        """
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.num_params or theta.ndim > 2:
            raise ValueError(f"expected {self.num_params} parameters, got shape {theta.shape}")
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input width {x.shape[-1]} does not match network input {self.in_dim}")
        single = x.ndim == 1
        h = x[None, :] if single else x
        for layer, views in zip(self.layers, self.split(theta)):
            h = layer.apply(views, h)
        if single:
            return h[..., 0, :]
        return h

    def __call__(self, x):
        return self.forward(self.pack(), x)

    def forward_coordinates(self, theta, x, mu, indices) -> np.ndarray:
        """Outputs at ``theta + mu * e_i`` for every ``i`` in ``indices``, ``(P, B, out)``.

        Every parameter enters its own layer linearly (TT cores one at a
        time), so the perturbed layer output is the unperturbed one plus
        ``mu`` times a fixed sensitivity. Only layers downstream of the
        perturbed one are re-run. Agrees with ``forward`` up to round-off.
        """
        theta = np.asarray(theta, dtype=float)
        indices = np.asarray(indices, dtype=int)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        views = self.split(theta)
        inputs, outputs = [], []
        h = x
        for layer, v in zip(self.layers, views):
            inputs.append(h)
            h = layer.apply(v, h)
            outputs.append(h)
        result = np.empty((len(indices), x.shape[0], self.out_dim))
        n_layers = len(self.layers)
        for li, (start, stop) in enumerate(self.layer_offsets()):
            sel = np.nonzero((indices >= start) & (indices < stop))[0]
            if len(sel) == 0:
                continue
            blocks = self.layers[li].perturbed_blocks(views[li], inputs[li], outputs[li], mu, indices[sel] - start)
            # a column-sparse change can skip the next activation + affine layer
            shortcut = (
                li + 2 < n_layers
                and isinstance(self.layers[li + 1], Activation)
                and not isinstance(self.layers[li + 2], Activation)
            )
            if shortcut:
                act = self.layers[li + 1]
                weight = self.layers[li + 2].weight_of(views[li + 2])
                h = np.empty((len(sel),) + outputs[li + 2].shape)
                for rows, cols, values in blocks:
                    delta = act.apply((), values) - _columns(outputs[li + 1], cols)
                    if cols.ndim == 1:
                        h[rows] = outputs[li + 2] + delta @ weight[cols]
                    else:
                        h[rows] = outputs[li + 2] + np.matmul(delta, weight[cols])
                first = li + 3
            else:
                h = np.repeat(outputs[li][None], len(sel), axis=0)
                batch = np.arange(h.shape[1])[None, :, None]
                for rows, cols, values in blocks:
                    c = cols[None, None, :] if cols.ndim == 1 else cols[:, None, :]
                    h[rows[:, None, None], batch, c] = values
                first = li + 1
            for later, v in zip(self.layers[first:], views[first:]):
                h = later.apply(v, h)
            result[sel] = h
        return result

    def record(self):
        return [layer.record() for layer in self.layers]

    @classmethod
    def from_record(cls, record, theta=None):
        net = cls([_layer_from_record(entry) for entry in record])
        if theta is not None:
            net.unpack(theta)
        return net


def _layer_from_record(entry):
    kind = entry["kind"]
    if kind == "dense":
        return Dense(np.zeros((entry["in_dim"], entry["out_dim"])))
    if kind == "tt":
        if "cores" in entry:
            return TT(layer_from_record(entry))
        shape = TTShape(entry["in_factors"], entry["out_factors"], entry["ranks"])
        cores = [np.zeros(shape.core_shape(k)) for k in range(shape.order)]
        return TT(TTLinear(shape, cores, np.zeros(shape.cols)))
    if kind == "activation":
        return Activation(entry["activation"])
    raise ValueError(f"unknown layer kind {kind!r}")


def _columns(y, cols):
    """``y[:, cols]`` arranged as ``(B, s)`` for shared or ``(G, B, s)`` for per-row columns."""
    if cols.ndim == 1:
        return y[:, cols]
    return y[:, cols].transpose(1, 0, 2)


def forward(net: Network, params, x):
    return net.forward(params, x)


def pack(net: Network) -> np.ndarray:
    return net.pack()


def unpack(net: Network, params) -> None:
    net.unpack(params)


def mlp(sizes, activation, rng, tt=None, output_scale=1.0):
    """Fully connected network with ``activation`` between affine layers.

    ``tt`` optionally maps a layer index to ``(in_factors, out_factors, ranks)``
    for layers that should be TT-compressed. ``output_scale`` multiplies the
    initial variance of the last layer.
    """
    tt = tt or {}
    layers = []
    n_affine = len(sizes) - 1
    for k in range(n_affine):
        scale = output_scale if k == n_affine - 1 else 1.0
        variance = scale * 2.0 / (sizes[k] + sizes[k + 1])
        if k in tt:
            in_f, out_f, ranks = tt[k]
            layer = TT.init(in_f, out_f, ranks, rng, variance)
            if layer.in_dim != sizes[k] or layer.out_dim != sizes[k + 1]:
                raise ValueError(f"TT factors for layer {k} do not match sizes {sizes[k]}x{sizes[k + 1]}")
        else:
            layer = Dense.init(sizes[k], sizes[k + 1], rng, variance)
        layers.append(layer)
        if k < n_affine - 1:
            layers.append(Activation(activation))
    return Network(layers)


def save_checkpoint(path, net: Network, optimizer_state=None, extra=None) -> None:
    """Versioned JSON checkpoint: layer list, packed parameters, optimizer state."""
    layers = []
    for layer in net.layers:
        if isinstance(layer, TT):
            layers.append(layer_to_record(layer.layer))
        else:
            layers.append(layer.record())
    state = {}
    for key, value in (optimizer_state or {}).items():
        state[key] = value.tolist() if isinstance(value, np.ndarray) else value
    payload = {
        "version": CHECKPOINT_VERSION,
        "layers": layers,
        "params": net.pack().tolist(),
        "optimizer": state,
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    """Returns ``(network, optimizer_state, extra)``."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    net = Network.from_record(payload["layers"])
    net.unpack(np.asarray(payload["params"]))
    state = {
        k: np.asarray(v) if isinstance(v, list) else v for k, v in payload["optimizer"].items()
    }
    return net, state, payload["extra"]
