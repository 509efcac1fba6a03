"""MNIST ingestion, classification loss and the TT-MLP training experiment."""

from __future__ import annotations

import gzip
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import zo
from .grad_oracle import exact_grad_mlp
from .model import Network, mlp
from .seeds import seed_streams

__all__ = [
    "IdxFormatError",
    "Dataset",
    "load_idx",
    "read_idx",
    "write_idx",
    "ce_loss",
    "accuracy",
    "MNIST_TT_FACTORS",
    "build_mnist_mlp",
    "MnistConfig",
    "MnistOracle",
    "run_mnist",
]

log = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# input 784 = 7*4*4*7, hidden 1024 = 8*4*4*8, output 10 = 1*5*2*1
MNIST_TT_FACTORS = ((7, 4, 4, 7), (8, 4, 4, 8), (1, 5, 2, 1))


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, 784), values in [0, 1]
    labels: np.ndarray  # (n,), integers 0-9
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("image count and label count differ")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 9):
            raise ValueError("labels must lie in 0-9")

    def __len__(self):
        return len(self.labels)

    def subset(self, start, stop):
        return Dataset(self.images[start:stop], self.labels[start:stop], self.split)


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic=None) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzipped) into an array."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", data[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise IdxFormatError(f"{path}: only unsigned-byte IDX files are supported (magic 0x{magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = math.prod(dims)
    if len(data) - header < count:
        raise IdxFormatError(f"{path}: truncated data ({len(data) - header} of {count} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array) -> None:
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x00000800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if Path(path).suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_idx(images_path, labels_path, split="train") -> Dataset:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise IdxFormatError(f"{images_path}: expected (count, 28, 28) images, got {images.shape}")
    if len(images) != len(labels):
        raise IdxFormatError(
            f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels"
        )
    if labels.size and labels.max() > 9:
        raise ValueError(f"{labels_path}: label {labels.max()} outside 0-9")
    return Dataset(images.reshape(len(images), 784) / 255.0, labels.astype(np.int64), split)


def ce_loss(logits, labels) -> float | np.ndarray:
    """Mean softmax cross-entropy; ``logits`` may carry a leading parameter axis."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, np.broadcast_to(labels[:, None], z.shape[:-1] + (1,)), axis=-1)[..., 0]
    out = (logsum - picked).mean(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def accuracy(net: Network, theta, data: Dataset, batch=1000) -> float:
    correct = 0
    for start in range(0, len(data), batch):
        logits = net.forward(theta, data.images[start : start + batch])
        correct += int(np.sum(np.argmax(logits, axis=1) == data.labels[start : start + batch]))
    return correct / len(data)


def build_mnist_mlp(kind="tt", rank=6, rng=None, hidden=1024) -> Network:
    """Two-layer ReLU MLP 784 -> 1024 -> 10, dense or TT-compressed."""
    rng = rng or np.random.default_rng(0)
    sizes = [784, hidden, 10]
    if kind == "dense":
        return mlp(sizes, "relu", rng)
    if kind != "tt":
        raise ValueError(f"unknown model kind {kind!r}")
    f_in, f_hid, f_out = MNIST_TT_FACTORS
    ranks = (1,) + (rank,) * (len(f_in) - 1) + (1,)
    return mlp(sizes, "relu", rng, tt={0: (f_in, f_hid, ranks), 1: (f_hid, f_out, ranks)})


class MnistOracle:
    """Cross-entropy on one fixed mini-batch."""

    def __init__(self, net, images, labels):
        self.net = net
        self.images = images
        self.labels = labels

    def __call__(self, theta):
        return ce_loss(self.net.forward(theta, self.images), self.labels)

    def many(self, thetas):
        return ce_loss(self.net.forward(thetas, self.images), self.labels)

    def coordinates(self, theta, mu, indices):
        return ce_loss(self.net.forward_coordinates(theta, self.images, mu, indices), self.labels)

    def value_and_grad(self, theta):
        res = exact_grad_mlp(self.net, theta, self.images, self.labels, "ce")
        return res.loss, res.grad


@dataclass
class MnistConfig:
    train_images: str = "data/mnist-subset/train-images-idx3-ubyte.gz"
    train_labels: str = "data/mnist-subset/train-labels-idx1-ubyte.gz"
    val_images: str = "data/mnist-subset/test-images-idx3-ubyte.gz"
    val_labels: str = "data/mnist-subset/test-labels-idx1-ubyte.gz"
    n_train: int | None = None
    n_val: int | None = None
    model: str = "tt"
    rank: int = 6
    optimizer: str = "hybrid"  # fo | zo-rge | zo-signrge | zo-cge | hybrid
    epochs: int = 100
    batch_size: int = 64
    schedule: zo.HybridSchedule = field(default_factory=zo.HybridSchedule)
    seed: int = 0
    chunk_size: int = 256
    workers: int = 1
    eval_every_step: int | None = None
    max_steps_per_epoch: int | None = None


def make_optimizer(name, schedule: zo.HybridSchedule, chunk_size=256, workers=1):
    s = schedule
    if name == "hybrid":
        return zo.Hybrid(s, chunk_size, workers)
    if name == "zo-signrge":
        return zo.SignRGE(s.coarse_samples, s.coarse_mu, s.coarse_lr, s.distribution, chunk_size, workers)
    if name == "zo-rge":
        return zo.RGE(s.coarse_samples, s.coarse_mu, s.coarse_lr, s.distribution, chunk_size, workers)
    if name == "zo-cge":
        return zo.CGE(s.fine_mu, s.momentum, s.fine_lr, chunk_size, workers)
    if name == "fo":
        return zo.FirstOrder(s.coarse_lr)
    raise ValueError(f"unknown optimizer {name!r}")


def run_mnist(config: MnistConfig, train_data=None, val_data=None, log_epoch=None):
    """Train the configured model; returns ``(trace, network)``.

    ``trace.records[i].val_metric`` is the validation accuracy after epoch i.
    """
    if train_data is None:
        train_data = load_idx(config.train_images, config.train_labels, "train")
    if val_data is None:
        val_data = load_idx(config.val_images, config.val_labels, "val")
    if config.n_train:
        train_data = train_data.subset(0, config.n_train)
    if config.n_val:
        val_data = val_data.subset(0, config.n_val)

    streams = seed_streams(config.seed)
    net = build_mnist_mlp(config.model, config.rank, streams["init"])
    theta0 = net.pack()
    log.info("model %s with %d parameters", config.model, net.num_params)

    batch_rng = streams["batch"]

    def batches(epoch, rng):
        order = batch_rng.permutation(len(train_data))
        n_steps = math.ceil(len(order) / config.batch_size)
        if config.max_steps_per_epoch:
            n_steps = min(n_steps, config.max_steps_per_epoch)
        for k in range(n_steps):
            idx = order[k * config.batch_size : (k + 1) * config.batch_size]
            yield MnistOracle(net, train_data.images[idx], train_data.labels[idx])

    optimizer = make_optimizer(config.optimizer, config.schedule, config.chunk_size, config.workers)
    trace = zo.train(
        batches, theta0, optimizer, config.epochs, streams["perturb"],
        evaluate=lambda th: accuracy(net, th, val_data),
        eval_every_step=config.eval_every_step,
        log=log_epoch,
    )
    net.unpack(trace.theta)
    trace.optimizer_state = optimizer.state()
    return trace, net
