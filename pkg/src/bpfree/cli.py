"""Command-line entry point: ``bpfree run|verify|gridgen``.

Run configs are flat ``key = value`` text files. Blank lines and ``#``
comments are ignored. Recognized keys, their types and defaults are listed
in ``SCHEMA``; an unknown key, a bad value or a missing data file is a
config error (exit code 2). A run whose loss becomes non-finite writes its
partial trace and exits with code 3.

Relative data and cache paths in a config are resolved against the config
file's directory; ``output_dir`` is relative to the working directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import zo
from .mnist import MnistConfig, run_mnist
from .model import save_checkpoint
from .pinn import TRANSFORMS, PinnConfig, parse_mode, run_hjb
from .quadrature import cached_grid, save_grid

log = logging.getLogger("bpfree")

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
SUMMARY_VERSION = 1


class ConfigError(ValueError):
    pass


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _factors(text):
    parts = [int(v) for v in text.replace("x", ",").split(",") if v.strip()]
    if not parts or min(parts) < 1:
        raise ValueError(f"bad factor list {text!r}")
    return tuple(parts)


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"{text!r} is not one of {', '.join(options)}")
        return text

    return parse


def _positive(kind):
    def parse(text):
        value = kind(text)
        if not value > 0:
            raise ValueError(f"must be positive, got {text}")
        return value

    return parse


# key -> (parser, default, tasks using it)
SCHEMA = {
    "task": (_choice("mnist", "hjb"), None, ("mnist", "hjb")),
    "seed": (int, 0, ("mnist", "hjb")),
    "epochs": (_positive(int), 20, ("mnist", "hjb")),
    "output_dir": (str, None, ("mnist", "hjb")),
    "record_wall_time": (_bool, True, ("mnist", "hjb")),
    "model": (_choice("tt", "dense"), "tt", ("mnist", "hjb")),
    "rank": (_positive(int), 6, ("mnist", "hjb")),
    "batch_size": (_positive(int), 64, ("mnist", "hjb")),
    "n_val": (_positive(int), None, ("mnist", "hjb")),
    "lr": (_positive(float), 1e-3, ("mnist", "hjb")),
    "lr_decay": (_positive(float), 0.9, ("mnist", "hjb")),
    "lr_every": (_positive(int), 10, ("mnist", "hjb")),
    "coarse_samples": (_positive(int), 10, ("mnist", "hjb")),
    "coarse_mu": (_positive(float), 0.1, ("mnist", "hjb")),
    "distribution": (_choice("gaussian", "rademacher"), "gaussian", ("mnist", "hjb")),
    # mnist
    "train_images": (str, "../data/mnist-subset/train-images-idx3-ubyte.gz", ("mnist",)),
    "train_labels": (str, "../data/mnist-subset/train-labels-idx1-ubyte.gz", ("mnist",)),
    "val_images": (str, "../data/mnist-subset/test-images-idx3-ubyte.gz", ("mnist",)),
    "val_labels": (str, "../data/mnist-subset/test-labels-idx1-ubyte.gz", ("mnist",)),
    "n_train": (_positive(int), None, ("mnist",)),
    "optimizer": (_choice("hybrid", "zo-signrge", "zo-rge", "zo-cge", "fo"), "hybrid", ("mnist",)),
    "fine_mu": (_positive(float), 0.01, ("mnist",)),
    "fine_lr": (_positive(float), 1e-3, ("mnist",)),
    "momentum": (float, 0.9, ("mnist",)),
    "switch_tol": (float, 1e-3, ("mnist",)),
    "patience": (_positive(int), 3, ("mnist",)),
    "max_steps_per_epoch": (_positive(int), None, ("mnist",)),
    "eval_every_step": (_positive(int), None, ("mnist",)),
    "chunk_size": (_positive(int), 256, ("mnist",)),
    # hjb
    "dim": (_positive(int), 4, ("hjb",)),
    "mode": (_choice("ad", "fd", "se", "sg"), "sg", ("hjb",)),
    "h": (_positive(float), 0.01, ("hjb",)),
    "sigma": (_positive(float), 0.1, ("hjb",)),
    "level": (_positive(int), 3, ("hjb",)),
    "se_samples": (_positive(int), 1024, ("hjb",)),
    "width": (_positive(int), 768, ("hjb",)),
    "hidden_factors": (_factors, None, ("hjb",)),
    "transform": (_choice(*TRANSFORMS), "gated", ("hjb",)),
    "output_scale": (_positive(float), 1.0, ("hjb",)),
    "steps_per_epoch": (_positive(int), 50, ("hjb",)),
    "chunk_points": (_positive(int), None, ("hjb",)),
    "grid_cache": (str, None, ("hjb",)),
}


@dataclass
class RunConfig:
    path: Path
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def task(self):
        return self.values["task"]


def parse_config_text(text, path=Path("config")) -> RunConfig:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        raw[key] = (lineno, value)
    if "task" not in raw:
        raise ConfigError(f"{path}: missing required key 'task'")
    values = {}
    for key, (lineno, text_value) in raw.items():
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(text_value)
        except ValueError as err:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {err}") from None
    task = values["task"]
    for key in values:
        if task not in SCHEMA[key][2]:
            raise ConfigError(f"{path}: key {key!r} does not apply to task {task!r}")
    for key, (_, default, tasks) in SCHEMA.items():
        if task in tasks:
            values.setdefault(key, default)
    if task == "hjb" and "batch_size" not in raw:
        values["batch_size"] = 100
    if task == "hjb" and "rank" not in raw:
        values["rank"] = 4
    if task == "hjb" and values["n_val"] is None:
        values["n_val"] = 10_000
    if task == "mnist" and not 0 <= values["momentum"] < 1:
        raise ConfigError(f"{path}: momentum must lie in [0, 1)")
    return RunConfig(Path(path), values)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    config = parse_config_text(text, path)
    base = path.parent
    if config.task == "mnist":
        for key in ("train_images", "train_labels", "val_images", "val_labels"):
            resolved = (base / config[key]).resolve()
            if not resolved.exists():
                raise ConfigError(f"{path}: {key} file {resolved} does not exist")
            config.values[key] = str(resolved)
    if config.values.get("grid_cache"):
        config.values["grid_cache"] = str((base / config["grid_cache"]).resolve())
    return config


def _lr(c, key="lr"):
    return zo.LRSchedule(c[key], c["lr_decay"], c["lr_every"])


def mnist_config(c: RunConfig, threads=1) -> MnistConfig:
    schedule = zo.HybridSchedule(
        coarse_samples=c["coarse_samples"], coarse_mu=c["coarse_mu"], coarse_lr=_lr(c),
        fine_mu=c["fine_mu"], momentum=c["momentum"], fine_lr=_lr(c, "fine_lr"),
        switch_tol=c["switch_tol"], patience=c["patience"], distribution=c["distribution"],
    )
    return MnistConfig(
        train_images=c["train_images"], train_labels=c["train_labels"],
        val_images=c["val_images"], val_labels=c["val_labels"],
        n_train=c["n_train"], n_val=c["n_val"], model=c["model"], rank=c["rank"],
        optimizer=c["optimizer"], epochs=c["epochs"], batch_size=c["batch_size"],
        schedule=schedule, seed=c["seed"], chunk_size=c["chunk_size"], workers=threads,
        eval_every_step=c["eval_every_step"], max_steps_per_epoch=c["max_steps_per_epoch"],
    )


def hjb_config(c: RunConfig, threads=1) -> PinnConfig:
    mode = parse_mode(c["mode"], h=c["h"], n_samples=c["se_samples"], sigma=c["sigma"], level=c["level"])
    return PinnConfig(
        dim=c["dim"], model=c["model"], width=c["width"], rank=c["rank"],
        transform=c["transform"], hidden_factors=c["hidden_factors"], output_scale=c["output_scale"],
        mode=mode, epochs=c["epochs"], steps_per_epoch=c["steps_per_epoch"],
        batch_size=c["batch_size"], n_val=c["n_val"], n_samples=c["coarse_samples"],
        mu=c["coarse_mu"], lr=_lr(c), distribution=c["distribution"], seed=c["seed"],
        chunk_points=c["chunk_points"], workers=threads, grid_cache=c["grid_cache"],
    )


def _log_epoch(record):
    log.info(
        "epoch %d [%s] train_loss=%.6g val=%.6g queries=%d",
        record.epoch, record.stage, record.train_loss, record.val_metric, record.cumulative_queries,
    )


def execute(config: RunConfig, out_dir, threads=1):
    """Run one experiment and write its artifacts; returns the exit code."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metric = "val_accuracy" if config.task == "mnist" else "validation_mse"
    start = time.perf_counter()
    diverged = False
    net = None
    try:
        with threadpool_limits(limits=threads):
            if config.task == "mnist":
                trace, net = run_mnist(mnist_config(config, threads), log_epoch=_log_epoch)
            else:
                trace, _, tnet = run_hjb(hjb_config(config, threads), log_epoch=_log_epoch)
                net = tnet.base
    except zo.DivergedLossError as err:
        log.error("run diverged: %s", err)
        diverged = True
        trace = err.trace or zo.Trace()
    wall = time.perf_counter() - start

    trace.to_csv(out_dir / "trace.csv", wall_time=config["record_wall_time"])
    if net is not None:
        save_checkpoint(
            out_dir / "checkpoint.json", net, getattr(trace, "optimizer_state", None),
            extra={"task": config.task, "seed": config["seed"], "epochs": len(trace.records)},
        )
    final = trace.records[-1].val_metric if trace.records else None
    summary = {
        "version": SUMMARY_VERSION,
        "task": config.task,
        metric: final,
        "total_queries": trace.total_queries,
        "wall_time": wall if config["record_wall_time"] else None,
        "epochs_completed": len(trace.records),
        "diverged": diverged,
    }
    if net is not None:
        summary["num_params"] = net.num_params
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return EXIT_DIVERGED if diverged else 0


def cmd_run(args):
    try:
        config = load_config(args.config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or config["output_dir"] or Path("runs") / Path(args.config).stem
    return execute(config, out, args.threads)


def cmd_verify(args):
    from .verify import run_checks

    results = run_checks()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def cmd_gridgen(args):
    if args.dim < 1 or args.level < 1:
        print("config error: dimension and level must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.out:
        from .quadrature import smolyak_build

        grid = smolyak_build(args.dim, args.level)
        save_grid(args.out, grid)
        target = args.out
    else:
        grid = cached_grid(args.dim, args.level, args.cache_dir)
        target = Path(args.cache_dir) / f"smolyak_d{args.dim}_k{args.level}.npz"
    print(f"{len(grid)} nodes, weight sum {np.sum(grid.weights):.15f} -> {target}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="bpfree", description="Backpropagation-free training experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (default: output_dir key or runs/<config name>)")
    run.add_argument("--threads", type=int, default=1, help="worker threads; 1 is bit-reproducible")
    run.set_defaults(func=cmd_run)

    verify = sub.add_parser("verify", help="run the built-in invariant checks")
    verify.set_defaults(func=cmd_verify)

    grid = sub.add_parser("gridgen", help="precompute a sparse grid for N(0, I)")
    grid.add_argument("dim", type=int)
    grid.add_argument("level", type=int)
    grid.add_argument("--cache-dir", default="grid-cache")
    grid.add_argument("--out", help="write to this .npz path instead of the cache")
    grid.set_defaults(func=cmd_gridgen)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "threads", 1) < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
