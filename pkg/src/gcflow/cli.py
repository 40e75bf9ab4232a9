"""Command-line front end.

Subcommands: ``train`` (fit a model, write metrics + per-epoch CSV +
checkpoint), ``eval`` (re-score a checkpoint), ``embed`` (export node
representations in the feature binary format), ``cluster`` (k-means over
an exported embedding), ``gen-synth`` (write a synthetic dataset), and
``verify`` (fast numeric self-checks).

Config files are flat ``key=value`` lines matching the training config
fields; ``--set key=value`` overrides individual entries.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import SbmConfig, generate_sbm, load_dataset, read_features, save_dataset, write_features
from .errors import ConfigError, FormatError, GcFlowError
from .evalkit import kmeans, silhouette
from . import evalkit
from .training import TrainConfig, evaluate, representation, train


def _parse_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def read_config_file(path):
    """Flat key=value lines; '#' starts a comment; values parse as JSON."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            values[key.strip()] = _parse_value(value.strip())
    return values


def build_train_config(config_path=None, overrides=None) -> TrainConfig:
    values = {}
    if config_path:
        values.update(read_config_file(config_path))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        values[key.strip()] = _parse_value(value.strip())
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; known keys: {sorted(known)}")
    return TrainConfig(**values)


def write_metrics(path, metrics):
    with open(path, "w") as fh:
        json.dump(metrics, fh, sort_keys=True)
        fh.write("\n")


def write_epoch_csv(path, record):
    with open(path, "w") as fh:
        fh.write("epoch,loss,val_f1\n")
        for epoch, (loss, f1) in enumerate(zip(record.losses, record.val_f1s)):
            fh.write(f"{epoch},{loss!r},{f1!r}\n")


# -- subcommands --------------------------------------------------------


def cmd_train(args):
    dataset = load_dataset(args.data)
    cfg = build_train_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    record = train(cfg, dataset, checkpoint_dir=out)
    write_metrics(out / "metrics.json", record.metrics_dict())
    write_epoch_csv(out / "epochs.csv", record)
    print(f"trained {cfg.model} for {record.epochs_run} epochs: "
          f"test micro-F1 {record.test_micro_f1:.4f}")
    print(f"wrote {out / 'metrics.json'}")
    return 0


def _load_trained(checkpoint_path, data_path):
    from .checkpoint import load_checkpoint

    dataset = load_dataset(data_path)
    return load_checkpoint(checkpoint_path, dataset.graph), dataset


def cmd_eval(args):
    import time

    start = time.perf_counter()
    tm, dataset = _load_trained(args.checkpoint, args.data)
    metrics = evaluate(tm, dataset)
    snapshot = dict(tm.config)
    snapshot["damping_used"] = tm.damping_used
    payload = {
        "config": snapshot,
        "seed": tm.config["seed"],
        "epochs_run": None,  # not retrained here
        **metrics,
        "wall_seconds": time.perf_counter() - start,
    }
    if args.out:
        write_metrics(args.out, payload)
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_embed(args):
    tm, dataset = _load_trained(args.checkpoint, args.data)
    z = representation(tm, dataset)
    write_features(args.out, z)
    print(f"wrote {z.shape[0]}x{z.shape[1]} embedding to {args.out}")
    return 0


def cmd_cluster(args):
    points = read_features(args.embedding)
    if args.k < 2:
        raise ConfigError("clustering needs at least two clusters")
    assign = kmeans(points, args.k, seed=args.seed)
    payload = {
        "k": args.k,
        "seed": args.seed,
        "inertia": assign.inertia,
        "silhouette_kmeans": silhouette(points, assign),
    }
    if args.labels:
        labels = np.loadtxt(args.labels, dtype=np.intp).reshape(-1)
        if labels.size != points.shape[0]:
            raise FormatError(
                f"{args.labels} has {labels.size} labels for {points.shape[0]} points"
            )
        known = labels >= 0
        payload["silhouette_truth"] = silhouette(points[known], labels[known])
        payload["nmi"] = evalkit.nmi(assign.labels[known], labels[known])
        payload["ari"] = evalkit.ari(assign.labels[known], labels[known])
    if args.out:
        write_metrics(args.out, payload)
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_gen_synth(args):
    cfg = SbmConfig(
        blocks=args.blocks,
        block_size=args.block_size,
        p_intra=args.p,
        q_inter=args.q,
        dim=args.dim,
        separation=args.separation,
        noise=args.noise,
        seed=args.seed,
    )
    manifest = save_dataset(generate_sbm(cfg), args.out)
    print(manifest)
    return 0


def cmd_verify(args):
    from .verify import run_self_checks

    return run_self_checks()


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gcflow",
        description="Graph-convolutional normalizing flows for semi-supervised learning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model and write metrics, CSV, and a checkpoint")
    p.add_argument("--data", required=True, help="dataset manifest JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="compute metrics for a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="also write the metrics JSON here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("embed", help="export node representations as a feature binary")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("cluster", help="k-means over an exported embedding")
    p.add_argument("--embedding", required=True, help="feature binary file")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labels", help="optional labels CSV for agreement metrics")
    p.add_argument("--out", help="also write the metrics JSON here")
    p.set_defaults(fn=cmd_cluster)

    p = sub.add_parser("gen-synth", help="write a synthetic block-model dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--block-size", type=int, default=100)
    p.add_argument("--p", type=float, default=0.1)
    p.add_argument("--q", type=float, default=0.01)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_synth)

    p = sub.add_parser("verify", help="run fast numeric self-checks")
    p.set_defaults(fn=cmd_verify)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    try:
        return args.fn(args)
    except GcFlowError as exc:
        print(f"gcflow: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"gcflow: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
