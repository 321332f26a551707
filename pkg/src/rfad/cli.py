"""Command-line interface: synth / train / eval / stats / verify."""

from __future__ import annotations

import argparse
import logging
import struct
import sys

import numpy as np

from . import pipeline
from .constraintor import soap_bubble_check
from .errors import IoError, RfadError
from .featurestore import (LayerSpec, SynthSpec, build_reference_pool,
                           read_dataset, synth_dataset, write_dataset)
from .pipeline import (Model, RunConfig, config_from_text, evaluate,
                       load_checkpoint, save_checkpoint,
                       select_reference_indices, train, write_manifest)
from .residual import decorrelation_report

SCOREMAP_MAGIC = b"RSSM"
SCOREMAP_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_layers(text: str) -> list[LayerSpec]:
    specs = []
    for part in text.split(","):
        dims = part.lower().split("x")
        if len(dims) != 3:
            raise UsageError(f"bad layer spec '{part}', expected HxWxC")
        specs.append(LayerSpec(int(dims[0]), int(dims[1]), int(dims[2])))
    return specs


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            return config_from_text(fh.read())
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc


def _write_report(path: str | None, lines: list[str]) -> None:
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if path:
        with open(path, "w") as fh:
            fh.write(text)


def write_score_maps(path, maps, h0: int, w0: int) -> None:
    parts = [SCOREMAP_MAGIC, struct.pack("<I", SCOREMAP_VERSION),
             struct.pack("<III", h0, w0, len(maps))]
    for m in maps:
        parts.append(np.ascontiguousarray(m.grid, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def _cmd_synth(args) -> int:
    spec = SynthSpec(
        n_classes=args.n_classes,
        images_per_class=args.images_per_class,
        anomaly_fraction=args.anomaly_fraction,
        layer_specs=_parse_layers(args.layers),
        class_separation=args.class_separation,
        anomaly_magnitude=args.anomaly_magnitude,
        seed=args.seed,
    )
    dataset = synth_dataset(spec)
    write_dataset(dataset, args.out)
    print(f"wrote {len(dataset.images)} images "
          f"({dataset.h0}x{dataset.w0}, {dataset.n_layers} layers) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args.config)
    dataset = read_dataset(args.data)
    model, _, manifest, history = train(dataset, config)
    save_checkpoint(args.out, model)
    write_manifest(str(args.out) + ".manifest.json", manifest)
    if history:
        last = history[-1]
        print(f"trained {config.epochs} epochs; final losses "
              f"occ={last['occ']:.5f} nf={last['nf']:.5f} vq={last['vq']:.5f}")
    print(f"checkpoint written to {args.out}")
    return 0


def _resolve_refs(args, dataset, config) -> list[int]:
    if args.refs:
        return [int(p) for p in args.refs.split(",")]
    n = args.n_refs if args.n_refs else config.n_fs
    seed = args.seed if args.seed is not None else config.seed
    rng = np.random.default_rng([seed, 4])
    return select_reference_indices(dataset, n, rng)


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    dataset = read_dataset(args.data)
    refs = _resolve_refs(args, dataset, model.config)
    report, maps, scored = evaluate(model, dataset, refs)
    lines = [
        f"image_auroc = {report.image_auroc:.6f}",
        f"pixel_auroc = {report.pixel_auroc:.6f}",
        f"pro_03 = {report.pro_03:.6f}",
    ]
    _write_report(args.report, lines)
    manifest = {
        "reference_indices": refs,
        "scored_images": scored,
        "config_sha256": pipeline.config_hash(model.config),
    }
    if args.report:
        write_manifest(str(args.report) + ".manifest.json", manifest)
    if args.maps:
        write_score_maps(args.maps, maps, dataset.h0, dataset.w0)
    return 0


def _cmd_stats(args) -> int:
    dataset = read_dataset(args.data)
    config = RunConfig() if args.ckpt is None else None
    model = load_checkpoint(args.ckpt) if args.ckpt else None
    if model is not None:
        config = model.config
    n_refs = args.n_refs if args.n_refs else config.n_fs
    classes = sorted({img.class_id for img in dataset.images})
    rng = np.random.default_rng([config.seed, 5])
    pools = {k: build_reference_pool(
        dataset, select_reference_indices(dataset, n_refs, rng, k))
        for k in classes}

    initial = decorrelation_report(dataset, pools, use_residual=False)
    residual = decorrelation_report(dataset, pools, use_residual=True)
    lines = [
        f"initial_kurtosis = {initial.kurtosis:.6f}",
        f"initial_scale_std = {initial.scale_std:.6f}",
        f"residual_kurtosis = {residual.kurtosis:.6f}",
        f"residual_scale_std = {residual.scale_std:.6f}",
        f"abs_normal = {residual.abs_normal:.6f}",
        f"abs_abnormal = {residual.abs_abnormal:.6f}",
    ]
    if model is not None and model.constraintors is not None:
        constrained = decorrelation_report(
            dataset, pools, use_residual=True,
            transform=lambda l, rows: model.constrain_rows(
                l, rows.astype(np.float32)))
        lines.append(f"constrained_scale_std = {constrained.scale_std:.6f}")
    _write_report(args.report, lines)
    return 0


def _cmd_verify(args) -> int:
    from . import selfcheck
    results = selfcheck.run_all()
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        failed += 0 if ok else 1
    return 0 if failed == 0 else 1


def build_parser() -> _Parser:
    parser = _Parser(prog="rfad",
                     description="residual-feature anomaly detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic feature dataset")
    p.add_argument("--n-classes", type=int, default=2)
    p.add_argument("--images-per-class", type=int, default=100)
    p.add_argument("--anomaly-fraction", type=float, default=0.2)
    p.add_argument("--layers", default="8x8x16,4x4x32",
                   help="comma-separated HxWxC layer specs")
    p.add_argument("--class-separation", type=float, default=5.0)
    p.add_argument("--anomaly-magnitude", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train on a feature dataset")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--refs", help="comma-separated reference image indices")
    p.add_argument("--n-refs", type=int)
    p.add_argument("--seed", type=int, help="seed for the reference draw")
    p.add_argument("--report", help="write name = value report here")
    p.add_argument("--maps", help="write per-image score maps (RSSM) here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("stats", help="decorrelation statistics of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="optional checkpoint for constrained stats")
    p.add_argument("--n-refs", type=int)
    p.add_argument("--report")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("verify", help="run the built-in invariant checks")
    p.set_defaults(func=_cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except IoError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except (RfadError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
