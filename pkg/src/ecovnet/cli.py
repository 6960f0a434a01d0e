"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ecovnet.config import load_config
from ecovnet.data import (generate_toy_dataset, load_imageset, load_manifest, split_dataset)
from ecovnet.ensemble import PredictionSet, hard_ensemble, single_snapshot, soft_ensemble
from ecovnet.errors import ArgumentError, DataError, NumericalError
from ecovnet.gradcam import compute_cam, render_overlay
from ecovnet.imaging import read_gray, resize_bilinear, write_rgb
from ecovnet.metrics import evaluate_predictions
from ecovnet.model import (ScalingCoefficients, b0_arch, build_model, param_count, preset_arch,
                           scale_arch)
from ecovnet.persist import load_run, save_run
from ecovnet.train import predict_proba, train_with_snapshots

log = logging.getLogger("ecovnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; route through our own code instead
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_train_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--arch", help="micro or b0..b5")
    p.add_argument("--epochs", type=int)
    p.add_argument("--cycles", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--class-weights", choices=["none", "inverse-frequency"])
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--val-fraction", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ecovnet", description="Snapshot-ensembled EfficientNet classifier on NumPy.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("arch", help="print a (scaled) stage table")
    p.add_argument("--preset", choices=["b0", "b1", "b2", "b3", "b4", "b5"])
    p.add_argument("--phi", type=float)
    p.add_argument("--alpha", type=float, default=1.2)
    p.add_argument("--beta", type=float, default=1.1)
    p.add_argument("--gamma", type=float, default=1.15)
    p.add_argument("--count", action="store_true", help="also build the model and count parameters")

    p = sub.add_parser("gen-toy", help="write the synthetic three-class corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=50)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train and save a snapshot run")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="run directory")
    _add_train_overrides(p)

    p = sub.add_parser("eval", help="evaluate a run on a labelled manifest")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ensemble", choices=["none", "hard", "soft"], default="soft")
    p.add_argument("--m", type=int, help="use the last m snapshots (default all)")
    p.add_argument("--snapshot", type=int, default=-1, help="snapshot index for --ensemble none")
    p.add_argument("--out-dir", help="also write roc_<key>.csv files here")

    p = sub.add_parser("predict", help="label images with a run")
    p.add_argument("--run", required=True)
    p.add_argument("images", nargs="+")
    p.add_argument("--ensemble", choices=["none", "hard", "soft"], default="soft")
    p.add_argument("--m", type=int)
    p.add_argument("--snapshot", type=int, default=-1)

    p = sub.add_parser("explain", help="write Grad-CAM overlays")
    p.add_argument("--run", required=True)
    p.add_argument("images", nargs="+")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--class", dest="target", type=int, help="target class (default: soft prediction)")
    p.add_argument("--snapshot", type=int, action="append",
                   help="1-based snapshot to explain (repeatable; default all)")
    p.add_argument("--layer", default="top")
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_arch(args) -> int:
    if args.preset and args.phi is not None:
        raise UsageError("give either --preset or --phi, not both")
    if args.phi is not None:
        spec = scale_arch(b0_arch(), ScalingCoefficients(args.alpha, args.beta, args.gamma, args.phi))
    else:
        spec = preset_arch(args.preset or "b0")
    print(spec.format_table())
    if args.count:
        print(f"# parameters: {param_count(build_model(spec, seed=0)):,}")
    return EXIT_OK


def cmd_gen_toy(args) -> int:
    m = generate_toy_dataset(args.out, args.n_per_class, args.size, args.seed)
    print(f"wrote {len(m)} images and {Path(args.out) / 'manifest.csv'}", file=sys.stderr)
    return EXIT_OK


def _run_config(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = v
    for key in ("arch", "epochs", "cycles", "lr", "batch_size", "seed", "class_weights", "val_fraction"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = str(val)
    if args.augment is not None:
        overrides["augment"] = str(args.augment)
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    spec = cfg.arch_spec()
    tcfg = cfg.train_config()
    manifest = load_manifest(args.manifest, cfg.classes)
    train_m, val_m = split_dataset(manifest, cfg.val_fraction, cfg.seed)
    train = load_imageset(train_m, spec.resolution)
    val = load_imageset(val_m, spec.resolution)
    model = build_model(spec, seed=cfg.seed, dtype=cfg.np_dtype)
    log.info("training %s (%d params) on %d images, validating on %d",
             spec.name, param_count(model), len(train), len(val))
    bundle = train_with_snapshots(model, train, val, tcfg)
    save_run(args.out, bundle, cfg.classes)
    print(f"saved {len(bundle)} snapshots to {args.out}", file=sys.stderr)
    return EXIT_OK


def _predict(bundle, gray: np.ndarray, mode: str, m: int | None, index: int):
    """Returns (labels, scores) for grayscale images at the run resolution."""
    probs = [predict_proba(s.model, gray) for s in bundle.snapshots]
    pset = PredictionSet.from_snapshots(probs, m)
    if mode == "soft":
        return soft_ensemble(pset)
    if mode == "hard":
        return hard_ensemble(pset), pset.used.mean(axis=1)
    if not -len(bundle) <= index < len(bundle):
        raise ArgumentError(f"snapshot index {index} out of range for {len(bundle)} snapshots")
    return single_snapshot(pset, index), pset.probs[:, index, :]


def cmd_eval(args) -> int:
    bundle, classes = load_run(args.run)
    res = bundle.snapshots[0].model.arch.resolution
    data = load_imageset(load_manifest(args.manifest, classes), res)
    pred, scores = _predict(bundle, data.images, args.ensemble, args.m, args.snapshot)
    report = evaluate_predictions(data.labels, pred, scores, classes)
    sys.stdout.write(report.to_csv())
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for key in report.roc.auc:
            (out / f"roc_{key}.csv").write_text(report.roc_csv(key))
    return EXIT_OK


def _load_images(paths, res: int) -> np.ndarray:
    return np.stack([resize_bilinear(read_gray(p).astype(np.float64) / 255.0, res, res)
                     for p in paths]).astype(np.float32)


def cmd_predict(args) -> int:
    bundle, classes = load_run(args.run)
    gray = _load_images(args.images, bundle.snapshots[0].model.arch.resolution)
    pred, scores = _predict(bundle, gray, args.ensemble, args.m, args.snapshot)
    print("path,pred_label," + ",".join(f"p{i}" for i in range(len(classes))) + ",mode")
    for path, k, row in zip(args.images, pred, scores):
        print(f"{path},{classes[k]}," + ",".join(f"{v:.6f}" for v in row) + f",{args.ensemble}")
    return EXIT_OK


def cmd_explain(args) -> int:
    bundle, classes = load_run(args.run)
    res = bundle.snapshots[0].model.arch.resolution
    gray = _load_images(args.images, res)
    which = args.snapshot or list(range(1, len(bundle) + 1))
    for i in which:
        if not 1 <= i <= len(bundle):
            raise ArgumentError(f"snapshot {i} outside 1..{len(bundle)}")
    if args.target is None:
        targets, _ = _predict(bundle, gray, "soft", None, -1)
    else:
        if not 0 <= args.target < len(classes):
            raise ArgumentError(f"class {args.target} outside 0..{len(classes) - 1}")
        targets = np.full(len(gray), args.target)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for path, img, c in zip(args.images, gray, targets):
        for i in which:
            heat = compute_cam(bundle.snapshots[i - 1].model, np.repeat(img[None], 3, axis=0),
                               int(c), args.layer, snapshot=i)
            written = write_rgb(out / f"{Path(path).stem}_s{i}_c{int(c)}.png", render_overlay(heat, img))
            print(written)
    return EXIT_OK


COMMANDS = {"arch": cmd_arch, "gen-toy": cmd_gen_toy, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "explain": cmd_explain}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ecovnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ArgumentError as exc:
        print(f"ecovnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"ecovnet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"ecovnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
