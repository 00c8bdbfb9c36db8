"""Command-line entry point: ``plsnet <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
Each command echoes its resolved configuration to stderr as one JSON line so
that stdout stays machine-readable.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import NOMINAL_INPUT, network_cost_report
from .blocks import ParamStore, plsnet_forward
from .config import NetworkConfig
from .metrics import GridMismatchError, LabeledVolume, UndefinedMetricError, per_lobe_report
from .phantom import PhantomSpec, generate_phantom
from .pipeline import (VolumeFormatError, argmax_labels, header_of, preprocess, read_volume,
                       resample_isotropic, resample_labels_to_native, write_volume)
from .training import TrainConfig, fit, write_history_csv

class UsageError(Exception):
    """Bad flags, bad config, or inputs that violate a command's preconditions."""


def _echo(command: str, **resolved):
    print(json.dumps({"command": command, **resolved}, default=str), file=sys.stderr)


def _load_net_config(path) -> NetworkConfig:
    if path is None:
        return NetworkConfig()
    try:
        return NetworkConfig.load(path)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad network config {path}: {exc}") from exc


def _parse_size(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected H,W,D integers, got {text!r}") from exc
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive extents, got {text!r}")
    return parts


# --- analyze ---------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    cfg = _load_net_config(args.config)
    _echo("analyze", config=cfg.to_dict(), input_size=args.input_size)
    report = network_cost_report(cfg, args.input_size)
    print(report.to_json() if args.json else report.to_text())
    return 0


# --- phantom ---------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    try:
        base = PhantomSpec.load(args.spec) if args.spec else PhantomSpec()
    except FileNotFoundError as exc:
        raise UsageError(f"phantom spec not found: {args.spec}") from exc
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad phantom spec {args.spec}: {exc}") from exc
    _echo("phantom", spec=base.to_dict(), count=args.count, seed=args.seed, out=args.out)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = []
    for i in range(args.count):
        spec = PhantomSpec.from_dict({**base.to_dict(), "seed": args.seed + i})
        image, labels = generate_phantom(spec)
        stem = f"phantom_{i:03d}"
        write_volume(out / f"{stem}_image", image)
        write_volume(out / f"{stem}_labels", labels)
        items.append({"index": i, "seed": spec.seed, "image": f"{stem}_image",
                      "labels": f"{stem}_labels"})
    manifest = {"spec": base.to_dict(), "items": items}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {args.count} phantom pair(s) to {out}")
    return 0


# --- train -----------------------------------------------------------------------------


def read_pair_list(path) -> list[tuple[Path, Path]]:
    """Pairs of (image, labels) volume paths.

    Accepts a phantom ``manifest.json`` or a text file with one
    ``image labels`` pair per line (``#`` starts a comment). Relative paths
    resolve against the list file's directory.
    """
    path = Path(path)
    if not path.exists():
        raise UsageError(f"list file not found: {path}")
    root = path.parent
    if path.suffix == ".json":
        try:
            items = json.loads(path.read_text())["items"]
            pairs = [(root / it["image"], root / it["labels"]) for it in items]
        except (ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"bad manifest {path}: {exc}") from exc
    else:
        pairs = []
        for n, line in enumerate(path.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 2:
                raise UsageError(f"{path}:{n}: expected 'image labels', got {line!r}")
            pairs.append((root / fields[0], root / fields[1]))
    if not pairs:
        raise UsageError(f"{path}: list is empty")
    return pairs


def load_samples(pairs, num_classes: int):
    samples = []
    for image_path, label_path in pairs:
        image = read_volume(image_path)
        labels = read_volume(label_path)
        if not isinstance(labels, LabeledVolume) or isinstance(image, LabeledVolume):
            raise UsageError(f"expected an intensity/label pair: {image_path}, {label_path}")
        x = preprocess(image)
        y = resample_isotropic(labels).labels
        if y.shape != x.data.shape:
            raise UsageError(f"{label_path}: label grid {y.shape} does not match image {x.data.shape}")
        if y.max() >= num_classes:
            raise UsageError(f"{label_path}: label {int(y.max())} exceeds {num_classes} classes")
        samples.append((x.data[..., None], y))
    return samples


def cmd_train(args) -> int:
    cfg = _load_net_config(args.config)
    train_cfg = TrainConfig(seed=args.seed, max_epochs=args.max_epochs)
    train_pairs = read_pair_list(args.train)
    val_pairs = read_pair_list(args.val)
    _echo("train", config=cfg.to_dict(), training=asdict(train_cfg), train_list=args.train,
          val_list=args.val, out=args.out)
    train_set = load_samples(train_pairs, cfg.num_classes)
    val_set = load_samples(val_pairs, cfg.num_classes)
    result = fit(train_set, val_set, cfg, train_cfg)
    out = Path(args.out)
    result.params.save(out)
    csv_path = Path(args.history) if args.history else out.with_suffix(".loss.csv")
    write_history_csv(csv_path, result.history)
    best = result.history[result.best_epoch - 1].val_loss if result.best_epoch else float("nan")
    print(f"stopped: {result.stop_reason} after {len(result.history)} epoch(s); "
          f"best epoch {result.best_epoch} val_loss {best:.6f}")
    print(f"checkpoint: {out}")
    print(f"loss history: {csv_path}")
    return 0


# --- infer -----------------------------------------------------------------------------


def _load_checkpoint(path) -> ParamStore:
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return ParamStore.load(path)


def _load_intensity(path):
    v = read_volume(path)
    if isinstance(v, LabeledVolume):
        raise UsageError(f"{path}: expected an intensity volume, got labels")
    return header_of(v), v


def cmd_infer(args) -> int:
    params = _load_checkpoint(args.ckpt)
    _echo("infer", config=params.config.to_dict(), ckpt=args.ckpt, input=args.input, out=args.out)
    header, volume = _load_intensity(args.input)
    t0 = time.perf_counter()
    x = preprocess(volume)
    probs, _, _ = plsnet_forward(x.data[..., None], params, train=False)
    labels = resample_labels_to_native(argmax_labels(probs, x.spacing), header)
    seconds = time.perf_counter() - t0
    write_volume(args.out, labels)
    print(f"inference: {seconds:.2f} s, grid {header.dims}")
    return 0


# --- evaluate --------------------------------------------------------------------------


def _load_labels(path) -> LabeledVolume:
    v = read_volume(path)
    if not isinstance(v, LabeledVolume):
        raise UsageError(f"{path}: expected a label volume")
    return v


def cmd_evaluate(args) -> int:
    _echo("evaluate", pred=args.pred, ref=args.ref, csv=args.csv)
    pred, ref = _load_labels(args.pred), _load_labels(args.ref)
    try:
        report = per_lobe_report(pred, ref)
    except GridMismatchError as exc:
        raise UsageError(str(exc)) from exc
    print(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


# --- inspect ---------------------------------------------------------------------------


def normalise_slice(a: np.ndarray) -> np.ndarray:
    """Min-max to 0..255; a constant slice becomes mid-gray."""
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 0:
        return np.full(a.shape, 128, dtype=np.uint8)
    return np.round((a - lo) / (hi - lo) * 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray):
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def cmd_inspect(args) -> int:
    params = _load_checkpoint(args.ckpt)
    _echo("inspect", config=params.config.to_dict(), ckpt=args.ckpt, input=args.input,
          layer=args.layer, slice=args.slice, out=args.out, format=args.format)
    _, volume = _load_intensity(args.input)
    x = preprocess(volume)
    taps: dict = {}
    plsnet_forward(x.data[..., None], params, train=False, taps=taps)
    if args.layer not in taps:
        names = "\n  ".join(sorted(taps))
        raise UsageError(f"unknown layer {args.layer!r}; available layers:\n  {names}")
    fmap = taps[args.layer]
    depth = fmap.shape[2]
    if not 0 <= args.slice < depth:
        raise UsageError(f"--slice {args.slice} outside 0..{depth - 1} for layer {args.layer}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    safe = args.layer.replace("/", "_")
    for c in range(fmap.shape[3]):
        img = normalise_slice(fmap[:, :, args.slice, c])
        target = out / f"{safe}_z{args.slice:03d}_c{c:03d}.{args.format}"
        if args.format == "pgm":
            write_pgm(target, img)
        else:
            np.savetxt(target, img, fmt="%d", delimiter=",")
    print(f"wrote {fmap.shape[3]} channel slice(s) of {args.layer} {fmap.shape[:3]} to {out}")
    return 0


# --- entry point -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plsnet", description="Lobe segmentation network toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="MAC / parameter / receptive-field report")
    a.add_argument("--config", help="network config JSON (default: built-in schedule)")
    a.add_argument("--input-size", type=_parse_size, default=NOMINAL_INPUT, metavar="H,W,D")
    a.add_argument("--json", action="store_true", help="emit JSON instead of text")
    a.set_defaults(func=cmd_analyze)

    ph = sub.add_parser("phantom", help="write synthetic image/label pairs")
    ph.add_argument("--spec", help="phantom spec JSON (default: built-in)")
    ph.add_argument("--out", required=True)
    ph.add_argument("--count", type=int, default=1)
    ph.add_argument("--seed", type=int, default=0)
    ph.set_defaults(func=cmd_phantom)

    t = sub.add_parser("train", help="fit a network")
    t.add_argument("--train", required=True, help="manifest.json or 'image labels' list file")
    t.add_argument("--val", required=True, help="manifest.json or 'image labels' list file")
    t.add_argument("--config", help="network config JSON (default: built-in schedule)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="loss CSV path (default: <out>.loss.csv)")
    t.add_argument("--max-epochs", type=int, default=300)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment one volume")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="input", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("evaluate", help="per-lobe DSC / ASD")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--csv")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("inspect", help="dump one layer's feature maps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--layer", required=True)
    s.add_argument("--slice", type=int, required=True, help="index along the last axis")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--format", choices=("pgm", "csv"), default="pgm")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"plsnet {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, UndefinedMetricError, VolumeFormatError) as exc:
        print(f"plsnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
