"""Command line entry point: ``structaug {augment,precompute,eigen,demo-train,overlay}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 IO error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .geoflow import FlowParams, load_flow, render_overlay, save_flow
from .gradsource import TrainingError, load_checkpoint, save_checkpoint, train_tiny
from .photometric import RecolorParams, build_recolor_operator, recolor_subspace
from .pipeline import (
    AugmentConfig,
    CacheVersionError,
    ClassifierSource,
    ConfigError,
    FileSource,
    OperatorCache,
    ZeroSource,
    augment_batch,
    iterate_augment,
    precompute,
)
from .sparse_linalg import NumericalError
from .tensor_core import Image, ImageIOError, load_image, save_image, vectorize_all, write_tensor

log = logging.getLogger("structaug")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
IMAGE_SUFFIXES = (".png", ".ppm")


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment. Keys use flag names."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ImageIOError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ImageIOError(f"input directory {directory} does not exist")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _read_labels(path) -> dict:
    labels = {}
    try:
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#") or row[0] == "name":
                    continue
                labels[Path(row[0]).stem] = int(row[1])
    except OSError as exc:
        raise ImageIOError(f"cannot read labels {path}: {exc}") from exc
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"malformed labels file {path}: {exc}") from exc
    return labels


def _add_common(p: argparse.ArgumentParser, transform_positional=True):
    if transform_positional:
        p.add_argument("transform", choices=["flow", "recolor"])
    p.add_argument("--config", help="key=value file mirroring these flags (flags win)")
    p.add_argument("--alpha", type=float, default=1e-2)
    p.add_argument("--gamma", type=float, default=10.0)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--cap", type=float, default=3.0, help="max displacement in pixels; <=0 disables")
    p.add_argument("--flow-mode", choices=["warp", "additive"], default="warp")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--mu", type=float, default=1e-2)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--scale", type=float, default=0.1, help="recolor budget for max |change|")
    p.add_argument("--recolor-mode", choices=["project", "solve"], default="project")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache", help="operator cache directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="structaug", description="Smooth adversarial warps and edge-preserving recolorings.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("augment", help="augment a directory of images")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--prob", type=float, default=0.5)
    p.add_argument("--iterations", type=int, default=1)
    p.add_argument("--mode", choices=["untargeted", "targeted"], default="untargeted")
    p.add_argument("--target-label", type=int)
    p.add_argument("--grad", default="zero", help="tiny:CKPT_DIR | files:DIR | zero")
    p.add_argument("--labels", help="CSV of name,label (default: classifier prediction)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--save-flow", action="store_true", help="write NAME.flow.saug next to outputs")

    p = sub.add_parser("precompute", help="fill the operator cache")
    _add_common(p)
    p.add_argument("--in", dest="input", help="image directory")
    p.add_argument("--dims", action="append", default=[], help="MxN grid (flow); repeatable")

    p = sub.add_parser("eigen", help="bottom eigenpairs of an image's recolor operator")
    p.add_argument("image")
    _add_common(p, transform_positional=False)
    p.add_argument("--out", dest="output", help="directory for eigenvector SAUG files")

    p = sub.add_parser("demo-train", help="train the built-in tiny classifier")
    p.add_argument("--config")
    p.add_argument("--dataset", choices=["synth"], default="synth")
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--count", type=int, default=600)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--hidden", type=int, default=16, help="0 for a linear model")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--export-samples", type=int, default=0,
                   help="also write this many held-out images + labels.csv under OUT/samples")

    p = sub.add_parser("overlay", help="draw a flow field over an image")
    p.add_argument("image")
    p.add_argument("flowfile")
    p.add_argument("--config")
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--zoom", type=int, default=16)
    p.add_argument("--gain", type=float, default=1.0)
    p.add_argument("--out", dest="output")
    return parser


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv=None) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` become defaults that flags override."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    config_path = _config_path(argv)
    if config_path is None:
        return parser.parse_args(argv)

    values = read_config_file(config_path)
    command = next((t for t in argv if t in SUBCOMMANDS), None)
    if command is None:
        return parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        key = {"lambda": "lam", "in": "input", "out": "output"}.get(key, key)
        if key not in known or key in ("help", "config", "transform", "image", "flowfile"):
            raise ConfigError(f"unknown config key {key!r} for {command}")
        action = known[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                defaults[key] = action.type(raw)
            except ValueError as exc:
                raise ConfigError(f"config {key}={raw!r}: {exc}") from exc
        elif action.choices is not None and raw not in action.choices:
            raise ConfigError(f"config {key}={raw!r}: expected one of {list(action.choices)}")
        else:
            defaults[key] = raw
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def config_from_args(args) -> AugmentConfig:
    try:
        flow = FlowParams(args.alpha, args.gamma, args.delta, args.cap if args.cap > 0 else None, args.flow_mode)
        recolor = RecolorParams(args.recolor_mode, args.lam, args.mu, args.k, args.eps, args.scale)
        return AugmentConfig(
            transform=getattr(args, "transform", "recolor"),
            probability=getattr(args, "prob", 1.0),
            iterations=getattr(args, "iterations", 1),
            flow=flow,
            recolor=recolor,
            seed=args.seed,
            mode=getattr(args, "mode", "untargeted"),
            target_label=getattr(args, "target_label", None),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _gradient_source(text: str, cfg: AugmentConfig, paths):
    kind, _, where = text.partition(":")
    if kind == "tiny":
        clf = load_checkpoint(where)
        return ClassifierSource(clf, cfg.mode, cfg.target_label), clf
    if kind == "files":
        directory = Path(where)
        return FileSource({p.stem: directory / f"{p.stem}.saug" for p in paths}, cfg.mode), None
    if kind == "zero":
        return ZeroSource(), None
    raise ConfigError(f"unknown gradient source {text!r}")


def cmd_augment(args) -> int:
    cfg = config_from_args(args)
    paths = _list_images(args.input)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    source, clf = _gradient_source(args.grad, cfg, paths)
    images = [load_image(p) for p in paths]
    labels = _read_labels(args.labels) if args.labels else {}
    items = []
    for p, img in zip(paths, images):
        if p.stem in labels:
            label = labels[p.stem]
        elif clf is not None:
            label = int(np.argmax(clf.probabilities(vectorize_all(img)[None])[0]))
        else:
            label = 0
        items.append((img, label))
    cache = OperatorCache(args.cache) if args.cache else None
    keys = [p.stem for p in paths]
    result = augment_batch(items, source, cfg, cache=cache, workers=args.workers, keys=keys)

    with open(out_dir / "augment_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "label", "applied"])
        for p, (img, label), res in zip(paths, items, result.results):
            dest = out_dir / p.name
            writer.writerow([p.name, label, int(res.applied)])
            if not res.applied:
                # byte copy: pass-through images are never re-encoded
                shutil.copyfile(p, dest)
                continue
            save_image(res.image, dest)
            if args.save_flow and res.flow is not None:
                save_flow(res.flow, out_dir / f"{p.stem}.flow.saug")
            if cfg.iterations > 1:
                _export_trajectory(img, label, p.stem, source, cfg, cache, out_dir)
    log.info("augmented %d of %d images into %s", result.modified_count, len(paths), out_dir)
    print(f"{result.modified_count}/{len(paths)} images augmented -> {out_dir}")
    return EXIT_OK


def _export_trajectory(img, label, stem, source, cfg, cache, out_dir: Path):
    traj = iterate_augment(img, label, source, cfg, cache, key=stem)
    for t, frame in enumerate(traj.images):
        save_image(frame, out_dir / f"{stem}_step{t:02d}.png")
    with open(out_dir / f"{stem}_trajectory.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "confidence"])
        for t in range(len(traj.images)):
            loss = traj.losses[t] if traj.losses else ""
            conf = traj.confidences[t] if traj.confidences else ""
            writer.writerow([t, loss, conf])


def _parse_dims(text):
    try:
        m, n = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"bad --dims {text!r}, expected MxN") from exc
    return m, n


def cmd_precompute(args) -> int:
    cfg = config_from_args(args)
    if not args.cache:
        raise ConfigError("precompute needs --cache DIR")
    cache = OperatorCache(args.cache)
    targets = [_parse_dims(d) for d in args.dims]
    if args.input:
        imgs = [load_image(p) for p in _list_images(args.input)]
        targets += sorted({im.shape for im in imgs}) if cfg.transform == "flow" else imgs
    if not targets:
        raise ConfigError("nothing to precompute: give --dims or --in")
    entries = precompute(targets, cfg, cache)
    created = sum(c for _, c in entries)
    print(f"{created} new, {len(entries) - created} existing cache entries in {args.cache}")
    return EXIT_OK


def cmd_eigen(args) -> int:
    cfg = config_from_args(args)
    img = load_image(args.image)
    p = cfg.recolor
    if args.cache:
        sub = OperatorCache(args.cache).recolor_subspace(img, p)
    else:
        sub = recolor_subspace(build_recolor_operator(img, p.eps), p.k, p.mu, p.seed)
    print(f"# {args.image}: k={sub.k} shift={sub.shift:g} seed={sub.seed} iterations={sub.iterations}")
    for i, val in enumerate(sub.values):
        print(f"{i}\t{val:.6e}")
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        for i in range(sub.k):
            write_tensor(out / f"eigvec{i:02d}.saug", sub.vectors[:, i].reshape(img.data.shape))
        np.savetxt(out / "eigenvalues.txt", sub.values)
    return EXIT_OK


def cmd_demo_train(args) -> int:
    from .testkit import synthetic_bars

    X, y = synthetic_bars(args.count, args.size, seed=args.seed, classes=args.classes)
    clf = train_tiny(X.reshape(len(y), -1), y, epochs=args.epochs, lr=args.lr,
                     hidden=args.hidden or None, seed=args.seed, input_shape=X.shape[1:])
    out = Path(args.output)
    save_checkpoint(clf, out)
    print(f"trained {clf.arch} classifier ({clf.num_parameters} parameters): "
          f"train accuracy {clf.info['train_accuracy']:.3f} -> {out}")
    if args.export_samples:
        Xs, ys = synthetic_bars(args.export_samples, args.size, seed=args.seed + 1, classes=args.classes)
        sample_dir = out / "samples"
        sample_dir.mkdir(exist_ok=True)
        with open(sample_dir / "labels.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "label"])
            for t, (x, label) in enumerate(zip(Xs, ys)):
                name = f"sample{t:04d}.png"
                save_image(Image(x), sample_dir / name)
                writer.writerow([name, int(label)])
    return EXIT_OK


def cmd_overlay(args) -> int:
    img = load_image(args.image)
    flow = load_flow(args.flowfile)
    if flow.shape != img.shape:
        raise ConfigError(f"flow {flow.shape} does not match image {img.shape}")
    out = Path(args.output) if args.output else Path(args.image).with_suffix(".overlay.png")
    try:
        render_overlay(img, flow, args.stride, args.zoom, args.gain).save(out)
    except OSError as exc:
        raise ImageIOError(f"cannot write {out}: {exc}") from exc
    print(f"overlay -> {out}")
    return EXIT_OK


SUBCOMMANDS = ("augment", "precompute", "eigen", "demo-train", "overlay")

COMMANDS = {
    "augment": cmd_augment,
    "precompute": cmd_precompute,
    "eigen": cmd_eigen,
    "demo-train": cmd_demo_train,
    "overlay": cmd_overlay,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"structaug: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ImageIOError as exc:
        print(f"structaug: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CacheVersionError, KeyError) as exc:
        print(f"structaug: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, TrainingError) as exc:
        print(f"structaug: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ImageIOError, OSError) as exc:
        print(f"structaug: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"structaug: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
