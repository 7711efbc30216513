"""Command-line front end.

Every subcommand writes into its own run directory
(``<out-root>/<command>-<YYYYmmdd-HHMMSS>-seed<N>`` unless ``--run-dir`` is
given) holding ``config.txt`` (the fully resolved settings, re-usable through
``--config``), the command's artifacts and ``run_manifest.json`` (seed, wall
time and sha256 of every artifact).

Exit codes::

    0  success
    1  unexpected internal error
    2  usage error (unknown flag, bad value, unknown config key)
    3  input file missing
    4  weight file fingerprint mismatch
    5  other weight file error (truncated, checksum)
    6  data error (bad raster, manifest or dataset contents)

Failures print exactly one line to stderr:
``echoview-error code=<n> kind=<ExceptionName> message=<json string>``.

Seeds: ``--seed`` feeds the phantom generator (synth), the study shuffle
(split), model initialisation, batch order, augmentation and dropout (train,
control), the fold assignment (train --folds) and sample choice plus
initialisation of t-SNE (embed).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shlex
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .data import (AugmentParams, DataError, Dataset, DatasetManifest, SampleRecord, ingest_frame,
                   leakage, load_dataset, normalize, read_float_image, read_raster, renormalize, split_by_study,
                   write_float_image, write_pgm)
from .evaluation import classify_video, evaluate_stills, evaluate_videos
from .interpretability import (OcclusionSpec, SaliencyMap, extract_features, knn_purity,
                               occlusion_experiment, saliency_batch, tsne, write_embedding)
from .model import FingerprintMismatch, WeightFileError, build_model, load_weights, save_weights
from .phantoms import generate_phantoms
from .training import ConvergenceLog, TrainConfig, kfold_select, random_label_control, train

log = logging.getLogger("echoview")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_MISSING, EXIT_FINGERPRINT, EXIT_WEIGHTS, EXIT_DATA = 0, 1, 2, 3, 4, 5, 6

# settings that describe where output goes rather than what is computed
_NOT_ECHOED = {"command", "config", "run_dir", "out_root", "handler", "quiet"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers

def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _rect(text: str) -> tuple[int, int, int, int]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        vals = ()
    if len(vals) != 4:
        raise argparse.ArgumentTypeError(f"expected top,left,height,width, got {text!r}")
    return vals


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def read_config(path) -> dict[str, str]:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(_require(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _echo_value(v) -> str:
    if isinstance(v, (list, tuple)):
        if v and isinstance(v[0], (list, tuple)):
            return " ".join(",".join(str(x) for x in r) for r in v)
        return ",".join(str(x) for x in v) if all(not isinstance(x, str) for x in v) else " ".join(v)
    return str(v)


def model_bundle(weights, num_classes: int | None = None) -> tuple:
    """Load weights plus the training-mean sidecar saved next to them."""
    path = _require(weights)
    model = load_weights(path, num_classes)
    mean_path = path.with_name(path.stem + "_mean.f32")
    mean = read_float_image(mean_path) if mean_path.exists() else None
    return model, mean


def _select(dataset: Dataset, split: str) -> Dataset:
    if split == "all":
        return dataset
    part = dataset.split(split)
    if len(part) == 0:
        raise DataError(f"dataset has no '{split}' samples")
    return part


def _load_image(path, mean) -> np.ndarray:
    raster = read_raster(_require(path))
    img = ingest_frame(raster) if raster.shape != (60, 80) else (raster / 255.0).astype(np.float32)
    return img - mean if mean is not None else img


def write_dataset(dataset: Dataset, directory: Path, threads: int = 1) -> Path:
    """Quantize images to 8-bit PGM under ``directory/img`` and write
    ``directory/manifest.jsonl``."""
    img_dir = directory / "img"
    img_dir.mkdir(parents=True, exist_ok=True)
    raw = dataset.raw_images()
    records = []
    for i, r in enumerate(dataset.records):
        records.append(SampleRecord(r.study_id, r.view_label, r.clip_id, r.frame_index, r.split,
                                    f"img/{i:06d}.pgm", r.signal_box))

    def put(i):
        write_pgm(img_dir / f"{i:06d}.pgm", raw[i])

    with ThreadPoolExecutor(max(1, threads)) as pool:
        list(pool.map(put, range(len(records))))
    path = directory / "manifest.jsonl"
    DatasetManifest(records, dataset.classes, None).save(path)
    return path


def _relocate(records: Sequence[SampleRecord], src_root: Path, dst_root: Path) -> list[SampleRecord]:
    out = []
    for r in records:
        p = None if r.path is None else os.path.relpath((src_root / r.path).resolve(), dst_root.resolve())
        out.append(SampleRecord(r.study_id, r.view_label, r.clip_id, r.frame_index, r.split, p, r.signal_box))
    return out


# ---------------------------------------------------------------- subcommands

def cmd_synth(a, out: Path) -> dict:
    ds = generate_phantoms(seed=a.seed, classes=a.classes, frames_per_clip=a.frames,
                           clips_per_study=a.clips, studies=a.studies, jitter=a.jitter)
    write_dataset(ds, out / "data", a.threads)
    return {"n_images": len(ds), "n_studies": a.studies, "n_classes": len(ds.classes)}


def cmd_ingest(a, out: Path) -> dict:
    src = _require(a.manifest)
    man = DatasetManifest.load(src)
    img_dir = out / "data" / "img"
    img_dir.mkdir(parents=True, exist_ok=True)
    sizes = []

    def one(i):
        r = man.records[i]
        if r.path is None:
            raise DataError(f"record {i} has no path")
        raster = read_raster(_require(src.parent / r.path))
        img = ingest_frame(raster, a.mask)
        write_pgm(img_dir / f"{i:06d}.pgm", img)
        return raster.shape

    with ThreadPoolExecutor(max(1, a.threads)) as pool:
        sizes = list(pool.map(one, range(len(man.records))))
    records = [SampleRecord(r.study_id, r.view_label, r.clip_id, r.frame_index, r.split,
                            f"img/{i:06d}.pgm", r.signal_box) for i, r in enumerate(man.records)]
    DatasetManifest(records, man.classes, None).save(out / "data" / "manifest.jsonl")
    reduction = [h * w / (60 * 80) for h, w in sizes]
    return {"n_images": len(records),
            "pixel_reduction_min": float(min(reduction)) if reduction else 0.0,
            "pixel_reduction_max": float(max(reduction)) if reduction else 0.0}


def cmd_split(a, out: Path) -> dict:
    src = _require(a.data)
    man = DatasetManifest.load(src)
    ratios = np.asarray(a.ratios, dtype=np.float64)
    split = split_by_study(man, ratios, a.seed)
    (out / "data").mkdir(parents=True, exist_ok=True)
    recs = _relocate(split.records, src.parent, out / "data")
    DatasetManifest(recs, split.classes, None).save(out / "data" / "manifest.jsonl")
    counts = split.counts()
    return {**{f"n_{k}": v for k, v in counts.items()}, "leakage": leakage(split)}


def _train_config(a) -> TrainConfig:
    try:
        aug = AugmentParams(a.rotation, a.shift, a.zoom, a.shear, a.flip) if a.augment else AugmentParams.none()
        return TrainConfig(epochs=a.epochs, batch_size=a.batch_size, learning_rate=a.lr, lr_decay=a.lr_decay,
                           rho=a.rho, epsilon=a.eps, k_folds=max(getattr(a, "folds", 1), 2), seed=a.seed,
                           bn_calibration=a.bn_calibration, augment=aug)
    except ValueError as exc:
        raise UsageError(str(exc))


def _progress(rec):
    log.info("epoch %d train_acc %.4f val_acc %.4f", rec.epoch, rec.train_acc, rec.val_acc)


def cmd_train(a, out: Path) -> dict:
    data = load_dataset(_require(a.data))
    cfg = _train_config(a)
    if a.folds > 1:
        pool = data.take([i for i, r in enumerate(data.records) if r.split in ("train", "val")])
        res = kfold_select(pool, cfg, lambda f, rec: _progress(rec))
        for f, lg in enumerate(res.logs):
            lg.to_csv(out / f"convergence_fold{f}.csv")
        model, mean = res.model, res.training_mean
        summary = {"best_fold": res.best_fold, "best_val_accuracy": float(res.val_accuracies.max())}
    else:
        ds = normalize(data)
        model = build_model(len(ds.classes), seed=a.seed)
        model, lg = train(model, _select(ds, "train"), _select(ds, "val"), cfg, _progress)
        lg.to_csv(out / "convergence.csv")
        mean = ds.training_mean
        summary = {"selected_epoch": lg.epochs[lg.selected].epoch, "best_val_accuracy": lg.best_val_acc}
    save_weights(model, out / "model.echv")
    write_float_image(out / "model_mean.f32", mean)
    return summary


def cmd_eval(a, out: Path) -> dict:
    data = load_dataset(_require(a.data))
    model, mean = model_bundle(a.weights, len(data.classes))
    data = renormalize(data, mean)
    part = _select(data, a.split)
    probs = model.predict_proba(part.images)
    rep = evaluate_stills(model, part)
    summary = {"overall_accuracy": rep.overall_accuracy, "average_accuracy": rep.average_accuracy}
    if any(r.clip_id is not None for r in part.records):
        vid = evaluate_videos(model, part, probs)
        rep.extra["video_accuracy"] = vid.overall_accuracy
        rep.extra["n_clips"] = vid.extra["n_clips"]
        vid.write(out / "video")
        summary["video_accuracy"] = vid.overall_accuracy
    rep.write(out)
    return summary


def cmd_classify(a, out: Path) -> dict:
    model, mean = model_bundle(a.weights)
    images = np.stack([_load_image(p, mean) for p in a.images])
    probs = model.predict_proba(images)
    classes = _class_names(model, a)
    with (out / "predictions.csv").open("w") as fh:
        fh.write("image,predicted,probability\n")
        for p, row in zip(a.images, probs):
            k = int(np.argmax(row))
            fh.write(f"{p},{classes[k]},{float(row[k])!r}\n")
    return {"n_images": len(images)}


def _class_names(model, a) -> list[str]:
    from .views import VIEW_NAMES
    if model.num_classes == len(VIEW_NAMES):
        return list(VIEW_NAMES)
    return [str(k) for k in range(model.num_classes)]


def cmd_classify_video(a, out: Path) -> dict:
    model, mean = model_bundle(a.weights)
    frames = np.stack([_load_image(p, mean) for p in a.frames])
    vote = classify_video(model, frames)
    classes = _class_names(model, a)
    (out / "vote.txt").write_text(
        f"predicted={classes[vote.label]}\n"
        + "".join(f"votes_{c}={int(n)}\n" for c, n in zip(classes, vote.tally) if n))
    return {"predicted": classes[vote.label], "n_frames": len(frames)}


def cmd_occlude(a, out: Path) -> dict:
    data = load_dataset(_require(a.data))
    model, mean = model_bundle(a.weights, len(data.classes))
    data = renormalize(data, mean)
    spec = OcclusionSpec.default()
    if a.masks:
        unknown = sorted(set(a.masks) - set(spec.masks))
        if unknown:
            raise UsageError(f"unknown mask names {unknown}; choose from {sorted(spec.masks)}")
        spec = OcclusionSpec({k: spec.masks[k] for k in a.masks})
    res = occlusion_experiment(model, _select(data, a.split), spec)
    res.to_csv(out / "occlusion.csv")
    return {"baseline_accuracy": res.baseline}


def cmd_saliency(a, out: Path) -> dict:
    data = load_dataset(_require(a.data))
    model, mean = model_bundle(a.weights, len(data.classes))
    data = _select(renormalize(data, mean), a.split)
    idx = np.arange(min(a.count, len(data))) if not a.indices else np.asarray(a.indices)
    if idx.max(initial=-1) >= len(data) or idx.min(initial=0) < 0:
        raise DataError(f"sample index out of range 0..{len(data) - 1}")
    targets = data.labels[idx] if a.target == "true" else np.argmax(model.logits(data.images[idx]), axis=1)
    # fixed chunk size: batch shapes, and so the float rounding, must not depend on --threads
    chunks = [np.arange(len(idx))[i:i + 8] for i in range(0, len(idx), 8)]
    with ThreadPoolExecutor(max(1, a.threads)) as pool:
        parts = list(pool.map(lambda c: saliency_batch(model, data.images[idx[c]], targets[c]), chunks))
    maps = np.concatenate(parts, axis=0)
    sal_dir = out / "saliency"
    sal_dir.mkdir()
    inside = []
    for n, (i, s) in enumerate(zip(idx, maps)):
        sm = SaliencyMap(s, int(targets[n]))
        sm.save(sal_dir / f"{int(i):06d}.pgm")
        box = data.records[i].signal_box
        if box is not None:
            m = np.zeros(s.shape, bool)
            m[box[0]:box[0] + box[2], box[1]:box[1] + box[3]] = True
            inside.append(sm.mass_fraction(m))
    summary = {"n_maps": len(idx)}
    if inside:
        summary["median_mass_in_signal_box"] = float(np.median(inside))
    return summary


def cmd_embed(a, out: Path) -> dict:
    data = load_dataset(_require(a.data))
    model, mean = model_bundle(a.weights, len(data.classes))
    data = _select(renormalize(data, mean), a.split)
    n = min(a.samples, len(data))
    idx = np.sort(np.random.default_rng(a.seed).choice(len(data), n, replace=False))
    sub = data.take(idx)
    ids = [f"{int(i):06d}" for i in idx]
    labels = [r.view_label for r in sub.records]
    summary = {"n_samples": n}
    sources = {"features": lambda: extract_features(model, sub.images),
               "pixels": lambda: sub.raw_images().reshape(n, -1)}
    for name in (["features", "pixels"] if a.source == "both" else [a.source]):
        res = tsne(sources[name](), a.perplexity, a.iterations, a.seed)
        write_embedding(out / f"embedding_{name}.csv", res.embedding, labels, ids)
        summary[f"purity_{name}"] = knn_purity(res.embedding, sub.labels, a.k)
        summary[f"kl_{name}"] = res.kl[max(res.kl)]
    return summary


def cmd_control(a, out: Path) -> dict:
    data = load_dataset(_require(a.data))
    lg: ConvergenceLog = random_label_control(data, _train_config(a), _progress)
    lg.to_csv(out / "convergence.csv")
    k = len(data.classes)
    return {"selected_val_accuracy": lg.best_val_acc, "final_val_accuracy": lg.epochs[-1].val_acc,
            "chance": 1.0 / k}


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker threads for per-sample stages")
    p.add_argument("--config", help="key=value file; explicit flags win")
    p.add_argument("--out-root", default="runs", help="parent of the per-run directory")
    p.add_argument("--run-dir", help="exact output directory (must not exist)")
    p.add_argument("--quiet", action="store_true")


def _training_flags(p: argparse.ArgumentParser, epochs: int) -> None:
    p.add_argument("--data", required=True, help="split dataset manifest")
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-decay", type=float, default=0.95)
    p.add_argument("--rho", type=float, default=0.9)
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--augment", type=_bool, default=True)
    p.add_argument("--rotation", type=float, default=10.0, help="degrees")
    p.add_argument("--shift", type=float, default=0.1, help="fraction of image size")
    p.add_argument("--zoom", type=float, default=0.08)
    p.add_argument("--shear", type=float, default=0.03)
    p.add_argument("--flip", type=_bool, default=True)
    p.add_argument("--bn-calibration", type=int, default=512,
                   help="training images used to re-estimate batch-norm statistics each epoch (0 = off)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="echoview", description="Echocardiogram view classification toolkit")
    parser.add_argument("--version", action="version", version=f"echoview {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.set_defaults(handler=handler)
        return p

    p = add("synth", cmd_synth, "generate a phantom dataset")
    p.add_argument("--studies", type=int, default=20)
    p.add_argument("--frames", type=int, default=10, help="frames per clip")
    p.add_argument("--clips", type=int, default=1, help="clips per study and view")
    p.add_argument("--classes", type=int, default=15)
    p.add_argument("--jitter", type=float, default=1.0)

    p = add("ingest", cmd_ingest, "anonymize and downsample rasters listed in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mask", type=_rect, action="append", default=[],
                   help="top,left,height,width rectangle to zero; repeatable")

    p = add("split", cmd_split, "assign studies to train/val/test")
    p.add_argument("--data", required=True)
    p.add_argument("--ratios", type=_floats, default=(0.8, 0.1, 0.1))

    p = add("train", cmd_train, "train a model")
    _training_flags(p, 45)
    p.add_argument("--folds", type=int, default=1, help="k-fold model selection over train+val when > 1")

    p = add("eval", cmd_eval, "evaluate a model")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])

    p = add("classify", cmd_classify, "classify single images")
    p.add_argument("--weights", required=True)
    p.add_argument("images", nargs="+")

    p = add("classify-video", cmd_classify_video, "classify a clip by majority vote over its frames")
    p.add_argument("--weights", required=True)
    p.add_argument("frames", nargs="+")

    p = add("occlude", cmd_occlude, "occlusion experiment")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--masks", nargs="*", default=[])

    p = add("saliency", cmd_saliency, "guided-backprop saliency maps")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--indices", type=int, nargs="*", default=[])
    p.add_argument("--target", default="predicted", choices=["predicted", "true"])

    p = add("embed", cmd_embed, "t-SNE of last hidden layer features and/or raw pixels")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--samples", type=int, default=750)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--k", type=int, default=5, help="neighbours for the purity score")
    p.add_argument("--source", default="both", choices=["features", "pixels", "both"])

    p = add("control", cmd_control, "random-label negative control")
    _training_flags(p, 45)
    return parser


def _config_path(argv: Sequence[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config":
            if i + 1 >= len(argv):
                raise UsageError("--config needs a file")
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(cmd_parser: argparse.ArgumentParser, command: str, cfg: dict[str, str]) -> None:
    """Config values become parser defaults so explicit flags still win."""
    actions = {a.dest: a for a in cmd_parser._actions}
    unknown = sorted(set(cfg) - set(actions) - {"command"})
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    if cfg.get("command", command) != command:
        raise UsageError(f"config is for '{cfg['command']}', not '{command}'")
    defaults = {}
    for dest, text in cfg.items():
        action = actions.get(dest)
        if action is None or dest in _NOT_ECHOED:
            continue
        conv = action.type or str
        try:
            if action.nargs in ("*", "+") or isinstance(action, argparse._AppendAction):
                defaults[dest] = [conv(v) for v in shlex.split(text)]
            elif isinstance(action, argparse._StoreTrueAction):
                defaults[dest] = _bool(text)
            else:
                defaults[dest] = conv(text)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"config key {dest}: {exc}")
        action.required = False
        if action.option_strings == []:
            action.nargs = "*"
    cmd_parser.set_defaults(**defaults)


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    config = _config_path(argv)
    if config is not None:
        choices = parser._subparsers._group_actions[0].choices
        command = next((t for t in argv if t in choices), None)
        if command is None:
            raise UsageError("a subcommand is required")
        _apply_config(choices[command], command, read_config(config))
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required")
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return args


def _run_dir(args) -> Path:
    if args.run_dir:
        out = Path(args.run_dir)
        out.mkdir(parents=True, exist_ok=False)
        return out
    root = Path(args.out_root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = f"{args.command}-{stamp}-seed{args.seed}"
    for n in range(1000):
        out = root / (base if n == 0 else f"{base}-{n}")
        try:
            out.mkdir()
            return out
        except FileExistsError:
            continue
    raise RuntimeError("could not allocate a run directory")


def echo_config(args) -> str:
    items = {k: v for k, v in vars(args).items() if k not in _NOT_ECHOED}
    lines = [f"command = {args.command}"] + [f"{k} = {_echo_value(v)}" for k, v in sorted(items.items())]
    return "\n".join(lines) + "\n"


def _artifacts(out: Path) -> dict[str, str]:
    skip = {"run_manifest.json"}
    return {str(p.relative_to(out)): sha256(p)
            for p in sorted(out.rglob("*")) if p.is_file() and p.name not in skip}


def execute(args) -> Path:
    out = _run_dir(args)
    (out / "config.txt").write_text(echo_config(args))
    start = time.perf_counter()
    # BLAS stays single-threaded: OpenBLAS rounding depends on its thread count
    with threadpool_limits(limits=1):
        summary = args.handler(args, out)
    wall = time.perf_counter() - start
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
    manifest = {"command": args.command, "seed": args.seed, "version": __version__,
                "wall_time_s": wall, "config": echo_config(args), "artifacts": _artifacts(out)}
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _fail(code: int, exc: BaseException) -> int:
    print(f"echoview-error code={code} kind={type(exc).__name__} message={json.dumps(str(exc))}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, exc)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        out = execute(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, exc)
    except FingerprintMismatch as exc:
        return _fail(EXIT_FINGERPRINT, exc)
    except WeightFileError as exc:
        return _fail(EXIT_WEIGHTS, exc)
    except (DataError, ValueError) as exc:
        return _fail(EXIT_DATA, exc)
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        return _fail(EXIT_INTERNAL, exc)
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
