"""``savers`` command line: synth, manifest, train, eval, infer, compose, report.

Every command takes ``--config FILE`` (JSON object whose keys are the
command's option names), ``--seed``, ``--out`` and ``--force``; flags given on
the command line override values from the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import plotting
from .checkpoint import load_checkpoint, save_checkpoint
from .datapipe import (DEFAULT_EXCLUSIONS, LABEL_SUFFIX, ChipRecord, DatasetManifest, LabelImage,
                       ManifestEntry, Placement, SceneSpec, build_manifest, compose_scene, load_chip_file, load_samples,
                       read_image_pgm, read_label_pgm, read_manifest, synth_chip, synth_class_names,
                       write_image_pgm, write_label_pgm, write_manifest)
from .errors import ConfigError, SaversError
from .metrics import (accumulate, all_class_metrics, cell_accuracy_map, overall_accuracy,
                      read_confusion_csv, render_reports, score_distribution)
from .net import (SaversConfig, build_model, coarse_segment_batch, colorize, composite_output,
                  detect_targets, segment)
from .seeding import stream
from .trainer import TrainConfig, fit, read_history, stack_batch, write_history

log = logging.getLogger("savers")

REQUIRED = object()

# option name -> (type, default, help); names double as config-file keys
OPTIONS = {
    "synth": {
        "classes": (int, 4, "number of target classes"),
        "per_class": (int, 50, "chips per class (clutter included)"),
        "size": (int, 64, "chip size in pixels (multiple of 16)"),
        "test_fraction": (float, 0.4, "fraction of each class written to the test split"),
    },
    "manifest": {
        "root": (str, REQUIRED, "dataset root directory"),
        "layout": (str, "mstar", "directory layout: mstar or synthetic"),
        "exclusions": (str, None, "CSV of (class, filename) test chips to drop; default five BTR60 chips"),
    },
    "train": {
        "manifest": (str, REQUIRED, "manifest CSV"),
        "epochs": (int, 10, "training epochs"),
        "learning_rate": (float, 0.01, "SGD learning rate"),
        "momentum": (float, 0.9, "momentum coefficient"),
        "batch_size": (int, 8, "chips per batch"),
        "block_channels": (str, "32,64,128,256", "encoder block widths"),
        "mid_channels": (int, 256, "width of the 4x4 conv"),
        "dropout_rate": (float, 0.5, "dropout after the 4x4 conv"),
        "chip_size": (int, None, "centre-crop/pad chips to this size"),
        "eval_split": (str, "test", "split used for per-epoch evaluation"),
        "save_epochs": (bool, False, "also write a checkpoint after every epoch"),
    },
    "eval": {
        "manifest": (str, REQUIRED, "manifest CSV"),
        "checkpoint": (str, REQUIRED, "model checkpoint"),
        "split": (str, "test", "split to evaluate"),
        "chip_size": (int, None, "centre-crop/pad chips to this size"),
        "bins": (int, 50, "histogram bins for the score distribution"),
    },
    "infer": {
        "checkpoint": (str, REQUIRED, "model checkpoint"),
        "image": (str, REQUIRED, "input image (PGM or header-chip file)"),
        "classes": (str, None, "classes.txt with class names"),
        "min_pixels": (int, 8, "smallest component reported as a target"),
    },
    "compose": {
        "scene": (str, REQUIRED, "scene JSON file"),
    },
    "report": {
        "eval_dir": (str, REQUIRED, "output directory of an eval run"),
        "history": (str, None, "history CSV from a train run"),
    },
}


class RunConfig(dict):
    def __getattr__(self, key):
        try:
            return self[key]
        except KeyError:
            raise AttributeError(key) from None


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="savers", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="root seed (default 0)")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--force", action="store_true", default=None,
                        help="write into a non-empty output directory")
        for name, (typ, _, help_) in opts.items():
            flag = "--" + name.replace("_", "-")
            if typ is bool:
                sp.add_argument(flag, action="store_true", default=None, help=help_)
            else:
                sp.add_argument(flag, type=typ, default=None, help=help_)
    return p


def resolve_config(command: str, args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    opts = OPTIONS[command]
    allowed = set(opts) | {"seed", "out", "force"}
    cfg = {k: v[1] for k, v in opts.items()}
    cfg.update(seed=0, out=None, force=False)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        data = {k.replace("-", "_"): v for k, v in data.items()}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {unknown} for '{command}'")
        cfg.update(data)
    for key in allowed:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    missing = [k for k, v in cfg.items() if v is REQUIRED]
    if missing:
        raise ConfigError(f"'{command}' needs {', '.join('--' + m.replace('_', '-') for m in missing)}")
    if cfg["out"] is None:
        raise ConfigError(f"'{command}' needs --out")
    return RunConfig(cfg)


def prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not cfg.force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _atomic_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_manifest_atomic(manifest: DatasetManifest, path: Path) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    os.close(fd)
    try:
        write_manifest(manifest, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _channels(value) -> tuple[int, ...]:
    if isinstance(value, str):
        try:
            return tuple(int(v) for v in value.split(","))
        except ValueError:
            raise ConfigError(f"block_channels must be comma-separated integers, got {value!r}") from None
    return tuple(int(v) for v in value)


# --- commands ----------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> Path:
    if cfg.size % 16 or cfg.size < 16:
        raise ConfigError(f"--size must be a positive multiple of 16, got {cfg.size}")
    if cfg.per_class < 1:
        raise ConfigError(f"--per-class must be >= 1, got {cfg.per_class}")
    if not 0.0 < cfg.test_fraction < 1.0:
        raise ConfigError(f"--test-fraction must lie in (0, 1), got {cfg.test_fraction}")
    names = synth_class_names(cfg.classes)
    out = prepare_out(cfg)
    rng = stream(cfg.seed, "data")
    n_test = max(1, int(round(cfg.per_class * cfg.test_fraction)))
    entries = []
    for cid, name in enumerate(names):
        for k in range(cfg.per_class):
            chip, lab = synth_chip(cid, cfg.size, rng, num_classes=len(names))
            split = "test" if k >= cfg.per_class - n_test else "train"
            rel = Path(split) / f"{cid:02d}_{name}" / f"chip_{k:04d}.pgm"
            (out / rel.parent).mkdir(parents=True, exist_ok=True)
            write_image_pgm(out / rel, chip.image)
            label_rel = rel.with_name(rel.stem + LABEL_SUFFIX)
            write_label_pgm(out / label_rel, lab.labels)
            entries.append(ManifestEntry(rel.as_posix(), label_rel.as_posix(), cid, split))
    _atomic_text(out / "classes.txt", "\n".join(names) + "\n")
    _write_manifest_atomic(DatasetManifest(entries, names, out), out / "manifest.csv")
    print(f"wrote {len(entries)} chips ({len(names) - 1} target classes + clutter) to {out}")
    return out


def _read_exclusions(path) -> list[tuple[str, str]]:
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r and not r[0].startswith("#")]
    if rows and [c.lower() for c in rows[0][:2]] == ["class", "filename"]:
        rows = rows[1:]
    return [(r[0], r[1]) for r in rows]


def cmd_manifest(cfg: RunConfig) -> Path:
    if cfg.layout not in ("mstar", "synthetic"):
        raise ConfigError(f"--layout must be mstar or synthetic, got {cfg.layout!r}")
    exclusions = _read_exclusions(cfg.exclusions) if cfg.exclusions else DEFAULT_EXCLUSIONS
    manifest = build_manifest(cfg.root, cfg.layout, exclusions)
    out = prepare_out(cfg)
    root = Path(cfg.root).resolve()

    def rel(p):
        return os.path.relpath(root / p, out.resolve()) if p else ""
    moved = [ManifestEntry(rel(e.path), rel(e.label_path), e.class_id, e.split)
             for e in manifest.entries]
    _atomic_text(out / "classes.txt", "\n".join(manifest.class_names) + "\n")
    _write_manifest_atomic(DatasetManifest(moved, manifest.class_names, out), out / "manifest.csv")
    print(f"manifest: {len(moved)} chips, {len(manifest.excluded)} excluded")
    return out


def _load_split(manifest, split, chip_size):
    samples = load_samples(manifest, split, chip_size)
    if not samples:
        raise ConfigError(f"manifest {manifest.root} has no '{split}' chips")
    return samples


def cmd_train(cfg: RunConfig):
    if cfg.epochs < 1:
        raise ConfigError(f"--epochs must be >= 1, got {cfg.epochs}")
    train_conf = TrainConfig(learning_rate=cfg.learning_rate, momentum=cfg.momentum,
                             epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed)
    manifest = read_manifest(cfg.manifest)
    model_conf = SaversConfig(num_classes=len(manifest.class_names),
                              block_channels=_channels(cfg.block_channels),
                              mid_channels=cfg.mid_channels, dropout_rate=cfg.dropout_rate)
    out = prepare_out(cfg)
    train_set = _load_split(manifest, "train", cfg.chip_size)
    eval_set = _load_split(manifest, cfg.eval_split, cfg.chip_size)
    model = build_model(model_conf, stream(cfg.seed, "init"))
    result = fit(model, train_set, eval_set, train_conf, checkpoint_path=out / "model.ckpt",
                 keep_epoch_checkpoints=cfg.save_epochs)
    save_checkpoint(result.final_model, out / "final.ckpt")
    for epoch, snap in result.checkpoints.items():
        save_checkpoint(snap, out / f"epoch_{epoch:03d}.ckpt")
    write_history(result.history, out / "history.csv")
    plotting.plot_history(result.history, out / "history.png")
    best = result.history[result.best_epoch - 1]
    print(f"best epoch {result.best_epoch}: eval coarse accuracy {best.eval_accuracy:.4f}")
    return result


def _predict(model, samples, batch_size=16):
    coarse = []
    for start in range(0, len(samples), batch_size):
        images, _ = stack_batch(samples[start:start + batch_size])
        coarse += coarse_segment_batch(model, images)
    return coarse


def cmd_eval(cfg: RunConfig) -> dict:
    manifest = read_manifest(cfg.manifest)
    model = load_checkpoint(cfg.checkpoint)
    names = manifest.class_names
    if model.config.num_classes != len(names):
        raise ConfigError(f"checkpoint has {model.config.num_classes} classes, "
                          f"manifest lists {len(names)}")
    out = prepare_out(cfg)
    samples = _load_split(manifest, cfg.split, cfg.chip_size)
    results = _predict(model, samples)
    truths = [chip.class_id for chip, _ in samples]
    preds = [r.predicted_class for r in results]
    cm = accumulate(preds, truths, names)
    metrics = all_class_metrics(cm)
    dist = score_distribution([r.background_prob for r in results], truths, bins=cfg.bins)
    shapes = {r.logit_grid.shape for r in results}
    cell_map = cell_accuracy_map([r.cell_predictions for r in results], truths) \
        if len(shapes) == 1 else None
    paths = render_reports(cm, metrics, dist, out, cell_map)
    rows = [e for e in manifest.entries if e.split == cfg.split]
    with open(out / "predictions.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["path", "class_id", "predicted", "background_prob"])
        for e, t, r in zip(rows, truths, results):
            w.writerow([e.path, t, r.predicted_class, repr(r.background_prob)])
    _render_eval_figures(out, out)
    acc = overall_accuracy(cm)
    clutter = metrics[0].recall
    print(f"coarse accuracy {acc:.4f} ({int(np.trace(cm.counts))}/{cm.total}); "
          f"clutter recall {'undefined' if clutter is None else f'{clutter:.4f}'}")
    return {"accuracy": acc, "confusion": cm, "metrics": metrics, "paths": paths}


def _render_eval_figures(eval_dir: Path, out: Path) -> None:
    cm = read_confusion_csv(eval_dir / "confusion_matrix.csv")
    with open(eval_dir / "predictions.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    dist = score_distribution([float(r["background_prob"]) for r in rows],
                              [int(r["class_id"]) for r in rows])
    plotting.plot_confusion(cm, out / "confusion_matrix.png")
    plotting.plot_score_distribution(dist, out / "score_distribution.png")
    cell_csv = eval_dir / "cell_accuracy.csv"
    if cell_csv.exists():
        acc_map = np.loadtxt(cell_csv, delimiter=",", ndmin=2)
        plotting.plot_cell_accuracy(acc_map, out / "cell_accuracy.png")


def _read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    if path.suffix.lower() == ".pgm":
        return read_image_pgm(path)[0]
    return load_chip_file(path, class_id=0).image[0]


def cmd_infer(cfg: RunConfig) -> list:
    model = load_checkpoint(cfg.checkpoint)
    image = _read_image(cfg.image)
    if min(image.shape) < 16:
        raise ConfigError(f"image {image.shape} is smaller than 16x16")
    names = Path(cfg.classes).read_text().split() if cfg.classes else None
    out = prepare_out(cfg)
    coarse, fine = segment(model, image)
    targets = detect_targets(fine, cfg.min_pixels)
    coarse_map, fine_map, composite = composite_output(image, fine, coarse)
    write_label_pgm(out / "fine_labels.pgm", fine.label_map)
    write_label_pgm(out / "coarse_grid.pgm", coarse.cell_predictions)
    plotting.save_rgb(composite, out / "composite.png")
    plotting.save_rgb(fine_map, out / "fine_map.png")
    plotting.save_rgb(np.kron(coarse_map, np.ones((16, 16, 1))), out / "coarse_map.png")
    with open(out / "targets.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class_id", "class_name", "centroid_row", "centroid_col", "pixel_count"])
        for t in targets:
            name = names[t.class_id] if names and t.class_id < len(names) else f"class{t.class_id}"
            w.writerow([t.class_id, name, repr(t.centroid[0]), repr(t.centroid[1]), t.pixel_count])
    print(f"{len(targets)} target(s) detected; chip-level class {coarse.predicted_class}")
    return targets


SCENE_KEYS = {"canvas", "num_classes", "chip_size", "background_seed", "placements"}
PLACEMENT_KEYS = {"class_id", "chip_seed", "chip", "label", "top", "left"}


def load_scene(path, seed: int):
    """Scene JSON -> (SceneSpec, chips, num_classes)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"scene file not found: {path}")
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    unknown = sorted(set(spec) - SCENE_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown scene keys {unknown}")
    if "canvas" not in spec:
        raise ConfigError(f"{path}: scene needs 'canvas': [height, width]")
    h, w = (int(v) for v in spec["canvas"])
    size = int(spec.get("chip_size", 64))
    placements_in = spec.get("placements", [])
    nc = int(spec.get("num_classes", max([p.get("class_id", 0) for p in placements_in] or [0]) + 1))
    chips, placements = [], []
    for i, p in enumerate(placements_in):
        unknown = sorted(set(p) - PLACEMENT_KEYS)
        if unknown:
            raise ConfigError(f"{path}: placement {i} has unknown keys {unknown}")
        if "chip" in p:
            chip_path = path.parent / p["chip"]
            image = read_image_pgm(chip_path)
            label_path = path.parent / p.get("label", Path(p["chip"]).stem + LABEL_SUFFIX)
            labels = read_label_pgm(label_path)
            cid = int(labels.max())
            chips.append((ChipRecord(image, cid, 0.0, 0.0, chip_path.name), LabelImage(labels, nc)))
        else:
            if "class_id" not in p:
                raise ConfigError(f"{path}: placement {i} needs 'class_id' or 'chip'")
            chip_seed = p.get("chip_seed")
            rng = np.random.default_rng(chip_seed) if chip_seed is not None \
                else stream(seed, f"placement{i}")
            chips.append(synth_chip(int(p["class_id"]), size, rng, num_classes=nc))
        placements.append(Placement(i, int(p.get("top", 0)), int(p.get("left", 0))))
    bg_seed = spec.get("background_seed")
    if bg_seed is None:
        bg_seed = int(stream(seed, "background").integers(2 ** 31))
    return SceneSpec(h, w, placements, int(bg_seed)), chips, nc


def cmd_compose(cfg: RunConfig):
    scene, chips, nc = load_scene(cfg.scene, cfg.seed)
    out = prepare_out(cfg)
    image, labels = compose_scene(scene, chips, nc)
    write_image_pgm(out / "scene.pgm", image)
    write_label_pgm(out / f"scene{LABEL_SUFFIX}", labels.labels)
    truth = detect_targets(labels.labels, min_pixels=1)
    with open(out / "truth.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class_id", "centroid_row", "centroid_col", "pixel_count"])
        for t in truth:
            w.writerow([t.class_id, repr(t.centroid[0]), repr(t.centroid[1]), t.pixel_count])
    plotting.save_rgb(colorize(labels.labels), out / "scene_truth.png")
    print(f"scene {scene.canvas_h}x{scene.canvas_w} with {len(scene.placements)} placement(s)")
    return image, labels


def cmd_report(cfg: RunConfig) -> Path:
    eval_dir = Path(cfg.eval_dir)
    for name in ("confusion_matrix.csv", "predictions.csv"):
        if not (eval_dir / name).is_file():
            raise FileNotFoundError(f"{eval_dir / name} not found; run 'savers eval' first")
    out = prepare_out(cfg)
    _render_eval_figures(eval_dir, out)
    if cfg.history:
        plotting.plot_history(read_history(cfg.history), out / "history.png")
    print(f"figures written to {out}")
    return out


COMMANDS = {"synth": cmd_synth, "manifest": cmd_manifest, "train": cmd_train, "eval": cmd_eval,
            "infer": cmd_infer, "compose": cmd_compose, "report": cmd_report}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        COMMANDS[args.command](cfg)
    except (SaversError, FileNotFoundError) as exc:
        print(f"savers {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
