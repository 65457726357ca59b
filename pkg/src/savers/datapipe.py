"""Chip ingestion, label images, manifests, synthetic chips and scene composition."""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, EmptyMaskError, FormatError, PlacementError

log = logging.getLogger(__name__)

MSTAR_CLASSES = ["Background", "2S1", "BMP2", "BRDM2", "BTR60", "BTR70",
                 "D7", "T62", "T72", "ZIL131", "ZSU234"]

# published train (17 deg) / test (15 deg) chip counts per class
MSTAR_COUNTS = {
    "Background": (274, 242), "2S1": (299, 274), "BMP2": (233, 195), "BRDM2": (298, 274),
    "BTR60": (256, 190), "BTR70": (233, 196), "D7": (299, 274), "T62": (299, 273),
    "T72": (232, 196), "ZIL131": (299, 274), "ZSU234": (299, 274),
}

DEFAULT_EXCLUSIONS = [
    ("BTR60", "HB03353.003"),
    ("BTR60", "HB04933.003"),
    ("BTR60", "HB04999.003"),
    ("BTR60", "HB05000.003"),
    ("BTR60", "HB05631.003"),
]


@dataclass
class ChipRecord:
    image: np.ndarray  # [1, H, W] in [0, 1]
    class_id: int
    depression_deg: float = 0.0
    aspect_deg: float = 0.0
    source_name: str = ""

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim == 2:
            img = img[None]
        if img.ndim != 3 or img.shape[0] != 1:
            raise DataError(f"chip image must be [1,H,W], got {img.shape}")
        if img.size and (img.min() < 0 or img.max() > 1):
            raise DataError(f"chip {self.source_name!r} has pixels outside [0, 1]")
        self.image = img

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[1:]


@dataclass
class LabelImage:
    labels: np.ndarray  # [H, W] int
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise DataError(f"label image must be 2-D, got {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"label values outside 0..{self.num_classes - 1}")


# --- PGM ---------------------------------------------------------------------

PGM_MAX = 65535


def write_pgm(path, pixels: np.ndarray, maxval: int = PGM_MAX) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise FormatError(f"PGM needs a 2-D array, got {pixels.shape}", path=path)
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > maxval:
        raise FormatError(f"pixel values outside 0..{maxval}", path=path)
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n{maxval}\n".encode()
    Path(path).write_bytes(header + pixels.astype(dtype).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Binary (P5) graymap -> ``(uint array [H, W], maxval)``."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(data, pos)
        if m is None:
            raise FormatError("incomplete PGM header", pos, path)
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError(f"unsupported PGM magic {tokens[0]!r}", 0, path)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-numeric PGM header field", 0, path) from None
    pos += 1  # single whitespace after maxval
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    if len(data) - pos < need:
        raise FormatError(f"truncated PGM raster: need {need} bytes", len(data), path)
    return np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w), maxval


def write_image_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    write_pgm(path, np.rint(np.clip(img, 0, 1) * PGM_MAX).astype(np.uint16))


def read_image_pgm(path) -> np.ndarray:
    """Graymap scaled to ``[1, H, W]`` floats in [0, 1]."""
    pix, maxval = read_pgm(path)
    return (pix.astype(np.float64) / maxval)[None]


def write_label_pgm(path, labels: np.ndarray) -> None:
    write_pgm(path, np.asarray(labels).astype(np.uint16))


def read_label_pgm(path) -> np.ndarray:
    pix, _ = read_pgm(path)
    return pix.astype(np.int64)


# --- header chips ------------------------------------------------------------

BEGIN_MARKER = b"[PhoenixHeaderVer"
END_MARKER = b"[EndofPhoenixHeader]"
REQUIRED_KEYS = ("NumberOfRows", "NumberOfColumns", "TargetAz", "DesiredDepression",
                 "PhoenixHeaderLength")


def write_header_chip(magnitude: np.ndarray, header: dict | None = None,
                      phase: np.ndarray | None = None) -> bytes:
    """Serialize a 2-D magnitude array (stored as big-endian float32)."""
    mag = np.asarray(magnitude, dtype=">f4")
    rows, cols = mag.shape
    fields = {"NativeHeaderLength": 0, "NumberOfColumns": cols, "NumberOfRows": rows,
              "TargetAz": 0.0, "DesiredDepression": 0.0}
    fields.update(header or {})
    fields["NumberOfColumns"], fields["NumberOfRows"] = cols, rows
    body = "".join(f"{k}= {v}\n" for k, v in fields.items() if k != "PhoenixHeaderLength")
    length = 0
    while True:
        text = f"[PhoenixHeaderVer01.04]\nPhoenixHeaderLength= {length:010d}\n{body}[EndofPhoenixHeader]\n"
        if len(text) == length:
            break
        length = len(text)
    out = text.encode("ascii") + mag.tobytes()
    if phase is not None:
        out += np.asarray(phase, dtype=">f4").tobytes()
    return out


def read_header_chip(data: bytes) -> tuple[dict, np.ndarray]:
    """Raw ``(header, float32 magnitude [rows, cols])`` without normalization."""
    if not data.startswith(BEGIN_MARKER):
        raise FormatError(f"missing begin marker {BEGIN_MARKER.decode()}", 0)
    end = data.find(END_MARKER)
    if end < 0:
        raise FormatError(f"missing end marker {END_MARKER.decode()}", len(data))
    header = {}
    for line in data[:end].decode("ascii", errors="replace").splitlines()[1:]:
        if "=" in line:
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
    for key in REQUIRED_KEYS:
        if key not in header:
            raise FormatError(f"header lacks required key {key}", 0)
    try:
        rows, cols = int(header["NumberOfRows"]), int(header["NumberOfColumns"])
        offset = int(header["PhoenixHeaderLength"]) + int(header.get("NativeHeaderLength", 0) or 0)
    except ValueError as exc:
        raise FormatError(f"non-integer size field ({exc})", 0) from None
    need = rows * cols * 4
    if len(data) < offset + need:
        raise FormatError(f"truncated magnitude block: need {need} bytes from {offset}, "
                          f"have {max(len(data) - offset, 0)}", len(data))
    mag = np.frombuffer(data, dtype=">f4", count=rows * cols, offset=offset).reshape(rows, cols)
    return header, mag


def parse_header_chip(data: bytes, class_id: int | None = None,
                      class_names: Sequence[str] = MSTAR_CLASSES,
                      source_name: str = "") -> ChipRecord:
    """Header chip -> max-normalized :class:`ChipRecord` (phase ignored)."""
    header, mag = read_header_chip(data)
    img = mag.astype(np.float64)
    peak = img.max()
    if peak > 0:
        img = img / peak
    img = np.clip(img, 0.0, 1.0)
    if class_id is None:
        class_id = class_index(header.get("TargetType", ""), class_names)
        if class_id is None:
            class_id = 0
    return ChipRecord(img[None], class_id, float(header["DesiredDepression"]),
                      float(header["TargetAz"]) % 360.0,
                      source_name or header.get("Filename", ""))


def _norm_name(name: str) -> str:
    return re.sub(r"[^0-9A-Z]", "", name.upper())


def class_index(name: str, class_names: Sequence[str] = MSTAR_CLASSES) -> int | None:
    """Map a directory/target name onto a class index (longest prefix match)."""
    n = _norm_name(name)
    if n in ("CLUTTER", "BACKGROUND"):
        return 0
    best = None
    for i, cname in enumerate(class_names):
        c = _norm_name(cname)
        if c and n.startswith(c) and (best is None or len(c) > len(_norm_name(class_names[best]))):
            best = i
    return best


def load_chip_file(path, class_id=None, class_names=MSTAR_CLASSES) -> ChipRecord:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return ChipRecord(read_image_pgm(path), class_id or 0, source_name=path.name)
    try:
        return parse_header_chip(path.read_bytes(), class_id, class_names, path.name)
    except FormatError as exc:
        raise FormatError(f"{exc} in {path}") from None


# --- label images ------------------------------------------------------------

def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius ** 2


def make_label_image(chip: ChipRecord, num_classes: int, threshold: float = 0.4,
                     closing_radius: int = 2) -> LabelImage:
    """Threshold, close, keep the largest 8-connected blob, paint it ``class_id``."""
    img = chip.image[0]
    if chip.class_id == 0:
        return LabelImage(np.zeros(img.shape, dtype=np.int64), num_classes)
    peak = img.max()
    mask = img >= threshold * peak
    if peak <= 0 or not mask.any():
        raise EmptyMaskError(f"no pixel of chip {chip.source_name!r} reaches {threshold} of its max")
    if closing_radius > 0:
        r = closing_radius
        padded = np.pad(mask, r)
        mask = ndimage.binary_closing(padded, structure=_disk(r))[r:-r, r:-r]
    comp, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    sizes = np.bincount(comp.ravel())[1:]
    keep = comp == (int(np.argmax(sizes)) + 1)
    return LabelImage(np.where(keep, chip.class_id, 0), num_classes)


# --- synthetic chips ---------------------------------------------------------

AMPLITUDE_CEILING = 12.0  # speckle mean is 1; values are divided by this and clipped
TARGET_GAIN = 3.0
SHADOW_GAIN = 0.25
SHADOW_LENGTH = 6
DISC_RADIUS = 28.0
JITTER = 10.0  # max target-centre offset in pixels (64 px chip)

# Rectangles as (x0, x1, y0, y1) in pixels around the target centre of a 64 px
# chip. Targets plus shadow cover roughly two thirds of the chip: the coarse
# vote averages cell logits over the whole grid, so a target has to own most
# cells to outvote the (easily separated) background around it.
_SHAPES = {
    "rectangle": [(-27, 27, -21, 21)],
    "l_shape": [(-27, 3, -27, 27), (3, 27, -3, 27)],
    "t_shape": [(-27, 27, -27, -3), (-16, 16, -3, 27)],
    "disc": None,
    "bar": [(-30, 30, -14, 14)],
    "ring": None,
    "cross": [(-28, 28, -10, 10), (-10, 10, -28, 28)],
}

SYNTH_TEMPLATES = ["clutter", "rectangle", "l_shape", "t_shape", "disc",
                   "bar_0", "bar_45", "bar_90", "bar_135", "ring", "cross"]


def synth_class_names(num_target_classes: int) -> list[str]:
    if not 1 <= num_target_classes <= len(SYNTH_TEMPLATES) - 1:
        raise ConfigError(f"synthetic data supports 1..{len(SYNTH_TEMPLATES) - 1} target classes")
    return ["background"] + SYNTH_TEMPLATES[1:num_target_classes + 1]


def footprint(template: str, size: tuple[int, int], center: tuple[float, float],
              angle_deg: float = 0.0, scale: float = 1.0) -> np.ndarray:
    """Boolean mask of a target template rasterized at pixel centres."""
    h, w = size
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = rows - center[0], cols - center[1]
    base = 0.0
    kind = template
    if template.startswith("bar_"):
        kind, base = "bar", float(template.split("_")[1])
    t = math.radians(angle_deg + base)
    # rotate pixel offsets into the template frame
    x = (dx * math.cos(t) + dy * math.sin(t)) / scale
    y = (-dx * math.sin(t) + dy * math.cos(t)) / scale
    if kind == "disc":
        return x ** 2 + y ** 2 <= DISC_RADIUS ** 2
    if kind == "ring":
        r2 = x ** 2 + y ** 2
        return (r2 <= DISC_RADIUS ** 2) & (r2 >= (DISC_RADIUS / 2) ** 2)
    if kind not in _SHAPES:
        raise ConfigError(f"unknown target template {template!r}")
    mask = np.zeros((h, w), dtype=bool)
    for x0, x1, y0, y1 in _SHAPES[kind]:
        mask |= (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
    return mask


def speckle(shape, rng: np.random.Generator) -> np.ndarray:
    """Fully developed speckle: exponential amplitude with unit mean."""
    return rng.exponential(1.0, size=shape)


def _to_unit(amplitude: np.ndarray) -> np.ndarray:
    return np.clip(amplitude / AMPLITUDE_CEILING, 0.0, 1.0)


def synth_chip(template: str | int, size: int = 64, seed=0,
               num_classes: int | None = None) -> tuple[ChipRecord, LabelImage]:
    """Synthetic SAR chip and its exact label image.

    ``template`` is a name from :data:`SYNTH_TEMPLATES`, ``"speckle"`` (pure
    background), or a class index into that list. Targets are a bright
    class-specific footprint (gamma-textured, ~3x the speckle mean) with a
    dark shadow on the far-range side; clutter chips carry a few small bright
    discretes and an all-background label.
    """
    if size % 16 or size < 16:
        raise ConfigError(f"chip size must be a positive multiple of 16, got {size}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if isinstance(template, (int, np.integer)):
        class_id = int(template)
        template = SYNTH_TEMPLATES[class_id]
    else:
        class_id = SYNTH_TEMPLATES.index(template) if template in SYNTH_TEMPLATES else 0
    nc = num_classes or len(SYNTH_TEMPLATES)
    amp = speckle((size, size), rng)
    aspect = float(rng.uniform(0.0, 360.0))
    labels = np.zeros((size, size), dtype=np.int64)
    if template == "clutter":
        for _ in range(int(rng.integers(1, 4))):
            c = rng.uniform(6, size - 6, 2)
            blob = footprint("disc", (size, size), tuple(c), scale=float(rng.uniform(0.055, 0.11)))
            amp[blob] = TARGET_GAIN * rng.gamma(4.0, 0.25, int(blob.sum()))
    elif template != "speckle":
        j = JITTER * size / 64
        center = (size / 2 - 0.5 + rng.uniform(-j, j), size / 2 - 0.5 + rng.uniform(-j, j))
        angle = 10.0 * math.sin(math.radians(aspect))
        mask = footprint(template, (size, size), center, angle,
                         size / 64 * float(rng.uniform(0.95, 1.05)))
        shadow = np.zeros_like(mask)
        shadow[SHADOW_LENGTH:] = mask[:-SHADOW_LENGTH]
        for k in range(1, SHADOW_LENGTH):
            shadow[k:] |= mask[:-k]
        shadow &= ~mask
        amp[shadow] *= SHADOW_GAIN
        amp[mask] = TARGET_GAIN * rng.gamma(4.0, 0.25, int(mask.sum()))
        labels[mask | shadow] = class_id
    chip = ChipRecord(_to_unit(amp)[None], class_id, 0.0, aspect, f"synth-{template}")
    return chip, LabelImage(labels, nc)


# --- scenes ------------------------------------------------------------------

@dataclass
class Placement:
    chip: int  # index into the chip list handed to compose_scene
    top: int
    left: int


@dataclass
class SceneSpec:
    canvas_h: int
    canvas_w: int
    placements: list[Placement] = field(default_factory=list)
    background_seed: int = 0
    background: np.ndarray | None = None  # optional clutter image [H, W] in [0, 1]


def compose_scene(spec: SceneSpec, chips: Sequence[tuple[ChipRecord, LabelImage]],
                  num_classes: int | None = None) -> tuple[np.ndarray, LabelImage]:
    """Paste chips onto a background canvas.

    Pixels under a chip's target mask are copied verbatim (image and label);
    the rest of the chip merges with the canvas by taking the brighter value.
    """
    h, w = spec.canvas_h, spec.canvas_w
    if h % 16 or w % 16 or h < 16 or w < 16:
        raise ConfigError(f"canvas {h}x{w} must be a positive multiple of 16")
    if spec.background is not None:
        bg = np.asarray(spec.background, dtype=np.float64)
        if bg.ndim == 3:
            bg = bg[0]
        reps = (-(-h // bg.shape[0]), -(-w // bg.shape[1]))
        canvas = np.tile(bg, reps)[:h, :w].copy()
    else:
        canvas = _to_unit(speckle((h, w), np.random.default_rng(spec.background_seed)))
    nc = num_classes or max([lab.num_classes for _, lab in chips] or [2])
    labels = np.zeros((h, w), dtype=np.int64)
    taken = np.zeros((h, w), dtype=bool)
    boxes = []
    for i, pl in enumerate(spec.placements):
        if not 0 <= pl.chip < len(chips):
            raise PlacementError(f"placement {i} references missing chip {pl.chip}")
        chip, lab = chips[pl.chip]
        ch, cw = chip.shape
        if pl.top < 0 or pl.left < 0 or pl.top + ch > h or pl.left + cw > w:
            raise PlacementError(f"placement {i} ({ch}x{cw} at {pl.top},{pl.left}) "
                                 f"falls outside the {h}x{w} canvas")
        box = (slice(pl.top, pl.top + ch), slice(pl.left, pl.left + cw))
        mask = lab.labels != 0
        if (taken[box] & mask).any():
            raise PlacementError(f"placement {i} target overlaps an earlier target")
        taken[box] |= mask
        boxes.append((box, chip, lab, mask))
    for box, chip, _, mask in boxes:
        canvas[box] = np.where(mask, canvas[box], np.maximum(canvas[box], chip.image[0]))
    for box, chip, lab, mask in boxes:
        canvas[box][mask] = chip.image[0][mask]
        labels[box][mask] = lab.labels[mask]
    return canvas, LabelImage(labels, nc)


# --- manifests ---------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: str
    label_path: str
    class_id: int
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_names: list[str]
    root: Path = Path(".")
    excluded: list[ManifestEntry] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict[tuple[str, str], int]:
        out = {}
        for e in self.entries:
            key = (self.class_names[e.class_id], e.split)
            out[key] = out.get(key, 0) + 1
        return out


def apply_exclusions(manifest: DatasetManifest,
                     exclusions: Sequence[tuple[str, str]] = DEFAULT_EXCLUSIONS) -> DatasetManifest:
    """Drop test entries matching ``(class name, file name)`` pairs."""
    wanted = {(_norm_name(c), f) for c, f in exclusions}
    kept, removed, hit = [], [], set()
    for e in manifest.entries:
        key = (_norm_name(manifest.class_names[e.class_id]), Path(e.path).name)
        if e.split == "test" and key in wanted:
            removed.append(e)
            hit.add(key)
        else:
            kept.append(e)
    for miss in sorted(wanted - hit):
        log.warning("exclusion %s/%s matched no test entry", *miss)
    log.info("excluded %d test chips", len(removed))
    return replace(manifest, entries=kept, excluded=manifest.excluded + removed)


LABEL_SUFFIX = ".label.pgm"
_SPLIT_DIRS = {"train": "train", "test": "test", "17DEG": "train", "15DEG": "test"}


def _split_of(dirname: str) -> str | None:
    return _SPLIT_DIRS.get(_norm_name(dirname)) or _SPLIT_DIRS.get(dirname.lower())


def build_manifest(root_dir, layout: str = "synthetic",
                   exclusions: Sequence[tuple[str, str]] = DEFAULT_EXCLUSIONS) -> DatasetManifest:
    """Scan ``root/<split>/<class dir>/<chip files>`` into a manifest.

    ``synthetic`` class dirs are named ``NN_name`` (NN = class index) and hold
    ``*.pgm`` chips with ``*.label.pgm`` labels. ``mstar`` split dirs are
    ``train``/``test`` or ``17_DEG``/``15_DEG``, class dirs are matched to the
    MSTAR class list by name, and any non-label file is a chip.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    if layout not in ("synthetic", "mstar"):
        raise ConfigError(f"unknown layout {layout!r}")
    entries, class_names = [], list(MSTAR_CLASSES) if layout == "mstar" else []
    synth_names = {}
    for split_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        split = _split_of(split_dir.name)
        if split is None:
            continue
        for class_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            if layout == "synthetic":
                m = re.fullmatch(r"(\d+)_(.+)", class_dir.name)
                if m is None:
                    log.warning("skipping unrecognised class dir %s", class_dir)
                    continue
                cid = int(m.group(1))
                synth_names[cid] = m.group(2)
            else:
                cid = class_index(class_dir.name)
                if cid is None:
                    log.warning("skipping unrecognised class dir %s", class_dir)
                    continue
            files = sorted(f for f in class_dir.rglob("*")
                           if f.is_file() and not f.name.endswith(LABEL_SUFFIX))
            if layout == "synthetic":
                files = [f for f in files if f.suffix == ".pgm"]
            if not files:
                log.warning("class dir %s is empty", class_dir)
            for f in files:
                label = f.with_name(f.stem + LABEL_SUFFIX) if f.suffix == ".pgm" \
                    else f.with_name(f.name + LABEL_SUFFIX)
                entries.append(ManifestEntry(f.relative_to(root).as_posix(),
                                             label.relative_to(root).as_posix() if label.exists() else "",
                                             cid, split))
    if layout == "synthetic":
        n = max(synth_names, default=-1) + 1
        class_names = [synth_names.get(i, f"class{i}") for i in range(n)]
    entries.sort(key=lambda e: e.path)
    manifest = DatasetManifest(entries, class_names, root)
    if exclusions:
        manifest = apply_exclusions(manifest, exclusions)
    return manifest


MANIFEST_FIELDS = ["path", "label_path", "class_id", "split"]


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for e in manifest.entries:
            w.writerow([e.path, e.label_path, e.class_id, e.split])


def read_manifest(path, class_names: Sequence[str] | None = None) -> DatasetManifest:
    """Manifest CSV; paths are resolved against the CSV's directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise FormatError(f"manifest header {reader.fieldnames} != {MANIFEST_FIELDS}", path=path)
        entries = [ManifestEntry(r["path"], r["label_path"], int(r["class_id"]), r["split"])
                   for r in reader]
    if class_names is None:
        names_file = path.with_name("classes.txt")
        if names_file.exists():
            class_names = names_file.read_text().split()
        else:
            n = max((e.class_id for e in entries), default=0) + 1
            class_names = [f"class{i}" for i in range(n)]
    return DatasetManifest(entries, list(class_names), path.parent)


def center_fit(image: np.ndarray, size: int) -> np.ndarray:
    """Centre-crop (or zero-pad) a ``[1, H, W]`` chip to ``size x size``."""
    _, h, w = image.shape
    out = np.zeros((image.shape[0], size, size))
    sh, sw = max((h - size) // 2, 0), max((w - size) // 2, 0)
    dh, dw = max((size - h) // 2, 0), max((size - w) // 2, 0)
    ch, cw = min(h, size), min(w, size)
    out[:, dh:dh + ch, dw:dw + cw] = image[:, sh:sh + ch, sw:sw + cw]
    return out


def load_samples(manifest: DatasetManifest, split: str | None = None, chip_size: int | None = None,
                 label_policy: dict | None = None) -> list[tuple[ChipRecord, LabelImage]]:
    """Read chips and labels for one split (all splits when ``split`` is None).

    Missing label files are created with :func:`make_label_image`.
    """
    nc = len(manifest.class_names)
    out = []
    for e in manifest.entries:
        if split is not None and e.split != split:
            continue
        chip_path = manifest.root / e.path
        try:
            chip = load_chip_file(chip_path, e.class_id, manifest.class_names)
        except OSError as exc:
            raise FormatError(f"unreadable chip ({exc})", path=chip_path) from None
        chip.class_id = e.class_id
        if e.label_path:
            lab = LabelImage(read_label_pgm(manifest.root / e.label_path), nc)
        else:
            lab = make_label_image(chip, nc, **(label_policy or {}))
        if lab.labels.shape != chip.shape:
            raise DataError(f"label {e.label_path} shape {lab.labels.shape} != chip {chip.shape}")
        if chip_size is not None and chip.shape != (chip_size, chip_size):
            chip = replace(chip, image=center_fit(chip.image, chip_size))
            lab = LabelImage(center_fit(lab.labels[None].astype(np.float64), chip_size)[0]
                             .astype(np.int64), nc)
        out.append((chip, lab))
    return out
