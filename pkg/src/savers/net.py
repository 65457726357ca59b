"""Encoder/decoder segmentation network with coarse and fine heads.

The encoder is four VGG-style blocks (two 3x3 convs + ReLU, then 2x2 max
pool), a 4x4 conv with ReLU and dropout, and a 1x1 classifier producing one
logit per class on a grid downsampled 16x. The decoder is a single stride-16
transposed conv back to pixel resolution. Average pooling the grid gives the
chip-level (coarse) decision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from . import numkernel as nk
from .errors import ConfigError, DimensionError
from .numkernel import ConvSpec

GRID = 16

CONV3 = ConvSpec.same(3)
# 1 before / 2 after keeps the 4x4 conv output the same size as its input
CONV4 = ConvSpec(4, 4, 1, 1, 2, 1, 2)
CONV1 = ConvSpec(1, 1)
DECONV = ConvSpec(32, 32, 16, 8, 8, 8, 8)


@dataclass(frozen=True)
class SaversConfig:
    num_classes: int = 11
    block_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    mid_channels: int = 256
    dropout_rate: float = 0.5
    input_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.block_channels) != 4:
            raise ConfigError(f"block_channels needs 4 entries, got {self.block_channels}")
        if min(*self.block_channels, self.mid_channels, self.input_channels) < 1:
            raise ConfigError("channel counts must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "block_channels": list(self.block_channels),
            "mid_channels": self.mid_channels,
            "dropout_rate": self.dropout_rate,
            "input_channels": self.input_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SaversConfig":
        unknown = set(d) - {"num_classes", "block_channels", "mid_channels",
                            "dropout_rate", "input_channels"}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_ch: int
    out_ch: int
    conv: ConvSpec
    transposed: bool = False

    @property
    def weight_shape(self) -> tuple[int, ...]:
        k = (self.conv.kernel_h, self.conv.kernel_w)
        return (self.in_ch, self.out_ch, *k) if self.transposed else (self.out_ch, self.in_ch, *k)

    @property
    def has_bias(self) -> bool:
        return not self.transposed


def layer_specs(config: SaversConfig) -> list[LayerSpec]:
    layers = []
    c = config.input_channels
    for b, width in enumerate(config.block_channels, start=1):
        layers.append(LayerSpec(f"block{b}.conv1", c, width, CONV3))
        layers.append(LayerSpec(f"block{b}.conv2", width, width, CONV3))
        c = width
    layers.append(LayerSpec("mid", c, config.mid_channels, CONV4))
    layers.append(LayerSpec("classifier", config.mid_channels, config.num_classes, CONV1))
    layers.append(LayerSpec("decoder", config.num_classes, config.num_classes, DECONV,
                            transposed=True))
    return layers


def bilinear_kernel(size: int) -> np.ndarray:
    factor = (size + 1) // 2
    center = factor - 1 if size % 2 == 1 else factor - 0.5
    og = np.arange(size)
    filt = 1 - np.abs(og - center) / factor
    return np.outer(filt, filt)


@dataclass
class SaversModel:
    config: SaversConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = {}
        for layer in layer_specs(self.config):
            expected[f"{layer.name}.weight"] = layer.weight_shape
            if layer.has_bias:
                expected[f"{layer.name}.bias"] = (layer.out_ch,)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigError(f"parameter names do not match config (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            p = self.params[name]
            if p.shape != shape:
                raise ConfigError(f"parameter {name} has shape {p.shape}, config expects {shape}")
            if not np.all(np.isfinite(p)):
                raise ConfigError(f"parameter {name} contains non-finite values")

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "SaversModel":
        return SaversModel(self.config, {k: v.copy() for k, v in self.params.items()})


def build_model(config: SaversConfig, seed) -> SaversModel:
    """He-initialized convs, bilinear decoder, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for layer in layer_specs(config):
        if layer.transposed:
            w = np.zeros(layer.weight_shape)
            k = bilinear_kernel(layer.conv.kernel_h)
            for c in range(layer.in_ch):
                w[c, c] = k
            params[f"{layer.name}.weight"] = w
            continue
        fan_in = layer.in_ch * layer.conv.kernel_h * layer.conv.kernel_w
        params[f"{layer.name}.weight"] = rng.standard_normal(layer.weight_shape) * math.sqrt(2.0 / fan_in)
        params[f"{layer.name}.bias"] = np.zeros(layer.out_ch)
    return SaversModel(config, params)


def _check_grid(x4: np.ndarray):
    h, w = x4.shape[-2:]
    if h % GRID or w % GRID:
        raise DimensionError(f"image {h}x{w} is not a multiple of {GRID}; pass it through pad_to_grid first")


def _as_batch(image) -> tuple[np.ndarray, bool]:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        return x[None, None], True
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected [H,W], [C,H,W] or [N,C,H,W] image, got {x.shape}")


class Tape:
    """Backward closures recorded by :func:`forward`, replayed in reverse."""

    def __init__(self):
        self.steps = []

    def record(self, fn):
        self.steps.append(fn)

    def backward(self, grad_scores: np.ndarray) -> dict:
        grads = {}
        g = grad_scores
        for fn in reversed(self.steps):
            g = fn(g, grads)
        return grads


def forward(model: SaversModel, x: np.ndarray, train: bool = False,
            rng: np.random.Generator | None = None, tape: Tape | None = None):
    """Run encoder and decoder on a ``[N, C, H, W]`` batch.

    Returns ``(scores, logit_grid)``. When ``tape`` is given the backward
    closures are recorded on it.
    """
    p = model.params
    if x.ndim != 4 or x.shape[1] != model.config.input_channels:
        raise DimensionError(f"expected [N,{model.config.input_channels},H,W] batch, got {x.shape}")
    _check_grid(x)
    h = x
    rec = tape.record if tape is not None else (lambda fn: None)

    def conv_relu(h, name, spec, first=False):
        w, b = p[f"{name}.weight"], p[f"{name}.bias"]
        cols = nk.im2col(h, spec)
        z = nk.conv2d(h, w, b, spec, cols=cols)

        def back(g, grads):
            g = nk.relu_backward(g, z)
            gx, gw, gb = nk.conv2d_backward(g, h, w, spec, cols=cols, need_input_grad=not first)
            grads[f"{name}.weight"], grads[f"{name}.bias"] = gw, gb
            return gx
        rec(back)
        return nk.relu(z)

    for b in range(1, 5):
        h = conv_relu(h, f"block{b}.conv1", CONV3, first=b == 1)
        h = conv_relu(h, f"block{b}.conv2", CONV3)
        shape = h.shape
        h, idx = nk.maxpool2(h)
        rec(lambda g, grads, idx=idx, shape=shape: nk.maxpool2_backward(g, idx, shape))

    h = conv_relu(h, "mid", CONV4)
    rate = model.config.dropout_rate
    h, mask = nk.dropout(h, rate, "train" if train else "eval", rng)
    rec(lambda g, grads: nk.dropout_backward(g, mask, rate))

    feats = h
    wc, bc = p["classifier.weight"], p["classifier.bias"]
    grid = nk.conv2d(feats, wc, bc, CONV1)

    def classifier_back(g, grads):
        gx, gw, gb = nk.conv2d_backward(g, feats, wc, CONV1)
        grads["classifier.weight"], grads["classifier.bias"] = gw, gb
        return gx
    rec(classifier_back)

    scores = decode_batch(model, grid)
    wd = p["decoder.weight"]

    def decoder_back(g, grads):
        gx, gw = nk.transposed_conv2d_backward(g, grid, wd, DECONV)
        grads["decoder.weight"] = gw
        return gx
    rec(decoder_back)
    return scores, grid


def decode_batch(model: SaversModel, grid: np.ndarray) -> np.ndarray:
    return nk.transposed_conv2d(grid, model.params["decoder.weight"], DECONV)


def encode(model: SaversModel, image) -> np.ndarray:
    """Per-cell class logits, shape ``[N_c, H/16, W/16]`` (batch kept if given)."""
    x, single = _as_batch(image)
    _, grid = forward(model, x)
    return grid[0] if single else grid


def decode(model: SaversModel, logit_grid) -> np.ndarray:
    g = np.asarray(logit_grid, dtype=np.float64)
    if g.shape[-3] != model.config.num_classes:
        raise DimensionError(f"grid has {g.shape[-3]} channels, model has {model.config.num_classes} classes")
    return decode_batch(model, g)


@dataclass
class CropRecord:
    height: int
    width: int

    def crop(self, a: np.ndarray) -> np.ndarray:
        return a[..., :self.height, :self.width]


def pad_to_grid(image) -> tuple[np.ndarray, CropRecord]:
    """Reflect-pad bottom/right to the next multiple of 16."""
    x = np.asarray(image, dtype=np.float64)
    h, w = x.shape[-2:]
    if h < 1 or w < 1:
        raise DimensionError(f"image must be at least 1x1, got {h}x{w}")
    ph, pw = -h % GRID, -w % GRID
    if ph or pw:
        pads = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
        x = np.pad(x, pads, mode="reflect")
    return x, CropRecord(h, w)


@dataclass
class CoarseResult:
    logit_grid: np.ndarray
    pooled_logits: np.ndarray
    pooled_probs: np.ndarray
    predicted_class: int

    @property
    def cell_predictions(self) -> np.ndarray:
        return self.logit_grid.argmax(axis=0)

    @property
    def background_prob(self) -> float:
        return float(self.pooled_probs[0])


def coarse_from_grid(grid: np.ndarray) -> CoarseResult:
    pooled = nk.avgpool(grid)[:, 0, 0]
    probs = nk.softmax(pooled)
    return CoarseResult(grid, pooled, probs, int(probs.argmax()))


def coarse_segment(model: SaversModel, image) -> CoarseResult:
    x, _ = pad_to_grid(image)
    return coarse_from_grid(encode(model, x))


def coarse_segment_batch(model: SaversModel, images: np.ndarray) -> list[CoarseResult]:
    """Coarse results for a ``[N, C, H, W]`` batch already on the grid."""
    _, grid = forward(model, images)
    return [coarse_from_grid(g) for g in grid]


def window_average(grid: np.ndarray, window: tuple[int, int]) -> np.ndarray:
    """Stride-1 'valid' average of the cell grid over ``window`` cells.

    Intermediate aggregation between per-cell and global pooling, used for
    cell-accuracy maps.
    """
    wh, ww = window
    if wh < 1 or ww < 1 or wh > grid.shape[-2] or ww > grid.shape[-1]:
        raise DimensionError(f"window {window} does not fit grid {grid.shape[-2:]}")
    return sliding_window_view(grid, (wh, ww), axis=(-2, -1)).mean(axis=(-2, -1))


@dataclass
class FineResult:
    score_map: np.ndarray
    label_map: np.ndarray


def fine_segment(model: SaversModel, image) -> FineResult:
    """Per-pixel scores and labels at the input's own resolution (eval mode)."""
    x, crop = pad_to_grid(image)
    xb, _ = _as_batch(x)
    scores, _ = forward(model, xb)
    scores = np.ascontiguousarray(crop.crop(scores[0]))
    return FineResult(scores, scores.argmax(axis=0))


def segment(model: SaversModel, image) -> tuple[CoarseResult, FineResult]:
    """Coarse and fine outputs from a single forward pass."""
    x, crop = pad_to_grid(image)
    xb, _ = _as_batch(x)
    scores, grid = forward(model, xb)
    scores = np.ascontiguousarray(crop.crop(scores[0]))
    return coarse_from_grid(grid[0]), FineResult(scores, scores.argmax(axis=0))


# class index -> RGB; index 0 (background) is never drawn
PALETTE = np.array([
    [0.0, 0.0, 0.0],
    [0.894, 0.102, 0.110],
    [0.216, 0.494, 0.722],
    [0.302, 0.686, 0.290],
    [0.596, 0.306, 0.639],
    [1.000, 0.498, 0.000],
    [1.000, 1.000, 0.200],
    [0.651, 0.337, 0.157],
    [0.969, 0.506, 0.749],
    [0.000, 0.808, 0.820],
    [0.600, 0.600, 0.600],
])


def class_color(class_id: int) -> np.ndarray:
    if class_id < len(PALETTE):
        return PALETTE[class_id]
    # deterministic fallback for large class counts
    return np.random.default_rng(class_id).uniform(0.2, 1.0, 3)


def colorize(label_map: np.ndarray) -> np.ndarray:
    """RGB rendering of a label map; background is black."""
    out = np.zeros((*label_map.shape, 3))
    for c in np.unique(label_map):
        if c:
            out[label_map == c] = class_color(int(c))
    return out


def _to_rgb(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim == 2:
        return np.repeat(img[..., None], 3, axis=-1)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img.copy()
    raise DimensionError(f"cannot render image of shape {img.shape}")


def overlay(image: np.ndarray, label_map: np.ndarray) -> np.ndarray:
    rgb = _to_rgb(image)
    if rgb.shape[:2] != label_map.shape:
        raise DimensionError(f"image {rgb.shape[:2]} and label map {label_map.shape} differ")
    for c in np.unique(label_map):
        if c:
            rgb[label_map == c] = class_color(int(c))
    return rgb


def composite_output(image, fine: FineResult, coarse: CoarseResult | None = None):
    """Returns ``(coarse_map, fine_map, composite)`` as RGB arrays.

    ``coarse_map`` is the per-cell argmax at cell resolution (``None`` when no
    coarse result is given); ``composite`` is the grayscale input with every
    non-background pixel painted in its class colour.
    """
    coarse_map = colorize(coarse.cell_predictions) if coarse is not None else None
    return coarse_map, colorize(fine.label_map), overlay(image, fine.label_map)


@dataclass
class DetectedTarget:
    class_id: int
    pixel_mask: frozenset
    centroid: tuple[float, float]
    pixel_count: int


EIGHT = np.ones((3, 3), dtype=bool)


def detect_targets(fine: FineResult | np.ndarray, min_pixels: int = 8) -> list[DetectedTarget]:
    """8-connected same-class components of the non-background label map."""
    labels = fine.label_map if isinstance(fine, FineResult) else np.asarray(fine)
    found = []
    for c in np.unique(labels):
        if c == 0:
            continue
        comp, n = ndimage.label(labels == c, structure=EIGHT)
        for k in range(1, n + 1):
            rows, cols = np.nonzero(comp == k)
            if rows.size < min_pixels:
                continue
            found.append(DetectedTarget(
                int(c), frozenset(zip(rows.tolist(), cols.tolist())),
                (float(rows.mean()), float(cols.mean())), int(rows.size)))
    found.sort(key=lambda t: (-t.pixel_count, t.centroid))
    return found
