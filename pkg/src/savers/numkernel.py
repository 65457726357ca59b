"""Differentiable tensor kernels for the segmentation network.

Tensors are plain float64 numpy arrays laid out ``[C, H, W]``; every spatial
op also accepts a leading batch axis ``[N, C, H, W]`` and returns the same
rank it was given. All functions are pure; dropout takes its generator
explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, CorruptionError, DimensionError


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad_top: int = 0
    pad_bottom: int = 0
    pad_left: int = 0
    pad_right: int = 0

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ConfigError(f"kernel dims must be >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if min(self.pad_top, self.pad_bottom, self.pad_left, self.pad_right) < 0:
            raise ConfigError("pads must be >= 0")

    @classmethod
    def same(cls, k: int) -> "ConvSpec":
        """Stride-1 spec with symmetric padding for odd ``k``."""
        p = (k - 1) // 2
        return cls(k, k, 1, p, p, p, p)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + self.pad_top + self.pad_bottom - self.kernel_h) // self.stride + 1
        ow = (w + self.pad_left + self.pad_right - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1 or h + self.pad_top + self.pad_bottom < self.kernel_h \
                or w + self.pad_left + self.pad_right < self.kernel_w:
            raise DimensionError(f"input {h}x{w} too small for {self}")
        return oh, ow

    def transposed_output_size(self, h: int, w: int) -> tuple[int, int]:
        oh = (h - 1) * self.stride + self.kernel_h - self.pad_top - self.pad_bottom
        ow = (w - 1) * self.stride + self.kernel_w - self.pad_left - self.pad_right
        if oh < 1 or ow < 1:
            raise DimensionError(f"transposed output {oh}x{ow} is empty for input {h}x{w} and {self}")
        return oh, ow


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def _unbatch(x: np.ndarray, single: bool) -> np.ndarray:
    return x[0] if single else x


def _pad(x4: np.ndarray, spec: ConvSpec) -> np.ndarray:
    if not (spec.pad_top or spec.pad_bottom or spec.pad_left or spec.pad_right):
        return x4
    return np.pad(x4, ((0, 0), (0, 0), (spec.pad_top, spec.pad_bottom),
                       (spec.pad_left, spec.pad_right)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # [N, C, OH, OW, kh, kw] view, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :oh, :ow]


def im2col(x4: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Patch matrix ``[C*kh*kw, N*OH*OW]`` of a padded ``[N, C, H, W]`` batch."""
    n, c = x4.shape[:2]
    oh, ow = spec.output_size(*x4.shape[2:])
    xt = _pad(x4, spec).transpose(1, 0, 2, 3)
    kh, kw, s = spec.kernel_h, spec.kernel_w, spec.stride
    cols = np.empty((c, kh, kw, n, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s]
    return cols.reshape(c * kh * kw, n * oh * ow)


def _check_conv(x4, kernels, spec):
    if kernels.ndim != 4 or kernels.shape[1] != x4.shape[1] \
            or kernels.shape[2:] != (spec.kernel_h, spec.kernel_w):
        raise DimensionError(f"input {x4.shape[1:]} incompatible with kernels {kernels.shape} "
                             f"for {spec.kernel_h}x{spec.kernel_w} spec")


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, spec: ConvSpec,
           cols: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlation of ``x`` with ``kernels[F, C, kh, kw]`` plus per-filter bias.

    ``cols`` may carry a precomputed :func:`im2col` of ``x``.
    """
    x4, single = _batched(x)
    kernels = np.asarray(kernels, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    _check_conv(x4, kernels, spec)
    if bias.shape != (kernels.shape[0],):
        raise DimensionError(f"bias {bias.shape} does not match kernels {kernels.shape}")
    n = x4.shape[0]
    oh, ow = spec.output_size(*x4.shape[2:])
    if cols is None:
        cols = im2col(x4, spec)
    out = kernels.reshape(kernels.shape[0], -1) @ cols  # F, N*OH*OW
    out = out.reshape(-1, n, oh, ow).transpose(1, 0, 2, 3) + bias[None, :, None, None]
    return _unbatch(np.ascontiguousarray(out), single)


def _col2im(cols: np.ndarray, padded_shape: tuple, spec: ConvSpec) -> np.ndarray:
    # cols: [kh, kw, N, C, OH, OW]; scatter-add each kernel tap back to the padded input
    kh, kw, n, c, oh, ow = cols.shape
    s = spec.stride
    out = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += cols[i, j]
    return out


def _crop(xp: np.ndarray, spec: ConvSpec, h: int, w: int) -> np.ndarray:
    return xp[:, :, spec.pad_top:spec.pad_top + h, spec.pad_left:spec.pad_left + w]


def conv2d_backward(grad_out, cached_input, kernels, spec: ConvSpec,
                    cols: np.ndarray | None = None, need_input_grad: bool = True):
    """Gradients of :func:`conv2d` w.r.t. input, kernels and bias.

    ``grad_input`` is ``None`` when ``need_input_grad`` is false.
    """
    x4, single = _batched(cached_input)
    g4, _ = _batched(grad_out)
    kernels = np.asarray(kernels, dtype=np.float64)
    f, c, kh, kw = kernels.shape
    oh, ow = spec.output_size(*x4.shape[2:])
    if g4.shape != (x4.shape[0], f, oh, ow):
        raise DimensionError(f"grad_out {g4.shape} does not match forward output "
                             f"{(x4.shape[0], f, oh, ow)}")
    if cols is None:
        cols = im2col(x4, spec)
    gmat = g4.transpose(1, 0, 2, 3).reshape(f, -1)
    grad_k = (gmat @ cols.T).reshape(kernels.shape)
    grad_b = g4.sum(axis=(0, 2, 3))
    if not need_input_grad:
        return None, grad_k, grad_b
    hp = x4.shape[2] + spec.pad_top + spec.pad_bottom
    wp = x4.shape[3] + spec.pad_left + spec.pad_right
    if spec.stride == 1:
        # full correlation with the flipped kernel
        full = np.pad(g4, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        flipped = kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        grad_xp = conv2d(full, flipped, np.zeros(c), ConvSpec(kh, kw))
        grad_xp = np.pad(grad_xp, ((0, 0), (0, 0), (0, hp - grad_xp.shape[2]),
                                   (0, wp - grad_xp.shape[3])))
    else:
        tap = np.tensordot(kernels, g4, axes=([0], [1]))  # C, kh, kw, N, OH, OW
        tap = np.ascontiguousarray(tap.transpose(1, 2, 3, 0, 4, 5))
        grad_xp = _col2im(tap, (x4.shape[0], c, hp, wp), spec)
    grad_x = np.ascontiguousarray(_crop(grad_xp, spec, *x4.shape[2:]))
    return _unbatch(grad_x, single), grad_k, grad_b


def transposed_conv2d(x: np.ndarray, kernels: np.ndarray, spec: ConvSpec,
                      output_size: tuple[int, int] | None = None) -> np.ndarray:
    """Fractionally strided convolution with ``kernels[C, F, kh, kw]``.

    Each input pixel stamps its kernel-weighted copy onto the output at
    ``stride`` spacing; the pads are then cropped off. This is the adjoint of
    :func:`conv2d` under the same spec. With stride > 1 several forward input
    sizes map to the same conv output; ``output_size`` picks one of them
    (the extra trailing rows/cols receive no contributions).
    """
    x4, single = _batched(x)
    kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim != 4 or kernels.shape[0] != x4.shape[1] \
            or kernels.shape[2:] != (spec.kernel_h, spec.kernel_w):
        raise DimensionError(f"input {x4.shape[1:]} incompatible with transposed kernels "
                             f"{kernels.shape}")
    n, c, h, w = x4.shape
    oh, ow = _transposed_size(spec, h, w, output_size)
    s, kh, kw = spec.stride, spec.kernel_h, spec.kernel_w
    full = np.zeros((n, kernels.shape[1], max((h - 1) * s + kh, spec.pad_top + oh),
                     max((w - 1) * s + kw, spec.pad_left + ow)))
    for i in range(h):
        for j in range(w):
            full[:, :, i * s:i * s + kh, j * s:j * s + kw] += \
                np.tensordot(x4[:, :, i, j], kernels, axes=([1], [0]))
    out = full[:, :, spec.pad_top:spec.pad_top + oh, spec.pad_left:spec.pad_left + ow]
    return _unbatch(np.ascontiguousarray(out), single)


def _transposed_size(spec, h, w, output_size):
    oh, ow = spec.transposed_output_size(h, w)
    if output_size is None:
        return oh, ow
    th, tw = output_size
    if not (oh <= th < oh + spec.stride and ow <= tw < ow + spec.stride):
        raise DimensionError(f"output_size {output_size} unreachable from input {h}x{w} "
                             f"(base {oh}x{ow}, stride {spec.stride})")
    return th, tw


def transposed_conv2d_backward(grad_out, cached_input, kernels, spec: ConvSpec):
    """Gradients of :func:`transposed_conv2d` w.r.t. input and kernels."""
    x4, single = _batched(cached_input)
    g4, _ = _batched(grad_out)
    kernels = np.asarray(kernels, dtype=np.float64)
    c, f, kh, kw = kernels.shape
    oh, ow = _transposed_size(spec, *x4.shape[2:], g4.shape[2:])
    if g4.shape != (x4.shape[0], f, oh, ow):
        raise DimensionError(f"grad_out {g4.shape} does not match forward output "
                             f"{(x4.shape[0], f, oh, ow)}")
    grad_x = conv2d(g4, kernels, np.zeros(c), spec)
    if grad_x.shape != x4.shape:
        raise DimensionError(f"transposed geometry does not invert: {grad_x.shape} vs {x4.shape}")
    win = _windows(_pad(g4, spec), kh, kw, spec.stride, *x4.shape[2:])
    grad_k = np.tensordot(x4, win, axes=([0, 2, 3], [0, 2, 3]))  # C, F, kh, kw
    return _unbatch(grad_x, single), grad_k


def maxpool2(x: np.ndarray):
    """2x2 stride-2 max pooling.

    Returns the pooled tensor and, per output cell, the row-major index (0..3)
    of the winning element; ties go to the first index.
    """
    x4, single = _batched(x)
    n, c, h, w = x4.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x4.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return _unbatch(out, single), _unbatch(idx, single)


def maxpool2_backward(grad_out, argmax_indices, input_shape) -> np.ndarray:
    g4, single = _batched(grad_out)
    idx = np.asarray(argmax_indices)
    if single:
        idx = idx[None]
    if idx.shape != g4.shape:
        raise CorruptionError(f"argmax indices {idx.shape} do not match grad {g4.shape}")
    if idx.size and (idx.min() < 0 or idx.max() > 3):
        raise CorruptionError("argmax index outside 2x2 window")
    shape4 = (1, *input_shape) if single else tuple(input_shape)
    n, c, h, w = shape4
    if (h // 2, w // 2) != g4.shape[2:]:
        raise CorruptionError(f"input shape {tuple(input_shape)} inconsistent with grad {g4.shape}")
    onehot = (idx[..., None] == np.arange(4)) * g4[..., None]  # N, C, H/2, W/2, 4
    grad = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return _unbatch(grad.reshape(n, c, h, w).astype(np.float64), single)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(grad_out, cached_input) -> np.ndarray:
    # subgradient 0 at exactly 0
    return np.where(np.asarray(cached_input) > 0, grad_out, 0.0)


def dropout(x: np.ndarray, rate: float, mode: str = "train",
            rng: np.random.Generator | None = None):
    """Inverted dropout. Returns ``(output, keep_mask)``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if mode == "eval" or rate == 0.0:
        return x.copy(), np.ones(x.shape, dtype=bool)
    if mode != "train":
        raise ConfigError(f"unknown dropout mode {mode!r}")
    if rng is None:
        raise ConfigError("train-mode dropout needs an explicit generator")
    keep = rng.random(x.shape) >= rate
    return np.where(keep, x / (1.0 - rate), 0.0), keep


def dropout_backward(grad_out, mask, rate: float) -> np.ndarray:
    return np.where(mask, np.asarray(grad_out) / (1.0 - rate), 0.0)


def avgpool(x: np.ndarray) -> np.ndarray:
    """Global average pool over the spatial axes, keeping them as size 1."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (3, 4):
        raise DimensionError(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")
    return x.mean(axis=(-2, -1), keepdims=True)


def avgpool_backward(grad_out, input_shape) -> np.ndarray:
    h, w = input_shape[-2:]
    return np.broadcast_to(np.asarray(grad_out) / (h * w), input_shape).copy()


def softmax(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Softmax along the class axis with max subtraction."""
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax_backward(grad_out, probs, axis: int = 0) -> np.ndarray:
    dot = (grad_out * probs).sum(axis=axis, keepdims=True)
    return probs * (grad_out - dot)


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tolerance: float
    checked: int
    kink_excluded: int
    per_input: list[float] = field(default_factory=list)

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"{status}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.0e}), "
                f"{self.checked} components, {self.kink_excluded} kink-excluded")


def grad_check(fn: Callable[..., np.ndarray], inputs: Sequence[np.ndarray],
               grad_fn: Callable[..., Sequence[np.ndarray]], step: float = 1e-5,
               tolerance: float = 1e-6, wrt: Sequence[int] | None = None,
               seed: int = 0, kink_threshold: float = 1e-2) -> GradCheckReport:
    """Compare ``grad_fn`` against central differences of ``fn``.

    The output is scalarized as ``sum(w * fn(*inputs))`` with fixed random
    weights ``w``; ``grad_fn(w, *inputs)`` must return one gradient per input.
    A component is kink-excluded when its one-sided differences disagree by
    more than ``kink_threshold`` (non-differentiable point such as relu at 0
    or a pooling tie); excluded components never count as failures.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    out = np.asarray(fn(*inputs), dtype=np.float64)
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    analytic = grad_fn(weights, *inputs)
    wrt = range(len(inputs)) if wrt is None else wrt

    def scalar():
        return float((np.asarray(fn(*inputs)) * weights).sum())

    base = scalar()
    worst, checked, kinks, per_input = 0.0, 0, 0, []
    for k in wrt:
        a = np.asarray(analytic[k], dtype=np.float64)
        if a.shape != inputs[k].shape:
            raise DimensionError(f"analytic grad {a.shape} vs input {inputs[k].shape}")
        flat, aflat = inputs[k].reshape(-1), a.reshape(-1)
        floor = 1e-8 * max(1.0, float(np.abs(aflat).max(initial=0.0)))
        local = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = scalar()
            flat[i] = orig - step
            down = scalar()
            flat[i] = orig
            fwd, bwd = (up - base) / step, (base - down) / step
            if abs(fwd - bwd) > kink_threshold * max(1.0, abs(fwd), abs(bwd)):
                kinks += 1
                continue
            num = (up - down) / (2 * step)
            err = abs(num - aflat[i]) / max(abs(num), abs(aflat[i]), floor)
            local = max(local, err)
            checked += 1
        per_input.append(local)
        worst = max(worst, local)
    return GradCheckReport(worst, worst < tolerance, tolerance, checked, kinks, per_input)
