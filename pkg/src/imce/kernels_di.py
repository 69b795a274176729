"""Digital-accelerator emulation: elementwise ops, pooling, concat/split.

All kernels take and return INT8 codes.  Internally they dequantize, compute
at a higher dynamic range (FP64, except the sigmoid inside SiLU which runs in
FP32), and requantize with round-half-away-from-zero.  MaxPool short-circuits
to direct code comparison when input and output scales are equal, since the
code-to-value map is monotone.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ScaleMismatchError, ShapeError
from .ir import conv_out_hw
from .quant import QMIN, QuantParams, dequantize, requantize_fp64

# (function, bytes, usecs) latency anchors; latency is linear in bytes
_DI_ANCHORS = {
    "add": (16 * 1024, 55.0),
    "relu": (16 * 1024, 55.0),
    "sigmoid": (16 * 1024, 54.7),
    "mul": (16 * 1024, 55.0),
    "silu": (16 * 1024, 54.7),
    "concat": (256 * 1024, 244.5),
    "split": (256 * 1024, 244.5),
    "maxpool": (128 * 20 * 20, 8900.0),
    "avgpool": (128 * 20 * 20, 15900.0),
}


@dataclass(frozen=True)
class PoolSpec:
    kind: str  # "max" | "avg"
    window: tuple[int, int]
    strides: tuple[int, int]
    pads: tuple[int, int]

    def __post_init__(self):
        if self.kind not in ("max", "avg"):
            raise ValueError(f"unknown pool kind '{self.kind}'")
        if self.window[0] < 1 or self.window[1] < 1:
            raise ShapeError(f"pool window must be >= 1, got {self.window}")


def add(
    a: np.ndarray,
    b: np.ndarray,
    a_scale: QuantParams,
    b_scale: QuantParams,
    out_scale: QuantParams,
    relu: bool = False,
) -> np.ndarray:
    """Elementwise INT8 addition with optional fused ReLU."""
    a = np.asarray(a, dtype=np.int8)
    b = np.asarray(b, dtype=np.int8)
    if a.shape != b.shape:
        raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}")
    v = dequantize(a, a_scale.scale, np.float64) + dequantize(b, b_scale.scale, np.float64)
    y = requantize_fp64(v, out_scale.scale)
    if relu:
        y = np.maximum(y, np.int8(0))
    return y


def silu(x: np.ndarray, in_scale: QuantParams, out_scale: QuantParams) -> np.ndarray:
    """y = requant(v * sigmoid(v)); the sigmoid itself is evaluated in FP32."""
    v = dequantize(np.asarray(x, dtype=np.int8), in_scale.scale, np.float64)
    with np.errstate(over="ignore"):  # exp overflow to inf still yields sigmoid 0
        sig = np.float32(1.0) / (np.float32(1.0) + np.exp(-v.astype(np.float32)))
    return requantize_fp64(v * sig.astype(np.float64), out_scale.scale)


def relu(x: np.ndarray, in_scale: QuantParams, out_scale: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.int8)
    if in_scale.scale == out_scale.scale:
        return np.maximum(x, np.int8(0))
    v = np.maximum(dequantize(x, in_scale.scale, np.float64), 0.0)
    return requantize_fp64(v, out_scale.scale)


def sigmoid(x: np.ndarray, in_scale: QuantParams, out_scale: QuantParams) -> np.ndarray:
    v = dequantize(np.asarray(x, dtype=np.int8), in_scale.scale, np.float64)
    with np.errstate(over="ignore"):
        sig = np.float32(1.0) / (np.float32(1.0) + np.exp(-v.astype(np.float32)))
    return requantize_fp64(sig.astype(np.float64), out_scale.scale)


def mul(
    a: np.ndarray,
    b: np.ndarray,
    a_scale: QuantParams,
    b_scale: QuantParams,
    out_scale: QuantParams,
) -> np.ndarray:
    a = np.asarray(a, dtype=np.int8)
    b = np.asarray(b, dtype=np.int8)
    if a.shape != b.shape:
        raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}")
    v = dequantize(a, a_scale.scale, np.float64) * dequantize(b, b_scale.scale, np.float64)
    return requantize_fp64(v, out_scale.scale)


def pool(
    x: np.ndarray,
    spec: PoolSpec,
    in_scale: QuantParams,
    out_scale: QuantParams,
) -> np.ndarray:
    """Windowed max/average pooling over an INT8 [C,H,W] tensor.

    Average pooling sums in INT32 and divides by the full window size (pad
    zeros included), matching the analog-side convolution lowering.
    """
    x = np.asarray(x, dtype=np.int8)
    if x.ndim != 3:
        raise ShapeError(f"pool input must be [C,H,W], got shape {x.shape}")
    c, h, w = x.shape
    kh, kw = spec.window
    sh, sw = spec.strides
    ph, pw = spec.pads
    oh, ow = conv_out_hw(h, w, spec.window, spec.strides, spec.pads)
    if oh < 1 or ow < 1:
        raise ShapeError(f"pool output collapses to {oh}x{ow}")

    if spec.kind == "max":
        pad_val = np.int8(QMIN - 1)  # -128: below every producible code
        xp = np.full((c, h + 2 * ph, w + 2 * pw), pad_val, dtype=np.int8)
        xp[:, ph : ph + h, pw : pw + w] = x
        out = np.empty((c, oh, ow), dtype=np.int8)
        for oy in range(oh):
            for ox in range(ow):
                win = xp[:, oy * sh : oy * sh + kh, ox * sw : ox * sw + kw]
                out[:, oy, ox] = win.max(axis=(1, 2))
        if in_scale.scale == out_scale.scale:
            return out
        v = dequantize(out, in_scale.scale, np.float64)
        return requantize_fp64(v, out_scale.scale)

    xp = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=np.int8)
    xp[:, ph : ph + h, pw : pw + w] = x
    acc = np.empty((c, oh, ow), dtype=np.int32)
    for oy in range(oh):
        for ox in range(ow):
            win = xp[:, oy * sh : oy * sh + kh, ox * sw : ox * sw + kw]
            acc[:, oy, ox] = win.astype(np.int32).sum(axis=(1, 2))
    mean = acc.astype(np.float64) * np.float64(in_scale.scale) / np.float64(kh * kw)
    return requantize_fp64(mean, out_scale.scale)


def concat(parts: list[np.ndarray], axis: int, scales: list[QuantParams]) -> np.ndarray:
    """Join INT8 tensors along an axis; all parts must share one scale."""
    if not parts:
        raise ShapeError("concat needs at least one part")
    ref = scales[0].scale
    for i, s in enumerate(scales):
        if s.scale != ref:
            raise ScaleMismatchError(f"concat part {i} has scale {s.scale}, expected {ref}")
    arrs = [np.asarray(p, dtype=np.int8) for p in parts]
    nd = arrs[0].ndim
    for i, a in enumerate(arrs[1:], 1):
        if a.ndim != nd or any(a.shape[d] != arrs[0].shape[d] for d in range(nd) if d != axis):
            raise ShapeError(f"concat part {i} shape {a.shape} mismatches {arrs[0].shape} off axis {axis}")
    return np.ascontiguousarray(np.concatenate(arrs, axis=axis))


def split(x: np.ndarray, axis: int, sizes: list[int]) -> list[np.ndarray]:
    """Slice an INT8 tensor into contiguous parts along an axis."""
    x = np.asarray(x, dtype=np.int8)
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not sum to dim {x.shape[axis]} on axis {axis}")
    out = []
    off = 0
    for sz in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(off, off + sz)
        out.append(np.ascontiguousarray(x[tuple(sl)]))
        off += sz
    return out


def cost_model_di(fn: str, nbytes: int) -> float:
    """Linear-in-bytes latency in microseconds, anchored per function."""
    try:
        ref_bytes, ref_us = _DI_ANCHORS[fn]
    except KeyError:
        raise ValueError(f"unknown Di function '{fn}'") from None
    return nbytes * ref_us / ref_bytes
