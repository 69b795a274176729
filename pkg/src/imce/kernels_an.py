"""Analog-accelerator emulation: INT8 matrix-vector multiply and im2col Conv2D.

The stored weight matrix is (input length x output length), capped at
4096x512 with both dimensions a multiple of 16; padding rows/cols are zero
and never change results.  Accumulation is exact INT32; the output scaling
runs in FP32 (see quant.requantize_acc_fp32).

The integer matmul is computed through float64 BLAS: every product is at most
127*127 and every partial sum at most 4096*127*127 < 2**27, so all
intermediates are exactly representable and the result is bit-exact integer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, SizeError
from .ir import conv_out_hw
from .quant import QuantParams, dequantize, requantize_acc_fp32, requantize_fp64

MAX_ROWS = 4096  # input-length limit
MAX_COLS = 512  # output-length limit
ALIGN = 16

# (rows*cols, usecs) anchors for matrix-vector latency
_MVM_ANCHORS = [(128 * 128, 0.70), (512 * 512, 2.70), (4096 * 512, 21.60)]


def pad16(n: int) -> int:
    return ((int(n) + ALIGN - 1) // ALIGN) * ALIGN


@dataclass
class AnMatrix:
    """INT8 weight matrix as held by the analog array."""

    data: np.ndarray  # int8 [rows, cols], row-major
    weight_scale: QuantParams

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.int8)
        r, c = self.data.shape
        if r % ALIGN or c % ALIGN:
            raise SizeError(f"matrix dims must be multiples of {ALIGN}, got {r}x{c}")
        if r > MAX_ROWS or c > MAX_COLS:
            raise SizeError(f"matrix {r}x{c} exceeds the {MAX_ROWS}x{MAX_COLS} limit")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Im2colPlan:
    in_shape: tuple[int, int, int]  # [C, H, W]
    kernel: tuple[int, int]
    strides: tuple[int, int]
    pads: tuple[int, int]
    out_hw: tuple[int, int]
    patch_len: int
    n_patches: int

    @classmethod
    def for_conv(cls, in_shape, kernel, strides, pads) -> "Im2colPlan":
        c, h, w = (int(d) for d in in_shape)
        kernel = tuple(int(k) for k in kernel)
        strides = tuple(int(s) for s in strides)
        pads = tuple(int(p) for p in pads)
        oh, ow = conv_out_hw(h, w, kernel, strides, pads)
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv output collapses to {oh}x{ow}")
        return cls(
            in_shape=(c, h, w),
            kernel=kernel,
            strides=strides,
            pads=pads,
            out_hw=(oh, ow),
            patch_len=c * kernel[0] * kernel[1],
            n_patches=oh * ow,
        )


def exact_int_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact integer matmul of small-int operands via float64 BLAS."""
    acc = a.astype(np.float64) @ b.astype(np.float64)
    return acc.astype(np.int64)


def mvm_acc(m: AnMatrix, x: np.ndarray) -> np.ndarray:
    """Raw INT32 accumulator of x (len rows) against the stored matrix."""
    x = np.ascontiguousarray(x, dtype=np.int8)
    if x.ndim != 1 or x.shape[0] != m.rows:
        raise ShapeError(f"input length {x.shape} does not match matrix rows {m.rows}")
    return exact_int_matmul(x[None, :], m.data)[0].astype(np.int32)


def mvm(m: AnMatrix, x: np.ndarray, in_scale: QuantParams, out_scale: QuantParams) -> np.ndarray:
    """INT8 matrix-vector multiply: y_j = sat(round(acc_j * in*w/out))."""
    acc = mvm_acc(m, x)
    mult = np.float32(in_scale.scale) * np.float32(m.weight_scale.scale) / np.float32(out_scale.scale)
    return requantize_acc_fp32(acc, float(mult))


def im2col(x: np.ndarray, plan: Im2colPlan) -> np.ndarray:
    """INT8 [C,H,W] -> [n_patches, patch_len] patch matrix.

    Row p is the flattened receptive field at output position p, ordered
    channel-major then kernel row then kernel col.  Padded positions hold the
    quantized zero (code 0 under the symmetric scheme).
    """
    x = np.ascontiguousarray(x, dtype=np.int8)
    if x.shape != plan.in_shape:
        raise ShapeError(f"input shape {x.shape} does not match plan {plan.in_shape}")
    c, h, w = plan.in_shape
    kh, kw = plan.kernel
    sh, sw = plan.strides
    ph, pw = plan.pads
    oh, ow = plan.out_hw
    xp = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=np.int8)
    xp[:, ph : ph + h, pw : pw + w] = x
    cols = np.empty((c, kh, kw, oh, ow), dtype=np.int8)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, ky, kx] = xp[:, ky : ky + oh * sh : sh, kx : kx + ow * sw : sw]
    return cols.reshape(plan.patch_len, plan.n_patches).T.copy()


def conv2d(
    x: np.ndarray,
    m: AnMatrix,
    bias: np.ndarray | None,
    plan: Im2colPlan,
    out_channels: int,
    in_scale: QuantParams,
    out_scale: QuantParams,
    epilogue: str = "none",
) -> np.ndarray:
    """INT8 Conv2D as a batch of MVMs over im2col patch rows.

    `m` holds (padded patch length x padded out channels); `out_channels` is
    the logical channel count before x16 padding.  Bias (INT32, scale
    in*weight) is added to the accumulator.  Epilogues act on the requantized
    INT8 output: relu clamps negatives, silu dequantizes / x*sigmoid(x) /
    requantizes at the output scale.
    """
    patches = im2col(x, plan)
    if plan.patch_len > m.rows:
        raise ShapeError(f"patch length {plan.patch_len} exceeds matrix rows {m.rows}")
    if patches.shape[1] < m.rows:  # zero-pad patch columns up to the stored rows
        padded = np.zeros((patches.shape[0], m.rows), dtype=np.int8)
        padded[:, : patches.shape[1]] = patches
        patches = padded
    acc = exact_int_matmul(patches, m.data)
    if bias is not None:
        b = np.zeros(m.cols, dtype=np.int64)
        b[: len(bias)] = bias.astype(np.int64)
        acc = acc + b[None, :]
    mult = np.float32(in_scale.scale) * np.float32(m.weight_scale.scale) / np.float32(out_scale.scale)
    y = requantize_acc_fp32(acc.astype(np.int32), float(mult))
    y = y[:, :out_channels]
    y = apply_epilogue(y, out_scale, epilogue)
    oh, ow = plan.out_hw
    return y.T.reshape(out_channels, oh, ow).copy()


def apply_epilogue(y: np.ndarray, out_scale: QuantParams, epilogue: str) -> np.ndarray:
    if epilogue == "none":
        return y
    if epilogue == "relu":
        return np.maximum(y, np.int8(0))
    if epilogue == "silu":
        v = dequantize(y, out_scale.scale, dtype=np.float64)
        with np.errstate(over="ignore"):
            sig = np.float32(1.0) / (np.float32(1.0) + np.exp(-v.astype(np.float32)))
        return requantize_fp64(v * sig.astype(np.float64), out_scale.scale)
    raise ValueError(f"unknown epilogue '{epilogue}'")


def cost_model(fn: str, dims) -> float:
    """Simulated latency in microseconds; reporting only, never correctness.

    MVM latency is piecewise-linear in rows*cols between the measured
    anchors; convolution is n_mvms times the per-MVM latency.
    """
    if fn == "mvm":
        rows, cols = dims
        return _mvm_us(rows * cols)
    if fn == "conv":
        rows, cols, n_mvms = dims
        return n_mvms * _mvm_us(rows * cols)
    raise ValueError(f"unknown An function '{fn}'")


def _mvm_us(product: int) -> float:
    pts = _MVM_ANCHORS
    if product <= pts[0][0]:
        # extrapolate the first segment leftward, floored at a small epsilon
        (x0, y0), (x1, y1) = pts[0], pts[1]
        return max(0.05, y0 + (product - x0) * (y1 - y0) / (x1 - x0))
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if product <= x1:
            return y0 + (product - x0) * (y1 - y0) / (x1 - x0)
    return pts[-1][1]
