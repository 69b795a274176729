"""Symmetric INT8 quantization arithmetic.

Every kernel and every oracle in this project must agree bit-for-bit, so the
numeric contract is pinned here once:

  * per-tensor symmetric scheme: zero_point == 0, codes in [-127, 127]
    (-128 is never produced);
  * rounding is half-away-from-zero;
  * analog-side requantization of INT32 accumulators runs the scaling in
    FP32 (the accelerator scales in FP32);
  * digital-side elementwise ops dequantize/compute/requantize in FP64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

QMIN = -127
QMAX = 127
FULL_SCALE = 127  # |code| ceiling used by the noise model


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor scale for symmetric INT8 quantization (zero_point fixed at 0)."""

    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if self.zero_point != 0:
            raise ValueError("symmetric scheme requires zero_point == 0")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")


def round_half_away(x) -> np.ndarray:
    """Round to nearest with halves going away from zero (np.round ties to even).

    The computation stays in the caller's float width so FP32 and FP64 call
    sites round in their own precision.
    """
    x = np.asarray(x)
    half = np.asarray(0.5, dtype=x.dtype)
    return np.sign(x) * np.floor(np.abs(x) + half)


_rha = round_half_away


def saturate_int8(q: np.ndarray) -> np.ndarray:
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def quantize_fp32(values: np.ndarray, scale: float) -> np.ndarray:
    """FP32 tensor -> INT8 codes under the symmetric scheme."""
    v = np.asarray(values, dtype=np.float32)
    q = _rha(v / np.float32(scale))
    return saturate_int8(q)


def dequantize(codes: np.ndarray, scale: float, dtype=np.float32) -> np.ndarray:
    return codes.astype(dtype) * dtype(scale)


def requantize_acc_fp32(acc: np.ndarray, multiplier: float) -> np.ndarray:
    """INT32 accumulator -> INT8 output; scaling performed in FP32.

    `multiplier` is in_scale * weight_scale / out_scale, already collapsed to
    one FP32 factor.
    """
    scaled = acc.astype(np.float32) * np.float32(multiplier)
    return saturate_int8(_rha(scaled))


def requantize_fp64(values: np.ndarray, out_scale: float) -> np.ndarray:
    """FP64 real values -> INT8 codes (digital-side path)."""
    q = _rha(np.asarray(values, dtype=np.float64) / np.float64(out_scale))
    return saturate_int8(q)


def scale_from_max_abs(max_abs: float) -> float:
    """Calibration statistic -> scale; degenerate all-zero ranges map to 1.0."""
    if max_abs <= 0.0 or not math.isfinite(max_abs):
        return 1.0
    return float(np.float32(max_abs) / np.float32(QMAX))
