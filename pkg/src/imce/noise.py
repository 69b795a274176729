"""NVM (PCM-style) weight noise: programming error and read noise.

The noise is additive Gaussian in weight-code space, a declared stand-in
behind NoiseModel so a conductance-calibrated model can replace it.  All
draws come from a counter-based generator (Philox) keyed by the logical
identity of the thing being perturbed, never by physical placement, so a
distributed run and the sequential interpreter produce identical noise for
the same seed, topology and invocation counters.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .quant import FULL_SCALE, round_half_away

KIND_NONE = "none"
KIND_PROG = "gaussian_programming"
KIND_READ = "gaussian_read"
KIND_COMBINED = "combined"

_KINDS = (KIND_NONE, KIND_PROG, KIND_READ, KIND_COMBINED)


@dataclass(frozen=True)
class NoiseModel:
    kind: str = KIND_NONE
    sigma_prog: float = 0.0  # fraction of full-scale (127 codes)
    sigma_read: float = 0.0  # fraction of full-scale, per cell read
    seed: int = 0
    # drift: reserved, unimplemented

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown noise kind '{self.kind}' (expected one of {_KINDS})")
        if self.sigma_prog < 0 or self.sigma_read < 0:
            raise ValueError("noise sigmas must be >= 0")

    @property
    def programs(self) -> bool:
        return self.kind in (KIND_PROG, KIND_COMBINED) and self.sigma_prog > 0

    @property
    def reads(self) -> bool:
        return self.kind in (KIND_READ, KIND_COMBINED) and self.sigma_read > 0

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "sigma_prog": self.sigma_prog,
            "sigma_read": self.sigma_read,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict | None) -> "NoiseModel":
        if not d:
            return cls()
        return cls(
            kind=d.get("kind", KIND_NONE),
            sigma_prog=float(d.get("sigma_prog", 0.0)),
            sigma_read=float(d.get("sigma_read", 0.0)),
            seed=int(d.get("seed", 0)),
        )


def _keyed_rng(seed: int, *labels) -> np.random.Generator:
    """Philox generator keyed by a hash of (seed, labels); placement-free."""
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for lab in labels:
        h.update(b"|")
        h.update(str(lab).encode())
    key = np.frombuffer(h.digest(), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def program_weights(weights: np.ndarray, nm: NoiseModel, node_id: str) -> np.ndarray:
    """Perturb stored INT8 weight codes once, at configuration time.

    Each weight w becomes sat(round(w + eps)) with eps ~ N(0, (sigma_prog*127)^2),
    drawn per (seed, node, row, col).
    """
    w = np.asarray(weights, dtype=np.int8)
    if not nm.programs:
        return w
    rng = _keyed_rng(nm.seed, "prog", node_id)
    eps = rng.normal(0.0, nm.sigma_prog * FULL_SCALE, size=w.shape)
    noisy = round_half_away(w.astype(np.float64) + eps)
    return np.clip(noisy, -FULL_SCALE, FULL_SCALE).astype(np.int8)


def read_noise(acc: np.ndarray, nm: NoiseModel, node_id: str, invocation: int, n_rows: int) -> np.ndarray:
    """Perturb an INT32 accumulator vector on each analog read.

    The per-cell read sigma accumulates over the summed column, so the
    accumulator-level std is sigma_read * 127 * sqrt(rows).  Distinct
    invocations use distinct counters and therefore distinct draws.
    """
    if not nm.reads:
        return acc
    rng = _keyed_rng(nm.seed, "read", node_id, invocation)
    std = nm.sigma_read * FULL_SCALE * np.sqrt(n_rows)
    eps = rng.normal(0.0, std, size=acc.shape)
    return (acc.astype(np.int64) + round_half_away(eps).astype(np.int64)).astype(np.int32)
