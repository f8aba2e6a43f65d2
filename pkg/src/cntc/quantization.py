"""Asymmetric scalar quantizer for grid features and its training surrogates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _as_tensor, _make


@dataclass(frozen=True)
class QuantizerSpec:
    """Uniform quantizer with 2**bits levels spaced 1/2**bits.

    The lowest level sits at -(2**bits - 1) / 2**(bits + 1); inputs are clamped
    to [lo, 0.5] before rounding, so 0.5 lands on the top level.
    """

    bits: int = 4

    def __post_init__(self):
        if self.bits < 1 or self.bits > 16:
            raise ValueError(f"bits must be in 1..16, got {self.bits}")

    @property
    def n_levels(self) -> int:
        return 1 << self.bits

    @property
    def step(self) -> float:
        return 1.0 / self.n_levels

    @property
    def lo(self) -> float:
        return -(self.n_levels - 1) / (1 << (self.bits + 1))

    @property
    def hi(self) -> float:
        return 0.5

    @property
    def levels(self) -> np.ndarray:
        return self.lo + np.arange(self.n_levels) * self.step


def quantize(x, spec: QuantizerSpec) -> np.ndarray:
    """Map reals to integer codes; midpoints round toward the larger code."""
    x = np.clip(np.asarray(x, dtype=np.float64), spec.lo, spec.hi)
    k = np.floor((x - spec.lo) / spec.step + 0.5)
    dtype = np.uint8 if spec.bits <= 8 else np.uint16
    return np.clip(k, 0, spec.n_levels - 1).astype(dtype)


def dequantize(codes, spec: QuantizerSpec, dtype=np.float64) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() >= spec.n_levels):
        raise ValueError(f"codes outside 0..{spec.n_levels - 1}")
    return (spec.lo + codes.astype(np.float64) * spec.step).astype(dtype)


def noise_surrogate(x, spec: QuantizerSpec, rng: np.random.Generator):
    """x + U(-step/2, step/2); identity gradient."""
    x = _as_tensor(x)
    half = spec.step / 2
    u = rng.uniform(-half, half, size=x.shape).astype(x.dtype)
    # float32 rounding of x + u can land exactly on the open bound; pull it inside
    y = x.data + u
    bad = np.abs(y - x.data) >= half
    if bad.any():
        y = np.where(bad, x.data, y)
    return _make(y, (x,), lambda g: (g,), "noise_surrogate")


def ste_quantize(x, spec: QuantizerSpec):
    """Hard quantization forward; identity gradient inside [lo, hi], zero outside."""
    x = _as_tensor(x)
    out = dequantize(quantize(x.data, spec), spec, dtype=x.dtype)
    mask = ((x.data >= spec.lo) & (x.data <= spec.hi)).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * mask,), "ste_quantize")


def hard_quantize(x, spec: QuantizerSpec):
    """Quantize-dequantize with no gradient; used at export."""
    x = _as_tensor(x)
    return Tensor(dequantize(quantize(x.data, spec), spec, dtype=x.dtype), op="hard_quantize")
