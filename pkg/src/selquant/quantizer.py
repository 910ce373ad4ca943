"""Uniform scalar quantization: margins, mid-rise grids, and the Delta^2/12 noise model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_MAX_BITS = 8


def dynamic_margin(prior_var, noise_var):
    """Quantizer span from the 6-sigma rule: 6 * sqrt(prior_var + noise_var)."""
    prior_var = np.asarray(prior_var, dtype=float)
    noise_var = np.asarray(noise_var, dtype=float)
    if np.any(prior_var < 0) or np.any(noise_var < 0):
        raise ValueError("variances must be nonnegative")
    out = 6.0 * np.sqrt(prior_var + noise_var)
    return float(out) if out.ndim == 0 else out


@dataclass
class QuantizerSpec:
    """Mid-rise uniform quantizer: 2**bits cells spanning margin around center."""

    bits: int
    margin: float
    center: float = 0.0
    max_bits: int = DEFAULT_MAX_BITS

    def __post_init__(self):
        if not (1 <= self.bits <= self.max_bits):
            raise ValueError(f"bits must lie in [1, {self.max_bits}], got {self.bits}")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")

    @property
    def step(self) -> float:
        return self.margin / 2**self.bits

    @property
    def levels(self) -> np.ndarray:
        lo = self.center - self.margin / 2.0
        return lo + (np.arange(2**self.bits) + 0.5) * self.step


def quantize(value, spec: QuantizerSpec):
    """Snap to the nearest grid level; out-of-span inputs saturate to the end levels."""
    value = np.asarray(value, dtype=float)
    if spec.step == 0.0:
        out = np.full_like(value, spec.center)
        return float(out) if out.ndim == 0 else out
    lo = spec.center - spec.margin / 2.0
    idx = np.floor((value - lo) / spec.step)
    idx = np.clip(idx, 0, 2**spec.bits - 1)
    out = lo + (idx + 0.5) * spec.step
    return float(out) if out.ndim == 0 else out


def quant_noise_variances(margins, bits):
    """Vector of Delta^2/12 noise variances for margins and per-sensor bit counts."""
    margins = np.asarray(margins, dtype=float)
    bits = np.asarray(bits)
    steps = margins / np.power(2.0, bits)
    return steps * steps / 12.0


def quant_noise_cov(specs: list[QuantizerSpec]) -> np.ndarray:
    """Diagonal covariance of the uniform-noise model, entries Delta_i^2 / 12."""
    return np.diag([s.step**2 / 12.0 for s in specs])
