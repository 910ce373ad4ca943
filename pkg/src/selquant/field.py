"""Spatial statistics of the sensed field.

Sensor placement around a collector node, distance-decaying correlation priors,
measurement-noise models, and seeded sampling of field realizations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .util import as_rng


class FactorizationError(ValueError):
    """Covariance is indefinite beyond tolerance; no symmetric factor exists."""


@dataclass
class SensorLayout:
    """Planar sensor coordinates plus the collector-node coordinate, in meters."""

    positions: np.ndarray
    cn_position: np.ndarray

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.cn_position = np.asarray(self.cn_position, dtype=float).reshape(2)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValueError(f"positions must be (M, 2), got {self.positions.shape}")
        if self.positions.shape[0] < 1:
            raise ValueError("at least one sensor is required")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def distances_to_cn(self) -> np.ndarray:
        return np.linalg.norm(self.positions - self.cn_position, axis=1)

    def pairwise_distances(self) -> np.ndarray:
        # (a-b) and (b-a) square to identical floats, so this is bitwise symmetric.
        diff = self.positions[:, None, :] - self.positions[None, :, :]
        return np.sqrt(np.sum(diff * diff, axis=-1))


def place_sensors(count: int, radius: float, rng_seed) -> SensorLayout:
    """Drop `count` sensors i.i.d. uniform over a disk of `radius` around the CN."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if radius <= 0:
        raise ValueError("radius must be > 0")
    rng = as_rng(rng_seed)
    u = rng.random((count, 2))
    r = radius * np.sqrt(u[:, 0])
    ang = 2.0 * np.pi * u[:, 1]
    pos = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
    return SensorLayout(positions=pos, cn_position=np.zeros(2))


@dataclass
class CorrelationSpec:
    """Per-sensor standard deviations plus the distance-decay coefficient.

    Correlation between two sensors at distance d is varphi**d, i.e. an
    exponential kernel exp(-d/length) with varphi = exp(-1/length).
    varphi = 0 means independent sensors, varphi = 1 identical parameters.
    """

    sigma: np.ndarray
    varphi: float

    def __post_init__(self):
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if np.any(self.sigma < 0):
            raise ValueError("sigma must be nonnegative")
        if not (0.0 <= self.varphi <= 1.0):
            raise ValueError("varphi must lie in [0, 1]")


def build_prior_cov(layout: SensorLayout, spec: CorrelationSpec) -> np.ndarray:
    """Covariance entries sigma_i * sigma_j * varphi**d_ij, with 0**0 = 1."""
    m = layout.count
    sigma = spec.sigma
    if sigma.size == 1:
        sigma = np.full(m, float(sigma[0]))
    if sigma.shape[0] != m:
        raise ValueError(f"sigma length {sigma.shape[0]} != sensor count {m}")
    d = layout.pairwise_distances()
    corr = np.power(spec.varphi, d)  # 0.0**0.0 == 1.0 keeps the diagonal at sigma**2
    return np.outer(sigma, sigma) * corr


@dataclass
class FieldModel:
    """Gaussian prior over the parameter vector plus additive measurement noise."""

    mean: np.ndarray
    prior_cov: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.prior_cov = np.asarray(self.prior_cov, dtype=float)
        self.noise_cov = np.asarray(self.noise_cov, dtype=float)
        m = self.mean.shape[0]
        for name, cov in (("prior_cov", self.prior_cov), ("noise_cov", self.noise_cov)):
            if cov.shape != (m, m):
                raise ValueError(f"{name} must be ({m}, {m}), got {cov.shape}")
            scale = max(1.0, abs(np.trace(cov)))
            if np.max(np.abs(cov - cov.T)) > 1e-9 * scale:
                raise ValueError(f"{name} is not symmetric")
            tol = 1e-9 * max(np.trace(cov), 0.0)
            w = np.linalg.eigvalsh(cov)
            if w[0] < -tol:
                raise ValueError(f"{name} has eigenvalue {w[0]:.3e} below -{tol:.3e}")

    @property
    def size(self) -> int:
        return self.mean.shape[0]

    def margins(self) -> np.ndarray:
        """Quantizer dynamic margins from the 6-sigma rule on prior + noise variance."""
        return 6.0 * np.sqrt(np.diag(self.prior_cov) + np.diag(self.noise_cov))


def symmetric_factor(cov: np.ndarray, tol_scale: float = 1e-9) -> np.ndarray:
    """Eigen-based factor A with A @ A.T = cov for positive-semidefinite cov.

    Eigenvalues in [-tol, 0) are clamped to zero (rank-deficient empirical
    covariances land there); anything below -tol raises instead of clamping.
    """
    cov = np.asarray(cov, dtype=float)
    tol = tol_scale * max(np.trace(cov), 0.0)
    w, v = np.linalg.eigh(cov)
    if w[0] < -tol:
        raise FactorizationError(
            f"matrix is indefinite: eigenvalue {w[0]:.6e} below tolerance -{tol:.6e}"
        )
    return v * np.sqrt(np.clip(w, 0.0, None))


def sample_realization(model: FieldModel, rng_seed) -> tuple[np.ndarray, np.ndarray]:
    """One draw of (parameters, observed measurements); deterministic per seed."""
    theta, x = sample_realizations(model, 1, rng_seed)
    return theta[0], x[0]


def sample_realizations(model: FieldModel, n: int, rng_seed) -> tuple[np.ndarray, np.ndarray]:
    """n independent draws, shape (n, M) each; single-draw layout matches sample_realization."""
    rng = as_rng(rng_seed)
    a_theta = symmetric_factor(model.prior_cov)
    a_noise = symmetric_factor(model.noise_cov)
    theta = model.mean + rng.standard_normal((n, model.size)) @ a_theta.T
    x = theta + rng.standard_normal((n, model.size)) @ a_noise.T
    return theta, x


def save_layout(layout: SensorLayout, path) -> None:
    lines = [f"CN {layout.cn_position[0]:.17g} {layout.cn_position[1]:.17g}"]
    for i, (x, y) in enumerate(layout.positions):
        lines.append(f"{i} {x:.17g} {y:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_layout(path) -> SensorLayout:
    cn = None
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tag, x, y = line.split()
        if tag == "CN":
            cn = (float(x), float(y))
        else:
            rows.append((int(tag), float(x), float(y)))
    if cn is None:
        raise ValueError("layout file is missing the 'CN x y' header line")
    rows.sort()
    return SensorLayout(positions=np.array([(x, y) for _, x, y in rows]), cn_position=np.array(cn))
