"""Intel-lab sensor log ingestion and empirical field statistics.

Readings are binned into fixed day/interval cells, smoothed with a centered
sliding window to split parameter from measurement noise, and reduced to
per-interval moment paths (mean, covariances, scalar transition, process
noise) usable by the estimation and filtering modules.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .field import symmetric_factor
from .util import as_rng

DAY_SECONDS = 86400
DEFAULT_INTERVAL = 900
DEFAULT_WINDOW = 2700
DEFAULT_TEMP_BOUNDS = (-10.0, 50.0)
DEFAULT_MAX_MOTE = 54


@dataclass(frozen=True)
class RawReading:
    stamp: datetime
    epoch: int
    mote_id: int
    temperature: float
    humidity: float
    light: float
    voltage: float


@dataclass
class ParseReport:
    kept: int = 0
    skipped: int = 0


def parse_readings(lines, max_mote: int = DEFAULT_MAX_MOTE) -> tuple[list[RawReading], ParseReport]:
    """Parse whitespace-separated log lines; malformed lines are counted, never fatal."""
    readings = []
    report = ParseReport()
    for raw in lines:
        parts = raw.split()
        if len(parts) != 8:
            if raw.strip():
                report.skipped += 1
            continue
        try:
            stamp = datetime.fromisoformat(parts[0] + " " + parts[1])
            epoch = int(parts[2])
            mote = int(parts[3])
            temp, hum, light, volt = (float(p) for p in parts[4:8])
        except ValueError:
            report.skipped += 1
            continue
        if not (1 <= mote <= max_mote) or not np.isfinite(temp):
            report.skipped += 1
            continue
        readings.append(RawReading(stamp, epoch, mote, temp, hum, light, volt))
        report.kept += 1
    return readings, report


@dataclass
class BinnedPanel:
    """Readings bucketed by (day index, interval index) and sensor."""

    interval_len: int
    window_len: int
    days: int
    intervals: int
    sensor_ids: tuple[int, ...]
    cells: dict  # (day, interval) -> {sensor_id: np.ndarray of temperatures}
    dropped_outliers: int = 0
    missing_cells: int = 0

    @property
    def window_intervals(self) -> int:
        return self.window_len // self.interval_len


def bin_panel(readings: list[RawReading], interval_len: int = DEFAULT_INTERVAL,
              window_len: int = DEFAULT_WINDOW,
              outlier_bounds: tuple[float, float] = DEFAULT_TEMP_BOUNDS) -> BinnedPanel:
    """Bucket readings into day/interval cells, dropping out-of-bounds temperatures."""
    if DAY_SECONDS % interval_len != 0:
        raise ValueError("interval length must divide the day")
    j = window_len // interval_len
    if j * interval_len != window_len or j % 2 != 1:
        raise ValueError("window must be an odd number of intervals")
    lo, hi = outlier_bounds
    dropped = 0
    staged: dict = {}
    sensors = set()
    if not readings:
        return BinnedPanel(interval_len, window_len, 0, DAY_SECONDS // interval_len, (), {})
    day0 = min(r.stamp.date() for r in readings)
    max_day = 0
    for r in readings:
        if not (lo <= r.temperature <= hi):
            dropped += 1
            continue
        day = (r.stamp.date() - day0).days + 1
        sec = (r.stamp - datetime.combine(r.stamp.date(), datetime.min.time())).total_seconds()
        interval = int(sec // interval_len) + 1
        cell = staged.setdefault((day, interval), {})
        cell.setdefault(r.mote_id, []).append((r.stamp, r.temperature))
        sensors.add(r.mote_id)
        max_day = max(max_day, day)
    cells = {}
    for key, per_sensor in staged.items():
        cells[key] = {m: np.array([t for _, t in sorted(vals)]) for m, vals in per_sensor.items()}
    return BinnedPanel(interval_len=interval_len, window_len=window_len,
                       days=max_day, intervals=DAY_SECONDS // interval_len,
                       sensor_ids=tuple(sorted(sensors)), cells=cells,
                       dropped_outliers=dropped)


@dataclass
class ThetaPanel:
    """Window-mean parameter estimates per (day, interval, sensor) plus residuals."""

    theta: np.ndarray          # (D, T, M); NaN where a sensor has no window data
    residuals: dict            # (day, interval) -> (M, Q) NaN-padded residual matrix
    sensor_ids: tuple[int, ...]
    days: int
    intervals: int


def estimate_parameters(panel: BinnedPanel) -> ThetaPanel:
    """Split each cell into slow parameter (window mean) and residual noise."""
    ids = panel.sensor_ids
    pos = {s: i for i, s in enumerate(ids)}
    d, t_count, m = panel.days, panel.intervals, len(ids)
    half = (panel.window_intervals - 1) // 2
    sums = np.zeros((d, t_count, m))
    counts = np.zeros((d, t_count, m))
    for (day, interval), per_sensor in panel.cells.items():
        for sensor, vals in per_sensor.items():
            sums[day - 1, interval - 1, pos[sensor]] = vals.sum()
            counts[day - 1, interval - 1, pos[sensor]] = vals.size
    theta = np.full((d, t_count, m), np.nan)
    for t in range(t_count):
        lo = max(0, t - half)
        hi = min(t_count, t + half + 1)  # truncated at day edges
        s = sums[:, lo:hi, :].sum(axis=1)
        c = counts[:, lo:hi, :].sum(axis=1)
        with np.errstate(invalid="ignore"):
            theta[:, t, :] = np.where(c > 0, s / np.maximum(c, 1), np.nan)
    residuals = {}
    for (day, interval), per_sensor in panel.cells.items():
        q_max = max(v.size for v in per_sensor.values())
        mat = np.full((m, q_max), np.nan)
        for sensor, vals in per_sensor.items():
            mat[pos[sensor], : vals.size] = vals - theta[day - 1, interval - 1, pos[sensor]]
        residuals[(day, interval)] = mat
    return ThetaPanel(theta=theta, residuals=residuals, sensor_ids=ids,
                      days=d, intervals=t_count)


@dataclass
class EmpiricalModel:
    """Per-interval moment paths of the sensed field."""

    sensor_ids: tuple[int, ...]
    intervals: tuple[int, ...]
    mean_path: np.ndarray        # (T, M)
    prior_cov_path: np.ndarray   # (T, M, M)
    noise_cov_path: np.ndarray   # (T, M, M)
    alpha_path: np.ndarray       # (T,); alpha[0] is the unused lead-in, set to 1
    process_cov_path: np.ndarray # (T, M, M); [0] is zero

    @property
    def size(self) -> int:
        return len(self.sensor_ids)


@dataclass
class MomentReport:
    alpha_excluded_days: dict = field(default_factory=dict)  # interval -> count
    clamped_eigenvalue: float = 0.0
    empty_pairs: int = 0


def _masked_outer_mean(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean of nu nu^T over rows with per-pair effective counts (NaN-aware)."""
    valid = np.isfinite(rows)
    filled = np.where(valid, rows, 0.0)
    s = filled.T @ filled
    cnt = valid.astype(float).T @ valid.astype(float)
    with np.errstate(invalid="ignore"):
        out = np.where(cnt > 0, s / np.maximum(cnt, 1.0), 0.0)
    return out, cnt


def _clamp_psd(mat: np.ndarray, report: MomentReport) -> np.ndarray:
    mat = 0.5 * (mat + mat.T)
    w, v = np.linalg.eigh(mat)
    if w[0] < 0:
        report.clamped_eigenvalue = max(report.clamped_eigenvalue, -float(w[0]))
    return (v * np.clip(w, 0.0, None)) @ v.T


def estimate_moments(theta_panel: ThetaPanel, denom_tol: float = 1e-6
                     ) -> tuple[EmpiricalModel, MomentReport]:
    """Sample moment paths across days: means, covariances, transition, process noise."""
    theta = theta_panel.theta
    d, t_count, m = theta.shape
    report = MomentReport()
    mean_path = np.empty((t_count, m))
    prior_path = np.empty((t_count, m, m))
    noise_path = np.empty((t_count, m, m))
    alpha_path = np.ones(t_count)
    process_path = np.zeros((t_count, m, m))

    for t in range(t_count):
        rows = theta[:, t, :]  # (D, M)
        valid = np.isfinite(rows)
        cnt = valid.sum(axis=0)
        with np.errstate(invalid="ignore"):
            mu = np.where(cnt > 0, np.nansum(rows, axis=0) / np.maximum(cnt, 1), np.nan)
        mean_path[t] = mu
        centered = rows - mu
        cov, paircnt = _masked_outer_mean(centered)
        report.empty_pairs += int(np.sum(paircnt == 0))
        prior_path[t] = _clamp_psd(cov, report)

    # measurement-noise covariance: aligned residual products pooled per interval
    noise_sums = np.zeros((t_count, m, m))
    noise_counts = np.zeros((t_count, m, m))
    for (day, interval), mat in theta_panel.residuals.items():
        valid = np.isfinite(mat)
        filled = np.where(valid, mat, 0.0)
        noise_sums[interval - 1] += filled @ filled.T
        noise_counts[interval - 1] += valid.astype(float) @ valid.astype(float).T
    for t in range(t_count):
        with np.errstate(invalid="ignore"):
            cw = np.where(noise_counts[t] > 0,
                          noise_sums[t] / np.maximum(noise_counts[t], 1.0), 0.0)
        noise_path[t] = _clamp_psd(cw, report)

    for t in range(1, t_count):
        cur = theta[:, t, :]
        prev = theta[:, t - 1, :]
        both = np.isfinite(cur) & np.isfinite(prev)
        ratios = []
        excluded = 0
        for day in range(d):
            mask = both[day]
            if not mask.any():
                continue
            den = prev[day, mask].sum()
            if abs(den) <= denom_tol:
                excluded += 1
                continue
            ratios.append(cur[day, mask].sum() / den)
        if excluded:
            report.alpha_excluded_days[t + 1] = excluded
        alpha_path[t] = float(np.mean(ratios)) if ratios else 1.0
        nu = np.where(both, cur - alpha_path[t] * prev, np.nan)
        cnu, _ = _masked_outer_mean(nu)
        process_path[t] = _clamp_psd(cnu, report)

    model = EmpiricalModel(sensor_ids=theta_panel.sensor_ids,
                           intervals=tuple(range(1, t_count + 1)),
                           mean_path=mean_path, prior_cov_path=prior_path,
                           noise_cov_path=noise_path, alpha_path=alpha_path,
                           process_cov_path=process_path)
    return model, report


def model_diagnostics(model: EmpiricalModel, theta_panel: ThetaPanel) -> list[dict]:
    """Per-interval mean temperature, day-to-day spread, and dynamics mismatch."""
    theta = theta_panel.theta
    rows = []
    day_means = np.nanmean(theta, axis=2)  # (D, T): across available sensors
    for t in range(theta.shape[1]):
        col = day_means[:, t]
        col = col[np.isfinite(col)]
        theta_bar = float(col.mean()) if col.size else float("nan")
        theta_hat = float(np.sqrt(max((col**2).mean() - theta_bar**2, 0.0))) if col.size else float("nan")
        if t == 0:
            xi = float("nan")
        else:
            target = model.prior_cov_path[t]
            den = np.linalg.norm(target)
            if den == 0:
                xi = float("nan")
            else:
                implied = model.alpha_path[t] ** 2 * model.prior_cov_path[t - 1] \
                    + model.process_cov_path[t]
                xi = float(np.linalg.norm(implied - target) / den)
        rows.append({"interval": t + 1, "theta_bar": theta_bar,
                     "theta_hat": theta_hat, "xi": xi})
    return rows


# -- serialization -------------------------------------------------------------


def save_model(model: EmpiricalModel, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    quantities = {
        "mean": model.mean_path,
        "prior_cov": model.prior_cov_path,
        "noise_cov": model.noise_cov_path,
        "process_cov": model.process_cov_path,
    }
    manifest = {
        "sensor_ids": list(model.sensor_ids),
        "intervals": list(model.intervals),
        "size": model.size,
        "files": {},
    }
    for name, path_arr in quantities.items():
        files = []
        for i, t in enumerate(model.intervals):
            fname = f"{name}_t{t:03d}.txt"
            np.savetxt(out / fname, np.atleast_2d(path_arr[i]), fmt="%.17g")
            files.append(fname)
        manifest["files"][name] = files
    np.savetxt(out / "alpha.txt", model.alpha_path, fmt="%.17g")
    manifest["files"]["alpha"] = "alpha.txt"
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_model(model_dir) -> EmpiricalModel:
    root = Path(model_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    m = manifest["size"]
    intervals = manifest["intervals"]
    arrays = {}
    for name in ("mean", "prior_cov", "noise_cov", "process_cov"):
        mats = [np.loadtxt(root / f, ndmin=2) for f in manifest["files"][name]]
        arrays[name] = np.stack(mats)
    mean_path = arrays["mean"].reshape(len(intervals), m)
    alpha = np.atleast_1d(np.loadtxt(root / manifest["files"]["alpha"]))
    return EmpiricalModel(sensor_ids=tuple(manifest["sensor_ids"]),
                          intervals=tuple(intervals),
                          mean_path=mean_path,
                          prior_cov_path=arrays["prior_cov"],
                          noise_cov_path=arrays["noise_cov"],
                          alpha_path=alpha,
                          process_cov_path=arrays["process_cov"])


# -- synthetic substitute data --------------------------------------------------


def propagate_moments(mean1, prior_cov1, alpha_path, process_cov_path) -> tuple[np.ndarray, np.ndarray]:
    """Self-consistent mean/covariance paths implied by the scalar transition."""
    t_count = len(alpha_path)
    m = len(mean1)
    mean_path = np.empty((t_count, m))
    prior_path = np.empty((t_count, m, m))
    mean_path[0] = mean1
    prior_path[0] = prior_cov1
    for t in range(1, t_count):
        a = alpha_path[t]
        mean_path[t] = a * mean_path[t - 1]
        prior_path[t] = a * a * prior_path[t - 1] + process_cov_path[t]
    return mean_path, prior_path


def synthesize_readings(model: EmpiricalModel, days: int, samples_per_cell: int,
                        rng_seed, start_date: str = "2004-03-01") -> list[str]:
    """Generate log lines whose population moments are the given model paths."""
    rng = as_rng(rng_seed)
    t_count = len(model.intervals)
    m = model.size
    start = datetime.fromisoformat(start_date)
    interval_len = DAY_SECONDS // t_count
    lines = []
    prior_factor = symmetric_factor(model.prior_cov_path[0])
    noise_factors = [symmetric_factor(model.noise_cov_path[t]) for t in range(t_count)]
    process_factors = [None] + [symmetric_factor(model.process_cov_path[t]) for t in range(1, t_count)]
    epoch = 0
    for day in range(days):
        theta = model.mean_path[0] + prior_factor @ rng.standard_normal(m)
        for t in range(t_count):
            if t > 0:
                theta = model.alpha_path[t] * theta + process_factors[t] @ rng.standard_normal(m)
            for j in range(samples_per_cell):
                noise = noise_factors[t] @ rng.standard_normal(m)
                x = theta + noise
                offset = timedelta(days=day, seconds=t * interval_len
                                   + (j + 0.5) * interval_len / samples_per_cell)
                stamp = start + offset
                epoch += 1
                for s, sensor in enumerate(model.sensor_ids):
                    lines.append(f"{stamp.date()} {stamp.time()} {epoch} {sensor} "
                                 f"{x[s]:.6f} 40.0 100.0 2.5")
    return lines
