"""Kalman filtering of temporally correlated parameters with packet losses.

Per frame: predict through the first-order transition, re-optimize the plan
against the predicted covariance, simulate quantized transmission and packet
drops, then correct on whatever decoded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .estimator import MseEvaluator, SelectionPlan, SingularSubsetError
from .field import FieldModel, symmetric_factor
from .optimizer import OptimizerConfig, optimize_joint, optimize_separate
from .quantizer import QuantizerSpec, quant_noise_variances, quantize
from .util import as_rng, write_csv


def _sym(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


@dataclass
class DynamicsModel:
    """Per-frame transition and noise paths; constant matrices broadcast over frames."""

    frames: int
    transition: np.ndarray
    process_noise_cov: np.ndarray
    noise_cov_path: np.ndarray | None = None
    mean_path: np.ndarray | None = None
    prior_cov_path: np.ndarray | None = None

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.process_noise_cov = np.asarray(self.process_noise_cov, dtype=float)
        if self.frames < 1:
            raise ValueError("frames must be >= 1")

    def _at(self, path: np.ndarray, t: int) -> np.ndarray:
        if path.ndim == 3:
            return path[t - 1]
        return path

    def f(self, t: int) -> np.ndarray:
        return self._at(self.transition, t)

    def process_cov(self, t: int) -> np.ndarray:
        return self._at(self.process_noise_cov, t)

    def noise_cov(self, t: int, default: np.ndarray) -> np.ndarray:
        if self.noise_cov_path is None:
            return default
        return self._at(np.asarray(self.noise_cov_path, dtype=float), t)

    def prior_trace(self, t: int, default: float) -> float:
        if self.prior_cov_path is None:
            return default
        return float(np.trace(self._at(np.asarray(self.prior_cov_path, dtype=float), t)))


def stationary_dynamics(prior_cov: np.ndarray, psi: float, frames: int) -> DynamicsModel:
    """Scaled-identity transition whose stationary covariance is the prior itself."""
    if not (0.0 <= psi <= 1.0):
        raise ValueError("psi must lie in [0, 1]")
    m = prior_cov.shape[0]
    return DynamicsModel(frames=frames,
                         transition=psi * np.eye(m),
                         process_noise_cov=(1.0 - psi**2) * np.asarray(prior_cov, dtype=float))


@dataclass
class KalmanState:
    estimate: np.ndarray
    cov: np.ndarray
    predicted_estimate: np.ndarray
    predicted_cov: np.ndarray


def predict(estimate, cov, transition, process_cov) -> tuple[np.ndarray, np.ndarray]:
    """One prediction step: propagate the estimate and inflate the covariance."""
    transition = np.asarray(transition, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if transition.shape != cov.shape:
        raise ValueError("transition and covariance shapes disagree")
    pred_est = transition @ estimate
    pred_cov = _sym(transition @ cov @ transition.T + np.asarray(process_cov, dtype=float))
    return pred_est, pred_cov


def correct(predicted_estimate, predicted_cov, plan: SelectionPlan, decoded,
            z_received, noise_cov, quant_var, frame: int | None = None) -> KalmanState:
    """Gain-weighted update from the decoded measurements; no data, no change."""
    pred_est = np.asarray(predicted_estimate, dtype=float)
    pred_cov = np.asarray(predicted_cov, dtype=float)
    m = pred_est.shape[0]
    decoded = tuple(int(i) for i in decoded)
    if not set(decoded) <= set(plan.selected):
        raise ValueError("decoded sensors must come from the plan")
    if len(decoded) == 0:
        return KalmanState(estimate=pred_est.copy(), cov=_sym(pred_cov),
                           predicted_estimate=pred_est, predicted_cov=pred_cov)
    idx = np.asarray(decoded, dtype=int)
    z_received = np.asarray(z_received, dtype=float)
    if z_received.shape != (idx.size,):
        raise ValueError("received vector length must match the decode set")
    quant_var = np.asarray(quant_var, dtype=float)
    innov_cov = pred_cov[np.ix_(idx, idx)] + np.asarray(noise_cov, dtype=float)[np.ix_(idx, idx)]
    innov_cov[np.arange(idx.size), np.arange(idx.size)] += quant_var[idx]
    try:
        chol = cho_factor(innov_cov, lower=True)
    except np.linalg.LinAlgError as exc:
        where = f"at frame {frame}" if frame is not None else ""
        raise SingularSubsetError(decoded, where) from exc
    gain = cho_solve(chol, pred_cov[idx, :]).T  # (M, |decoded|)
    est = pred_est + gain @ (z_received - pred_est[idx])
    cov = _sym(pred_cov - gain @ pred_cov[idx, :])
    return KalmanState(estimate=est, cov=cov,
                       predicted_estimate=pred_est, predicted_cov=pred_cov)


def frame_margins(predicted_cov, noise_cov) -> np.ndarray:
    """Per-frame quantizer margins: 6-sigma on predicted plus measurement variance."""
    return 6.0 * np.sqrt(np.diag(predicted_cov) + np.diag(noise_cov))


def frame_evaluator(predicted_cov, noise_cov, link) -> MseEvaluator:
    return MseEvaluator(_sym(np.asarray(predicted_cov, dtype=float)),
                        np.asarray(noise_cov, dtype=float),
                        margins=frame_margins(predicted_cov, noise_cov),
                        per_table=link.per_table, max_bits=link.max_bits)


def frame_mse(predicted_cov, plan: SelectionPlan, link, noise_cov,
              k_max: int | None = None, enum_cap: int = 20) -> float:
    """Decode-averaged posterior trace for one frame; truncated when k_max given."""
    ev = frame_evaluator(predicted_cov, noise_cov, link)
    ev.enum_cap = enum_cap
    if k_max is None:
        return ev.exact_mse(plan.selected, plan.bits)
    return ev.bounded_mse(plan.selected, plan.bits, min(k_max, plan.n_active - 1))


@dataclass
class FrameRecord:
    frame: int
    plan: SelectionPlan
    mse: float
    mse_bound: float
    nmse: float
    realized_sq_error: float
    decoded: tuple[int, ...]
    state: KalmanState


@dataclass
class HorizonResult:
    records: list[FrameRecord] = field(default_factory=list)

    def nmse_path(self) -> np.ndarray:
        return np.array([r.nmse for r in self.records])

    def to_csv(self, path) -> None:
        header = ["frame", "nmse", "mse", "mse_bound", "realized_sq_error",
                  "selected", "bits", "decoded"]
        rows = []
        for r in self.records:
            rows.append((r.frame, r.nmse, r.mse, r.mse_bound, r.realized_sq_error,
                         ";".join(map(str, r.plan.selected)),
                         ";".join(map(str, r.plan.bits)),
                         ";".join(map(str, r.decoded))))
        write_csv(path, header, rows)


_OPTIMIZERS = {"separate": optimize_separate, "joint": optimize_joint}


def run_horizon(model: FieldModel, dynamics: DynamicsModel, link, n_active: int,
                config: OptimizerConfig, rng_seed, optimizer: str = "separate",
                reoptimize_each_frame: bool = True, initial_plan: SelectionPlan | None = None,
                enum_cap: int = 20) -> HorizonResult:
    """Filter a full horizon: per-frame planning, simulation, and correction.

    The frame-1 prior is the field model itself; each later frame re-plans
    against the predicted covariance (warm-started from the previous plan)
    unless reoptimize_each_frame is off.
    """
    if optimizer not in _OPTIMIZERS:
        raise ValueError(f"optimizer must be one of {sorted(_OPTIMIZERS)}")
    rng = as_rng(rng_seed)
    m = model.size
    est = model.mean.copy()
    cov = model.prior_cov.copy()
    theta = None
    plan = initial_plan
    result = HorizonResult()
    for t in range(1, dynamics.frames + 1):
        if t == 1:
            pred_est, pred_cov = model.mean.copy(), _sym(model.prior_cov.copy())
        else:
            pred_est, pred_cov = predict(est, cov, dynamics.f(t), dynamics.process_cov(t))
        noise_t = dynamics.noise_cov(t, model.noise_cov)
        margins = frame_margins(pred_cov, noise_t)
        if plan is None or reoptimize_each_frame:
            frame_model = FieldModel(mean=pred_est, prior_cov=pred_cov, noise_cov=noise_t)
            try:
                plan, _ = _OPTIMIZERS[optimizer](frame_model, link, n_active, config,
                                                 initial_plan=plan, rng_seed=rng)
            except (ValueError, np.linalg.LinAlgError) as exc:
                raise type(exc)(f"frame {t}: {exc}") from exc
        ev = frame_evaluator(pred_cov, noise_t, link)
        ev.enum_cap = enum_cap
        k_eff = min(config.k_max, n_active - 1)
        mse_bound = ev.bounded_mse(plan.selected, plan.bits, k_eff)
        if n_active <= enum_cap:
            mse = ev.exact_mse(plan.selected, plan.bits)
        else:
            mse = mse_bound
        # simulate the physical frame
        if t == 1:
            theta = model.mean + symmetric_factor(model.prior_cov) @ rng.standard_normal(m)
        else:
            theta = dynamics.f(t) @ theta + symmetric_factor(dynamics.process_cov(t)) @ rng.standard_normal(m)
        x = theta + symmetric_factor(noise_t) @ rng.standard_normal(m)
        y = np.empty(plan.n_active)
        for i, sensor in enumerate(plan.selected):
            spec = QuantizerSpec(bits=plan.bits[i], margin=margins[sensor],
                                 center=pred_est[sensor], max_bits=link.max_bits)
            y[i] = quantize(x[sensor], spec)
        pers = link.per_for_bits(plan.selected, plan.bits)
        success = rng.random(plan.n_active) >= pers
        decoded = tuple(s for s, ok in zip(plan.selected, success) if ok)
        z = y[success]
        quant_var = quant_noise_variances(margins, np.asarray(
            [plan.bits_of(s) if s in plan.selected else 1 for s in range(m)]))
        state = correct(pred_est, pred_cov, plan, decoded, z, noise_t, quant_var, frame=t)
        est, cov = state.estimate, state.cov
        norm = dynamics.prior_trace(t, float(np.trace(model.prior_cov)))
        result.records.append(FrameRecord(
            frame=t, plan=plan, mse=mse, mse_bound=mse_bound, nmse=mse / norm,
            realized_sq_error=float(np.sum((est - theta) ** 2)),
            decoded=decoded, state=state))
    return result
