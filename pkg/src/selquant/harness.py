"""Experiment orchestration: scenario builders, figure-style sweeps, CSV emission.

Every run is driven by a single JSON config (defaults shipped with the
package); per-trial seeds derive from (master seed, trial index) so results
are byte-identical across runs and worker counts.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .estimator import (DEFAULT_ENUM_CAP, MseEvaluator, SelectionPlan,
                        decoding_outcomes)
from .field import (CorrelationSpec, FieldModel, SensorLayout, build_prior_cov,
                    load_layout, place_sensors, sample_realizations)
from .intel import EmpiricalModel, load_model
from .kalman import DynamicsModel, run_horizon, stationary_dynamics
from .link import (CodingModel, LinkProfile, SlotConfig, build_link_profile,
                   channel_gain, default_mcs_table, load_mcs_table)
from .optimizer import (InfeasibleSelectionError, OptimizerConfig,
                        baseline_channel_gain, baseline_error_free,
                        baseline_random, optimize_joint, optimize_rows_only,
                        optimize_separate)
from .quantizer import QuantizerSpec, quantize
from .util import as_rng, config_hash, trial_rng, write_csv


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) * 1e-3


def default_config() -> dict:
    with resources.files("selquant.data").joinpath("default_config.json").open() as fh:
        return json.load(fh)


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        cfg = _deep_merge(cfg, json.loads(Path(path).read_text()))
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    return cfg


def slot_from_config(link_cfg: dict) -> SlotConfig:
    return SlotConfig(
        slot_duration=link_cfg["slot_duration_s"],
        slot_bandwidth=link_cfg["slot_bandwidth_hz"],
        noise_density=dbm_to_watts(link_cfg["noise_density_dbm_hz"]),
    )


def optimizer_from_config(cfg: dict) -> OptimizerConfig:
    opt = cfg["optimizer"]
    return OptimizerConfig(
        k_max=opt["k_max"], max_bits=opt["max_bits"],
        power_cap=opt["power_cap_watts"],
        mse_tolerance=opt["mse_tolerance"], max_sweeps=opt["max_sweeps"],
    )


@dataclass
class Scenario:
    model: FieldModel
    link: LinkProfile
    layout: SensorLayout
    run_seed: int


def build_synthetic_scenario(cfg: dict, varphi: float, trial: int) -> Scenario:
    """Disk layout, distance-decay prior, per-sensor noise draw, link tables."""
    rng = trial_rng(cfg["master_seed"], trial)
    seeds = [int(s) for s in rng.integers(0, 2**63 - 1, size=4)]
    m = cfg["m_sensors"]
    layout = place_sensors(m, cfg["radius_m"], seeds[0])
    prior = build_prior_cov(layout, CorrelationSpec(np.full(m, cfg["sigma_theta"]), varphi))
    noise_sd = as_rng(seeds[1]).uniform(0.0, cfg["noise_std_max"], size=m)
    model = FieldModel(mean=np.zeros(m), prior_cov=prior, noise_cov=np.diag(noise_sd**2))
    link_cfg = cfg["link"]
    slot = slot_from_config(link_cfg)
    if link_cfg.get("mcs_table_path"):
        table = load_mcs_table(link_cfg["mcs_table_path"], slot)
    else:
        table = default_mcs_table(slot, max_bits=link_cfg["max_bits"])
    gains = channel_gain(layout.distances_to_cn(), link_cfg["decay_exponent"],
                         link_cfg["fading_power"], link_cfg["fading_mode"], seeds[2])
    coding = CodingModel(link_cfg["coding_model"], link_cfg.get("coding_scale", 1.0))
    link = build_link_profile(gains, dbm_to_watts(link_cfg["tx_power_dbm"]), slot, table, coding)
    return Scenario(model=model, link=link, layout=layout, run_seed=seeds[3])


def _n_active(fraction: float, m: int) -> int:
    return max(1, round(fraction * m))


def normalized_mse(model: FieldModel, plan: SelectionPlan, link, k_max: int,
                   enum_cap: int = DEFAULT_ENUM_CAP) -> float:
    """Exact NMSE when enumerable, truncated bound otherwise."""
    ev = MseEvaluator(model.prior_cov, model.noise_cov, per_table=link.per_table,
                      max_bits=link.max_bits, enum_cap=enum_cap)
    if plan.n_active <= enum_cap:
        val = ev.exact_mse(plan.selected, plan.bits)
    else:
        val = ev.bounded_mse(plan.selected, plan.bits, min(k_max, plan.n_active - 1))
    return val / ev.trace_prior


def plan_for_method(method: str, scenario: Scenario, n: int, opt_cfg: OptimizerConfig,
                    cfg: dict) -> SelectionPlan:
    model, link = scenario.model, scenario.link
    if method == "separate":
        return optimize_separate(model, link, n, opt_cfg, rng_seed=scenario.run_seed)[0]
    if method == "joint":
        return optimize_joint(model, link, n, opt_cfg, rng_seed=scenario.run_seed)[0]
    if method.startswith("random"):
        return baseline_random(model, link, n, int(method.removeprefix("random")),
                               rng_seed=scenario.run_seed, config=opt_cfg)
    if method.startswith("gain"):
        return baseline_channel_gain(model, link, n, int(method.removeprefix("gain")),
                                     config=opt_cfg)
    if method == "errorfree":
        return baseline_error_free(model, link, n, opt_cfg,
                                   per_ceiling=cfg.get("error_free_per_ceiling", 1e-3),
                                   rng_seed=scenario.run_seed)
    raise ValueError(f"unknown method '{method}'")


# -- bound tightness study ------------------------------------------------------


def run_bound_study(cfg: dict, out_dir=None) -> list[tuple]:
    """Exact vs truncated error for growing network sizes; one CSV row per (M, K)."""
    chash = config_hash(cfg)
    rows = []
    k_grid = cfg["bound_k_grid"]
    for m in cfg["bound_m_grid"]:
        sub = dict(cfg)
        sub["m_sensors"] = m
        n = max(2, _n_active(cfg["bound_active_fraction"], m))
        for trial in range(cfg.get("bound_trials", 3)):
            scenario = build_synthetic_scenario(sub, cfg.get("bound_varphi", 0.9), trial)
            sel = as_rng(scenario.run_seed).choice(m, size=n, replace=False)
            plan = SelectionPlan(tuple(int(i) for i in sel), (cfg["bound_bits"],) * n)
            ev = MseEvaluator(scenario.model.prior_cov, scenario.model.noise_cov,
                              per_table=scenario.link.per_table,
                              max_bits=scenario.link.max_bits)
            try:
                exact = ev.exact_mse(plan.selected, plan.bits)
            except ValueError as exc:
                rows.append((m, -1, trial, "", "", f"error: {exc}", chash))
                continue
            for k in sorted(set(list(k_grid) + [n - 1])):
                if k > n - 1:
                    continue
                bound = ev.bounded_mse(plan.selected, plan.bits, k)
                rel = abs(bound - exact) / exact if exact else 0.0
                rows.append((m, k, trial, exact / ev.trace_prior,
                             bound / ev.trace_prior, rel, chash))
    header = ["m", "k", "trial", "nmse_exact", "nmse_bound", "rel_error", "config_hash"]
    if out_dir is not None:
        write_csv(Path(out_dir) / "bound_study.csv", header, rows)
    return rows


# -- memoryless selection sweep --------------------------------------------------


def _sweep_point(args):
    cfg, varphi, fraction, trial = args
    scenario = build_synthetic_scenario(cfg, varphi, trial)
    n = _n_active(fraction, cfg["m_sensors"])
    opt_cfg = optimizer_from_config(cfg)
    out = {}
    for method in cfg["methods"]:
        try:
            plan = plan_for_method(method, scenario, n, opt_cfg, cfg)
            out[method] = normalized_mse(scenario.model, plan, scenario.link, opt_cfg.k_max)
        except (InfeasibleSelectionError, ValueError, np.linalg.LinAlgError) as exc:
            out[method] = f"error: {exc}"
    return out


def run_selection_sweep(cfg: dict, out_dir=None, workers: int = 1) -> list[tuple]:
    """Mean NMSE of each method on a (correlation, active-fraction) grid."""
    chash = config_hash(cfg)
    rows = []
    failures = []
    for varphi in cfg["varphi_grid"]:
        for fraction in cfg["active_fractions"]:
            args = [(cfg, varphi, fraction, t) for t in range(cfg["trials"])]
            if workers > 1:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(_sweep_point, args))
            else:
                results = [_sweep_point(a) for a in args]
            n = _n_active(fraction, cfg["m_sensors"])
            for method in cfg["methods"]:
                vals = [r[method] for r in results if isinstance(r[method], float)]
                failures += [(varphi, fraction, method, r[method])
                             for r in results if not isinstance(r[method], float)]
                if not vals:
                    continue
                vals = np.array(vals)
                se = vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0
                rows.append((varphi, 100.0 * fraction, n, method, float(vals.mean()),
                             float(se), len(vals), cfg["master_seed"], chash))
    header = ["varphi", "active_pct", "n_active", "method", "nmse_mean", "nmse_se",
              "trials", "seed", "config_hash"]
    if out_dir is not None:
        write_csv(Path(out_dir) / "selection_sweep.csv", header, rows)
        if failures:
            write_csv(Path(out_dir) / "selection_sweep_failures.csv",
                      ["varphi", "fraction", "method", "detail"], failures)
    return rows


# -- temporal sweep ---------------------------------------------------------------


def run_temporal_sweep(cfg: dict, out_dir=None) -> list[tuple]:
    """Per-frame NMSE of the filtered estimate on a (varphi, psi) grid."""
    chash = config_hash(cfg)
    tcfg = cfg["temporal"]
    rows = []
    opt_cfg = optimizer_from_config(cfg)
    n = _n_active(tcfg["active_fraction"], cfg["m_sensors"])
    for varphi in cfg["varphi_grid"]:
        for psi in cfg["psi_grid"]:
            paths = []
            for trial in range(tcfg.get("trials", 1)):
                scenario = build_synthetic_scenario(cfg, varphi, trial)
                dyn = stationary_dynamics(scenario.model.prior_cov, psi, cfg["frames"])
                res = run_horizon(scenario.model, dyn, scenario.link, n, opt_cfg,
                                  rng_seed=scenario.run_seed,
                                  optimizer=tcfg.get("optimizer", "separate"),
                                  reoptimize_each_frame=not tcfg.get("freeze_plan", False))
                paths.append(res.nmse_path())
            mean_path = np.mean(paths, axis=0)
            for t, val in enumerate(mean_path, start=1):
                rows.append((varphi, psi, t, float(val), len(paths),
                             cfg["master_seed"], chash))
    header = ["varphi", "psi", "frame", "nmse", "trials", "seed", "config_hash"]
    if out_dir is not None:
        write_csv(Path(out_dir) / "temporal_sweep.csv", header, rows)
    return rows


# -- analytic vs simulated consistency --------------------------------------------


def simulate_chain(model: FieldModel, plan: SelectionPlan, pers, n_trials: int,
                   rng_seed, quantize_signals: bool = True,
                   margins=None) -> tuple[float, float]:
    """Empirical MSE of the full chain: sample, quantize, drop packets, estimate."""
    rng = as_rng(rng_seed)
    pers = np.asarray(pers, dtype=float)
    margins_vec = margins if margins is not None else model.margins()
    if not quantize_signals:
        margins_vec = np.zeros(model.size)
    ev = MseEvaluator(model.prior_cov, model.noise_cov, margins=margins_vec,
                      max_bits=max(plan.bits))
    theta, x = sample_realizations(model, n_trials, rng)
    y = np.empty((n_trials, plan.n_active))
    for i, sensor in enumerate(plan.selected):
        if quantize_signals:
            spec = QuantizerSpec(bits=plan.bits[i], margin=margins_vec[sensor],
                                 center=model.mean[sensor], max_bits=max(plan.bits))
            y[:, i] = quantize(x[:, sensor], spec)
        else:
            y[:, i] = x[:, sensor]
    success = rng.random((n_trials, plan.n_active)) >= pers
    sq_err = np.empty(n_trials)
    patterns, inverse = np.unique(success, axis=0, return_inverse=True)
    for p_idx, pattern in enumerate(patterns):
        trials = np.nonzero(inverse == p_idx)[0]
        decoded = tuple(s for s, ok in zip(plan.selected, pattern) if ok)
        if decoded:
            z = y[np.ix_(trials, np.nonzero(pattern)[0])]
            est = ev.conditional_mean(plan.selected, plan.bits, decoded, z, model.mean)
        else:
            est = np.broadcast_to(model.mean, (trials.size, model.size))
        sq_err[trials] = np.sum((theta[trials] - est) ** 2, axis=1)
    return float(sq_err.mean()), float(sq_err.std(ddof=1) / np.sqrt(n_trials))


def run_consistency(cfg: dict, out_dir=None) -> list[dict]:
    """Small random instances: analytic error versus simulated chain, with z-scores."""
    ccfg = cfg["consistency"]
    chash = config_hash(cfg)
    results = []
    for case_idx in range(ccfg["cases"]):
        rng = trial_rng(cfg["master_seed"], 7000 + case_idx)
        m = int(rng.integers(2, ccfg["max_sensors"] + 1))
        n = int(rng.integers(1, m + 1))
        layout = place_sensors(m, cfg["radius_m"], int(rng.integers(2**62)))
        varphi = float(rng.uniform(0.3, 0.95))
        prior = build_prior_cov(layout, CorrelationSpec(np.full(m, cfg["sigma_theta"]), varphi))
        noise_sd = rng.uniform(1.0, cfg["noise_std_max"], size=m)
        model = FieldModel(np.zeros(m), prior, np.diag(noise_sd**2))
        sel = tuple(int(i) for i in rng.choice(m, size=n, replace=False))
        bits = tuple(int(b) for b in rng.integers(3, 9, size=n))
        plan = SelectionPlan(sel, bits)
        kind = ccfg["kinds"][case_idx % len(ccfg["kinds"])]
        if kind == "error_free":
            pers = np.zeros(n)
            quantized = False
        elif kind == "total_outage":
            pers = np.ones(n)
            quantized = True
        else:
            pers = rng.uniform(0.05, 0.4, size=n)
            quantized = True
        margins = None if quantized else np.zeros(m)
        ev = MseEvaluator(model.prior_cov, model.noise_cov, margins=margins,
                          max_bits=8)
        analytic = sum(o.weight * ev.subset_mse(sel, bits, o.decoded)
                       for o in decoding_outcomes(plan, pers) if o.weight > 0)
        emp, se = simulate_chain(model, plan, pers, ccfg["trials"],
                                 int(rng.integers(2**62)), quantize_signals=quantized)
        z = (emp - analytic) / se if se > 0 else 0.0
        results.append({"case": case_idx, "kind": kind, "m": m, "n": n,
                        "analytic": analytic, "empirical": emp, "se": se, "z": z,
                        "config_hash": chash})
    if out_dir is not None:
        header = ["case", "kind", "m", "n", "analytic", "empirical", "se", "z", "config_hash"]
        write_csv(Path(out_dir) / "consistency.csv", header,
                  [tuple(r[h] for h in header) for r in results])
    return results


# -- real-data experiments ---------------------------------------------------------


def intel_link(cfg: dict, model: EmpiricalModel) -> tuple[LinkProfile, SensorLayout]:
    icfg = cfg["intel"]
    link_cfg = cfg["link"]
    if icfg.get("layout_path"):
        layout = load_layout(icfg["layout_path"])
        if layout.count != model.size:
            raise ValueError("layout sensor count does not match the model")
    else:
        layout = place_sensors(model.size, cfg["radius_m"], icfg.get("layout_seed", 404))
    slot = slot_from_config(link_cfg)
    table = default_mcs_table(slot, max_bits=link_cfg["max_bits"])
    gains = channel_gain(layout.distances_to_cn(), link_cfg["decay_exponent"],
                         link_cfg["fading_power"], "deterministic")
    coding = CodingModel(link_cfg["coding_model"], link_cfg.get("coding_scale", 1.0))
    link = build_link_profile(gains, dbm_to_watts(link_cfg["tx_power_dbm"]), slot, table, coding)
    return link, layout


def _interval_model(model: EmpiricalModel, t_index: int) -> FieldModel:
    return FieldModel(mean=model.mean_path[t_index],
                      prior_cov=model.prior_cov_path[t_index],
                      noise_cov=model.noise_cov_path[t_index])


def run_intel_experiments(cfg: dict, model_dir, out_dir=None) -> dict:
    """Memoryless sweep, bit sweep, and filtered evolution on the empirical model."""
    model = load_model(model_dir)
    icfg = cfg["intel"]
    chash = config_hash(cfg)
    link, _ = intel_link(cfg, model)
    opt_cfg = optimizer_from_config(cfg)
    eval_intervals = icfg.get("eval_intervals") or list(
        range(max(1, model.intervals[0] + 1), len(model.intervals) + 1,
              max(1, len(model.intervals) // icfg.get("eval_interval_count", 8))))
    rng = trial_rng(cfg["master_seed"], 9001)

    sweep_rows = []
    for fraction in icfg["active_fractions"]:
        n = _n_active(fraction, model.size)
        per_method: dict = {}
        for t in eval_intervals:
            fm = _interval_model(model, t - 1)
            if float(np.trace(fm.prior_cov)) <= 0:
                continue
            seed = int(rng.integers(2**62))
            for method in icfg["methods"]:
                scenario = Scenario(model=fm, link=link, layout=None, run_seed=seed)
                try:
                    plan = plan_for_method(method, scenario, n, opt_cfg, cfg)
                    val = normalized_mse(fm, plan, link, opt_cfg.k_max)
                    per_method.setdefault(method, []).append(val)
                except (InfeasibleSelectionError, ValueError, np.linalg.LinAlgError):
                    continue
        for method, vals in per_method.items():
            sweep_rows.append((100.0 * fraction, n, method, float(np.mean(vals)),
                               len(vals), chash))

    bit_rows = []
    for fraction in icfg.get("bit_sweep_fractions", [0.1, 0.2, 0.3]):
        n = _n_active(fraction, model.size)
        for bits in range(1, link.max_bits + 1):
            vals = []
            for t in eval_intervals:
                fm = _interval_model(model, t - 1)
                if float(np.trace(fm.prior_cov)) <= 0:
                    continue
                try:
                    plan, _ = optimize_rows_only(fm, link, n, opt_cfg, bits,
                                                 rng_seed=int(rng.integers(2**62)))
                    vals.append(normalized_mse(fm, plan, link, opt_cfg.k_max))
                except (InfeasibleSelectionError, ValueError, np.linalg.LinAlgError):
                    continue
            if vals:
                bit_rows.append((100.0 * fraction, n, bits, float(np.mean(vals)),
                                 len(vals), chash))

    n_temporal = max(1, round(icfg.get("temporal_fraction", 1.0 / 30.0) * model.size))
    t_count = len(model.intervals)
    first = _interval_model(model, 0)
    dyn = DynamicsModel(frames=t_count,
                        transition=np.stack([a * np.eye(model.size) for a in model.alpha_path]),
                        process_noise_cov=model.process_cov_path,
                        noise_cov_path=model.noise_cov_path,
                        mean_path=model.mean_path,
                        prior_cov_path=model.prior_cov_path)
    horizon = run_horizon(first, dyn, link, n_temporal, opt_cfg,
                          rng_seed=int(rng.integers(2**62)),
                          optimizer=icfg.get("temporal_optimizer", "separate"))
    temporal_rows = [(r.frame, r.nmse, r.realized_sq_error, chash) for r in horizon.records]

    xi_rows = []
    for t in range(1, t_count):
        den = np.linalg.norm(model.prior_cov_path[t])
        if den == 0:
            continue
        implied = model.alpha_path[t] ** 2 * model.prior_cov_path[t - 1] + model.process_cov_path[t]
        xi_rows.append((t + 1, float(np.linalg.norm(implied - model.prior_cov_path[t]) / den), chash))

    if out_dir is not None:
        out = Path(out_dir)
        write_csv(out / "intel_selection_sweep.csv",
                  ["active_pct", "n_active", "method", "nmse_mean", "intervals", "config_hash"],
                  sweep_rows)
        write_csv(out / "intel_bit_sweep.csv",
                  ["active_pct", "n_active", "bits", "nmse_mean", "intervals", "config_hash"],
                  bit_rows)
        write_csv(out / "intel_temporal.csv",
                  ["frame", "nmse", "realized_sq_error", "config_hash"], temporal_rows)
        write_csv(out / "intel_model_error.csv", ["interval", "xi", "config_hash"], xi_rows)
    return {"selection": sweep_rows, "bits": bit_rows, "temporal": temporal_rows, "xi": xi_rows}
