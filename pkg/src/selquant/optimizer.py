"""Greedy optimization of the selection plan and bit allocation.

Coordinate sweeps over selection rows and per-sensor bit counts against the
truncated error bound, plus the reference baselines (random, channel-gain,
error-free). Candidate scans are evaluated in stacked batches.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .estimator import MseEvaluator, SelectionPlan
from .field import FieldModel
from .util import as_rng, plan_hash, write_csv


class InfeasiblePowerError(ValueError):
    """No selection of the requested size satisfies the power cap."""


class InfeasibleSelectionError(ValueError):
    """Fewer admissible sensors than selection slots."""


@dataclass
class OptimizerConfig:
    k_max: int = 5
    max_bits: int = 8
    power_cap: float | None = None  # None: cap never binds (uniform-power regime)
    mse_tolerance: float = 1e-9     # relative improvement needed to accept/continue
    max_sweeps: int = 60            # safety cap on passes per loop level


@dataclass
class OptimizerTrace:
    """Bound value and plan snapshot after every pass, plus trial accounting."""

    values: list[float] = field(default_factory=list)
    plans: list[SelectionPlan] = field(default_factory=list)
    stages: list[str] = field(default_factory=list)
    trials_per_sweep: list[int] = field(default_factory=list)
    elapsed: list[float] = field(default_factory=list)
    termination: str = ""

    def record(self, stage: str, value: float, plan: SelectionPlan, trials: int, t0: float):
        self.stages.append(stage)
        self.values.append(float(value))
        self.plans.append(plan)
        self.trials_per_sweep.append(int(trials))
        self.elapsed.append(time.perf_counter() - t0)

    @property
    def final_value(self) -> float:
        return self.values[-1]

    def to_csv(self, path) -> None:
        header = ["iteration", "stage", "eps_bound", "plan_hash", "trials", "elapsed_s"]
        rows = [
            (i, st, v, plan_hash(p.selected, p.bits), tr, el)
            for i, (st, v, p, tr, el) in enumerate(
                zip(self.stages, self.values, self.plans, self.trials_per_sweep, self.elapsed))
        ]
        write_csv(path, header, rows)


def _effective_k(k_max: int, n_active: int) -> int:
    return min(k_max, n_active - 1)


def _build_evaluator(model: FieldModel, link, config: OptimizerConfig) -> MseEvaluator:
    return MseEvaluator(model.prior_cov, model.noise_cov, per_table=link.per_table,
                        max_bits=min(config.max_bits, link.max_bits))


class _GreedySearch:
    """Shared sweep machinery over an evaluator, powers, and a power cap."""

    def __init__(self, evaluator: MseEvaluator, powers: np.ndarray, config: OptimizerConfig,
                 n_active: int, allowed: np.ndarray | None = None):
        self.ev = evaluator
        self.powers = np.asarray(powers, dtype=float)
        self.cap = np.inf if config.power_cap is None else float(config.power_cap)
        if config.power_cap is not None and config.power_cap <= 0:
            raise ValueError("power cap must be positive")
        self.cfg = config
        self.n = int(n_active)
        self.m = evaluator.size
        if not (1 <= self.n <= self.m):
            raise ValueError(f"need 1 <= N <= M, got N={self.n}, M={self.m}")
        self.allowed = np.arange(self.m) if allowed is None else np.asarray(allowed, dtype=int)
        if self.allowed.size < self.n:
            raise InfeasibleSelectionError(
                f"only {self.allowed.size} admissible sensors for {self.n} slots")
        self.k = _effective_k(config.k_max, self.n)
        self._slack = 1e-12 * max(1.0, np.max(np.abs(self.powers)))
        self.check_feasible()

    def check_feasible(self):
        cheapest = np.sort(self.powers[self.allowed])[: self.n]
        if cheapest.sum() > self.cap + self._slack:
            raise InfeasiblePowerError(
                f"cheapest {self.n} sensors consume {cheapest.sum():.6g} W > cap {self.cap:.6g} W")

    def random_selection(self, rng: np.random.Generator) -> np.ndarray:
        for _ in range(1000):
            sel = rng.choice(self.allowed, size=self.n, replace=False)
            if self.powers[sel].sum() <= self.cap + self._slack:
                return sel.astype(int)
        order = np.argsort(self.powers[self.allowed], kind="stable")
        return self.allowed[order[: self.n]].astype(int)

    def value(self, sel: np.ndarray, bits_full: np.ndarray) -> float:
        return self.ev.bounded_mse(sel, bits_full[sel], self.k)

    def improved(self, before: float, after: float) -> bool:
        return (before - after) > self.cfg.mse_tolerance * max(abs(before), 1e-300)

    def _row_candidates(self, sel: np.ndarray, slot: int) -> np.ndarray:
        taken = set(sel.tolist())
        cands = [sel[slot]] + [c for c in self.allowed.tolist() if c not in taken]
        cands = np.asarray(cands, dtype=int)
        consumed = self.powers[sel].sum()
        ok = consumed - self.powers[sel[slot]] + self.powers[cands] <= self.cap + self._slack
        return cands[ok]

    def row_pass(self, sel, bits_full, cur_val):
        """One sweep over all rows; each slot scans its M-N+1 candidate sensors."""
        trials = 0
        for slot in range(self.n):
            cands = self._row_candidates(sel, slot)
            cand_sel = np.repeat(sel[None, :], cands.size, axis=0)
            cand_sel[:, slot] = cands
            vals = self.ev.bounded_mse_batch(cand_sel, bits_full[cand_sel], self.k)
            trials += cands.size
            best = int(np.argmin(vals))
            if cands[best] != sel[slot] and self.improved(cur_val, vals[best]):
                sel = cand_sel[best]
                cur_val = float(vals[best])
        return sel, cur_val, trials

    def bit_pass(self, sel, bits_full, cur_val):
        """One sweep over the selected sensors (ascending index), scanning all bit values."""
        b = self.ev.max_bits
        trials = 0
        for sensor in sorted(sel.tolist()):
            slot = int(np.nonzero(sel == sensor)[0][0])
            cand_bits = np.repeat(bits_full[sel][None, :], b, axis=0)
            cand_bits[:, slot] = np.arange(1, b + 1)
            vals = self.ev.bounded_mse_batch(np.repeat(sel[None, :], b, axis=0), cand_bits, self.k)
            trials += b
            best = int(np.argmin(vals))
            if best + 1 != bits_full[sensor] and self.improved(cur_val, vals[best]):
                bits_full = bits_full.copy()
                bits_full[sensor] = best + 1
                cur_val = float(vals[best])
        return bits_full, cur_val, trials

    def joint_pass(self, sel, bits_full, cur_val):
        """One sweep over rows; each slot scans (candidate sensor, bit slot, bit value)
        moves, i.e. a swap combined with one bit reassignment anywhere in the plan."""
        b = self.ev.max_bits
        trials = 0
        for slot in range(self.n):
            cands = self._row_candidates(sel, slot)
            c = cands.size
            base_sel = np.repeat(sel[None, :], c, axis=0)
            base_sel[:, slot] = cands
            base_bits = bits_full[base_sel]
            moves = self.n * b
            sel_stack = np.repeat(base_sel, moves, axis=0)
            bits_stack = np.repeat(base_bits, moves, axis=0)
            s_idx = np.tile(np.repeat(np.arange(self.n), b), c)
            b_val = np.tile(np.arange(1, b + 1), self.n * c)
            bits_stack[np.arange(c * moves), s_idx] = b_val
            vals = self.ev.bounded_mse_batch(sel_stack, bits_stack, self.k)
            trials += c * moves
            best = int(np.argmin(vals))
            if self.improved(cur_val, vals[best]):
                sel = sel_stack[best].copy()
                new_bits = bits_stack[best]
                bits_full = bits_full.copy()
                bits_full[sel] = new_bits
                cur_val = float(vals[best])
        return sel, bits_full, cur_val, trials


def _prepare_state(search: _GreedySearch, initial_plan: SelectionPlan | None,
                   rng_seed, bits_init: int = 1):
    bits_full = np.full(search.m, bits_init, dtype=int)
    if initial_plan is not None:
        sel = np.asarray(initial_plan.selected, dtype=int)
        if sel.size != search.n:
            raise ValueError("initial plan size does not match n_active")
        if search.powers[sel].sum() > search.cap + search._slack:
            raise InfeasiblePowerError("initial plan violates the power cap")
        bits_full[sel] = initial_plan.bits
    else:
        sel = search.random_selection(as_rng(rng_seed))
    return sel, bits_full


def _as_plan(sel: np.ndarray, bits_full: np.ndarray) -> SelectionPlan:
    return SelectionPlan(selected=tuple(int(i) for i in sel),
                         bits=tuple(int(b) for b in bits_full[sel]))


def optimize_separate(model: FieldModel, link, n_active: int, config: OptimizerConfig,
                      initial_plan: SelectionPlan | None = None, rng_seed=0
                      ) -> tuple[SelectionPlan, OptimizerTrace]:
    """Alternate row sweeps and bit sweeps until the bound stops improving."""
    ev = _build_evaluator(model, link, config)
    search = _GreedySearch(ev, link.tx_power, config, n_active)
    sel, bits_full = _prepare_state(search, initial_plan, rng_seed)
    t0 = time.perf_counter()
    trace = OptimizerTrace()
    val = search.value(sel, bits_full)
    trace.record("init", val, _as_plan(sel, bits_full), 0, t0)
    trace.termination = "max_sweeps"
    for _ in range(config.max_sweeps):
        outer_before = val
        for _ in range(config.max_sweeps):
            before = val
            sel, val, trials = search.row_pass(sel, bits_full, val)
            trace.record("rows", val, _as_plan(sel, bits_full), trials, t0)
            if not search.improved(before, val):
                break
        for _ in range(config.max_sweeps):
            before = val
            bits_full, val, trials = search.bit_pass(sel, bits_full, val)
            trace.record("bits", val, _as_plan(sel, bits_full), trials, t0)
            if not search.improved(before, val):
                break
        if not search.improved(outer_before, val):
            trace.termination = "converged"
            break
    return _as_plan(sel, bits_full), trace


def optimize_joint(model: FieldModel, link, n_active: int, config: OptimizerConfig,
                   initial_plan: SelectionPlan | None = None, rng_seed=0
                   ) -> tuple[SelectionPlan, OptimizerTrace]:
    """Row sweeps whose moves combine a sensor swap with one bit reassignment."""
    ev = _build_evaluator(model, link, config)
    search = _GreedySearch(ev, link.tx_power, config, n_active)
    sel, bits_full = _prepare_state(search, initial_plan, rng_seed)
    t0 = time.perf_counter()
    trace = OptimizerTrace()
    val = search.value(sel, bits_full)
    trace.record("init", val, _as_plan(sel, bits_full), 0, t0)
    trace.termination = "max_sweeps"
    for _ in range(config.max_sweeps):
        before = val
        sel, bits_full, val, trials = search.joint_pass(sel, bits_full, val)
        trace.record("joint", val, _as_plan(sel, bits_full), trials, t0)
        if not search.improved(before, val):
            trace.termination = "converged"
            break
    return _as_plan(sel, bits_full), trace


def optimize_rows_only(model: FieldModel, link, n_active: int, config: OptimizerConfig,
                       bits_full, rng_seed=0, allowed=None,
                       initial_selection=None) -> tuple[SelectionPlan, OptimizerTrace]:
    """Selection-only sweeps with a frozen per-sensor bit vector."""
    ev = _build_evaluator(model, link, config)
    search = _GreedySearch(ev, link.tx_power, config, n_active, allowed=allowed)
    bits_full = np.broadcast_to(np.asarray(bits_full, dtype=int), (search.m,)).copy()
    if initial_selection is not None:
        sel = np.asarray(initial_selection, dtype=int)
    else:
        sel = search.random_selection(as_rng(rng_seed))
    t0 = time.perf_counter()
    trace = OptimizerTrace()
    val = search.value(sel, bits_full)
    trace.record("init", val, _as_plan(sel, bits_full), 0, t0)
    trace.termination = "max_sweeps"
    for _ in range(config.max_sweeps):
        before = val
        sel, val, trials = search.row_pass(sel, bits_full, val)
        trace.record("rows", val, _as_plan(sel, bits_full), trials, t0)
        if not search.improved(before, val):
            trace.termination = "converged"
            break
    return _as_plan(sel, bits_full), trace


# -- baselines ----------------------------------------------------------------


def baseline_random(model: FieldModel, link, n_active: int, bits_fixed: int,
                    rng_seed, config: OptimizerConfig | None = None) -> SelectionPlan:
    """Uniformly random feasible selection, all sensors at the same bit count."""
    config = config or OptimizerConfig()
    ev = _build_evaluator(model, link, config)
    search = _GreedySearch(ev, link.tx_power, config, n_active)
    sel = search.random_selection(as_rng(rng_seed))
    return SelectionPlan(selected=tuple(int(i) for i in sel),
                         bits=(int(bits_fixed),) * n_active)


def baseline_channel_gain(model: FieldModel, link, n_active: int, bits_fixed: int,
                          config: OptimizerConfig | None = None) -> SelectionPlan:
    """Pick the strongest channels (ties resolved toward lower sensor index)."""
    config = config or OptimizerConfig()
    order = np.argsort(-link.gains, kind="stable")
    sel = order[:n_active]
    cap = np.inf if config.power_cap is None else config.power_cap
    if link.tx_power[sel].sum() > cap + 1e-12 * max(1.0, np.max(link.tx_power)):
        raise InfeasiblePowerError("gain-ranked selection violates the power cap")
    return SelectionPlan(selected=tuple(int(i) for i in sel),
                         bits=(int(bits_fixed),) * n_active)


def baseline_error_free(model: FieldModel, link, n_active: int,
                        config: OptimizerConfig | None = None,
                        per_ceiling: float = 1e-3, rng_seed=0) -> SelectionPlan:
    """Fix each sensor at the largest bit count whose PER stays below the
    ceiling, then optimize the selection rows only."""
    config = config or OptimizerConfig()
    max_bits = min(config.max_bits, link.max_bits)
    per = link.per_table[:, :max_bits]
    admissible = per <= per_ceiling
    best_bits = np.where(admissible.any(axis=1),
                         max_bits - np.argmax(admissible[:, ::-1], axis=1), 0)
    allowed = np.nonzero(best_bits > 0)[0]
    if allowed.size < n_active:
        raise InfeasibleSelectionError(
            f"only {allowed.size} sensors meet PER <= {per_ceiling:g}; need {n_active}")
    bits_full = np.maximum(best_bits, 1)
    plan, _ = optimize_rows_only(model, link, n_active, config, bits_full,
                                 rng_seed=rng_seed, allowed=allowed)
    return plan
