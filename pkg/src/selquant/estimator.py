"""Linear MMSE estimation under selection, quantization noise, and packet loss.

The decode-set-conditioned error is evaluated in closed form; the overall
error averages it over every decode outcome, weighted by packet success
probabilities. A truncated version allows at most K lost packets and charges
the prior trace for everything rarer.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dataclass_field
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .field import FieldModel
from .quantizer import quant_noise_variances

DEFAULT_ENUM_CAP = 20
_PIVOT_RTOL = 1e-12


class SingularSubsetError(np.linalg.LinAlgError):
    """The innovation matrix for a decode subset is singular within tolerance."""

    def __init__(self, subset, detail=""):
        self.subset = tuple(subset)
        super().__init__(f"singular innovation covariance for decode subset {self.subset} {detail}".strip())


class EnumerationCapError(ValueError):
    """Too many selected sensors for exact 2**N enumeration; use bounded_mse."""


@dataclass(frozen=True)
class SelectionPlan:
    """Ordered distinct sensor indices plus the bit allocation of each slot."""

    selected: tuple[int, ...]
    bits: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "selected", tuple(int(i) for i in self.selected))
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        if len(self.selected) < 1:
            raise ValueError("a plan must select at least one sensor")
        if len(set(self.selected)) != len(self.selected):
            raise ValueError("selected sensor indices must be distinct")
        if len(self.bits) != len(self.selected):
            raise ValueError("bits must align with selected sensors")
        if any(b < 1 for b in self.bits):
            raise ValueError("bit counts must be >= 1")

    @property
    def n_active(self) -> int:
        return len(self.selected)

    def as_matrix(self, m: int) -> np.ndarray:
        v = np.zeros((self.n_active, m))
        v[np.arange(self.n_active), list(self.selected)] = 1.0
        return v

    def bits_of(self, sensor: int) -> int:
        return self.bits[self.selected.index(sensor)]


@dataclass(frozen=True)
class DecodingOutcome:
    """A decode set (sensor ids in slot order) with its probability weight."""

    decoded: tuple[int, ...]
    weight: float


@dataclass
class MseReport:
    """Exact error-averaged MSE, its truncated bound, and per-subset terms."""

    exact: float
    bound: float
    k_max: int
    trace_prior: float
    per_subset: dict = dataclass_field(default_factory=dict)


@lru_cache(maxsize=None)
def _keep_drop(n: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Kept/dropped slot positions for every decode set missing exactly k packets.

    Rows ordered lexicographically by kept positions; this fixes the
    enumeration order used everywhere (increasing k, then lexicographic).
    """
    if k == n:
        return np.empty((1, 0), dtype=np.intp), np.arange(n, dtype=np.intp).reshape(1, n)
    keep = np.array(list(itertools.combinations(range(n), n - k)), dtype=np.intp)
    if k == 0:
        return keep, np.empty((1, 0), dtype=np.intp)
    mask = np.ones((keep.shape[0], n), dtype=bool)
    np.put_along_axis(mask, keep, False, axis=1)
    drop = np.nonzero(mask)[1].reshape(-1, k)
    return keep, drop


def _subset_weights(per: np.ndarray, keep: np.ndarray, drop: np.ndarray) -> np.ndarray:
    """Probability of each decode set: prod(1-PER) over kept, prod(PER) over dropped."""
    p_keep = np.prod(1.0 - per[..., keep], axis=-1) if keep.shape[1] else np.ones(per.shape[:-1] + (keep.shape[0],))
    p_drop = np.prod(per[..., drop], axis=-1) if drop.shape[1] else np.ones(per.shape[:-1] + (drop.shape[0],))
    return p_keep * p_drop


def _subset_mse_batch(t_mat: np.ndarray, g_mat: np.ndarray, keep: np.ndarray,
                      trace_prior: float) -> np.ndarray:
    """Decode-set MSE for stacked plans: trace_prior - tr(T_sub^-1 G_sub)."""
    if keep.shape[1] == 0:
        return np.full(t_mat.shape[:-2] + (keep.shape[0],), trace_prior)
    rows = keep[:, :, None]
    cols = keep[:, None, :]
    t_sub = t_mat[..., rows, cols]
    g_sub = g_mat[..., rows, cols]
    solved = np.linalg.solve(t_sub, g_sub)
    return trace_prior - np.einsum("...ii->...", solved)


class MseEvaluator:
    """Scenario-level context: restricted systems, PER lookups, subset sums.

    Margins default to the 6-sigma rule on the scenario variances; pass
    explicit margins when the prior is a filter prediction instead.
    """

    def __init__(self, prior_cov, noise_cov, margins=None, per_table=None,
                 max_bits: int = 8, enum_cap: int = DEFAULT_ENUM_CAP):
        self.prior_cov = np.asarray(prior_cov, dtype=float)
        self.noise_cov = np.asarray(noise_cov, dtype=float)
        m = self.prior_cov.shape[0]
        if self.prior_cov.shape != (m, m) or self.noise_cov.shape != (m, m):
            raise ValueError("covariances must be square and equally sized")
        self.size = m
        self.base = self.prior_cov + self.noise_cov
        self.prior_sq = self.prior_cov @ self.prior_cov
        self.trace_prior = float(np.trace(self.prior_cov))
        if margins is None:
            margins = 6.0 * np.sqrt(np.diag(self.prior_cov) + np.diag(self.noise_cov))
        self.margins = np.asarray(margins, dtype=float)
        if self.margins.shape != (m,):
            raise ValueError("margins must be a length-M vector")
        self.max_bits = int(max_bits)
        bits_axis = np.arange(1, self.max_bits + 1)
        self.delta2 = quant_noise_variances(self.margins[:, None], bits_axis[None, :])
        if per_table is not None:
            per_table = np.asarray(per_table, dtype=float)
            if per_table.shape[0] != m or per_table.shape[1] < self.max_bits:
                raise ValueError("per_table must be (M, >=max_bits)")
        self.per_table = per_table
        self.enum_cap = int(enum_cap)

    # -- plan-level assembly ------------------------------------------------

    def _check_plan(self, selected, bits):
        selected = np.asarray(selected, dtype=np.intp)
        bits = np.asarray(bits, dtype=np.intp)
        if selected.ndim != bits.ndim or selected.shape != bits.shape:
            raise ValueError("selected and bits must have matching shapes")
        if np.any(selected < 0) or np.any(selected >= self.size):
            raise ValueError("selected sensor index out of range")
        if np.any(bits < 1) or np.any(bits > self.max_bits):
            raise ValueError(f"bit counts must lie in [1, {self.max_bits}]")
        return selected, bits

    def plan_matrices(self, selected, bits) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (T, G): T = (C_prior + C_noise + C_quant) and G = C_prior^2,
        both restricted to the selected sensors. Accepts (N,) or (P, N) input."""
        selected, bits = self._check_plan(selected, bits)
        rows = selected[..., :, None]
        cols = selected[..., None, :]
        t_mat = self.base[rows, cols].copy()
        diag = np.arange(selected.shape[-1])
        t_mat[..., diag, diag] += self.delta2[selected, bits - 1]
        g_mat = self.prior_sq[rows, cols]
        return t_mat, g_mat

    def pers(self, selected, bits) -> np.ndarray:
        if self.per_table is None:
            raise ValueError("this evaluator was built without a PER table")
        selected, bits = self._check_plan(selected, bits)
        return self.per_table[selected, bits - 1]

    def _gate_conditioning(self, t_mat, selected):
        """One SPD factorization of the full restricted system; principal
        submatrices of an SPD matrix can only be better conditioned, so this
        guards every decode subset at once."""
        try:
            chol = np.linalg.cholesky(t_mat)
        except np.linalg.LinAlgError as exc:
            raise SingularSubsetError(np.atleast_2d(selected)[0], "(full selection not SPD)") from exc
        diag = np.einsum("...ii->...i", chol)
        piv = diag * diag
        bad = piv.min(axis=-1) < _PIVOT_RTOL * piv.max(axis=-1)
        if np.any(bad):
            raise SingularSubsetError(np.atleast_2d(selected)[np.argmax(bad)],
                                      "(pivot below tolerance)")

    # -- subset-level operations --------------------------------------------

    def subset_mse(self, selected, bits, decoded) -> float:
        """Single decode-set MSE via an SPD factorization of the inner matrix."""
        selected, bits = self._check_plan(np.asarray(selected), np.asarray(bits))
        decoded = tuple(int(i) for i in decoded)
        if not set(decoded) <= set(selected.tolist()):
            raise ValueError("decoded sensors must be a subset of the selected ones")
        if len(decoded) == 0:
            return self.trace_prior
        pos = {s: i for i, s in enumerate(selected.tolist())}
        idx = np.asarray(decoded, dtype=np.intp)
        bvec = bits[[pos[s] for s in decoded]]
        t_sub = self.base[np.ix_(idx, idx)].copy()
        t_sub[np.arange(idx.size), np.arange(idx.size)] += self.delta2[idx, bvec - 1]
        try:
            chol = cho_factor(t_sub, lower=True)
        except np.linalg.LinAlgError as exc:
            raise SingularSubsetError(decoded) from exc
        piv = np.diag(chol[0]) ** 2
        if piv.min() < _PIVOT_RTOL * piv.max():
            raise SingularSubsetError(decoded, "(pivot below tolerance)")
        solved = cho_solve(chol, self.prior_sq[np.ix_(idx, idx)])
        eps = self.trace_prior - float(np.trace(solved))
        tol = 1e-8 * max(self.trace_prior, 1.0)
        assert -tol <= eps <= self.trace_prior + tol, f"subset MSE {eps} outside [0, trace]"
        return float(np.clip(eps, 0.0, self.trace_prior))

    def conditional_mean(self, selected, bits, decoded, z_received, mean) -> np.ndarray:
        """MMSE estimate of the full parameter vector from the decoded entries."""
        mean = np.asarray(mean, dtype=float)
        if len(decoded) == 0:
            return mean.copy()
        selected, bits = self._check_plan(np.asarray(selected), np.asarray(bits))
        pos = {s: i for i, s in enumerate(selected.tolist())}
        idx = np.asarray([int(i) for i in decoded], dtype=np.intp)
        bvec = bits[[pos[int(s)] for s in decoded]]
        z_received = np.asarray(z_received, dtype=float)
        if z_received.shape[-1] != idx.size:
            raise ValueError("received vector length must match the decode set")
        t_sub = self.base[np.ix_(idx, idx)].copy()
        t_sub[np.arange(idx.size), np.arange(idx.size)] += self.delta2[idx, bvec - 1]
        try:
            chol = cho_factor(t_sub, lower=True)
        except np.linalg.LinAlgError as exc:
            raise SingularSubsetError(tuple(idx), ) from exc
        piv = np.diag(chol[0]) ** 2
        if piv.min() < _PIVOT_RTOL * piv.max():
            raise SingularSubsetError(tuple(idx), "(pivot below tolerance)")
        innov = z_received - mean[idx]
        if innov.ndim == 1:
            return mean + self.prior_cov[:, idx] @ cho_solve(chol, innov)
        # stacked received vectors, shape (..., |decoded|)
        solved = cho_solve(chol, innov.reshape(-1, idx.size).T).T
        return mean + solved.reshape(innov.shape[:-1] + (idx.size,)) @ self.prior_cov[:, idx].T

    # -- enumeration over decode sets ----------------------------------------

    def _accumulate(self, selected, bits, k_levels, collect=None):
        """Sum weight * subset-MSE over decode sets missing k packets, k in k_levels.

        Returns (weighted sum, total weight) per plan; zero-probability decode
        sets are skipped (their contribution is exactly zero).
        """
        selected = np.atleast_2d(np.asarray(selected, dtype=np.intp))
        bits = np.atleast_2d(np.asarray(bits, dtype=np.intp))
        t_mat, g_mat = self.plan_matrices(selected, bits)
        self._gate_conditioning(t_mat, selected)
        per = self.pers(selected, bits)
        n = selected.shape[-1]
        total = np.zeros(selected.shape[0])
        weight_seen = np.zeros(selected.shape[0])
        for k in k_levels:
            keep, drop = _keep_drop(n, k)
            weights = _subset_weights(per, keep, drop)
            weight_seen += weights.sum(axis=-1)
            live = np.nonzero(np.any(weights > 0.0, axis=0))[0]
            if live.size == 0 and collect is None:
                continue
            cols = keep if collect is not None else keep[live]
            eps = _subset_mse_batch(t_mat, g_mat, cols, self.trace_prior)
            eps = np.clip(eps, 0.0, self.trace_prior)
            if collect is not None:
                total += np.einsum("ps,ps->p", weights, eps)
                for row, kept in enumerate(cols):
                    key = tuple(sorted(int(selected[0, p]) for p in kept))
                    collect[key] = float(eps[0, row])
            else:
                total += np.einsum("ps,ps->p", weights[:, live], eps)
        return total, weight_seen

    def exact_mse(self, selected, bits) -> float:
        n = len(np.atleast_1d(selected))
        if n > self.enum_cap:
            raise EnumerationCapError(
                f"N={n} exceeds the enumeration cap {self.enum_cap}; use bounded_mse")
        total, _ = self._accumulate(selected, bits, range(n + 1))
        return float(total[0])

    def bounded_mse(self, selected, bits, k_max: int) -> float:
        return float(self.bounded_mse_batch(np.atleast_2d(selected),
                                            np.atleast_2d(bits), k_max)[0])

    def bounded_mse_batch(self, selected, bits, k_max: int, chunk: int = 256) -> np.ndarray:
        """Truncated upper bound for stacked plans, shape (P,)."""
        selected = np.atleast_2d(np.asarray(selected, dtype=np.intp))
        bits = np.atleast_2d(np.asarray(bits, dtype=np.intp))
        n = selected.shape[-1]
        if not (0 <= k_max <= n - 1):
            raise ValueError(f"k_max must lie in [0, N-1], got {k_max} for N={n}")
        out = np.empty(selected.shape[0])
        for lo in range(0, selected.shape[0], chunk):
            sl = slice(lo, lo + chunk)
            total, seen = self._accumulate(selected[sl], bits[sl], range(k_max + 1))
            residual = np.clip(1.0 - seen, 0.0, 1.0)
            out[sl] = total + residual * self.trace_prior
        return out

    def report(self, selected, bits, k_max: int) -> MseReport:
        """Exact value, bound, and the full decode-set MSE map in one pass."""
        selected = np.atleast_1d(np.asarray(selected, dtype=np.intp))
        n = selected.shape[-1]
        if n > self.enum_cap:
            raise EnumerationCapError(
                f"N={n} exceeds the enumeration cap {self.enum_cap}; use bounded_mse")
        if not (0 <= k_max <= n - 1):
            raise ValueError(f"k_max must lie in [0, N-1], got {k_max} for N={n}")
        per_subset: dict = {}
        total, _ = self._accumulate(selected, np.atleast_1d(bits), range(n + 1), collect=per_subset)
        exact = float(total[0])
        bound = self.bounded_mse(selected, np.atleast_1d(bits), k_max)
        return MseReport(exact=exact, bound=bound, k_max=k_max,
                         trace_prior=self.trace_prior, per_subset=per_subset)


# -- spec-level wrappers taking domain objects --------------------------------


def _evaluator(model: FieldModel, link=None, margins=None,
               max_bits: int | None = None, enum_cap: int = DEFAULT_ENUM_CAP) -> MseEvaluator:
    per_table = None
    if link is not None:
        per_table = link.per_table
        if max_bits is None:
            max_bits = link.max_bits
    return MseEvaluator(model.prior_cov, model.noise_cov, margins=margins,
                        per_table=per_table, max_bits=max_bits or 8, enum_cap=enum_cap)


def mmse_estimate(model: FieldModel, plan: SelectionPlan, outcome: DecodingOutcome,
                  z_received, margins=None) -> np.ndarray:
    """Conditional-mean estimate given the decoded entries of the received vector."""
    ev = _evaluator(model, margins=margins, max_bits=max(plan.bits))
    return ev.conditional_mean(plan.selected, plan.bits, outcome.decoded, z_received, model.mean)


def mse_for_subset(model: FieldModel, plan: SelectionPlan, decoded, margins=None) -> float:
    """Estimation MSE when exactly the given subset of the plan decodes."""
    ev = _evaluator(model, margins=margins, max_bits=max(plan.bits))
    return ev.subset_mse(plan.selected, plan.bits, decoded)


def averaged_mse(model: FieldModel, plan: SelectionPlan, link, margins=None,
                 enum_cap: int = DEFAULT_ENUM_CAP) -> float:
    """Error-averaged MSE over all 2**N decode outcomes."""
    ev = _evaluator(model, link=link, margins=margins, enum_cap=enum_cap)
    return ev.exact_mse(plan.selected, plan.bits)


def bounded_mse(model: FieldModel, plan: SelectionPlan, link, k_max: int,
                margins=None) -> float:
    """Truncated upper bound: exact terms up to k_max losses, worst case beyond."""
    ev = _evaluator(model, link=link, margins=margins)
    return ev.bounded_mse(plan.selected, plan.bits, k_max)


def mse_report(model: FieldModel, plan: SelectionPlan, link, k_max: int = 5,
               margins=None, enum_cap: int = DEFAULT_ENUM_CAP) -> MseReport:
    ev = _evaluator(model, link=link, margins=margins, enum_cap=enum_cap)
    return ev.report(plan.selected, plan.bits, k_max)


def decoding_outcomes(plan: SelectionPlan, per) -> list[DecodingOutcome]:
    """All decode outcomes in canonical order (loss count ascending, then lexicographic)."""
    per = np.asarray(per, dtype=float)
    n = plan.n_active
    if per.shape != (n,):
        raise ValueError("per must give one PER per selected sensor")
    out = []
    for k in range(n + 1):
        keep, drop = _keep_drop(n, k)
        weights = _subset_weights(per[None, :], keep, drop)[0]
        for row in range(keep.shape[0]):
            decoded = tuple(plan.selected[p] for p in keep[row])
            out.append(DecodingOutcome(decoded=decoded, weight=float(weights[row])))
    return out
