"""Statistical estimators and hypothesis checks for the trajectory ensembles.

All estimators are built from per-record sufficient statistics combined by
associative merges, so evaluating a concatenated ensemble and merging
per-shard accumulators give identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt

import numpy as np
from scipy.special import kolmogorov, ndtr

from .coefficients import CoefficientTable
from .engine import GAMMA_R, EventSummary, TrajectoryRecord
from .potential import PotentialSpec, component_sup


# ---------------------------------------------------------------------------
# distribution comparisons


def ks_statistic_two_sample(a, b) -> float:
    """sup_x |F_a(x) - F_b(x)| from the pooled sorted samples."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / len(a)
    cdf_b = np.searchsorted(b, pooled, side="right") / len(b)
    return float(np.abs(cdf_a - cdf_b).max())


def ks_two_sample(a, b):
    """(statistic, asymptotic p-value) for the two-sample test."""
    d = ks_statistic_two_sample(a, b)
    n, m = len(a), len(b)
    n_eff = n * m / (n + m)
    return d, float(kolmogorov(sqrt(n_eff) * d))


def ks_gaussian(a):
    """One-sample KS against the standard normal."""
    a = np.sort(np.asarray(a, dtype=float))
    n = len(a)
    cdf = ndtr(a)
    d_plus = np.max(np.arange(1, n + 1) / n - cdf)
    d_minus = np.max(cdf - np.arange(0, n) / n)
    d = float(max(d_plus, d_minus))
    return d, float(kolmogorov(sqrt(n) * d))


def wasserstein1(a, b) -> float:
    """1-d Wasserstein distance as the L1 distance between quantile functions
    (sorted-sample difference for equal sizes, CDF-area integral otherwise)."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if len(a) == len(b):
        return float(np.mean(np.abs(a - b)))
    pts = np.concatenate([a, b])
    pts.sort(kind="mergesort")
    deltas = np.diff(pts)
    cdf_a = np.searchsorted(a, pts[:-1], side="right") / len(a)
    cdf_b = np.searchsorted(b, pts[:-1], side="right") / len(b)
    return float(np.sum(np.abs(cdf_a - cdf_b) * deltas))


def distribution_tests(sample_a, sample_b=None, gaussian_reference: bool = False) -> dict:
    """Per-coordinate KS (+ |V|) and Wasserstein-1 comparisons.

    sample_b = None with gaussian_reference compares against the standard
    normal coordinate-wise.
    """
    A = np.atleast_2d(np.asarray(sample_a, dtype=float))
    out = {"per_coordinate": [], "speed": None}
    if sample_b is None:
        if not gaussian_reference:
            raise ValueError("need a second sample or gaussian_reference=True")
        for j in range(A.shape[1]):
            d, p = ks_gaussian(A[:, j])
            out["per_coordinate"].append({"ks": d, "p": p})
        return out
    B = np.atleast_2d(np.asarray(sample_b, dtype=float))
    for j in range(A.shape[1]):
        d, p = ks_two_sample(A[:, j], B[:, j])
        out["per_coordinate"].append(
            {"ks": d, "p": p, "w1": wasserstein1(A[:, j], B[:, j])})
    da, pa = ks_two_sample(np.linalg.norm(A, axis=1), np.linalg.norm(B, axis=1))
    out["speed"] = {"ks": da, "p": pa}
    return out


def wilson_interval(k: int, n: int, z: float = 1.96):
    """Wilson score interval for a binomial proportion."""
    if n == 0:
        return 0.0, 1.0
    p = k / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(center - half, 0.0), min(center + half, 1.0)


# ---------------------------------------------------------------------------
# test function bundles for the martingale residual


@dataclass(frozen=True)
class TestFunctionBundle:
    """f with its derivatives plus past-window factors g_1..g_n."""

    f: callable
    grad_f: callable
    hess_f: callable
    g: tuple = ()
    name: str = "f"

    @staticmethod
    def coordinate(j: int = 0, d: int = 4) -> "TestFunctionBundle":
        e = np.zeros(d)
        e[j] = 1.0
        return TestFunctionBundle(
            f=lambda v: float(v[..., j]) if v.ndim == 1 else v[..., j],
            grad_f=lambda v: np.broadcast_to(e, v.shape).copy(),
            hess_f=lambda v: np.zeros(v.shape + (d,)),
            name=f"v{j + 1}",
        )

    @staticmethod
    def speed_squared(d: int = 4) -> "TestFunctionBundle":
        return TestFunctionBundle(
            f=lambda v: np.sum(v * v, axis=-1),
            grad_f=lambda v: 2.0 * v,
            hess_f=lambda v: np.broadcast_to(2.0 * np.eye(d), v.shape + (d,)).copy(),
            name="|v|^2",
        )

    @staticmethod
    def exp_window(center=0.0, width: float = 2.0) -> callable:
        return lambda v: np.exp(-np.sum((v - center) ** 2, axis=-1) / (2.0 * width**2))


def generator_on_samples(V, table: CoefficientTable, bundle: TestFunctionBundle):
    """L f(V) = 2 grad f . Lambda + Hess f : D on rows of V."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    Lam, a, b, vhat, u = table.drift_diffusion(V)
    grads = bundle.grad_f(V)
    hess = bundle.hess_f(V)
    drift = 2.0 * np.einsum("ij,ij->i", grads, Lam)
    # D : H = a (vhat.H vhat) + b (tr H - vhat.H vhat)
    hvv = np.einsum("ij,ijk,ik->i", vhat, hess, vhat)
    trH = np.einsum("ijj->i", hess)
    hvv = np.where(u > 0, hvv, trH / V.shape[1])
    return drift + a * hvv + b * (trH - hvv)


def martingale_residual(records: list[TrajectoryRecord] | list, bundle: TestFunctionBundle,
                        tau_pair, N: float, table: CoefficientTable,
                        g_windows=None):
    """Monte Carlo residual of the martingale formulation.

    For each record, with microscopic times t = tau * N,
        res = prod_i g_i(V_{tau_i N}) * ( f(V_{tau2 N}) - f(V_{tau1 N})
               - (1/N) int_{tau1 N}^{tau2 N} L f(V_t) dt ),
    the integral by the trapezoid rule on the recording stride.
    Returns (mean, standard error).
    """
    tau1, tau2 = tau_pair
    vals = np.empty(len(records))
    for i, rec in enumerate(records):
        times = rec.sample_times
        V = rec.V_samples
        t1, t2 = tau1 * N, tau2 * N
        spacing = times[1] - times[0]
        if t2 > times[-1] + spacing:
            raise ValueError("tau grid outside record range")
        k1 = int(np.argmin(np.abs(times - t1)))
        k2 = int(np.argmin(np.abs(times - t2)))
        seg = V[k1:k2 + 1]
        lf = generator_on_samples(seg, table, bundle)
        integral = float(np.trapezoid(lf, times[k1:k2 + 1]))
        val = bundle.f(V[k2]) - bundle.f(V[k1]) - integral / N
        if g_windows:
            for g, tau_g in g_windows:
                kg = int(np.argmin(np.abs(times - tau_g * N)))
                val *= float(g(V[kg]))
        vals[i] = val
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / sqrt(len(vals)))
    return mean, se


# ---------------------------------------------------------------------------
# increment moments / Kolmogorov exponents


@dataclass
class ExponentFit:
    p: int
    gaps: np.ndarray
    moments: np.ndarray
    slope: float
    stderr: float
    intercept: float


def increment_moments(records, gaps, p: int, N: float):
    """E |V_t - V_s|^p pooled over records and over time translations."""
    gaps = np.asarray(gaps, dtype=float)
    sums = np.zeros(len(gaps))
    counts = np.zeros(len(gaps), dtype=np.int64)
    for rec in records:
        times = rec.sample_times
        dtc = times[1] - times[0]
        V = rec.V_samples
        for gi, gap in enumerate(gaps):
            k = int(round(gap / dtc))
            if k < 1 or k >= len(times):
                continue
            dv = V[k:] - V[:-k]
            mag = np.sqrt(np.einsum("ij,ij->i", dv, dv))
            sums[gi] += float(np.sum(mag**p))
            counts[gi] += mag.shape[0]
    moments = sums / np.maximum(counts, 1)
    return moments, counts


def increment_exponent(records, p: int, gaps, N: float) -> ExponentFit:
    """Least-squares slope of log E|V_t - V_s|^p against log(|t-s|/N)."""
    if len(records) < 2:
        raise ValueError("need an ensemble of records")
    moments, counts = increment_moments(records, gaps, p, N)
    ok = (moments > 0) & (counts > 0)
    x = np.log(np.asarray(gaps, dtype=float)[ok] / N)
    y = np.log(moments[ok])
    if len(x) < 2:
        raise ValueError("not enough usable gaps")
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    yhat = A @ coef
    dof = max(len(x) - 2, 1)
    s2 = float(np.sum((y - yhat) ** 2)) / dof
    cov = s2 * np.linalg.inv(A.T @ A)
    return ExponentFit(p=p, gaps=np.asarray(gaps, float)[ok], moments=moments[ok],
                       slope=float(coef[0]), stderr=float(np.sqrt(cov[0, 0])),
                       intercept=float(coef[1]))


# ---------------------------------------------------------------------------
# good-set / better-set fluctuation diagnostics


@dataclass
class FluctuationReport:
    delta: float
    alpha: float
    beta: float
    n_records: int
    pointwise_threshold: float          # N^{delta/2} (per eq-style |sum|/sqrt(N))
    pointwise_sup: dict                 # per order: max over records
    pointwise_violations: dict          # per order: fraction of records violating
    interacting_sup: int
    interacting_ratio: float            # sup #interacting / N (the fitted C_int)
    tm_sum_sups: np.ndarray             # per k: max over records of sup_t sums
    tm_sum_ratios: np.ndarray           # against N^{1+delta} * (N^{(k-3)/3} if k>3)
    averaged_threshold_exponent: float  # alpha (checked: |int|/N <= sqrt(w/N) N^alpha)
    averaged_violation_fraction: float
    averaged_sup_ratio: float
    cutoff_violation_steps: int

    def to_dict(self):
        return {
            "delta": self.delta, "alpha": self.alpha, "beta": self.beta,
            "n_records": self.n_records,
            "pointwise_threshold": self.pointwise_threshold,
            "pointwise_sup": self.pointwise_sup,
            "pointwise_violations": self.pointwise_violations,
            "interacting_sup": self.interacting_sup,
            "interacting_ratio": self.interacting_ratio,
            "tm_sum_sups": [float(x) for x in self.tm_sum_sups],
            "tm_sum_ratios": [float(x) for x in self.tm_sum_ratios],
            "averaged_violation_fraction": self.averaged_violation_fraction,
            "averaged_sup_ratio": self.averaged_sup_ratio,
            "cutoff_violation_steps": self.cutoff_violation_steps,
        }


def better_set_exponents(d: int, delta: float):
    """(alpha*, beta*) = (1/(4(d+2)) + delta, (2d^2+5d+4)/(2(d+2)(d+4)) - delta)."""
    alpha = 1.0 / (4.0 * (d + 2)) + delta
    beta = (2.0 * d * d + 5.0 * d + 4.0) / (2.0 * (d + 2) * (d + 4)) - delta
    return alpha, beta


def fluctuation_diagnostics(records, spec: PotentialSpec, N: float,
                            delta: float = 0.3, alpha: float | None = None,
                            beta: float | None = None) -> FluctuationReport:
    """Good-set / better-set checks from the engine's force-moment accumulators.

    (a) sup_t |N^{-1/2} sum d_I phi| against N^{delta/2} for |I| in {1,2,3};
    (b) sup interacting count against C N;
    (c) sup_t sum (T_m ^ N^{1/3})^k against N^{1+delta} (k<=3) or
        N^{k/3+delta} scalings;
    (d) time-averaged |N^{-1} int sum d_I phi| over windows w <= N^beta
        against sqrt(w/N) N^alpha.
    """
    if alpha is None or beta is None:
        a_star, b_star = better_set_exponents(spec.d, delta)
        alpha = a_star if alpha is None else alpha
        beta = b_star if beta is None else beta
    fms = [r.force_moments for r in records]
    if any(fm is None for fm in fms):
        raise ValueError("records lack force-moment accumulators "
                         "(run with emit_force_moments=True)")
    thr = N ** (delta / 2.0)
    # normalize each order by sup |d_I phi| so the lemma constants are O(1)
    norms = {k: max(component_sup(spec, k), 1e-300) for k in (1, 2, 3)}
    sups = {1: 0.0, 2: 0.0, 3: 0.0}
    viol = {1: 0, 2: 0, 3: 0}
    tm_sups = np.zeros(6)
    sup_inball = 0
    cutoff = 0
    n_pairs = 0
    n_viol_avg = 0
    sup_ratio_avg = 0.0
    for fm in fms:
        vals = {1: fm.sup_grad / (sqrt(N) * norms[1]),
                2: fm.sup_hess / (sqrt(N) * norms[2]),
                3: fm.sup_third / (sqrt(N) * norms[3])}
        for k in (1, 2, 3):
            sups[k] = max(sups[k], vals[k])
            viol[k] += vals[k] > thr
        tm_sups = np.maximum(tm_sups, fm.sup_tm_sums)
        sup_inball = max(sup_inball, fm.sup_inball)
        cutoff += fm.cutoff_violations
        # (d): window averages from the cumulative integrals
        times = np.asarray(fm.times)
        cumg = np.asarray(fm.cum_grad)
        w_max = N**beta
        for j in range(len(times)):
            upper = np.searchsorted(times, times[j] + w_max, side="right")
            for k in range(j + 1, upper):
                w = times[k] - times[j]
                if w <= 0:
                    continue
                lhs = np.linalg.norm(cumg[k] - cumg[j]) / N
                rhs = sqrt(w / N) * N**alpha
                n_pairs += 1
                sup_ratio_avg = max(sup_ratio_avg, lhs / rhs)
                n_viol_avg += lhs > rhs
    k_arr = np.arange(1, 7)
    scale = N ** (1.0 + delta) * np.where(k_arr > 3, N ** ((k_arr - 3) / 3.0), 1.0)
    return FluctuationReport(
        delta=delta, alpha=alpha, beta=beta, n_records=len(records),
        pointwise_threshold=thr,
        pointwise_sup={k: float(v) for k, v in sups.items()},
        pointwise_violations={k: viol[k] / len(records) for k in viol},
        interacting_sup=int(sup_inball),
        interacting_ratio=float(sup_inball / N),
        tm_sum_sups=tm_sups,
        tm_sum_ratios=tm_sups / scale,
        averaged_threshold_exponent=alpha,
        averaged_violation_fraction=n_viol_avg / max(n_pairs, 1),
        averaged_sup_ratio=float(sup_ratio_avg),
        cutoff_violation_steps=int(cutoff),
    )


# ---------------------------------------------------------------------------
# interaction / recollision rates across an N sweep


@dataclass
class RecollisionRow:
    N: float
    n_interacting: int
    n_recollisions: int
    frequency: float
    wilson_low: float
    wilson_high: float
    within_bound_fraction: float
    slow_fraction: float


def interaction_recollision_stats(summaries_by_N: dict) -> list[RecollisionRow]:
    """Per-N recollision frequency (Wilson intervals), duration/T_m bound
    fractions, and slow-particle flags at u < N^{-gamma_r}, gamma_r = 5/18."""
    rows = []
    for N in sorted(summaries_by_N):
        summaries: list[EventSummary] = summaries_by_N[N]
        n_int = sum(s.n_interacting for s in summaries)
        n_rec = sum(s.n_recollisions for s in summaries)
        n_ev = sum(s.n_events for s in summaries)
        ok = sum(s.within_bound_fraction * s.n_events for s in summaries)
        slow = sum(s.slow_fraction * s.n_events for s in summaries)
        lo, hi = wilson_interval(n_rec, max(n_int, 1))
        rows.append(RecollisionRow(
            N=N, n_interacting=n_int, n_recollisions=n_rec,
            frequency=n_rec / max(n_int, 1), wilson_low=lo, wilson_high=hi,
            within_bound_fraction=ok / max(n_ev, 1),
            slow_fraction=slow / max(n_ev, 1),
        ))
    return rows


# ---------------------------------------------------------------------------
# report container


@dataclass
class DiagnosticsReport:
    checks: list = field(default_factory=list)

    def add(self, name: str, statistic: float, uncertainty: float,
            threshold: float, passed: bool, note: str = ""):
        self.checks.append({
            "name": name, "statistic": float(statistic),
            "uncertainty": float(uncertainty), "threshold": float(threshold),
            "passed": bool(passed), "note": note,
        })

    @property
    def all_passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    def to_dict(self):
        return {"checks": self.checks, "all_passed": self.all_passed}
