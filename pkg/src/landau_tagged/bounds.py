"""Numerical checks of the second-order Gronwall lemmas and the Peano-Baker
propagator for x''(t) = a(t) x(t) + b(t).

Two regimes are verified:
  * pointwise bound ||a(t)|| <= C_A / N^q, valid window t <= N^{q/2};
  * averaged bound ||int_s^t a|| <= C_A sqrt(t-s) / N^q (for t-s <= N^xi),
    valid window t <= N^{2q/3},
both giving |x(t)| + t |x'(t)| <= c t^2 sup|b| + c (|x0|^2 + t^2 |x0'|^2)^{1/2}.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import exp, factorial, sqrt

import numpy as np


@dataclass
class LinearSecondOrderProblem:
    a: callable                      # t -> (d, d)
    b: callable                      # t -> (d,)
    x0: np.ndarray
    xp0: np.ndarray
    T: float
    dim: int
    C_A: float = 1.0
    a_exponent: float = 1.0          # q in ||a|| <= C_A/N^q (or the averaged form)
    xi: float = 1.0
    N: float = 100.0
    kind: str = "pointwise"          # "pointwise" | "averaged"

    def spot_check_bound(self, n_times: int = 100) -> float:
        """max ||a(t)|| over a time grid (vs the declared C_A/N^q)."""
        ts = np.linspace(0.0, self.T, n_times)
        return max(float(np.linalg.norm(self.a(t), 2)) for t in ts)


@dataclass
class SecondOrderSolution:
    times: np.ndarray
    x: np.ndarray
    xp: np.ndarray
    error_estimate: float

    def at(self, t: float):
        k = int(np.argmin(np.abs(self.times - t)))
        return self.x[k], self.xp[k]


def _rk4(problem: LinearSecondOrderProblem, dt: float, t_end: float):
    n = int(round(t_end / dt))
    d = problem.dim
    times = np.linspace(0.0, n * dt, n + 1)
    xs = np.empty((n + 1, d))
    vs = np.empty((n + 1, d))
    x = np.asarray(problem.x0, dtype=float).copy()
    v = np.asarray(problem.xp0, dtype=float).copy()
    xs[0], vs[0] = x, v

    def rhs(t, x, v):
        return v, problem.a(t) @ x + problem.b(t)

    for k in range(n):
        t = times[k]
        k1x, k1v = rhs(t, x, v)
        k2x, k2v = rhs(t + dt / 2, x + dt / 2 * k1x, v + dt / 2 * k1v)
        k3x, k3v = rhs(t + dt / 2, x + dt / 2 * k2x, v + dt / 2 * k2v)
        k4x, k4v = rhs(t + dt, x + dt * k3x, v + dt * k3v)
        x = x + dt / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        v = v + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        xs[k + 1], vs[k + 1] = x, v
    return times, xs, vs


def solve_linear_second_order(problem: LinearSecondOrderProblem,
                              dt: float) -> SecondOrderSolution:
    """Classical RK4 on the first-order system, with a step-halving
    (Richardson) error estimate attached."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    times, xs, vs = _rk4(problem, dt, problem.T)
    _, xs2, vs2 = _rk4(problem, dt / 2.0, problem.T)
    err = float(np.max(np.linalg.norm(xs - xs2[::2], axis=1))) / 15.0
    return SecondOrderSolution(times=times, x=xs, xp=vs, error_estimate=err)


@dataclass
class GronwallReport:
    kind: str
    window: float
    c_hat: float                 # empirical sup of |x| + t|x'| over the bound
    c_hat_half_window: float     # same statistic on half the window
    hypothesis_margin: float     # declared bound / spot-checked sup of a
    passed: bool


def gronwall_check(problem: LinearSecondOrderProblem, dt: float,
                   c_cap: float | None = None) -> GronwallReport:
    """Empirical constant c_hat = sup_t (|x| + t|x'|) / (t^2 sup|b| + ic)
    over the lemma's validity window; passes when finite and stable under
    window doubling (ratio within a factor 2), and below c_cap if given."""
    q = problem.a_exponent
    window = problem.N ** (q / 2.0) if problem.kind == "pointwise" \
        else problem.N ** (2.0 * q / 3.0)
    window = min(window, problem.T)
    sup_a = problem.spot_check_bound()
    declared = problem.C_A / problem.N**q
    if problem.kind == "pointwise" and sup_a > declared * (1 + 1e-9):
        raise ValueError(f"hypothesis violated: sup||a|| = {sup_a} > {declared}")

    sol = solve_linear_second_order(problem, dt)
    ts = sol.times
    sel = (ts > 0) & (ts <= window)
    sup_b = max(float(np.linalg.norm(problem.b(t))) for t in np.linspace(0, window, 200))
    ic = np.sqrt(float(np.sum(problem.x0**2)) + ts[sel] ** 2 * float(np.sum(problem.xp0**2)))
    lhs = np.linalg.norm(sol.x[sel], axis=1) + ts[sel] * np.linalg.norm(sol.xp[sel], axis=1)
    denom = ts[sel] ** 2 * sup_b + ic
    good = denom > 0
    ratios = lhs[good] / denom[good]
    c_hat = float(ratios.max()) if ratios.size else 0.0
    half = ts[sel] <= window / 2.0
    c_half = float((lhs[half & good] / denom[half & good]).max()) if (half & good).any() else 0.0
    stable = c_hat <= 2.0 * max(c_half, 1e-12) or c_hat < 1e-9
    passed = np.isfinite(c_hat) and stable and (c_cap is None or c_hat <= c_cap)
    return GronwallReport(kind=problem.kind, window=float(window), c_hat=c_hat,
                          c_hat_half_window=c_half,
                          hypothesis_margin=float(declared / max(sup_a, 1e-300)),
                          passed=bool(passed))


def simple_lemma_constant(C_A: float) -> float:
    """Explicit constant chain from the pointwise lemma: e^{2+C_A}/(2+C_A) + 1."""
    return exp(2.0 + C_A) / (2.0 + C_A) + 1.0


def cosh_benchmark_problem(N: float, a0: float, b0: float, dim: int = 1,
                           T: float | None = None) -> LinearSecondOrderProblem:
    """x'' = N^{-a0} x + N^{-b0}, zero data: x(t) = N^{a0-b0}(cosh(t/N^{a0/2}) - 1)."""
    A = np.eye(dim) / N**a0
    bvec = np.full(dim, 1.0 / N**b0)
    return LinearSecondOrderProblem(
        a=lambda t: A, b=lambda t: bvec,
        x0=np.zeros(dim), xp0=np.zeros(dim),
        T=N ** (a0 / 2.0) if T is None else T, dim=dim,
        C_A=1.0, a_exponent=a0, N=N, kind="pointwise",
    )


def cosh_benchmark_exact(N: float, a0: float, b0: float, t):
    t = np.asarray(t, dtype=float)
    return N ** (a0 - b0) * (np.cosh(t / N ** (a0 / 2.0)) - 1.0)


def random_certified_problem(rng: np.random.Generator, dim: int, N: float,
                             a_exponent: float, C_A: float = 1.0,
                             b_scale: float = 1.0, n_modes: int = 4,
                             T: float | None = None) -> LinearSecondOrderProblem:
    """Random trigonometric a(t) with a certified averaged bound.

    Each mode M_j cos(w_j t + phi_j) satisfies ||int_s^t|| <= M_j min(t-s, 2/w_j)
    <= M_j sqrt(2 (t-s)/w_j); choosing M_j = c_j sqrt(w_j/2) / N^q with
    sum c_j = C_A gives ||int_s^t a|| <= C_A sqrt(t-s)/N^q by construction.
    """
    q = a_exponent
    mats = []
    for _ in range(n_modes):
        S = rng.standard_normal((dim, dim))
        S = 0.5 * (S + S.T)
        mats.append(S / np.linalg.norm(S, 2))
    omegas = rng.uniform(0.5, 40.0, size=n_modes)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_modes)
    c = rng.random(n_modes)
    c *= C_A / c.sum()
    amps = c * np.sqrt(omegas / 2.0) / N**q

    def a(t):
        out = np.zeros((dim, dim))
        for M, w, ph, amp in zip(mats, omegas, phases, amps):
            out += amp * np.cos(w * t + ph) * M
        return out

    b_dirs = rng.standard_normal((n_modes, dim))
    b_freqs = rng.uniform(0.2, 3.0, size=n_modes)
    b_phases = rng.uniform(0.0, 2.0 * np.pi, size=n_modes)
    b_norm = np.sum(np.linalg.norm(b_dirs, axis=1))

    def b(t):
        out = np.zeros(dim)
        for v, w, ph in zip(b_dirs, b_freqs, b_phases):
            out += v * np.cos(w * t + ph)
        return out * (b_scale / b_norm)

    horizon = N ** (2.0 * q / 3.0) if T is None else T
    return LinearSecondOrderProblem(
        a=a, b=b, x0=np.zeros(dim), xp0=np.zeros(dim), T=horizon, dim=dim,
        C_A=C_A, a_exponent=q, xi=2.0 * q / 3.0, N=N, kind="averaged",
    )


# ---------------------------------------------------------------------------
# Peano-Baker series


def peano_baker(a: callable, s: float, t: float, K: int, dt: float):
    """Truncated series Phi_K(t, s) = sum_{k<=K} I_k with
    I_k(t,s) = int_s^t A(t_k) I_{k-1}(t_k, s) dt_k (nested trapezoid), plus a
    rigorous tail bound  ((t-s) ||A||)^{K+1}/(K+1)! * e^{(t-s)||A||}.
    """
    if t < s:
        raise ValueError("need t >= s")
    if K < 0:
        raise ValueError("need K >= 0")
    n = max(int(round((t - s) / dt)), 2)
    ts = np.linspace(s, t, n + 1)
    A = np.array([a(u) for u in ts])                    # (n+1, d, d)
    dim = A.shape[1]
    a_sup = float(np.max([np.linalg.norm(M, 2) for M in A]))
    total = np.eye(dim)
    # I_k on the whole grid, built recursively by cumulative trapezoid
    I_prev = np.broadcast_to(np.eye(dim), A.shape).copy()
    h = (t - s) / n
    for _ in range(1, K + 1):
        F = A @ I_prev                                  # integrand A(u) I_{k-1}(u, s)
        I_cur = np.empty_like(F)
        I_cur[0] = 0.0
        increments = 0.5 * h * (F[1:] + F[:-1])
        np.cumsum(increments, axis=0, out=I_cur[1:])
        total += I_cur[-1]
        I_prev = I_cur
    z = (t - s) * a_sup
    tail = z ** (K + 1) / factorial(K + 1) * exp(z)
    return total, float(tail)
