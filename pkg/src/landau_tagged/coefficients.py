"""Limiting drift/diffusion coefficients of the tagged particle.

Defining integrals (gamma is the standard d-dim Gaussian density):

    D(V)      = int_{B(0,R)} dx int dv gamma(v+V) grad_phi(x) (x) int_{-inf}^0 grad_phi(x+s v) ds
    Lambda(V) = -int_{B(0,R)} dx int dv gamma(v+V) Hess_phi(x) int_{-inf}^0 int_{-inf}^s grad_phi(x+u v) du ds

Both are evaluated two independent ways:

* a fast reduced path that exploits the radial symmetry of phi.  The x- and
  time-integrals collapse into scalar profiles of the chord variable (exact
  chord endpoints, no domain truncation), leaving 2-d quadratures in the
  speed/angle variables (r, c) relative to V.  The identities D = a P_par +
  b P_perp and Lambda = lam * Vhat are used to rebuild the tensors.
* a generic full-tensor quadrature straight from the defining formulas
  (ball nodes x Gauss-Hermite velocity tensor x chord nodes), kept as the
  oracle; it uses no symmetry.

Finite-time truncations replace the time ranges by [-t, 0] and are computed
as exact corrections supported on slow velocities r < 2R/t (a ray spends at
most a chord length 2R inside the support).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import gamma as gamma_fn
from math import pi, sqrt

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import beta as beta_fn
from scipy.special import roots_jacobi

from .potential import (
    FourierTable,
    PotentialSpec,
    _radial_factor,
    gradient,
    hessian,
    sphere_area,
)


# ---------------------------------------------------------------------------
# quadrature helpers


@lru_cache(maxsize=128)
def _leggauss_raw(n: int):
    return np.polynomial.legendre.leggauss(n)


def gauss_legendre(a: float, b: float, n: int):
    t, w = _leggauss_raw(n)
    return 0.5 * (b - a) * t + 0.5 * (b + a), 0.5 * (b - a) * w


def composite_legendre(edges, n: int):
    xs, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        x, w = gauss_legendre(a, b, n)
        xs.append(x)
        ws.append(w)
    return np.concatenate(xs), np.concatenate(ws)


def gauss_hermite_prob(n: int):
    """Nodes/weights for int f(z) gamma_1(z) dz = sum w_i f(z_i)."""
    t, w = np.polynomial.hermite.hermgauss(n)
    return t * sqrt(2.0), w / sqrt(pi)


@lru_cache(maxsize=64)
def angular_nodes(d: int, n: int):
    """Nodes/weights for int_{-1}^{1} (1-c^2)^{(d-3)/2} g(c) dc."""
    if d == 3:
        return gauss_legendre(-1.0, 1.0, n)
    c, w = roots_jacobi(n, (d - 3) / 2.0, (d - 3) / 2.0)
    return c, w


@dataclass(frozen=True)
class QuadratureScheme:
    """Node counts for the reduced coefficient quadratures."""

    n_c: int = 48              # angular nodes (c = vhat . Vhat)
    n_r: int = 48              # radial speed nodes per panel
    r_panel_edges: tuple = (0.0, 0.5, 1.0, 2.0, 4.0)  # extended to |V|+12
    n_chord: int = 48          # chord nodes in the profile integrals
    n_x: int = 64              # (x1, rho) nodes in the profile integrals
    n_tau: int = 200           # tau grid size for the truncated profiles
    refine_tol: float = 1e-9   # doubling-refinement target for Q integrals

    def r_edges(self, speed: float) -> np.ndarray:
        return np.array(list(self.r_panel_edges) + [speed + 12.0])


DEFAULT_SCHEME = QuadratureScheme()


# ---------------------------------------------------------------------------
# scalar profiles of the radial bump (chord-collapsed x/time integrals)


def line_transform_constant(spec: PotentialSpec) -> float:
    """Closed form of m = S_{d-2}/(d-1) int_0^R rho^d w(rho)^2 drho where
    w(rho) is the transverse line transform of grad_phi.

    For the bump, w(rho) = -C_w (R^2-rho^2)^{p-1/2} with
    C_w = 2 A p sqrt(pi) Gamma(p) / (Gamma(p+1/2) R^{2p}), so m reduces to a
    Beta function.
    """
    d, p, A, R = spec.d, spec.p, spec.A, spec.R
    C_w = 2.0 * A * p * sqrt(pi) * gamma_fn(p) / (gamma_fn(p + 0.5) * R ** (2 * p))
    radial = R ** (d + 4 * p - 1) * 0.5 * beta_fn((d + 1) / 2.0, 2.0 * p)
    return sphere_area(d - 1) / (d - 1) * C_w**2 * radial


def _profile_nodes(spec: PotentialSpec, n_x: int):
    """(x1, rho) nodes/weights over the ball section, with rho mapped to
    sigma in [0,1] so the boundary sqrt is resolved exactly."""
    R = spec.R
    x1, wx1 = gauss_legendre(-R, R, n_x)
    sig, wsig = gauss_legendre(0.0, 1.0, n_x)
    rho_max = np.sqrt(np.maximum(R * R - x1 * x1, 0.0))
    rho = rho_max[:, None] * sig[None, :]                     # (nx, ns)
    wrho = rho_max[:, None] * wsig[None, :]
    w2d = wx1[:, None] * wrho * sphere_area(spec.d - 1) * rho ** (spec.d - 2)
    return x1[:, None] + 0.0 * rho, rho, w2d


def _chord_profiles(spec: PotentialSpec, taus: np.ndarray, n_x: int, n_w: int):
    """beta_par(tau), beta_perp(tau), kappa(tau): the x-ball integrals of the
    one-sided chord integrals, truncated at chord-length tau.

    beta_par/beta_perp build D, kappa builds Lambda.  All saturate exactly
    for tau >= 2R (the chord has length at most 2R).
    """
    X1, RHO, W2 = _profile_nodes(spec, n_x)
    s = X1 * X1 + RHO * RHO
    L = np.sqrt(np.maximum(spec.R**2 - RHO * RHO, 0.0))
    w_minus = -X1 - L                                          # entry chord offset
    f1 = _radial_factor(spec, s, 1)
    f2 = _radial_factor(spec, s, 2)

    t_gl, w_gl = np.polynomial.legendre.leggauss(n_w)
    t01 = 0.5 * (t_gl + 1.0)
    w01 = 0.5 * w_gl

    b_par = np.empty(len(taus))
    b_perp = np.empty(len(taus))
    kap = np.empty(len(taus))
    for i, tau in enumerate(taus):
        w_lo = np.maximum(w_minus, -tau)
        span = -w_lo                                           # >= 0
        W = w_lo[..., None] + span[..., None] * t01            # (nx, ns, nw)
        WW = span[..., None] * w01
        s_w = (X1[..., None] + W) ** 2 + RHO[..., None] ** 2
        f1w = _radial_factor(spec, s_w, 1)
        g_par = np.sum(WW * (X1[..., None] + W) * f1w, axis=-1)
        g_perp = np.sum(WW * f1w, axis=-1)
        g_kap = np.sum(
            WW
            * np.abs(W)
            * (
                4.0 * f1[..., None] * (X1[..., None] + W)
                + 8.0 * X1[..., None] * f2[..., None] * (s[..., None] + W * X1[..., None])
            )
            * f1w,
            axis=-1,
        )
        b_par[i] = np.sum(W2 * 4.0 * X1 * f1 * g_par)
        b_perp[i] = np.sum(W2 * 4.0 * RHO**2 / (spec.d - 1) * f1 * g_perp)
        kap[i] = np.sum(W2 * g_kap)
    return b_par, b_perp, kap


@dataclass(frozen=True)
class ChordProfiles:
    """Truncation profiles on tau in [0, 2R], constant beyond."""

    tau_max: float
    beta_par: CubicSpline = field(repr=False)
    beta_perp: CubicSpline = field(repr=False)
    kappa: CubicSpline = field(repr=False)
    beta_par_inf: float = 0.0
    beta_perp_inf: float = 0.0
    kappa_inf: float = 0.0

    def eval(self, tau):
        tau = np.minimum(np.asarray(tau, dtype=float), self.tau_max)
        return self.beta_par(tau), self.beta_perp(tau), self.kappa(tau)


@lru_cache(maxsize=8)
def chord_profiles(spec: PotentialSpec, scheme: QuadratureScheme = DEFAULT_SCHEME) -> ChordProfiles:
    tau_max = 2.0 * spec.R
    taus = tau_max * 0.5 * (1.0 - np.cos(np.linspace(0.0, pi, scheme.n_tau)))
    bp, bq, kp = _chord_profiles(spec, taus, scheme.n_x, scheme.n_chord)
    # saturated values at doubled resolution (chord untruncated)
    bp_inf, bq_inf, kp_inf = _chord_profiles(
        spec, np.array([tau_max]), 2 * scheme.n_x, 2 * scheme.n_chord
    )
    return ChordProfiles(
        tau_max=tau_max,
        beta_par=CubicSpline(taus, bp),
        beta_perp=CubicSpline(taus, bq),
        kappa=CubicSpline(taus, kp),
        beta_par_inf=float(bp_inf[0]),
        beta_perp_inf=float(bq_inf[0]),
        kappa_inf=float(kp_inf[0]),
    )


# ---------------------------------------------------------------------------
# reduced (r, c) velocity quadrature


def _q_integral(speed: float, d: int, phi_rc, r_edges, n_r: int, n_c: int):
    """(2pi)^{-d/2} S_{d-2} e^{-u^2/2} int r^{d-1} e^{-r^2/2}
    int (1-c^2)^{(d-3)/2} e^{-r u c} phi(r, c) dc dr."""
    r, wr = composite_legendre(r_edges, n_r)
    c, wc = angular_nodes(d, n_c)
    E = np.exp(-np.outer(r, c) * speed)                        # (nr, nc)
    vals = phi_rc(r[:, None], c[None, :]) * E
    inner = vals @ wc
    pref = (2.0 * pi) ** (-d / 2.0) * sphere_area(d - 1) * np.exp(-0.5 * speed * speed)
    return pref * np.sum(wr * r ** (d - 1) * np.exp(-0.5 * r * r) * inner)


def _q_refined(speed, d, phi_rc, scheme: QuadratureScheme):
    edges = scheme.r_edges(speed)
    prev = _q_integral(speed, d, phi_rc, edges, scheme.n_r, scheme.n_c)
    cur = _q_integral(speed, d, phi_rc, edges, 2 * scheme.n_r, 2 * scheme.n_c)
    if abs(cur - prev) > scheme.refine_tol * max(1.0, abs(cur)):
        cur2 = _q_integral(speed, d, phi_rc, edges, 4 * scheme.n_r, 4 * scheme.n_c)
        if abs(cur2 - cur) > 100.0 * scheme.refine_tol * max(1.0, abs(cur2)):
            raise RuntimeError(
                f"coefficient quadrature did not converge at speed {speed}: "
                f"{prev} -> {cur} -> {cur2}"
            )
        cur = cur2
    return cur


def radial_coefficients(speed: float, spec: PotentialSpec,
                        scheme: QuadratureScheme = DEFAULT_SCHEME):
    """(a, b, lam) at |V| = speed: D = a P_par + b P_perp, Lambda = lam Vhat."""
    prof = chord_profiles(spec, scheme)
    bp, bq, kp = prof.beta_par_inf, prof.beta_perp_inf, prof.kappa_inf
    d = spec.d
    a = _q_refined(speed, d, lambda r, c: (bp * c * c + bq * (1.0 - c * c)) / r, scheme)
    b = _q_refined(
        speed, d,
        lambda r, c: (bp * (1.0 - c * c) / (d - 1) + bq * (1.0 - (1.0 - c * c) / (d - 1))) / r,
        scheme,
    )
    lam = -_q_refined(speed, d, lambda r, c: kp * c / (r * r), scheme)
    return a, b, lam


def _assemble(V, a: float, b: float, lam: float):
    V = np.asarray(V, dtype=float)
    d = V.shape[-1]
    u = float(np.linalg.norm(V))
    if u == 0.0:
        return a * np.eye(d), np.zeros(d)
    vhat = V / u
    P = np.outer(vhat, vhat)
    return a * P + b * (np.eye(d) - P), lam * vhat


def landau_D(V, spec: PotentialSpec, scheme: QuadratureScheme = DEFAULT_SCHEME) -> np.ndarray:
    """Diffusion matrix D(V) via the reduced path."""
    a, b, lam = radial_coefficients(float(np.linalg.norm(V)), spec, scheme)
    return _assemble(V, a, b, lam)[0]


def landau_Lambda(V, spec: PotentialSpec, scheme: QuadratureScheme = DEFAULT_SCHEME) -> np.ndarray:
    """Drift vector Lambda(V) via the reduced path."""
    a, b, lam = radial_coefficients(float(np.linalg.norm(V)), spec, scheme)
    return _assemble(V, a, b, lam)[1]


# ---------------------------------------------------------------------------
# finite-time truncations


def truncated_coeffs(V, t: float, spec: PotentialSpec,
                     scheme: QuadratureScheme = DEFAULT_SCHEME):
    """(Lambda_t, D_t) with the time integrals restricted to the window [-t, 0].

    Computed as D + correction (resp. Lambda + correction) where the
    correction integrand is exactly supported on speeds r < 2R/t (for larger
    speeds the chord leaves the support before time t).
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    V = np.asarray(V, dtype=float)
    d = spec.d
    u = float(np.linalg.norm(V))
    prof = chord_profiles(spec, scheme)
    a, b, lam = radial_coefficients(u, spec, scheme)
    if t == 0.0:
        return np.zeros(d), np.zeros((d, d))

    r_cut = 2.0 * spec.R / t
    edges = np.array([0.0, 0.25 * r_cut, 0.5 * r_cut, 0.75 * r_cut, r_cut])

    def dpar(r, c):
        bp, bq, kp = prof.eval(r * t)
        return ((bp - prof.beta_par_inf) * c * c + (bq - prof.beta_perp_inf) * (1 - c * c)) / r

    def dperp(r, c):
        bp, bq, kp = prof.eval(r * t)
        return ((bp - prof.beta_par_inf) * (1 - c * c) / (d - 1)
                + (bq - prof.beta_perp_inf) * (1 - (1 - c * c) / (d - 1))) / r

    def dlam(r, c):
        bp, bq, kp = prof.eval(r * t)
        return (kp - prof.kappa_inf) * c / (r * r)

    da = _q_integral(u, d, dpar, edges, scheme.n_r, scheme.n_c)
    db = _q_integral(u, d, dperp, edges, scheme.n_r, scheme.n_c)
    dl = -_q_integral(u, d, dlam, edges, scheme.n_r, scheme.n_c)
    D_t, Lam_t = _assemble(V, a + da, b + db, lam + dl)
    return Lam_t, D_t


# ---------------------------------------------------------------------------
# Fourier representation


def landau_D_fourier(V, spec: PotentialSpec, table: FourierTable,
                     scheme: QuadratureScheme = DEFAULT_SCHEME) -> np.ndarray:
    """D via pi (2pi)^{-d} int dk (k x k) |phihat(k)|^2 phi_1(khat.V)/|k|.

    The delta_{k.v} constraint integrated against gamma(v+V) is the exact
    Gaussian hyperplane marginal phi_1(khat.V)/|k|.
    """
    V = np.asarray(V, dtype=float)
    d = spec.d
    u = float(np.linalg.norm(V))
    kap, wk = composite_legendre(
        [0.0, 2.0 / spec.R, 5.0 / spec.R, 12.0 / spec.R, 30.0 / spec.R, table.kappa_grid[-1]],
        96,
    )
    radial = np.sum(wk * kap**d * table(kap) ** 2)
    c, wc = angular_nodes(d, scheme.n_c)
    phi1 = np.exp(-0.5 * (u * c) ** 2) / sqrt(2.0 * pi)
    A_par = sphere_area(d - 1) * np.sum(wc * c * c * phi1)
    A_perp = sphere_area(d - 1) * np.sum(wc * (1.0 - c * c) / (d - 1) * phi1)
    pref = pi * (2.0 * pi) ** (-d)
    if u == 0.0:
        # isotropic: A_par == A_perp up to quadrature
        return pref * radial * A_par * np.eye(d)
    vhat = V / u
    P = np.outer(vhat, vhat)
    return pref * radial * (A_par * P + A_perp * (np.eye(d) - P))


def hyperplane_marginal(k, V) -> float:
    """int delta(k.v) gamma(v+V) dv = phi_1(khat.V)/|k| (exact)."""
    k = np.asarray(k, dtype=float)
    V = np.asarray(V, dtype=float)
    nk = float(np.linalg.norm(k))
    mu = float(k @ V) / nk
    return np.exp(-0.5 * mu * mu) / (sqrt(2.0 * pi) * nk)


# ---------------------------------------------------------------------------
# full-tensor oracle (no symmetry use)


def ball_nodes(d: int, R: float, n_r: int, n_ang: int):
    """Product quadrature over the ball B(0,R), d in {2, 3, 4}."""
    r, wr = gauss_legendre(0.0, R, n_r)
    if d == 2:
        th = np.linspace(0.0, 2.0 * pi, n_ang, endpoint=False)
        wth = np.full(n_ang, 2.0 * pi / n_ang)
        pts = np.stack(
            [np.outer(r, np.cos(th)).ravel(), np.outer(r, np.sin(th)).ravel()], axis=-1
        )
        w = np.outer(wr * r, wth).ravel()
        return pts, w
    if d == 3:
        c, wc = gauss_legendre(-1.0, 1.0, n_ang)
        ph = np.linspace(0.0, 2.0 * pi, n_ang, endpoint=False)
        wph = np.full(n_ang, 2.0 * pi / n_ang)
        s = np.sqrt(1.0 - c * c)
        dirs = np.stack(
            [
                np.repeat(c, n_ang),
                np.outer(s, np.cos(ph)).ravel(),
                np.outer(s, np.sin(ph)).ravel(),
            ],
            axis=-1,
        )
        wdir = np.outer(wc, wph).ravel()
        pts = (r[:, None, None] * dirs[None, :, :]).reshape(-1, 3)
        w = np.outer(wr * r * r, wdir).ravel()
        return pts, w
    if d == 4:
        c1, wc1 = roots_jacobi(n_ang, 0.5, 0.5)     # cos(psi), weight sin^2(psi)
        c2, wc2 = gauss_legendre(-1.0, 1.0, n_ang)  # cos(theta)
        ph = np.linspace(0.0, 2.0 * pi, n_ang, endpoint=False)
        wph = np.full(n_ang, 2.0 * pi / n_ang)
        s1 = np.sqrt(1.0 - c1 * c1)
        s2 = np.sqrt(1.0 - c2 * c2)
        dirs = []
        wdir = []
        for i in range(n_ang):
            for j in range(n_ang):
                for k in range(n_ang):
                    dirs.append(
                        [c1[i], s1[i] * c2[j], s1[i] * s2[j] * np.cos(ph[k]),
                         s1[i] * s2[j] * np.sin(ph[k])]
                    )
                    wdir.append(wc1[i] * wc2[j] * wph[k])
        dirs = np.array(dirs)
        wdir = np.array(wdir)
        pts = (r[:, None, None] * dirs[None, :, :]).reshape(-1, 4)
        w = np.outer(wr * r**3, wdir).ravel()
        return pts, w
    raise ValueError(f"ball_nodes supports d in {{2,3,4}}, got {d}")


def unit_sphere_nodes(d: int, n_ang: int):
    """Product quadrature on S^{d-1}: directions and weights, sum w = |S^{d-1}|."""
    if d == 2:
        th = np.linspace(0.0, 2.0 * pi, n_ang, endpoint=False)
        return np.stack([np.cos(th), np.sin(th)], axis=-1), np.full(n_ang, 2.0 * pi / n_ang)
    if d == 3:
        c, wc = gauss_legendre(-1.0, 1.0, n_ang)
        ph = np.linspace(0.0, 2.0 * pi, n_ang, endpoint=False)
        wph = np.full(n_ang, 2.0 * pi / n_ang)
        s = np.sqrt(1.0 - c * c)
        dirs = np.stack(
            [
                np.repeat(c, n_ang),
                np.outer(s, np.cos(ph)).ravel(),
                np.outer(s, np.sin(ph)).ravel(),
            ],
            axis=-1,
        )
        return dirs, np.outer(wc, wph).ravel()
    if d == 4:
        c1, wc1 = roots_jacobi(n_ang, 0.5, 0.5)
        c2, wc2 = gauss_legendre(-1.0, 1.0, n_ang)
        ph = np.linspace(0.0, 2.0 * pi, n_ang, endpoint=False)
        wph = np.full(n_ang, 2.0 * pi / n_ang)
        s1 = np.sqrt(1.0 - c1 * c1)
        s2 = np.sqrt(1.0 - c2 * c2)
        dirs = np.empty((n_ang, n_ang, n_ang, 4))
        dirs[..., 0] = c1[:, None, None]
        dirs[..., 1] = (s1[:, None] * c2[None, :])[:, :, None]
        dirs[..., 2] = s1[:, None, None] * s2[None, :, None] * np.cos(ph)[None, None, :]
        dirs[..., 3] = s1[:, None, None] * s2[None, :, None] * np.sin(ph)[None, None, :]
        w = wc1[:, None, None] * wc2[None, :, None] * wph[None, None, :]
        return dirs.reshape(-1, 4), w.ravel()
    raise ValueError(f"unit_sphere_nodes supports d in {{2,3,4}}, got {d}")


def _velocity_spherical(d: int, V, n_v_r: int, n_v_ang: int):
    """Spherical velocity nodes with Gaussian weights gamma(v+V) dv included.

    The radial factor r^{d-1} e^{-r^2/2} is attached explicitly, which keeps
    integrands with 1/|v| or 1/|v|^2 singularities polynomially smooth.
    """
    V = np.asarray(V, dtype=float)
    u = float(np.linalg.norm(V))
    r, wr = composite_legendre([0.0, 0.25, 1.0, 2.5, u + 9.0], n_v_r)
    dirs, wd = unit_sphere_nodes(d, n_v_ang)
    v = r[:, None, None] * dirs[None, :, :]
    proj = dirs @ V
    gauss = np.exp(-0.5 * (r[:, None] ** 2 + 2.0 * r[:, None] * proj[None, :] + u * u))
    w = (2.0 * pi) ** (-d / 2.0) * (wr * r ** (d - 1))[:, None] * wd[None, :] * gauss
    return v.reshape(-1, d), w.ravel()


def _chord_entry(x, v, R):
    """Most negative root of |x + s v|^2 = R^2 for x inside the ball."""
    a = np.sum(v * v)
    b = 2.0 * (x @ v)
    c = np.sum(x * x, axis=-1) - R * R
    disc = np.sqrt(np.maximum(b * b - 4.0 * a * c, 0.0))
    return (-b - disc) / (2.0 * a)


def _chord_entries_batch(x, v, R):
    """Entry roots s_-(x, v) for all (v, x) pairs; shapes (nv, d), (nx, d) -> (nv, nx)."""
    a = np.sum(v * v, axis=-1)[:, None]
    b = 2.0 * (v @ x.T)
    c = (np.sum(x * x, axis=-1) - R * R)[None, :]
    disc = np.sqrt(np.maximum(b * b - 4.0 * a * c, 0.0))
    return (-b - disc) / (2.0 * a)


def landau_D_full_tensor(V, spec: PotentialSpec, n_r: int = 16, n_ang: int = 12,
                         n_v_r: int = 20, n_v_ang: int = 12, n_s: int = 12,
                         t_max: float | None = None, chunk: int = 64) -> np.ndarray:
    """Oracle evaluation of D straight from the defining integral.

    Ball nodes x Gauss velocity nodes x chord nodes; the full (d, d) tensor
    is accumulated with no use of the isotropic structure.  Optional t_max
    truncates the chord time window to [-t_max, 0].
    """
    d = spec.d
    x, wx = ball_nodes(d, spec.R, n_r, n_ang)
    gx = wx[:, None] * gradient(spec, x)
    t_gl, w_gl = np.polynomial.legendre.leggauss(n_s)
    t01 = 0.5 * (t_gl + 1.0)
    w01 = 0.5 * w_gl
    v_nodes, wv = _velocity_spherical(d, V, n_v_r, n_v_ang)
    D = np.zeros((d, d))
    for lo in range(0, len(wv), chunk):
        v = v_nodes[lo:lo + chunk]
        w = wv[lo:lo + chunk]
        s_lo = _chord_entries_batch(x, v, spec.R)                # (nv, nx)
        if t_max is not None:
            s_lo = np.maximum(s_lo, -t_max)
        S = s_lo[:, :, None] * (1.0 - t01)                        # (nv, nx, ns)
        WS = -s_lo[:, :, None] * w01
        pts = x[None, :, None, :] + S[..., None] * v[:, None, None, :]
        g = np.einsum("vns,vnsd->vnd", WS, gradient(spec, pts))
        D += np.einsum("v,ni,vnj->ij", w, gx, g)
    return D


def landau_Lambda_full_tensor(V, spec: PotentialSpec, n_r: int = 16, n_ang: int = 12,
                              n_v_r: int = 20, n_v_ang: int = 12, n_s: int = 12,
                              t_max: float | None = None, chunk: int = 64) -> np.ndarray:
    """Oracle evaluation of Lambda from its defining integral.

    The double time integral collapses exactly to int_{-t}^0 |u| grad_phi(x+uv) du.
    """
    d = spec.d
    x, wx = ball_nodes(d, spec.R, n_r, n_ang)
    hx = wx[:, None, None] * hessian(spec, x)
    t_gl, w_gl = np.polynomial.legendre.leggauss(n_s)
    t01 = 0.5 * (t_gl + 1.0)
    w01 = 0.5 * w_gl
    v_nodes, wv = _velocity_spherical(d, V, n_v_r, n_v_ang)
    Lam = np.zeros(d)
    for lo in range(0, len(wv), chunk):
        v = v_nodes[lo:lo + chunk]
        w = wv[lo:lo + chunk]
        s_lo = _chord_entries_batch(x, v, spec.R)
        if t_max is not None:
            s_lo = np.maximum(s_lo, -t_max)
        S = s_lo[:, :, None] * (1.0 - t01)
        WS = -s_lo[:, :, None] * w01
        pts = x[None, :, None, :] + S[..., None] * v[:, None, None, :]
        g = np.einsum("vns,vnsd->vnd", WS * np.abs(S), gradient(spec, pts))
        Lam -= np.einsum("v,nij,vnj->i", w, hx, g)
    return Lam


# ---------------------------------------------------------------------------
# matrix square root, generator, bundled evaluation


def sqrt_spd(M, tol_sym: float = 1e-10, tol_eig: float = -1e-10) -> np.ndarray:
    """Unique symmetric PSD square root via symmetric eigendecomposition."""
    M = np.asarray(M, dtype=float)
    scale = max(1.0, float(np.abs(M).max()))
    if np.abs(M - M.T).max() > tol_sym * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    if vals.min() < tol_eig * scale:
        raise ValueError(f"matrix has eigenvalue {vals.min()} below tolerance")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def generator_apply(coeffs: "TransportCoefficients", grad_f, hess_f) -> float:
    """L f(V) = 2 grad_f . Lambda(V) + hess_f : D(V)."""
    grad_f = np.asarray(grad_f, dtype=float)
    hess_f = np.asarray(hess_f, dtype=float)
    return float(2.0 * grad_f @ coeffs.Lambda + np.sum(hess_f * coeffs.D))


@dataclass(frozen=True)
class TransportCoefficients:
    V: np.ndarray
    D: np.ndarray
    Lambda: np.ndarray
    Sigma: np.ndarray
    a: float
    b: float
    lam: float
    scheme: QuadratureScheme = DEFAULT_SCHEME


def evaluate_coefficients(V, spec: PotentialSpec,
                          scheme: QuadratureScheme = DEFAULT_SCHEME) -> TransportCoefficients:
    V = np.asarray(V, dtype=float)
    a, b, lam = radial_coefficients(float(np.linalg.norm(V)), spec, scheme)
    D, Lam = _assemble(V, a, b, lam)
    u = float(np.linalg.norm(V))
    if u == 0.0:
        Sigma = sqrt(max(a, 0.0)) * np.eye(spec.d)
    else:
        vhat = V / u
        P = np.outer(vhat, vhat)
        Sigma = sqrt(max(a, 0.0)) * P + sqrt(max(b, 0.0)) * (np.eye(spec.d) - P)
    return TransportCoefficients(V=V, D=D, Lambda=Lam, Sigma=Sigma, a=a, b=b, lam=lam,
                                 scheme=scheme)


# ---------------------------------------------------------------------------
# radial interpolation table (shared by the SDE and the estimators)


@dataclass(frozen=True)
class CoefficientTable:
    """Cubic radial interpolants of (a, b, lam) on [0, v_max], constant beyond."""

    v_max: float
    knots: np.ndarray
    a_spline: CubicSpline = field(repr=False)
    b_spline: CubicSpline = field(repr=False)
    lam_spline: CubicSpline = field(repr=False)
    d: int = 4

    def radial(self, speed):
        s = np.clip(np.asarray(speed, dtype=float), 0.0, self.v_max)
        return self.a_spline(s), self.b_spline(s), self.lam_spline(s)

    def drift_diffusion(self, V):
        """Vectorized (Lambda, a, b) for V of shape (n, d)."""
        V = np.atleast_2d(np.asarray(V, dtype=float))
        u = np.linalg.norm(V, axis=-1)
        a, b, lam = self.radial(u)
        safe = np.where(u > 0.0, u, 1.0)
        vhat = V / safe[:, None]
        Lam = lam[:, None] * vhat
        Lam[u == 0.0] = 0.0
        return Lam, a, b, vhat, u

    def coefficients_at(self, V) -> TransportCoefficients:
        V = np.asarray(V, dtype=float)
        a, b, lam = (float(x) for x in self.radial(float(np.linalg.norm(V))))
        D, Lam = _assemble(V, a, b, lam)
        u = float(np.linalg.norm(V))
        if u == 0.0:
            Sigma = sqrt(max(a, 0.0)) * np.eye(self.d)
        else:
            vhat = V / u
            P = np.outer(vhat, vhat)
            Sigma = sqrt(max(a, 0.0)) * P + sqrt(max(b, 0.0)) * (np.eye(self.d) - P)
        return TransportCoefficients(V=V, D=D, Lambda=Lam, Sigma=Sigma, a=a, b=b, lam=lam)


def build_coefficient_table(spec: PotentialSpec, v_max: float = 8.0, n_knots: int = 64,
                            scheme: QuadratureScheme = DEFAULT_SCHEME) -> CoefficientTable:
    knots = np.linspace(0.0, v_max, n_knots)
    abl = np.array([radial_coefficients(u, spec, scheme) for u in knots])
    return CoefficientTable(
        v_max=v_max,
        knots=knots,
        a_spline=CubicSpline(knots, abl[:, 0]),
        b_spline=CubicSpline(knots, abl[:, 1]),
        lam_spline=CubicSpline(knots, abl[:, 2]),
        d=spec.d,
    )


# ---------------------------------------------------------------------------
# identity report


@dataclass
class IdentityReport:
    grid: list
    drift_identity_max: float          # ||Lambda + D V|| relative
    divergence_identity_max: float     # ||Lambda - div D|| relative (FD + Richardson)
    fourier_agreement_max: float       # ||D_fourier - D|| / ||D||
    min_eigenvalue: float
    symmetry_max: float
    passed: bool

    def to_dict(self):
        return {
            "grid": [list(map(float, v)) for v in self.grid],
            "drift_identity_max": self.drift_identity_max,
            "divergence_identity_max": self.divergence_identity_max,
            "fourier_agreement_max": self.fourier_agreement_max,
            "min_eigenvalue": self.min_eigenvalue,
            "symmetry_max": self.symmetry_max,
            "passed": self.passed,
        }


def divergence_fd(V, spec: PotentialSpec, h: float = 1e-2,
                  scheme: QuadratureScheme = DEFAULT_SCHEME) -> np.ndarray:
    """(div D)_i = sum_j d_j D_ij by central differences with one Richardson level."""
    V = np.asarray(V, dtype=float)
    d = spec.d

    def fd(step):
        out = np.zeros(d)
        for j in range(d):
            e = np.zeros(d)
            e[j] = step
            Dp = landau_D(V + e, spec, scheme)
            Dm = landau_D(V - e, spec, scheme)
            out += (Dp[:, j] - Dm[:, j]) / (2.0 * step)
        return out

    f1 = fd(h)
    f2 = fd(h / 2.0)
    return (4.0 * f2 - f1) / 3.0


def check_identities(V_grid, spec: PotentialSpec, table: FourierTable | None = None,
                     scheme: QuadratureScheme = DEFAULT_SCHEME, fd_step: float = 1e-2,
                     tol_drift: float = 1e-6, tol_div: float = 1e-3,
                     tol_fourier: float = 1e-3) -> IdentityReport:
    if len(V_grid) == 0:
        raise ValueError("identity grid is empty")
    drift_max = 0.0
    div_max = 0.0
    fourier_max = 0.0
    min_eig = np.inf
    sym_max = 0.0
    for V in V_grid:
        V = np.asarray(V, dtype=float)
        co = evaluate_coefficients(V, spec, scheme)
        DV = co.D @ V
        drift_max = max(drift_max,
                        float(np.linalg.norm(co.Lambda + DV) / (np.linalg.norm(DV) + 1e-12)))
        div = divergence_fd(V, spec, fd_step, scheme)
        div_max = max(div_max,
                      float(np.linalg.norm(co.Lambda - div) / (np.linalg.norm(co.Lambda) + 1e-12)))
        if table is not None:
            DF = landau_D_fourier(V, spec, table, scheme)
            fourier_max = max(fourier_max,
                              float(np.linalg.norm(DF - co.D) / np.linalg.norm(co.D)))
        vals = np.linalg.eigvalsh(0.5 * (co.D + co.D.T))
        min_eig = min(min_eig, float(vals.min()))
        sym_max = max(sym_max, float(np.abs(co.D - co.D.T).max()))
    passed = (drift_max <= tol_drift and div_max <= tol_div and min_eig > 0.0
              and (table is None or fourier_max <= tol_fourier))
    return IdentityReport(
        grid=list(V_grid),
        drift_identity_max=drift_max,
        divergence_identity_max=div_max,
        fourier_agreement_max=fourier_max,
        min_eigenvalue=min_eig,
        symmetry_max=sym_max,
        passed=passed,
    )
