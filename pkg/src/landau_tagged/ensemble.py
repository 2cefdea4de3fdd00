"""Sampling of the equilibrium initial data and of the reservoir influx.

The initial measure is: tagged velocity with density g0 * gamma, tagged
position uniform on the torus, background particle count Poisson with mean
N * int_T exp(-phi(X-x)/N) dx, background positions with Gibbs weight
exp(-phi(X-x)/N), background velocities standard Gaussian.

The reservoir side samples the exact inward Maxwellian flux through a sphere
of radius R_act co-moving with the tagged particle.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import exp, pi, sqrt

from scipy.special import erf, ndtr

import numpy as np

from .coefficients import angular_nodes, gauss_legendre
from .potential import PotentialSpec, sphere_area, value


# ---------------------------------------------------------------------------
# reproducible counter-based streams


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def make_rng(master_seed: int, stream_index: int = 0) -> np.random.Generator:
    """Counter-based Philox stream; key = master_seed XOR splitmix64(index).

    Identical (master_seed, stream_index) gives a bit-identical stream on any
    worker, which is the package's reproducibility contract.
    """
    key = (int(master_seed) & 0xFFFFFFFFFFFFFFFF) ^ _splitmix64(int(stream_index))
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# initial law


@dataclass(frozen=True)
class InitialLaw:
    """Velocity density perturbation g0 (the initial law is g0 * gamma).

    Restricted to bounded perturbations with a declared sup bound so the
    rejection sampler has a certified envelope.  `kind` is a serializable
    descriptor: "uniform" (g0 = 1) or "tanh_tilt" (g0 = 1 + amp*tanh(2 v_k),
    which integrates to 1 against gamma exactly by oddness).
    """

    kind: str = "uniform"
    amplitude: float = 0.0
    coordinate: int = 0

    def __post_init__(self):
        if self.kind not in ("uniform", "tanh_tilt"):
            raise ValueError(f"unknown g0 kind {self.kind!r}")
        if self.kind == "tanh_tilt" and not 0 <= self.amplitude < 1:
            raise ValueError("tanh_tilt amplitude must be in [0, 1)")

    @property
    def sup_bound(self) -> float:
        return 1.0 if self.kind == "uniform" else 1.0 + self.amplitude

    def g0(self, v) -> np.ndarray:
        v = np.atleast_2d(np.asarray(v, dtype=float))
        if self.kind == "uniform":
            return np.ones(v.shape[0])
        return 1.0 + self.amplitude * np.tanh(2.0 * v[:, self.coordinate])

    def check_normalization(self, d: int, n_nodes: int = 48, tol: float = 1e-6) -> float:
        """int g0(v) gamma(v) dv, checked against 1 (Gauss-Hermite)."""
        t, w = np.polynomial.hermite.hermgauss(n_nodes)
        z = t * sqrt(2.0)
        wz = w / sqrt(pi)
        if self.kind == "uniform":
            total = 1.0
        else:
            total = float(np.sum(wz * (1.0 + self.amplitude * np.tanh(2.0 * z))))
        if abs(total - 1.0) > tol:
            raise ValueError(f"g0 does not integrate to 1 against gamma: {total}")
        return total

    def sample(self, d: int, n: int, rng: np.random.Generator,
               max_rounds: int = 200) -> np.ndarray:
        """n draws from g0*gamma by rejection against gamma."""
        out = np.empty((n, d))
        filled = 0
        for _ in range(max_rounds):
            need = n - filled
            if need == 0:
                return out
            v = rng.standard_normal((max(need * 2, 16), d))
            acc = rng.random(v.shape[0]) * self.sup_bound <= self.g0(v)
            take = v[acc][:need]
            out[filled:filled + take.shape[0]] = take
            filled += take.shape[0]
        raise RuntimeError("g0 rejection sampler failed to fill the request "
                           "(malformed g0 / sup bound)")


# ---------------------------------------------------------------------------
# grand canonical initial configuration


@dataclass
class InitialConfiguration:
    tagged_X: np.ndarray
    tagged_V: np.ndarray
    positions: np.ndarray      # (M, d), canonical representatives in [-L/2, L/2)
    velocities: np.ndarray     # (M, d)
    L: float
    N: float

    @property
    def count(self) -> int:
        return self.positions.shape[0]


def gibbs_count_mean(spec: PotentialSpec, L: float, N: float, n_nodes: int = 128) -> float:
    """N * int_T exp(-phi(x)/N) dx = N L^d + N * int (exp(-phi/N)-1) dx.

    The correction integral is radial over [0, R].
    """
    r, w = gauss_legendre(0.0, spec.R, n_nodes)
    phi_r = value(spec, np.stack([r] + [np.zeros_like(r)] * (spec.d - 1), axis=-1))
    corr = sphere_area(spec.d) * np.sum(w * (np.exp(-phi_r / N) - 1.0) * r ** (spec.d - 1))
    return N * L**spec.d + N * corr


def sample_initial_configuration(spec: PotentialSpec, law: InitialLaw, L: float,
                                 N: float, rng: np.random.Generator,
                                 max_rounds: int = 200) -> InitialConfiguration:
    """Draw (tagged, background) from the grand canonical measure."""
    if L <= 4.0 * spec.R:
        raise ValueError(f"torus side L = {L} must exceed 4R = {4.0 * spec.R}")
    if N < 1:
        raise ValueError("density N must be >= 1")
    d = spec.d
    V = law.sample(d, 1, rng)[0]
    X = rng.uniform(-L / 2.0, L / 2.0, size=d)
    M = int(rng.poisson(gibbs_count_mean(spec, L, N)))
    # positions by rejection against uniform; for A >= 0 the Gibbs factor
    # exp(-phi/N) <= 1 is itself the acceptance probability
    pos = np.empty((M, d))
    filled = 0
    env = exp(max(0.0, -0.0) / N)  # phi >= 0 for the bump family
    for _ in range(max_rounds):
        need = M - filled
        if need == 0:
            break
        cand = rng.uniform(-L / 2.0, L / 2.0, size=(max(2 * need, 16), d))
        rel = cand - X
        rel -= L * np.round(rel / L)
        acc = rng.random(cand.shape[0]) * env <= np.exp(-value(spec, rel) / N)
        take = cand[acc][:need]
        pos[filled:filled + take.shape[0]] = take
        filled += take.shape[0]
    if filled != M:
        raise RuntimeError("Gibbs position rejection sampler exhausted its attempts")
    vel = rng.standard_normal((M, d))
    return InitialConfiguration(tagged_X=X, tagged_V=V, positions=pos, velocities=vel,
                                L=L, N=N)


def sample_ball_configuration(spec: PotentialSpec, radius: float, center: np.ndarray,
                              N: float, rng: np.random.Generator,
                              max_rounds: int = 200):
    """Background particles inside B(center, radius) under the local Gibbs law
    (reservoir-mode initial condition).  Returns (positions, velocities)."""
    d = spec.d
    r, w = gauss_legendre(0.0, radius, 128)
    phi_r = value(spec, np.stack([r] + [np.zeros_like(r)] * (d - 1), axis=-1))
    mean = N * sphere_area(d) * np.sum(w * np.exp(-phi_r / N) * r ** (d - 1))
    M = int(rng.poisson(mean))
    pos = np.empty((M, d))
    filled = 0
    for _ in range(max_rounds):
        need = M - filled
        if need == 0:
            break
        n_cand = max(2 * need, 16)
        u = rng.standard_normal((n_cand, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        rr = radius * rng.random(n_cand) ** (1.0 / d)
        cand = rr[:, None] * u
        acc = rng.random(n_cand) <= np.exp(-value(spec, cand) / N)
        take = cand[acc][:need]
        pos[filled:filled + take.shape[0]] = take
        filled += take.shape[0]
    if filled != M:
        raise RuntimeError("ball Gibbs sampler exhausted its attempts")
    vel = rng.standard_normal((M, d))
    return center[None, :] + pos, vel


# ---------------------------------------------------------------------------
# Maxwellian flux through a co-moving sphere


def _flux_moment(mu):
    """E[(Z)_+] for Z ~ N(mu, 1):  mu*Phi(mu) + phi(mu)."""
    mu = np.asarray(mu, dtype=float)
    pdf = np.exp(-0.5 * mu * mu) / sqrt(2.0 * pi)
    return mu * ndtr(mu) + pdf


def _sample_flux_speed(mu, rng: np.random.Generator, max_rounds: int = 400) -> np.ndarray:
    """Inward normal speeds w with density ∝ w exp(-(w-mu)^2/2) on w > 0.

    Exact rejection with a drift-dependent envelope:
      * mu >= 0: mixture mu*Gaussian(z) + Rayleigh(z>0) for z = w - mu,
        acceptance (mu+z)_+/(mu+z_+)  (>= 0.77 uniformly in mu),
      * -1.5 < mu < 0: Rayleigh envelope, acceptance e^{mu w},
      * mu <= -1.5: Gamma(2, -1/mu) envelope, acceptance e^{-w^2/2}.
    """
    mu = np.asarray(mu, dtype=float)
    n = mu.shape[0]
    w = np.empty(n)
    todo = np.arange(n)
    for _ in range(max_rounds):
        if todo.size == 0:
            return w
        m = mu[todo]
        k = todo.size
        u_acc = rng.random(k)
        out = np.empty(k)
        ok = np.zeros(k, dtype=bool)

        pos = m >= 0.0
        if pos.any():
            mp = m[pos]
            p_gauss = mp * sqrt(2.0 * pi) / (mp * sqrt(2.0 * pi) + 1.0)
            pick = rng.random(mp.size) < p_gauss
            z = np.where(pick,
                         rng.standard_normal(mp.size),
                         np.sqrt(2.0 * rng.exponential(size=mp.size)))
            num = np.maximum(mp + z, 0.0)
            den = mp + np.maximum(z, 0.0)
            ok_p = u_acc[pos] * den <= num
            out_p = mp + z
            ok[pos] = ok_p
            out[pos] = out_p

        neg = ~pos
        if neg.any():
            mn = m[neg]
            a = -mn
            mild = a <= 1.5
            wn = np.empty(mn.size)
            okn = np.zeros(mn.size, dtype=bool)
            if mild.any():
                cand = np.sqrt(2.0 * rng.exponential(size=mn.size))
                acc = u_acc[neg] <= np.exp(-a * cand)
                wn[mild] = cand[mild]
                okn[mild] = acc[mild]
            hard = ~mild
            if hard.any():
                g = rng.exponential(size=mn.size) + rng.exponential(size=mn.size)
                cand = g / np.maximum(a, 1e-300)
                acc = u_acc[neg] <= np.exp(-0.5 * cand * cand)
                wn[hard] = cand[hard]
                okn[hard] = acc[hard]
            ok[neg] = okn
            out[neg] = wn

        good = ok & (out > 0.0)
        w[todo[good]] = out[good]
        todo = todo[~good]
    raise RuntimeError("flux speed sampler exhausted its attempts")


def influx_rate(V_tagged, R_act: float, N: float, d: int | None = None,
                n_nodes: int = 64) -> float:
    """Inward Maxwellian flux (particles per unit time) through the sphere of
    radius R_act co-moving at velocity V_tagged:

        N R_act^{d-1} oint_{S^{d-1}} E[((v - V).(-n))_+] dsigma(n),

    where (v-V).(-n) ~ N(V.n, 1) under gamma.  Reduces to a 1-d polar
    integral in c = n.Vhat.
    """
    V_tagged = np.asarray(V_tagged, dtype=float)
    if d is None:
        d = V_tagged.shape[-1]
    u = float(np.linalg.norm(V_tagged))
    c, w = angular_nodes(d, n_nodes)
    ang = sphere_area(d - 1) * float(np.sum(w * _flux_moment(u * c)))
    return float(N * R_act ** (d - 1) * ang)


def sample_influx(V_tagged, R_act: float, dt: float, N: float,
                  rng: np.random.Generator, d: int | None = None,
                  rate: float | None = None, max_rounds: int = 200):
    """Particles entering the co-moving sphere during dt.

    Returns (normals, velocities, jitter): entry unit normals n (outward), lab
    velocities v, and entry-time offsets uniform in [0, dt).  The (n, v) pairs
    follow the flux density  gamma(v) ((v - V).(-n))_+  via exact rejection:

      * n accepted against the marginal h(V.n)/h(|V|) (h increasing),
      * the inward normal speed w = (v-V).(-n) ~ w exp(-(w-mu)^2/2), w > 0,
        mu = V.n, sampled by a two-part envelope (Gaussian + Rayleigh),
      * tangential velocity components are unconstrained Gaussians.
    """
    V_tagged = np.asarray(V_tagged, dtype=float)
    if d is None:
        d = V_tagged.shape[-1]
    if dt <= 0:
        raise ValueError("dt must be positive")
    if rate is None:
        rate = influx_rate(V_tagged, R_act, N, d)
    count = int(rng.poisson(rate * dt))
    if count == 0:
        z = np.zeros((0, d))
        return z, z.copy(), np.zeros(0)
    u = float(np.linalg.norm(V_tagged))
    h_max = float(_flux_moment(u))

    normals = np.empty((count, d))
    filled = 0
    for _ in range(max_rounds):
        need = count - filled
        if need == 0:
            break
        cand = rng.standard_normal((max(2 * need, 16), d))
        cand /= np.linalg.norm(cand, axis=1, keepdims=True)
        mu = cand @ V_tagged
        acc = rng.random(cand.shape[0]) * h_max <= _flux_moment(mu)
        take = cand[acc][:need]
        normals[filled:filled + take.shape[0]] = take
        filled += take.shape[0]
    if filled != count:
        raise RuntimeError("influx direction sampler exhausted its attempts")

    mu = normals @ V_tagged
    w = _sample_flux_speed(mu, rng)

    # v = (V.n - w) n + Gaussian tangential part
    v = rng.standard_normal((count, d))
    v -= (np.sum(v * normals, axis=1))[:, None] * normals
    v += (mu - w)[:, None] * normals
    jitter = rng.random(count) * dt
    return normals, v, jitter
