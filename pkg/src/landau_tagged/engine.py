"""Trajectory driver: exact finite-torus mode and streaming reservoir mode.

Both modes run the same velocity-Verlet core as `dynamics.verlet_step` (the
engine loop is tested to reproduce it step for step); the engine adds

* a near-set: the full particle array is scanned every `refresh_interval`
  steps with a certified safety margin, and only the near particles enter
  distance/force work in between,
* the reservoir lifecycle: Maxwellian flux injection at R_act, demotion at
  R_out (modified particles become dormant and free-stream exactly;
  unmodified ones are retired into the reservoir statistics), and promotion
  of dormant particles via scheduled re-entry checks,
* the interaction event log (entries, exits, recollision classification),
* optional per-step force-moment accumulators for the fluctuation
  diagnostics.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics as dy
from .ensemble import (
    InitialLaw,
    influx_rate,
    make_rng,
    sample_ball_configuration,
    sample_influx,
    sample_initial_configuration,
)
from .potential import PotentialSpec, derivative_sup_norms, gradient, hessian, third_derivative, value


FULL_TORUS = "full_torus"
RESERVOIR = "reservoir"


@dataclass(frozen=True)
class EngineConfig:
    """Everything a single trajectory needs (see cli.RunConfig for file form)."""

    spec: PotentialSpec
    N: float
    L: float | None                    # torus side; None = free space (reservoir only)
    dt: float
    horizon: float
    stride: int = 10                   # recording stride in steps
    law: InitialLaw = InitialLaw()
    v_ref: float = 4.0
    act_margin_steps: float = 4.0      # R_act = R + act_margin_steps * dt * v_ref
    out_margin_steps: float = 2.0      # R_out = R_act + out_margin_steps * dt * v_ref
    v_bound_slack: float = 4.0
    particle_cap: int = 1_000_000
    refresh_interval: int = 8
    emit_force_moments: bool = False
    track_energy: bool = True

    @property
    def r_act(self) -> float:
        return self.spec.R + self.act_margin_steps * self.dt * self.v_ref

    @property
    def r_out(self) -> float:
        return self.r_act + self.out_margin_steps * self.dt * self.v_ref

    def validate(self, mode: str):
        if mode not in (FULL_TORUS, RESERVOIR):
            raise ValueError(f"unknown mode {mode!r}")
        if self.dt <= 0 or self.horizon <= 0 or self.stride <= 0:
            raise ValueError("dt, horizon and stride must be positive")
        if mode == FULL_TORUS:
            if self.L is None:
                raise ValueError("full_torus mode needs a torus side L")
            if self.L <= 4.0 * self.spec.R:
                raise ValueError(f"torus side L = {self.L} must exceed 4R")
        if self.N < 1:
            raise ValueError("density N must be >= 1")


def default_dt(spec: PotentialSpec, v_ref: float = 4.0) -> float:
    """R / (20 v_ref): at least 20 force samples per typical ball crossing."""
    return spec.R / (20.0 * v_ref)


@dataclass
class InteractionEvent:
    particle_id: int
    t_entry: float
    t_exit: float          # nan while the interaction is open
    u_entry: float         # relative speed |v - V| at entry
    kind: str              # "first_interaction" | "recollision"


@dataclass
class ForceMoments:
    """Running force-sum diagnostics (multi-index orders 1..3)."""

    sup_grad: float = 0.0          # max_t max_I |sum_i d_I phi|, |I| = 1
    sup_hess: float = 0.0          # |I| = 2
    sup_third: float = 0.0         # |I| = 3
    sup_inball: int = 0            # max_t #particles in B(X, R)
    sup_tm_sums: np.ndarray = None  # max_t sum (T_m ^ N^{1/3})^k, k = 1..6
    cutoff_violations: int = 0     # steps with any |v| >= sqrt(N)
    times: list = field(default_factory=list)
    cum_grad: list = field(default_factory=list)    # int_0^t sum grad phi dt'
    cum_hess: list = field(default_factory=list)
    cum_third: list = field(default_factory=list)


@dataclass
class TrajectoryRecord:
    mode: str
    seed: int
    config_key: str
    sample_times: np.ndarray
    V_samples: np.ndarray
    X_samples: np.ndarray
    energy: np.ndarray | None
    events: list[InteractionEvent]
    n_injected: int = 0
    n_retired: int = 0
    n_promoted: int = 0
    max_active: int = 0
    force_moments: ForceMoments | None = None

    @property
    def V0(self) -> np.ndarray:
        return self.V_samples[0]

    @property
    def VT(self) -> np.ndarray:
        return self.V_samples[-1]


def config_key(cfg: EngineConfig, mode: str) -> str:
    blob = repr((cfg, mode)).encode()
    return f"{zlib.crc32(blob):08x}"


# ---------------------------------------------------------------------------
# event bookkeeping


class _EventLog:
    """Entry/exit tracking with the 6R/u recollision threshold.

    A re-entry of the same particle within gap < 6R/u of its previous entry
    is treated as a continuation (boundary chatter); after the threshold it
    opens a new event flagged as a recollision.
    """

    def __init__(self, R: float):
        self.R = R
        self.events: list[InteractionEvent] = []
        self.open: dict[int, int] = {}        # particle id -> index in events
        self.last: dict[int, int] = {}        # particle id -> latest event index

    def entries(self, ids, t, u_rel):
        for pid, u in zip(ids, u_rel):
            pid = int(pid)
            if pid in self.open:
                continue
            if pid in self.last:
                prev = self.events[self.last[pid]]
                gap = t - prev.t_entry
                if gap < 6.0 * self.R / max(prev.u_entry, 1e-300):
                    # same interaction, re-opened
                    self.open[pid] = self.last[pid]
                    prev.t_exit = np.nan
                    continue
                kind = "recollision"
            else:
                kind = "first_interaction"
            self.events.append(InteractionEvent(pid, t, np.nan, float(u), kind))
            self.open[pid] = len(self.events) - 1
            self.last[pid] = len(self.events) - 1

    def exits(self, ids, t):
        for pid in ids:
            pid = int(pid)
            k = self.open.pop(pid, None)
            if k is not None:
                self.events[k].t_exit = t

    def close_all(self, t):
        for pid, k in list(self.open.items()):
            self.events[k].t_exit = t
        self.open.clear()


# ---------------------------------------------------------------------------
# the trajectory driver


class _Run:
    def __init__(self, cfg: EngineConfig, mode: str, rng, exclude_id: int | None = None,
                 initial=None):
        cfg.validate(mode)
        self.cfg = cfg
        self.mode = mode
        self.rng = rng
        self.spec = cfg.spec
        self.R = cfg.spec.R
        self.d = cfg.spec.d
        self.exclude_id = exclude_id

        if initial is not None:
            X, V, pos, vel = initial
        elif mode == FULL_TORUS:
            ic = sample_initial_configuration(cfg.spec, cfg.law, cfg.L, cfg.N, rng)
            X, V, pos, vel = ic.tagged_X, ic.tagged_V, ic.positions, ic.velocities
        else:
            V = cfg.law.sample(self.d, 1, rng)[0]
            X = (rng.uniform(-cfg.L / 2.0, cfg.L / 2.0, size=self.d)
                 if cfg.L is not None else np.zeros(self.d))
            pos, vel = sample_ball_configuration(cfg.spec, cfg.r_act, X, cfg.N, rng)

        self.X = np.asarray(X, dtype=float).copy()
        self.V = np.asarray(V, dtype=float).copy()
        self.pos = np.asarray(pos, dtype=float).copy()
        self.vel = np.asarray(vel, dtype=float).copy()
        self.ids = np.arange(self.pos.shape[0], dtype=np.int64)
        self.next_id = int(self.pos.shape[0])
        self.modified = np.zeros(self.pos.shape[0], dtype=bool)
        self.t = 0.0

        # dormant registry (capacity-doubled buffers, vectorized checks)
        self._do_cap = 256
        self.n_do = 0
        self.do_ids = np.zeros(self._do_cap, dtype=np.int64)
        self.do_x = np.zeros((self._do_cap, self.d))
        self.do_v = np.zeros((self._do_cap, self.d))
        self.do_t = np.zeros(self._do_cap)
        self.do_check = np.zeros(self._do_cap)
        self.do_next = np.inf
        self.n_injected = 0
        self.n_retired = 0
        self.n_promoted = 0
        self.max_active = self.pos.shape[0]

        self.log = _EventLog(self.R)
        self.inball_ids = np.zeros(0, dtype=np.int64)

        # near-set machinery
        self.near = np.arange(self.pos.shape[0], dtype=np.int64)
        self.near_budget = 0
        self.max_speed = float(np.sqrt(np.max(np.einsum("ij,ij->i", vel, vel),
                                              initial=0.0)))
        self._acc = None  # (F_tagged, near-subset indices, per-particle forces)

        fm = ForceMoments() if cfg.emit_force_moments else None
        if fm is not None:
            fm.sup_tm_sums = np.zeros(6)
            self._cum_grad = np.zeros(self.d)
            self._cum_hess = np.zeros((self.d, self.d))
            self._cum_third = np.zeros((self.d, self.d, self.d))
        self.fm = fm

    # -- helpers ----------------------------------------------------------

    def _rel_to(self, positions):
        return dy.minimal_image(self.X[None, :], positions, self.cfg.L)

    def _refresh_near(self):
        rel = self._rel_to(self.pos)
        dist2 = np.einsum("ij,ij->i", rel, rel)
        closing = self.max_speed + float(np.linalg.norm(self.V)) + self.cfg.v_bound_slack
        k = self.cfg.refresh_interval
        r_near = self.cfg.r_out + closing * k * self.cfg.dt
        self.near = np.nonzero(dist2 <= r_near * r_near)[0].astype(np.int64)
        self.near_budget = k

    def _near_state(self):
        rel = self._rel_to(self.pos[self.near])
        dist2 = np.einsum("ij,ij->i", rel, rel)
        return rel, dist2

    # -- lifecycle (reservoir) ---------------------------------------------

    def _reentry_delay(self, x_now, v):
        """Safe lower bound on the re-entry delay.

        Generic bound: (dist - R_act)/(|v| + |V| + slack), since both closing
        speeds are bounded while |V_t| stays within slack of |V_now|.  For
        receding pairs (relative radial speed >= 0) the straight-line distance
        is nondecreasing and the tagged deviation is at most slack * s, which
        gives the sharper (dist - R_act)/slack."""
        rel = dy.minimal_image(x_now, self.X[None, :], self.cfg.L)
        dist = np.sqrt(np.einsum("ij,ij->i", rel, rel))
        v_rel = v - self.V[None, :]
        receding = np.einsum("ij,ij->i", rel, v_rel) >= 0.0
        slack = self.cfg.v_bound_slack
        v_bound = float(np.sqrt(self.V @ self.V)) + slack
        speed = np.sqrt(np.einsum("ij,ij->i", v, v))
        gap = dist - self.cfg.r_act
        delay = np.where(receding & (self.cfg.L is None),
                         gap / slack, gap / (speed + v_bound))
        return np.maximum(delay, self.cfg.dt), dist

    def _push_dormant(self, ids, x, v, t, check):
        k = len(ids)
        need = self.n_do + k
        if need > self._do_cap:
            while self._do_cap < need:
                self._do_cap *= 2
            for name in ("do_ids", "do_x", "do_v", "do_t", "do_check"):
                old = getattr(self, name)
                shape = (self._do_cap,) + old.shape[1:]
                new = np.zeros(shape, dtype=old.dtype)
                new[:self.n_do] = old[:self.n_do]
                setattr(self, name, new)
        sl = slice(self.n_do, need)
        self.do_ids[sl] = ids
        self.do_x[sl] = x
        self.do_v[sl] = v
        self.do_t[sl] = t
        self.do_check[sl] = check
        self.n_do = need
        self.do_next = min(self.do_next, float(check.min()))

    def _promote_due(self):
        t = self.t
        if self.n_do == 0 or t < self.do_next:
            return
        n = self.n_do
        due = self.do_check[:n] <= t
        if not due.any():
            self.do_next = float(self.do_check[:n].min())
            return
        x_now = self.do_x[:n][due] + (t - self.do_t[:n][due])[:, None] * self.do_v[:n][due]
        v = self.do_v[:n][due]
        delay, dist = self._reentry_delay(x_now, v)
        inside = dist <= self.cfg.r_act
        idx_due = np.nonzero(due)[0]
        # re-schedule the ones still out of reach
        self.do_check[idx_due[~inside]] = t + delay[~inside]
        if inside.any():
            take = idx_due[inside]
            ids = self.do_ids[take].copy()
            pos = x_now[inside]
            if self.cfg.L is not None:
                pos = dy.wrap_positions(pos, self.cfg.L)
            vel = v[inside].copy()
            keep = np.ones(n, dtype=bool)
            keep[take] = False
            m = int(keep.sum())
            for name in ("do_ids", "do_x", "do_v", "do_t", "do_check"):
                buf = getattr(self, name)
                buf[:m] = buf[:n][keep]
            self.n_do = m
            self.n_promoted += len(ids)
            self._append(pos, vel, ids, modified=np.ones(len(ids), dtype=bool))
        self.do_next = float(self.do_check[:self.n_do].min()) if self.n_do else np.inf

    def _inject(self):
        rate = influx_rate(self.V, self.cfg.r_act, self.cfg.N, self.d)
        if self.cfg.L is not None:
            n_mod = int(self.modified.sum()) + self.n_do
            rate *= max(1.0 - n_mod / (self.cfg.N * self.cfg.L**self.d), 0.0)
        normals, v, jitter = sample_influx(self.V, self.cfg.r_act, self.cfg.dt,
                                           self.cfg.N, self.rng, self.d, rate=rate)
        if len(jitter) == 0:
            return
        x = self.X[None, :] + self.cfg.r_act * normals + (self.cfg.dt - jitter)[:, None] * v
        if self.cfg.L is not None:
            x = dy.wrap_positions(x, self.cfg.L)
        ids = np.arange(self.next_id, self.next_id + len(jitter), dtype=np.int64)
        self.next_id += len(jitter)
        self.n_injected += len(jitter)
        self._append(x, v, ids, modified=np.zeros(len(jitter), dtype=bool))

    def _append(self, pos, vel, ids, modified):
        n0 = self.pos.shape[0]
        self.pos = np.concatenate([self.pos, pos])
        self.vel = np.concatenate([self.vel, vel])
        self.ids = np.concatenate([self.ids, ids])
        self.modified = np.concatenate([self.modified, modified])
        self.near = np.concatenate([self.near,
                                    np.arange(n0, self.pos.shape[0], dtype=np.int64)])
        sp = np.sqrt(np.max(np.einsum("ij,ij->i", vel, vel), initial=0.0))
        self.max_speed = max(self.max_speed, float(sp))
        if self.pos.shape[0] > self.cfg.particle_cap:
            raise RuntimeError(
                f"particle count {self.pos.shape[0]} exceeded the cap "
                f"{self.cfg.particle_cap} (runaway injection?)")

    def _demote(self):
        rel, dist2 = self._near_state()
        far = dist2 > self.cfg.r_out ** 2
        if not far.any():
            return rel, dist2
        gone = self.near[far]
        t = self.t
        mod = self.modified[gone]
        to_dormant = gone[mod]
        self.n_retired += int((~mod).sum())
        if to_dormant.size:
            x = self.pos[to_dormant]
            v = self.vel[to_dormant]
            delay, _ = self._reentry_delay(x, v)
            self._push_dormant(self.ids[to_dormant], x, v, t, t + delay)
        keep = np.ones(self.pos.shape[0], dtype=bool)
        keep[gone] = False
        remap = np.cumsum(keep) - 1
        self.pos = self.pos[keep]
        self.vel = self.vel[keep]
        self.ids = self.ids[keep]
        self.modified = self.modified[keep]
        self.near = remap[self.near[~far]]
        return rel[~far], dist2[~far]

    # -- core step ----------------------------------------------------------

    def _forces_near(self, cached=None):
        """(F_tagged, near-local in-R selector, per-particle forces, rel, dist2)."""
        rel, dist2 = self._near_state() if cached is None else cached
        sel = np.nonzero(dist2 < self.R * self.R)[0]
        if self.exclude_id is not None and sel.size:
            keep = self.ids[self.near[sel]] != self.exclude_id
            sel = sel[keep]
        if sel.size == 0:
            return np.zeros(self.d), sel, np.zeros((0, self.d)), rel, dist2
        per = gradient(self.spec, rel[sel]) / self.cfg.N
        return -per.sum(axis=0), sel, per, rel, dist2

    def step(self):
        cfg = self.cfg
        dt = cfg.dt
        if self._acc is None:
            ft, sel, per, _, _ = self._forces_near()
            self._acc = (ft, self.near[sel], per)
        ft, gsel, per = self._acc
        half = 0.5 * dt
        self.V += half * ft
        if gsel.size:
            self.vel[gsel] += half * per
            self.modified[gsel] |= np.any(per != 0.0, axis=1)
        self.X = self.X + dt * self.V
        self.pos += dt * self.vel
        if cfg.L is not None:
            self.X = dy.wrap_positions(self.X, cfg.L)
            self.pos = dy.wrap_positions(self.pos, cfg.L)
        self.t += dt

        cached = None
        if self.mode == RESERVOIR:
            self._promote_due()
            self._inject()
            cached = self._demote()

        if self.near_budget <= 0:
            self._refresh_near()
            cached = None
        self.near_budget -= 1

        ft, sel, per, rel, dist2 = self._forces_near(cached)
        self.V += half * ft
        if sel.size:
            gsel = self.near[sel]
            self.vel[gsel] += half * per
            self.modified[gsel] |= np.any(per != 0.0, axis=1)
            self._acc = (ft, gsel, per)
        else:
            self._acc = (ft, self.near[sel], per)

        # events from the post-step in-ball set
        inball_local = np.nonzero(dist2 < self.R * self.R)[0]
        cur = self.near[inball_local]
        cur_ids = self.ids[cur]
        order = np.argsort(cur_ids)
        cur_sorted = cur_ids[order]
        if cur_sorted.size or self.inball_ids.size:
            new_mask = ~np.isin(cur_sorted, self.inball_ids, assume_unique=True)
            gone = self.inball_ids[~np.isin(self.inball_ids, cur_sorted,
                                            assume_unique=True)]
            if new_mask.any():
                rows = cur[order[new_mask]]
                dv = self.vel[rows] - self.V[None, :]
                u_rel = np.sqrt(np.einsum("ij,ij->i", dv, dv))
                self.log.entries(cur_sorted[new_mask], self.t, u_rel)
            if gone.size:
                self.log.exits(gone, self.t)
        self.inball_ids = cur_sorted

        self.max_active = max(self.max_active, self.pos.shape[0])
        if self.fm is not None:
            self._accumulate_moments(rel, dist2, inball_local)

    def _accumulate_moments(self, rel, dist2, inball_local):
        fm = self.fm
        cfg = self.cfg
        n_in = inball_local.size
        fm.sup_inball = max(fm.sup_inball, n_in)
        if np.linalg.norm(self.V) >= np.sqrt(cfg.N) or \
           (self.vel.size and np.max(np.einsum("ij,ij->i", self.vel, self.vel)) >= cfg.N):
            fm.cutoff_violations += 1
        if n_in:
            rin = rel[inball_local]
            g = gradient(self.spec, rin).sum(axis=0)
            h = hessian(self.spec, rin).sum(axis=0)
            th = third_derivative(self.spec, rin).sum(axis=0)
            u = np.linalg.norm(self.vel[self.near[inball_local]] - self.V[None, :], axis=1)
            tm = np.minimum(1.0 / np.maximum(u, 1e-300), cfg.N ** (1.0 / 3.0))
            pw = tm.copy()
            for k in range(6):
                fm.sup_tm_sums[k] = max(fm.sup_tm_sums[k], float(pw.sum()))
                pw = pw * tm
        else:
            g = np.zeros(self.d)
            h = np.zeros((self.d, self.d))
            th = np.zeros((self.d, self.d, self.d))
        fm.sup_grad = max(fm.sup_grad, float(np.abs(g).max()))
        fm.sup_hess = max(fm.sup_hess, float(np.abs(h).max()))
        fm.sup_third = max(fm.sup_third, float(np.abs(th).max()))
        self._cum_grad += cfg.dt * g
        self._cum_hess += cfg.dt * h
        self._cum_third += cfg.dt * th

    def record_moments(self):
        fm = self.fm
        fm.times.append(self.t)
        fm.cum_grad.append(self._cum_grad.copy())
        fm.cum_hess.append(self._cum_hess.copy())
        fm.cum_third.append(self._cum_third.copy())

    def energy(self) -> float:
        rel, dist2 = self._near_state()
        mask = dist2 < self.R * self.R
        if self.exclude_id is not None and mask.any():
            mask = mask & (self.ids[self.near] != self.exclude_id)
        pot = float(np.sum(value(self.spec, rel[mask]))) / self.cfg.N if mask.any() else 0.0
        kin = 0.5 * float(self.V @ self.V) + 0.5 * float(
            np.einsum("ij,ij->", self.vel, self.vel))
        return kin + pot


def run_trajectory(cfg: EngineConfig, mode: str, seed: int,
                   exclude_id: int | None = None, initial=None,
                   rng=None) -> TrajectoryRecord:
    """Integrate one trajectory to the horizon and return its record."""
    rng = make_rng(seed) if rng is None else rng
    run = _Run(cfg, mode, rng, exclude_id=exclude_id, initial=initial)
    n_steps = int(round(cfg.horizon / cfg.dt))
    n_rec = n_steps // cfg.stride + 1
    times = np.empty(n_rec)
    Vs = np.empty((n_rec, run.d))
    Xs = np.empty((n_rec, run.d))
    energy = np.empty(n_rec) if (cfg.track_energy and mode == FULL_TORUS) else None

    run._refresh_near()
    k_rec = 0
    times[0] = 0.0
    Vs[0] = run.V
    Xs[0] = run.X
    if energy is not None:
        energy[0] = run.energy()
    if run.fm is not None:
        run.record_moments()
    k_rec = 1
    for k in range(1, n_steps + 1):
        run.step()
        if k % cfg.stride == 0:
            times[k_rec] = run.t
            Vs[k_rec] = run.V
            Xs[k_rec] = run.X
            if energy is not None:
                energy[k_rec] = run.energy()
            if run.fm is not None:
                run.record_moments()
            k_rec += 1
    run.log.close_all(run.t)
    return TrajectoryRecord(
        mode=mode,
        seed=seed,
        config_key=config_key(cfg, mode),
        sample_times=times[:k_rec],
        V_samples=Vs[:k_rec],
        X_samples=Xs[:k_rec],
        energy=None if energy is None else energy[:k_rec],
        events=run.log.events,
        n_injected=run.n_injected,
        n_retired=run.n_retired,
        n_promoted=run.n_promoted,
        max_active=run.max_active,
        force_moments=run.fm,
    )


def schedule_reentry(x, v, X, V, r_act: float, v_bound: float, t: float,
                     L: float | None = None) -> float:
    """Earliest possible re-entry time for a dormant particle.

    No re-entry can happen before t + (dist - R_act)/(|v| + v_bound) because
    both closing speeds are bounded; the caller re-schedules at each check.
    """
    dist = float(np.linalg.norm(dy.minimal_image(np.asarray(x, float),
                                                 np.asarray(X, float), L)))
    speed = float(np.linalg.norm(v))
    if v_bound < float(np.linalg.norm(V)):
        raise ValueError("v_bound must dominate the current tagged speed")
    return t + max(dist - r_act, 0.0) / (speed + v_bound)


# ---------------------------------------------------------------------------
# event classification


@dataclass
class EventSummary:
    n_events: int
    n_interacting: int
    n_recollisions: int
    durations: np.ndarray
    u_entries: np.ndarray
    ratio_duration_tm: np.ndarray     # duration / T_m = duration * u
    within_bound_fraction: float      # fraction with duration <= c_T * T_m
    slow_fraction: float              # fraction with u < N^{-gamma_r}


GAMMA_R = 0.25 + 1.0 / 36.0  # slow-particle threshold exponent 5/18


@dataclass
class SlimEventStats:
    """Compact per-trajectory event statistics (ensemble-friendly)."""

    n_events: int
    n_interacting: int
    n_recollisions: int
    within_bound_fraction: float
    slow_fraction: float
    ratio_hist: np.ndarray          # histogram of duration/T_m over RATIO_BINS
    mean_duration: float


RATIO_BINS = np.concatenate([np.linspace(0.0, 15.0, 31), [np.inf]])


def summarize_events_slim(record: "TrajectoryRecord", spec: PotentialSpec, N: float,
                          c_T: float | None = None) -> SlimEventStats:
    s = classify_events(record, spec, N, c_T)
    hist, _ = np.histogram(s.ratio_duration_tm[np.isfinite(s.durations)]
                           if s.n_events else np.zeros(0), bins=RATIO_BINS)
    finite = s.durations[np.isfinite(s.durations)] if s.n_events else np.zeros(0)
    return SlimEventStats(
        n_events=s.n_events, n_interacting=s.n_interacting,
        n_recollisions=s.n_recollisions,
        within_bound_fraction=s.within_bound_fraction,
        slow_fraction=s.slow_fraction, ratio_hist=hist,
        mean_duration=float(finite.mean()) if finite.size else 0.0,
    )


def classify_events(record: TrajectoryRecord, spec: PotentialSpec, N: float,
                    c_T: float | None = None) -> EventSummary:
    """Durations against the T_m = 1/u bound, recollision counts, slow flags.

    c_T defaults to 12 R: twice the paper-style 6R/u exit bound.
    """
    if c_T is None:
        c_T = 12.0 * spec.R
    evs = record.events
    if not evs:
        return EventSummary(0, 0, 0, np.zeros(0), np.zeros(0), np.zeros(0), 1.0, 0.0)
    dur = np.array([e.t_exit - e.t_entry for e in evs])
    u = np.array([e.u_entry for e in evs])
    rec = sum(1 for e in evs if e.kind == "recollision")
    ids = {e.particle_id for e in evs}
    tm = 1.0 / np.maximum(u, 1e-300)
    ok = dur <= c_T * tm
    slow = u < N ** (-GAMMA_R)
    return EventSummary(
        n_events=len(evs),
        n_interacting=len(ids),
        n_recollisions=rec,
        durations=dur,
        u_entries=u,
        ratio_duration_tm=dur * u,
        within_bound_fraction=float(ok.mean()),
        slow_fraction=float(slow.mean()),
    )


# ---------------------------------------------------------------------------
# twin-trajectory experiment


@dataclass
class TwinResult:
    record: TrajectoryRecord
    record_bar: TrajectoryRecord
    removed_id: int
    sigma1: float
    u_entry: float
    times: np.ndarray
    dX: np.ndarray                 # |X_t - Xbar_t|
    dV: np.ndarray                 # |V_t - Vbar_t|
    dV_corrected: np.ndarray       # |V - Vbar + (1/N) int grad_phi(Xbar - xbar1)|
    dX_corrected: np.ndarray


def _select_particle(cfg: EngineConfig, seed: int, selector) -> tuple[int, float, float]:
    """Run the base dynamics until some particle matches the selector.

    selector: (u_band, t_max) — first particle entering B(X, R) whose entry
    relative speed lies in u_band.
    """
    u_lo, u_hi = selector
    rng = make_rng(seed)
    run = _Run(cfg, FULL_TORUS, rng)
    run._refresh_near()
    n_steps = int(round(cfg.horizon / cfg.dt))
    for _ in range(n_steps):
        run.step()
        for e in run.log.events:
            # skip particles that started inside the ball (logged at step 1)
            if e.t_entry > 2.5 * cfg.dt and u_lo <= e.u_entry <= u_hi:
                return e.particle_id, e.t_entry, e.u_entry
    raise RuntimeError("no interacting particle matched the selector band")


def twin_trajectory(cfg: EngineConfig, seed: int, selector=(0.5, 2.0),
                    horizon_after: float | None = None) -> TwinResult:
    """Paired run with and without one particle's influence (full torus).

    The barred run removes the selected particle from the coupling entirely
    (it free-streams); everything else starts from identical initial data.
    Returns difference traces against t - sigma1 plus the second-order
    corrected differences built from the free-streamed x^1.
    """
    cfg.validate(FULL_TORUS)
    pid, sigma1, u_entry = _select_particle(cfg, seed, selector)
    if horizon_after is not None:
        cfg = replace(cfg, horizon=sigma1 + horizon_after)

    def fresh_run(exclude):
        rng = make_rng(seed)
        ic = sample_initial_configuration(cfg.spec, cfg.law, cfg.L, cfg.N, rng)
        run = _Run(cfg, FULL_TORUS, rng,
                   exclude_id=exclude,
                   initial=(ic.tagged_X, ic.tagged_V, ic.positions, ic.velocities))
        run._refresh_near()
        return run

    run_a = fresh_run(None)
    run_b = fresh_run(pid)
    n_steps = int(round(cfg.horizon / cfg.dt))
    stride = cfg.stride
    n_rec = n_steps // stride + 1
    times = np.zeros(n_rec)
    dX = np.zeros(n_rec)
    dV = np.zeros(n_rec)
    dXc = np.zeros(n_rec)
    dVc = np.zeros(n_rec)
    VA = np.zeros((n_rec, run_a.d))
    VB = np.zeros((n_rec, run_a.d))

    # corrections accumulate (1/N) int grad_phi(Xbar - xbar1) along run B,
    # where xbar1 free-streams (it is excluded from coupling in run B)
    j1 = int(np.nonzero(run_b.ids == pid)[0][0])
    corr_V = np.zeros(run_a.d)
    corr_X = np.zeros(run_a.d)
    dt = cfg.dt

    def corr_increment():
        relb = dy.minimal_image(run_b.X, run_b.pos[j1], cfg.L)
        return gradient(cfg.spec, relb) / cfg.N

    k_rec = 0
    g_prev = corr_increment()
    times[0] = 0.0
    VA[0] = run_a.V
    VB[0] = run_b.V
    k_rec = 1
    for k in range(1, n_steps + 1):
        run_a.step()
        run_b.step()
        g_new = corr_increment()
        corr_X += dt * (corr_V + 0.5 * dt * g_prev)
        corr_V += 0.5 * dt * (g_prev + g_new)
        g_prev = g_new
        if k % stride == 0:
            times[k_rec] = run_a.t
            dxv = dy.minimal_image(run_a.X, run_b.X, cfg.L)
            dX[k_rec] = float(np.linalg.norm(dxv))
            dV[k_rec] = float(np.linalg.norm(run_a.V - run_b.V))
            dVc[k_rec] = float(np.linalg.norm(run_a.V - run_b.V + corr_V))
            dXc[k_rec] = float(np.linalg.norm(dxv + corr_X))
            VA[k_rec] = run_a.V
            VB[k_rec] = run_b.V
            k_rec += 1
    rec_a = TrajectoryRecord(FULL_TORUS, seed, config_key(cfg, FULL_TORUS),
                             times[:k_rec], VA[:k_rec], np.zeros((k_rec, run_a.d)),
                             None, run_a.log.events)
    rec_b = TrajectoryRecord(FULL_TORUS, seed, config_key(cfg, FULL_TORUS),
                             times[:k_rec], VB[:k_rec], np.zeros((k_rec, run_a.d)),
                             None, run_b.log.events)
    return TwinResult(
        record=rec_a, record_bar=rec_b, removed_id=pid, sigma1=sigma1,
        u_entry=u_entry, times=times[:k_rec], dX=dX[:k_rec], dV=dV[:k_rec],
        dV_corrected=dVc[:k_rec], dX_corrected=dXc[:k_rec],
    )


# ---------------------------------------------------------------------------
# serialization: columnar CSV bundle + JSON sidecar


def save_record(record: TrajectoryRecord, basepath: str):
    """Write <base>_trajectory.csv, <base>_events.csv, <base>.json."""
    import io
    import os

    def atomic_write(path, text):
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            f.write(text)
        os.replace(tmp, path)

    d = record.V_samples.shape[1]
    buf = io.StringIO()
    cols = ["t"] + [f"V{i}" for i in range(d)] + [f"X{i}" for i in range(d)]
    if record.energy is not None:
        cols.append("H")
    buf.write(",".join(cols) + "\n")
    for k in range(len(record.sample_times)):
        row = [repr(float(record.sample_times[k]))]
        row += [repr(float(x)) for x in record.V_samples[k]]
        row += [repr(float(x)) for x in record.X_samples[k]]
        if record.energy is not None:
            row.append(repr(float(record.energy[k])))
        buf.write(",".join(row) + "\n")
    atomic_write(basepath + "_trajectory.csv", buf.getvalue())

    buf = io.StringIO()
    buf.write("particle_id,t_entry,t_exit,u_entry,kind\n")
    for e in record.events:
        buf.write(f"{e.particle_id},{e.t_entry!r},{e.t_exit!r},{e.u_entry!r},{e.kind}\n")
    atomic_write(basepath + "_events.csv", buf.getvalue())

    side = {
        "mode": record.mode,
        "seed": record.seed,
        "config_key": record.config_key,
        "n_samples": int(len(record.sample_times)),
        "n_events": len(record.events),
        "n_recollisions": sum(1 for e in record.events if e.kind == "recollision"),
        "n_injected": record.n_injected,
        "n_retired": record.n_retired,
        "n_promoted": record.n_promoted,
        "max_active": record.max_active,
    }
    atomic_write(basepath + ".json", json.dumps(side, indent=2, sort_keys=True) + "\n")
