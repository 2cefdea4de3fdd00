"""Torus geometry, pair forces, Hamiltonian, velocity-Verlet integrator.

Only the tagged particle couples: background particles are free apart from
the 1/N feedback from the tagged particle, so all range queries have a
single center.  The mechanical state carries the tagged phase point plus the
tracked background arrays; lifecycle bookkeeping (dormant/retired particles)
lives in the engine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .potential import PotentialSpec, gradient, value


def minimal_image(a, b, L: float | None) -> np.ndarray:
    """Representative of a - b with components in [-L/2, L/2); a - b if L is None."""
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if L is None:
        return diff
    if L <= 0:
        raise ValueError("torus side must be positive")
    return diff - L * np.floor(diff / L + 0.5)


def wrap_positions(x, L: float | None) -> np.ndarray:
    """Canonical torus representatives in [-L/2, L/2)."""
    if L is None:
        return np.asarray(x, dtype=float)
    x = np.asarray(x, dtype=float)
    return x - L * np.floor(x / L + 0.5)


class CellIndex:
    """Uniform-grid spatial hash on the torus, cell side >= interaction range.

    Queries return candidate indices from the 3^d cells around a center;
    updates recompute cell membership only for particles that moved cells.
    """

    def __init__(self, positions: np.ndarray, L: float, cell_size: float):
        if L <= 0 or cell_size <= 0:
            raise ValueError("L and cell_size must be positive")
        self.L = L
        self.n_side = max(int(np.floor(L / cell_size)), 1)
        self.cell_size = L / self.n_side
        self.d = positions.shape[1]
        self.cells: dict[tuple, list] = {}
        self.coords = np.zeros((positions.shape[0], self.d), dtype=np.int64)
        self.rebuild(positions)

    def _coords_of(self, positions):
        return np.floor((positions + self.L / 2.0) / self.cell_size).astype(np.int64) % self.n_side

    def rebuild(self, positions: np.ndarray):
        self.coords = self._coords_of(positions)
        self.cells = {}
        for i, c in enumerate(map(tuple, self.coords)):
            self.cells.setdefault(c, []).append(i)

    def update(self, positions: np.ndarray):
        """Move only the particles whose cell changed (lazy update)."""
        if positions.shape[0] != self.coords.shape[0]:
            self.rebuild(positions)
            return
        new = self._coords_of(positions)
        moved = np.nonzero(np.any(new != self.coords, axis=1))[0]
        for i in moved:
            old_key = tuple(self.coords[i])
            self.cells[old_key].remove(i)
            if not self.cells[old_key]:
                del self.cells[old_key]
            self.cells.setdefault(tuple(new[i]), []).append(i)
        self.coords[moved] = new[moved]

    def query(self, center: np.ndarray) -> np.ndarray:
        """Indices of all particles in the 3^d cells around `center`."""
        base = np.floor((np.asarray(center) + self.L / 2.0) / self.cell_size).astype(np.int64)
        out = []
        for off in np.ndindex(*(3,) * self.d):
            key = tuple((base + np.asarray(off) - 1) % self.n_side)
            out.extend(self.cells.get(key, ()))
        return np.array(sorted(out), dtype=np.int64)

    def consistent_with(self, positions: np.ndarray) -> bool:
        return bool(np.all(self._coords_of(positions) == self.coords))


@dataclass
class SystemState:
    """Tagged phase point plus tracked background arrays.

    L = None means free space (reservoir mode without a torus).  `cell` is an
    optional spatial index over the background positions; when absent, range
    queries fall back to a vectorized scan (faster below ~50k particles).
    """

    t: float
    X: np.ndarray
    V: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    L: float | None
    N: float
    cell: CellIndex | None = None
    acc_tagged: np.ndarray | None = field(default=None, repr=False)
    acc_idx: np.ndarray | None = field(default=None, repr=False)
    acc_part: np.ndarray | None = field(default=None, repr=False)
    # scratch reused by forces(); invalidated on any particle-set change
    _rel: np.ndarray | None = field(default=None, repr=False)
    _dist2: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.pos.shape[0]

    def copy(self) -> "SystemState":
        return SystemState(
            t=self.t, X=self.X.copy(), V=self.V.copy(),
            pos=self.pos.copy(), vel=self.vel.copy(), L=self.L, N=self.N,
            cell=None,
            acc_tagged=None if self.acc_tagged is None else self.acc_tagged.copy(),
            acc_idx=None if self.acc_idx is None else self.acc_idx.copy(),
            acc_part=None if self.acc_part is None else self.acc_part.copy(),
        )

    def invalidate(self):
        self.acc_tagged = None
        self.acc_idx = None
        self.acc_part = None
        self._rel = None
        self._dist2 = None


def displacements(state: SystemState) -> tuple[np.ndarray, np.ndarray]:
    """(X - x_i) displacements and squared distances for all tracked particles."""
    if state._rel is None:
        rel = minimal_image(state.X[None, :], state.pos, state.L)
        state._rel = rel
        state._dist2 = np.einsum("ij,ij->i", rel, rel)
    return state._rel, state._dist2


def forces(state: SystemState, spec: PotentialSpec, exclude: np.ndarray | None = None):
    """(tagged force, in-range indices, per-particle forces).

    tagged force = -(1/N) sum_i grad_phi(X - x_i) over particles within R;
    particle i feels the exact opposite +(1/N) grad_phi(X - x_i), so the
    reported pairs sum to zero identically.  `exclude` masks particle ids out
    of the coupling (used by the twin dynamics).
    """
    d = state.X.shape[0]
    if state.cell is not None:
        cand = state.cell.query(state.X)
        rel = minimal_image(state.X[None, :], state.pos[cand], state.L)
        dist2 = np.einsum("ij,ij->i", rel, rel)
        sel = dist2 < spec.R * spec.R
        idx = cand[sel]
        rel = rel[sel]
    else:
        rel, dist2 = displacements(state)
        idx = np.nonzero(dist2 < spec.R * spec.R)[0]
        rel = rel[idx]
    if exclude is not None and idx.size:
        keep = ~np.isin(idx, exclude)
        idx = idx[keep]
        rel = rel[keep]
    if idx.size == 0:
        return np.zeros(d), idx, np.zeros((0, d))
    per = gradient(spec, rel) / state.N
    return -per.sum(axis=0), idx, per


def hamiltonian(state: SystemState, spec: PotentialSpec,
                exclude: np.ndarray | None = None) -> float:
    """H = |V|^2/2 + sum |v_i|^2/2 + (1/N) sum phi(X - x_i) over tracked particles."""
    kin = 0.5 * float(state.V @ state.V) + 0.5 * float(np.einsum("ij,ij->", state.vel, state.vel))
    rel, dist2 = displacements(state)
    mask = dist2 < spec.R * spec.R
    if exclude is not None:
        mask = mask & ~np.isin(np.arange(state.n), exclude)
    pot = float(np.sum(value(spec, rel[mask]))) / state.N if mask.any() else 0.0
    return kin + pot


def verlet_step(state: SystemState, spec: PotentialSpec, dt: float,
                exclude: np.ndarray | None = None) -> SystemState:
    """One velocity-Verlet update of the coupled system, in place.

    Accelerations are cached across steps; dt < 0 integrates backwards (the
    scheme is time-reversible).  Background particles outside range R feel no
    force and therefore advance ballistically by construction.
    """
    if dt == 0:
        raise ValueError("dt must be nonzero")
    if state.acc_tagged is None:
        ft, idx, fp = forces(state, spec, exclude)
        state.acc_tagged, state.acc_idx, state.acc_part = ft, idx, fp
    half = 0.5 * dt
    state.V += half * state.acc_tagged
    if state.acc_idx.size:
        state.vel[state.acc_idx] += half * state.acc_part
    state.X += dt * state.V
    state.pos += dt * state.vel
    if state.L is not None:
        state.X = wrap_positions(state.X, state.L)
        state.pos = wrap_positions(state.pos, state.L)
    state._rel = None
    state._dist2 = None
    if state.cell is not None:
        state.cell.update(state.pos)
    ft, idx, fp = forces(state, spec, exclude)
    state.V += half * ft
    if idx.size:
        state.vel[idx] += half * fp
    state.acc_tagged, state.acc_idx, state.acc_part = ft, idx, fp
    state.t += dt
    return state
