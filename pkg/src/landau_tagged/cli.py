"""Configuration, orchestration, and report emission.

Subcommands: simulate, coeffs, sde, validate, twin, bounds, sweep.
One YAML (or JSON) config document drives everything; every output carries
the canonical config hash and seed, and identical seed+config produce
byte-identical CSVs for any worker count (per-trajectory streams are
index-derived, results are merged in index order).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from multiprocessing import get_context

import numpy as np
import yaml

from . import bounds as bd
from . import coefficients as co
from . import engine as eng
from . import sde as sde_mod
from . import stats as st
from .ensemble import InitialLaw
from .potential import PotentialSpec, fourier_table


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # system
    d: int = 4
    N: float = 64.0
    L_over_R: float | None = 8.0          # None = free space (reservoir only)
    A: float = 1.0
    R: float = 1.0
    p: int = 4
    # run
    mode: str = eng.RESERVOIR
    dt: float | None = None               # default R/(20 v_ref)
    v_ref: float = 4.0
    tau_max: float = 0.5
    stride: int = 10
    ensemble: int = 8
    seed: int = 0
    g0_kind: str = "uniform"
    g0_amplitude: float = 0.0
    g0_coordinate: int = 0
    # engine details
    act_margin_steps: float = 4.0
    out_margin_steps: float = 2.0
    v_bound_slack: float = 4.0
    particle_cap: int = 1_000_000
    refresh_interval: int = 8
    emit_force_moments: bool = False
    # coeffs
    coeff_grid: tuple = (0.0, 0.5, 1.0, 2.0, 4.0)
    table_vmax: float = 8.0
    table_knots: int = 64
    # sde
    sde_dtau: float = 0.002
    sde_paths: int = 10000
    # diagnostics thresholds
    delta: float = 0.3
    alpha: float | None = None
    beta: float | None = None
    c_T_factor: float = 12.0
    ks_p_threshold: float = 0.01

    def potential(self) -> PotentialSpec:
        return PotentialSpec(R=self.R, A=self.A, p=self.p, d=self.d)

    def law(self) -> InitialLaw:
        return InitialLaw(self.g0_kind, self.g0_amplitude, self.g0_coordinate)

    def dt_value(self) -> float:
        return self.dt if self.dt is not None else self.R / (20.0 * self.v_ref)

    def engine_config(self, horizon: float | None = None,
                      **overrides) -> eng.EngineConfig:
        L = None if self.L_over_R is None else self.L_over_R * self.R
        kw = dict(
            spec=self.potential(), N=self.N, L=L, dt=self.dt_value(),
            horizon=self.tau_max * self.N if horizon is None else horizon,
            stride=self.stride, law=self.law(), v_ref=self.v_ref,
            act_margin_steps=self.act_margin_steps,
            out_margin_steps=self.out_margin_steps,
            v_bound_slack=self.v_bound_slack,
            particle_cap=self.particle_cap,
            refresh_interval=self.refresh_interval,
            emit_force_moments=self.emit_force_moments,
        )
        kw.update(overrides)
        return eng.EngineConfig(**kw)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def parse_config(text: str) -> RunConfig:
    """Parse + validate a YAML/JSON config document (flat keys or sections)."""
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed config document: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    flat = {}
    for key, val in doc.items():
        if isinstance(val, dict):
            for k2, v2 in val.items():
                flat[k2] = v2
        else:
            flat[key] = val
    unknown = set(flat) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    if "coeff_grid" in flat and isinstance(flat["coeff_grid"], list):
        flat["coeff_grid"] = tuple(float(x) for x in flat["coeff_grid"])
    cfg = RunConfig(**flat)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig):
    if not (2 <= cfg.d <= 6):
        raise ConfigError(f"field 'd': dimension must lie in [2, 6], got {cfg.d}")
    for name in ("N", "A", "R", "tau_max", "v_ref"):
        v = getattr(cfg, name)
        if name != "A" and not v > 0:
            raise ConfigError(f"field {name!r}: must be positive, got {v}")
        if name == "A" and v < 0:
            raise ConfigError(f"field 'A': must be nonnegative, got {v}")
    if cfg.dt is not None and not cfg.dt > 0:
        raise ConfigError(f"field 'dt': must be positive, got {cfg.dt}")
    if cfg.stride < 1 or cfg.ensemble < 1:
        raise ConfigError("fields 'stride'/'ensemble': must be >= 1")
    if cfg.mode not in (eng.FULL_TORUS, eng.RESERVOIR):
        raise ConfigError(f"field 'mode': unknown mode {cfg.mode!r}")
    if cfg.mode == eng.FULL_TORUS:
        if cfg.L_over_R is None:
            raise ConfigError("field 'L_over_R': full_torus mode needs a torus side")
        if cfg.L_over_R <= 4.0:
            raise ConfigError(
                f"field 'L_over_R': must exceed 4 (L > 4R), got {cfg.L_over_R}")
    if not (0 < cfg.sde_dtau <= cfg.tau_max):
        raise ConfigError("field 'sde_dtau': need 0 < sde_dtau <= tau_max")
    cfg.law()          # validates g0 fields
    cfg.potential()    # validates potential fields


def serialize_config(cfg: RunConfig) -> str:
    """Canonical serialization (sorted keys, plain scalars): hash-stable."""
    d = dataclasses.asdict(cfg)
    d["coeff_grid"] = list(d["coeff_grid"])
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()[:16]


def config_roundtrip(cfg: RunConfig) -> RunConfig:
    return parse_config(serialize_config(cfg))


# ---------------------------------------------------------------------------
# deterministic ensemble execution


def _traj_worker(args):
    cfg_s, mode, seed, slim = args
    cfg = parse_config(cfg_s)
    record = eng.run_trajectory(cfg.engine_config(), mode, seed)
    if not slim:
        return record
    summary = eng.summarize_events_slim(record, cfg.potential(), cfg.N,
                                        c_T=cfg.c_T_factor * cfg.R)
    record.events = []
    record.X_samples = np.zeros((0, cfg.d))
    return record, summary


def run_ensemble(cfg: RunConfig, mode: str, seeds, threads: int = 0, slim: bool = True):
    """Map trajectories over a worker pool; merge in seed-index order."""
    threads = threads or os.cpu_count() or 1
    jobs = [(serialize_config(cfg), mode, int(s), slim) for s in seeds]
    if threads == 1 or len(jobs) == 1:
        return [_traj_worker(j) for j in jobs]
    with get_context("fork").Pool(threads) as pool:
        return pool.map(_traj_worker, jobs, chunksize=1)


# ---------------------------------------------------------------------------
# file output helpers


def atomic_write(path: str, text: str):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def write_csv(path: str, header: list, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(x)) if isinstance(x, (float, np.floating))
                              else str(x) for x in row))
    atomic_write(path, "\n".join(lines) + "\n")


def write_json(path: str, obj):
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: RunConfig, outdir: str, threads: int) -> int:
    os.makedirs(outdir, exist_ok=True)
    seeds = [cfg.seed + i for i in range(cfg.ensemble)]
    results = run_ensemble(cfg, cfg.mode, seeds, threads, slim=False)
    for rec in results:
        eng.save_record(rec, os.path.join(outdir, f"traj_{rec.seed:06d}"))
    write_json(os.path.join(outdir, "run.json"), {
        "config": json.loads(serialize_config(cfg)),
        "config_hash": config_hash(cfg),
        "mode": cfg.mode,
        "seeds": seeds,
    })
    return 0


def cmd_coeffs(cfg: RunConfig, outdir: str, threads: int) -> int:
    os.makedirs(outdir, exist_ok=True)
    spec = cfg.potential()
    rows = []
    for u in cfg.coeff_grid:
        a, b, lam = co.radial_coefficients(float(u), spec)
        rows.append([u, a, b, lam, abs(lam + a * u)])
    write_csv(os.path.join(outdir, "coefficients.csv"),
              ["speed", "a", "b", "lambda", "drift_identity_residual"], rows)
    table = fourier_table(spec)
    grid = [np.zeros(cfg.d)]
    for u in cfg.coeff_grid:
        if u > 0:
            v = np.zeros(cfg.d)
            v[0] = u
            grid.append(v)
    report = co.check_identities(grid, spec, table)
    write_json(os.path.join(outdir, "identities.json"),
               dict(report.to_dict(), config_hash=config_hash(cfg), seed=cfg.seed))
    return 0 if report.passed else 1


def cmd_sde(cfg: RunConfig, outdir: str, threads: int) -> int:
    os.makedirs(outdir, exist_ok=True)
    spec = cfg.potential()
    table = co.build_coefficient_table(spec, cfg.table_vmax, cfg.table_knots)
    sc = sde_mod.SdeConfig(d=cfg.d, dtau=cfg.sde_dtau, tau_max=cfg.tau_max,
                           n_paths=cfg.sde_paths, law=cfg.law(), seed=cfg.seed)
    res = sde_mod.run_sde_ensemble(sc, table, tau_grid=[cfg.tau_max / 2, cfg.tau_max])
    for tau, samples in sorted(res.marginals.items()):
        write_csv(os.path.join(outdir, f"sde_marginal_tau{tau:g}.csv"),
                  [f"V{i}" for i in range(cfg.d)], samples)
    write_json(os.path.join(outdir, "sde.json"), {
        "config_hash": config_hash(cfg), "seed": cfg.seed,
        "taus": sorted(map(float, res.marginals)),
        "n_paths": cfg.sde_paths,
    })
    return 0


def cmd_validate(cfg: RunConfig, outdir: str, threads: int) -> int:
    os.makedirs(outdir, exist_ok=True)
    cfg_fm = dataclasses.replace(cfg, emit_force_moments=True)
    seeds = [cfg.seed + i for i in range(cfg.ensemble)]
    results = run_ensemble(cfg_fm, cfg.mode, seeds, threads)
    records = [r for r, s in results]
    summaries = [s for r, s in results]
    spec = cfg.potential()
    report = st.DiagnosticsReport()
    fluct = st.fluctuation_diagnostics(records, spec, cfg.N, cfg.delta,
                                       cfg.alpha, cfg.beta)
    report.add("pointwise_fluctuation_violations",
               max(fluct.pointwise_violations.values()), 0.0, 0.05,
               max(fluct.pointwise_violations.values()) <= 0.05)
    rows = st.interaction_recollision_stats({cfg.N: summaries})
    r0 = rows[0]
    report.add("duration_within_12R_Tm", r0.within_bound_fraction, 0.0, 0.99,
               r0.within_bound_fraction >= 0.99)
    report.add("recollision_frequency", r0.frequency,
               r0.wilson_high - r0.frequency, 1.0, True, note="informational")
    write_json(os.path.join(outdir, "diagnostics.json"), {
        "config_hash": config_hash(cfg), "seed": cfg.seed,
        "report": report.to_dict(),
        "fluctuations": fluct.to_dict(),
        "recollisions": dataclasses.asdict(r0),
    })
    write_csv(os.path.join(outdir, "recollision_rates.csv"),
              ["N", "n_interacting", "n_recollisions", "frequency",
               "wilson_low", "wilson_high"],
              [[r.N, r.n_interacting, r.n_recollisions, r.frequency,
                r.wilson_low, r.wilson_high] for r in rows])
    return 0 if report.all_passed else 1


def cmd_twin(cfg: RunConfig, outdir: str, threads: int) -> int:
    os.makedirs(outdir, exist_ok=True)
    ec = cfg.engine_config(horizon=cfg.tau_max * cfg.N,
                           emit_force_moments=False, L=cfg.L_over_R * cfg.R)
    tw = eng.twin_trajectory(ec, cfg.seed, horizon_after=None)
    write_csv(os.path.join(outdir, "twin.csv"),
              ["t", "dX", "dV", "dX_corrected", "dV_corrected"],
              zip(tw.times, tw.dX, tw.dV, tw.dX_corrected, tw.dV_corrected))
    write_json(os.path.join(outdir, "twin.json"), {
        "config_hash": config_hash(cfg), "seed": cfg.seed,
        "removed_id": tw.removed_id, "sigma1": tw.sigma1, "u_entry": tw.u_entry,
    })
    return 0


def cmd_bounds(cfg: RunConfig, outdir: str, threads: int) -> int:
    os.makedirs(outdir, exist_ok=True)
    from .ensemble import make_rng
    prob = bd.cosh_benchmark_problem(100.0, 1.0, 2.0)
    sol = bd.solve_linear_second_order(prob, prob.T / 2000)
    exact = bd.cosh_benchmark_exact(100.0, 1.0, 2.0, sol.times[-1])
    rep = bd.gronwall_check(prob, prob.T / 2000,
                            c_cap=bd.simple_lemma_constant(prob.C_A))
    checks = {
        "cosh_rel_error": abs(sol.x[-1][0] - exact) / exact,
        "pointwise_c_hat": rep.c_hat,
        "pointwise_passed": rep.passed,
    }
    avg = []
    for i in range(20):
        p = bd.random_certified_problem(make_rng(cfg.seed, i), dim=3, N=50.0,
                                        a_exponent=0.75)
        avg.append(bd.gronwall_check(p, min(0.01, p.T / 400)).passed)
    checks["averaged_passed_fraction"] = sum(avg) / len(avg)
    write_json(os.path.join(outdir, "bounds.json"),
               dict(checks, config_hash=config_hash(cfg), seed=cfg.seed))
    return 0 if rep.passed and all(avg) else 1


def cmd_sweep(cfg: RunConfig, outdir: str, threads: int) -> int:
    """Desk-scale N sweep {32, 64, 128}: marginals vs the SDE + event rates."""
    os.makedirs(outdir, exist_ok=True)
    spec = cfg.potential()
    table = co.build_coefficient_table(spec, cfg.table_vmax, cfg.table_knots)
    sc = sde_mod.SdeConfig(d=cfg.d, dtau=cfg.sde_dtau, tau_max=cfg.tau_max,
                           n_paths=cfg.sde_paths, law=cfg.law(), seed=cfg.seed)
    sres = sde_mod.run_sde_ensemble(sc, table, tau_grid=[cfg.tau_max])
    sde_m = sres.marginal(cfg.tau_max)
    report = st.DiagnosticsReport()
    summaries_by_N = {}
    rows = []
    for Ni in (32.0, 64.0, 128.0):
        cfg_n = dataclasses.replace(cfg, N=Ni)
        seeds = [cfg.seed + i for i in range(cfg.ensemble)]
        results = run_ensemble(cfg_n, cfg.mode, seeds, threads)
        V_T = np.array([r.VT for r, s in results])
        summaries_by_N[Ni] = [s for r, s in results]
        ks = st.distribution_tests(V_T, sde_m)
        mean_ks = float(np.mean([c["ks"] for c in ks["per_coordinate"]]))
        min_p = float(np.min([c["p"] for c in ks["per_coordinate"]]))
        rows.append([Ni, mean_ks, min_p])
        report.add(f"ks_vs_sde_N{int(Ni)}", mean_ks, 0.0, 1.0, True,
                   note=f"min per-coordinate p = {min_p:.4f}")
    rec_rows = st.interaction_recollision_stats(summaries_by_N)
    write_csv(os.path.join(outdir, "sweep_ks.csv"),
              ["N", "mean_ks_vs_sde", "min_p"], rows)
    write_csv(os.path.join(outdir, "sweep_recollisions.csv"),
              ["N", "n_interacting", "n_recollisions", "frequency",
               "wilson_low", "wilson_high"],
              [[r.N, r.n_interacting, r.n_recollisions, r.frequency,
                r.wilson_low, r.wilson_high] for r in rec_rows])
    write_json(os.path.join(outdir, "sweep.json"), {
        "config_hash": config_hash(cfg), "seed": cfg.seed,
        "report": report.to_dict(),
    })
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "coeffs": cmd_coeffs,
    "sde": cmd_sde,
    "validate": cmd_validate,
    "twin": cmd_twin,
    "bounds": cmd_bounds,
    "sweep": cmd_sweep,
}


def dispatch(subcommand: str, cfg: RunConfig, outdir: str, threads: int = 0) -> int:
    if subcommand not in COMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    try:
        return COMMANDS[subcommand](cfg, outdir, threads)
    except Exception as e:  # machine-readable error report
        os.makedirs(outdir, exist_ok=True)
        write_json(os.path.join(outdir, "error.json"),
                   {"error": type(e).__name__, "message": str(e)})
        raise


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="landau-tagged",
        description="Mean-field tagged-particle simulator and Landau-limit "
                    "verification lab")
    ap.add_argument("subcommand", choices=sorted(COMMANDS))
    ap.add_argument("--config", default=None, help="YAML/JSON config file")
    ap.add_argument("--seed", type=int, default=None, help="64-bit master seed")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--threads", type=int,
                    default=int(os.environ.get("LANDAU_TAGGED_THREADS", "0")),
                    help="worker count (0 = all cores)")
    ap.add_argument("--mode", choices=[eng.FULL_TORUS, eng.RESERVOIR], default=None)
    args = ap.parse_args(argv)

    text = "{}"
    if args.config:
        with open(args.config) as f:
            text = f.read()
    try:
        cfg = parse_config(text)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.mode is not None:
            overrides["mode"] = args.mode
        if overrides:
            cfg = dataclasses.replace(cfg, **overrides)
            validate_config(cfg)
        return dispatch(args.subcommand, cfg, args.out, args.threads)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
