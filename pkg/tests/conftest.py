"""Shared fixtures.

The heavy trajectory ensembles (used by the acceptance suite) are built once
per session.  LANDAU_FAST=1 shrinks them for development iterations; the
shipped acceptance scale is the default.
"""

import os

import numpy as np
import pytest

from landau_tagged import coefficients as co
from landau_tagged import engine as eng
from landau_tagged import cli
from landau_tagged.potential import PotentialSpec

FAST = os.environ.get("LANDAU_FAST", "0") == "1"


def scale(n: int, floor: int = 8) -> int:
    return max(n // 16, floor) if FAST else n


@pytest.fixture(scope="session")
def spec4():
    return PotentialSpec(d=4)


@pytest.fixture(scope="session")
def spec3():
    return PotentialSpec(d=3)


@pytest.fixture(scope="session")
def coeff_table4(spec4):
    return co.build_coefficient_table(spec4, v_max=8.0, n_knots=64)


@pytest.fixture(scope="session")
def coeff_table3(spec3):
    return co.build_coefficient_table(spec3, v_max=8.0, n_knots=64)


def base_config_d4(N: float, **over) -> cli.RunConfig:
    import dataclasses
    cfg = cli.RunConfig(d=4, N=N, L_over_R=None, mode=eng.RESERVOIR,
                        tau_max=0.5, stride=4,
                        g0_kind="tanh_tilt", g0_amplitude=0.6, g0_coordinate=0)
    return dataclasses.replace(cfg, **over)


@pytest.fixture(scope="session")
def a8_data():
    """Reservoir ensembles at N in {32, 64, 128}, d=4, tau=0.5, tilted g0."""
    sizes = {32.0: scale(600), 64.0: scale(500), 128.0: scale(400)}
    out = {}
    for N, n_runs in sizes.items():
        cfg = base_config_d4(N, ensemble=n_runs, seed=1000)
        seeds = [cfg.seed + i for i in range(n_runs)]
        out[N] = cli.run_ensemble(cfg, eng.RESERVOIR, seeds, threads=0, slim=True)
    return out


@pytest.fixture(scope="session")
def a7_data():
    """g0 = 1 reservoir runs (microscopic stationarity), d=4, N=64."""
    n_runs = scale(240)
    cfg = base_config_d4(64.0, ensemble=n_runs, seed=7000,
                         g0_kind="uniform", g0_amplitude=0.0)
    seeds = [cfg.seed + i for i in range(n_runs)]
    return cli.run_ensemble(cfg, eng.RESERVOIR, seeds, threads=0, slim=True)


@pytest.fixture(scope="session")
def a6_data():
    """Paired-seed full-torus vs reservoir runs, d=3, L=8R, N=40, T=20."""
    import dataclasses
    n_runs = scale(400)
    cfg = cli.RunConfig(d=3, N=40.0, L_over_R=8.0, tau_max=20.0 / 40.0,
                        stride=10, ensemble=n_runs, seed=4000)
    seeds = [cfg.seed + i for i in range(n_runs)]
    full = cli.run_ensemble(dataclasses.replace(cfg, mode=eng.FULL_TORUS),
                            eng.FULL_TORUS, seeds, threads=0, slim=True)
    resv = cli.run_ensemble(dataclasses.replace(cfg, mode=eng.RESERVOIR),
                            eng.RESERVOIR, seeds, threads=0, slim=True)
    return full, resv


@pytest.fixture(scope="session")
def sde_marginal4(coeff_table4):
    """SDE ensemble matched to the a8 configuration (tilted g0, tau = 0.5)."""
    from landau_tagged import sde as sde_mod
    from landau_tagged.ensemble import InitialLaw
    sc = sde_mod.SdeConfig(d=4, dtau=0.002, tau_max=0.5,
                           n_paths=scale(10000, floor=2000),
                           law=InitialLaw("tanh_tilt", 0.6, 0), seed=99)
    res = sde_mod.run_sde_ensemble(sc, coeff_table4, tau_grid=[0.5])
    return res.marginal(0.5)
