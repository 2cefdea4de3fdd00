import itertools

import numpy as np
import pytest

from landau_tagged import coefficients as co
from landau_tagged import sde
from landau_tagged import stats as st
from landau_tagged.engine import TrajectoryRecord, FULL_TORUS
from landau_tagged.ensemble import InitialLaw, make_rng
from landau_tagged.potential import PotentialSpec


def test_ks_identical_samples():
    a = make_rng(1).standard_normal(500)
    assert st.ks_statistic_two_sample(a, a.copy()) == 0.0
    assert st.wasserstein1(a, a.copy()) == 0.0


def test_ks_small_sample_exhaustive():
    """n = m = 2 and n = m = 3: statistic matches the rank-pattern enumeration."""
    # D depends only on the interleaving pattern; enumerate all of them
    for n in (2, 3):
        vals = np.arange(2 * n, dtype=float)
        seen = {}
        for comb in itertools.combinations(range(2 * n), n):
            a = vals[list(comb)]
            b = vals[[i for i in range(2 * n) if i not in comb]]
            d = st.ks_statistic_two_sample(a, b)
            # exact D from the lattice-path definition
            grid = np.sort(np.concatenate([a, b]))
            fa = np.searchsorted(np.sort(a), grid, side="right") / n
            fb = np.searchsorted(np.sort(b), grid, side="right") / n
            assert d == pytest.approx(np.abs(fa - fb).max(), abs=1e-15)
            seen[comb] = d
        if n == 2:
            # AABB/BBAA give D=1; every other interleaving gives D=1/2
            counts = sorted(seen.values())
            assert counts.count(1.0) == 2
            assert counts.count(0.5) == 4


def test_ks_null_calibration():
    ok = 0
    for rep in range(100):
        rng = make_rng(1000 + rep)
        a = rng.standard_normal(10_000)
        b = rng.standard_normal(10_000)
        _, p = st.ks_two_sample(a, b)
        ok += p > 0.01
    assert ok >= 98


def test_wasserstein_translation_and_sizes():
    rng = make_rng(2)
    a = rng.standard_normal(2000)
    assert st.wasserstein1(a, a + 0.7) == pytest.approx(0.7, rel=1e-12)
    b = rng.standard_normal(3001)
    w_uneq = st.wasserstein1(a, b)
    assert 0 <= w_uneq < 0.1


def test_wilson_interval():
    lo, hi = st.wilson_interval(0, 0)
    assert (lo, hi) == (0.0, 1.0)
    lo, hi = st.wilson_interval(5, 100)
    assert 0.0 < lo < 0.05 < hi < 0.15
    lo, hi = st.wilson_interval(100, 100)
    assert hi == pytest.approx(1.0, abs=1e-12) and lo > 0.9


def _sde_records(table, n_rec, n_steps, dtau, seed, law=InitialLaw()):
    """Fabricate trajectory records from SDE paths (N = 1 so t == tau)."""
    rng = make_rng(seed)
    recs = []
    for i in range(n_rec):
        V = law.sample(4, 1, rng)
        path = [V[0].copy()]
        for _ in range(n_steps):
            V = sde.em_step(V, dtau, table, rng)
            path.append(V[0].copy())
        times = np.arange(n_steps + 1) * dtau
        recs.append(TrajectoryRecord(
            mode=FULL_TORUS, seed=seed + i, config_key="sde",
            sample_times=times, V_samples=np.array(path),
            X_samples=np.zeros((n_steps + 1, 4)), energy=None, events=[]))
    return recs


def test_martingale_residual_sde_paths(coeff_table4):
    recs = _sde_records(coeff_table4, n_rec=400, n_steps=250, dtau=0.002, seed=5)
    bundle = st.TestFunctionBundle.coordinate(0, 4)
    res, se = st.martingale_residual(recs, bundle, (0.0, 0.5), N=1.0,
                                     table=coeff_table4)
    assert abs(res) < 3 * se + 5e-4    # exact martingale up to EM/trapezoid bias


def test_martingale_residual_zero_potential():
    table0 = co.build_coefficient_table(PotentialSpec(d=4, A=0.0), v_max=4.0, n_knots=8)
    recs = _sde_records(table0, n_rec=20, n_steps=50, dtau=0.01, seed=9)
    bundle = st.TestFunctionBundle.coordinate(0, 4)
    res, se = st.martingale_residual(recs, bundle, (0.0, 0.5), N=1.0, table=table0)
    assert res == 0.0 and se == 0.0


def test_martingale_residual_with_past_window(coeff_table4):
    recs = _sde_records(coeff_table4, n_rec=300, n_steps=250, dtau=0.002, seed=6)
    bundle = st.TestFunctionBundle.coordinate(0, 4)
    g = st.TestFunctionBundle.exp_window(width=2.0)
    res, se = st.martingale_residual(recs, bundle, (0.25, 0.5), N=1.0,
                                     table=coeff_table4, g_windows=[(g, 0.25)])
    assert abs(res) < 3 * se + 5e-4
    with pytest.raises(ValueError):
        st.martingale_residual(recs, bundle, (0.25, 2.0), N=1.0, table=coeff_table4)


def _synthetic_records(kind, n_rec, N, seed=3):
    rng = make_rng(seed)
    dt = 0.125
    n = 400
    recs = []
    for i in range(n_rec):
        times = np.arange(n + 1) * dt
        if kind == "diffusive":
            inc = rng.standard_normal((n, 4)) * np.sqrt(dt / N)
            V = np.concatenate([np.zeros((1, 4)), np.cumsum(inc, axis=0)])
        else:  # ballistic
            a = rng.standard_normal(4) / np.sqrt(N)
            V = times[:, None] * a[None, :]
        recs.append(TrajectoryRecord(FULL_TORUS, seed + i, "syn", times, V,
                                     np.zeros((n + 1, 4)), None, []))
    return recs


def test_increment_exponent_recovers_diffusive_slope():
    recs = _synthetic_records("diffusive", 150, N=64.0)
    fit = st.increment_exponent(recs, p=2, gaps=[2.0, 4.0, 8.0, 16.0, 32.0], N=64.0)
    assert fit.slope == pytest.approx(1.0, abs=0.1)
    fit4 = st.increment_exponent(recs, p=4, gaps=[2.0, 4.0, 8.0, 16.0, 32.0], N=64.0)
    assert fit4.slope == pytest.approx(2.0, abs=0.2)   # Gaussian: E|dV|^4 ~ gap^2


def test_increment_exponent_recovers_ballistic_slope():
    recs = _synthetic_records("ballistic", 100, N=64.0)
    fit = st.increment_exponent(recs, p=2, gaps=[0.25, 0.5, 1.0, 2.0], N=64.0)
    assert fit.slope == pytest.approx(2.0, abs=0.05)


def test_increment_moments_merge_invariance():
    recs = _synthetic_records("diffusive", 60, N=32.0)
    gaps = [2.0, 8.0]
    m_all, c_all = st.increment_moments(recs, gaps, p=2, N=32.0)
    m1, c1 = st.increment_moments(recs[:25], gaps, p=2, N=32.0)
    m2, c2 = st.increment_moments(recs[25:], gaps, p=2, N=32.0)
    merged = (m1 * c1 + m2 * c2) / (c1 + c2)
    assert np.allclose(merged, m_all, rtol=1e-13)
    assert np.array_equal(c1 + c2, c_all)


def test_better_set_exponents_d4():
    alpha, beta = st.better_set_exponents(4, 0.3)
    assert alpha - 0.3 == pytest.approx(1.0 / 24.0, rel=1e-12)
    assert beta + 0.3 == pytest.approx(7.0 / 12.0, rel=1e-12)
    assert alpha - 0.3 == pytest.approx(0.0416666, rel=1e-4)
    assert beta + 0.3 == pytest.approx(0.583333, rel=1e-4)


def test_fluctuation_diagnostics_zero_potential():
    from landau_tagged import engine as eng
    spec0 = PotentialSpec(d=3, A=0.0)
    # N large enough that the sqrt(N) velocity cutoff is essentially vacuous
    cfg = eng.EngineConfig(spec=spec0, N=64.0, L=6.0, dt=0.0125, horizon=2.0,
                           stride=5, emit_force_moments=True)
    recs = [eng.run_trajectory(cfg, eng.RESERVOIR, seed=s) for s in range(3)]
    rep = st.fluctuation_diagnostics(recs, spec0, 64.0, delta=0.3)
    assert max(rep.pointwise_sup.values()) == 0.0
    assert max(rep.pointwise_violations.values()) == 0.0
    assert rep.averaged_violation_fraction == 0.0
    assert rep.cutoff_violation_steps == 0


def test_fluctuation_diagnostics_requires_accumulators():
    rec = TrajectoryRecord(FULL_TORUS, 0, "x", np.zeros(1), np.zeros((1, 3)),
                           np.zeros((1, 3)), None, [])
    with pytest.raises(ValueError):
        st.fluctuation_diagnostics([rec], PotentialSpec(d=3), 16.0)


def test_interaction_recollision_stats_table():
    from landau_tagged.engine import EventSummary
    mk = lambda n_int, n_rec, n_ev: EventSummary(
        n_events=n_ev, n_interacting=n_int, n_recollisions=n_rec,
        durations=np.zeros(0), u_entries=np.zeros(0),
        ratio_duration_tm=np.zeros(0), within_bound_fraction=0.995,
        slow_fraction=0.001)
    rows = st.interaction_recollision_stats({32.0: [mk(1000, 30, 1030)],
                                             128.0: [mk(4000, 60, 4060)]})
    assert rows[0].N == 32.0 and rows[1].N == 128.0
    assert rows[0].frequency == pytest.approx(0.03)
    assert rows[0].wilson_low < 0.03 < rows[0].wilson_high
    assert rows[1].frequency < rows[0].frequency


def test_distribution_tests_api():
    rng = make_rng(8)
    A = rng.standard_normal((500, 3))
    B = rng.standard_normal((800, 3))
    out = st.distribution_tests(A, B)
    assert len(out["per_coordinate"]) == 3
    assert out["speed"]["p"] > 1e-4
    gauss = st.distribution_tests(A, gaussian_reference=True)
    assert all(c["p"] > 1e-4 for c in gauss["per_coordinate"])
    with pytest.raises(ValueError):
        st.distribution_tests(A)


def test_diagnostics_report():
    rep = st.DiagnosticsReport()
    rep.add("x", 1.0, 0.1, 2.0, True)
    rep.add("y", 3.0, 0.1, 2.0, False)
    assert not rep.all_passed
    d = rep.to_dict()
    assert len(d["checks"]) == 2
