import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deflab.errors import InvalidArgumentError, NumericFailureError
from deflab.deflators import (
    DeflatorSpec, compensated_cumsum, deflator_path, gap_report, kernel_check, make_nu_n,
    max_closure_gap, nu_n_stopped_value, parse_tag, stochastic_exponential, switch_process,
    tanaka_local_time, zero_kernel,
)
from deflab.market import constant_model, counterexample_model, simulate_market
from deflab.paths import BrownianPath, PassageResult, make_time_grid, sample_brownian_batch
from deflab.stats import martingale_drift_test


def counterexample(paths, steps, seed=12, a=1.0, scheme="exact"):
    g = make_time_grid(1.0, steps)
    w = sample_brownian_batch(g, 1, seed, np.arange(paths))
    return simulate_market(counterexample_model(a), w, scheme=scheme)


# -------------------------------------------------------- compensated summation


def test_compensated_cumsum_matches_fsum():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 10_000)) * 1e-3 + 1e-8
    out = compensated_cumsum(x)
    for i in range(3):
        for k in (1, 63, 64, 65, 10_000):
            ref = math.fsum(x[i, :k])
            assert abs(out[i, k - 1] - ref) <= 1e-13


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=300))
@settings(max_examples=100, deadline=None)
def test_compensated_cumsum_property(values):
    out = compensated_cumsum(np.array([values]))
    scale = sum(abs(v) for v in values) + 1
    assert abs(out[0, -1] - math.fsum(values)) <= 1e-12 * scale


# ----------------------------------------------------- stochastic exponential


def test_zero_integrand_gives_one():
    g = make_time_grid(1.0, 32)
    w = sample_brownian_batch(g, 1, 0, np.arange(10))
    z = stochastic_exponential(np.zeros((10, 32)), w)
    assert np.all(z.z == 1.0)


def test_constant_integrand_closed_form():
    g = make_time_grid(2.0, 500)
    w = sample_brownian_batch(g, 1, 1, np.arange(20))
    q = 0.7
    z = stochastic_exponential(np.full((20, 500), q), w)
    W = w.values[:, :, 0]
    expected = np.exp(-q * W - 0.5 * q * q * g.nodes[None, :])
    assert np.allclose(z.nodes, expected, rtol=1e-12)


def test_hand_example():
    z = stochastic_exponential([[0.5, -1.0]], [[[0.2], [0.1]]], dt=[0.25, 0.25])
    expected = [0.0, -0.1 - 0.03125, -0.1 - 0.03125 + 0.1 - 0.125]
    assert np.allclose(z.log_z[0], expected, atol=1e-15)


def test_positive_even_when_large():
    z = stochastic_exponential(np.full((1, 1000), 30.0), np.full((1, 1000, 1), 0.5), dt=1e-3)
    assert np.all(z.log_z <= 0) and np.all(z.z >= 0)
    assert np.isfinite(z.log_z).all()


def test_nan_integrand_reports_node():
    q = np.zeros((2, 8))
    q[1, 5] = np.nan
    with pytest.raises(NumericFailureError) as err:
        stochastic_exponential(q, np.zeros((2, 8, 1)), dt=0.1)
    assert err.value.node == 5


def test_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        stochastic_exponential(np.zeros((2, 7)), np.zeros((2, 8, 1)), dt=0.1)
    with pytest.raises(InvalidArgumentError):
        stochastic_exponential(np.zeros((2, 8)), np.zeros((2, 8, 1)))


def test_constant_integrand_is_martingale():
    g = make_time_grid(1.0, 64)
    w = sample_brownian_batch(g, 1, 3, np.arange(40_000))
    z = stochastic_exponential(np.full((40_000, 64), 0.5), w)
    cps = [16, 32, 64]
    assert martingale_drift_test(z.nodes[:, cps], 1.0, g.nodes[cps]).passed


# ----------------------------------------------------------------- kernels


def test_nu_n_example_value():
    p = PassageResult(True, 0.5, 32, 1.0, 1.0, "bridge")
    assert nu_n_stopped_value(2.0, p) == pytest.approx(math.exp(-3.0))


def test_nu_n_path_example():
    # W climbs linearly to 1 at t = 0.5; Z stopped at tau equals exp(-3) for n = 2
    g = make_time_grid(1.0, 64)
    inc = np.where(np.arange(64) < 32, 1.0 / 32, 0.0)[:, None]
    w = BrownianPath(g, 1, inc, 0, 0)
    from deflab.paths import BrownianBatch
    batch = BrownianBatch(g, 1, inc[None], 0, np.array([0]))
    m = simulate_market(counterexample_model(1.0), batch, scheme="exact", bridge=False)
    assert m.passage.hit[0] and m.passage.tau[0] == pytest.approx(0.5)
    z = deflator_path(make_nu_n(2.0), m, stop_at_passage=True)
    assert z.terminal[0] == pytest.approx(math.exp(-3.0), rel=1e-12)
    assert w.values[32, 0] == pytest.approx(1.0)


def test_nu_n_validation_and_tags():
    with pytest.raises(InvalidArgumentError):
        make_nu_n(-1.0)
    with pytest.raises(InvalidArgumentError):
        make_nu_n(math.inf)
    assert parse_tag("zero").label == "zero"
    assert parse_tag("nu_n:2").n == 2.0
    assert parse_tag(" nu_n:0.5 ").n == 0.5
    assert make_nu_n(0).tag == "zero"
    for bad in ("nu_n:", "nu_n:-1", "theta", "nu_n:abc"):
        with pytest.raises(InvalidArgumentError):
            parse_tag(bad)


def test_stopped_deflator_matches_closed_form():
    m = counterexample(500, 256)
    z = deflator_path(make_nu_n(1.5), m, stop_at_passage=True)
    p = m.passage
    expected = np.where(p.hit, nu_n_stopped_value(1.5, p),
                        np.exp(-1.5 * m.brownian.values[:, -1, 0] - 1.125))
    assert np.allclose(z.terminal, expected, rtol=1e-10)


def test_kernel_check_counterexample():
    m = counterexample(300, 128)
    assert kernel_check(make_nu_n(3.0), m).passed
    assert kernel_check(zero_kernel(), m).passed
    always = DeflatorSpec(lambda s: np.ones(s.t.shape + (1,)), "always")
    assert not kernel_check(always, m).passed


def test_kernel_check_general_market():
    spec = constant_model(0.0, [0.05], [[0.2, 0.0]], [1.0])
    w = sample_brownian_batch(make_time_grid(1.0, 16), 2, 1, np.arange(20))
    m = simulate_market(spec, w)
    orth = DeflatorSpec(lambda s: np.broadcast_to([0.0, 1.0], s.t.shape + (2,)), "orth")
    par = DeflatorSpec(lambda s: np.broadcast_to([1.0, 0.0], s.t.shape + (2,)), "par")
    assert kernel_check(orth, m).passed
    assert not kernel_check(par, m).passed


def test_full_deflator_positive_and_tracks_inverse_price():
    # with n = 0 the deflator is 1 until tau and then follows 1/S pathwise; the
    # Euler prices are driven by W itself, so the grid error shrinks with the step
    medians = []
    for steps in (128, 2048):
        m = counterexample(500, steps, scheme="euler")
        z = deflator_path(zero_kernel(), m, include_theta=True)
        assert np.all(z.z > 0)
        err = np.abs(z.terminal - 1.0 / m.X[:, -1, 0])
        assert np.all(err[~m.passage.hit] == 0.0)
        medians.append(np.median(err[m.passage.hit]))
    assert medians[1] < 0.5 * medians[0]


# ------------------------------------------------------- switch and local time


def test_switch_ties_choose_first():
    m = counterexample(50, 32)
    z = deflator_path(zero_kernel(), m, stop_at_passage=True)
    one = DeflatorSpec(lambda s: np.ones(s.t.shape + (1,)), "one")
    two = DeflatorSpec(lambda s: np.full(s.t.shape + (1,), 2.0), "two")
    sw = switch_process(one, two, z, z)
    out = sw.nu(m.phases[0].state(1.0))
    assert np.all(out == 1.0)


def test_switch_incompatible_paths():
    a = deflator_path(zero_kernel(), counterexample(10, 32))
    b = deflator_path(zero_kernel(), counterexample(10, 64))
    with pytest.raises(InvalidArgumentError):
        switch_process(zero_kernel(), zero_kernel(), a, b)
    with pytest.raises(InvalidArgumentError):
        tanaka_local_time(a, b)


def test_switch_follows_larger_deflator():
    m = counterexample(400, 128)
    z1 = deflator_path(make_nu_n(2.0), m, include_theta=False)
    z2 = deflator_path(zero_kernel(), m, include_theta=False)
    sw = switch_process(make_nu_n(2.0), zero_kernel(), z1, z2)
    out = sw.nu(m.phases[0].state(1.0))[..., 0]
    pre = np.isinf(m.phases[0].tau_seen)
    chi = z1.log_phase_start(0) >= z2.log_phase_start(0)
    assert np.all(out[pre & chi] == 2.0) and np.all(out[~chi] == 0.0)


def test_local_time_of_identical_deflators_is_zero():
    m = counterexample(100, 64)
    z = deflator_path(make_nu_n(1.0), m)
    lt = tanaka_local_time(z, z)
    assert np.all(lt.tanaka.L == 0.0) and np.all(lt.skorokhod.L == 0.0)


def test_local_time_monotone_and_skorokhod_bound():
    m = counterexample(500, 256)
    z1 = deflator_path(make_nu_n(2.0), m, stop_at_passage=True)
    z2 = deflator_path(zero_kernel(), m, stop_at_passage=True)
    lt = tanaka_local_time(z1, z2)
    for est in (lt.tanaka, lt.skorokhod):
        assert np.all(np.diff(est.L, axis=1) >= 0) and np.all(est.L[:, 0] == 0)
    # the Skorokhod part keeps N + L non-negative
    assert np.all(lt.skorokhod.N + lt.skorokhod.L >= -1e-12)
    assert lt.discrepancy().shape == (500,)


def test_tanaka_identity_exact_per_path():
    m = counterexample(200, 128)
    z1 = deflator_path(make_nu_n(2.0), m, stop_at_passage=True)
    z2 = deflator_path(zero_kernel(), m, stop_at_passage=True)
    lt = tanaka_local_time(z1, z2)
    X = z2.z - z1.z
    # Z1 v Z2 = Z1 + X^+ and X^+ = sum 1_{X>0} dX + L / 2
    dX = np.diff(X, axis=1)
    pos = np.cumsum(np.where(X[:, :-1] > 0, dX, 0.0), axis=1)
    recon = z1.z[:, 1:] + pos + 0.5 * lt.tanaka.L[:, 1:]
    assert np.allclose(recon, np.maximum(z1.z, z2.z)[:, 1:], atol=1e-10)


# ---------------------------------------------------------------- gap report


def test_gap_control_identical_deflators():
    m = counterexample(1000, 64)
    z = deflator_path(make_nu_n(2.0), m, stop_at_passage=True)
    rep = max_closure_gap(z, z)
    assert rep.gap.mean == pytest.approx(z.terminal.mean() - 1.0)
    assert rep.half_local_time.mean == 0.0
    assert rep.difference.mean == rep.gap.mean


def test_gap_report_from_samples():
    rep = gap_report([1.0, 1.2, 1.4, 1.0], [0.0, 0.2, 0.4, 0.0], checkpoint=1.0)
    assert rep.gap.mean == pytest.approx(0.15)
    assert rep.difference.mean == pytest.approx(0.0) and rep.identity_ok
    assert rep.to_dict()["checkpoint"] == 1.0


def test_max_closure_gap_positive_and_identity():
    m = counterexample(4096, 256, seed=30)
    z1 = deflator_path(make_nu_n(2.0), m, stop_at_passage=True)
    z2 = deflator_path(zero_kernel(), m, stop_at_passage=True)
    rep = max_closure_gap(z1, z2)
    assert rep.gap_positive and rep.z_gap >= 3
    assert rep.identity_ok
