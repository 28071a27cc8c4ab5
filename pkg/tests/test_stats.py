import math
import os

import numpy as np
import pytest

from deflab.errors import InvalidArgumentError
from deflab.paths import make_time_grid, sample_brownian_batch
from deflab.stats import (
    compare_to_oracle, joint_agreement, map_blocks, martingale_drift_test, mc_estimate,
    one_sided_z, worker_count, z_value,
)


def test_constant_samples():
    e = mc_estimate([2.5] * 10)
    assert e.mean == 2.5 and e.stderr == 0.0 and e.low == e.high == 2.5


def test_two_point_samples():
    e = mc_estimate([0.0, 1.0])
    assert e.mean == 0.5 and e.stderr == 0.5
    assert e.high - e.mean == pytest.approx(z_value(0.99) * 0.5)


def test_too_few_or_bad_samples():
    with pytest.raises(InvalidArgumentError):
        mc_estimate([1.0])
    with pytest.raises(InvalidArgumentError):
        mc_estimate([1.0, float("nan")])


def test_half_width_million_normals():
    rng = np.random.default_rng(0)
    e = mc_estimate(rng.standard_normal(1_000_000))
    assert e.half_width == pytest.approx(2.576 / 1000, rel=0.01)


def test_ci_coverage():
    rng = np.random.default_rng(1)
    covered = 0
    reps = 400
    for _ in range(reps):
        e = mc_estimate(rng.standard_normal(1000))
        covered += e.low <= 0.0 <= e.high
    assert covered / reps > 0.97


def test_summation_order_fixed():
    x = np.random.default_rng(3).standard_normal(10_001) * 1e8
    a = mc_estimate(x)
    b = mc_estimate(x.copy())
    assert a == b
    # compensated summation is exact for a sequence that cancels
    y = np.array([1e16, 1.0, -1e16, 1.0])
    assert mc_estimate(y).mean == 0.5


def test_compare_to_oracle():
    e = mc_estimate([0.0, 1.0])
    v = compare_to_oracle(e, 0.5)
    assert v.passed and v.z == 0.0
    v = compare_to_oracle(e, 0.5 - 5 * 0.5)
    assert not v.passed and v.z == pytest.approx(5.0)


def test_one_sided_and_joint():
    e = mc_estimate([0.0, 1.0])
    assert one_sided_z(e, 2.0, "below") == pytest.approx(3.0)
    assert one_sided_z(e, 2.0, "above") == pytest.approx(-3.0)
    assert joint_agreement(e, e).passed


def test_drift_test_validation():
    with pytest.raises(InvalidArgumentError):
        martingale_drift_test(np.zeros((200, 1)), 0.0)
    with pytest.raises(InvalidArgumentError):
        martingale_drift_test(np.zeros((50, 3)), 0.0)


def test_drift_test_degenerate_checkpoint():
    v = np.zeros((200, 3))
    v[:, 2] = 1.0
    r = martingale_drift_test(v, 0.0)
    assert not r.passed and r.degenerate == [False, False, True]


def test_drift_test_brownian_passes_mostly():
    g = make_time_grid(1.0, 4)
    passes = 0
    for s in range(40):
        b = sample_brownian_batch(g, 1, 1000 + s, np.arange(1000))
        passes += martingale_drift_test(b.values[:, 1:, 0], 0.0, g.nodes[1:]).passed
    assert passes >= 0.95 * 40


def test_drift_test_detects_upward_drift():
    rng = np.random.default_rng(4)
    v = 1.0 + rng.standard_normal((2000, 4)) * 0.1 + np.array([0.0, 0.01, 0.02, 0.05])
    r = martingale_drift_test(v, 1.0, alternative="greater")
    assert not r.passed and r.verdicts[-1] is False and max(r.z_scores) >= 3


def test_drift_test_per_checkpoint_reference():
    rng = np.random.default_rng(5)
    refs = np.array([0.0, 1.0, 2.0])
    v = refs + rng.standard_normal((1000, 3))
    assert martingale_drift_test(v, refs).passed


def test_worker_count(monkeypatch):
    monkeypatch.delenv("DEFLAB_THREADS", raising=False)
    assert worker_count() is None
    monkeypatch.setenv("DEFLAB_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("DEFLAB_THREADS", "zero")
    with pytest.raises(InvalidArgumentError):
        worker_count()


@pytest.mark.parametrize("workers", [1, 2, 8])
def test_map_blocks_independent_of_workers(workers):
    def fn(idx):
        b = sample_brownian_batch(make_time_grid(1.0, 8), 1, 77, idx)
        return {"w": b.values[:, -1, 0]}

    ref = map_blocks(fn, 5000, 512, workers=1)["w"]
    out = map_blocks(fn, 5000, 512, workers=workers)["w"]
    assert np.array_equal(ref, out)
    assert mc_estimate(ref) == mc_estimate(out)
    assert math.isfinite(mc_estimate(out).mean) and os.cpu_count() >= 1
