import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scoredistill.inversion import InversionError, invert, plan_inversion, reverse, write_trace_csv
from scoredistill.schedule import NoisyLatent, make_schedule, tweedie_x0


@pytest.mark.parametrize("t,dt,residual,k,rungs", [
    (500, 100, 100, 5, (100, 200, 300, 400, 500)),
    (530, 100, 30, 6, (30, 130, 230, 330, 430, 530)),
    (50, 50, 50, 1, (50,)),
    (1, 50, 1, 1, (1,)),
])
def test_plan_examples(t, dt, residual, k, rungs):
    p = plan_inversion(t, dt, 1000)
    assert (p.residual, p.k, p.rungs) == (residual, k, rungs)
    assert p.ladder[0] == 0


@settings(max_examples=200, deadline=None)
@given(t=st.integers(1, 1000), dt=st.integers(1, 1000))
def test_plan_invariants(t, dt):
    p = plan_inversion(t, dt, 1000)
    assert p.ladder[1] == p.residual and 1 <= p.residual <= dt
    assert all(b - a == dt for a, b in zip(p.ladder[1:], p.ladder[2:]))
    assert p.ladder[-1] == t and len(p.ladder) == p.k + 1
    if t % dt == 0:
        assert (p.k, p.residual) == (t // dt, dt)
    else:
        assert (p.k, p.residual) == (t // dt + 1, t % dt)


@pytest.mark.parametrize("t,dt", [(0, 10), (1001, 10), (10, 0), (10, 1001), (10.5, 2)])
def test_plan_rejects(t, dt):
    with pytest.raises(ValueError):
        plan_inversion(t, dt, 1000)


def test_zero_denoiser_is_pure_signal_decay():
    s = make_schedule(1000)
    x0 = np.array([0.7, -0.2, 1.5])
    plan = plan_inversion(530, 100, 1000)
    trace = []
    out = invert(x0, plan, lambda x, t: np.zeros_like(x), s, trace=trace)
    np.testing.assert_allclose(out.data, math.sqrt(s.alpha_bar_at(530)) * x0, rtol=1e-12)
    for j, rung in enumerate(plan.rungs):
        mid = invert(x0, plan, lambda x, t: np.zeros_like(x), s, stop_at=j + 1)
        assert mid.t == rung
        np.testing.assert_allclose(mid.data, math.sqrt(s.alpha_bar_at(rung)) * x0, rtol=1e-12)
    assert [r[0] for r in trace] == list(plan.ladder[:-1])


def test_single_rung_update(small_toy):
    s = small_toy.schedule
    x0 = np.array([0.4, -0.9])
    plan = plan_inversion(30, 30, s.T)
    pred = small_toy.predictor()
    eps0 = small_toy.eps(x0, 0)
    want = math.sqrt(s.alpha_bar_at(30)) * tweedie_x0(NoisyLatent(x0, 0), eps0, s) + math.sqrt(
        1 - s.alpha_bar_at(30)) * eps0
    np.testing.assert_allclose(invert(x0, plan, pred, s).data, want, rtol=1e-14)


def test_source_rung_prediction_is_used():
    s = make_schedule(100)
    seen = []

    def den(x, t):
        seen.append(t)
        return np.zeros_like(x)

    invert(np.ones(2), plan_inversion(35, 10, 100), den, s)
    assert seen == [0, 5, 15, 25]


def test_one_indexed_backend_queried_at_one(oracle, schedule):
    seen = []
    pred = oracle.predictor()

    def den(x, t):
        seen.append(t)
        return pred(x, t)

    den.min_timestep = 1
    invert(np.ones(2), plan_inversion(100, 50, 1000), den, schedule)
    assert seen == [1, 50]


def test_determinism_and_prefix(small_toy):
    s = small_toy.schedule
    pred = small_toy.predictor()
    x0 = np.array([0.1, 0.8])
    plan = plan_inversion(77, 10, s.T)
    a, b = invert(x0, plan, pred, s), invert(x0, plan, pred, s)
    np.testing.assert_array_equal(a.data, b.data)
    # stopping at rung j reproduces the direct inversion to s_j
    for j in range(1, plan.k + 1):
        prefix = invert(x0, plan, pred, s, stop_at=j)
        direct = invert(x0, plan_inversion(plan.ladder[j], 10, s.T), pred, s)
        np.testing.assert_array_equal(prefix.data, direct.data)


def test_invert_reverse_roundtrip_tightens_with_smaller_interval(oracle, schedule, mixture):
    rng = np.random.default_rng(3)
    x0s, _ = mixture.sample(rng, 20)
    pred = oracle.predictor()

    def median_err(dt):
        plan = plan_inversion(300, dt, 1000)
        errs = [np.linalg.norm(reverse(invert(x, plan, pred, schedule), plan.ladder, pred, schedule).data - x)
                / np.linalg.norm(x) for x in x0s]
        return float(np.median(errs))

    coarse, fine = median_err(50), median_err(5)
    assert fine < coarse
    assert fine < 1e-2


def test_errors_carry_rung():
    s = make_schedule(100)
    plan = plan_inversion(30, 10, 100)
    with pytest.raises(InversionError) as ei:
        invert(np.ones(2), plan, lambda x, t: np.zeros(3), s)
    assert ei.value.rung == 0

    def blows_up(x, t):
        return np.full_like(x, np.nan) if t >= 10 else np.zeros_like(x)

    with pytest.raises(InversionError) as ei:
        invert(np.ones(2), plan, blows_up, s)
    assert ei.value.rung == 1
    with pytest.raises(ValueError):
        invert(NoisyLatent(np.ones(2), 3), plan, blows_up, s)
    with pytest.raises(ValueError):
        invert(np.ones(2), plan_inversion(300, 10), blows_up, s)


def test_reverse_requires_matching_ladder():
    s = make_schedule(100)
    with pytest.raises(ValueError):
        reverse(NoisyLatent(np.ones(2), 30), (0, 10, 20), lambda x, t: x, s)


def test_trace_csv(tmp_path):
    s = make_schedule(100)
    trace = []
    invert(np.ones(2), plan_inversion(25, 10, 100), lambda x, t: 0.1 * x, s, trace=trace)
    path = write_trace_csv(trace, tmp_path / "trace.csv")
    rows = list(csv.DictReader(path.open()))
    assert [int(r["s"]) for r in rows] == [0, 5, 15]
    assert float(rows[0]["x_norm"]) == pytest.approx(math.sqrt(2))
