import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scoredistill.schedule import make_schedule
from scoredistill.timesteps import TimestepWindow, sample_t, window_at


def test_default_warmup_is_a_third():
    assert TimestepWindow(2000).warmup_steps == 667
    assert TimestepWindow(3).warmup_steps == 1
    assert TimestepWindow.from_fraction(2000, 1 / 3).warmup_steps == 667
    assert TimestepWindow.from_fraction(1000, 1 / 5).warmup_steps == 200


def test_endpoints_and_midpoint():
    w = TimestepWindow(3000, 1000)
    assert window_at(0, w) == (0.22, 0.98)
    assert window_at(1000, w) == (0.02, 0.78)
    assert window_at(3000, w) == (0.02, 0.78)
    lo, hi = window_at(500, w)
    assert lo == pytest.approx(0.12, abs=1e-15) and hi == pytest.approx(0.88, abs=1e-15)


@pytest.mark.parametrize("kw", [{"total_steps": 0}, {"total_steps": 10, "warmup_steps": 0},
                                {"total_steps": 10, "t_min_up": 0.99}, {"total_steps": 10, "t_min_low": 0.5},
                                {"total_steps": 10, "t_max_low": 0.99}, {"total_steps": 10, "t_max_up": 1.0}])
def test_window_validation(kw):
    with pytest.raises(ValueError):
        TimestepWindow(**kw)


def test_window_step_range():
    w = TimestepWindow(10)
    with pytest.raises(ValueError):
        window_at(-1, w)
    with pytest.raises(ValueError):
        window_at(11, w)


@settings(max_examples=100, deadline=None)
@given(total=st.integers(1, 5000), frac=st.sampled_from([1 / 5, 1 / 4, 1 / 3, 1 / 2, 1.0]))
def test_bounds_monotone_and_linear_width(total, frac):
    w = TimestepWindow.from_fraction(total, frac)
    steps = sorted({0, w.warmup_steps // 2, w.warmup_steps - 1, w.warmup_steps, total} & set(range(total + 1)))
    bounds = [window_at(s, w) for s in steps]
    for (a_lo, a_hi), (b_lo, b_hi) in zip(bounds, bounds[1:]):
        assert b_lo <= a_lo + 1e-15 and b_hi <= a_hi + 1e-15
    for s, (lo, hi) in zip(steps, bounds):
        f = min(s / w.warmup_steps, 1.0)
        assert hi - lo == pytest.approx((1 - f) * 0.76 + f * 0.76, abs=1e-12)
        assert lo == pytest.approx(0.22 + f * (0.02 - 0.22), abs=1e-12)
        if s >= w.warmup_steps:
            assert (lo, hi) == (0.02, 0.78)


def test_sample_t_reproducible():
    w = TimestepWindow(100)
    s = make_schedule(1000)
    a = [sample_t(k, w, np.random.default_rng(5), s) for k in range(50)]
    b = [sample_t(k, w, np.random.default_rng(5), s) for k in range(50)]
    assert a == b


def test_sample_t_bounds_monte_carlo():
    w = TimestepWindow(3000)
    T = 1000
    rng = np.random.default_rng(0)
    first = np.array([sample_t(0, w, rng, T) for _ in range(10_000)])
    assert first.min() >= 0.22 * T - 1 and first.max() <= 0.98 * T + 1
    late = np.array([sample_t(int(rng.integers(w.warmup_steps, 3001)), w, rng, T) for _ in range(10_000)])
    assert late.min() >= 0.02 * T - 1 and late.max() <= 0.78 * T + 1
    assert np.all((first >= 1) & (first <= T))


def test_sample_t_clamps_to_valid_steps():
    w = TimestepWindow(10, t_min_up=1e-6, t_max_up=2e-6, t_min_low=1e-7, t_max_low=1e-6)
    assert sample_t(0, w, np.random.default_rng(0), 1000) == 1
    assert math.isclose(window_at(10, w)[1], 1e-6)
