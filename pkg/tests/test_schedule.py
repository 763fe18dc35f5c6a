import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scoredistill.schedule import (
    DDIMStepConfig,
    DiffusionSchedule,
    NoisyLatent,
    ScheduleError,
    continuous_to_step,
    ddim_reverse_step,
    forward_noise,
    load_schedule,
    make_schedule,
    save_schedule,
    snr,
    tweedie_x0,
)


@pytest.mark.parametrize("family", ["linear", "scaled_linear", "cosine"])
def test_schedule_invariants(family):
    s = make_schedule(1000, family)
    ab = s.alpha_bar
    assert np.all(np.diff(ab) < 0)
    assert np.all((ab > 0) & (ab < 1))
    assert np.all(np.isfinite(s.beta)) and np.all((s.beta > 0) & (s.beta < 1))
    rebuilt = np.empty_like(ab)
    rebuilt[0] = 1 - s.beta[0]
    for i in range(1, len(ab)):
        rebuilt[i] = rebuilt[i - 1] * (1 - s.beta[i])
    np.testing.assert_allclose(ab, rebuilt, rtol=1e-12, atol=0)


def test_linear_default_endpoint():
    s = make_schedule(1000, "linear", beta_start=1e-4, beta_end=2e-2)
    direct = np.prod(1.0 - np.linspace(1e-4, 2e-2, 1000))
    assert s.alpha_bar_at(1000) == pytest.approx(direct, rel=1e-12)
    assert s.alpha_bar_at(1000) < 0.01


def test_two_step_schedule():
    s = DiffusionSchedule.from_betas([0.1, 0.1])
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.81], rtol=1e-15)
    assert s.alpha_bar_at(0) == 1.0


def test_scaled_linear_matches_published_form():
    # the external adapter's schedule: betas linear in sqrt space
    s = make_schedule(1000, "scaled_linear")
    beta = np.linspace(0.00085 ** 0.5, 0.012 ** 0.5, 1000) ** 2
    np.testing.assert_allclose(s.alpha_bar, np.cumprod(1 - beta), rtol=0, atol=1e-12)


@pytest.mark.parametrize("kwargs", [{"T": 1}, {"T": 10, "beta_start": 0.0}, {"T": 10, "beta_end": 1.5},
                                    {"T": 10, "family": "sigmoid"}, {"T": 10, "bogus": 1}])
def test_make_schedule_rejects(kwargs):
    kwargs = dict(kwargs)
    T = kwargs.pop("T")
    with pytest.raises(ScheduleError):
        make_schedule(T, **kwargs)


def test_schedule_file_roundtrip(tmp_path):
    s = make_schedule(50, "cosine")
    path = save_schedule(s, tmp_path / "sched.csv")
    back = load_schedule(path)
    np.testing.assert_array_equal(back.beta, s.beta)
    np.testing.assert_allclose(back.alpha_bar, s.alpha_bar, rtol=1e-15)
    assert path.read_text().splitlines()[0] == "t,beta,alpha_bar"


def test_schedule_arrays_readonly():
    s = make_schedule(10)
    with pytest.raises(ValueError):
        s.alpha_bar[0] = 0.5


def _sched_with(ab_value):
    # a two-step schedule whose t=1 has the requested alpha_bar
    return DiffusionSchedule.from_betas([1 - ab_value, 0.5])


def test_forward_noise_examples():
    s = _sched_with(0.75)
    x = forward_noise(np.zeros(3), 1, np.ones(3), s)
    np.testing.assert_allclose(x.data, 0.5 * np.ones(3), rtol=1e-15)
    assert x.t == 1
    # near the limits the signal or the noise dominates
    lo = _sched_with(1 - 1e-15)
    np.testing.assert_allclose(forward_noise(np.full(2, 3.0), 1, np.ones(2), lo).data, 3.0, atol=1e-6)
    hi = _sched_with(1e-15)
    np.testing.assert_allclose(forward_noise(np.full(2, 3.0), 1, np.ones(2), hi).data, 1.0, atol=1e-6)


def test_forward_noise_errors():
    s = make_schedule(10)
    with pytest.raises(ValueError):
        forward_noise(np.zeros(3), 1, np.zeros(2), s)
    with pytest.raises(ScheduleError):
        forward_noise(np.zeros(3), 11, np.zeros(3), s)
    with pytest.raises(ScheduleError):
        forward_noise(np.zeros(3), 0, np.zeros(3), s)
    with pytest.raises(ValueError):
        forward_noise(NoisyLatent(np.zeros(3), 2), 3, np.zeros(3), s)


def test_noisy_latent_rejects_nonfinite():
    with pytest.raises(ValueError):
        NoisyLatent(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        NoisyLatent(np.zeros(2), -1)


def test_tweedie_zero_noise():
    s = make_schedule(100)
    v = np.array([0.3, -1.2])
    got = tweedie_x0(NoisyLatent(v, 40), np.zeros(2), s)
    np.testing.assert_allclose(got, v / math.sqrt(s.alpha_bar_at(40)), rtol=1e-15)


def test_tweedie_rejects_nonfinite_prediction():
    s = make_schedule(100)
    with pytest.raises(ValueError):
        tweedie_x0(NoisyLatent(np.zeros(2), 5), np.array([np.inf, 0.0]), s)


@settings(max_examples=60, deadline=None)
@given(t=st.integers(1, 1000), seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 100))
def test_tweedie_inverts_forward_noise(t, seed, scale):
    s = make_schedule(1000)
    rng = np.random.default_rng(seed)
    x0 = scale * rng.standard_normal((3, 4))
    eps = rng.standard_normal(x0.shape)
    xt = forward_noise(x0, t, eps, s)
    np.testing.assert_allclose(tweedie_x0(xt, eps, s), x0, rtol=1e-6, atol=1e-6 * scale)


def test_ddim_to_zero_is_tweedie():
    s = make_schedule(100)
    rng = np.random.default_rng(0)
    xt = NoisyLatent(rng.standard_normal(5), 70)
    eps = rng.standard_normal(5)
    out = ddim_reverse_step(xt, eps, 0, s)
    assert out.t == 0
    np.testing.assert_array_equal(out.data, tweedie_x0(xt, eps, s))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), t=st.integers(2, 1000), data=st.data())
def test_ddim_with_exact_noise_tracks_forward(seed, t, data):
    s = make_schedule(1000)
    t_prev = data.draw(st.integers(0, t - 1))
    rng = np.random.default_rng(seed)
    x0, eps = rng.standard_normal(6), rng.standard_normal(6)
    out = ddim_reverse_step(forward_noise(x0, t, eps, s), eps, t_prev, s)
    want = x0 if t_prev == 0 else forward_noise(x0, t_prev, eps, s).data
    np.testing.assert_allclose(out.data, want, rtol=1e-5, atol=1e-9)


def test_ddim_chain_reproduces_forward_trajectory():
    s = make_schedule(1000)
    rng = np.random.default_rng(1)
    x0, eps = rng.standard_normal(4), rng.standard_normal(4)
    steps = list(range(1000, -1, -50))
    x = forward_noise(x0, steps[0], eps, s)
    for t_prev in steps[1:]:
        x = ddim_reverse_step(x, eps, t_prev, s)
        want = x0 if t_prev == 0 else forward_noise(x0, t_prev, eps, s).data
        np.testing.assert_allclose(x.data, want, rtol=1e-5, atol=1e-10)


def test_ddim_errors_and_eta():
    s = make_schedule(100)
    xt = NoisyLatent(np.ones(2), 10)
    with pytest.raises(ValueError):
        ddim_reverse_step(xt, np.zeros(2), 10, s)
    with pytest.raises(ValueError):
        ddim_reverse_step(xt, np.zeros(2), 5, s, DDIMStepConfig(eta=0.5))
    with pytest.raises(ValueError):
        DDIMStepConfig(eta=-1)
    a = ddim_reverse_step(xt, np.zeros(2), 5, s, DDIMStepConfig(0.5), np.random.default_rng(0))
    b = ddim_reverse_step(xt, np.zeros(2), 5, s, DDIMStepConfig(0.5), np.random.default_rng(0))
    np.testing.assert_array_equal(a.data, b.data)


def test_latent_dtype_preserved():
    s = make_schedule(100)
    x0 = np.ones(3, dtype=np.float32)
    xt = forward_noise(x0, 10, np.zeros(3), s)
    assert xt.data.dtype == np.float32
    assert tweedie_x0(xt, np.zeros(3, dtype=np.float32), s).dtype == np.float32


def test_snr_values():
    assert snr(1, _sched_with(0.5)) == pytest.approx(1.0, rel=1e-14)
    assert snr(1, _sched_with(0.8)) == pytest.approx(4.0, rel=1e-14)
    s = make_schedule(1000)
    vals = np.array([snr(t, s) for t in range(1, 1001)])
    assert np.all(np.diff(vals) < 0)
    with pytest.raises(ScheduleError):
        snr(0, s)


@pytest.mark.parametrize("u,T,want", [(0.5, 1000, 500), (0.0005, 1000, 1), (0.0004, 1000, 1), (0.9995, 1000, 1000),
                                      (0.02, 1000, 20), (0.98, 1000, 980), (0.25, 10, 3)])
def test_continuous_to_step(u, T, want):
    assert continuous_to_step(u, T) == want
