import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scoredistill.guidance import (
    GuidanceConfig,
    PredictionBundle,
    apply_cfg,
    apply_pag,
    attention_map,
    guidance_direction,
    perturb_self_attention,
    self_attention,
)
from scoredistill.schedule import NoisyLatent, make_schedule, tweedie_x0

SCHED = make_schedule(100)
finite = st.floats(-10, 10, allow_nan=False)


def _bundle(c, u=None, p=None, t=40):
    return PredictionBundle(NoisyLatent(np.zeros_like(c), t), SCHED, c, u, p)


def test_defaults():
    g = GuidanceConfig()
    assert (g.cfg_scale, g.pag_scale, g.pag_blocks) == (7.5, 1.0, "all")


@pytest.mark.parametrize("kw", [{"cfg_scale": -1}, {"pag_scale": float("nan")}, {"cfg_scale": float("inf")},
                                {"pag_blocks": "some"}])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        GuidanceConfig(**kw)


def test_block_list_normalized():
    assert GuidanceConfig(pag_blocks=["self_attn"]).pag_blocks == ("self_attn",)


@settings(max_examples=50, deadline=None)
@given(c=arrays(np.float64, 5, elements=finite), u=arrays(np.float64, 5, elements=finite),
       lam=st.floats(0, 20))
def test_cfg_identities(c, u, lam):
    assert np.array_equal(apply_cfg(_bundle(c, u), GuidanceConfig(0.0)), c)
    np.testing.assert_allclose(apply_cfg(_bundle(c, c.copy()), GuidanceConfig(lam)), c, atol=1e-9)
    np.testing.assert_allclose(apply_cfg(_bundle(c, u), GuidanceConfig(lam)), (1 + lam) * c - lam * u, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(c=arrays(np.float64, 4, elements=finite), u=arrays(np.float64, 4, elements=finite),
       k=st.floats(-5, 5), lam=st.floats(0, 10))
def test_cfg_linear(c, u, k, lam):
    g = GuidanceConfig(lam)
    np.testing.assert_allclose(apply_cfg(_bundle(k * c, k * u), g), k * apply_cfg(_bundle(c, u), g),
                               rtol=1e-9, atol=1e-9)


def test_cfg_needs_uncond():
    with pytest.raises(ValueError):
        apply_cfg(_bundle(np.ones(2)), GuidanceConfig())


@settings(max_examples=50, deadline=None)
@given(c=arrays(np.float64, 5, elements=finite), p=arrays(np.float64, 5, elements=finite), s=st.floats(0, 10))
def test_pag_identities(c, p, s):
    assert np.array_equal(apply_pag(_bundle(c), GuidanceConfig(pag_scale=0.0)), c)
    np.testing.assert_allclose(apply_pag(_bundle(c, p=c.copy()), GuidanceConfig(pag_scale=s)), c, atol=1e-9)
    np.testing.assert_allclose(apply_pag(_bundle(c, p=p), GuidanceConfig(pag_scale=s)), c + s * (c - p), atol=1e-9)


def test_pag_needs_perturbed():
    with pytest.raises(ValueError):
        apply_pag(_bundle(np.ones(2)), GuidanceConfig(pag_scale=1.0))


def test_guidance_direction_composition():
    rng = np.random.default_rng(0)
    c, u, p = rng.standard_normal((3, 6))
    g = GuidanceConfig(7.5, 1.0)
    b = _bundle(c, u, p)
    want = (apply_cfg(b, g) - c) + (apply_pag(b, g) - c)
    np.testing.assert_allclose(guidance_direction(b, g), want, rtol=1e-12)
    np.testing.assert_allclose(guidance_direction(b, g), 7.5 * (c - u) + (c - p), rtol=1e-12)
    np.testing.assert_array_equal(guidance_direction(_bundle(c, u), GuidanceConfig(7.5, 0.0)), 7.5 * (c - u))


def test_bundle_derives_tweedie():
    rng = np.random.default_rng(1)
    xt = NoisyLatent(rng.standard_normal(3), 60)
    c, u = rng.standard_normal((2, 3))
    b = PredictionBundle(xt, SCHED, c, u)
    np.testing.assert_array_equal(b.x0_cond, tweedie_x0(xt, c, SCHED))
    np.testing.assert_array_equal(b.x0_uncond, tweedie_x0(xt, u, SCHED))
    np.testing.assert_allclose(b.x0_guided(2.0), 3 * b.x0_cond - 2 * b.x0_uncond)
    with pytest.raises(ValueError):
        PredictionBundle(xt, SCHED, c, np.ones(4))


def test_perturbed_attention_returns_values():
    rng = np.random.default_rng(2)
    Q, K, V = rng.standard_normal((3, 2, 5, 4))
    out = perturb_self_attention(Q, K, V)
    np.testing.assert_array_equal(out, V)
    # Q and K contents are irrelevant
    np.testing.assert_array_equal(perturb_self_attention(np.zeros_like(Q), np.full_like(K, 9.0), V), V)
    with pytest.raises(ValueError):
        perturb_self_attention(Q, K, V[:, :3])


def test_two_token_block_differs_when_map_not_identity():
    Q = np.array([[2.0, 0.0], [0.0, 1.0]])
    K = np.array([[1.0, 0.5], [0.0, 3.0]])
    V = np.array([[1.0, 0.0], [0.0, 1.0]])
    A = attention_map(Q, K)
    assert not np.allclose(A, np.eye(2))
    assert not np.allclose(self_attention(Q, K, V), perturb_self_attention(Q, K, V))


def test_constant_rows_make_perturbation_inert():
    rng = np.random.default_rng(3)
    Q, K = rng.standard_normal((2, 6, 3))
    V = np.tile(rng.standard_normal(3), (6, 1))
    np.testing.assert_allclose(self_attention(Q, K, V), perturb_self_attention(Q, K, V), atol=1e-14)
    np.testing.assert_allclose(attention_map(Q, K).sum(-1), 1.0)
