import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from mixat.samplers import (
    KINDS, EmaTracker, Preconditioner, SamplerConfig, TARGETS, adjusted_normal_variance, diagnose,
    ema_update, get_target, ks_critical_value, make_state, psgld_step, run_chains, sample_chain,
    sgld_step,
)


def quad_grad(z):
    return np.asarray(z, dtype=np.float64)


# single steps

def test_sgld_noiseless_gradient_step():
    cfg = SamplerConfig(gamma=0.1, epsilon=0.0)
    assert sgld_step(np.array([1.0]), quad_grad([1.0]), cfg, np.random.default_rng(0))[0] == pytest.approx(0.9)


def test_sgld_zero_step_zero_noise_is_identity():
    cfg = SamplerConfig(gamma=0.0, epsilon=0.0)
    z = np.array([0.3, -2.0])
    np.testing.assert_array_equal(sgld_step(z, quad_grad(z), cfg, np.random.default_rng(0)), z)


def test_sgld_noise_scale():
    cfg = SamplerConfig(gamma=0.02, epsilon=0.5)
    rng = np.random.default_rng(1)
    steps = sgld_step(np.zeros(200000), np.zeros(200000), cfg, rng)
    assert np.std(steps) == pytest.approx(np.sqrt(2 * 0.02) * 0.5, rel=0.01)


def test_non_finite_gradient_names_the_coordinate():
    cfg = SamplerConfig()
    g = np.zeros((2, 3))
    g[1, 2] = np.nan
    with pytest.raises(FloatingPointError, match=r"\(1, 2\)"):
        sgld_step(np.zeros((2, 3)), g, cfg, np.random.default_rng(0))


def test_gradient_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        sgld_step(np.zeros(3), np.zeros(2), SamplerConfig(), np.random.default_rng(0))


def test_rmsprop_constant_gradient_saturates_to_sign_steps():
    cfg = SamplerConfig(gamma=0.01, epsilon=0.0, kind="rmsprop-sgld")
    state = make_state(cfg)
    g = np.array([3.0, -0.2, 50.0])
    z = np.zeros(3)
    rng = np.random.default_rng(0)
    for _ in range(20000):
        new = psgld_step(z, g, cfg, rng, state)
        step, z = new - z, new
    np.testing.assert_allclose(step, -0.01 * np.sign(g), rtol=1e-6)


def test_rmsprop_second_moment_closed_form():
    cfg = SamplerConfig(kind="rmsprop-sgld")
    pre = Preconditioner(cfg.kind, cfg)
    g = np.array([2.0])
    for _ in range(10):
        pre.transform(g)
    np.testing.assert_allclose(pre.v, (1 - 0.999 ** 10) * 4.0, rtol=1e-14)


def test_zero_step_still_advances_preconditioner():
    cfg = SamplerConfig(gamma=0.0, epsilon=0.0, kind="adam-sgld")
    state = make_state(cfg)
    z = np.array([1.0, 2.0])
    out = psgld_step(z, np.array([0.5, -1.0]), cfg, np.random.default_rng(0), state)
    np.testing.assert_array_equal(out, z)
    assert state.step == 1
    assert np.all(state.v > 0)


def test_adam_zero_gradient_stream_never_moves():
    cfg = SamplerConfig(gamma=0.5, epsilon=0.0, kind="adam-sgld")
    state = make_state(cfg)
    z = np.array([0.7, -0.1])
    rng = np.random.default_rng(0)
    for _ in range(50):
        z_new = psgld_step(z, np.zeros(2), cfg, rng, state)
        np.testing.assert_array_equal(z_new, z)


def test_adam_bias_correction_first_step():
    cfg = SamplerConfig(kind="adam-sgld")
    pre = Preconditioner(cfg.kind, cfg)
    out = pre.transform(np.array([4.0, -0.5]))
    # after one step m_hat = g and v_hat = g^2, so the transform is sign(g)
    # up to the stabilizing constant in the denominator
    np.testing.assert_allclose(out, [1.0, -1.0], rtol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(kind="hmc")
    with pytest.raises(ValueError):
        SamplerConfig(gamma=np.inf)
    with pytest.raises(ValueError):
        SamplerConfig(K=0)
    with pytest.raises(ValueError):
        SamplerConfig(beta=1.0)


# EMA

def test_ema_direct_formula():
    assert ema_update(EmaTracker(0.9, 0.0), 1.0).current == pytest.approx(0.1, abs=1e-16)


def test_ema_fixed_point():
    t = EmaTracker(0.7, np.array([1.5, -2.0]))
    np.testing.assert_array_equal(t.update(np.array([1.5, -2.0])).current, [1.5, -2.0])


def test_ema_geometric_limit():
    t = EmaTracker(0.5, 0.0)
    for _ in range(100):
        t.update(3.25)
    assert abs(t.current - 3.25) < 1e-12


def test_ema_shape_mismatch():
    with pytest.raises(ValueError):
        EmaTracker(0.5, np.zeros(2)).update(np.zeros(3))


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 0.99), st.floats(-10, 10), st.floats(-10, 10))
def test_ema_contracts_by_beta(beta, start, target):
    t = EmaTracker(beta, start)
    before = abs(t.current - target)
    t.update(target)
    assert abs(t.current - target) <= beta * before + 1e-12


# chains

def test_single_step_chain_algebra():
    cfg = SamplerConfig(gamma=0.1, epsilon=0.0, K=1, beta=0.6)
    init = np.array([2.0, -1.0])
    samples, ema = sample_chain(quad_grad, init, cfg)
    np.testing.assert_allclose(ema, 0.6 * init + 0.4 * (init - 0.1 * init), rtol=1e-15)
    assert len(samples) == 1


def test_zero_beta_ema_is_last_sample():
    cfg = SamplerConfig(gamma=0.05, epsilon=1.0, K=7, beta=0.0)
    samples, ema = sample_chain(quad_grad, np.ones(3), cfg)
    np.testing.assert_array_equal(ema, samples[-1])


def test_chain_projection_applied_before_ema():
    cfg = SamplerConfig(gamma=0.1, epsilon=1.0, K=5, beta=0.5)
    samples, ema = sample_chain(quad_grad, np.zeros(2), cfg, project=lambda z: np.clip(z, -0.01, 0.01))
    assert all(np.max(np.abs(s)) <= 0.01 for s in samples)
    assert np.max(np.abs(ema)) <= 0.01


def test_chain_determinism():
    cfg = SamplerConfig(gamma=0.01, epsilon=1.0, K=100, seed=42, kind="adam-sgld")
    a, ea = sample_chain(quad_grad, np.zeros(4), cfg)
    b, eb = sample_chain(quad_grad, np.zeros(4), cfg)
    assert np.array(a).tobytes() == np.array(b).tobytes()
    assert ea.tobytes() == eb.tobytes()


@pytest.mark.parametrize("kind", KINDS)
def test_noiseless_chain_reaches_mode_of_convex_target(kind):
    cfg = SamplerConfig(gamma=0.05, epsilon=0.0, kind=kind)
    traj = run_chains(get_target("standard-normal"), cfg, 4000, n_chains=3, init=np.array([[2.0], [-1.0], [0.5]]))
    assert np.max(np.abs(traj[-1])) < 1e-6


def test_gaussian_chain_of_10000_passes_ks():
    # a single SGLD chain on N(0, 1), thinned so the retained draws are
    # close to independent (autocorrelation time ~ 1 / gamma steps)
    cfg = SamplerConfig(gamma=0.5, epsilon=1.0, K=10000 * 20, beta=0.0, seed=3)
    samples, _ = sample_chain(quad_grad, np.zeros(1), cfg)
    draws = np.array(samples)[19::20, 0]
    assert draws.size == 10000
    # at gamma = 0.5 the discretized chain is exactly Gaussian with
    # variance 1 / (1 - gamma / 2)
    res = stats.kstest(draws, stats.norm(scale=np.sqrt(1 / (1 - 0.25))).cdf)
    assert res.statistic < ks_critical_value(10000)


def test_ks_critical_value_table():
    # asymptotic 1% value 1.6276 / sqrt(n)
    assert ks_critical_value(10000) == pytest.approx(1.6276 / 100, rel=2e-3)


def test_targets_registry():
    assert set(TARGETS) == {"standard-normal", "gaussian-mixture", "banana"}
    with pytest.raises(KeyError):
        get_target("nope")


@pytest.mark.parametrize("name", sorted(TARGETS))
def test_target_gradients_match_energy(name):
    target = get_target(name)
    rng = np.random.default_rng(0)
    z = rng.normal(size=(20, target.dim))
    h = 1e-6
    for d in range(target.dim):
        bump = np.zeros(target.dim)
        bump[d] = h
        fd = (target.energy(z + bump) - target.energy(z - bump)) / (2 * h)
        np.testing.assert_allclose(target.grad(z)[:, d], fd, rtol=1e-6, atol=1e-8)


def test_mixture_energy_normalizes_to_its_cdf():
    target = get_target("gaussian-mixture")
    xs = np.linspace(-8, 8, 20001)
    dens = np.exp(-target.energy(xs[:, None]))
    dens /= np.trapezoid(dens, xs)
    cdf = np.cumsum(dens) * (xs[1] - xs[0])
    np.testing.assert_allclose(cdf[::1000], target.cdf(1.0)(xs[::1000]), atol=2e-3)


def test_mixture_chain_matches_cdf():
    target = get_target("gaussian-mixture")
    cfg = SamplerConfig(gamma=0.01, epsilon=1.0, seed=0)
    traj = run_chains(target, cfg, 30000, n_chains=256)
    out = diagnose(traj, target.cdf(1.0))
    assert out["ks_statistic"] < out["ks_critical"]


def test_banana_first_coordinate_is_gaussian():
    target = get_target("banana")
    cfg = SamplerConfig(gamma=0.01, epsilon=1.0, seed=1)
    traj = run_chains(target, cfg, 30000, n_chains=256)
    out = diagnose(traj, target.cdf(1.0))
    assert abs(out["mean"]) < 0.05
    assert 0.85 < out["variance"] < 1.15


def test_adjusted_variance_values():
    base = SamplerConfig(gamma=0.01, epsilon=1.0)
    assert adjusted_normal_variance(base) == 1.0
    # fixed points of the linearized recursions
    assert adjusted_normal_variance(base.with_(kind="rmsprop-sgld")) == pytest.approx(1.010025, rel=1e-5)
    assert adjusted_normal_variance(base.with_(kind="adam-sgld")) == pytest.approx(1.18241, rel=1e-4)


def test_run_chains_shape_and_determinism():
    cfg = SamplerConfig(gamma=0.01, epsilon=1.0, seed=9)
    a = run_chains(get_target("banana"), cfg, 50, n_chains=4)
    b = run_chains(get_target("banana"), cfg, 50, n_chains=4)
    assert a.shape == (50, 4, 2)
    assert a.tobytes() == b.tobytes()
