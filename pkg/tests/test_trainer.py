import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixat import autodiff as ad
from mixat.data import Batch, make_synthetic, synthetic_vocab_size
from mixat.losses import combined_objective
from mixat.models import ModelSpec, ParameterVector, eval_metric
from mixat.samplers import SamplerConfig, sample_chain
from mixat.trainer import (
    METRICS_SCHEMA, AttackBudget, TrainConfig, TrainingDiverged, adversarial_risk_eval,
    clip_perturbation, estimate_h_mu, estimate_h_nu, example_norms, grad_evals_per_step,
    load_checkpoint, mat_train, pgd_attack, pgd_baseline_train, regularizer_and_grad,
    save_checkpoint, vanilla_train,
)


def _toy(seed=0, task="classification", n=6, length=4):
    rng = np.random.default_rng(seed)
    out = 2 if task == "classification" else 1
    spec = ModelSpec(vocab_size=7, embed_dim=3, hidden=(5,), output_dim=out, task=task, activation="tanh")
    theta = ParameterVector.init(spec, seed, scale=1.0)
    ids = rng.integers(0, 7, size=(n, length))
    targets = rng.integers(0, 2, size=n) if task == "classification" else rng.normal(size=n)
    batch = Batch(targets=targets, task=task, ids=ids, n_classes=2 if task == "classification" else None)
    return spec, theta, batch, rng


def _line_1d(w=1.5, b=0.25, n=5, seed=0):
    """1-D linear regressor f(x) = w x + b on dense inputs."""
    spec = ModelSpec(vocab_size=None, embed_dim=1, hidden=(), output_dim=1, task="regression")
    theta = ParameterVector.from_arrays(spec, {"W0": [[w]], "b0": [b]})
    rng = np.random.default_rng(seed)
    batch = Batch(targets=rng.normal(size=n), task="regression", features=rng.normal(size=(n, 1)))
    return spec, theta, batch


def _xor(seed, noise=0.0, n_eval=512):
    train, evals = make_synthetic("xor-tokens", seed, n_eval=n_eval, label_noise=noise)
    spec = ModelSpec(vocab_size=synthetic_vocab_size("xor-tokens"), embed_dim=8, hidden=(16,), init="glorot")
    return spec, train, evals


# clipping

def test_clip_twice_radius_lands_on_sphere_same_direction():
    d = np.array([[[3.0, 4.0]]])
    out = clip_perturbation(d, 2.5)
    assert example_norms(out)[0] == pytest.approx(2.5, abs=1e-15)
    np.testing.assert_allclose(out / 2.5, d / 5.0, rtol=1e-15)


def test_clip_zero_is_zero():
    np.testing.assert_array_equal(clip_perturbation(np.zeros((2, 3, 4)), 1e-5), 0.0)


def test_clip_small_radius_value():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(1, 4, 3))
    d *= 3.7e-5 / example_norms(d)[0]
    out = clip_perturbation(d, 1e-5)
    norm = np.sqrt(np.sum(out ** 2))
    assert abs(norm - 1e-5) <= 1e-17
    assert norm <= 1e-5


def test_clip_inside_ball_untouched_and_per_example():
    d = np.array([[[0.1, 0.0]], [[3.0, 4.0]]])
    out = clip_perturbation(d, 1.0)
    assert out[0].tobytes() == d[0].tobytes()
    assert example_norms(out)[1] <= 1.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-8, 10.0), st.floats(1e-3, 1e3))
def test_clip_never_exceeds_radius(seed, radius, scale):
    d = scale * np.random.default_rng(seed).normal(size=(3, 2, 4))
    out = clip_perturbation(d, radius)
    assert np.all(example_norms(out) <= radius)
    # directions preserved
    for i in range(3):
        cos = np.sum(out[i] * d[i]) / (example_norms(out)[i] * example_norms(d)[i])
        assert cos == pytest.approx(1.0, abs=1e-12)


# estimators

def test_identical_samples_per_sample_equals_ema_mean():
    _, theta, batch, rng = _toy(1)
    d = 0.2 * rng.normal(size=(6, 4, 3))
    v_ema, g_ema, _ = estimate_h_mu(theta, batch, d, 2.0, "ema-mean")
    for k in (1, 2, 4):
        v, g, _ = estimate_h_mu(theta, batch, [d] * k, 2.0, "per-sample")
        assert v == v_ema
        assert g.tobytes() == g_ema.tobytes()
    # other K multiply by a rounded 1/K
    v3, g3, _ = estimate_h_mu(theta, batch, [d] * 3, 2.0, "per-sample")
    assert v3 == pytest.approx(v_ema, rel=1e-15)
    np.testing.assert_allclose(g3, g_ema, rtol=1e-14, atol=1e-16)


def test_lambda_zero_reduces_to_task_loss():
    _, theta, batch, rng = _toy(2)
    d = 0.2 * rng.normal(size=(6, 4, 3))
    base, g0, _ = estimate_h_mu(theta, batch, None, 0.0)
    for mode, arg in (("ema-mean", d), ("per-sample", [d, -d, 2 * d])):
        v, g, parts = estimate_h_mu(theta, batch, arg, 0.0, mode)
        assert v == base and parts["reg"] == 0.0
        assert g.tobytes() == g0.tobytes()


def test_per_sample_three_term_average():
    _, theta, batch, rng = _toy(3)
    ds = [0.3 * rng.normal(size=(6, 4, 3)) for _ in range(3)]
    v, _, _ = estimate_h_mu(theta, batch, ds, 1.7, "per-sample")
    hand = sum(combined_objective(theta, batch, d, 1.7) for d in ds) / 3
    assert abs(v - hand) < 1e-12


@pytest.mark.parametrize("task", ["classification", "regression"])
def test_h_nu_zero_at_origin(task):
    _, theta, batch, _ = _toy(4, task)
    v, g = estimate_h_nu(theta, np.zeros((6, 4, 3)), batch, 3.0)
    assert v == 0.0
    np.testing.assert_allclose(g, 0.0, atol=1e-15)


def test_h_nu_linear_in_lambda():
    _, theta, batch, rng = _toy(5)
    d = 0.3 * rng.normal(size=(6, 4, 3))
    v1, g1 = estimate_h_nu(theta, d, batch, 1.3)
    v2, g2 = estimate_h_nu(theta, d, batch, 2.6)
    assert v2 == 2 * v1
    np.testing.assert_array_equal(g2, 2 * g1)


def test_h_nu_two_sample_average():
    spec, theta, batch, rng = _toy(6)
    other = ParameterVector.init(spec, 99, scale=1.0)
    d = 0.3 * rng.normal(size=(6, 4, 3))
    v, g = estimate_h_nu([theta, other], d, batch, 1.0, "per-sample")
    r1, g1 = regularizer_and_grad(theta, batch, d)
    r2, g2 = regularizer_and_grad(other, batch, d)
    assert abs(v - (r1 + r2) / 2) < 1e-12
    np.testing.assert_allclose(g, (g1 + g2) / 2, rtol=1e-12, atol=1e-15)


def test_estimator_input_checks():
    _, theta, batch, _ = _toy(7)
    with pytest.raises(ValueError):
        estimate_h_mu(theta, batch, np.zeros((6, 4, 2)), 1.0)
    with pytest.raises(ValueError):
        estimate_h_nu([], np.zeros((6, 4, 3)), batch, 1.0, "per-sample")
    with pytest.raises(TypeError):
        estimate_h_nu([theta], np.zeros((6, 4, 3)), batch, 1.0, "ema-mean")
    with pytest.raises(ValueError):
        estimate_h_mu(theta, batch, [np.zeros((6, 4, 3))], 1.0, "median")


@pytest.mark.parametrize("task", ["classification", "regression"])
def test_inner_objective_gradients(task):
    spec, theta, batch, rng = _toy(8, task)
    ds = [0.3 * rng.normal(size=(6, 4, 3)) for _ in range(3)]
    others = [ParameterVector.init(spec, s, scale=1.0) for s in (11, 12)]
    mu = lambda v: estimate_h_mu(theta.replace(v), batch, ds, 2.0, "per-sample")[:2]
    nu = lambda d: estimate_h_nu(others, d.reshape(ds[0].shape), batch, 2.0, "per-sample")
    assert ad.check_gradient(mu, theta.values) < 1e-5
    assert ad.check_gradient(nu, ds[0]) < 1e-5


def test_estimator_consistency_within_five_percent():
    # frozen theta and batch; the perturbation chain runs at stationarity
    # inside the clip ball and both estimators see the same K samples
    _, theta, batch, rng = _toy(9)
    K = 400
    cfg = SamplerConfig(gamma=1e-3, epsilon=0.05, K=K, beta=1 - 2 / (K + 1), seed=9)
    start = 0.3 * rng.normal(size=(6, 4, 3))
    energy = lambda d: -estimate_h_nu(theta, d, batch, 1.0)[1]
    samples, bar = sample_chain(energy, clip_perturbation(start, 0.5), cfg,
                                project=lambda d: clip_perturbation(d, 0.5))
    per_sample, _, _ = estimate_h_mu(theta, batch, samples, 1.0, "per-sample")
    ema_mean, _, _ = estimate_h_mu(theta, batch, bar, 1.0, "ema-mean")
    assert abs(per_sample - ema_mean) <= 0.05 * abs(per_sample)


# sign correctness with a line-search guard

def _armijo_step(f, g, x, start=1.0):
    """Largest 2^-k step with sufficient decrease for every smaller 2^-j tried too."""
    gamma = start
    fx, gg = f(x), float(np.sum(g * g))
    while gamma > 1e-12:
        trial = [gamma / 2 ** j for j in range(6)]
        if all(f(x - s * g) <= fx - 0.5 * s * gg for s in trial):
            return gamma
        gamma /= 2
    raise AssertionError("no descent step found")


@pytest.mark.parametrize("seed", range(5))
def test_delta_step_never_decreases_regularizer(seed):
    _, theta, batch, rng = _toy(20 + seed)
    d0 = clip_perturbation(0.3 * rng.normal(size=(6, 4, 3)), 1.0)
    neg_r = lambda d: -regularizer_and_grad(theta, batch, d)[0]
    energy_grad = lambda d: -estimate_h_nu(theta, d, batch, 1.0)[1]
    gamma = _armijo_step(neg_r, energy_grad(d0), d0)
    cfg = SamplerConfig(gamma=gamma, epsilon=0.0, K=1, beta=0.0)
    _, d1 = sample_chain(energy_grad, d0, cfg)
    assert regularizer_and_grad(theta, batch, d1)[0] >= regularizer_and_grad(theta, batch, d0)[0]


@pytest.mark.parametrize("seed", range(3))
def test_theta_step_never_increases_objective(seed):
    spec, train, _ = _xor(seed)
    train = train.subset(np.arange(64))
    theta0 = ParameterVector.init(spec, seed)
    # one batch holds the whole set, and delta stays at zero when epsilon = 0
    f = lambda v: estimate_h_mu(theta0.replace(v), train, np.zeros((64, 6, 8)), 2.0)[0]
    g = estimate_h_mu(theta0, train, np.zeros((64, 6, 8)), 2.0)[1]
    gamma = _armijo_step(f, g, theta0.values)
    cfg = TrainConfig(T=1, K=1, beta=0.0, epsilon=0.0, lam=2.0, gamma=gamma, batch_size=64, seed=seed)
    theta1, _ = mat_train(spec, train, cfg, theta0=theta0)
    assert f(theta1.values) <= f(theta0.values)


# degenerate configurations

def test_degenerate_mat_equals_vanilla_bitwise():
    spec, train, evals = _xor(0)
    cfg = TrainConfig(T=50, K=1, epsilon=0.0, beta=0.0, lam=0.0, gamma=0.3, seed=3)
    mat, _ = mat_train(spec, train, cfg)
    van, _ = vanilla_train(spec, train, cfg)
    assert mat.values.tobytes() == van.values.tobytes()


def test_one_step_zero_gamma_returns_theta():
    spec, train, _ = _xor(1)
    theta0 = ParameterVector.init(spec, 5)
    theta1, _ = mat_train(spec, train, TrainConfig(T=1, gamma=0.0, epsilon=1.0), theta0=theta0)
    assert theta1.values.tobytes() == theta0.values.tobytes()
    # other mixing weights return theta up to rounding of b*x + (1-b)*x
    theta1, _ = mat_train(spec, train, TrainConfig(T=1, gamma=0.0, beta=0.3), theta0=theta0)
    np.testing.assert_allclose(theta1.values, theta0.values, rtol=1e-15, atol=0)


def test_pgd_with_zero_lambda_follows_vanilla():
    spec, train, _ = _xor(2)
    cfg = TrainConfig(T=20, lam=0.0, gamma=0.3, clip_radius=0.1, seed=1)
    pgd, _ = pgd_baseline_train(spec, train, cfg)
    van, _ = vanilla_train(spec, train, cfg)
    assert pgd.values.tobytes() == van.values.tobytes()


def test_pgd_without_inner_steps_keeps_its_start():
    spec, train, _ = _xor(3)
    cfg = TrainConfig(T=10, lam=1.0, gamma=0.3, clip_radius=0.1, pgd_steps=0, pgd_init=0.0)
    pgd, metrics = pgd_baseline_train(spec, train, cfg)
    van, _ = vanilla_train(spec, train, cfg)
    # delta = 0 throughout, so the regularizer and its gradient vanish
    assert metrics.max_delta_norm == 0.0
    assert all(r["reg"] == 0.0 for r in metrics.records)
    np.testing.assert_allclose(pgd.values, van.values, rtol=1e-13, atol=1e-15)
    _, metrics = pgd_baseline_train(spec, train, cfg.replace(pgd_init=0.5))
    assert metrics.max_delta_norm == pytest.approx(0.05, rel=1e-12)


def test_pgd_ascent_reaches_radius_on_1d_linear_model():
    _, theta, batch = _line_1d()
    rng = np.random.default_rng(0)
    delta = pgd_attack(theta, batch, steps=2, step_size=0.1, radius=0.1, rng=rng)
    norms = example_norms(delta)
    assert np.all(norms <= 0.1)
    np.testing.assert_allclose(norms, 0.1, rtol=1e-15)


def test_vanilla_zero_gradient_start_stays_put():
    spec = ModelSpec(vocab_size=None, embed_dim=2, hidden=(3,), output_dim=1, task="regression")
    data = Batch(targets=np.zeros(8), task="regression", features=np.zeros((8, 2)))
    theta, _ = vanilla_train(spec, data, TrainConfig(T=25, gamma=0.5), theta0=ParameterVector.zeros(spec))
    np.testing.assert_array_equal(theta.values, 0.0)


def test_vanilla_geometric_rate_on_quadratic():
    # inputs +-1 in equal numbers: the loss mean((w x + b - y)^2) has Hessian
    # 2 I, so the error contracts by (1 - 2 gamma) every full-batch step
    spec = ModelSpec(vocab_size=None, embed_dim=1, hidden=(), output_dim=1, task="regression")
    x = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    data = Batch(targets=3.0 * x[:, 0] + 1.0, task="regression", features=x)
    gamma = 0.1
    start = ParameterVector.zeros(spec)
    for steps in (1, 5, 20):
        theta, _ = vanilla_train(spec, data, TrainConfig(T=steps, gamma=gamma, batch_size=4), theta0=start)
        err = np.abs(theta.values - [3.0, 1.0])
        np.testing.assert_allclose(err, np.array([3.0, 1.0]) * (1 - 2 * gamma) ** steps, rtol=1e-12)


# adversarial risk

def test_zero_radius_risk_is_zero():
    _, theta, batch, _ = _toy(30)
    assert adversarial_risk_eval(theta, batch, AttackBudget(radius=0.0)) == 0.0


def test_risk_grows_with_radius():
    _, theta, batch, _ = _toy(31, n=40)
    risks = [adversarial_risk_eval(theta, batch, AttackBudget(steps=10, radius=r)) for r in (0.05, 0.1, 0.2, 0.4)]
    assert all(a <= b for a, b in zip(risks, risks[1:]))


def test_risk_matches_closed_form_on_1d_linear_model():
    # R = (w delta)^2 per example, maximized at |delta| = radius
    w, r = 1.5, 0.2
    _, theta, batch = _line_1d(w=w)
    risk = adversarial_risk_eval(theta, batch, AttackBudget(steps=5, radius=r))
    assert risk == pytest.approx((w * r) ** 2, rel=1e-12)


def test_risk_is_deterministic_given_seed():
    _, theta, batch, _ = _toy(32, n=20)
    a = adversarial_risk_eval(theta, batch, seed=4)
    assert a == adversarial_risk_eval(theta, batch, seed=4)


# full runs

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_xor_learned_by_mat_and_vanilla(seed):
    spec, train, evals = _xor(seed)
    cfg = TrainConfig(T=300, K=5, lam=1.0, epsilon=1e-4, gamma=0.3, seed=seed)
    theta, metrics = mat_train(spec, train, cfg, evals)
    assert eval_metric(theta, evals) >= 0.95
    assert metrics.final["eval"] == eval_metric(theta, evals)
    # vanilla gets as many parameter updates as the K-step MAT chain made
    van, _ = vanilla_train(spec, train, cfg.replace(T=cfg.T * cfg.K))
    assert eval_metric(van, evals) >= 0.95


def test_clipping_holds_throughout_mat_and_pgd():
    spec, train, _ = _xor(4)
    for cfg in (TrainConfig(T=30, K=5, gamma=0.3),
                TrainConfig(T=30, K=5, gamma=0.3, clip_radius=0.5, epsilon_delta=0.5, lam=5.0)):
        _, m = mat_train(spec, train, cfg)
        assert 0 < m.max_delta_norm <= cfg.clip_radius
        assert all(r["max_delta_norm"] <= cfg.clip_radius for r in m.records)
    _, m = pgd_baseline_train(spec, train, TrainConfig(T=10, clip_radius=1e-5, pgd_steps=3))
    assert m.max_delta_norm <= 1e-5


def test_linear_gamma_schedule():
    cfg = TrainConfig(T=5, gamma=1.0, gamma_schedule="linear", gamma_final=0.2)
    np.testing.assert_allclose([cfg.gamma_at(t) for t in range(5)], [1.0, 0.8, 0.6, 0.4, 0.2])


def test_per_sample_estimator_runs_and_preconditioned_samplers():
    spec, train, evals = _xor(5)
    for kw in ({"estimator": "per-sample"}, {"sampler": "rmsprop-sgld", "gamma": 0.01},
               {"sampler": "adam-sgld", "gamma": 0.01}):
        _, m = mat_train(spec, train, TrainConfig(T=5, K=3, **kw))
        assert len(m.records) == 5


def test_divergence_raises_with_step():
    spec, train, _ = _xor(6)
    for trainer in (vanilla_train, mat_train, pgd_baseline_train):
        with pytest.raises(TrainingDiverged) as info:
            trainer(spec, train, TrainConfig(T=50, K=2, gamma=1e200, clip_radius=0.1))
        assert 0 <= info.value.step < 50


def test_budget_accounting():
    spec, train, _ = _xor(7)
    for mode, trainer in (("vanilla", vanilla_train), ("pgd", pgd_baseline_train), ("mat", mat_train)):
        cfg = TrainConfig(T=4, K=3, pgd_steps=5)
        _, m = trainer(spec, train, cfg)
        assert m.grad_evals == 4 * grad_evals_per_step(mode, cfg)
    assert grad_evals_per_step("mat", TrainConfig(K=5)) == 10
    assert grad_evals_per_step("pgd", TrainConfig(K=5)) == 6


def test_metrics_jsonl_schema(tmp_path):
    spec, train, evals = _xor(8, n_eval=64)
    _, m = mat_train(spec, train, TrainConfig(T=6, K=2, eval_every=3), evals)
    m.write_jsonl(tmp_path / "m.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == list(range(6))
    for r in rows:
        assert r["schema"] == METRICS_SCHEMA
        assert {"step", "loss", "reg", "eval", "adv_risk"} <= set(r)
    assert [r["eval"] is not None for r in rows] == [False, False, True, False, False, True]


def test_checkpoint_round_trip(tmp_path):
    spec, theta, _, _ = _toy(40)
    save_checkpoint(tmp_path / "c.ckpt", theta, {"step": 3})
    again = load_checkpoint(tmp_path / "c.ckpt")
    assert again.spec == spec
    assert again.values.tobytes() == theta.values.tobytes()
    (tmp_path / "bad.ckpt").write_bytes(b"nope\n{}\n")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_train_config_validation():
    for bad in ({"T": 0}, {"K": 0}, {"lam": -1.0}, {"beta": 1.0}, {"clip_radius": 0.0},
                {"estimator": "mode"}, {"gamma_schedule": "cosine"}, {"pgd_steps": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"T": 3, "warmup": 2})
    cfg = TrainConfig(T=7, attack={"steps": 3, "radius": 0.2})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
