"""Tests for the infinite-width dynamics engines."""
import numpy as np
import pytest

from widthlab.limits import (
    DynamicsTrace,
    LimitConfig,
    feature_kernel,
    mu_dynamics,
    mu_dynamics_deep,
    mu_dynamics_shallow,
    nt_dynamics,
    nt_operator,
    nt_static_kets,
    ntk_matrix,
)
from widthlab.optim import Modifiers, UpdateRule
from widthlab.signals import MSESignal

M = 4000


def _xi(N=3, d=2, seed=0):
    return np.random.default_rng(seed).standard_normal((d, N)) / np.sqrt(d)


def _config(**overrides) -> LimitConfig:
    xi = overrides.pop("xi", _xi())
    settings = dict(L=2, xi=xi, rule=UpdateRule.adam(eps=0.1),
                    signal=MSESignal(np.linspace(-1, 1, xi.shape[1])), lr=0.5, steps=3,
                    samples=M, seed=0, copies=2)
    settings.update(overrides)
    return LimitConfig(**settings)


def test_one_layer_sgd_operator_is_the_kernel():
    """Test the SGD operator equals K chi for one hidden layer."""
    kets = nt_static_kets(1, "gelu", _xi(), m=M, seed=1)
    chi = np.array([0.3, -0.7, 0.2])
    np.testing.assert_allclose(nt_operator(kets, UpdateRule.sgd(), [chi]), ntk_matrix(kets) @ chi,
                               rtol=1e-10, atol=1e-12)


def test_two_layer_sgd_operator_approximates_kernel():
    """Test the sampled SGD operator is close to K chi with a hidden matrix layer."""
    kets = nt_static_kets(2, "tanh", _xi(), m=20_000, seed=2)
    chi = np.array([0.5, -1.0, 0.25])
    expected = ntk_matrix(kets) @ chi
    value, err = nt_operator(kets, UpdateRule.sgd(), [chi], copies=8, return_stderr=True)
    assert err.shape == (3,)
    np.testing.assert_allclose(value, expected, atol=0.1 * np.abs(expected).max())


def test_kernel_is_symmetric_psd():
    """Test the closed-form kernel is symmetric positive semidefinite."""
    K = ntk_matrix(nt_static_kets(2, "gelu", _xi(), m=M, seed=0))
    np.testing.assert_allclose(K, K.T, atol=1e-12)
    assert np.linalg.eigvalsh(K).min() > -1e-10


def test_adam_first_step_is_smooth_sign_operator():
    """Test Adam at t=0 gives the SignSGD operator with the same eps."""
    kets = nt_static_kets(2, "gelu", _xi(), m=M, seed=0)
    chi = np.array([0.1, 0.2, -0.3])
    adam = nt_operator(kets, UpdateRule.adam(eps=0.05), [chi], copies=2, seed=4)
    sign = nt_operator(kets, UpdateRule.signsgd(0.05), [chi], copies=2, seed=4)
    np.testing.assert_allclose(adam, sign, rtol=1e-9, atol=1e-12)


def test_operator_rejects_bad_signals():
    """Test empty and mis-shaped signal histories are rejected."""
    kets = nt_static_kets(1, "gelu", _xi(), m=100)
    with pytest.raises(ValueError, match="at least one signal"):
        nt_operator(kets, UpdateRule.sgd(), [])
    with pytest.raises(ValueError, match="does not match 3 inputs"):
        nt_operator(kets, UpdateRule.sgd(), [np.zeros(2)])


def test_sgd_dynamics_follow_kernel_recursion():
    """Test f_{t+1} = f_t - eta K chi_t for SGD."""
    cfg = _config(rule=UpdateRule.sgd(), steps=4)
    kets = nt_static_kets(cfg.L, cfg.activation, cfg.xi, cfg.samples, seed=cfg.seed)
    trace = nt_dynamics(cfg, kets)
    K = ntk_matrix(kets)
    f = np.zeros(cfg.n_inputs)
    for t in range(cfg.steps):
        f = f - cfg.lr * K @ cfg.signal(t, f)
        np.testing.assert_allclose(trace.outputs[t + 1], f, rtol=1e-10, atol=1e-12)


def test_zero_learning_rate_is_constant():
    """Test eta = 0 keeps the limit output at zero."""
    trace = nt_dynamics(_config(lr=0.0))
    np.testing.assert_array_equal(trace.outputs, np.zeros((4, 3)))


def test_first_step_is_linear_in_learning_rate():
    """Test f_1 scales linearly in eta for a fixed initialization."""
    cfg = _config(steps=1)
    kets = nt_static_kets(cfg.L, cfg.activation, cfg.xi, cfg.samples, seed=cfg.seed)
    small = nt_dynamics(cfg, kets).outputs[1]
    large = nt_dynamics(_config(steps=1, lr=2 * cfg.lr), kets).outputs[1]
    np.testing.assert_allclose(large, 2 * small, rtol=1e-10, atol=1e-14)


def test_dynamics_iterate_the_operator():
    """Test Adam dynamics without decay sum the per-step operator values."""
    cfg = _config(steps=3)
    kets = nt_static_kets(cfg.L, cfg.activation, cfg.xi, cfg.samples, seed=cfg.seed)
    trace = nt_dynamics(cfg, kets)
    f = np.zeros(cfg.n_inputs)
    for t in range(cfg.steps):
        f = f - cfg.lr * nt_operator(kets, cfg.rule, trace.chis[:t + 1], cfg.copies, cfg.seed)
        np.testing.assert_allclose(trace.outputs[t + 1], f, rtol=1e-10, atol=1e-12)


def test_stderr_reported_for_sampled_terms():
    """Test Monte Carlo runs carry a nonnegative standard error."""
    trace = nt_dynamics(_config(steps=2))
    assert trace.stderr.shape == trace.outputs.shape
    assert np.all(trace.stderr >= 0)
    assert trace.stderr[0].sum() == 0.0


def test_weight_decay_kets_shrink_geometrically():
    """Test input-layer and readout kets are scaled by (1 - lambda)^s."""
    kets = nt_static_kets(2, "gelu", _xi(), m=M, weight_decay=0.1, steps=3, seed=0)
    assert kets.time_indexed
    for s in range(4):
        np.testing.assert_allclose(kets.h[0][s], 0.9 ** s * kets.h[0][0])
        np.testing.assert_allclose(kets.dx[-1][s], 0.9 ** s * kets.dx[-1][0])
    with pytest.raises(ValueError, match="kets cover steps 0..3"):
        kets.at(4)


def test_weight_decay_dynamics_run():
    """Test decayed dynamics produce finite outputs for every step."""
    trace = nt_dynamics(_config(steps=3, modifiers=Modifiers(weight_decay=0.1)))
    assert trace.outputs.shape == (4, 3)
    assert np.all(np.isfinite(trace.outputs))


def test_gaussian_f0_with_decay_rejected():
    """Test a random f0 cannot be combined with weight decay."""
    with pytest.raises(ValueError, match="only supported without weight decay"):
        _config(f0_mode="gaussian", modifiers=Modifiers(weight_decay=0.1))


def test_gaussian_f0_is_subtracted():
    """Test a Gaussian f0 is drawn and removed from the outputs."""
    trace = nt_dynamics(_config(f0_mode="gaussian", steps=1))
    assert np.any(trace.f0 != 0)
    np.testing.assert_array_equal(trace.outputs[0], np.zeros(3))


def test_nonsmooth_settings_rejected():
    """Test limit runs refuse plain sign updates and relu."""
    with pytest.raises(ValueError, match="only allowed at finite width"):
        nt_dynamics(_config(rule=UpdateRule.signsgd(0.0)))
    with pytest.raises(ValueError, match="not smooth"):
        _config(activation="relu")


def test_deep_engine_reduces_to_shallow():
    """Test the deep mu engine with L=1 reproduces the shallow engine exactly."""
    cfg = _config(L=1, track_kernels=(1,))
    shallow = mu_dynamics_shallow(cfg)
    deep = mu_dynamics_deep(cfg)
    np.testing.assert_array_equal(deep.outputs, shallow.outputs)
    np.testing.assert_array_equal(deep.kernels[1], shallow.kernels[1])


def test_mu_zero_learning_rate():
    """Test eta = 0 keeps the mu-limit output fixed."""
    trace = mu_dynamics(_config(L=1, lr=0.0))
    np.testing.assert_array_equal(trace.outputs, np.zeros((4, 3)))


def test_mu_limit_learns():
    """Test a few mu-limit steps move the outputs toward the targets."""
    cfg = _config(L=2, rule=UpdateRule.sgd(), steps=3, lr=0.3, track_kernels=(1, 2))
    trace = mu_dynamics(cfg)
    targets = cfg.signal.targets
    assert np.linalg.norm(trace.outputs[-1] - targets) < np.linalg.norm(targets)
    assert feature_kernel(trace, 2).shape == (4, 3, 3)


def test_mu_limit_rejects_random_f0():
    """Test the mu engines start from a zero output."""
    with pytest.raises(ValueError, match="f0 = 0"):
        mu_dynamics(_config(L=1, f0_mode="gaussian"))
    with pytest.raises(ValueError, match="needs L=1"):
        mu_dynamics_shallow(_config(L=2))


def test_feature_kernel_untracked():
    """Test asking for an untracked layer names the tracked ones."""
    trace = DynamicsTrace(np.zeros((1, 2)), np.zeros(2))
    with pytest.raises(ValueError, match="tracked: none"):
        feature_kernel(trace, 1)


def test_small_copy_counts_do_not_change_the_limit():
    """Test copy counts below sqrt(m) leave the mu and neural tangent traces unchanged."""
    for engine in (mu_dynamics_deep, nt_dynamics):
        few = engine(_config(copies=1))
        many = engine(_config(copies=16))
        np.testing.assert_array_equal(few.outputs, many.outputs)


def test_mu_stderr_reported():
    """Test the mu engines report a Monte Carlo standard error that shrinks with samples."""
    for L in (1, 2):
        trace = mu_dynamics(_config(L=L))
        assert trace.stderr.shape == trace.outputs.shape
        assert np.all(trace.stderr >= 0)
        assert trace.stderr[0].sum() == 0.0
        assert np.all(trace.stderr[1:] > 0)

    small = mu_dynamics(_config(L=1, subtract_f0=False)).stderr
    large = mu_dynamics(_config(L=1, subtract_f0=False, samples=4 * M)).stderr
    assert np.all(small[0] > 0)
    np.testing.assert_allclose(small[0] / large[0], 2.0, rtol=0.2)


@pytest.mark.slow
def test_mu_limit_settles_as_copies_grow():
    """Test a large-step Adam mu-limit barely moves when the copy count doubles past sqrt(m)."""
    cfg = dict(L=2, rule=UpdateRule.adam(eps=1e-4), lr=2.0, steps=4, samples=40_000)
    default = mu_dynamics(_config(copies=1, **cfg)).outputs
    doubled = mu_dynamics(_config(copies=400, **cfg)).outputs
    assert np.abs(default - doubled).max() < 0.25 * np.abs(doubled).max()


@pytest.mark.slow
def test_zero_decay_is_the_plain_neural_tangent_limit():
    """Test a vanishing weight decay gives the undecayed neural tangent trace."""
    cfg = dict(rule=UpdateRule.sgd(), steps=4, samples=100_000)
    plain = nt_dynamics(_config(**cfg))
    decayed = nt_dynamics(_config(modifiers=Modifiers(weight_decay=1e-9), **cfg))
    np.testing.assert_allclose(decayed.outputs, plain.outputs,
                               atol=0.03 * np.abs(plain.outputs).max())
