"""Tests for finite-width MLP training."""
import numpy as np
import pytest

from widthlab.errors import Diverged
from widthlab.finite import execute, sample_init
from widthlab.mlp import FiniteTrainConfig, mlp_gradients, train_finite_mlp, train_trial
from widthlab.optim import Modifiers, UpdateRule
from widthlab.param import preset, symmetry_shift, to_abc
from widthlab.program import backprop_transform, mlp_program
from widthlab.signals import MSESignal


def _config(**overrides) -> FiniteTrainConfig:
    rng = np.random.default_rng(0)
    xi = rng.standard_normal((3, 5)) / np.sqrt(3)
    L = overrides.pop("L", 2)
    settings = dict(
        L=L, widths=(16, 32), xi=xi, param=preset("muP", L), rule=UpdateRule.adam(eps=1e-4),
        signal=MSESignal(rng.standard_normal(5)), lr=0.1, steps=3, trials=2, seed=0,
    )
    settings.update(overrides)
    return FiniteTrainConfig(**settings)


def test_zero_learning_rate_is_constant():
    """Test eta = 0 leaves the outputs at f_0."""
    for trace in train_finite_mlp(_config(lr=0.0)):
        np.testing.assert_array_equal(trace.outputs, np.zeros_like(trace.outputs))


def test_outputs_not_centered_without_subtraction():
    """Test outputs start at f_0 when f_0 is not subtracted."""
    trace = train_trial(_config(subtract_f0=False), 16, 0)
    np.testing.assert_array_equal(trace.outputs[0], trace.f0)


def test_training_is_reproducible():
    """Test the same seed replays the same trace, and trials differ."""
    cfg = _config()
    a = train_trial(cfg, 32, 1)
    b = train_trial(cfg, 32, 1)
    np.testing.assert_array_equal(a.outputs, b.outputs)
    assert not np.array_equal(a.f0, train_trial(cfg, 32, 0).f0)


def test_thread_count_does_not_change_results():
    """Test worker processes give the same traces as serial training."""
    cfg = _config()
    serial = train_finite_mlp(cfg, threads=1)
    parallel = train_finite_mlp(cfg, threads=2)
    assert [(t.width, t.trial) for t in serial] == [(t.width, t.trial) for t in parallel]
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.outputs, b.outputs)


def test_progress_callback():
    """Test the callback sees every cell."""
    calls = []
    train_finite_mlp(_config(), progress_callback=lambda done, total: calls.append((done, total)))
    assert calls[-1] == (4, 4)


def test_symmetry_shift_leaves_trajectory_fixed():
    """Test a symmetry-shifted parametrization trains identically."""
    cfg = _config()
    base = train_trial(cfg, 64, 0)
    for layer in (1, 2, 3):
        shifted = _config(param=symmetry_shift(cfg.param, layer, "1/2"))
        np.testing.assert_allclose(train_trial(shifted, 64, 0).outputs, base.outputs,
                                   rtol=1e-8, atol=1e-12)


def test_abc_reduction_for_sgd():
    """Test SGD under the abc-reduced parametrization reproduces the abcd run."""
    cfg = _config(rule=UpdateRule.sgd(), param=preset("NTP", 2))
    reduced = _config(rule=UpdateRule.sgd(), param=to_abc(preset("NTP", 2)))
    np.testing.assert_allclose(train_trial(reduced, 64, 0).outputs,
                               train_trial(cfg, 64, 0).outputs, rtol=1e-12, atol=1e-15)


def test_weight_decay_scales_linear_network():
    """Test pure decay shrinks a linear one-layer network by (1 - lambda)^2 per step."""
    cfg = _config(L=1, activation="identity", lr=0.0, subtract_f0=False,
                  modifiers=Modifiers(weight_decay=0.1))
    trace = train_trial(cfg, 32, 0)
    for t in range(cfg.steps + 1):
        np.testing.assert_allclose(trace.outputs[t], 0.81 ** t * trace.f0, rtol=1e-12)


def test_weight_decay_subtracts_decayed_initial_network():
    """Test decay alone leaves centered NTP outputs at zero: the reference decays with the weights."""
    cfg = _config(param=preset("NTP", 2), lr=0.0, modifiers=Modifiers(weight_decay=0.2))
    trace = train_trial(cfg, 64, 0)
    assert np.abs(trace.f0).max() > 1e-2
    np.testing.assert_allclose(trace.outputs, np.zeros_like(trace.outputs), atol=1e-12)


def test_divergence_is_reported():
    """Test a huge learning rate diverges and is truncated or raised."""
    cfg = _config(rule=UpdateRule.sgd(), lr=1e20, widths=(16,), trials=1)
    trace = train_trial(cfg, 16, 0)
    assert trace.diverged_at == 1
    assert trace.outputs.shape[0] == 1
    with pytest.raises(Diverged, match="diverged at step 1"):
        train_finite_mlp(cfg)


def test_kernels_are_tracked():
    """Test tracked feature kernels are symmetric per step."""
    trace = train_trial(_config(track_kernels=(1, 2)), 32, 0)
    assert set(trace.kernels) == {1, 2}
    k = trace.kernels[2]
    assert k.shape == (4, 5, 5)
    np.testing.assert_allclose(k, np.swapaxes(k, 1, 2))


def test_config_validation():
    """Test mismatched depth and signal sizes are rejected."""
    with pytest.raises(ValueError, match="parametrization has L=3"):
        _config(param=preset("muP", 3))
    with pytest.raises(ValueError, match="error signal has 2 targets"):
        _config(signal=MSESignal([0.0, 1.0]))
    with pytest.raises(ValueError, match="kernel layer 5"):
        _config(track_kernels=(5,))


def test_gradients_match_backprop_program():
    """Test the hand-coded backward pass equals the backprop program gradients."""
    n, d, L = 64, 2, 2
    xi = np.array([0.6, -1.1])
    p = mlp_program(L, d, "gelu", xi)
    a = sample_init(p, n, seed=4)
    values = execute(backprop_transform(p, "out"), a)
    weights = [np.column_stack([a.vectors[f"w1_{j}"] for j in range(d)]),
               a.matrices["W2"], a.vectors["v"]]
    grads = mlp_gradients(weights, xi[:, None], np.array([1.0]), preset("muP", L), n)
    # the program differentiates sum(out) = n f
    expected_w1 = np.column_stack([values.grad("out", f"w1_{j}") for j in range(d)])
    np.testing.assert_allclose(n * grads[0], expected_w1, rtol=1e-6, atol=1e-10)
    expected_w2 = np.outer(values.grad("out", "h2"), values.vectors["x1"])
    np.testing.assert_allclose(n * grads[1], expected_w2, rtol=1e-6, atol=1e-10)
    np.testing.assert_allclose(n * grads[2], values.grad("out", "v"), rtol=1e-6, atol=1e-10)
