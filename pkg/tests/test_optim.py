"""Tests for update functions and modifiers."""
import numpy as np
import pytest

from widthlab.errors import NonFiniteHistory, ZeroNormUpdate
from widthlab.optim import (
    MATRIX_LIKE,
    VECTOR_LIKE,
    Modifiers,
    UpdateRule,
    UpdateState,
    apply_modifiers,
    limit_normalizer,
    q_eval,
    sample_norm,
)


def _history(t, size=6, seed=0):
    return np.random.default_rng(seed).standard_normal((t + 1, size))


def test_sgd_returns_last_gradient():
    """Test SGD returns g_t unchanged."""
    hist = _history(3)
    np.testing.assert_array_equal(q_eval(UpdateRule.sgd(), 1, 3, hist), hist[-1])


def test_adam_first_step_is_smooth_sign():
    """Test Adam at t=0 equals SignSGD with the same eps."""
    hist = _history(0)
    adam = q_eval(UpdateRule.adam(eps=1e-2), 2, 0, hist)
    sign = q_eval(UpdateRule.signsgd(eps=1e-2), 2, 0, hist)
    np.testing.assert_allclose(adam, sign, rtol=1e-14)


def test_momentum_two_steps():
    """Test momentum sums beta g_0 + g_1."""
    hist = _history(1)
    np.testing.assert_allclose(q_eval(UpdateRule.momentum(0.5), 1, 1, hist),
                               0.5 * hist[0] + hist[1])


def test_history_length_checked():
    """Test a history of the wrong length raises ValueError."""
    with pytest.raises(ValueError, match="expected t\\+1 = 3"):
        q_eval(UpdateRule.sgd(), 1, 2, _history(0))


def test_nan_history_rejected():
    """Test NaN in the history raises NonFiniteHistory."""
    hist = _history(1)
    hist[0, 2] = np.nan
    with pytest.raises(NonFiniteHistory):
        q_eval(UpdateRule.adam(), 1, 1, hist)


def test_entrywise_permutation():
    """Test permuting entries of the history permutes the update."""
    hist = _history(4)
    perm = np.random.default_rng(1).permutation(hist.shape[1])
    rule = UpdateRule.adam(eps=1e-3)
    np.testing.assert_allclose(q_eval(rule, 1, 4, hist[:, perm]), q_eval(rule, 1, 4, hist)[perm])


def test_adam_bounded_by_max_gradient_over_eps():
    """Test |Q| <= max_s |g_s| / eps for Adam."""
    hist = _history(5) * 10
    eps = 0.3
    q = q_eval(UpdateRule.adam(eps=eps), 1, 5, hist)
    assert np.all(np.abs(q) <= np.abs(hist).max(axis=0) / eps + 1e-12)


def test_adam_scale_trades_with_eps():
    """Test Q_eps(c g) = Q_{eps/c}(g)."""
    hist = _history(3)
    c = 8.0
    np.testing.assert_allclose(q_eval(UpdateRule.adam(eps=0.4), 1, 3, c * hist),
                               q_eval(UpdateRule.adam(eps=0.05), 1, 3, hist), rtol=1e-12)


@pytest.mark.parametrize("rule", [UpdateRule.sgd(), UpdateRule.momentum(0.8),
                                  UpdateRule.signsgd(1e-3), UpdateRule.adam(eps=1e-3)])
def test_streaming_state_matches_history(rule):
    """Test the incremental accumulators agree with the pure history form."""
    hist = _history(5)
    state = UpdateState(rule, 1)
    for t in range(hist.shape[0]):
        np.testing.assert_allclose(state.push(hist[t]), q_eval(rule, 1, t, hist[:t + 1]),
                                   rtol=1e-10, atol=1e-12)


def test_custom_rule():
    """Test a custom callable receives the stacked history."""
    rule = UpdateRule("custom", custom=lambda layer, t, h: h.sum(axis=0) * layer)
    hist = _history(2)
    np.testing.assert_allclose(q_eval(rule, 3, 2, hist), 3 * hist.sum(axis=0))
    state = UpdateState(rule, 3)
    state.push(hist[0])
    state.push(hist[1])
    np.testing.assert_allclose(state.push(hist[2]), 3 * hist.sum(axis=0))


def test_per_layer_overrides():
    """Test overrides replace the rule for their layer only."""
    rule = UpdateRule.adam(eps=1e-3).with_overrides({1: UpdateRule.sgd()})
    hist = _history(0)
    np.testing.assert_array_equal(q_eval(rule, 1, 0, hist), hist[0])
    assert not np.array_equal(q_eval(rule, 2, 0, hist), hist[0])


def test_invalid_rules():
    """Test out-of-range hyperparameters are rejected."""
    with pytest.raises(ValueError, match="eps > 0"):
        UpdateRule.adam(eps=0.0)
    with pytest.raises(ValueError, match="Unknown update rule"):
        UpdateRule("lion")
    with pytest.raises(ValueError, match="only allowed at finite width"):
        UpdateRule.signsgd(0.0).require_smooth()


def test_memory_flags():
    """Test memoryless and stationary flags of the built-in rules."""
    assert UpdateRule.sgd().memoryless
    assert UpdateRule.signsgd(0.1).memory == "memoryless"
    assert UpdateRule.adam().memory == "full-history"
    assert not UpdateRule.adam().stationary
    assert UpdateRule.momentum().stationary


def test_plain_modifiers():
    """Test no modifiers gives -eta n^{-c} Q."""
    q = np.ones(4)
    delta = apply_modifiers(q, None, Modifiers(), n=16, kind=VECTOR_LIKE, eta=0.5, c=0.5)
    np.testing.assert_allclose(delta, -0.125 * q)


def test_normalize_matrix_update_scales_like_width():
    """Test the norm of an entrywise-unit matrix update grows like n."""
    ratios = []
    for n in (128, 512):
        q = np.sign(np.random.default_rng(n).standard_normal((n, n)))
        delta = apply_modifiers(q, None, Modifiers(clip="normalize"), n, MATRIX_LIKE)
        ratios.append(np.abs(delta).max() * n)
    assert ratios[0] == pytest.approx(ratios[1], rel=0.05)


def test_clip_with_huge_threshold_is_normalize():
    """Test clipping with a huge theta0 equals plain normalization."""
    q = np.random.default_rng(0).standard_normal((8, 8))
    clipped = apply_modifiers(q, None, Modifiers(clip="clip", theta0=1e12), 8, MATRIX_LIKE)
    normalized = apply_modifiers(q, None, Modifiers(clip="normalize"), 8, MATRIX_LIKE)
    np.testing.assert_allclose(clipped, normalized)


def test_zero_norm_raises():
    """Test normalizing a zero update raises ZeroNormUpdate."""
    with pytest.raises(ZeroNormUpdate):
        apply_modifiers(np.zeros(4), None, Modifiers(clip="normalize"), 4, VECTOR_LIKE)
    with pytest.raises(ZeroNormUpdate):
        apply_modifiers(np.ones(4), np.zeros(4), Modifiers(clip="normalize", norm_source="weight"),
                        4, VECTOR_LIKE)


def test_modifier_validation():
    """Test bad weight decay and clip settings are rejected."""
    with pytest.raises(ValueError, match="weight_decay"):
        Modifiers(weight_decay=1.0)
    with pytest.raises(ValueError, match="theta0 must be > 0"):
        Modifiers(clip="clip", theta0=0.0)
    assert Modifiers(theta0=(1.0, 2.0, 3.0)).threshold(2) == 2.0


def test_limit_normalizer():
    """Test the limit normalizer picks the source and applies the threshold."""
    assert limit_normalizer(3.0, Modifiers(), 1) == 1.0
    assert limit_normalizer(3.0, Modifiers(clip="normalize"), 1) == 3.0
    assert limit_normalizer(3.0, Modifiers(clip="clip", theta0=2.0), 1) == 2.0
    assert limit_normalizer(3.0, Modifiers(clip="normalize", norm_source="weight"), 1,
                            weight_norm=0.5) == 0.5


def test_sample_norm():
    """Test |X| is the root mean squared row norm."""
    assert sample_norm(np.array([3.0, 4.0])) == pytest.approx(np.sqrt(12.5))
    assert sample_norm(np.array([[3.0, 4.0], [0.0, 0.0]])) == pytest.approx(np.sqrt(12.5))
