"""Tests for the param module."""
from fractions import Fraction

import pytest

from widthlab.param import (
    PRESETS,
    AbcdParam,
    check_faithful_init,
    check_stability_init,
    check_training,
    classify,
    format_fraction,
    parse_exponents,
    preset,
    r_values,
    symmetry_shift,
    to_abc,
)

HALF = Fraction(1, 2)


def test_parse_and_format_exponents():
    """Test exponent lists parse to exact rationals and format back."""
    values = parse_exponents("0, 1/2,1,-1/2")
    assert values == (0, HALF, 1, -HALF)
    assert [format_fraction(v) for v in values] == ["0", "1/2", "1", "-1/2"]


def test_parse_exponents_rejects_garbage():
    """Test unparsable exponent lists raise ValueError."""
    with pytest.raises(ValueError, match="cannot parse"):
        parse_exponents("0,half")


def test_mismatched_lengths_rejected():
    """Test exponent arrays of the wrong length are rejected with a field name."""
    with pytest.raises(ValueError, match="field 'b'"):
        AbcdParam(2, (0, 0, 0), (0, 0), (0, 0, 0), (0, 0, 0))


def test_ntp_table():
    """Test the NTP preset exponents."""
    p = preset("NTP", 3)
    assert p.layer(1)[:4] == (0, 0, HALF, HALF)
    assert p.layer(2)[:4] == (HALF, 0, 1, 1)
    assert p.layer(3)[:4] == (HALF, 0, 1, 1)
    assert p.layer(4)[:4] == (HALF, 0, HALF, HALF)


def test_mup_table():
    """Test the muP preset exponents."""
    p = preset("muP", 3)
    assert p.layer(1)[:4] == (0, 0, 0, 1)
    assert p.layer(2)[:4] == (0, HALF, 1, 1)
    assert p.layer(4)[:4] == (1, 0, 0, 1)


def test_mup_clip_table():
    """Test clipped muP learning-rate and norm exponents."""
    p = preset("muP_clip", 3)
    assert p.c == (-HALF, 0, 0, -HALF)
    assert p.e == (HALF, 1, 1, HALF)


def test_unknown_preset():
    """Test unknown preset names raise ValueError."""
    with pytest.raises(ValueError, match="Unknown preset"):
        preset("XYZ", 2)


def test_up_range():
    """Test UP rejects s outside [0, 1/2]."""
    with pytest.raises(ValueError, match="0 <= s <= 1/2"):
        preset("UP", 2, "3/4")
    assert preset("UP(1/4)", 2).name == "UP(1/4)"


def test_r_values_ntp_and_mup():
    """Test r = 1/2 for NTP and r = 0 for muP."""
    ntp = r_values(preset("NTP", 3))
    assert all(r == HALF for r in ntp.per_layer[:3])
    assert ntp.r == HALF
    mup = r_values(preset("muP", 3))
    assert all(r == 0 for r in mup.per_layer)
    assert mup.r == 0


def test_r_values_mup_clip():
    """Test clipped muP keeps r = 0 once the norm exponents are included."""
    assert r_values(preset("muP_clip", 2)).r == 0


def test_sp_unfaithful():
    """Test SP is stable but not faithful at initialization."""
    sp = preset("SP", 2)
    assert check_stability_init(sp)
    assert not check_faithful_init(sp)
    result = classify(sp)
    assert result.regime == "unfaithful"
    assert result.notes


def test_training_check_fails_for_negative_output_c():
    """Test lowering c_{L+1} below b_{L+1} breaks stable training."""
    p = preset("muP", 2)
    broken = AbcdParam(p.L, p.a, p.b, p.c[:-1] + (Fraction(-1),), p.d)
    assert not check_training(broken)
    assert classify(broken).regime == "unstable"


def test_classify_regimes():
    """Test the dichotomy verdicts of the main presets."""
    assert classify(preset("muP", 3)).regime == "feature_learning"
    assert classify(preset("NTP", 3)).regime == "operator_regime"
    up = classify(preset("UP", 2, "1/4"))
    assert up.regime == "operator_regime"
    assert up.r == Fraction(1, 4)
    assert classify(preset("UP", 2, 0)).regime == "feature_learning"


@pytest.mark.parametrize("name", [p for p in PRESETS if p not in ("SP", "UP")])
def test_presets_pass_all_checks(name):
    """Test every faithful preset passes all four checks."""
    result = classify(preset(name, 3))
    assert result.stable_init
    assert result.faithful_init
    assert result.stable_faithful_training
    assert result.nontrivial
    assert result.regime in ("feature_learning", "operator_regime")


def test_symmetry_shift_zero_is_identity():
    """Test a zero shift returns an equal parametrization."""
    p = preset("NTP", 2)
    assert symmetry_shift(p, 2, 0) == p


@pytest.mark.parametrize("name", ["NTP", "muP", "SP", "muP_clip"])
@pytest.mark.parametrize("layer", [1, 2, 3])
def test_classification_invariant_under_shift(name, layer):
    """Test r values and the verdict are invariant along symmetry orbits."""
    p = preset(name, 2)
    shifted = symmetry_shift(p, layer, "3/4")
    assert r_values(shifted) == r_values(p)
    assert classify(shifted).regime == classify(p).regime


def test_mup_reduces_to_sgd_abc_table():
    """Test shifting muP by -1/2 at the ends and folding d gives the SGD abc table."""
    p = preset("muP", 2)
    p = symmetry_shift(symmetry_shift(p, 1, "-1/2"), 3, "-1/2")
    abc = to_abc(p)
    assert abc.a == (-HALF, 0, HALF)
    assert abc.b == (HALF, HALF, HALF)
    assert abc.c == (0, 0, 0)
    assert abc.d == (0, 0, 0)


def test_to_abc_ntp_recovers_classical():
    """Test folding d into c for NTP gives c - d = 0 in every layer."""
    assert to_abc(preset("NTP", 3)).c == (0, 0, 0, 0)


def test_to_abc_idempotent_without_d():
    """Test SP (d = 0) is unchanged by the abc reduction."""
    sp = preset("SP", 2)
    assert to_abc(sp) == sp


def test_dict_round_trip():
    """Test to_dict/from_dict preserve exponents exactly."""
    p = preset("UP", 2, "1/3")
    assert AbcdParam.from_dict(p.to_dict()) == p
