"""abcd-parametrizations: presets, symmetry, reduction and classification.

Layers are numbered 1..L+1 (layer 1 is the input layer, L+1 the readout).
All exponents are exact rationals, so boundary conditions such as
a_{L+1} + b_{L+1} + r = 1 are decided without tolerances.

Under update normalization/clipping the effective learning-rate exponent of
layer l is c_l + e_l; every formula below uses that effective exponent, which
reduces to c_l when e_l = 0.
"""
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

Number = Union[int, float, str, Fraction]

REGIMES = ("unstable", "unfaithful", "trivial", "feature_learning", "operator_regime")
PRESETS = ("SP", "NTP", "muP", "NTP_clip", "muP_clip", "muP_clip_wnorm", "UP")

HALF = Fraction(1, 2)


def to_fraction(x: Number) -> Fraction:
    """Exact rational from int, '1/2'-style string, Fraction or float."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(str(x).strip())


def parse_exponents(text: str) -> Tuple[Fraction, ...]:
    """Parse '0,1/2,1' into exact rationals."""
    parts = [part for part in text.split(",") if part.strip()]
    try:
        return tuple(to_fraction(part) for part in parts)
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"cannot parse exponent list '{text}'") from None


def format_fraction(x: Fraction) -> str:
    return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


@dataclass(frozen=True)
class AbcdParam:
    """Per-layer exponents; index 0 of each tuple is layer 1."""
    L: int
    a: Tuple[Fraction, ...]
    b: Tuple[Fraction, ...]
    c: Tuple[Fraction, ...]
    d: Tuple[Fraction, ...]
    e: Tuple[Fraction, ...] = ()
    name: str = "custom"

    def __post_init__(self):
        if self.L < 1:
            raise ValueError(f"field 'L': must be >= 1, got {self.L}")
        if not self.e:
            object.__setattr__(self, "e", (Fraction(0),) * (self.L + 1))
        for key in ("a", "b", "c", "d", "e"):
            values = tuple(to_fraction(x) for x in getattr(self, key))
            if len(values) != self.L + 1:
                raise ValueError(
                    f"field '{key}': expected {self.L + 1} entries (L+1), got {len(values)}")
            object.__setattr__(self, key, values)

    @classmethod
    def from_layers(cls, L: int, first: Sequence[Number], hidden: Sequence[Number],
                    last: Sequence[Number], e: Optional[Sequence[Number]] = None,
                    name: str = "custom") -> "AbcdParam":
        """Build from (a, b, c, d) rows for layer 1, layers 2..L and layer L+1."""
        rows = [first] + [hidden] * (L - 1) + [last]
        columns = list(zip(*rows))
        return cls(L, *columns, e=tuple(e) if e is not None else (), name=name)

    def layer(self, l: int) -> Tuple[Fraction, Fraction, Fraction, Fraction, Fraction]:
        """(a, b, c, d, e) of layer l, 1-based."""
        if not 1 <= l <= self.L + 1:
            raise ValueError(f"layer {l} out of range 1..{self.L + 1}")
        i = l - 1
        return self.a[i], self.b[i], self.c[i], self.d[i], self.e[i]

    def effective_c(self, l: int) -> Fraction:
        return self.c[l - 1] + self.e[l - 1]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "L": self.L,
            **{key: [format_fraction(x) for x in getattr(self, key)] for key in "abcde"},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AbcdParam":
        return cls(int(data["L"]), *(tuple(data[key]) for key in "abcd"),
                   e=tuple(data.get("e", ())), name=data.get("name", "custom"))


# ---------------------------------------------------------------------------
# Presets


def preset(name: str, L: int, s: Optional[Number] = None) -> AbcdParam:
    """Return a named parametrization.

    Args:
        name: One of SP, NTP, muP, NTP_clip, muP_clip, muP_clip_wnorm, UP
            (``UP`` takes ``s``; ``UP(1/4)`` is also accepted as a name)
        L: Number of hidden layers
        s: Feature-change exponent for UP, 0 <= s <= 1/2

    Raises:
        ValueError: If the name is unknown or s is out of range
    """
    if name.startswith("UP(") and name.endswith(")"):
        s = name[3:-1]
        name = "UP"
    h = HALF
    clip_e = (h, 1, h)
    if name == "SP":
        return AbcdParam.from_layers(L, (0, 0, 0, 0), (0, h, 0, 0), (0, h, 0, 0), name="SP")
    if name == "NTP":
        return AbcdParam.from_layers(L, (0, 0, h, h), (h, 0, 1, 1), (h, 0, h, h), name="NTP")
    if name == "muP":
        return AbcdParam.from_layers(L, (0, 0, 0, 1), (0, h, 1, 1), (1, 0, 0, 1), name="muP")
    if name == "NTP_clip":
        return AbcdParam.from_layers(L, (0, 0, 0, h), (h, 0, 0, 1), (h, 0, 0, h),
                                     e=_clip_exponents(L, *clip_e), name="NTP_clip")
    if name == "muP_clip":
        return AbcdParam.from_layers(L, (0, 0, -h, 1), (0, h, 0, 1), (1, 0, -h, 1),
                                     e=_clip_exponents(L, *clip_e), name="muP_clip")
    if name == "muP_clip_wnorm":
        # weight norms grow like n^{1/2} in every layer
        return AbcdParam.from_layers(L, (0, 0, -h, 1), (0, h, h, 1), (1, 0, -h, 1),
                                     e=_clip_exponents(L, h, h, h), name="muP_clip_wnorm")
    if name == "UP":
        if s is None:
            raise ValueError("UP needs s")
        s = to_fraction(s)
        if not 0 <= s <= h:
            raise ValueError(f"UP needs 0 <= s <= 1/2, got {s}")
        return AbcdParam.from_layers(L, (0, 0, s, 1 - s), (s, h - s, 1, 1), (1 - s, 0, s, 1 - s),
                                     name=f"UP({format_fraction(s)})")
    raise ValueError(f"Unknown preset '{name}' (known: {', '.join(PRESETS)})")


def _clip_exponents(L: int, first, hidden, last) -> Tuple[Fraction, ...]:
    return tuple(to_fraction(x) for x in [first] + [hidden] * (L - 1) + [last])


# ---------------------------------------------------------------------------
# Algebra


def symmetry_shift(p: AbcdParam, l: int, theta: Number) -> AbcdParam:
    """a_l += theta, b_l -= theta, c_l -= theta, d_l += theta."""
    p.layer(l)
    theta = to_fraction(theta)
    i = l - 1

    def shifted(values, delta):
        out = list(values)
        out[i] += delta
        return tuple(out)

    return replace(p, a=shifted(p.a, theta), b=shifted(p.b, -theta),
                   c=shifted(p.c, -theta), d=shifted(p.d, theta))


def to_abc(p: AbcdParam) -> AbcdParam:
    """Fold d into c for SGD: (a, b, c - d), d = 0."""
    return replace(p, c=tuple(c - d for c, d in zip(p.c, p.d)),
                   d=(Fraction(0),) * (p.L + 1))


@dataclass(frozen=True)
class RValues:
    per_layer: Tuple[Fraction, ...]
    cumulative: Tuple[Fraction, ...]
    r: Fraction


def r_values(p: AbcdParam) -> RValues:
    """r_l = c_l + e_l + a_l - 1 (l > 1), c_1 + e_1 + a_1; r = min over l <= L."""
    per_layer = []
    for l in range(1, p.L + 2):
        a = p.a[l - 1]
        r_l = p.effective_c(l) + a
        if l > 1:
            r_l -= 1
        per_layer.append(r_l)
    cumulative = []
    running = None
    for r_l in per_layer:
        running = r_l if running is None else min(running, r_l)
        cumulative.append(running)
    return RValues(tuple(per_layer), tuple(cumulative), cumulative[p.L - 1])


def check_stability_init(p: AbcdParam) -> bool:
    """a_1 + b_1 = 0, a_l + b_l = 1/2 for 2 <= l <= L, a_{L+1} + b_{L+1} >= 1/2."""
    sums = [a + b for a, b in zip(p.a, p.b)]
    if sums[0] != 0:
        return False
    if any(x != HALF for x in sums[1:p.L]):
        return False
    return sums[p.L] >= HALF


def check_faithful_init(p: AbcdParam) -> bool:
    """d_l = a_l + a_{L+1} + b_{L+1} for l <= L, d_{L+1} = a_{L+1}."""
    out_sum = p.a[p.L] + p.b[p.L]
    if any(p.d[i] != p.a[i] + out_sum for i in range(p.L)):
        return False
    return p.d[p.L] == p.a[p.L]


def check_training(p: AbcdParam) -> bool:
    """r_l >= 0 for all l, a_{L+1} + b_{L+1} + r >= 1, b_{L+1} <= c_{L+1}."""
    rv = r_values(p)
    if any(r_l < 0 for r_l in rv.per_layer):
        return False
    if p.a[p.L] + p.b[p.L] + rv.r < 1:
        return False
    return p.b[p.L] <= p.effective_c(p.L + 1)


def check_nontrivial(p: AbcdParam) -> bool:
    """a_{L+1} + c_{L+1} = 1 or a_{L+1} + b_{L+1} + r = 1."""
    rv = r_values(p)
    return (p.a[p.L] + p.effective_c(p.L + 1) == 1
            or p.a[p.L] + p.b[p.L] + rv.r == 1)


@dataclass(frozen=True)
class Classification:
    stable_init: bool
    faithful_init: bool
    stable_faithful_training: bool
    nontrivial: bool
    r_values: RValues
    regime: str
    notes: Tuple[str, ...] = field(default=())

    @property
    def r(self) -> Fraction:
        return self.r_values.r

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stable_init": self.stable_init,
            "faithful_init": self.faithful_init,
            "stable_faithful_training": self.stable_faithful_training,
            "nontrivial": self.nontrivial,
            "r_l": [format_fraction(x) for x in self.r_values.per_layer],
            "r_le_l": [format_fraction(x) for x in self.r_values.cumulative],
            "r": format_fraction(self.r_values.r),
            "regime": self.regime,
            "notes": list(self.notes),
        }


def classify(p: AbcdParam) -> Classification:
    """Place a parametrization in the dynamical dichotomy.

    Order of verdicts: unstable at init, unfaithful at init, unstable in
    training, trivial; otherwise feature learning (r = 0) or operator regime
    (r > 0).
    """
    stable = check_stability_init(p)
    faithful = check_faithful_init(p)
    training = check_training(p)
    nontrivial = check_nontrivial(p)
    rv = r_values(p)
    notes: List[str] = []
    if not stable:
        regime = "unstable"
    elif not faithful:
        regime = "unfaithful"
        notes.append("unfaithful at initialization; with a scale-invariant update function "
                     "(e.g. Adam with eps -> 0) it may behave like a faithful parametrization")
    elif not training:
        regime = "unstable"
    elif not nontrivial:
        regime = "trivial"
    elif rv.r == 0:
        regime = "feature_learning"
    else:
        regime = "operator_regime"
    return Classification(stable, faithful, training, nontrivial, rv, regime, tuple(notes))
