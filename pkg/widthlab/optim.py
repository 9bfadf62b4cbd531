"""Entrywise update functions Q^l_t and update modifiers.

q_eval is a pure function of the scaled gradient history
(n^{d_l} g_0, ..., n^{d_l} g_t); UpdateState is the incremental form used by
the finite-width trainer, equal to q_eval for the built-in rules.
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from widthlab.errors import NonFiniteHistory, ZeroNormUpdate
from widthlab.functions import FunctionRef

KINDS = ("sgd", "momentum", "signsgd", "adam", "custom")
CLIP_MODES = ("none", "normalize", "clip")
NORM_SOURCES = ("update", "weight")
VECTOR_LIKE = "vector"
MATRIX_LIKE = "matrix"

CustomQ = Callable[[int, int, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class UpdateRule:
    """An entrywise update function, optionally overridden per layer.

    ``custom`` receives (layer, t, history) with history stacked on axis 0.
    """
    kind: str = "sgd"
    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    overrides: Tuple[Tuple[int, "UpdateRule"], ...] = ()
    custom: Optional[CustomQ] = field(default=None, compare=False, repr=False)
    custom_memoryless: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"Unknown update rule '{self.kind}' (known: {', '.join(KINDS)})")
        if self.kind == "adam":
            if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
                raise ValueError("adam requires 0 <= beta1, beta2 < 1")
            if not self.eps > 0.0:
                raise ValueError("adam requires eps > 0")
        if self.kind == "signsgd" and self.eps < 0.0:
            raise ValueError("signsgd requires eps >= 0")
        if self.kind == "momentum" and not 0.0 <= self.beta < 1.0:
            raise ValueError("momentum requires 0 <= beta < 1")
        if self.kind == "custom" and self.custom is None:
            raise ValueError("custom rule needs a callable")

    @classmethod
    def sgd(cls) -> "UpdateRule":
        return cls("sgd")

    @classmethod
    def momentum(cls, beta: float = 0.9) -> "UpdateRule":
        return cls("momentum", beta=beta)

    @classmethod
    def signsgd(cls, eps: float = 0.0) -> "UpdateRule":
        return cls("signsgd", eps=eps)

    @classmethod
    def adam(cls, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "UpdateRule":
        return cls("adam", beta1=beta1, beta2=beta2, eps=eps)

    @property
    def memoryless(self) -> bool:
        if self.kind == "custom":
            return self.custom_memoryless
        return self.kind in ("sgd", "signsgd")

    @property
    def memory(self) -> str:
        return "memoryless" if self.memoryless else "full-history"

    @property
    def stationary(self) -> bool:
        """Adam's bias correction makes Q depend on t."""
        return self.kind != "adam"

    def for_layer(self, layer: int) -> "UpdateRule":
        for l, rule in self.overrides:
            if l == layer:
                return rule
        return self

    def with_overrides(self, table: Dict[int, "UpdateRule"]) -> "UpdateRule":
        return UpdateRule(self.kind, self.beta, self.beta1, self.beta2, self.eps,
                          tuple(sorted(table.items())), self.custom, self.custom_memoryless)

    def require_smooth(self):
        """Limit engines need Q smooth; plain sign is finite-width only."""
        rules = [self] + [rule for _, rule in self.overrides]
        for rule in rules:
            if rule.kind == "signsgd" and rule.eps == 0.0:
                raise ValueError("signsgd with eps=0 is only allowed at finite width")

    def as_function(self, layer: int, t: int) -> FunctionRef:
        """Q^l_t as a FunctionRef over one block of t+1 history arguments."""
        rule = self

        def _value(blocks, c):
            return q_eval(rule, layer, t, np.moveaxis(np.asarray(blocks[0], dtype=float), -1, 0))

        return FunctionRef(id=f"update:{self.kind}:{layer}:{t}", block_sizes=(t + 1,),
                           n_scalars=0, evaluator=_value)


def _stack_history(history: Union[np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
    if isinstance(history, np.ndarray):
        return history.astype(float, copy=False)
    return np.stack([np.asarray(g, dtype=float) for g in history], axis=0)


def _smooth_sign(g: np.ndarray, eps: float) -> np.ndarray:
    if eps == 0.0:
        return np.sign(g)
    return g / np.sqrt(g * g + eps * eps)


def _adam_weights(beta: float, t: int) -> np.ndarray:
    """(1 - beta) beta^{t-s} / (1 - beta^{t+1}) for s = 0..t."""
    powers = beta ** np.arange(t, -1, -1, dtype=float)
    return (1.0 - beta) * powers / (1.0 - beta ** (t + 1))


def q_eval(rule: UpdateRule, layer: int, t: int,
           history: Union[np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
    """Evaluate Q^l_t entrywise on a scaled gradient history.

    Args:
        rule: Update rule (per-layer overrides are resolved here)
        layer: Layer index l (1-based)
        t: Step index; history must hold t+1 entries
        history: Scaled gradients stacked on axis 0, oldest first

    Returns:
        Update tensor with the shape of one history entry

    Raises:
        ValueError: If history length is not t+1
        NonFiniteHistory: If history contains NaN
    """
    hist = _stack_history(history)
    if hist.shape[0] != t + 1:
        raise ValueError(f"history has {hist.shape[0]} entries, expected t+1 = {t + 1}")
    if np.isnan(hist).any():
        raise NonFiniteHistory(f"NaN in gradient history (layer {layer}, t={t})")
    rule = rule.for_layer(layer)
    g = hist[-1]
    if rule.kind == "sgd":
        return np.array(g, dtype=float)
    if rule.kind == "signsgd":
        return _smooth_sign(g, rule.eps)
    if rule.kind == "momentum":
        weights = rule.beta ** np.arange(t, -1, -1, dtype=float)
        return np.tensordot(weights, hist, axes=1)
    if rule.kind == "adam":
        m = np.tensordot(_adam_weights(rule.beta1, t), hist, axes=1)
        v = np.tensordot(_adam_weights(rule.beta2, t), hist * hist, axes=1)
        return m / np.sqrt(v + rule.eps * rule.eps)
    return np.asarray(rule.custom(layer, t, hist), dtype=float)


class UpdateState:
    """Incremental Q^l_t for one layer of a finite-width network.

    Momentum and Adam keep running moments; other rules keep the history and
    defer to q_eval.
    """

    def __init__(self, rule: UpdateRule, layer: int):
        self.rule = rule.for_layer(layer)
        self.layer = layer
        self.t = -1
        self._m: Optional[np.ndarray] = None
        self._v: Optional[np.ndarray] = None
        self._history: List[np.ndarray] = []

    def push(self, g: np.ndarray) -> np.ndarray:
        """Append the scaled gradient g_t and return Q_t."""
        if np.isnan(g).any():
            raise NonFiniteHistory(f"NaN in gradient (layer {self.layer}, t={self.t + 1})")
        self.t += 1
        rule = self.rule
        if rule.kind in ("sgd", "signsgd"):
            return q_eval(rule, self.layer, 0, g[None])
        if rule.kind == "momentum":
            self._m = g.copy() if self._m is None else rule.beta * self._m + g
            return self._m.copy()
        if rule.kind == "adam":
            if self._m is None:
                self._m = np.zeros_like(g)
                self._v = np.zeros_like(g)
            self._m = rule.beta1 * self._m + (1.0 - rule.beta1) * g
            self._v = rule.beta2 * self._v + (1.0 - rule.beta2) * g * g
            m_hat = self._m / (1.0 - rule.beta1 ** (self.t + 1))
            v_hat = self._v / (1.0 - rule.beta2 ** (self.t + 1))
            return m_hat / np.sqrt(v_hat + rule.eps * rule.eps)
        self._history.append(np.array(g, dtype=float))
        return q_eval(rule, self.layer, self.t, self._history)


@dataclass(frozen=True)
class Modifiers:
    """Decoupled weight decay and update normalization/clipping."""
    weight_decay: float = 0.0
    clip: str = "none"
    theta0: Union[float, Tuple[float, ...]] = 1.0
    norm_source: str = "update"

    def __post_init__(self):
        if not 0.0 <= self.weight_decay < 1.0:
            raise ValueError(f"weight_decay must be in [0, 1), got {self.weight_decay}")
        if self.clip not in CLIP_MODES:
            raise ValueError(f"clip must be one of {', '.join(CLIP_MODES)}, got '{self.clip}'")
        if self.norm_source not in NORM_SOURCES:
            raise ValueError(f"norm_source must be one of {', '.join(NORM_SOURCES)}")
        thetas = self.theta0 if isinstance(self.theta0, tuple) else (self.theta0,)
        if self.clip == "clip" and any(not theta > 0.0 for theta in thetas):
            raise ValueError("theta0 must be > 0 when clipping")

    def threshold(self, layer: int) -> float:
        """theta0 for a layer (1-based); a scalar theta0 applies to all layers."""
        if isinstance(self.theta0, tuple):
            return float(self.theta0[layer - 1])
        return float(self.theta0)

    @property
    def normalizes(self) -> bool:
        return self.clip != "none"


def default_clip_exponent(kind: str) -> float:
    """Norm growth exponent e_l of an entrywise-Theta(1) update."""
    return 0.5 if kind == VECTOR_LIKE else 1.0


def apply_modifiers(update: np.ndarray, weight: Optional[np.ndarray], mods: Modifiers, n: int,
                    kind: str, eta: float = 1.0, c: float = 0.0, layer: int = 1,
                    clip_exponent: Optional[float] = None) -> np.ndarray:
    """Turn Q^l_t into a weight delta -eta n^{-c} nu^{-1} Q.

    The (1 - lambda) weight decay is applied by the caller.

    Args:
        update: Q^l_t
        weight: Current weight (read for the current-weight-norm source)
        mods: Modifiers
        n: Width
        kind: VECTOR_LIKE or MATRIX_LIKE
        eta: Learning rate
        c: Learning-rate exponent c_l
        layer: Layer index for per-layer thresholds
        clip_exponent: e_l override for the clip threshold theta0 n^{e_l}

    Raises:
        ZeroNormUpdate: If normalizing by a zero norm
    """
    scale = eta * float(n) ** (-c)
    if not mods.normalizes:
        return -scale * update
    source = update if mods.norm_source == "update" else weight
    nu = float(np.linalg.norm(source))
    if mods.clip == "clip":
        e = default_clip_exponent(kind) if clip_exponent is None else clip_exponent
        nu = min(nu, mods.threshold(layer) * float(n) ** e)
    if nu == 0.0 or not math.isfinite(nu):
        raise ZeroNormUpdate(f"cannot normalize layer {layer} update by norm {nu}")
    return -(scale / nu) * update


def sample_norm(x: np.ndarray) -> float:
    """|X| = sqrt(E ||X||^2) for samples stacked on axis 0."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return float(np.sqrt(np.mean(x * x)))
    return float(np.sqrt(np.mean(np.sum(x * x, axis=tuple(range(1, x.ndim))))))


def limit_normalizer(update_norm: float, mods: Modifiers, layer: int,
                     weight_norm: Optional[float] = None) -> float:
    """Infinite-width counterpart of nu: divide the update by this.

    ``update_norm`` is |Q| over samples; with the current-weight-norm source
    ``weight_norm`` is used instead (1 for hidden operators).
    """
    if not mods.normalizes:
        return 1.0
    nu = update_norm if mods.norm_source == "update" else weight_norm
    if nu is None:
        raise ValueError("current-weight-norm normalization needs the weight norm")
    if mods.clip == "clip":
        nu = min(nu, mods.threshold(layer))
    if nu == 0.0 or not math.isfinite(nu):
        raise ZeroNormUpdate(f"cannot normalize layer {layer} update by norm {nu}")
    return nu
