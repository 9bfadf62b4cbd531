"""Finite-width MLP training under an abcd-parametrization.

Weights are stored as w^l and used as W^l = n^{-a_l} w^l with
w^l_0 ~ N(0, n^{-2 b_l}). Each step applies

    w^l <- (1 - lambda) w^l - eta n^{-c_l} nu^{-1} Q^l_t(n^{d_l} g_0, ..., n^{d_l} g_t)

where g_s is the gradient of sum_a chi_a f(xi_a) wrt w^l.

With ``subtract_f0`` the trainer reports and trains on f_t minus a reference:
f_0 without weight decay, otherwise the output of the initial weights scaled
by (1 - lambda)^t.
"""
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from widthlab.errors import Diverged
from widthlab.functions import Activation, get_activation
from widthlab.optim import (
    MATRIX_LIKE,
    VECTOR_LIKE,
    Modifiers,
    UpdateRule,
    UpdateState,
    apply_modifiers,
)
from widthlab.param import AbcdParam
from widthlab.rng import make_rng
from widthlab.signals import MSESignal

DIVERGENCE_THRESHOLD = 1e12

ProgressCallback = Callable[[int, int], None]


@dataclass(frozen=True)
class FiniteTrainConfig:
    """Everything that determines a finite-width training run."""
    L: int
    widths: Tuple[int, ...]
    xi: np.ndarray = field(compare=False)
    param: AbcdParam
    rule: UpdateRule
    signal: MSESignal
    lr: float
    steps: int
    trials: int = 1
    seed: int = 0
    subtract_f0: bool = True
    activation: str = "gelu"
    modifiers: Modifiers = Modifiers()
    track_kernels: Tuple[int, ...] = ()

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        if xi.ndim != 2 or xi.shape[1] < 1:
            raise ValueError("xi must be a (d, N) array with N >= 1")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "widths", tuple(int(n) for n in self.widths))
        if self.param.L != self.L:
            raise ValueError(f"parametrization has L={self.param.L}, network has L={self.L}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.steps < 0 or self.trials < 1:
            raise ValueError("steps must be >= 0 and trials >= 1")
        if any(n < 1 for n in self.widths):
            raise ValueError("widths must be >= 1")
        if self.signal.size != xi.shape[1]:
            raise ValueError(f"error signal has {self.signal.size} targets for {xi.shape[1]} inputs")
        for l in self.track_kernels:
            if not 1 <= l <= self.L:
                raise ValueError(f"kernel layer {l} out of range 1..{self.L}")
        get_activation(self.activation)

    @property
    def d(self) -> int:
        return self.xi.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.xi.shape[1]


@dataclass
class FiniteTrace:
    """Outputs (T+1, N) of one trial, centered on the reference network when f0 is subtracted."""
    width: int
    trial: int
    outputs: np.ndarray
    f0: np.ndarray
    kernels: Dict[int, np.ndarray] = field(default_factory=dict)
    diverged_at: Optional[int] = None


@dataclass
class ForwardCache:
    h: List[np.ndarray]
    x: List[np.ndarray]
    f: np.ndarray


def _multipliers(param: AbcdParam, n: int) -> List[float]:
    return [float(n) ** (-float(a)) for a in param.a]


def init_weights(param: AbcdParam, n: int, d: int, rng: np.random.Generator) -> List[np.ndarray]:
    """w^1 (n, d), w^l (n, n) for 2 <= l <= L, w^{L+1} (n,); scaled by n^{-b_l}."""
    shapes = [(n, d)] + [(n, n)] * (param.L - 1) + [(n,)]
    return [rng.standard_normal(shape) * float(n) ** (-float(b))
            for shape, b in zip(shapes, param.b)]


def forward(weights: Sequence[np.ndarray], xi: np.ndarray, mult: Sequence[float],
            act: Activation) -> ForwardCache:
    h: List[np.ndarray] = []
    x: List[np.ndarray] = [xi]
    for l in range(len(weights) - 1):
        h.append(mult[l] * (weights[l] @ x[-1]))
        x.append(act.fn(h[-1]))
    f = mult[-1] * (weights[-1] @ x[-1])
    return ForwardCache(h, x, f)


def backward(weights: Sequence[np.ndarray], cache: ForwardCache, chi: np.ndarray,
             mult: Sequence[float], act: Activation) -> List[np.ndarray]:
    """Gradients of sum_a chi_a f(xi_a) wrt each w^l."""
    L = len(weights) - 1
    grads: List[np.ndarray] = [None] * (L + 1)
    grads[L] = mult[L] * (cache.x[L] @ chi)
    dx = np.outer(mult[L] * weights[L], chi)
    for l in range(L - 1, -1, -1):
        dh = dx * act.grad(cache.h[l])
        grads[l] = mult[l] * (dh @ cache.x[l].T)
        if l > 0:
            dx = mult[l] * (weights[l].T @ dh)
    return grads


def mlp_gradients(weights: Sequence[np.ndarray], xi: np.ndarray, chi: np.ndarray,
                  param: AbcdParam, n: int, activation: str = "gelu") -> List[np.ndarray]:
    """Gradients used by the trainer, exposed for cross-checks."""
    act = get_activation(activation)
    mult = _multipliers(param, n)
    return backward(weights, forward(weights, xi, mult, act), np.asarray(chi, dtype=float), mult, act)


def _layer_kind(l: int, L: int) -> str:
    return VECTOR_LIKE if l in (1, L + 1) else MATRIX_LIKE


def train_trial(cfg: FiniteTrainConfig, width: int, trial: int) -> FiniteTrace:
    """Train one network; a divergent run is returned truncated with diverged_at set."""
    n = width
    param = cfg.param
    act = get_activation(cfg.activation)
    mult = _multipliers(param, n)
    weights = init_weights(param, n, cfg.d, make_rng(cfg.seed, "mlp", n, trial))
    states = [UpdateState(cfg.rule, l) for l in range(1, cfg.L + 2)]
    decay = 1.0 - cfg.modifiers.weight_decay
    T = cfg.steps

    outputs = np.zeros((T + 1, cfg.n_inputs))
    kernels = {l: np.zeros((T + 1, cfg.n_inputs, cfg.n_inputs)) for l in cfg.track_kernels}
    cache = forward(weights, cfg.xi, mult, act)
    f0 = cache.f.copy()
    initial = [w.copy() for w in weights] if decay != 1.0 and cfg.subtract_f0 else None
    for t in range(T + 1):
        f = cache.f
        if not np.all(np.abs(f) <= DIVERGENCE_THRESHOLD):
            return FiniteTrace(n, trial, outputs[:t], f0,
                               {l: k[:t] for l, k in kernels.items()}, diverged_at=t)
        if initial is not None and t > 0:
            f = f - forward([decay ** t * w for w in initial], cfg.xi, mult, act).f
        elif cfg.subtract_f0:
            f = f - f0
        outputs[t] = f
        for l, k in kernels.items():
            k[t] = cache.x[l].T @ cache.x[l] / n
        if t == T:
            break
        chi = cfg.signal(t, outputs[t])
        grads = backward(weights, cache, chi, mult, act)
        for i, (w, g) in enumerate(zip(weights, grads)):
            l = i + 1
            q = states[i].push(float(n) ** float(param.d[i]) * g)
            e = float(param.e[i])
            delta = apply_modifiers(q, w, cfg.modifiers, n, _layer_kind(l, cfg.L),
                                    eta=cfg.lr, c=float(param.c[i]), layer=l,
                                    clip_exponent=e if e != 0.0 else None)
            weights[i] = decay * w + delta if decay != 1.0 else w + delta
        cache = forward(weights, cfg.xi, mult, act)
    return FiniteTrace(n, trial, outputs, f0, kernels)


def _train_cell(args: Tuple[FiniteTrainConfig, int, int]) -> FiniteTrace:
    return train_trial(*args)


def train_finite_mlp(cfg: FiniteTrainConfig, threads: int = 1,
                     progress_callback: Optional[ProgressCallback] = None,
                     strict: bool = True) -> List[FiniteTrace]:
    """Train every (width, trial) cell of the config.

    Args:
        cfg: Training config
        threads: Worker processes; results do not depend on this
        progress_callback: Optional callback(done, total)
        strict: Raise Diverged on the first divergent cell instead of
            returning its truncated trace

    Returns:
        Traces ordered by width, then trial

    Raises:
        Diverged: If a cell diverges and strict is set
    """
    cells = [(cfg, n, trial) for n in cfg.widths for trial in range(cfg.trials)]
    traces: List[FiniteTrace] = []
    if threads > 1 and len(cells) > 1:
        with Pool(processes=min(threads, len(cells))) as pool:
            for trace in pool.imap(_train_cell, cells):
                traces.append(trace)
                if progress_callback:
                    progress_callback(len(traces), len(cells))
    else:
        for cell in cells:
            traces.append(_train_cell(cell))
            if progress_callback:
                progress_callback(len(traces), len(cells))
    if strict:
        for trace in traces:
            if trace.diverged_at is not None:
                raise Diverged(trace.diverged_at)
    return traces
