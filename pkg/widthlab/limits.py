"""Infinite-width training dynamics of MLPs, simulated with Monte Carlo kets.

Two engines:

* Neural tangent (operator regime): the kets are fixed at initialization and
  the function evolves by f_{t+1} = f_t - eta K_Q(chi_0, ..., chi_t).
* mu-limit (feature learning): input and output weights are kets that move
  every step, hidden weights are initial operators plus a growing sum of
  nonlinear outer products of stored (dh, chi, x) triples.

Both follow the MLP of ``widthlab.mlp``: layer 1 reads the fixed d-dimensional
inputs, layers 2..L are width x width, layer L+1 is the scalar readout.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from widthlab.functions import Activation, FunctionRef, get_activation
from widthlab.ketvm import (
    DEFAULT_COPIES,
    DEFAULT_SAMPLES,
    HatRegistry,
    InitialOperator,
    apply_outer,
    bracket,
)
from widthlab.mlp import FiniteTrace
from widthlab.optim import Modifiers, UpdateRule, limit_normalizer, q_eval, sample_norm
from widthlab.rng import make_rng
from widthlab.signals import MSESignal

F0_MODES = ("zero", "gaussian")

ProgressCallback = Callable[[int, int], None]


@dataclass(frozen=True)
class LimitConfig:
    """Everything that determines an infinite-width dynamics run.

    ``exact_linear`` lets the neural tangent engine use the closed-form kernel
    when every layer trains with plain SGD and no normalization.
    """
    L: int
    xi: np.ndarray = field(compare=False)
    rule: UpdateRule
    signal: MSESignal
    lr: float
    steps: int
    samples: int = DEFAULT_SAMPLES
    seed: int = 0
    copies: int = DEFAULT_COPIES
    activation: str = "gelu"
    modifiers: Modifiers = Modifiers()
    subtract_f0: bool = True
    f0_mode: str = "zero"
    track_kernels: Tuple[int, ...] = ()
    exact_linear: bool = True

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        if xi.ndim != 2 or xi.shape[1] < 1:
            raise ValueError("xi must be a (d, N) array with N >= 1")
        object.__setattr__(self, "xi", xi)
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")
        if self.lr < 0 or self.steps < 0:
            raise ValueError("lr and steps must be >= 0")
        if self.samples < 2 or self.copies < 1:
            raise ValueError("samples must be >= 2 and copies >= 1")
        if self.f0_mode not in F0_MODES:
            raise ValueError(f"f0_mode must be one of {', '.join(F0_MODES)}")
        if self.f0_mode == "gaussian" and self.modifiers.weight_decay > 0:
            raise ValueError("f0_mode 'gaussian' is only supported without weight decay")
        if self.signal.size != xi.shape[1]:
            raise ValueError(f"error signal has {self.signal.size} targets for {xi.shape[1]} inputs")
        for l in self.track_kernels:
            if not 1 <= l <= self.L:
                raise ValueError(f"kernel layer {l} out of range 1..{self.L}")
        get_activation(self.activation, smooth=True)

    @property
    def n_inputs(self) -> int:
        return self.xi.shape[1]

    @property
    def decay(self) -> float:
        return 1.0 - self.modifiers.weight_decay


@dataclass
class DynamicsTrace:
    """Limit outputs (T+1, N), centered when f0 is subtracted."""
    outputs: np.ndarray
    f0: np.ndarray
    chis: List[np.ndarray] = field(default_factory=list)
    kernels: Dict[int, np.ndarray] = field(default_factory=dict)
    stderr: Optional[np.ndarray] = None

    @property
    def steps(self) -> int:
        return self.outputs.shape[0] - 1


def feature_kernel(trace: Union[DynamicsTrace, FiniteTrace], layer: int) -> np.ndarray:
    """Per-step feature kernels (T+1, N, N) of a layer tracked during a run.

    Raises:
        ValueError: If the run did not track the layer
    """
    if layer not in trace.kernels:
        tracked = ", ".join(str(l) for l in sorted(trace.kernels)) or "none"
        raise ValueError(f"layer {layer} out of range of tracked kernels (tracked: {tracked})")
    return trace.kernels[layer]


def _history(rule: UpdateRule, layer: int, s: int) -> Tuple[FunctionRef, List[int]]:
    """Q^l_s and the steps whose gradients it reads."""
    if rule.for_layer(layer).memoryless:
        return rule.as_function(layer, 0), [s]
    return rule.as_function(layer, s), list(range(s + 1))


def _signal_input(f: np.ndarray, f0: np.ndarray, subtract: bool) -> np.ndarray:
    return f - f0 if subtract else f


# ---------------------------------------------------------------------------
# Neural tangent limit


@dataclass
class NTKets:
    """Kets of the neural tangent limit.

    Lists are indexed [layer - 1][time]. Without weight decay every layer holds
    one time-independent entry; with decay lambda, entry s belongs to the
    network whose initial weights are scaled by (1 - lambda)^s.
    """
    xi: np.ndarray
    activation: str
    h: List[List[np.ndarray]]
    x: List[List[np.ndarray]]
    dh: List[List[np.ndarray]]
    dx: List[List[np.ndarray]]
    decay: float = 1.0

    @property
    def L(self) -> int:
        return len(self.h)

    @property
    def m(self) -> int:
        return self.h[0][0].shape[0]

    @property
    def n_inputs(self) -> int:
        return self.xi.shape[1]

    @property
    def time_indexed(self) -> bool:
        return len(self.h[0]) > 1

    def at(self, s: int) -> int:
        """Index of the kets of step s."""
        if not self.time_indexed:
            return 0
        if s >= len(self.h[0]):
            raise ValueError(f"kets cover steps 0..{len(self.h[0]) - 1}, asked for {s}")
        return s


def nt_static_kets(L: int, activation: str, xi: np.ndarray, m: int = DEFAULT_SAMPLES,
                   weight_decay: float = 0.0, steps: int = 0, seed: int = 0) -> NTKets:
    """Sample the forward and backward kets of the neural tangent limit.

    Forward kets are layerwise Gaussian with covariance given by the previous
    layer's kernel (xi^T xi at layer 1). Backward kets are independent of the
    forward ones; dx^L is one standard normal shared by all inputs.

    Args:
        L: Hidden layers
        activation: Smooth activation name
        xi: Inputs (d, N)
        m: Samples per ket
        weight_decay: lambda; > 0 builds kets for steps 0..steps
        steps: Number of training steps covered when weight_decay > 0
        seed: Seed

    Raises:
        CovarianceError: If a layer covariance is not PSD
    """
    if not 0.0 <= weight_decay < 1.0:
        raise ValueError(f"weight_decay must be in [0, 1), got {weight_decay}")
    act = get_activation(activation, smooth=True)
    xi = np.asarray(xi, dtype=float)
    N = xi.shape[1]
    decay = 1.0 - weight_decay
    times = steps + 1 if weight_decay > 0 else 1
    scales = decay ** np.arange(times, dtype=float)
    rng = make_rng(seed, "nt-kets")

    w1 = rng.standard_normal((m, xi.shape[0]))
    z = rng.standard_normal(m)
    h1 = w1 @ xi
    h = [[scale * h1 for scale in scales]]
    x = [[act.fn(v) for v in h[0]]]
    for _ in range(1, L):
        prev = np.concatenate(x[-1], axis=1)
        hats = HatRegistry().generate(prev, rng)
        h.append([scales[s] * hats[:, s * N:(s + 1) * N] for s in range(times)])
        x.append([act.fn(v) for v in h[-1]])

    dx: List[List[np.ndarray]] = [[] for _ in range(L)]
    dh: List[List[np.ndarray]] = [[] for _ in range(L)]
    dx[L - 1] = [np.repeat(scale * z[:, None], N, axis=1) for scale in scales]
    for l in range(L - 1, -1, -1):
        dh[l] = [act.grad(hv) * dv for hv, dv in zip(h[l], dx[l])]
        if l > 0:
            hats = HatRegistry().generate(np.concatenate(dh[l], axis=1), rng)
            dx[l - 1] = [scales[s] * hats[:, s * N:(s + 1) * N] for s in range(times)]
    return NTKets(xi, activation, h, x, dh, dx, decay)


def _nt_kernel(kets: NTKets, t_eval: int, s: int) -> np.ndarray:
    """Sum over layers of <dh_t|dh_s> * <x_s|x_t>; entry (a, b) pairs input a at t with b at s."""
    te, ts = kets.at(t_eval), kets.at(s)
    K = bracket(kets.dh[0][te], kets.dh[0][ts]) * (kets.xi.T @ kets.xi)
    for l in range(1, kets.L):
        K += bracket(kets.dh[l][te], kets.dh[l][ts]) * bracket(kets.x[l - 1][te], kets.x[l - 1][ts])
    K += bracket(kets.x[-1][te], kets.x[-1][ts])
    return K


def ntk_matrix(kets: NTKets) -> np.ndarray:
    """Closed-form SGD kernel K = sum_l <dh^l|dh^l> * <x^{l-1}|x^{l-1}>."""
    return _nt_kernel(kets, 0, 0)


class _NTTerms:
    """Monte Carlo evaluation of the per-step update terms of the neural tangent limit."""

    def __init__(self, kets: NTKets, rule: UpdateRule, copies: int, seed: int,
                 modifiers: Modifiers):
        if modifiers.normalizes and modifiers.norm_source != "update":
            raise ValueError("the neural tangent limit only normalizes by the update norm")
        self.kets = kets
        self.rule = rule
        self.copies = copies
        self.seed = seed
        self.modifiers = modifiers
        self._norms: Dict[Tuple[int, int], float] = {}

    def _normalizer(self, s: int, layer: int, moment: float) -> float:
        if not self.modifiers.normalizes:
            return 1.0
        key = (s, layer)
        if key not in self._norms:
            self._norms[key] = limit_normalizer(float(np.sqrt(moment)), self.modifiers, layer)
        return self._norms[key]

    def contributions(self, chis: Sequence[np.ndarray], s: int, t_eval: int) -> np.ndarray:
        """Per-sample contributions (m, N) whose mean is the update term of step s at t_eval."""
        kets = self.kets
        L = kets.L
        te = kets.at(t_eval)
        total = np.zeros((kets.m, kets.n_inputs))

        fn, hist = _history(self.rule, 1, s)
        chi = np.stack([chis[u] for u in hist])
        X = np.stack([kets.dh[0][kets.at(u)] for u in hist])
        values = np.zeros_like(total)
        moment = 0.0
        for j in range(kets.xi.shape[0]):
            q = fn([np.einsum("hb,hsb->sh", chi * kets.xi[j][None, :], X)])
            moment += float(np.mean(q * q))
            values += q[:, None] * kets.xi[j][None, :]
        total += kets.dh[0][te] * values / self._normalizer(s, 1, moment)

        for l in range(2, L + 1):
            fn, hist = _history(self.rule, l, s)
            chi = np.stack([chis[u] for u in hist])
            X = np.stack([kets.dh[l - 1][kets.at(u)] for u in hist])
            Y = np.stack([kets.x[l - 2][kets.at(u)] for u in hist])
            R, moment = apply_outer(fn, X, chi, Y, kets.x[l - 2][te], self.copies,
                                    make_rng(self.seed, "nt-outer", s, l), return_moment=True)
            total += kets.dh[l - 1][te] * R / self._normalizer(s, l, moment)

        fn, hist = _history(self.rule, L + 1, s)
        chi = np.stack([chis[u] for u in hist])
        X = np.stack([kets.x[L - 1][kets.at(u)] for u in hist])
        q = fn([np.einsum("hb,hsb->sh", chi, X)])
        total += q[:, None] * kets.x[L - 1][te] / self._normalizer(s, L + 1, float(np.mean(q * q)))
        return total


def nt_operator(kets: NTKets, rule: UpdateRule, chi_history: Sequence[np.ndarray],
                copies: int = DEFAULT_COPIES, seed: int = 0,
                modifiers: Modifiers = Modifiers(), return_stderr: bool = False):
    """Evaluate the neural tangent Q-operator on an error-signal history.

    Returns Diag sum_l <dh^l| Q^l_t(|dh^l>_{chi_<=t} <x^{l-1}|) |x^{l-1}>, where
    layer 1 reads the inputs xi and layer L+1 has dh = 1.

    Args:
        kets: Neural tangent kets
        rule: Update rule; memoryless rules read only the last signal
        chi_history: chi_0, ..., chi_t
        copies: iid-copy permutations
        seed: Seed of the copy permutations
        modifiers: Normalization/clipping (weight decay is ignored here)
        return_stderr: Also return the Monte Carlo standard error

    Raises:
        ValueError: If a signal does not have one entry per input
    """
    chis = [np.asarray(chi, dtype=float) for chi in chi_history]
    if not chis:
        raise ValueError("chi_history must hold at least one signal")
    for chi in chis:
        if chi.shape != (kets.n_inputs,):
            raise ValueError(f"signal shape {chi.shape} does not match {kets.n_inputs} inputs")
    t = len(chis) - 1
    total = _NTTerms(kets, rule, copies, seed, modifiers).contributions(chis, t, t)
    value = total.mean(axis=0)
    if return_stderr:
        return value, total.std(axis=0) / np.sqrt(kets.m)
    return value


def _linear_rule(rule: UpdateRule, L: int, modifiers: Modifiers) -> bool:
    return (not modifiers.normalizes
            and all(rule.for_layer(l).kind == "sgd" for l in range(1, L + 2)))


def nt_dynamics(cfg: LimitConfig, kets: Optional[NTKets] = None,
                progress_callback: Optional[ProgressCallback] = None) -> DynamicsTrace:
    """Run the neural tangent limit dynamics.

    With weight decay lambda,
    f_{t+1} = f_0 - eta sum_{s<=t} (1 - lambda)^{t-s} term(t+1, s) where
    term(t, s) is the step-s update seen through the kets of step t; without
    decay this reduces to f_{t+1} = f_t - eta term(s=t).

    Args:
        cfg: Limit config
        kets: Precomputed kets (sampled from cfg when None)
        progress_callback: Optional callback(step, total)
    """
    cfg.rule.require_smooth()
    lam = cfg.modifiers.weight_decay
    if kets is None:
        kets = nt_static_kets(cfg.L, cfg.activation, cfg.xi, cfg.samples, lam, cfg.steps, cfg.seed)
    T, N = cfg.steps, cfg.n_inputs
    linear = cfg.exact_linear and _linear_rule(cfg.rule, cfg.L, cfg.modifiers)
    terms = _NTTerms(kets, cfg.rule, cfg.copies, cfg.seed, cfg.modifiers)

    if cfg.f0_mode == "gaussian":
        cov = bracket(kets.x[-1][0], kets.x[-1][0])
        f0 = make_rng(cfg.seed, "nt-f0").multivariate_normal(np.zeros(N), cov, method="eigh")
    else:
        f0 = np.zeros(N)

    f = np.zeros((T + 1, N))
    stderr = np.zeros((T + 1, N))
    f[0] = f0
    chis: List[np.ndarray] = []
    cache: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    def term(t_eval: int, s: int) -> Tuple[np.ndarray, np.ndarray]:
        key = s if not kets.time_indexed else None
        if key is not None and key in cache:
            return cache[key]
        if linear:
            out = (_nt_kernel(kets, t_eval, s) @ chis[s], np.zeros(N))
        else:
            total = terms.contributions(chis, s, t_eval)
            out = (total.mean(axis=0), total.std(axis=0) / np.sqrt(kets.m))
        if key is not None:
            cache[key] = out
        return out

    for t in range(T):
        chis.append(cfg.signal(t, _signal_input(f[t], f0, cfg.subtract_f0)))
        delta = np.zeros(N)
        var = np.zeros(N)
        for s in range(t + 1):
            value, err = term(t + 1, s)
            weight = (1.0 - lam) ** (t - s)
            delta += weight * value
            var += (weight * err) ** 2
        f[t + 1] = f0 - cfg.lr * delta
        stderr[t + 1] = cfg.lr * np.sqrt(var)
        if progress_callback:
            progress_callback(t + 1, T)

    kernels = {l: np.stack([bracket(kets.x[l - 1][kets.at(t)], kets.x[l - 1][kets.at(t)])
                            for t in range(T + 1)])
               for l in cfg.track_kernels}
    outputs = f - f0 if cfg.subtract_f0 else f
    return DynamicsTrace(outputs, f0, chis, kernels, stderr)


# ---------------------------------------------------------------------------
# mu-limit


@dataclass
class _StoredUpdate:
    """Step-s update of a hidden operator: Q_s over (dh_<=s, chi_<=s, x_<=s)."""
    step: int
    fn: FunctionRef
    hist: List[int]
    nu: Optional[float] = None


@dataclass
class MuState:
    """Kets of a mu-limit run.

    ``w1`` holds the (m, d) input-weight kets and ``w_out`` the readout kets.
    Per hidden layer l (2..L): the initial operator, the stored dh^l_s and
    x^{l-1}_s kets, and one stored update per finished step.
    """
    w1: np.ndarray
    w_out: np.ndarray
    operators: Dict[int, InitialOperator] = field(default_factory=dict)
    dh: Dict[int, List[np.ndarray]] = field(default_factory=dict)
    x_in: Dict[int, List[np.ndarray]] = field(default_factory=dict)
    updates: Dict[int, List[_StoredUpdate]] = field(default_factory=dict)
    g1: List[np.ndarray] = field(default_factory=list)
    g_out: List[np.ndarray] = field(default_factory=list)
    chis: List[np.ndarray] = field(default_factory=list)


def _init_ends(cfg: LimitConfig) -> Tuple[np.ndarray, np.ndarray]:
    rng = make_rng(cfg.seed, "mu-init")
    w1 = rng.standard_normal((cfg.samples, cfg.xi.shape[0]))
    w_out = rng.standard_normal(cfg.samples)
    return w1, w_out


def _readout(w_out: np.ndarray, xL: np.ndarray) -> np.ndarray:
    """Per-sample readout terms (m, N); their mean is f."""
    return w_out[:, None] * xL


def _readout_stats(terms: np.ndarray,
                   base: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Readout mean and its Monte Carlo standard error, measured against base terms if given."""
    spread = terms - base if base is not None else terms
    return terms.mean(axis=0), spread.std(axis=0) / np.sqrt(terms.shape[0])


def _vector_update(cfg: LimitConfig, layer: int, t: int, history: List[np.ndarray],
                   weight: np.ndarray) -> np.ndarray:
    """New weight kets (1 - lambda) w - eta Q_t / nu for the input or readout layer."""
    rule = cfg.rule.for_layer(layer)
    hist = history[-1:] if rule.memoryless else history
    q = q_eval(rule, layer, 0 if rule.memoryless else t, np.stack(hist))
    nu = limit_normalizer(sample_norm(q), cfg.modifiers, layer, weight_norm=sample_norm(weight))
    return cfg.decay * weight - (cfg.lr / nu) * q


def _finish_step(cfg: LimitConfig, state: MuState, t: int, act: Activation, h1: np.ndarray,
                 dx1: np.ndarray, xL: np.ndarray, chi: np.ndarray):
    """Input and readout updates shared by the shallow and deep engines."""
    dh1 = act.grad(h1) * dx1
    state.g1.append((dh1 * chi[None, :]) @ cfg.xi.T)
    state.g_out.append(xL @ chi)
    w1 = _vector_update(cfg, 1, t, state.g1, state.w1)
    w_out = _vector_update(cfg, cfg.L + 1, t, state.g_out, state.w_out)
    state.w1, state.w_out = w1, w_out


def _check_mu(cfg: LimitConfig):
    cfg.rule.require_smooth()
    if cfg.f0_mode != "zero":
        raise ValueError("the mu-limit starts from f0 = 0 (f0_mode 'zero')")


def mu_dynamics_shallow(cfg: LimitConfig,
                        progress_callback: Optional[ProgressCallback] = None) -> DynamicsTrace:
    """mu-limit of the one-hidden-layer network f = <v | phi(u xi)>.

    |u_t> holds d-dimensional rows and |v_t> scalars; each step moves both by
    -eta Q_t of their gradient history.

    Raises:
        ValueError: If cfg.L != 1
    """
    if cfg.L != 1:
        raise ValueError(f"the shallow engine needs L=1, got L={cfg.L}")
    _check_mu(cfg)
    act = get_activation(cfg.activation, smooth=True)
    u, v = _init_ends(cfg)
    state = MuState(u, v)
    T, N = cfg.steps, cfg.n_inputs
    f = np.zeros((T + 1, N))
    stderr = np.zeros((T + 1, N))
    kernels = {1: np.zeros((T + 1, N, N))} if cfg.track_kernels else {}
    for t in range(T + 1):
        h = state.w1 @ cfg.xi
        x = act.fn(h)
        terms = _readout(state.w_out, x)
        if t == 0:
            base = terms if cfg.subtract_f0 else None
        f[t], stderr[t] = _readout_stats(terms, base)
        if kernels:
            kernels[1][t] = bracket(x, x)
        if t == T:
            break
        chi = cfg.signal(t, _signal_input(f[t], f[0], cfg.subtract_f0))
        state.chis.append(chi)
        dx = np.repeat(state.w_out[:, None], N, axis=1)
        _finish_step(cfg, state, t, act, h, dx, x, chi)
        if progress_callback:
            progress_callback(t + 1, T)
    outputs = f - f[0] if cfg.subtract_f0 else f
    return DynamicsTrace(outputs, f[0].copy(), state.chis, kernels, stderr)


def _apply_updates(cfg: LimitConfig, state: MuState, layer: int, t: int, z: np.ndarray,
                   transpose: bool) -> np.ndarray:
    """-eta sum_{s<t} (1 - lambda)^{t-1-s} Q_s(...)/nu_s applied to z (forward or transposed)."""
    out = np.zeros_like(z)
    for u in state.updates[layer]:
        dh = np.stack([state.dh[layer][k] for k in u.hist])
        xs = np.stack([state.x_in[layer][k] for k in u.hist])
        chi = np.stack([state.chis[k] for k in u.hist])
        X, Y = (xs, dh) if transpose else (dh, xs)
        rng = make_rng(cfg.seed, "mu-outer", t, layer, u.step, int(transpose))
        R, moment = apply_outer(u.fn, X, chi, Y, z, cfg.copies, rng, return_moment=True)
        if u.nu is None:
            u.nu = (limit_normalizer(float(np.sqrt(moment)), cfg.modifiers, layer,
                                     weight_norm=cfg.decay ** u.step)
                    if cfg.modifiers.normalizes else 1.0)
        out -= (cfg.lr * cfg.decay ** (t - 1 - u.step) / u.nu) * R
    return out


def mu_dynamics_deep(cfg: LimitConfig,
                     progress_callback: Optional[ProgressCallback] = None) -> DynamicsTrace:
    """mu-limit of an L-hidden-layer MLP.

    Hidden layer l acts on a ket x as
    (1 - lambda)^t W^l_0 x - eta sum_{s<t} (1 - lambda)^{t-1-s} Q_s(|dh_<=s>_chi <x_<=s|) x / nu_s
    with W^l_0 an initial operator (hat plus Stein-estimated dot part); the
    backward pass uses the transposed expression. With L=1 this is the shallow
    engine step for step.
    """
    _check_mu(cfg)
    act = get_activation(cfg.activation, smooth=True)
    L, T, N = cfg.L, cfg.steps, cfg.n_inputs
    w1, w_out = _init_ends(cfg)
    state = MuState(w1, w_out)
    for l in range(2, L + 1):
        state.operators[l] = InitialOperator(f"W{l}", make_rng(cfg.seed, "mu-operator", l))
        state.dh[l], state.x_in[l], state.updates[l] = [], [], []

    f = np.zeros((T + 1, N))
    stderr = np.zeros((T + 1, N))
    kernels = {l: np.zeros((T + 1, N, N)) for l in cfg.track_kernels}
    for t in range(T + 1):
        scale = cfg.decay ** t
        hs = [state.w1 @ cfg.xi]
        xs = [act.fn(hs[0])]
        for l in range(2, L + 1):
            z = scale * state.operators[l].apply(xs[-1])
            z = z + _apply_updates(cfg, state, l, t, xs[-1], transpose=False)
            hs.append(z)
            xs.append(act.fn(z))
        terms = _readout(state.w_out, xs[-1])
        if t == 0:
            base = terms if cfg.subtract_f0 else None
        f[t], stderr[t] = _readout_stats(terms, base)
        for l, k in kernels.items():
            k[t] = bracket(xs[l - 1], xs[l - 1])
        if t == T:
            break

        chi = cfg.signal(t, _signal_input(f[t], f[0], cfg.subtract_f0))
        state.chis.append(chi)
        dx = np.repeat(state.w_out[:, None], N, axis=1)
        for l in range(L, 1, -1):
            dh = act.grad(hs[l - 1]) * dx
            dx_prev = scale * state.operators[l].apply(dh, transpose=True)
            dx = dx_prev + _apply_updates(cfg, state, l, t, dh, transpose=True)
            state.dh[l].append(dh)
            state.x_in[l].append(xs[l - 2])
        for l in range(2, L + 1):
            fn, hist = _history(cfg.rule, l, t)
            state.updates[l].append(_StoredUpdate(t, fn, hist))
        _finish_step(cfg, state, t, act, hs[0], dx, xs[-1], chi)
        if progress_callback:
            progress_callback(t + 1, T)
    outputs = f - f[0] if cfg.subtract_f0 else f
    return DynamicsTrace(outputs, f[0].copy(), state.chis, kernels, stderr)


def mu_dynamics(cfg: LimitConfig,
                progress_callback: Optional[ProgressCallback] = None) -> DynamicsTrace:
    """Dispatch to the shallow engine for L=1 and the deep engine otherwise."""
    if cfg.L == 1:
        return mu_dynamics_shallow(cfg, progress_callback)
    return mu_dynamics_deep(cfg, progress_callback)
