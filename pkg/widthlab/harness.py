"""Width sweeps, convergence rates and other end-to-end experiments.

Every experiment draws its dataset from the sweep seed, so all widths train
on the same inputs and targets as the matching limit run.
"""
import math
import time
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, stats

from widthlab.finite import InitDistribution, execute, sample_init
from widthlab.functions import get_activation
from widthlab.ketvm import DEFAULT_COPIES, DEFAULT_SAMPLES, limit_scalar
from widthlab.limits import DynamicsTrace, LimitConfig, mu_dynamics, nt_dynamics
from widthlab.mlp import FiniteTrace, FiniteTrainConfig, train_finite_mlp
from widthlab.optim import Modifiers, UpdateRule
from widthlab.param import AbcdParam, classify, preset
from widthlab.program import (
    Avg,
    MatMul,
    ProgramIR,
    ScalarDecl,
    backprop_transform,
    build_program,
    mlp_program,
    outer,
)
from widthlab.rng import make_rng
from widthlab.signals import MSESignal

MODES = ("nt", "mu")
MODE_PRESETS = {"nt": "NTP", "mu": "muP"}
MODE_REGIMES = {"nt": "operator_regime", "mu": "feature_learning"}

ProgressCallback = Callable[[int, int], None]


@dataclass(frozen=True)
class Dataset:
    """Inputs xi (d, N); the last n_test inputs are tracked but never trained on."""
    xi: np.ndarray
    targets: np.ndarray
    train_mask: np.ndarray

    @property
    def n_inputs(self) -> int:
        return self.xi.shape[1]

    def signal(self, batch_size: Optional[int] = None, seed: int = 0) -> MSESignal:
        return MSESignal(self.targets, train_mask=self.train_mask, batch_size=batch_size, seed=seed)


def make_dataset(input_dim: int = 10, n_train: int = 100, n_test: int = 4, seed: int = 0) -> Dataset:
    """Gaussian inputs with entries N(0, 1/d) and standard normal targets."""
    if input_dim < 1 or n_train < 1 or n_test < 0:
        raise ValueError("need input_dim >= 1, n_train >= 1 and n_test >= 0")
    rng = make_rng(seed, "dataset")
    N = n_train + n_test
    xi = rng.standard_normal((input_dim, N)) / math.sqrt(input_dim)
    targets = rng.standard_normal(N)
    mask = np.concatenate([np.ones(n_train), np.zeros(n_test)])
    return Dataset(xi, targets, mask)


@dataclass(frozen=True)
class SweepConfig:
    """Finite-vs-limit comparison; defaults follow the standard experiment protocol."""
    mode: str
    widths: Tuple[int, ...] = (64, 512, 4096)
    L: int = 2
    activation: str = "gelu"
    rule: UpdateRule = UpdateRule.adam(eps=1e-4)
    lr: float = 0.2
    steps: int = 8
    trials: int = 10
    input_dim: int = 10
    n_train: int = 100
    n_test: int = 4
    batch_size: Optional[int] = None
    samples: int = DEFAULT_SAMPLES
    copies: int = DEFAULT_COPIES
    seed: int = 0
    modifiers: Modifiers = Modifiers()
    param: Optional[AbcdParam] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {', '.join(MODES)}, got '{self.mode}'")
        widths = tuple(int(n) for n in self.widths)
        if not widths or any(b <= a for a, b in zip(widths, widths[1:])):
            raise ValueError("widths must be strictly increasing")
        object.__setattr__(self, "widths", widths)
        if self.param is None:
            object.__setattr__(self, "param", preset(MODE_PRESETS[self.mode], self.L))
        regime = classify(self.param).regime
        if regime != MODE_REGIMES[self.mode]:
            raise ValueError(f"{self.mode} mode needs a parametrization in the "
                             f"{MODE_REGIMES[self.mode]} regime, '{self.param.name}' is {regime}")

    def dataset(self) -> Dataset:
        return make_dataset(self.input_dim, self.n_train, self.n_test, self.seed)

    def finite_config(self, data: Dataset, steps: Optional[int] = None,
                      track_kernels: Tuple[int, ...] = ()) -> FiniteTrainConfig:
        return FiniteTrainConfig(
            L=self.L, widths=self.widths, xi=data.xi, param=self.param, rule=self.rule,
            signal=data.signal(self.batch_size, self.seed), lr=self.lr,
            steps=self.steps if steps is None else steps, trials=self.trials, seed=self.seed,
            activation=self.activation, modifiers=self.modifiers, track_kernels=track_kernels)

    def limit_config(self, data: Dataset) -> LimitConfig:
        return LimitConfig(
            L=self.L, xi=data.xi, rule=self.rule, signal=data.signal(self.batch_size, self.seed),
            lr=self.lr, steps=self.steps, samples=self.samples, seed=self.seed,
            copies=self.copies, activation=self.activation, modifiers=self.modifiers)


@dataclass
class WidthResult:
    """Trial statistics of one width against the limit trace."""
    width: int
    traces: List[FiniteTrace]
    mean: np.ndarray
    std: np.ndarray
    gap: np.ndarray
    diverged_at: Optional[int] = None


@dataclass(frozen=True)
class SlopeFit:
    """Least-squares slope of log error against log width."""
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    widths: Tuple[int, ...]
    errors: Tuple[float, ...]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "ci": [self.ci_low, self.ci_high],
            "widths": list(self.widths),
            "errors": list(self.errors),
        }


@dataclass(frozen=True)
class SignTest:
    """Cells where the largest width is closer to the limit than the smallest."""
    decreasing: int
    cells: int
    pvalue: float

    @property
    def fraction(self) -> Optional[float]:
        return self.decreasing / self.cells if self.cells else None


@dataclass
class SweepReport:
    mode: str
    config: SweepConfig
    limit: DynamicsTrace
    results: List[WidthResult]
    sign_test: SignTest
    slope: Optional[SlopeFit]
    runtime: float = 0.0

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(r.width for r in self.results)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "parametrization": self.config.param.to_dict(),
            "widths": list(self.widths),
            "steps": self.limit.steps,
            "trials": self.config.trials,
            "samples": self.config.samples,
            "seed": self.config.seed,
            "limit": {"outputs": self.limit.outputs.tolist(),
                      "stderr": None if self.limit.stderr is None else self.limit.stderr.tolist()},
            "results": [{
                "width": r.width,
                "mean": _nan_to_none(r.mean),
                "std": _nan_to_none(r.std),
                "gap": _nan_to_none(r.gap),
                "mean_gap": _finite_mean(r.gap[1:]),
                "diverged_at": r.diverged_at,
            } for r in self.results],
            "sign_test": {"decreasing": self.sign_test.decreasing, "cells": self.sign_test.cells,
                          "fraction": self.sign_test.fraction, "pvalue": self.sign_test.pvalue},
            "slope": None if self.slope is None else self.slope.to_dict(),
        }


def _nan_to_none(a: np.ndarray) -> List:
    return [[None if not math.isfinite(v) else float(v) for v in row] for row in np.atleast_2d(a)]


def _finite_mean(a: np.ndarray) -> Optional[float]:
    finite = a[np.isfinite(a)]
    return float(finite.mean()) if finite.size else None


def _trial_statistics(traces: List[FiniteTrace], steps: int, N: int):
    stacked = np.full((len(traces), steps + 1, N), np.nan)
    for i, trace in enumerate(traces):
        stacked[i, :trace.outputs.shape[0]] = trace.outputs
    complete = np.all(np.isfinite(stacked), axis=0)
    mean = np.where(complete, np.mean(stacked, axis=0), np.nan)
    std = np.where(complete, np.std(stacked, axis=0), np.nan)
    return mean, std


def gap_sign_test(near: np.ndarray, far: np.ndarray) -> SignTest:
    """One-sided binomial test that gaps shrink from ``far`` (small width) to ``near``."""
    ok = np.isfinite(near) & np.isfinite(far) & ((near > 0) | (far > 0))
    cells = int(ok.sum())
    decreasing = int(np.sum(near[ok] < far[ok]))
    if cells == 0:
        return SignTest(0, 0, 1.0)
    pvalue = float(stats.binomtest(decreasing, cells, 0.5, alternative="greater").pvalue)
    return SignTest(decreasing, cells, pvalue)


def width_sweep(cfg: SweepConfig, threads: int = 1,
                progress_callback: Optional[ProgressCallback] = None) -> SweepReport:
    """Train finite networks over widths and compare to the limit dynamics.

    Divergent widths stay in the report with ``diverged_at`` set.

    Args:
        cfg: Sweep config
        threads: Worker processes for the finite runs
        progress_callback: Optional callback(done, total) over finite cells
    """
    started = time.monotonic()
    data = cfg.dataset()
    traces = train_finite_mlp(cfg.finite_config(data), threads=threads,
                              progress_callback=progress_callback, strict=False)
    limit_cfg = cfg.limit_config(data)
    limit = nt_dynamics(limit_cfg) if cfg.mode == "nt" else mu_dynamics(limit_cfg)

    results = []
    N = data.n_inputs
    for width in cfg.widths:
        cell = [t for t in traces if t.width == width]
        mean, std = _trial_statistics(cell, cfg.steps, N)
        diverged = [t.diverged_at for t in cell if t.diverged_at is not None]
        results.append(WidthResult(width, cell, mean, std, np.abs(mean - limit.outputs),
                                   min(diverged) if diverged else None))

    sign = gap_sign_test(results[-1].gap[1:], results[0].gap[1:])
    slope = None
    errors = [_finite_mean(r.gap[1:]) for r in results]
    if len(cfg.widths) >= 3 and all(e is not None and e > 0 for e in errors):
        try:
            slope = convergence_slope(list(zip(cfg.widths, errors)))
        except ValueError:
            slope = None
    return SweepReport(cfg.mode, cfg, limit, results, sign, slope, time.monotonic() - started)


def convergence_slope(pairs: Sequence[Tuple[int, float]],
                      trial_errors: Optional[Sequence[Sequence[float]]] = None,
                      resamples: int = 1000, seed: int = 0) -> SlopeFit:
    """Fit log(error) = slope * log(n) + intercept.

    With per-trial errors (one row per width) the 95% interval comes from
    resampling trials; otherwise from the regression standard error.

    Raises:
        ValueError: With fewer than 3 widths, a span under 2 octaves, or
            non-positive errors
    """
    if len(pairs) < 3:
        raise ValueError(f"need at least 3 widths, got {len(pairs)}")
    widths = np.array([n for n, _ in pairs], dtype=float)
    errors = np.array([e for _, e in pairs], dtype=float)
    if widths.max() / widths.min() < 4:
        raise ValueError("widths must span at least 2 octaves")
    if np.any(errors <= 0) or not np.all(np.isfinite(errors)):
        raise ValueError("errors must be positive and finite")
    log_n = np.log(widths)
    fit = stats.linregress(log_n, np.log(errors))
    if trial_errors is not None:
        rows = [np.asarray(row, dtype=float) for row in trial_errors]
        rng = make_rng(seed, "bootstrap")
        slopes = []
        for _ in range(resamples):
            means = [row[rng.integers(0, row.size, row.size)].mean() for row in rows]
            if min(means) > 0:
                slopes.append(np.polyfit(log_n, np.log(means), 1)[0])
        low, high = np.percentile(slopes, [2.5, 97.5]) if slopes else (fit.slope, fit.slope)
    else:
        half = stats.t.ppf(0.975, len(pairs) - 2) * fit.stderr
        low, high = fit.slope - half, fit.slope + half
    return SlopeFit(float(fit.slope), float(fit.intercept), float(low), float(high),
                    tuple(int(n) for n in widths), tuple(float(e) for e in errors))


# ---------------------------------------------------------------------------
# Scalar convergence


def gram_program() -> ProgramIR:
    """c = <x, W^T W x>/n; its limit is 1 through the dot part of W^T W x."""
    return build_program({
        "matrices": ["W"],
        "vectors": ["x"],
        "instructions": [
            MatMul(matrix="W", src="x", dst="z"),
            MatMul(matrix="W", src="z", dst="u", transpose=True),
            outer("xu", "prod:2", ["x", "u"]),
            Avg(src="xu", dst="c"),
        ],
        "outputs": ["u"],
    })


def nngp_program(L: int, activation: str = "gelu") -> ProgramIR:
    """k = |x^L|^2 / n for a unit scalar input."""
    instructions = [outer("h1", "lincomb:1", ["w1"], scalars=["xi"]),
                    outer("x1", f"act:{activation}", ["h1"])]
    for l in range(2, L + 1):
        instructions.append(MatMul(matrix=f"W{l}", src=f"x{l - 1}", dst=f"h{l}"))
        instructions.append(outer(f"x{l}", f"act:{activation}", [f"h{l}"]))
    instructions += [outer("sq", "prod:2", [f"x{L}", f"x{L}"]), Avg(src="sq", dst="k")]
    return build_program({
        "matrices": [f"W{l}" for l in range(2, L + 1)],
        "vectors": ["w1"],
        "scalars": [ScalarDecl("xi", 1.0)],
        "instructions": instructions,
        "outputs": ["sq"],
    })


def nngp_limit(L: int, activation: str = "gelu") -> float:
    """E phi(h^L)^2 by 1-D Gaussian quadrature of the variance recursion."""
    act = get_activation(activation)

    def second_moment(q: float) -> float:
        value, _ = integrate.quad(
            lambda z: act.fn(np.sqrt(q) * z) ** 2 * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi),
            -np.inf, np.inf)
        return value

    q = 1.0
    for _ in range(L - 1):
        q = second_moment(q)
    return second_moment(q)


@dataclass
class RateReport:
    """Finite scalar errors over widths against a limit value."""
    name: str
    limit: float
    widths: Tuple[int, ...]
    values: np.ndarray
    errors: np.ndarray
    fit: SlopeFit
    universality: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scalar": self.name,
            "limit": self.limit,
            "widths": list(self.widths),
            "mean_error": self.errors.mean(axis=1).tolist(),
            "fit": self.fit.to_dict(),
            "universality": self.universality,
        }


def _scalar_cell(args) -> float:
    p, name, n, dist, seed, trial = args
    return execute(p, sample_init(p, n, InitDistribution(dist), seed, trial)).scalars[name]


def _scalar_grid(p: ProgramIR, name: str, widths: Sequence[int], trials: int, dist: str,
                 seed: int, threads: int, progress_callback: Optional[ProgressCallback]) -> np.ndarray:
    cells = [(p, name, n, dist, seed, trial) for n in widths for trial in range(trials)]
    values: List[float] = []
    if threads > 1 and len(cells) > 1:
        with Pool(processes=min(threads, len(cells))) as pool:
            for value in pool.imap(_scalar_cell, cells):
                values.append(value)
                if progress_callback:
                    progress_callback(len(values), len(cells))
    else:
        for cell in cells:
            values.append(_scalar_cell(cell))
            if progress_callback:
                progress_callback(len(values), len(cells))
    return np.array(values).reshape(len(widths), trials)


def master_theorem_check(p: ProgramIR, name: str, limit: Optional[float] = None,
                         widths: Sequence[int] = tuple(2 ** k for k in range(6, 13)),
                         trials: int = 32, seed: int = 0, samples: int = DEFAULT_SAMPLES,
                         universality: bool = True, threads: int = 1,
                         progress_callback: Optional[ProgressCallback] = None) -> RateReport:
    """Measure how fast a finite-width scalar approaches its limit.

    Args:
        p: Program
        name: Scalar to track
        limit: Known limit value; estimated with run_limit when None
        widths: Widths, at least 3 spanning 2 octaves
        trials: Independent initializations per width
        seed: Seed
        samples: Ket samples when the limit is estimated
        universality: Also compare gaussian and rademacher initializations
            at the largest width
        threads: Worker processes
        progress_callback: Optional callback(done, total)
    """
    if limit is None:
        limit = limit_scalar(p, name, samples, seed)
    values = _scalar_grid(p, name, widths, trials, "gaussian", seed, threads, progress_callback)
    errors = np.abs(values - limit)
    fit = convergence_slope(list(zip(widths, errors.mean(axis=1))), errors, seed=seed)
    report = RateReport(name, float(limit), tuple(widths), values, errors, fit)
    if universality:
        other = _scalar_grid(p, name, widths[-1:], trials, "rademacher", seed, threads, None)[0]
        gauss = values[-1]
        diff = float(gauss.mean() - other.mean())
        sigma = math.sqrt(gauss.var(ddof=1) / trials + other.var(ddof=1) / trials)
        report.universality = {
            "width": int(widths[-1]),
            "gaussian_mean": float(gauss.mean()),
            "rademacher_mean": float(other.mean()),
            "difference": diff,
            "sigma": sigma,
            "agree": abs(diff) <= 3 * sigma,
        }
    return report


# ---------------------------------------------------------------------------
# Feature-kernel drift


@dataclass
class DriftReport:
    """||K_1 - K_0||_F of one layer's feature kernel over widths."""
    param: str
    layer: int
    widths: Tuple[int, ...]
    drift: np.ndarray
    fit: SlopeFit

    def to_dict(self) -> Dict[str, Any]:
        return {
            "parametrization": self.param,
            "layer": self.layer,
            "widths": list(self.widths),
            "mean_drift": self.drift.mean(axis=1).tolist(),
            "fit": self.fit.to_dict(),
        }


def kernel_drift_sweep(cfg: SweepConfig, layer: Optional[int] = None, threads: int = 1,
                       progress_callback: Optional[ProgressCallback] = None) -> DriftReport:
    """One training step per (width, trial); drift slope near 0 means feature learning."""
    layer = cfg.L if layer is None else layer
    data = cfg.dataset()
    traces = train_finite_mlp(cfg.finite_config(data, steps=1, track_kernels=(layer,)),
                              threads=threads, progress_callback=progress_callback)
    drift = np.zeros((len(cfg.widths), cfg.trials))
    for trace in traces:
        k = trace.kernels[layer]
        drift[cfg.widths.index(trace.width), trace.trial] = np.linalg.norm(k[1] - k[0])
    fit = convergence_slope(list(zip(cfg.widths, drift.mean(axis=1))), drift, seed=cfg.seed)
    return DriftReport(cfg.param.name, layer, cfg.widths, drift, fit)


# ---------------------------------------------------------------------------
# Gradient cross-check


def _sum_output(p: ProgramIR, a, output: str) -> float:
    return float(np.sum(execute(p, a).vectors[output]))


def backprop_check(L: int = 2, width: int = 64, input_dim: int = 2, activation: str = "gelu",
                   seed: int = 0, h: float = 1e-5,
                   program: Optional[ProgramIR] = None) -> Dict[str, float]:
    """Compare backprop_transform gradients to central differences of the summed output.

    Checks an MLP program built from (L, input_dim, activation) unless
    ``program`` is given; its first output is differentiated.

    Returns:
        Normwise relative error per initial vector and matrix
    """
    if program is None:
        xi = make_rng(seed, "backprop-input").standard_normal(input_dim)
        p = mlp_program(L, input_dim, activation, xi)
    else:
        p = program
    output = p.outputs[0]
    values = execute(backprop_transform(p, output), sample_init(p, width, seed=seed))
    a = sample_init(p, width, seed=seed)

    analytic: Dict[str, np.ndarray] = {name: values.grad(output, name) for name in p.vectors}
    for name in p.matrices:
        g = np.zeros((width, width))
        for ins in p.instructions:
            if isinstance(ins, MatMul) and ins.matrix == name:
                dz, y = values.grad(output, ins.dst), values.vectors[ins.src]
                g += np.outer(y, dz) if ins.transpose else np.outer(dz, y)
        analytic[name] = g

    errors = {}
    for name, g in analytic.items():
        store = a.vectors if name in a.vectors else a.matrices
        base = store[name]
        numeric = np.zeros_like(base)
        for index in np.ndindex(base.shape):
            saved = base[index]
            base[index] = saved + h
            up = _sum_output(p, a, output)
            base[index] = saved - h
            down = _sum_output(p, a, output)
            base[index] = saved
            numeric[index] = (up - down) / (2 * h)
        scale = max(float(np.linalg.norm(numeric)), 1e-300)
        errors[name] = float(np.linalg.norm(g - numeric)) / scale
    return errors
