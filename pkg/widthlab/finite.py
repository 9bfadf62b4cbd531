"""Finite-width program execution."""
import math
from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np

from widthlab.errors import NumericalOverflow
from widthlab.program import Avg, MatMul, OuterNonlin, ProgramIR, grad_name
from widthlab.rng import KeyPart, make_rng

DISTRIBUTIONS = ("gaussian", "rademacher", "uniform")

# evaluations of psi per chunk of an order >= 1 OuterNonlin
_CHUNK_ELEMENTS = 1 << 22


@dataclass(frozen=True)
class InitDistribution:
    """Matrix entry law, scaled to mean 0 and variance 1/n."""
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind not in DISTRIBUTIONS:
            raise ValueError(f"Unknown init distribution '{self.kind}' "
                             f"(known: {', '.join(DISTRIBUTIONS)})")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        scale = 1.0 / math.sqrt(n)
        if self.kind == "gaussian":
            return rng.standard_normal((n, n)) * scale
        if self.kind == "rademacher":
            return (2.0 * rng.integers(0, 2, size=(n, n)) - 1.0) * scale
        return rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), size=(n, n)) * scale


@dataclass
class Assignment:
    """Concrete initial data for a program at width n."""
    n: int
    matrices: Dict[str, np.ndarray]
    vectors: Dict[str, np.ndarray]
    scalars: Dict[str, float]
    key: Tuple[KeyPart, ...] = ()


@dataclass
class ProgramValues:
    """Every vector and scalar of an executed program."""
    n: int
    vectors: Dict[str, np.ndarray] = field(default_factory=dict)
    scalars: Dict[str, float] = field(default_factory=dict)

    def grad(self, target: str, y: str) -> np.ndarray:
        """d^target y, reading gradients outside the dependency cone as zero."""
        return self.vectors.get(grad_name(target, y), np.zeros(self.n))


def sample_init(p: ProgramIR, n: int, dist: InitDistribution = InitDistribution(),
                seed: KeyPart = 0, *key: KeyPart) -> Assignment:
    """Sample initial matrices and vectors for a program.

    Args:
        p: Program
        n: Width
        dist: Matrix entry distribution
        seed: Seed; extra ``key`` parts (trial, ...) select independent streams

    Returns:
        Assignment with matrices of variance 1/n, standard normal vectors and
        scalars at their declared values

    Raises:
        ValueError: If n < 1
    """
    if n < 1:
        raise ValueError(f"width must be >= 1, got {n}")
    rng = make_rng(seed, "init", n, *key)
    matrices = {name: dist.sample(rng, n) for name in p.matrices}
    vectors = {name: rng.standard_normal(n) for name in p.vectors}
    scalars = {decl.name: decl.finite_value for decl in p.scalars}
    return Assignment(n, matrices, vectors, scalars, (seed, *key))


def _stack(values: Dict[str, np.ndarray], block: Sequence[str], n: int) -> np.ndarray:
    if not block:
        return np.zeros((n, 0))
    return np.stack([values[name] for name in block], axis=-1)


def evaluate_outer(ins: OuterNonlin, vectors: Dict[str, np.ndarray],
                   scalars: Dict[str, float], n: int) -> np.ndarray:
    """y_alpha = n^{-r} sum over beta_1..beta_r of psi(x_alpha; x_beta1; ...)."""
    blocks = [_stack(vectors, block, n) for block in ins.args]
    c = np.array([scalars[name] for name in ins.scalars], dtype=float)
    r = ins.order
    if r == 0:
        return np.broadcast_to(ins.fn(blocks, c), (n,)).astype(float)
    rows_per_chunk = max(1, _CHUNK_ELEMENTS // (n ** r))
    out = np.empty(n)
    for start in range(0, n, rows_per_chunk):
        rows = blocks[0][start:start + rows_per_chunk]
        views = [rows.reshape((rows.shape[0],) + (1,) * r + (rows.shape[1],))]
        for i in range(1, r + 1):
            shape = [1] * (r + 1) + [blocks[i].shape[1]]
            shape[i] = n
            views.append(blocks[i].reshape(shape))
        values = np.broadcast_to(ins.fn(views, c), (rows.shape[0],) + (n,) * r)
        out[start:start + rows.shape[0]] = values.reshape(rows.shape[0], -1).mean(axis=1)
    return out


def execute(p: ProgramIR, a: Assignment) -> ProgramValues:
    """Run a program at the assignment's width.

    Raises:
        NumericalOverflow: If an instruction produces a non-finite value
    """
    n = a.n
    values = ProgramValues(n, dict(a.vectors), dict(a.scalars))
    vectors, scalars = values.vectors, values.scalars
    for index, ins in enumerate(p.instructions):
        with np.errstate(over="ignore", invalid="ignore"):
            if isinstance(ins, Avg):
                result = float(np.mean(vectors[ins.src]))
                finite = math.isfinite(result)
                scalars[ins.dst] = result
            elif isinstance(ins, MatMul):
                W = a.matrices[ins.matrix]
                result = (W.T if ins.transpose else W) @ vectors[ins.src]
                finite = bool(np.all(np.isfinite(result)))
                vectors[ins.dst] = result
            else:
                result = evaluate_outer(ins, vectors, scalars, n)
                finite = bool(np.all(np.isfinite(result)))
                vectors[ins.dst] = result
        if not finite:
            raise NumericalOverflow(index, f"defining '{ins.dst}'")
    return values


def scalar_at_width(p: ProgramIR, name: str, n: int, dist: InitDistribution = InitDistribution(),
                    seed: KeyPart = 0, *key: KeyPart) -> float:
    """Sample, execute and read one scalar."""
    return execute(p, sample_init(p, n, dist, seed, *key)).scalars[name]
