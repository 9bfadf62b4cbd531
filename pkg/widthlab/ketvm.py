"""Infinite-width execution of programs with Monte Carlo kets.

Every ket is represented by m joint samples. Initial vectors are iid
standard normal; ``W y`` is a hat part (Gaussian, covariance given by the
second moments of the inputs of all earlier hat-kets of the same matrix)
plus a dot part, a combination of the inputs of the hat-kets of the
transposed matrix weighted by expected derivatives.

Expected derivatives come from one of two estimators:

* ``chain``: derivative columns d|x>/d(hat) are carried along the program by
  the chain rule and averaged.
* ``stein``: <x|x>^+ E[hat * y], Gaussian integration by parts over the hat
  family; no derivatives needed, used for the multi-input kets of the
  dynamics engines.
"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from widthlab.errors import CovarianceError, MissingPartial
from widthlab.functions import FunctionRef
from widthlab.program import Avg, MatMul, OuterNonlin, ProgramIR, validate
from widthlab.rng import KeyPart, make_rng

DEFAULT_SAMPLES = 200_000
DEFAULT_COPIES = 8
RIDGE = 1e-10
DOT_MODES = ("chain", "stein")

# negative eigenvalues of a conditional covariance tolerated as round-off
_PSD_TOLERANCE = 1e-8
_ROW_CHUNK = 16384

BraKetMatrix = np.ndarray


def _as_columns(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def bracket(X: np.ndarray, Y: np.ndarray) -> BraKetMatrix:
    """Entry (i, j) is the sample mean of X^i Y^j."""
    X = _as_columns(X)
    Y = _as_columns(Y)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"kets have {X.shape[0]} and {Y.shape[0]} samples")
    return X.T @ Y / X.shape[0]


def _solve_gram(G: np.ndarray, C: np.ndarray, ridge: float) -> np.ndarray:
    try:
        return linalg.cho_solve(linalg.cho_factor(G, lower=True), C)
    except linalg.LinAlgError:
        scale = max(1.0, float(np.trace(G)) / max(1, G.shape[0]))
        try:
            return linalg.cho_solve(linalg.cho_factor(G + ridge * scale * np.eye(G.shape[0]),
                                                      lower=True), C)
        except linalg.LinAlgError:
            return np.linalg.lstsq(G, C, rcond=None)[0]


def _psd_factor(S: np.ndarray, ridge: float) -> np.ndarray:
    """Lower factor F with F F^T = S for a PSD (up to round-off) matrix S."""
    S = 0.5 * (S + S.T)
    scale = max(1.0, float(np.max(np.abs(np.diag(S)))) if S.size else 1.0)
    try:
        return linalg.cholesky(S + ridge * scale * np.eye(S.shape[0]), lower=True)
    except linalg.LinAlgError:
        pass
    w, V = np.linalg.eigh(S)
    if w.min() < -_PSD_TOLERANCE * scale:
        raise CovarianceError(f"hat covariance has eigenvalue {w.min():.3g} < 0")
    return V * np.sqrt(np.clip(w, 0.0, None))


class HatRegistry:
    """Hat-kets generated so far for one of W_0 or W_0^T."""

    def __init__(self, ridge: float = RIDGE):
        self.ridge = ridge
        self.names: List[str] = []
        self.input_names: List[Optional[str]] = []
        self._inputs: List[np.ndarray] = []
        self._hats: List[np.ndarray] = []
        self._gram = np.zeros((0, 0))
        self._input_cache: Optional[np.ndarray] = None
        self._hat_cache: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return len(self._inputs)

    @property
    def gram(self) -> np.ndarray:
        """Second moments of the registered inputs: the hat covariance."""
        return self._gram

    def inputs(self) -> np.ndarray:
        if self._input_cache is None:
            self._input_cache = np.column_stack(self._inputs)
        return self._input_cache

    def hats(self) -> np.ndarray:
        if self._hat_cache is None:
            self._hat_cache = np.column_stack(self._hats)
        return self._hat_cache

    def generate(self, x: np.ndarray, rng: np.random.Generator,
                 names: Optional[Sequence[str]] = None,
                 input_names: Optional[Sequence[Optional[str]]] = None) -> np.ndarray:
        """Draw hat-kets for the input columns x, conditioned on earlier ones."""
        x = _as_columns(x)
        m, j = x.shape
        G_new = x.T @ x / m
        if self.size == 0:
            mean = np.zeros((m, j))
            C = np.zeros((0, j))
            S = G_new
        else:
            C = self.inputs().T @ x / m
            A = _solve_gram(self._gram, C, self.ridge)
            mean = self.hats() @ A
            S = G_new - C.T @ A
        F = _psd_factor(S, self.ridge)
        new = mean + rng.standard_normal((m, j)) @ F.T

        k = self.size
        gram = np.empty((k + j, k + j))
        gram[:k, :k] = self._gram
        gram[:k, k:] = C
        gram[k:, :k] = C.T
        gram[k:, k:] = G_new
        self._gram = gram
        self._inputs.extend(x.T.copy())
        self._hats.extend(new.T.copy())
        self.names.extend(names if names is not None else [f"hat{k + i}" for i in range(j)])
        self.input_names.extend(input_names if input_names is not None else [None] * j)
        self._input_cache = None
        self._hat_cache = None
        return new

    def stein_coefficients(self, y: np.ndarray) -> np.ndarray:
        """E[d y / d hat] estimated as gram^+ E[hat y]; shape (size, #cols of y)."""
        y = _as_columns(y)
        moments = self.hats().T @ y / y.shape[0]
        return np.linalg.pinv(self._gram, rcond=1e-10, hermitian=True) @ moments


class InitialOperator:
    """An initial matrix W_0 acting on kets, with separate W and W^T hat families."""

    def __init__(self, name: str, rng: np.random.Generator, ridge: float = RIDGE):
        self.name = name
        self.rng = rng
        self.registries = {False: HatRegistry(ridge), True: HatRegistry(ridge)}

    def apply(self, x: np.ndarray, transpose: bool = False,
              coefficients: Optional[np.ndarray] = None,
              names: Optional[Sequence[str]] = None,
              input_names: Optional[Sequence[Optional[str]]] = None) -> np.ndarray:
        """Return hat(W x) + dot(W x) for the columns of x.

        Args:
            x: Input ket columns (m,) or (m, k)
            transpose: Apply W^T instead of W
            coefficients: Expected derivatives of x wrt the hat-kets of the
                transposed family, shape (size, k); Stein estimates if None
            names: Names for the new hat-kets
            input_names: Ket names of the columns of x
        """
        x = _as_columns(x)
        same = self.registries[transpose]
        other = self.registries[not transpose]
        result = same.generate(x, self.rng, names, input_names)
        if other.size:
            if coefficients is None:
                coefficients = other.stein_coefficients(x)
            result = result + other.inputs() @ coefficients
        return result


# ---------------------------------------------------------------------------
# Nonlinear outer products


def partner_count(m: int, copies: int = 1) -> int:
    """Row permutations apply_outer averages over for m samples: max(copies, ceil(sqrt m)).

    The per-sample inner expectation then has error O(m^{-1/4}), so anything
    nonlinear computed from it is biased by O(m^{-1/2}), the order of the
    Monte Carlo error.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    return max(copies, math.isqrt(m - 1) + 1)


def _outer_pass(fn: FunctionRef, X: np.ndarray, chi: np.ndarray, Y: np.ndarray,
                Z: np.ndarray, partners: int,
                rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """Core of apply_outer; also returns E[fn(.)^2] over (sample, partner) pairs."""
    h, m, _ = X.shape
    out = np.zeros((m, Z.shape[1]))
    sq = 0.0
    for _ in range(partners):
        perm = rng.permutation(m)
        for start in range(0, m, _ROW_CHUNK):
            rows = slice(start, start + _ROW_CHUNK)
            partner = perm[rows]
            args = np.einsum("hk,hsk,hsk->sh", chi, X[:, rows], Y[:, partner])
            values = fn([args])
            sq += float(np.sum(values * values))
            out[rows] += values[:, None] * Z[partner]
    return out / partners, sq / (partners * m)


def _history_arrays(X, chi, Y):
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    chi = np.asarray(chi, dtype=float)
    if X.ndim == 1:
        X, Y = X[:, None], Y[:, None]
    if X.ndim == 2:
        X, Y, chi = X[None], Y[None], np.atleast_1d(chi)[None]
    if X.shape != Y.shape or chi.shape != (X.shape[0], X.shape[2]):
        raise ValueError(f"dimension mismatch: X {X.shape}, Y {Y.shape}, chi {chi.shape}")
    return X, chi, Y


def apply_outer(fn: FunctionRef, X: np.ndarray, chi: np.ndarray, Y: np.ndarray, Z: np.ndarray,
                copies: int = DEFAULT_COPIES, rng: Optional[np.random.Generator] = None,
                return_moment: bool = False):
    """phi(|X>_chi <Y|) |Z> = E_perp phi(sum_i chi_i X^i Y^i_perp) Z_perp, per sample.

    X and Y are (m, k) ket columns and chi has k entries. For memoryful update
    functions pass histories: X, Y of shape (h, m, k) and chi of shape (h, k);
    fn then receives the h outer-product entries on its last axis. (Y, Z) are
    resampled jointly by ``partner_count(m, copies)`` random row permutations;
    ``copies`` only matters once it exceeds ceil(sqrt(m)).

    Returns:
        Ket columns shaped like Z, and E[fn^2] if ``return_moment`` is set

    Raises:
        ValueError: On dimension mismatch
    """
    X, chi, Y = _history_arrays(X, chi, Y)
    Z = np.asarray(Z, dtype=float)
    squeeze = Z.ndim == 1
    Z = _as_columns(Z)
    if Z.shape[0] != X.shape[1]:
        raise ValueError(f"Z has {Z.shape[0]} samples, X has {X.shape[1]}")
    if fn.block_sizes != (X.shape[0],):
        raise ValueError(f"'{fn.id}' takes {fn.block_sizes} arguments, history has {X.shape[0]}")
    rng = rng if rng is not None else make_rng(0, "outer")
    out, moment = _outer_pass(fn, X, chi, Y, Z, partner_count(X.shape[1], copies), rng)
    if squeeze:
        out = out[:, 0]
    return (out, moment) if return_moment else out


# ---------------------------------------------------------------------------
# Program execution


@dataclass
class KetState:
    """Sample representation of every ket and limit scalar of a program."""
    m: int
    columns: Dict[str, np.ndarray] = field(default_factory=dict)
    limit_scalars: Dict[str, float] = field(default_factory=dict)
    deriv: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    operators: Dict[str, InitialOperator] = field(default_factory=dict)

    @property
    def names(self) -> List[str]:
        return list(self.columns)

    @property
    def samples(self) -> np.ndarray:
        """m x V matrix, columns in definition order."""
        return np.column_stack([self.columns[name] for name in self.columns])

    @property
    def hat_registry(self) -> Dict[Tuple[str, bool], HatRegistry]:
        return {(name, t): op.registries[t]
                for name, op in self.operators.items() for t in (False, True)}

    def ket(self, name: str) -> np.ndarray:
        return self.columns[name]

    def bracket(self, xs: Sequence[str], ys: Sequence[str]) -> BraKetMatrix:
        return bracket(np.column_stack([self.columns[x] for x in xs]),
                       np.column_stack([self.columns[y] for y in ys]))


def _add_scaled(acc: Dict[str, np.ndarray], src: Mapping[str, np.ndarray], coef):
    for key, value in src.items():
        term = coef * value
        acc[key] = acc[key] + term if key in acc else term


def _run_outer(state: KetState, ins: OuterNonlin, rng: np.random.Generator, copies: int,
               track: bool):
    m = state.m
    blocks = [np.column_stack([state.columns[v] for v in block]) if block else np.zeros((m, 0))
              for block in ins.args]
    c = np.array([state.limit_scalars[s] for s in ins.scalars], dtype=float)
    if ins.order == 0:
        value = np.broadcast_to(ins.fn(blocks, c), (m,)).astype(float)
        head_partial = ins.fn.partial(0, blocks, c) if track and ins.args[0] else None
    else:
        value = np.zeros(m)
        head_partial = np.zeros(blocks[0].shape) if track and ins.args[0] else None
        for _ in range(copies):
            copied = [blocks[0]] + [b[rng.permutation(m)] for b in blocks[1:]]
            value += np.broadcast_to(ins.fn(copied, c), (m,))
            if head_partial is not None:
                head_partial += ins.fn.partial(0, copied, c)
        value /= copies
        if head_partial is not None:
            head_partial /= copies
    deriv: Dict[str, np.ndarray] = {}
    if head_partial is not None:
        for j, arg in enumerate(ins.args[0]):
            _add_scaled(deriv, state.deriv.get(arg, {}), head_partial[:, j])
    return value, deriv


def run_limit(p: ProgramIR, m: int = DEFAULT_SAMPLES, seed: KeyPart = 0,
              copies: int = DEFAULT_COPIES, dot_mode: str = "chain") -> KetState:
    """Compute the kets and limit scalars of a program.

    Args:
        p: Program
        m: Samples per ket
        seed: Seed
        copies: Row permutations per iid-copy block
        dot_mode: 'chain' (tracked derivatives) or 'stein'

    Raises:
        MissingPartial: If chain mode meets a function without partials
        CovarianceError: If a hat covariance is not PSD
    """
    if dot_mode not in DOT_MODES:
        raise ValueError(f"dot_mode must be one of {', '.join(DOT_MODES)}")
    track = dot_mode == "chain"
    if track:
        missing = [d for d in validate(p, require_partials=True) if d.code == "MissingPartial"]
        if missing:
            raise MissingPartial(str(missing[0]))
    rng = make_rng(seed, "ketvm")
    state = KetState(m)
    for name in p.matrices:
        state.operators[name] = InitialOperator(name, make_rng(seed, "ketvm-hat", name))
    for name in p.vectors:
        state.columns[name] = rng.standard_normal(m)
        state.deriv[name] = {}
    for decl in p.scalars:
        state.limit_scalars[decl.name] = decl.limit

    for ins in p.instructions:
        if isinstance(ins, Avg):
            state.limit_scalars[ins.dst] = float(np.mean(state.columns[ins.src]))
        elif isinstance(ins, MatMul):
            _run_matmul(state, ins, track)
        else:
            value, deriv = _run_outer(state, ins, rng, copies, track)
            state.columns[ins.dst] = value
            state.deriv[ins.dst] = deriv
    return state


def _run_matmul(state: KetState, ins: MatMul, track: bool):
    op = state.operators[ins.matrix]
    other = op.registries[not ins.transpose]
    y = state.columns[ins.src]
    coefficients = None
    if track and other.size:
        dy = state.deriv.get(ins.src, {})
        coefficients = np.array([[float(np.mean(dy[h]))] if h in dy else [0.0]
                                 for h in other.names])
    hat_name = f"hat[{ins.dst}]"
    z = op.apply(y, ins.transpose, coefficients, names=[hat_name], input_names=[ins.src])[:, 0]
    state.columns[ins.dst] = z
    if track:
        deriv = {hat_name: np.ones(state.m)}
        if coefficients is not None:
            for coef, source in zip(coefficients[:, 0], other.input_names):
                if coef != 0.0:
                    _add_scaled(deriv, state.deriv.get(source, {}), coef)
        state.deriv[ins.dst] = deriv


def limit_scalar(p: ProgramIR, name: str, m: int = DEFAULT_SAMPLES, seed: KeyPart = 0,
                 **kwargs) -> float:
    return run_limit(p, m, seed, **kwargs).limit_scalars[name]


# ---------------------------------------------------------------------------
# Snapshots


def save_snapshot(state: KetState, path: Path):
    """Write kets and limit scalars to a columnar .npz archive."""
    arrays = {f"ket/{name}": col for name, col in state.columns.items()}
    arrays.update({f"scalar/{name}": np.array(value) for name, value in state.limit_scalars.items()})
    np.savez(path, **arrays)


def load_snapshot(path: Path) -> KetState:
    """Read a snapshot back; hat registries and derivatives are not stored."""
    if not Path(path).exists():
        raise FileNotFoundError(f"Snapshot not found: {path}")
    with np.load(path) as data:
        kets = {key[4:]: data[key] for key in data.files if key.startswith("ket/")}
        scalars = {key[7:]: float(data[key]) for key in data.files if key.startswith("scalar/")}
    m = len(next(iter(kets.values()))) if kets else 0
    return KetState(m, kets, scalars)
