"""Function registry for OuterNonlin instructions.

A FunctionRef evaluates psi on row-blocks of arguments: ``blocks[i]`` has shape
``(..., k_i)`` (leading axes broadcast against each other) and the result has
the broadcast leading shape. Partials follow the same convention and return an
array of shape ``(..., k_i)`` for block ``i``.

Every function built here is identified by a string id that
:func:`get_function` can turn back into the same function, so programs
serialize by id and FunctionRefs pickle across worker processes.
"""
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, ndtr

from widthlab.errors import MissingPartial

Evaluator = Callable[[Sequence[np.ndarray], np.ndarray], np.ndarray]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class FunctionRef:
    """A registered psi with arity metadata and analytic partials."""
    id: str
    block_sizes: Tuple[int, ...]
    n_scalars: int
    evaluator: Evaluator = field(compare=False, repr=False)
    partials: Optional[Tuple[Evaluator, ...]] = field(default=None, compare=False, repr=False)
    scalar_partial: Optional[Evaluator] = field(default=None, compare=False, repr=False)

    @property
    def order(self) -> int:
        """Number of iid-copy blocks r (block 0 is the row being computed)."""
        return len(self.block_sizes) - 1

    @property
    def has_partials(self) -> bool:
        return self.partials is not None

    def __call__(self, blocks: Sequence[np.ndarray], scalars=()) -> np.ndarray:
        return self.evaluator(blocks, np.asarray(scalars, dtype=float))

    def partial(self, i: int, blocks: Sequence[np.ndarray], scalars=()) -> np.ndarray:
        if self.partials is None:
            raise ValueError(f"function '{self.id}' has no partials")
        return self.partials[i](blocks, np.asarray(scalars, dtype=float))

    def __reduce__(self):
        return (get_function, (self.id,))


def lead_shape(blocks: Sequence[np.ndarray]) -> Tuple[int, ...]:
    """Broadcast shape of the leading (non-argument) axes of all blocks."""
    return np.broadcast_shapes(*(np.shape(b)[:-1] for b in blocks))


def _full(blocks, value) -> np.ndarray:
    return np.full(lead_shape(blocks), float(value))


# ---------------------------------------------------------------------------
# Activations


@dataclass(frozen=True)
class Activation:
    """Elementwise nonlinearity with its first two derivatives."""
    name: str
    fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    grad: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    hess: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)
    smooth: bool = True


def _gaussian_pdf(x):
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(x))


def _gelu(x):
    return x * ndtr(x)


def _gelu_grad(x):
    return ndtr(x) + x * _gaussian_pdf(x)


def _gelu_hess(x):
    return _gaussian_pdf(x) * (2.0 - np.square(x))


def _tanh_grad(x):
    return 1.0 - np.square(np.tanh(x))


def _tanh_hess(x):
    t = np.tanh(x)
    return -2.0 * t * (1.0 - t * t)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_hess(x):
    s = expit(x)
    return s * (1.0 - s)


def _identity(x):
    return np.asarray(x, dtype=float)


def _ones_like(x):
    return np.ones_like(x, dtype=float)


def _zeros_like(x):
    return np.zeros_like(x, dtype=float)


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x):
    return (np.asarray(x) > 0).astype(float)


ACTIVATIONS: Dict[str, Activation] = {
    "identity": Activation("identity", _identity, _ones_like, _zeros_like),
    "gelu": Activation("gelu", _gelu, _gelu_grad, _gelu_hess),
    "tanh": Activation("tanh", np.tanh, _tanh_grad, _tanh_hess),
    "softplus": Activation("softplus", _softplus, expit, _softplus_hess),
    "relu": Activation("relu", _relu, _relu_grad, None, smooth=False),
}


def get_activation(name: str, smooth: bool = False) -> Activation:
    """Look up an activation by name.

    Args:
        name: Registered activation name
        smooth: Require a smooth activation (limit engines need this)

    Raises:
        ValueError: If the name is unknown, or a smooth one is required
    """
    if name not in ACTIVATIONS:
        known = ", ".join(sorted(ACTIVATIONS))
        raise ValueError(f"Unknown activation '{name}' (known: {known})")
    act = ACTIVATIONS[name]
    if smooth and not act.smooth:
        raise ValueError(f"Activation '{name}' is not smooth; the limit engines need a smooth one")
    return act


# ---------------------------------------------------------------------------
# Base function families


def identity() -> FunctionRef:
    return FunctionRef(
        id="identity",
        block_sizes=(1,),
        n_scalars=0,
        evaluator=lambda b, c: np.asarray(b[0][..., 0], dtype=float),
        partials=(lambda b, c: np.ones_like(b[0], dtype=float),),
    )


def constant(value: float) -> FunctionRef:
    """Constant vector; the single block is empty."""
    value = float(value)
    return FunctionRef(
        id=f"const:{value!r}",
        block_sizes=(0,),
        n_scalars=0,
        evaluator=lambda b, c: _full(b, value),
        partials=(lambda b, c: np.zeros(np.shape(b[0]), dtype=float),),
    )


def scalar_broadcast() -> FunctionRef:
    """The vector c*1_n for a single scalar argument c."""
    return FunctionRef(
        id="scalar",
        block_sizes=(0,),
        n_scalars=1,
        evaluator=lambda b, c: _full(b, c[0]),
        partials=(lambda b, c: np.zeros(np.shape(b[0]), dtype=float),),
        scalar_partial=lambda b, c: np.ones(lead_shape(b) + (1,)),
    )


def activation(name: str) -> FunctionRef:
    act = get_activation(name)
    return FunctionRef(
        id=f"act:{name}",
        block_sizes=(1,),
        n_scalars=0,
        evaluator=lambda b, c: act.fn(b[0][..., 0]),
        partials=(lambda b, c: act.grad(b[0]),),
    )


def activation_grad(name: str) -> FunctionRef:
    act = get_activation(name)
    partials = None
    if act.hess is not None:
        partials = (lambda b, c: act.hess(b[0]),)
    return FunctionRef(
        id=f"dact:{name}",
        block_sizes=(1,),
        n_scalars=0,
        evaluator=lambda b, c: act.grad(b[0][..., 0]),
        partials=partials,
    )


def vector_sum(k: int) -> FunctionRef:
    return FunctionRef(
        id=f"sum:{k}",
        block_sizes=(k,),
        n_scalars=0,
        evaluator=lambda b, c: np.sum(b[0], axis=-1),
        partials=(lambda b, c: np.ones_like(b[0], dtype=float),),
    )


def _product_partials(x: np.ndarray) -> np.ndarray:
    k = x.shape[-1]
    out = np.empty_like(x, dtype=float)
    for j in range(k):
        others = [x[..., i] for i in range(k) if i != j]
        out[..., j] = np.prod(np.stack(others, axis=-1), axis=-1) if others else 1.0
    return out


def scalar_sum(k: int) -> FunctionRef:
    """The vector (sum_j c_j)*1_n over k scalar arguments."""
    return FunctionRef(
        id=f"ssum:{k}",
        block_sizes=(0,),
        n_scalars=k,
        evaluator=lambda b, c: _full(b, np.sum(c)),
        partials=(lambda b, c: np.zeros(np.shape(b[0]), dtype=float),),
        scalar_partial=lambda b, c: np.ones(lead_shape(b) + (k,)),
    )


def product(k: int) -> FunctionRef:
    return FunctionRef(
        id=f"prod:{k}",
        block_sizes=(k,),
        n_scalars=0,
        evaluator=lambda b, c: np.prod(b[0], axis=-1),
        partials=(lambda b, c: _product_partials(b[0]),),
    )


def linear_combination(k: int) -> FunctionRef:
    """sum_j c_j x_j with scalar coefficients (used for h^1 = W^1 xi)."""
    return FunctionRef(
        id=f"lincomb:{k}",
        block_sizes=(k,),
        n_scalars=k,
        evaluator=lambda b, c: b[0] @ c,
        partials=(lambda b, c: np.broadcast_to(c, np.shape(b[0])).astype(float),),
        scalar_partial=lambda b, c: np.asarray(b[0], dtype=float),
    )


def inner(k: int) -> FunctionRef:
    """Order-1 psi(u; v) = sum_j u_j v_j."""
    def _partial_u(b, c):
        u, v = np.broadcast_arrays(b[0], b[1])
        return np.array(v, dtype=float)

    def _partial_v(b, c):
        u, v = np.broadcast_arrays(b[0], b[1])
        return np.array(u, dtype=float)

    return FunctionRef(
        id=f"inner:{k}",
        block_sizes=(k, k),
        n_scalars=0,
        evaluator=lambda b, c: np.sum(b[0] * b[1], axis=-1),
        partials=(_partial_u, _partial_v),
    )


def smooth_sign(eps: float) -> FunctionRef:
    """g / sqrt(g^2 + eps^2); eps=0 gives the plain sign."""
    eps = float(eps)

    def _value(b, c):
        g = b[0][..., 0]
        if eps == 0.0:
            return np.sign(g)
        return g / np.sqrt(g * g + eps * eps)

    def _partial(b, c):
        g = b[0]
        if eps == 0.0:
            return np.zeros_like(g, dtype=float)
        return eps * eps / np.power(g * g + eps * eps, 1.5)

    return FunctionRef(
        id=f"sign:{eps!r}",
        block_sizes=(1,),
        n_scalars=0,
        evaluator=_value,
        partials=(_partial,),
    )


# ---------------------------------------------------------------------------
# Derived functions used by the backpropagation transform


def _restore_blocks(base: FunctionRef, i: int, blocks: Sequence[np.ndarray]):
    """Undo the slot permutation of a contracted function; returns (orig, dy)."""
    if i == 0:
        head = blocks[0]
        orig = [head[..., :-1]] + list(blocks[1:])
    else:
        slot = blocks[0]
        head = blocks[1]
        rest = list(blocks[2:])
        orig = [head[..., :-1]] + rest[:i - 1] + [slot] + rest[i - 1:]
    return orig, head[..., -1]


def contract_partial(base: FunctionRef, i: int, j: int) -> FunctionRef:
    """dy_{beta_0} * d psi / d (block i, argument j), with block i moved to slot 0.

    Block 0 of ``base`` gets the upstream gradient dy appended as its last
    argument. For i > 0 the row being computed is the one that fed argument j of
    block i, and the original block 0 becomes an iid-copy block.
    """
    if base.partials is None:
        raise MissingPartial(f"function '{base.id}' has no partials")
    sizes = list(base.block_sizes)
    head = sizes[0] + 1
    if i == 0:
        new_sizes = (head,) + tuple(sizes[1:])
    else:
        new_sizes = (sizes[i], head) + tuple(sizes[1:i] + sizes[i + 1:])

    def _value(blocks, c):
        orig, dy = _restore_blocks(base, i, blocks)
        return dy * base.partials[i](orig, c)[..., j]

    return FunctionRef(id=f"{base.id}'[{i},{j}]", block_sizes=new_sizes,
                       n_scalars=base.n_scalars, evaluator=_value)


def contract_scalar_partial(base: FunctionRef, j: int) -> FunctionRef:
    """dy_{beta_0} * d psi / d c_j, laid out like contract_partial(base, 0, .)."""
    if base.scalar_partial is None:
        raise MissingPartial(f"function '{base.id}' has no scalar partial")
    sizes = (base.block_sizes[0] + 1,) + tuple(base.block_sizes[1:])

    def _value(blocks, c):
        orig, dy = _restore_blocks(base, 0, blocks)
        return dy * base.scalar_partial(orig, c)[..., j]

    return FunctionRef(id=f"{base.id}'[c,{j}]", block_sizes=sizes,
                       n_scalars=base.n_scalars, evaluator=_value)


# ---------------------------------------------------------------------------
# Registry

_FAMILIES: Dict[str, Callable[[str], FunctionRef]] = {
    "const": lambda arg: constant(float(arg)),
    "act": activation,
    "dact": activation_grad,
    "sum": lambda arg: vector_sum(int(arg)),
    "ssum": lambda arg: scalar_sum(int(arg)),
    "prod": lambda arg: product(int(arg)),
    "lincomb": lambda arg: linear_combination(int(arg)),
    "inner": lambda arg: inner(int(arg)),
    "sign": lambda arg: smooth_sign(float(arg)),
}

_PLAIN: Dict[str, Callable[[], FunctionRef]] = {
    "identity": identity,
    "scalar": scalar_broadcast,
}

_DERIVED = re.compile(r"^(?P<base>.+)'\[(?P<block>c|\d+),(?P<arg>\d+)\]$")


def get_function(fid: str) -> FunctionRef:
    """Resolve a function id (base or derived) to a FunctionRef.

    Raises:
        ValueError: If the id is not registered
    """
    match = _DERIVED.match(fid)
    if match:
        base = get_function(match.group("base"))
        arg = int(match.group("arg"))
        if match.group("block") == "c":
            return contract_scalar_partial(base, arg)
        return contract_partial(base, int(match.group("block")), arg)
    if fid in _PLAIN:
        return _PLAIN[fid]()
    family, _, arg = fid.partition(":")
    if family in _FAMILIES and arg:
        return _FAMILIES[family](arg)
    raise ValueError(f"Unknown function id: {fid}")
