"""Width-n program representation and program transforms.

A program declares initial matrices (n x n), initial vectors (n) and initial
scalars, followed by Avg, MatMul and OuterNonlin instructions that each define
one new symbol. Programs are immutable; transforms return extended copies.
"""
import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from widthlab import functions as fn_registry
from widthlab.errors import (
    ArityMismatch,
    DuplicateSymbol,
    EmptyOutputs,
    KindMismatch,
    MissingPartial,
    ProgramError,
    UndefinedSymbol,
)
from widthlab.functions import FunctionRef

MATRIX = "matrix"
VECTOR = "vector"
SCALAR = "scalar"

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ScalarDecl:
    """Initial scalar with its limit value; ``value`` overrides it at finite width."""
    name: str
    limit: float = 0.0
    value: Optional[float] = None

    @property
    def finite_value(self) -> float:
        return self.limit if self.value is None else self.value


@dataclass(frozen=True)
class Avg:
    src: str
    dst: str


@dataclass(frozen=True)
class MatMul:
    matrix: str
    src: str
    dst: str
    transpose: bool = False


@dataclass(frozen=True)
class OuterNonlin:
    """y_alpha = n^{-r} sum_beta psi(args[0]_alpha; args[1]_beta1; ...; scalars)."""
    dst: str
    fn: FunctionRef
    args: Tuple[Tuple[str, ...], ...]
    scalars: Tuple[str, ...] = ()
    order: Optional[int] = None

    def __post_init__(self):
        if self.order is None:
            object.__setattr__(self, "order", len(self.args) - 1)


Instruction = Union[Avg, MatMul, OuterNonlin]


@dataclass(frozen=True)
class ProgramIR:
    """Symbolic program over n-vectors, n x n matrices and scalars."""
    matrices: Tuple[str, ...]
    vectors: Tuple[str, ...]
    scalars: Tuple[ScalarDecl, ...]
    instructions: Tuple[Instruction, ...]
    outputs: Tuple[str, ...] = ()
    groups: Tuple[Tuple[str, Tuple[str, ...]], ...] = field(default=())

    def symbol_kinds(self) -> Dict[str, str]:
        kinds = {name: MATRIX for name in self.matrices}
        kinds.update({name: VECTOR for name in self.vectors})
        kinds.update({decl.name: SCALAR for decl in self.scalars})
        for ins in self.instructions:
            kinds[ins.dst] = SCALAR if isinstance(ins, Avg) else VECTOR
        return kinds

    def producer(self, name: str) -> int:
        """Index of the instruction defining ``name``; -1 for initial symbols."""
        for i, ins in enumerate(self.instructions):
            if ins.dst == name:
                return i
        return -1

    def group(self, name: str) -> Tuple[str, ...]:
        """Per-input copies of ``name`` in a total program."""
        for key, members in self.groups:
            if key == name:
                return members
        raise KeyError(name)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to the documented JSON-compatible schema."""
        return {
            "version": SCHEMA_VERSION,
            "matrices": list(self.matrices),
            "vectors": list(self.vectors),
            "scalars": [_scalar_to_dict(s) for s in self.scalars],
            "instructions": [_instruction_to_dict(ins) for ins in self.instructions],
            "outputs": list(self.outputs),
            "groups": {key: list(members) for key, members in self.groups},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ProgramIR":
        return build_program(data)


@dataclass(frozen=True)
class Diagnostic:
    index: int
    code: str
    reason: str

    def __str__(self) -> str:
        where = f"instruction {self.index}" if self.index >= 0 else "declarations"
        return f"{self.code} at {where}: {self.reason}"


_ERRORS = {
    "UndefinedSymbol": UndefinedSymbol,
    "DuplicateSymbol": DuplicateSymbol,
    "ArityMismatch": ArityMismatch,
    "KindMismatch": KindMismatch,
    "MissingPartial": MissingPartial,
}


# ---------------------------------------------------------------------------
# Schema


def _scalar_to_dict(decl: ScalarDecl) -> Dict[str, Any]:
    out: Dict[str, Any] = {"name": decl.name, "limit": decl.limit}
    if decl.value is not None:
        out["value"] = decl.value
    return out


def _instruction_to_dict(ins: Instruction) -> Dict[str, Any]:
    if isinstance(ins, Avg):
        return {"op": "avg", "src": ins.src, "dst": ins.dst}
    if isinstance(ins, MatMul):
        return {"op": "matmul", "matrix": ins.matrix, "src": ins.src,
                "dst": ins.dst, "transpose": ins.transpose}
    return {"op": "outer", "dst": ins.dst, "fn": ins.fn.id, "order": ins.order,
            "args": [list(block) for block in ins.args], "scalars": list(ins.scalars)}


def _parse_instruction(i: int, raw: Mapping[str, Any]) -> Instruction:
    op = raw.get("op")
    try:
        if op == "avg":
            return Avg(src=raw["src"], dst=raw["dst"])
        if op == "matmul":
            return MatMul(matrix=raw["matrix"], src=raw["src"], dst=raw["dst"],
                          transpose=bool(raw.get("transpose", False)))
        if op == "outer":
            fn = raw["fn"]
            if not isinstance(fn, FunctionRef):
                fn = fn_registry.get_function(str(fn))
            args = tuple(tuple(block) for block in raw["args"])
            return OuterNonlin(dst=raw["dst"], fn=fn, args=args,
                               scalars=tuple(raw.get("scalars", ())),
                               order=raw.get("order"))
    except KeyError as e:
        raise ProgramError(f"Instruction {i}: missing required field {e}") from None
    raise ProgramError(f"Instruction {i}: unknown op '{op}'")


def build_program(data: Mapping[str, Any]) -> ProgramIR:
    """Build and validate a program from a declarative description.

    Args:
        data: Mapping with matrices, vectors, scalars, instructions and
            optional outputs/groups, in the documented schema

    Returns:
        Validated ProgramIR

    Raises:
        UndefinedSymbol, DuplicateSymbol, ArityMismatch, KindMismatch: On the
            first invalid declaration or instruction
    """
    scalars = []
    for raw in data.get("scalars", ()):
        if isinstance(raw, ScalarDecl):
            scalars.append(raw)
        elif isinstance(raw, str):
            scalars.append(ScalarDecl(raw))
        else:
            value = raw.get("value")
            scalars.append(ScalarDecl(raw["name"], float(raw.get("limit", 0.0)),
                                      None if value is None else float(value)))
    instructions = []
    for i, raw in enumerate(data.get("instructions", ())):
        if isinstance(raw, (Avg, MatMul, OuterNonlin)):
            instructions.append(raw)
        else:
            instructions.append(_parse_instruction(i, raw))
    groups = data.get("groups", {})
    if isinstance(groups, Mapping):
        groups = tuple((key, tuple(members)) for key, members in groups.items())
    program = ProgramIR(
        matrices=tuple(data.get("matrices", ())),
        vectors=tuple(data.get("vectors", ())),
        scalars=tuple(scalars),
        instructions=tuple(instructions),
        outputs=tuple(data.get("outputs", ())),
        groups=tuple(groups),
    )
    raise_for_diagnostics(validate(program))
    return program


def raise_for_diagnostics(diagnostics: Sequence[Diagnostic]):
    if diagnostics:
        first = diagnostics[0]
        raise _ERRORS.get(first.code, ProgramError)(str(first))


def save_program(p: ProgramIR, path: Path):
    with open(path, "w") as f:
        json.dump(p.to_dict(), f, indent=2)


def load_program(path: Path) -> ProgramIR:
    if not path.exists():
        raise FileNotFoundError(f"Program file not found: {path}")
    with open(path, "r") as f:
        return build_program(json.load(f))


# ---------------------------------------------------------------------------
# Validation


def validate(p: ProgramIR, require_partials: bool = False) -> List[Diagnostic]:
    """Check the program invariants.

    Args:
        p: Program to check
        require_partials: Flag OuterNonlin functions without partials

    Returns:
        Diagnostics in program order; empty iff the program is valid
    """
    diagnostics: List[Diagnostic] = []
    kinds: Dict[str, str] = {}

    def declare(index: int, name: str, kind: str):
        if name in kinds:
            diagnostics.append(Diagnostic(index, "DuplicateSymbol", f"'{name}' is already defined"))
        kinds[name] = kind

    def expect(index: int, name: str, kind: str):
        if name not in kinds:
            diagnostics.append(Diagnostic(index, "UndefinedSymbol", f"'{name}' is not defined"))
        elif kinds[name] != kind:
            diagnostics.append(Diagnostic(
                index, "KindMismatch", f"'{name}' is a {kinds[name]}, expected a {kind}"))

    for name in p.matrices:
        declare(-1, name, MATRIX)
    for name in p.vectors:
        declare(-1, name, VECTOR)
    for decl in p.scalars:
        declare(-1, decl.name, SCALAR)

    for i, ins in enumerate(p.instructions):
        if isinstance(ins, Avg):
            expect(i, ins.src, VECTOR)
            declare(i, ins.dst, SCALAR)
        elif isinstance(ins, MatMul):
            expect(i, ins.matrix, MATRIX)
            expect(i, ins.src, VECTOR)
            declare(i, ins.dst, VECTOR)
        else:
            fn = ins.fn
            if ins.order != len(ins.args) - 1 or ins.order != fn.order:
                diagnostics.append(Diagnostic(
                    i, "ArityMismatch",
                    f"order {ins.order} with {len(ins.args)} argument blocks for '{fn.id}' "
                    f"(expects {len(fn.block_sizes)})"))
            else:
                for b, (block, size) in enumerate(zip(ins.args, fn.block_sizes)):
                    if len(block) != size:
                        diagnostics.append(Diagnostic(
                            i, "ArityMismatch",
                            f"block {b} has {len(block)} arguments, '{fn.id}' expects {size}"))
            if len(ins.scalars) != fn.n_scalars:
                diagnostics.append(Diagnostic(
                    i, "ArityMismatch",
                    f"{len(ins.scalars)} scalars given, '{fn.id}' expects {fn.n_scalars}"))
            for block in ins.args:
                for name in block:
                    expect(i, name, VECTOR)
            for name in ins.scalars:
                expect(i, name, SCALAR)
            if require_partials and not fn.has_partials:
                diagnostics.append(Diagnostic(i, "MissingPartial", f"'{fn.id}' has no partials"))
            declare(i, ins.dst, VECTOR)

    for name in p.outputs:
        if kinds.get(name) != VECTOR:
            diagnostics.append(Diagnostic(-1, "KindMismatch", f"output '{name}' is not a vector"))
    return diagnostics


# ---------------------------------------------------------------------------
# Builders


def outer(dst: str, fn: Union[str, FunctionRef], *blocks: Sequence[str],
          scalars: Sequence[str] = ()) -> OuterNonlin:
    """Shorthand for an OuterNonlin instruction."""
    if isinstance(fn, str):
        fn = fn_registry.get_function(fn)
    if not blocks:
        blocks = ((),)
    return OuterNonlin(dst=dst, fn=fn, args=tuple(tuple(b) for b in blocks), scalars=tuple(scalars))


def mlp_program(L: int, d: int = 1, activation: str = "gelu",
                xi: Optional[Sequence[float]] = None) -> ProgramIR:
    """Forward pass of an L-hidden-layer MLP as a program.

    h1 = sum_j xi_j w1_j, x_l = phi(h_l), h_l = W_l x_{l-1}, and the output
    vector ``out = v * x_L`` whose average is the network output v^T x_L / n.

    Args:
        L: Number of hidden layers
        d: Input dimension
        activation: Activation name
        xi: Optional input values bound to the scalars xi_0..xi_{d-1}
    """
    if L < 1 or d < 1:
        raise ValueError(f"MLP needs L >= 1 and d >= 1 (got L={L}, d={d})")
    w1 = [f"w1_{j}" for j in range(d)]
    xs = [f"xi_{j}" for j in range(d)]
    values = list(xi) if xi is not None else [None] * d
    if len(values) != d:
        raise ValueError(f"expected {d} input values, got {len(values)}")
    act = f"act:{activation}"
    instructions: List[Instruction] = [
        outer("h1", f"lincomb:{d}", w1, scalars=xs),
        outer("x1", act, ["h1"]),
    ]
    for l in range(2, L + 1):
        instructions.append(MatMul(matrix=f"W{l}", src=f"x{l - 1}", dst=f"h{l}"))
        instructions.append(outer(f"x{l}", act, [f"h{l}"]))
    instructions.append(outer("out", "prod:2", ["v", f"x{L}"]))
    instructions.append(Avg(src="out", dst="f"))
    return build_program({
        "matrices": [f"W{l}" for l in range(2, L + 1)],
        "vectors": w1 + ["v"],
        "scalars": [ScalarDecl(name, 0.0, None if val is None else float(val))
                    for name, val in zip(xs, values)],
        "instructions": instructions,
        "outputs": ["out"],
    })


def bind_scalars(p: ProgramIR, values: Mapping[str, float]) -> ProgramIR:
    """Set finite-width values of initial scalars."""
    known = {decl.name for decl in p.scalars}
    unknown = set(values) - known
    if unknown:
        raise UndefinedSymbol(f"unknown scalars: {', '.join(sorted(unknown))}")
    scalars = tuple(replace(decl, value=float(values[decl.name])) if decl.name in values else decl
                    for decl in p.scalars)
    return replace(p, scalars=scalars)


# ---------------------------------------------------------------------------
# Backpropagation


def grad_name(target: str, y: str) -> str:
    """Symbol holding d^target y in a backpropagation program."""
    return f"d[{target}]{y}"


def backprop_transform(p: ProgramIR, target: str) -> ProgramIR:
    """Extend ``p`` with the backpropagation program wrt ``target``.

    Adds d^x x = 1_n, then walks the instructions in reverse, emitting for each
    consumer u of y the term d^{x|u} y, and finally d^x y as the sum over
    consumers. Symbols outside the dependency cone of ``target`` get no
    gradient symbol; read them as zero.

    Raises:
        KindMismatch: If target is not a vector
        MissingPartial: If an OuterNonlin in the cone has no partials
    """
    kinds = p.symbol_kinds()
    if kinds.get(target) != VECTOR:
        raise KindMismatch(f"backprop target '{target}' is not a vector")

    new: List[Instruction] = []
    contributions: Dict[str, List[str]] = defaultdict(list)
    grads: Dict[str, str] = {}
    counter: Dict[str, int] = defaultdict(int)

    def fresh(u: str, y: str) -> str:
        counter[y] += 1
        return f"d[{target}|{u}]{y}.{counter[y]}"

    def finalize(y: str) -> Optional[str]:
        if y in grads:
            return grads[y]
        parts = contributions.get(y)
        if not parts:
            return None
        name = grad_name(target, y)
        if kinds[y] == VECTOR:
            new.append(outer(name, fn_registry.vector_sum(len(parts)), parts))
        else:
            carrier = name + ".v"
            new.append(outer(carrier, fn_registry.scalar_sum(len(parts)), (), scalars=parts))
            new.append(Avg(src=carrier, dst=name))
        grads[y] = name
        return name

    root = grad_name(target, target)
    new.append(outer(root, fn_registry.constant(1.0), ()))
    grads[target] = root

    for index in range(p.producer(target), -1, -1):
        ins = p.instructions[index]
        gu = finalize(ins.dst)
        if gu is None:
            continue
        if isinstance(ins, Avg):
            name = fresh(ins.dst, ins.src)
            new.append(outer(name, fn_registry.scalar_broadcast(), (), scalars=[gu]))
            contributions[ins.src].append(name)
        elif isinstance(ins, MatMul):
            name = fresh(ins.dst, ins.src)
            new.append(MatMul(matrix=ins.matrix, src=gu, dst=name, transpose=not ins.transpose))
            contributions[ins.src].append(name)
        else:
            if not ins.fn.has_partials:
                raise MissingPartial(f"instruction {index}: '{ins.fn.id}' has no partials")
            head = tuple(ins.args[0]) + (gu,)
            for i, block in enumerate(ins.args):
                for j, y in enumerate(block):
                    if i == 0:
                        args = (head,) + tuple(ins.args[1:])
                    else:
                        args = (tuple(block), head) + tuple(ins.args[1:i]) + tuple(ins.args[i + 1:])
                    name = fresh(ins.dst, y)
                    new.append(OuterNonlin(dst=name, fn=fn_registry.contract_partial(ins.fn, i, j),
                                           args=args, scalars=ins.scalars))
                    contributions[y].append(name)
            for j, c in enumerate(ins.scalars):
                name = fresh(ins.dst, c)
                new.append(OuterNonlin(dst=name + ".v",
                                       fn=fn_registry.contract_scalar_partial(ins.fn, j),
                                       args=(head,) + tuple(ins.args[1:]), scalars=ins.scalars))
                new.append(Avg(src=name + ".v", dst=name))
                contributions[c].append(name)

    for name in p.vectors:
        finalize(name)
    for decl in p.scalars:
        finalize(decl.name)

    return replace(p, instructions=p.instructions + tuple(new))


def total_program(p: ProgramIR, outputs: Sequence[str],
                  inputs: Sequence[Mapping[str, float]]) -> ProgramIR:
    """Backpropagate wrt every output, then replicate over the inputs.

    Initial matrices, initial vectors and the initial scalars not bound by
    ``inputs`` are shared by all copies; everything else is renamed
    ``name@a`` for input ``a``. ``groups`` maps each renamed symbol to its
    copies, so ``group(y)`` is the multi-vector y and
    ``group(grad_name(x, y))`` its error-signal counterpart.

    Args:
        p: Representation program
        outputs: Output vectors to backpropagate from
        inputs: One binding of input scalar values per input

    Raises:
        EmptyOutputs: If outputs is empty
    """
    if not outputs:
        raise EmptyOutputs("total program needs at least one output")
    if not inputs:
        raise ProgramError("total program needs at least one input binding")
    extended = p
    for x in outputs:
        extended = backprop_transform(extended, x)

    declared = {decl.name: decl for decl in p.scalars}
    bound = sorted(set().union(*(set(binding) for binding in inputs)))
    missing = [name for name in bound if name not in declared]
    if missing:
        raise UndefinedSymbol(f"unknown input scalars: {', '.join(missing)}")

    per_copy = [ins.dst for ins in extended.instructions] + bound
    scalars = [decl for decl in p.scalars if decl.name not in bound]
    instructions: List[Instruction] = []
    for a, binding in enumerate(inputs):
        rename = {name: f"{name}@{a}" for name in per_copy}
        for name in bound:
            limit = float(binding.get(name, declared[name].finite_value))
            scalars.append(ScalarDecl(rename[name], limit, limit))
        instructions.extend(_rename(ins, rename) for ins in extended.instructions)

    groups = tuple((name, tuple(f"{name}@{a}" for a in range(len(inputs)))) for name in per_copy)
    total_outputs = tuple(f"{x}@{a}" for x in outputs for a in range(len(inputs)))
    program = ProgramIR(matrices=p.matrices, vectors=p.vectors, scalars=tuple(scalars),
                        instructions=tuple(instructions), outputs=total_outputs, groups=groups)
    raise_for_diagnostics(validate(program))
    return program


def _rename(ins: Instruction, rename: Mapping[str, str]) -> Instruction:
    def r(name: str) -> str:
        return rename.get(name, name)

    if isinstance(ins, Avg):
        return Avg(src=r(ins.src), dst=r(ins.dst))
    if isinstance(ins, MatMul):
        return MatMul(matrix=ins.matrix, src=r(ins.src), dst=r(ins.dst), transpose=ins.transpose)
    return OuterNonlin(dst=r(ins.dst), fn=ins.fn,
                       args=tuple(tuple(r(name) for name in block) for block in ins.args),
                       scalars=tuple(r(name) for name in ins.scalars), order=ins.order)
