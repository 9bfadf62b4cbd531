"""Tests for the program representation and transforms."""
import numpy as np
import pytest

from widthlab.errors import (
    ArityMismatch,
    DuplicateSymbol,
    EmptyOutputs,
    KindMismatch,
    MissingPartial,
    UndefinedSymbol,
)
from widthlab.finite import execute, sample_init
from widthlab.program import (
    Avg,
    MatMul,
    ProgramIR,
    backprop_transform,
    bind_scalars,
    build_program,
    grad_name,
    load_program,
    mlp_program,
    outer,
    save_program,
    total_program,
    validate,
)


def test_identity_program():
    """Test a one-instruction program builds."""
    p = build_program({"vectors": ["x"], "instructions": [outer("y", "identity", ["x"])]})
    assert p.vectors == ("x",)
    assert len(p.instructions) == 1
    assert p.symbol_kinds()["y"] == "vector"


def test_undefined_symbol():
    """Test referencing an undefined vector raises UndefinedSymbol."""
    with pytest.raises(UndefinedSymbol, match="'z' is not defined"):
        build_program({"vectors": ["x"], "instructions": [outer("y", "identity", ["z"])]})


def test_duplicate_symbol():
    """Test defining a symbol twice raises DuplicateSymbol."""
    with pytest.raises(DuplicateSymbol):
        build_program({"vectors": ["x"], "instructions": [outer("x", "identity", ["x"])]})


def test_arity_mismatch():
    """Test a block size that disagrees with the function raises ArityMismatch."""
    with pytest.raises(ArityMismatch):
        build_program({"vectors": ["x", "y"],
                       "instructions": [outer("z", "prod:2", ["x", "y", "x"])]})


def test_matmul_on_vector_is_kind_mismatch():
    """Test using a vector as a matrix is reported as KindMismatch."""
    p = ProgramIR((), ("x", "v"), (), (MatMul(matrix="v", src="x", dst="z", transpose=True),))
    diagnostics = validate(p)
    assert [d.code for d in diagnostics] == ["KindMismatch"]
    assert diagnostics[0].index == 0


def test_missing_partial_only_when_required():
    """Test MissingPartial is flagged only with require_partials."""
    p = ProgramIR((), ("x",), (), (outer("y", "dact:relu", ["x"]),))
    assert validate(p) == []
    assert [d.code for d in validate(p, require_partials=True)] == ["MissingPartial"]


def test_mlp_program_shape():
    """Test the MLP builder emits the expected instruction sequence."""
    p = mlp_program(2, d=1)
    assert validate(p) == []
    assert p.matrices == ("W2",)
    kinds = [type(ins).__name__ for ins in p.instructions]
    assert kinds == ["OuterNonlin", "OuterNonlin", "MatMul", "OuterNonlin", "OuterNonlin", "Avg"]
    assert p.outputs == ("out",)


def test_schema_round_trip(tmp_path):
    """Test save_program/load_program reproduce the program."""
    p = mlp_program(2, d=2, xi=[0.5, -1.0])
    path = tmp_path / "program.json"
    save_program(p, path)
    assert load_program(path) == p


def test_load_program_missing_file(tmp_path):
    """Test loading a missing program file raises FileNotFoundError."""
    with pytest.raises(FileNotFoundError, match="Program file not found"):
        load_program(tmp_path / "nope.json")


def test_bind_scalars_unknown():
    """Test binding an undeclared scalar raises UndefinedSymbol."""
    with pytest.raises(UndefinedSymbol):
        bind_scalars(mlp_program(1), {"zeta": 1.0})


def test_backprop_of_lone_vector():
    """Test backprop wrt a vector with no consumers adds only d^x x = 1."""
    p = build_program({"vectors": ["x"]})
    q = backprop_transform(p, "x")
    assert len(q.instructions) == 1
    assert q.instructions[0].dst == grad_name("x", "x")
    assert q.instructions[0].fn.id == "const:1.0"


def test_backprop_is_pure_extension():
    """Test the transform keeps the original instructions as a prefix."""
    p = mlp_program(2)
    q = backprop_transform(p, "out")
    assert q.instructions[:len(p.instructions)] == p.instructions
    assert len(p.instructions) == 6


def test_backprop_target_must_be_vector():
    """Test a scalar target raises KindMismatch."""
    with pytest.raises(KindMismatch):
        backprop_transform(mlp_program(1), "f")


def test_backprop_needs_partials():
    """Test a function without partials in the cone raises MissingPartial."""
    p = build_program({"vectors": ["x"], "instructions": [outer("y", "dact:relu", ["x"])]})
    with pytest.raises(MissingPartial):
        backprop_transform(p, "y")


def test_backprop_through_avg_is_constant():
    """Test a vector consumed only through an average gets a constant gradient."""
    p = build_program({
        "vectors": ["z", "w"],
        "instructions": [Avg(src="z", dst="c"),
                         outer("y", "lincomb:1", ["w"], scalars=["c"])],
    })
    values = execute(backprop_transform(p, "y"), sample_init(p, 16, seed=3))
    dz = values.grad("y", "z")
    np.testing.assert_allclose(dz, np.full(16, dz[0]))
    # d(sum y)/dz_alpha = sum_beta w_beta / n
    assert dz[0] == pytest.approx(values.vectors["w"].mean())


def test_backprop_matches_finite_differences():
    """Test MLP gradients against central differences of the summed output."""
    p = mlp_program(1, d=2, xi=[0.7, -0.4])
    n = 64
    a = sample_init(p, n, seed=1)
    values = execute(backprop_transform(p, "out"), a)
    h = 1e-5
    for name in ("w1_0", "v"):
        base = a.vectors[name]
        numeric = np.zeros(n)
        for i in range(n):
            saved = base[i]
            base[i] = saved + h
            up = execute(p, a).vectors["out"].sum()
            base[i] = saved - h
            down = execute(p, a).vectors["out"].sum()
            base[i] = saved
            numeric[i] = (up - down) / (2 * h)
        analytic = values.grad("out", name)
        assert np.linalg.norm(analytic - numeric) <= 1e-6 * np.linalg.norm(numeric)


def test_total_program_groups():
    """Test the total program replicates per input and shares initial data."""
    p = mlp_program(2, d=1)
    total = total_program(p, ["out"], [{"xi_0": 1.0}, {"xi_0": -0.5}])
    assert total.matrices == p.matrices
    assert total.vectors == p.vectors
    assert total.group("out") == ("out@0", "out@1")
    assert total.group(grad_name("out", "x2")) == (grad_name("out", "x2") + "@0",
                                                   grad_name("out", "x2") + "@1")
    assert set(total.outputs) == {"out@0", "out@1"}
    scalars = {s.name: s.limit for s in total.scalars}
    assert scalars["xi_0@0"] == 1.0
    assert scalars["xi_0@1"] == -0.5


def test_total_program_single_input_matches_backprop():
    """Test one output and one input reproduces the backprop program per value."""
    p = mlp_program(1, d=1, xi=[0.8])
    total = total_program(p, ["out"], [{"xi_0": 0.8}])
    direct = execute(backprop_transform(p, "out"), sample_init(p, 32, seed=5))
    replicated = execute(total, sample_init(total, 32, seed=5))
    np.testing.assert_allclose(replicated.vectors[grad_name("out", "v") + "@0"],
                               direct.grad("out", "v"))


def test_total_program_needs_outputs():
    """Test an empty output list raises EmptyOutputs."""
    with pytest.raises(EmptyOutputs):
        total_program(mlp_program(1), [], [{"xi_0": 1.0}])
