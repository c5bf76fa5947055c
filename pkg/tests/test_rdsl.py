"""Expression language: parse/print round-trips, oracle agreement, faults."""

from __future__ import annotations

import math
import random

import pytest

from helpers import ast_shape, eval_both, gen_env, gen_program, oracle_eval
from rewardsearch import rdsl

SCHEMA = ("x", "y", "z", "served", "b_max", "d_target", "e_step")


# ---------------------------------------------------------------------------
# Parsing and printing
# ---------------------------------------------------------------------------


def test_roundtrip_generated_asts():
    rng = random.Random(20240817)
    for _ in range(300):
        program = gen_program(rng)
        text = rdsl.print_program(program)
        reparsed = rdsl.parse(text)
        assert ast_shape(reparsed) == ast_shape(program), text


def test_print_is_a_fixpoint():
    rng = random.Random(11)
    for _ in range(100):
        program = gen_program(rng)
        text = rdsl.print_program(program)
        assert rdsl.print_program(rdsl.parse(text)) == text


def test_printer_parenthesization():
    cases = {
        "a - (b - c)": rdsl.BinOp("-", rdsl.Var("a"), rdsl.BinOp("-", rdsl.Var("b"), rdsl.Var("c"))),
        "a - b - c": rdsl.BinOp("-", rdsl.BinOp("-", rdsl.Var("a"), rdsl.Var("b")), rdsl.Var("c")),
        "(a + b) * c": rdsl.BinOp("*", rdsl.BinOp("+", rdsl.Var("a"), rdsl.Var("b")), rdsl.Var("c")),
        "a + b * c": rdsl.BinOp("+", rdsl.Var("a"), rdsl.BinOp("*", rdsl.Var("b"), rdsl.Var("c"))),
        "-(a + b)": rdsl.Neg(rdsl.BinOp("+", rdsl.Var("a"), rdsl.Var("b"))),
        "--a": rdsl.Neg(rdsl.Neg(rdsl.Var("a"))),
        "a / (b / c)": rdsl.BinOp("/", rdsl.Var("a"), rdsl.BinOp("/", rdsl.Var("b"), rdsl.Var("c"))),
        "min(a, b, c)": rdsl.Call("min", (rdsl.Var("a"), rdsl.Var("b"), rdsl.Var("c"))),
    }
    for expected, node in cases.items():
        program = rdsl.RewardProgram(source="", lets=(), body=node)
        assert rdsl.print_program(program) == expected
        assert rdsl.parse(expected).body == node


def test_let_bindings_roundtrip():
    src = "let near = d_target < 10.0;\nlet bonus = near * 2.0;\nbonus - e_step"
    program = rdsl.parse(src)
    assert [name for name, _ in program.lets] == ["near", "bonus"]
    assert rdsl.print_program(program) == src


def test_scientific_notation_literals():
    for text in ("1e-05", "2.5e+20", "1.0", "0.001", "3e4"):
        program = rdsl.parse(text)
        assert isinstance(program.body, rdsl.Num)
        assert program.body.value == float(text)


def test_comparison_chain_is_left_associative():
    body = rdsl.parse("a < b < c").body
    assert isinstance(body, rdsl.BinOp) and body.op == "<"
    assert isinstance(body.left, rdsl.BinOp) and body.left.op == "<"


@pytest.mark.parametrize(
    "source",
    [
        "1e999",  # overflows float -> rejected, no inf literals
        "foo(1.0)",  # unknown function
        "abs(1.0, 2.0)",  # arity
        "clamp(1.0)",  # arity
        "min(1.0)",  # min needs two
        "1.0 2.0",  # trailing input
        "let = 1.0; x",  # missing binding name
        "let min = 1.0; x",  # function name as binding
        "let x 1.0; x",  # missing '='
        "let x = 1.0 x",  # missing ';'
        "x @ y",  # unknown character
        "min + 1.0",  # function without call
        "(x",  # unclosed paren
        "",  # empty input
        "let x = ; x",  # missing expression
    ],
)
def test_parse_errors(source):
    with pytest.raises(rdsl.ParseError) as exc:
        rdsl.parse(source)
    assert exc.value.line >= 1 and exc.value.col >= 1


def test_parse_error_position_points_at_offender():
    with pytest.raises(rdsl.ParseError) as exc:
        rdsl.parse("let a = 1.0;\nfoo(a)")
    assert exc.value.line == 2
    assert exc.value.col == 1


# ---------------------------------------------------------------------------
# Free variables / schema checking
# ---------------------------------------------------------------------------


def test_free_vars_sequential_lets():
    program = rdsl.parse("let a = x + 1.0;\nlet b = a + y;\na + b + z")
    assert program.free_vars == {"x", "y", "z"}


def test_free_vars_self_reference_before_binding():
    program = rdsl.parse("let x = x + 1.0; x")
    assert program.free_vars == {"x"}


def test_check_reports_missing_names():
    program = rdsl.parse("served - mystery + x")
    assert rdsl.check(program, SCHEMA) == frozenset({"mystery"})
    assert rdsl.check(program, list(SCHEMA) + ["mystery"]) == frozenset()


# ---------------------------------------------------------------------------
# Evaluation semantics
# ---------------------------------------------------------------------------


def test_oracle_agreement_generated():
    rng = random.Random(99)
    for _ in range(200):
        program = gen_program(rng)
        for _ in range(5):
            env = gen_env(rng)
            got, want = eval_both(program, env)
            assert got == want, rdsl.print_program(program)


def test_comparisons_yield_unit_floats():
    env = {"a": 1.0, "b": 2.0}
    assert rdsl.evaluate(rdsl.parse("a < b"), env) == 1.0
    assert rdsl.evaluate(rdsl.parse("a > b"), env) == 0.0
    assert rdsl.evaluate(rdsl.parse("a == a"), env) == 1.0
    assert rdsl.evaluate(rdsl.parse("a != a"), env) == 0.0
    assert rdsl.evaluate(rdsl.parse("(a <= b) + (b >= a)"), env) == 2.0


def test_if_is_lazy():
    # The untaken branch would divide by zero if it were evaluated.
    program = rdsl.parse("if(x > 0.0, 1.0, 1.0 / 0.0)")
    assert rdsl.evaluate(program, {"x": 5.0}) == 1.0
    with pytest.raises(rdsl.EvalError):
        rdsl.evaluate(program, {"x": -5.0})


def test_clamp_and_minmax():
    env: dict[str, float] = {}
    assert rdsl.evaluate(rdsl.parse("clamp(5.0, 0.0, 2.0)"), env) == 2.0
    assert rdsl.evaluate(rdsl.parse("clamp(-5.0, 0.0, 2.0)"), env) == 0.0
    assert rdsl.evaluate(rdsl.parse("clamp(1.0, 0.0, 2.0)"), env) == 1.0
    assert rdsl.evaluate(rdsl.parse("min(3.0, 1.0, 2.0)"), env) == 1.0
    assert rdsl.evaluate(rdsl.parse("max(3.0, 1.0, 2.0)"), env) == 3.0
    assert rdsl.evaluate(rdsl.parse("abs(-4.0)"), env) == 4.0


@pytest.mark.parametrize(
    "source,env",
    [
        ("1.0 / x", {"x": 0.0}),
        ("exp(x)", {"x": 1000.0}),
        ("sqrt(x)", {"x": -1.0}),
        ("x * x", {"x": 1e308}),  # overflow to inf -> non-finite guard
    ],
)
def test_numeric_faults(source, env):
    with pytest.raises(rdsl.EvalError) as exc:
        rdsl.evaluate(rdsl.parse(source), env)
    assert exc.value.kind == "numeric"


def test_unbound_name_fault():
    with pytest.raises(rdsl.EvalError) as exc:
        rdsl.evaluate(rdsl.parse("x + ghost"), {"x": 1.0})
    assert exc.value.kind == "unresolved-identifier"
    assert "ghost" in exc.value.message


def test_eval_error_carries_position():
    with pytest.raises(rdsl.EvalError) as exc:
        rdsl.evaluate(rdsl.parse("let a = 1.0;\n1.0 / (a - a)"), {})
    assert exc.value.line == 2


def test_evaluate_never_mutates_bindings():
    bindings = {"x": 1.0}
    rdsl.evaluate(rdsl.parse("let x = x + 1.0; let y = 2.0; x + y"), bindings)
    assert bindings == {"x": 1.0}


def test_negative_zero_denominator_still_faults():
    with pytest.raises(rdsl.EvalError):
        rdsl.evaluate(rdsl.parse("1.0 / x"), {"x": -0.0})


def test_compile_cache_reuses_closure():
    program = rdsl.parse("x + 1.0")
    fn1 = rdsl.compile_program(program)
    fn2 = rdsl.compile_program(program)
    assert fn1 is fn2
    assert fn1({"x": 2.0}) == 3.0


def test_oracle_error_cases_match():
    rng = random.Random(7)
    cases = [
        ("1.0 / (x - x)", {"x": 3.0}),
        ("exp(x * x)", {"x": 40.0}),
        ("sqrt(x - 10.0)", {"x": 0.0}),
        ("let a = y / x; a + 1.0", {"x": 0.0, "y": 1.0}),
    ]
    for source, env in cases:
        got, want = eval_both(rdsl.parse(source), env)
        assert got == want == ("err", "numeric")
    # agreement also holds on plain values
    for _ in range(50):
        v = rng.uniform(-5, 5)
        program = rdsl.parse("exp(min(x, 1.0)) + sqrt(abs(x))")
        assert rdsl.evaluate(program, {"x": v}) == oracle_eval(program, {"x": v})


def test_reward_shaped_program_example():
    source = (
        "let danger = d_min_auv < collision_dist * 2.0;\n"
        "let crash = d_min_auv < collision_dist;\n"
        "-10.0 * crash - danger"
    )
    program = rdsl.parse(source)
    env = {"d_min_auv": 5.0, "collision_dist": 8.0}
    assert rdsl.evaluate(program, env) == -11.0
    env = {"d_min_auv": 12.0, "collision_dist": 8.0}
    assert rdsl.evaluate(program, env) == -1.0
    env = {"d_min_auv": 30.0, "collision_dist": 8.0}
    assert rdsl.evaluate(program, env) == 0.0


def test_exp_within_range_is_exact():
    program = rdsl.parse("exp(x)")
    for v in (-700.0, -1.0, 0.0, 1.0, 700.0):
        assert rdsl.evaluate(program, {"x": v}) == math.exp(v)
