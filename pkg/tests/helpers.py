"""Shared test utilities.

The expression-language oracle here deliberately re-implements evaluation by
direct recursion over the AST, sharing no code with the compiled engine, so
the two can check each other. Error kinds and operand evaluation order mirror
the documented semantics: division inspects its denominator first, `if` only
evaluates the taken branch, and every arithmetic result must stay finite.
"""

from __future__ import annotations

import math
import random

from rewardsearch import rdsl
from rewardsearch.rewards import Requirement
from rewardsearch.td3 import EpisodeEntry, TrainingLog
from rewardsearch.world import EpisodeMetrics, WorldConfig

# ---------------------------------------------------------------------------
# Independent oracle evaluator
# ---------------------------------------------------------------------------


class OracleError(Exception):
    def __init__(self, kind: str):
        super().__init__(kind)
        self.kind = kind


def _finite(value: float) -> float:
    if not math.isfinite(value):
        raise OracleError("numeric")
    return value


def oracle_eval_expr(node, env: dict[str, float]) -> float:
    if isinstance(node, rdsl.Num):
        return node.value
    if isinstance(node, rdsl.Var):
        if node.name not in env:
            raise OracleError("unresolved-identifier")
        return env[node.name]
    if isinstance(node, rdsl.Neg):
        return -oracle_eval_expr(node.operand, env)
    if isinstance(node, rdsl.BinOp):
        op = node.op
        if op == "/":
            den = oracle_eval_expr(node.right, env)
            if den == 0.0:
                raise OracleError("numeric")
            return _finite(oracle_eval_expr(node.left, env) / den)
        left = oracle_eval_expr(node.left, env)
        right = oracle_eval_expr(node.right, env)
        if op == "+":
            return _finite(left + right)
        if op == "-":
            return _finite(left - right)
        if op == "*":
            return _finite(left * right)
        if op == "<":
            return 1.0 if left < right else 0.0
        if op == "<=":
            return 1.0 if left <= right else 0.0
        if op == ">":
            return 1.0 if left > right else 0.0
        if op == ">=":
            return 1.0 if left >= right else 0.0
        if op == "==":
            return 1.0 if left == right else 0.0
        if op == "!=":
            return 1.0 if left != right else 0.0
        raise AssertionError(f"oracle: unknown operator {op!r}")
    if isinstance(node, rdsl.Call):
        name = node.func
        if name == "if":
            cond = oracle_eval_expr(node.args[0], env)
            branch = node.args[1] if cond != 0.0 else node.args[2]
            return oracle_eval_expr(branch, env)
        vals = [oracle_eval_expr(a, env) for a in node.args]
        if name == "min":
            return min(vals)
        if name == "max":
            return max(vals)
        if name == "abs":
            return abs(vals[0])
        if name == "clamp":
            return min(max(vals[0], vals[1]), vals[2])
        if name == "exp":
            try:
                return math.exp(vals[0])
            except OverflowError:
                raise OracleError("numeric") from None
        if name == "sqrt":
            try:
                return math.sqrt(vals[0])
            except ValueError:
                raise OracleError("numeric") from None
        raise AssertionError(f"oracle: unknown function {name!r}")
    raise AssertionError(f"oracle: unknown node {node!r}")


def oracle_eval(program: rdsl.RewardProgram, bindings: dict[str, float]) -> float:
    env = dict(bindings)
    for name, expr in program.lets:
        env[name] = oracle_eval_expr(expr, env)
    return _finite(oracle_eval_expr(program.body, env))


def eval_both(program: rdsl.RewardProgram, env: dict[str, float]):
    """(engine outcome, oracle outcome) as ('ok', value) or ('err', kind)."""
    try:
        got = ("ok", rdsl.evaluate(program, env))
    except rdsl.EvalError as err:
        got = ("err", err.kind)
    try:
        want = ("ok", oracle_eval(program, env))
    except OracleError as err:
        want = ("err", err.kind)
    return got, want


# ---------------------------------------------------------------------------
# Random AST generation
# ---------------------------------------------------------------------------

SCHEMA_VARS = ("x", "y", "z", "served", "b_max", "d_target", "e_step")

_NUM_PALETTE = (0.0, 0.25, 0.5, 1.0, 2.0, 3.0, 10.0, 20.0, 100.0, 0.001)


def gen_num(rng: random.Random) -> rdsl.Num:
    # Literals are non-negative by grammar; negation is an explicit node.
    if rng.random() < 0.6:
        return rdsl.Num(rng.choice(_NUM_PALETTE))
    return rdsl.Num(round(rng.uniform(0.0, 50.0), 4))


def gen_expr(rng: random.Random, depth: int, names: tuple[str, ...]) -> rdsl.Expr:
    if depth <= 0 or rng.random() < 0.15:
        if names and rng.random() < 0.55:
            return rdsl.Var(rng.choice(names))
        return gen_num(rng)
    roll = rng.random()
    sub = lambda: gen_expr(rng, depth - 1, names)  # noqa: E731
    if roll < 0.35:
        op = rng.choice(("+", "-", "*", "/"))
        return rdsl.BinOp(op, sub(), sub())
    if roll < 0.50:
        op = rng.choice(("<", "<=", ">", ">=", "==", "!="))
        return rdsl.BinOp(op, sub(), sub())
    if roll < 0.62:
        return rdsl.Neg(sub())
    fn = rng.choice(("min", "max", "abs", "exp", "sqrt", "clamp", "if", "min", "if"))
    lo, hi = rdsl.FUNCTIONS[fn]
    n_args = rng.randint(lo, hi if hi is not None else lo + 2)
    return rdsl.Call(fn, tuple(sub() for _ in range(n_args)))


def gen_program(rng: random.Random, max_depth: int = 4) -> rdsl.RewardProgram:
    names = list(SCHEMA_VARS)
    lets = []
    for i in range(rng.randint(0, 3)):
        let_name = f"t{i}"
        lets.append((let_name, gen_expr(rng, rng.randint(1, max_depth), tuple(names))))
        names.append(let_name)
    body = gen_expr(rng, rng.randint(1, max_depth), tuple(names))
    program = rdsl.RewardProgram(source="<generated>", lets=tuple(lets), body=body)
    return program


def gen_env(rng: random.Random) -> dict[str, float]:
    env = {}
    for name in SCHEMA_VARS:
        roll = rng.random()
        if roll < 0.15:
            env[name] = 0.0
        elif roll < 0.55:
            env[name] = rng.uniform(-20.0, 20.0)
        else:
            env[name] = rng.uniform(-2.0, 2.0)
    return env


def ast_shape(program: rdsl.RewardProgram) -> tuple:
    """Structural identity of a program: its lets and body, ignoring source
    text (the printer produces different text than the generator's tag)."""
    return (program.lets, program.body)


# ---------------------------------------------------------------------------
# Synthetic training-log construction
# ---------------------------------------------------------------------------


def make_metrics(
    collisions: float = 0.0,
    border: float = 0.0,
    overflow: float = 0.0,
    energy: float = 1000.0,
    served: float = 5.0,
    per_component: dict[str, float] | None = None,
) -> EpisodeMetrics:
    return EpisodeMetrics(
        total_collisions=collisions,
        total_border_hits=border,
        overflow_per_node=overflow,
        total_energy=energy,
        total_served=served,
        return_per_component=dict(per_component or {}),
    )


def make_log(
    metrics_seq,
    weights: dict[str, float] | None = None,
    component_returns_seq=None,
    seed: int = 0,
    train_steps: int = 1000,
    episode_len: int = 200,
    error: str | None = None,
) -> TrainingLog:
    weights = dict(weights or {"w_col": 1.0})
    entries = []
    for i, metrics in enumerate(metrics_seq):
        if component_returns_seq is not None:
            returns = dict(component_returns_seq[i])
        elif metrics.return_per_component:
            returns = dict(metrics.return_per_component)
        else:
            returns = {cid: 0.0 for cid in weights}
        weighted = sum(weights.get(cid, 0.0) * v for cid, v in returns.items())
        entries.append(
            EpisodeEntry(
                episode=i,
                metrics=metrics,
                weighted_return=weighted,
                component_returns=returns,
            )
        )
    return TrainingLog(
        seed=seed,
        train_steps=train_steps,
        episode_len=episode_len,
        weights=weights,
        episodes=tuple(entries),
        losses=((0, 0.5, 0.4),),
        wall_clock_s=0.0,
        error=error,
    )


def make_requirement(
    rid: str = "r",
    metric: str = "total_collisions",
    comparator: str = "<=",
    threshold: float = 0.0,
    kind: str = "safety",
) -> Requirement:
    return Requirement(id=rid, kind=kind, metric=metric, comparator=comparator, threshold=threshold)


# ---------------------------------------------------------------------------
# Small, fast run configurations
# ---------------------------------------------------------------------------


def fast_world_config(episode_len: int = 40) -> WorldConfig:
    return WorldConfig(episode_len=episode_len)
