"""Reward expression language: parse, check, evaluate, print.

All reward components, whether hand-written or produced by a chat backend,
are confined to this small arithmetic language so that untrusted generated
code can be executed safely and reproducibly. Grammar:

    program := { "let" IDENT "=" expr ";" } expr
    expr    := cmp
    cmp     := add { ("<" | "<=" | ">" | ">=" | "==" | "!=") add }
    add     := mul { ("+" | "-") mul }
    mul     := unary { ("*" | "/") unary }
    unary   := "-" unary | atom
    atom    := NUMBER | IDENT | FUNC "(" expr { "," expr } ")" | "(" expr ")"

Comparisons yield 1.0/0.0 so sparse indicator terms and dense terms compose
in ordinary arithmetic. Functions: ``min``/``max`` (two or more arguments),
``abs``, ``exp``, ``sqrt``, ``clamp(x, lo, hi)``, ``if(cond, a, b)``.
``if`` evaluates only the branch selected by the condition; everything else
is strict, and any non-finite intermediate raises :class:`EvalError`.

There are no loops, no user-defined functions, and no assignment beyond
``let``, so evaluation always terminates and cannot mutate the bindings it
is given.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Union

__all__ = [
    "RewardProgram",
    "ParseError",
    "EvalError",
    "parse",
    "check",
    "evaluate",
    "print_program",
    "FUNCTIONS",
]

# function name -> (min arity, max arity or None for variadic)
FUNCTIONS: dict[str, tuple[int, int | None]] = {
    "min": (2, None),
    "max": (2, None),
    "abs": (1, 1),
    "exp": (1, 1),
    "sqrt": (1, 1),
    "clamp": (3, 3),
    "if": (3, 3),
}

_CMP_OPS = ("<", "<=", ">", ">=", "==", "!=")


class ParseError(Exception):
    """Raised when source text cannot be turned into a program."""

    def __init__(self, kind: str, message: str, line: int, col: int):
        super().__init__(f"{kind} at {line}:{col}: {message}")
        self.kind = kind
        self.message = message
        self.line = line
        self.col = col


class EvalError(Exception):
    """Raised when evaluation hits a numeric fault or an unbound name."""

    def __init__(self, kind: str, message: str, line: int, col: int):
        super().__init__(f"{kind} at {line}:{col}: {message}")
        self.kind = kind
        self.message = message
        self.line = line
        self.col = col


# --------------------------------------------------------------------------
# AST
# --------------------------------------------------------------------------

Pos = tuple[int, int]


@dataclass(frozen=True)
class Num:
    value: float
    pos: Pos = field(default=(1, 1), compare=False)


@dataclass(frozen=True)
class Var:
    name: str
    pos: Pos = field(default=(1, 1), compare=False)


@dataclass(frozen=True)
class Neg:
    operand: "Expr"
    pos: Pos = field(default=(1, 1), compare=False)


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"
    pos: Pos = field(default=(1, 1), compare=False)


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Expr", ...]
    pos: Pos = field(default=(1, 1), compare=False)


Expr = Union[Num, Var, Neg, BinOp, Call]


@dataclass(frozen=True)
class RewardProgram:
    """A parsed reward component: let-bindings plus a final expression."""

    source: str
    lets: tuple[tuple[str, Expr], ...]
    body: Expr

    @property
    def free_vars(self) -> frozenset[str]:
        free: set[str] = set()
        bound: set[str] = set()
        for name, expr in self.lets:
            _collect_free(expr, bound, free)
            bound.add(name)
        _collect_free(self.body, bound, free)
        return frozenset(free)

    def __call__(self, bindings: Mapping[str, float]) -> float:
        return evaluate(self, bindings)


def _collect_free(node: Expr, bound: set[str], free: set[str]) -> None:
    if isinstance(node, Var):
        if node.name not in bound:
            free.add(node.name)
    elif isinstance(node, Neg):
        _collect_free(node.operand, bound, free)
    elif isinstance(node, BinOp):
        _collect_free(node.left, bound, free)
        _collect_free(node.right, bound, free)
    elif isinstance(node, Call):
        for a in node.args:
            _collect_free(a, bound, free)


# --------------------------------------------------------------------------
# Lexer
# --------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"(?P<ws>\s+)"
    r"|(?P<num>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op><=|>=|==|!=|[-+*/(),;=<>])"
)


@dataclass(frozen=True)
class _Token:
    kind: str  # "num" | "ident" | "op" | "eof"
    text: str
    line: int
    col: int


def _lex(source: str) -> list[_Token]:
    tokens: list[_Token] = []
    line, col = 1, 1
    i = 0
    while i < len(source):
        m = _TOKEN_RE.match(source, i)
        if m is None:
            raise ParseError("syntax", f"unexpected character {source[i]!r}", line, col)
        text = m.group(0)
        kind = m.lastgroup or "ws"
        if kind != "ws":
            tokens.append(_Token(kind, text, line, col))
        nl = text.count("\n")
        if nl:
            line += nl
            col = len(text) - text.rfind("\n")
        else:
            col += len(text)
        i = m.end()
    tokens.append(_Token("eof", "", line, col))
    return tokens


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = _lex(source)
        self.i = 0

    def _peek(self) -> _Token:
        return self.tokens[self.i]

    def _next(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def _expect_op(self, text: str) -> _Token:
        tok = self._peek()
        if tok.kind != "op" or tok.text != text:
            raise ParseError("syntax", f"expected {text!r}, found {tok.text or 'end of input'!r}", tok.line, tok.col)
        return self._next()

    def parse_program(self) -> RewardProgram:
        lets: list[tuple[str, Expr]] = []
        while self._peek().kind == "ident" and self._peek().text == "let":
            self._next()
            name_tok = self._peek()
            if name_tok.kind != "ident" or name_tok.text == "let" or name_tok.text in FUNCTIONS:
                raise ParseError("syntax", "expected a binding name after 'let'", name_tok.line, name_tok.col)
            self._next()
            self._expect_op("=")
            expr = self._expr()
            self._expect_op(";")
            lets.append((name_tok.text, expr))
        body = self._expr()
        tok = self._peek()
        if tok.kind != "eof":
            raise ParseError("syntax", f"unexpected trailing input {tok.text!r}", tok.line, tok.col)
        return RewardProgram(source=self.source, lets=tuple(lets), body=body)

    def _expr(self) -> Expr:
        return self._cmp()

    def _cmp(self) -> Expr:
        node = self._add()
        while self._peek().kind == "op" and self._peek().text in _CMP_OPS:
            tok = self._next()
            right = self._add()
            node = BinOp(tok.text, node, right, pos=(tok.line, tok.col))
        return node

    def _add(self) -> Expr:
        node = self._mul()
        while self._peek().kind == "op" and self._peek().text in ("+", "-"):
            tok = self._next()
            right = self._mul()
            node = BinOp(tok.text, node, right, pos=(tok.line, tok.col))
        return node

    def _mul(self) -> Expr:
        node = self._unary()
        while self._peek().kind == "op" and self._peek().text in ("*", "/"):
            tok = self._next()
            right = self._unary()
            node = BinOp(tok.text, node, right, pos=(tok.line, tok.col))
        return node

    def _unary(self) -> Expr:
        tok = self._peek()
        if tok.kind == "op" and tok.text == "-":
            self._next()
            return Neg(self._unary(), pos=(tok.line, tok.col))
        return self._atom()

    def _atom(self) -> Expr:
        tok = self._next()
        if tok.kind == "num":
            value = float(tok.text)
            if not math.isfinite(value):
                raise ParseError("syntax", "number literal is too large", tok.line, tok.col)
            return Num(value, pos=(tok.line, tok.col))
        if tok.kind == "ident":
            if tok.text == "let":
                raise ParseError("syntax", "'let' is a keyword", tok.line, tok.col)
            nxt = self._peek()
            if nxt.kind == "op" and nxt.text == "(":
                return self._call(tok)
            if tok.text in FUNCTIONS:
                raise ParseError("syntax", f"function {tok.text!r} used without arguments", tok.line, tok.col)
            return Var(tok.text, pos=(tok.line, tok.col))
        if tok.kind == "op" and tok.text == "(":
            inner = self._expr()
            self._expect_op(")")
            return inner
        raise ParseError("syntax", f"expected an expression, found {tok.text or 'end of input'!r}", tok.line, tok.col)

    def _call(self, name_tok: _Token) -> Expr:
        name = name_tok.text
        if name not in FUNCTIONS:
            raise ParseError("unknown-function", f"unknown function {name!r}", name_tok.line, name_tok.col)
        self._expect_op("(")
        args: list[Expr] = [self._expr()]
        while self._peek().kind == "op" and self._peek().text == ",":
            self._next()
            args.append(self._expr())
        self._expect_op(")")
        lo, hi = FUNCTIONS[name]
        if len(args) < lo or (hi is not None and len(args) > hi):
            want = str(lo) if hi == lo else (f"{lo}+" if hi is None else f"{lo}..{hi}")
            raise ParseError("arity", f"{name} takes {want} arguments, got {len(args)}", name_tok.line, name_tok.col)
        return Call(name, tuple(args), pos=(name_tok.line, name_tok.col))


def parse(source: str) -> RewardProgram:
    """Parse source text; raises :class:`ParseError` with a position."""
    return _Parser(source).parse_program()


def check(program: RewardProgram, schema: Iterable[str]) -> frozenset[str]:
    """Names the program needs that the schema does not provide.

    Purely syntactic: never evaluates anything. An empty result means the
    program can be evaluated against any bindings covering the schema.
    """
    return frozenset(program.free_vars - set(schema))


# --------------------------------------------------------------------------
# Evaluation (compiled to closures; the test suite carries an independent
# direct-recursion oracle)
# --------------------------------------------------------------------------

_Compiled = Callable[[dict[str, float]], float]


def _guard(value: float, pos: Pos) -> float:
    if not math.isfinite(value):
        raise EvalError("numeric", "non-finite result", pos[0], pos[1])
    return value


def _compile(node: Expr) -> _Compiled:
    pos = node.pos
    if isinstance(node, Num):
        v = node.value
        return lambda env: v
    if isinstance(node, Var):
        name = node.name

        def run_var(env: dict[str, float]) -> float:
            try:
                return env[name]
            except KeyError:
                raise EvalError("unresolved-identifier", f"unbound name {name!r}", pos[0], pos[1]) from None

        return run_var
    if isinstance(node, Neg):
        f = _compile(node.operand)
        return lambda env: -f(env)
    if isinstance(node, BinOp):
        lf, rf = _compile(node.left), _compile(node.right)
        op = node.op
        if op == "+":
            return lambda env: _guard(lf(env) + rf(env), pos)
        if op == "-":
            return lambda env: _guard(lf(env) - rf(env), pos)
        if op == "*":
            return lambda env: _guard(lf(env) * rf(env), pos)
        if op == "/":

            def run_div(env: dict[str, float]) -> float:
                den = rf(env)
                if den == 0.0:
                    raise EvalError("numeric", "division by zero", pos[0], pos[1])
                return _guard(lf(env) / den, pos)

            return run_div
        cmp = {
            "<": lambda a, b: a < b,
            "<=": lambda a, b: a <= b,
            ">": lambda a, b: a > b,
            ">=": lambda a, b: a >= b,
            "==": lambda a, b: a == b,
            "!=": lambda a, b: a != b,
        }[op]
        return lambda env: 1.0 if cmp(lf(env), rf(env)) else 0.0
    if isinstance(node, Call):
        fns = [_compile(a) for a in node.args]
        name = node.func
        if name == "if":
            cond, then, other = fns
            return lambda env: then(env) if cond(env) != 0.0 else other(env)
        if name == "min":
            return lambda env: min(f(env) for f in fns)
        if name == "max":
            return lambda env: max(f(env) for f in fns)
        if name == "abs":
            f = fns[0]
            return lambda env: abs(f(env))
        if name == "clamp":
            xf, lof, hif = fns
            return lambda env: min(max(xf(env), lof(env)), hif(env))
        if name == "exp":
            f = fns[0]

            def run_exp(env: dict[str, float]) -> float:
                try:
                    return math.exp(f(env))
                except OverflowError:
                    raise EvalError("numeric", "exp overflow", pos[0], pos[1]) from None

            return run_exp
        if name == "sqrt":
            f = fns[0]

            def run_sqrt(env: dict[str, float]) -> float:
                try:
                    return math.sqrt(f(env))
                except ValueError:
                    raise EvalError("numeric", "sqrt of a negative number", pos[0], pos[1]) from None

            return run_sqrt
    raise AssertionError(f"unhandled node {node!r}")


_COMPILE_CACHE: dict[int, tuple[RewardProgram, _Compiled]] = {}


def compile_program(program: RewardProgram) -> _Compiled:
    """Compile once; reuse across per-step evaluations in training loops."""
    cached = _COMPILE_CACHE.get(id(program))
    if cached is not None and cached[0] is program:
        return cached[1]
    lets = [(name, _compile(expr)) for name, expr in program.lets]
    body = _compile(program.body)

    def run(bindings: Mapping[str, float]) -> float:
        env = dict(bindings)
        for name, fn in lets:
            env[name] = fn(env)
        return _guard(body(env), program.body.pos)

    _COMPILE_CACHE[id(program)] = (program, run)
    return run


def evaluate(program: RewardProgram, bindings: Mapping[str, float]) -> float:
    """Evaluate against scalar bindings; raises :class:`EvalError` on faults.

    Never mutates ``bindings``; let-bound names live in a private copy.
    """
    return compile_program(program)(bindings)


# --------------------------------------------------------------------------
# Canonical printing
# --------------------------------------------------------------------------

_PREC = {"<": 1, "<=": 1, ">": 1, ">=": 1, "==": 1, "!=": 1, "+": 2, "-": 2, "*": 3, "/": 3}


def _fmt(node: Expr, parent_prec: int = 0, right_side: bool = False) -> str:
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return "-" + _fmt(node.operand, 4, False)
    if isinstance(node, Call):
        return f"{node.func}({', '.join(_fmt(a) for a in node.args)})"
    prec = _PREC[node.op]
    text = f"{_fmt(node.left, prec, False)} {node.op} {_fmt(node.right, prec, True)}"
    if prec < parent_prec or (prec == parent_prec and right_side):
        return f"({text})"
    return text


def print_program(program: RewardProgram) -> str:
    """Canonical text whose parse has an AST identical to ``program``'s."""
    lines = [f"let {name} = {_fmt(expr)};" for name, expr in program.lets]
    lines.append(_fmt(program.body))
    return "\n".join(lines)
