"""Coefficient mini-language.

Grammar (lowest to highest precedence)::

    expr    := term (('+' | '-') term)*          left associative
    term    := unary (('*' | '/') unary)*         left associative
    unary   := '-' unary | power
    power   := atom ('^' unary)?                  right associative
    atom    := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

So ``-x^2`` is ``-(x^2)`` and ``2^-1`` is ``0.5``.  Variables are drawn from
``t, x, y, z, u``; functions are ``exp log sqrt abs tanh`` (one argument) and
``min max pow`` (two arguments).  Expressions evaluate elementwise on numpy
arrays.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ExpressionError

VARIABLES = ("t", "x", "y", "z", "u")

FUNCTIONS: dict[str, tuple[int, Callable]] = {
    "exp": (1, np.exp),
    "log": (1, np.log),
    "sqrt": (1, np.sqrt),
    "abs": (1, np.abs),
    "tanh": (1, np.tanh),
    "min": (2, np.minimum),
    "max": (2, np.maximum),
    "pow": (2, np.power),
}

_BINARY: dict[str, Callable] = {
    "+": np.add,
    "-": np.subtract,
    "*": np.multiply,
    "/": np.divide,
    "^": np.power,
}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


@dataclass(frozen=True)
class Token:
    kind: str  # "num", "name", "op", "end"
    text: str
    pos: int


def tokenize(source: str) -> list[Token]:
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            col = pos + len(source[pos:]) - len(source[pos:].lstrip())
            raise ExpressionError(f"unexpected character {source[col]!r}", col)
        kind = m.lastgroup
        tokens.append(Token(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(Token("end", "", n))
    return tokens


# ---------------------------------------------------------------------------
# AST


class Node:
    def evaluate(self, env: dict[str, np.ndarray]):
        raise NotImplementedError

    def variables(self) -> set[str]:
        return set()


@dataclass(frozen=True)
class Num(Node):
    value: float

    def evaluate(self, env):
        return np.float64(self.value)

    def __str__(self):
        return repr(float(self.value))


@dataclass(frozen=True)
class Var(Node):
    name: str

    def evaluate(self, env):
        return env[self.name]

    def variables(self):
        return {self.name}

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Neg(Node):
    operand: Node

    def evaluate(self, env):
        return np.negative(self.operand.evaluate(env))

    def variables(self):
        return self.operand.variables()

    def __str__(self):
        return f"(-{self.operand})"


@dataclass(frozen=True)
class BinOp(Node):
    op: str
    left: Node
    right: Node

    def evaluate(self, env):
        return _BINARY[self.op](self.left.evaluate(env), self.right.evaluate(env))

    def variables(self):
        return self.left.variables() | self.right.variables()

    def __str__(self):
        return f"({self.left} {self.op} {self.right})"


@dataclass(frozen=True)
class Call(Node):
    name: str
    args: tuple[Node, ...]

    def evaluate(self, env):
        fn = FUNCTIONS[self.name][1]
        return fn(*(a.evaluate(env) for a in self.args))

    def variables(self):
        out: set[str] = set()
        for a in self.args:
            out |= a.variables()
        return out

    def __str__(self):
        return f"{self.name}({', '.join(str(a) for a in self.args)})"


# ---------------------------------------------------------------------------
# parser


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = tokenize(source)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def advance(self) -> Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> Token:
        if self.tok.text != text or self.tok.kind != "op":
            found = self.tok.text or "end of input"
            raise ExpressionError(f"expected {text!r}, found {found!r}", self.tok.pos)
        return self.advance()

    def parse(self) -> Node:
        node = self.expr()
        if self.tok.kind != "end":
            raise ExpressionError(f"unexpected token {self.tok.text!r}", self.tok.pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.advance().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.tok.kind == "op" and self.tok.text == "-":
            self.advance()
            return Neg(self.unary())
        if self.tok.kind == "op" and self.tok.text == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.tok.kind == "op" and self.tok.text == "^":
            self.advance()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Node:
        tok = self.tok
        if tok.kind == "num":
            self.advance()
            return Num(float(tok.text))
        if tok.kind == "name":
            self.advance()
            if self.tok.kind == "op" and self.tok.text == "(":
                if tok.text not in FUNCTIONS:
                    raise ExpressionError(f"unknown function {tok.text!r}", tok.pos)
                self.advance()
                args = [self.expr()]
                while self.tok.kind == "op" and self.tok.text == ",":
                    self.advance()
                    args.append(self.expr())
                self.expect(")")
                arity = FUNCTIONS[tok.text][0]
                if len(args) != arity:
                    raise ExpressionError(
                        f"{tok.text} takes {arity} argument(s), got {len(args)}", tok.pos
                    )
                return Call(tok.text, tuple(args))
            if tok.text in FUNCTIONS:
                raise ExpressionError(f"function {tok.text!r} needs arguments", tok.pos)
            if tok.text not in VARIABLES:
                raise ExpressionError(f"unknown identifier {tok.text!r}", tok.pos)
            return Var(tok.text)
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        found = tok.text or "end of input"
        raise ExpressionError(f"unexpected {found!r}", tok.pos)


def parse(source: str) -> Node:
    return _Parser(source).parse()


class Coefficient:
    """A parsed expression bound to a positional argument order.

    ``Coefficient("z*z", ["t", "x", "y", "z", "u"])(0, 0, 0, 2, 0) == 4``.
    The result is broadcast against all arguments so constant expressions
    still return arrays of the input shape.
    """

    def __init__(self, source: str, allowed: Sequence[str], tree: Node | None = None):
        self.source = source
        self.args = tuple(allowed)
        self.tree = parse(source) if tree is None else tree
        for name in sorted(self.tree.variables()):
            if name not in self.args:
                pos = _first_position(source, name)
                raise ExpressionError(
                    f"variable {name!r} is not allowed here (allowed: {', '.join(self.args)})",
                    pos,
                )

    def __call__(self, *values):
        if len(values) != len(self.args):
            raise TypeError(f"expected {len(self.args)} arguments, got {len(values)}")
        env = {k: np.asarray(v, dtype=float) for k, v in zip(self.args, values)}
        with np.errstate(all="ignore"):
            out = self.tree.evaluate(env)
        shape = np.broadcast_shapes(*(a.shape for a in env.values()))
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy() if shape else float(out)

    def __repr__(self):
        return f"Coefficient({self.source!r}, {list(self.args)!r})"


def parse_coefficient(source: str, allowed: Sequence[str]) -> Coefficient:
    for name in allowed:
        if name not in VARIABLES:
            raise ValueError(f"{name!r} is not a coefficient variable")
    return Coefficient(source, allowed)


def _first_position(source: str, name: str) -> int:
    m = re.search(rf"\b{re.escape(name)}\b", source)
    return m.start() if m else 0
