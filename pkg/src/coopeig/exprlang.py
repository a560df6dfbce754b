"""Small arithmetic expression language for coefficient oracles in configs.

Grammar, lowest precedence first::

    cond    := sum ( '<' | '<=' | '>' | '>=' | '==' | '!=' ) sum
    sum     := product (('+' | '-') product)*
    product := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := atom ('^' unary)?              right associative
    atom    := number | name | name '(' args ')' | '(' sum ')'

Names are ``x1 .. xd`` (coordinates), ``k`` (regime, 1-based) and the constant
``pi``. Functions: sin cos exp log tanh abs sign sqrt (one argument),
min max (two or more), and ``ind(cond)`` which is 1 where the comparison
holds and 0 elsewhere. Comparisons are only legal as the argument of ``ind``.

Offsets in error messages are 1-based byte positions; end of input is
reported as ``len(text) + 1``.

Evaluation is vectorized: ``x`` may be a single point of shape ``(d,)`` or a
batch ``(n, d)``, ``k`` a scalar or an ``(n,)`` array.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import EvalError, ExprSyntaxError

__all__ = [
    "Expr", "Num", "Var", "Unary", "Binary", "Call", "Compare",
    "parse", "to_source", "evaluate", "variables", "check_variables",
]

UNARY_FUNCS = ("sin", "cos", "exp", "log", "tanh", "abs", "sign", "sqrt")
VARIADIC_FUNCS = ("min", "max")
FUNCTIONS = UNARY_FUNCS + VARIADIC_FUNCS + ("ind",)
CMP_OPS = ("<=", ">=", "==", "!=", "<", ">")
CONSTANTS = {"pi": math.pi}


@dataclass(frozen=True)
class Num:
    value: float
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Var:
    name: str
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Expr"
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Compare:
    op: str
    left: "Expr"
    right: "Expr"
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple
    pos: int = field(default=0, compare=False)


Expr = Union[Num, Var, Unary, Binary, Compare, Call]


# ---------------------------------------------------------------- tokenizer

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op><=|>=|==|!=|[-+*/^(),<>]))"
)


@dataclass
class _Tok:
    kind: str  # num, name, op, end
    text: str
    pos: int  # 1-based


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    i = 0
    n = len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        m = _TOKEN.match(text, i)
        if m is None or m.end() == i:
            raise ExprSyntaxError(f"unexpected character {text[i]!r}", i + 1,
                                  frozenset({"number", "name", "operator"}))
        kind = m.lastgroup
        start = m.start(kind)
        toks.append(_Tok(kind, m.group(kind), start + 1))
        i = m.end()
    toks.append(_Tok("end", "", len(text.encode("utf-8")) + 1))
    return toks


# ------------------------------------------------------------------- parser

_ATOM_START = frozenset({"number", "name", "(", "-"})


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def advance(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def fail(self, expected) -> None:
        t = self.tok
        what = "end of input" if t.kind == "end" else repr(t.text)
        raise ExprSyntaxError(f"unexpected {what}", t.pos, frozenset(expected))

    def expect(self, text: str) -> _Tok:
        if self.tok.kind == "op" and self.tok.text == text:
            return self.advance()
        self.fail({text})

    def at_op(self, *ops: str) -> bool:
        return self.tok.kind == "op" and self.tok.text in ops

    def top(self) -> Expr:
        e = self.sum()
        if self.at_op(*CMP_OPS):
            raise ExprSyntaxError("comparison outside ind()", self.tok.pos,
                                  frozenset({"+", "-", "*", "/", "^", "end of input"}))
        if self.tok.kind != "end":
            self.fail({"+", "-", "*", "/", "^", "end of input"})
        return e

    def cond(self) -> Compare:
        left = self.sum()
        if not self.at_op(*CMP_OPS):
            self.fail(set(CMP_OPS))
        op = self.advance()
        right = self.sum()
        return Compare(op.text, left, right, op.pos)

    def sum(self) -> Expr:
        e = self.product()
        while self.at_op("+", "-"):
            op = self.advance()
            e = Binary(op.text, e, self.product(), op.pos)
        return e

    def product(self) -> Expr:
        e = self.unary()
        while self.at_op("*", "/"):
            op = self.advance()
            e = Binary(op.text, e, self.unary(), op.pos)
        return e

    def unary(self) -> Expr:
        if self.at_op("-"):
            op = self.advance()
            return Unary("-", self.unary(), op.pos)
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.at_op("^"):
            op = self.advance()
            return Binary("^", base, self.unary(), op.pos)
        return base

    def atom(self) -> Expr:
        t = self.tok
        if t.kind == "num":
            self.advance()
            return Num(float(t.text), t.pos)
        if t.kind == "name":
            self.advance()
            if self.at_op("("):
                return self.call(t)
            if t.text in FUNCTIONS:
                self.fail({"("})
            return Var(t.text, t.pos)
        if self.at_op("("):
            self.advance()
            e = self.sum()
            self.expect(")")
            return e
        self.fail(_ATOM_START)

    def call(self, name: _Tok) -> Call:
        if name.text not in FUNCTIONS:
            raise ExprSyntaxError(f"unknown function {name.text!r}", name.pos,
                                  frozenset(FUNCTIONS))
        self.expect("(")
        if name.text == "ind":
            args = (self.cond(),)
        else:
            args = [self.sum()]
            while self.at_op(","):
                self.advance()
                args.append(self.sum())
            args = tuple(args)
        if not self.at_op(")"):
            self.fail({")", ","} if name.text in VARIADIC_FUNCS else {")"})
        self.advance()
        if name.text in UNARY_FUNCS and len(args) != 1:
            raise ExprSyntaxError(f"{name.text} takes one argument", name.pos, frozenset({")"}))
        if name.text in VARIADIC_FUNCS and len(args) < 2:
            raise ExprSyntaxError(f"{name.text} takes at least two arguments", name.pos,
                                  frozenset({","}))
        return Call(name.text, args, name.pos)


def parse(text: str) -> Expr:
    """Parse ``text`` into an AST, raising :class:`ExprSyntaxError` on bad input."""
    return _Parser(text).top()


# ------------------------------------------------------------------ printer

_PREC = {"cmp": 1, "+": 2, "-": 2, "*": 3, "/": 3, "neg": 4, "^": 5}
_ATOM_PREC = 6


def _prec(e: Expr) -> int:
    if isinstance(e, Binary):
        return _PREC[e.op]
    if isinstance(e, Unary):
        return _PREC["neg"]
    if isinstance(e, Compare):
        return _PREC["cmp"]
    return _ATOM_PREC


def _wrap(e: Expr, need: int) -> str:
    s = to_source(e)
    return f"({s})" if _prec(e) < need else s


def to_source(e: Expr) -> str:
    """Render an AST back to text that parses to an equal AST."""
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        return "-" + _wrap(e.operand, _PREC["neg"])
    if isinstance(e, Binary):
        p = _PREC[e.op]
        if e.op == "^":
            return f"{_wrap(e.left, _ATOM_PREC)}^{_wrap(e.right, _PREC['neg'])}"
        return f"{_wrap(e.left, p)} {e.op} {_wrap(e.right, p + 1)}"
    if isinstance(e, Compare):
        return f"{to_source(e.left)} {e.op} {to_source(e.right)}"
    if isinstance(e, Call):
        return f"{e.name}({', '.join(to_source(a) for a in e.args)})"
    raise TypeError(f"not an expression node: {e!r}")


# ---------------------------------------------------------------- evaluator

def variables(e: Expr) -> set[str]:
    """Names referenced by ``e`` (constants excluded)."""
    if isinstance(e, Var):
        return set() if e.name in CONSTANTS else {e.name}
    if isinstance(e, (Unary,)):
        return variables(e.operand)
    if isinstance(e, (Binary, Compare)):
        return variables(e.left) | variables(e.right)
    if isinstance(e, Call):
        out: set[str] = set()
        for a in e.args:
            out |= variables(a)
        return out
    return set()


def _var_allowed(name: str, dim: int) -> bool:
    if name == "k" or name in CONSTANTS:
        return True
    m = re.fullmatch(r"x([1-9][0-9]*)", name)
    return m is not None and int(m.group(1)) <= dim


def check_variables(e: Expr, dim: int) -> list[str]:
    """Return the referenced names that are not valid in dimension ``dim``."""
    return sorted(v for v in variables(e) if not _var_allowed(v, dim))


def _finite(value, node) -> None:
    if not np.all(np.isfinite(value)):
        raise EvalError("non-finite", node.pos)


def _eval(e: Expr, x: np.ndarray, k):
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        if e.name == "k":
            return k
        if e.name in CONSTANTS:
            return CONSTANTS[e.name]
        if _var_allowed(e.name, x.shape[-1]):
            return x[..., int(e.name[1:]) - 1]
        raise EvalError("unknown-variable", e.pos, e.name)
    if isinstance(e, Unary):
        return -_eval(e.operand, x, k)
    if isinstance(e, Binary):
        a = _eval(e.left, x, k)
        b = _eval(e.right, x, k)
        if e.op == "+":
            r = np.add(a, b)
        elif e.op == "-":
            r = np.subtract(a, b)
        elif e.op == "*":
            r = np.multiply(a, b)
        elif e.op == "/":
            if np.any(np.asarray(b) == 0):
                raise EvalError("division-by-zero", e.pos)
            r = np.divide(a, b)
        else:
            r = np.power(np.asarray(a, dtype=float), b)
        _finite(r, e)
        return r
    if isinstance(e, Compare):
        a = _eval(e.left, x, k)
        b = _eval(e.right, x, k)
        if np.any(np.isnan(a)) or np.any(np.isnan(b)):
            raise EvalError("nan-comparison", e.pos)
        ops = {"<": np.less, "<=": np.less_equal, ">": np.greater,
               ">=": np.greater_equal, "==": np.equal, "!=": np.not_equal}
        return ops[e.op](a, b)
    if isinstance(e, Call):
        args = [_eval(a, x, k) for a in e.args]
        name = e.name
        if name == "ind":
            return np.where(args[0], 1.0, 0.0)
        if name == "min":
            r = args[0]
            for a in args[1:]:
                r = np.minimum(r, a)
            return r
        if name == "max":
            r = args[0]
            for a in args[1:]:
                r = np.maximum(r, a)
            return r
        a = args[0]
        if name == "log" and np.any(np.asarray(a) <= 0):
            raise EvalError("log-domain", e.pos)
        if name == "sqrt" and np.any(np.asarray(a) < 0):
            raise EvalError("sqrt-domain", e.pos)
        r = getattr(np, {"abs": "abs"}.get(name, name))(a)
        _finite(r, e)
        return r
    raise TypeError(f"not an expression node: {e!r}")


def evaluate(e: Expr, x, k=1):
    """Evaluate ``e`` at point(s) ``x`` in regime ``k`` (1-based).

    Returns a float for a single point and an ``(n,)`` array for a batch.
    Division by zero, logs of non-positive values and any non-finite result
    raise :class:`EvalError`.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    with np.errstate(all="ignore"):
        r = _eval(e, x, k)
    if isinstance(r, np.ndarray) and r.dtype == bool:
        raise EvalError("comparison-value", getattr(e, "pos", 0))
    shape = x.shape[:-1]
    out = np.broadcast_to(np.asarray(r, dtype=float), shape) if shape else float(np.asarray(r))
    if shape:
        out = np.array(out, dtype=float)
    return out


# spec name for the evaluation operation
eval = evaluate  # noqa: A001
