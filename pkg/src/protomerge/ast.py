"""Core value language: index terms, propositions, datatypes, protocol types,
processes, typing contexts, and the diagnostics they produce.

Everything here is an immutable tree. Structural equality is the equality used
throughout (goldens compare whole trees), so all nodes are frozen dataclasses.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Union


class ProtomergeError(Exception):
    """Base class for every error this package raises deliberately."""


class DivisionByZero(ProtomergeError):
    """Raised when index-term evaluation divides by zero."""


class UnboundVariable(ProtomergeError):
    """Raised when evaluation meets a variable missing from its environment."""


# ---------------------------------------------------------------------------
# Index terms


@dataclass(frozen=True, slots=True)
class IntLit:
    value: int


@dataclass(frozen=True, slots=True)
class Var:
    name: str


BINOPS = ("+", "-", "*", "/")


@dataclass(frozen=True, slots=True)
class BinOp:
    op: str
    left: "IndexTerm"
    right: "IndexTerm"

    def __post_init__(self) -> None:
        if self.op not in BINOPS:
            raise ValueError(f"unknown index operator {self.op!r}")


@dataclass(frozen=True, slots=True)
class Cond:
    """Conditional index term: ``test ? then : orelse``."""

    test: "Proposition"
    then: "IndexTerm"
    orelse: "IndexTerm"


IndexTerm = Union[IntLit, Var, BinOp, Cond]


# ---------------------------------------------------------------------------
# Propositions


@dataclass(frozen=True, slots=True)
class TrueProp:
    pass


CMPOPS = ("=", "!=", "<", "<=", ">", ">=")


@dataclass(frozen=True, slots=True)
class Cmp:
    op: str
    left: IndexTerm
    right: IndexTerm

    def __post_init__(self) -> None:
        if self.op not in CMPOPS:
            raise ValueError(f"unknown comparison {self.op!r}")


@dataclass(frozen=True, slots=True)
class And:
    left: "Proposition"
    right: "Proposition"


@dataclass(frozen=True, slots=True)
class Or:
    left: "Proposition"
    right: "Proposition"


@dataclass(frozen=True, slots=True)
class Not:
    prop: "Proposition"


Proposition = Union[TrueProp, Cmp, And, Or, Not]


# ---------------------------------------------------------------------------
# Datatypes


@dataclass(frozen=True, slots=True)
class Integer:
    pass


@dataclass(frozen=True, slots=True)
class Float:
    pass


@dataclass(frozen=True, slots=True)
class Array:
    elem: "Datatype"
    length: IndexTerm


@dataclass(frozen=True, slots=True)
class Refined:
    """Refinement type ``{binder : base | pred}``; base is Integer or Float."""

    binder: str
    base: Union[Integer, Float]
    pred: Proposition


@dataclass(frozen=True, slots=True)
class Hole:
    """Unknown datatype ``?id``; appears only during extraction."""

    id: str


Datatype = Union[Integer, Float, Array, Refined, Hole]


class ReduceOp(enum.Enum):
    MIN = "min"
    MAX = "max"
    SUM = "sum"
    PROD = "prod"


# ---------------------------------------------------------------------------
# Protocol types


@dataclass(frozen=True, slots=True)
class Skip:
    pass


@dataclass(frozen=True, slots=True)
class Message:
    src: IndexTerm
    dst: IndexTerm
    payload: Datatype


# Binder name used when an allreduce is written without one. The short
# syntactic form round-trips only through this exact name.
FRESH_BINDER = "_"


@dataclass(frozen=True, slots=True)
class Allreduce:
    op: ReduceOp
    binder: str
    payload: Datatype
    cont: "ProtocolType"


@dataclass(frozen=True, slots=True)
class Foreach:
    binder: str
    lo: IndexTerm
    hi: IndexTerm
    body: "ProtocolType"


@dataclass(frozen=True, slots=True)
class Seq:
    first: "ProtocolType"
    second: "ProtocolType"


ProtocolType = Union[Skip, Message, Allreduce, Foreach, Seq]


# ---------------------------------------------------------------------------
# Processes (the per-rank input DSL)


@dataclass(frozen=True, slots=True)
class PSkip:
    pass


@dataclass(frozen=True, slots=True)
class Send:
    to: IndexTerm
    payload: Datatype


@dataclass(frozen=True, slots=True)
class Recv:
    src: IndexTerm
    payload: Datatype


@dataclass(frozen=True, slots=True)
class AllreduceStmt:
    op: ReduceOp
    payload: Datatype


@dataclass(frozen=True, slots=True)
class For:
    binder: str
    lo: IndexTerm
    hi: IndexTerm
    body: "Process"


@dataclass(frozen=True, slots=True)
class If:
    test: Proposition
    then: "Process"
    orelse: "Process"


@dataclass(frozen=True, slots=True)
class PSeq:
    first: "Process"
    second: "Process"


Process = Union[PSkip, Send, Recv, AllreduceStmt, For, If, PSeq]


# ---------------------------------------------------------------------------
# Typing contexts


@dataclass(frozen=True, slots=True)
class TypingContext:
    """Ordered association of names to datatypes.

    Later entries may reference earlier names in their refinements, so order
    is significant and preserved.
    """

    entries: tuple[tuple[str, Datatype], ...] = ()

    def __post_init__(self) -> None:
        names = [n for n, _ in self.entries]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate context entries in {names}")

    def lookup(self, name: str) -> Datatype | None:
        for n, d in self.entries:
            if n == name:
                return d
        return None

    def extend(self, name: str, dtype: Datatype) -> "TypingContext":
        if self.lookup(name) is not None:
            # Rebinding shadows: drop the old entry, append the new one.
            kept = tuple(e for e in self.entries if e[0] != name)
            return TypingContext(kept + ((name, dtype),))
        return TypingContext(self.entries + ((name, dtype),))

    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.entries)


# ---------------------------------------------------------------------------
# Diagnostics


class DiagnosticKind(enum.Enum):
    DEADLOCK_SUSPECTED = "DeadlockSuspected"
    DATATYPE_MISMATCH = "DatatypeMismatch"
    ENTAILMENT_FAILED = "EntailmentFailed"
    ENTAILMENT_UNDECIDABLE = "EntailmentUndecidable"
    UNSOLVABLE_EQUATIONS = "UnsolvableEquations"


@dataclass(frozen=True, slots=True)
class RuleAttempt:
    rule: str
    failed_premise: str


@dataclass(frozen=True, slots=True)
class Diagnostic:
    kind: DiagnosticKind
    location: str
    rule_trace: tuple[RuleAttempt, ...] = field(default=())

    def __post_init__(self) -> None:
        if not self.rule_trace and self.kind is not DiagnosticKind.UNSOLVABLE_EQUATIONS:
            raise ValueError("rule_trace must be non-empty for merge diagnostics")


# ---------------------------------------------------------------------------
# Evaluation


def trunc_div(a: int, b: int) -> int:
    """Integer division truncating toward zero (C semantics, not floor)."""
    if b == 0:
        raise DivisionByZero(f"{a} / 0")
    q = abs(a) // abs(b)
    return -q if (a < 0) != (b < 0) else q


def eval_index(env: Mapping[str, int], t: IndexTerm) -> int:
    """Evaluate a closed index term under an integer environment.

    Raises:
        UnboundVariable: a variable is missing from env.
        DivisionByZero: a division's divisor evaluates to zero.
    """
    match t:
        case IntLit(v):
            return v
        case Var(name):
            if name not in env:
                raise UnboundVariable(name)
            return env[name]
        case BinOp("+", l, r):
            return eval_index(env, l) + eval_index(env, r)
        case BinOp("-", l, r):
            return eval_index(env, l) - eval_index(env, r)
        case BinOp("*", l, r):
            return eval_index(env, l) * eval_index(env, r)
        case BinOp("/", l, r):
            return trunc_div(eval_index(env, l), eval_index(env, r))
        case Cond(test, then, orelse):
            return eval_index(env, then if eval_prop(env, test) else orelse)
    raise TypeError(f"not an index term: {t!r}")


_CMP = {
    "=": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}


def eval_prop(env: Mapping[str, int], p: Proposition) -> bool:
    """Evaluate a closed proposition under an integer environment."""
    match p:
        case TrueProp():
            return True
        case Cmp(op, l, r):
            return _CMP[op](eval_index(env, l), eval_index(env, r))
        case And(l, r):
            return eval_prop(env, l) and eval_prop(env, r)
        case Or(l, r):
            return eval_prop(env, l) or eval_prop(env, r)
        case Not(q):
            return not eval_prop(env, q)
    raise TypeError(f"not a proposition: {p!r}")


# ---------------------------------------------------------------------------
# Free variables


def index_vars(t: IndexTerm) -> frozenset[str]:
    match t:
        case IntLit():
            return frozenset()
        case Var(name):
            return frozenset((name,))
        case BinOp(_, l, r):
            return index_vars(l) | index_vars(r)
        case Cond(test, then, orelse):
            return prop_vars(test) | index_vars(then) | index_vars(orelse)
    raise TypeError(f"not an index term: {t!r}")


def prop_vars(p: Proposition) -> frozenset[str]:
    match p:
        case TrueProp():
            return frozenset()
        case Cmp(_, l, r):
            return index_vars(l) | index_vars(r)
        case And(l, r) | Or(l, r):
            return prop_vars(l) | prop_vars(r)
        case Not(q):
            return prop_vars(q)
    raise TypeError(f"not a proposition: {p!r}")


def datatype_vars(d: Datatype) -> frozenset[str]:
    match d:
        case Integer() | Float() | Hole():
            return frozenset()
        case Array(elem, length):
            return datatype_vars(elem) | index_vars(length)
        case Refined(binder, _, pred):
            return prop_vars(pred) - {binder}
    raise TypeError(f"not a datatype: {d!r}")


def is_closed(t: IndexTerm) -> bool:
    return not index_vars(t)


# ---------------------------------------------------------------------------
# Variable substitution (names -> index terms)


Sub = Mapping[str, IndexTerm]


def subst_index(t: IndexTerm, sub: Sub) -> IndexTerm:
    match t:
        case IntLit():
            return t
        case Var(name):
            return sub.get(name, t)
        case BinOp(op, l, r):
            return BinOp(op, subst_index(l, sub), subst_index(r, sub))
        case Cond(test, then, orelse):
            return Cond(subst_prop(test, sub), subst_index(then, sub), subst_index(orelse, sub))
    raise TypeError(f"not an index term: {t!r}")


def subst_prop(p: Proposition, sub: Sub) -> Proposition:
    match p:
        case TrueProp():
            return p
        case Cmp(op, l, r):
            return Cmp(op, subst_index(l, sub), subst_index(r, sub))
        case And(l, r):
            return And(subst_prop(l, sub), subst_prop(r, sub))
        case Or(l, r):
            return Or(subst_prop(l, sub), subst_prop(r, sub))
        case Not(q):
            return Not(subst_prop(q, sub))
    raise TypeError(f"not a proposition: {p!r}")


def _drop(sub: Sub, name: str) -> Sub:
    return {k: v for k, v in sub.items() if k != name} if name in sub else sub


def subst_datatype(d: Datatype, sub: Sub) -> Datatype:
    match d:
        case Integer() | Float() | Hole():
            return d
        case Array(elem, length):
            return Array(subst_datatype(elem, sub), subst_index(length, sub))
        case Refined(binder, base, pred):
            return Refined(binder, base, subst_prop(pred, _drop(sub, binder)))
    raise TypeError(f"not a datatype: {d!r}")


def subst_type(t: ProtocolType, sub: Sub) -> ProtocolType:
    match t:
        case Skip():
            return t
        case Message(src, dst, payload):
            return Message(subst_index(src, sub), subst_index(dst, sub), subst_datatype(payload, sub))
        case Allreduce(op, binder, payload, cont):
            return Allreduce(op, binder, subst_datatype(payload, sub), subst_type(cont, _drop(sub, binder)))
        case Foreach(binder, lo, hi, body):
            return Foreach(binder, subst_index(lo, sub), subst_index(hi, sub), subst_type(body, _drop(sub, binder)))
        case Seq(a, b):
            return Seq(subst_type(a, sub), subst_type(b, sub))
    raise TypeError(f"not a protocol type: {t!r}")


def subst_process(p: Process, sub: Sub) -> Process:
    match p:
        case PSkip():
            return p
        case Send(to, payload):
            return Send(subst_index(to, sub), subst_datatype(payload, sub))
        case Recv(src, payload):
            return Recv(subst_index(src, sub), subst_datatype(payload, sub))
        case AllreduceStmt(op, payload):
            return AllreduceStmt(op, subst_datatype(payload, sub))
        case For(binder, lo, hi, body):
            return For(binder, subst_index(lo, sub), subst_index(hi, sub), subst_process(body, _drop(sub, binder)))
        case If(test, then, orelse):
            return If(subst_prop(test, sub), subst_process(then, sub), subst_process(orelse, sub))
        case PSeq(a, b):
            return PSeq(subst_process(a, sub), subst_process(b, sub))
    raise TypeError(f"not a process: {p!r}")


# ---------------------------------------------------------------------------
# Holes


def datatype_holes(d: Datatype) -> frozenset[str]:
    match d:
        case Hole(id):
            return frozenset((id,))
        case Array(elem, _):
            return datatype_holes(elem)
        case _:
            return frozenset()


def type_holes(t: ProtocolType) -> frozenset[str]:
    match t:
        case Skip():
            return frozenset()
        case Message(_, _, payload):
            return datatype_holes(payload)
        case Allreduce(_, _, payload, cont):
            return datatype_holes(payload) | type_holes(cont)
        case Foreach(_, _, _, body):
            return type_holes(body)
        case Seq(a, b):
            return type_holes(a) | type_holes(b)
    raise TypeError(f"not a protocol type: {t!r}")


def fill_holes_datatype(d: Datatype, binding: Mapping[str, Datatype]) -> Datatype:
    match d:
        case Hole(id) if id in binding:
            return binding[id]
        case Array(elem, length):
            return Array(fill_holes_datatype(elem, binding), length)
        case _:
            return d


def fill_holes_type(t: ProtocolType, binding: Mapping[str, Datatype]) -> ProtocolType:
    match t:
        case Skip():
            return t
        case Message(src, dst, payload):
            return Message(src, dst, fill_holes_datatype(payload, binding))
        case Allreduce(op, binder, payload, cont):
            return Allreduce(op, binder, fill_holes_datatype(payload, binding), fill_holes_type(cont, binding))
        case Foreach(binder, lo, hi, body):
            return Foreach(binder, lo, hi, fill_holes_type(body, binding))
        case Seq(a, b):
            return Seq(fill_holes_type(a, binding), fill_holes_type(b, binding))
    raise TypeError(f"not a protocol type: {t!r}")
