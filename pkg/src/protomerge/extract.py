"""Per-rank local type extraction.

Step one of the inference pipeline: specialize the shared program to a rank,
map process constructs to type constructs while collecting datatype
equations, and solve the equations by first-order unification.
"""

from __future__ import annotations

from .ast import (
    Allreduce,
    AllreduceStmt,
    Array,
    Cmp,
    Datatype,
    For,
    Foreach,
    FRESH_BINDER,
    Hole,
    If,
    IndexTerm,
    IntLit,
    Message,
    PSeq,
    PSkip,
    Process,
    ProtocolType,
    ProtomergeError,
    Recv,
    Send,
    Seq,
    Skip,
    TypingContext,
    datatype_holes,
    eval_index,
    eval_prop,
    fill_holes_datatype,
    fill_holes_type,
    is_closed,
    prop_vars,
    subst_index,
    subst_process,
    subst_prop,
    type_holes,
)
from .logic import DEFAULT_ENUM_CAP, Verdict, dtype_equiv, entails
from .merge import normalize_seq

__all__ = [
    "EquationSystem",
    "Substitution",
    "ResidualConditional",
    "UnsolvableEquations",
    "specialize",
    "collect",
    "solve",
    "extract_local_type",
]

EquationSystem = list[tuple[Datatype, Datatype]]
Substitution = dict[str, Datatype]


class ResidualConditional(ProtomergeError):
    """An If survived specialization; the type language has no branching."""


class UnsolvableEquations(ProtomergeError):
    """The datatype equation system has no solution."""


def _fold_closed(t: IndexTerm) -> IndexTerm:
    """Evaluate a closed index term to a literal; leave open terms alone."""
    if isinstance(t, IntLit) or not is_closed(t):
        return t
    return IntLit(eval_index({}, t))


def specialize(p: Process, rank: int, size: int) -> Process:
    """Instantiate the program for one rank.

    The rank literal substitutes everywhere; the size literal only in control
    positions (endpoints, loop bounds, conditional tests), so payloads stay
    parametric in size. Closed endpoints and bounds fold to literals, closed
    conditionals reduce to the taken branch, and loops whose constant range
    is empty drop away. Idempotent.
    """
    if not 0 <= rank < size:
        raise ValueError(f"rank {rank} outside 0..{size - 1}")
    ranked = subst_process(p, {"rank": IntLit(rank)})
    return _partial_eval(_subst_control(ranked, {"size": IntLit(size)}))


def _subst_control(p: Process, env: dict[str, IndexTerm]) -> Process:
    match p:
        case PSkip() | AllreduceStmt():
            return p
        case Send(to, payload):
            return Send(subst_index(to, env), payload)
        case Recv(src, payload):
            return Recv(subst_index(src, env), payload)
        case For(binder, lo, hi, body):
            inner = {k: v for k, v in env.items() if k != binder}
            return For(binder, subst_index(lo, env), subst_index(hi, env), _subst_control(body, inner))
        case If(test, then, orelse):
            return If(subst_prop(test, env), _subst_control(then, env), _subst_control(orelse, env))
        case PSeq(first, second):
            return PSeq(_subst_control(first, env), _subst_control(second, env))
    raise TypeError(f"not a process: {p!r}")


def _partial_eval(p: Process) -> Process:
    match p:
        case PSkip() | AllreduceStmt():
            return p
        case Send(to, payload):
            return Send(_fold_closed(to), payload)
        case Recv(src, payload):
            return Recv(_fold_closed(src), payload)
        case For(binder, lo, hi, body):
            flo, fhi = _fold_closed(lo), _fold_closed(hi)
            if isinstance(flo, IntLit) and isinstance(fhi, IntLit) and fhi.value < flo.value:
                return PSkip()
            return For(binder, flo, fhi, _partial_eval(body))
        case If(test, then, orelse):
            if not prop_vars(test):
                return _partial_eval(then if eval_prop({}, test) else orelse)
            return If(test, _partial_eval(then), _partial_eval(orelse))
        case PSeq(first, second):
            return PSeq(_partial_eval(first), _partial_eval(second))
    raise TypeError(f"not a process: {p!r}")


def collect(
    ctx: TypingContext,
    p: Process,
    self_rank: int,
    constraints: tuple[tuple[Datatype, Datatype], ...] = (),
) -> tuple[EquationSystem, ProtocolType]:
    """Map a rank-free process to a candidate local type plus equations.

    The process syntax never makes two datatypes meet, so the equation system
    is exactly the caller-supplied constraint sites (equations on `?hole`
    placeholders left in the program text).
    """
    equations: EquationSystem = list(constraints)

    def walk(node: Process) -> ProtocolType:
        match node:
            case PSkip():
                return Skip()
            case Send(to, payload):
                return Message(IntLit(self_rank), to, payload)
            case Recv(src, payload):
                return Message(src, IntLit(self_rank), payload)
            case AllreduceStmt(op, payload):
                return Allreduce(op, FRESH_BINDER, payload, Skip())
            case For(binder, lo, hi, body):
                return Foreach(binder, lo, hi, walk(body))
            case If():
                raise ResidualConditional(
                    "conditional whose test is still open after specialization"
                )
            case PSeq(first, second):
                return Seq(walk(first), walk(second))
        raise TypeError(f"not a process: {node!r}")

    return equations, walk(p)


def solve(
    ctx: TypingContext, eqs: EquationSystem, enum_cap: int = DEFAULT_ENUM_CAP
) -> Substitution:
    """First-order unification over datatypes with occurs check.

    Concrete-vs-concrete pairs discharge through dtype_equiv; array length
    terms through entailment.
    """
    subst: Substitution = {}

    def resolve(d: Datatype) -> Datatype:
        return fill_holes_datatype(d, subst)

    def bind(hole: str, d: Datatype) -> None:
        if hole in datatype_holes(d):
            raise UnsolvableEquations(f"occurs check: ?{hole} inside {d!r}")
        one = {hole: d}
        for name in subst:
            subst[name] = fill_holes_datatype(subst[name], one)
        subst[hole] = d

    work = list(eqs)
    while work:
        lhs, rhs = work.pop(0)
        lhs, rhs = resolve(lhs), resolve(rhs)
        if lhs == rhs:
            continue
        match (lhs, rhs):
            case (Hole(h), other) | (other, Hole(h)):
                bind(h, other)
            case (Array(e1, l1), Array(e2, l2)):
                verdict = entails(ctx, Cmp("=", l1, l2), enum_cap)
                if verdict is Verdict.INVALID:
                    raise UnsolvableEquations(f"array lengths differ: {l1!r} vs {l2!r}")
                if verdict is Verdict.UNDECIDABLE:
                    raise UnsolvableEquations(
                        f"array lengths not comparable: {l1!r} vs {l2!r}"
                    )
                work.append((e1, e2))
            case _ if not datatype_holes(lhs) and not datatype_holes(rhs):
                if not dtype_equiv(ctx, lhs, rhs, enum_cap):
                    raise UnsolvableEquations(f"cannot unify {lhs!r} with {rhs!r}")
            case _:
                raise UnsolvableEquations(f"cannot unify {lhs!r} with {rhs!r}")
    return subst


def extract_local_type(
    ctx: TypingContext,
    p: Process,
    self_rank: int,
    size: int,
    constraints: tuple[tuple[Datatype, Datatype], ...] = (),
    enum_cap: int = DEFAULT_ENUM_CAP,
) -> ProtocolType:
    """specialize, collect, solve, substitute: one rank's hole-free local type."""
    specialized = specialize(p, self_rank, size)
    equations, candidate = collect(ctx, specialized, self_rank, constraints)
    substitution = solve(ctx, equations, enum_cap)
    solved = fill_holes_type(candidate, substitution)
    leftover = type_holes(solved)
    if leftover:
        names = ", ".join(f"?{h}" for h in sorted(leftover))
        raise UnsolvableEquations(f"unconstrained datatype holes: {names}")
    return normalize_seq(solved)
