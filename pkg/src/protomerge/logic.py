"""Entailment over refined integer contexts.

The decision procedure is deliberately small: a sound three-valued interval
abstraction first, then exhaustive enumeration of the (finite) variable
domains when the abstraction is inconclusive, and Undecidable beyond that.
Validity means "true under every assignment drawn from the context domains";
Invalid means some assignment falsifies the proposition.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Mapping

from .ast import (
    And,
    Array,
    BinOp,
    Cmp,
    Cond,
    Datatype,
    DivisionByZero,
    Float,
    Hole,
    IndexTerm,
    IntLit,
    Integer,
    Not,
    Or,
    Proposition,
    ProtomergeError,
    Refined,
    TrueProp,
    TypingContext,
    UnboundVariable,
    Var,
    eval_index,
    eval_prop,
    index_vars,
    prop_vars,
    subst_prop,
    trunc_div,
)

__all__ = [
    "Verdict",
    "Domain",
    "FiniteSet",
    "Interval",
    "Unbounded",
    "NotIntegerRefined",
    "UndecidableEquivalence",
    "InvalidRankSet",
    "DEFAULT_ENUM_CAP",
    "entails",
    "domain_of",
    "dtype_equiv",
    "initial_context",
    "merged_context",
    "singleton_env",
]

DEFAULT_ENUM_CAP = 100_000


class Verdict(enum.Enum):
    VALID = "Valid"
    INVALID = "Invalid"
    UNDECIDABLE = "Undecidable"


class NotIntegerRefined(ProtomergeError):
    """The queried context entry is not an integer (refinement) type."""


class UndecidableEquivalence(ProtomergeError):
    """Datatype equivalence could not be decided within the engine's means."""


class InvalidRankSet(ProtomergeError):
    """A merged-rank set was empty or referenced ranks outside 0..n-1."""


# ---------------------------------------------------------------------------
# Domains


@dataclass(frozen=True, slots=True)
class FiniteSet:
    values: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.values:
            raise ValueError("FiniteSet must be non-empty")
        if list(self.values) != sorted(set(self.values)):
            raise ValueError("FiniteSet values must be sorted and distinct")


@dataclass(frozen=True, slots=True)
class Interval:
    lo: int
    hi: int

    def __post_init__(self) -> None:
        if self.lo > self.hi:
            raise ValueError(f"empty interval {self.lo}..{self.hi}")


@dataclass(frozen=True, slots=True)
class Unbounded:
    pass


Domain = FiniteSet | Interval | Unbounded


# ---------------------------------------------------------------------------
# Refinement shape recognition
#
# Two shapes are understood exactly: a disjunction of equalities on the binder
# (finite set) and a conjunction of one-sided comparisons on the binder
# (interval). Strict integer bounds normalize away: v > t becomes v >= t+1.


def _flatten(p: Proposition, kind: type) -> list[Proposition]:
    if isinstance(p, kind):
        return _flatten(p.left, kind) + _flatten(p.right, kind)
    return [p]


@dataclass(frozen=True, slots=True)
class _EqShape:
    terms: tuple[IndexTerm, ...]


@dataclass(frozen=True, slots=True)
class _BoundShape:
    los: tuple[IndexTerm, ...]
    his: tuple[IndexTerm, ...]
    residual: tuple[Proposition, ...]


def _plus_one(t: IndexTerm) -> IndexTerm:
    return IntLit(t.value + 1) if isinstance(t, IntLit) else BinOp("+", t, IntLit(1))


def _minus_one(t: IndexTerm) -> IndexTerm:
    return IntLit(t.value - 1) if isinstance(t, IntLit) else BinOp("-", t, IntLit(1))


def recognize_eq(pred: Proposition, binder: str) -> _EqShape | None:
    terms: list[IndexTerm] = []
    for d in _flatten(pred, Or):
        match d:
            case Cmp("=", Var(name), t) if name == binder and binder not in index_vars(t):
                terms.append(t)
            case Cmp("=", t, Var(name)) if name == binder and binder not in index_vars(t):
                terms.append(t)
            case _:
                return None
    return _EqShape(tuple(terms))


def recognize_bounds(pred: Proposition, binder: str) -> _BoundShape | None:
    los: list[IndexTerm] = []
    his: list[IndexTerm] = []
    residual: list[Proposition] = []
    for c in _flatten(pred, And):
        match c:
            case TrueProp():
                continue
            case Cmp(op, Var(name), t) if name == binder and binder not in index_vars(t):
                if op == "<=":
                    his.append(t)
                elif op == "<":
                    his.append(_minus_one(t))
                elif op == ">=":
                    los.append(t)
                elif op == ">":
                    los.append(_plus_one(t))
                elif op == "=":
                    los.append(t)
                    his.append(t)
                else:
                    residual.append(c)
            case Cmp(op, t, Var(name)) if name == binder and binder not in index_vars(t):
                if op == "<=":
                    los.append(t)
                elif op == "<":
                    los.append(_plus_one(t))
                elif op == ">=":
                    his.append(t)
                elif op == ">":
                    his.append(_minus_one(t))
                elif op == "=":
                    los.append(t)
                    his.append(t)
                else:
                    residual.append(c)
            case _:
                residual.append(c)
    return _BoundShape(tuple(los), tuple(his), tuple(residual))


# ---------------------------------------------------------------------------
# Interval abstraction

Hull = tuple[int | None, int | None]  # (lo, hi); None is unbounded on that side

_TOP: Hull = (None, None)


def _hull_add(a: Hull, b: Hull) -> Hull:
    lo = None if a[0] is None or b[0] is None else a[0] + b[0]
    hi = None if a[1] is None or b[1] is None else a[1] + b[1]
    return (lo, hi)


def _hull_sub(a: Hull, b: Hull) -> Hull:
    lo = None if a[0] is None or b[1] is None else a[0] - b[1]
    hi = None if a[1] is None or b[0] is None else a[1] - b[0]
    return (lo, hi)


def _hull_mul(a: Hull, b: Hull) -> Hull:
    if None in a or None in b:
        return _TOP
    prods = [a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1]]
    return (min(prods), max(prods))


def _hull_div(a: Hull, b: Hull) -> Hull:
    if None in a or None in b or (b[0] <= 0 <= b[1]):
        return _TOP
    quots = [trunc_div(a[0], b[0]), trunc_div(a[0], b[1]), trunc_div(a[1], b[0]), trunc_div(a[1], b[1])]
    return (min(quots), max(quots))


def _hull_union(a: Hull, b: Hull) -> Hull:
    lo = None if a[0] is None or b[0] is None else min(a[0], b[0])
    hi = None if a[1] is None or b[1] is None else max(a[1], b[1])
    return (lo, hi)


def _hull_index(t: IndexTerm, hulls: Mapping[str, Hull]) -> Hull:
    match t:
        case IntLit(v):
            return (v, v)
        case Var(name):
            return hulls.get(name, _TOP)
        case BinOp("+", l, r):
            return _hull_add(_hull_index(l, hulls), _hull_index(r, hulls))
        case BinOp("-", l, r):
            return _hull_sub(_hull_index(l, hulls), _hull_index(r, hulls))
        case BinOp("*", l, r):
            return _hull_mul(_hull_index(l, hulls), _hull_index(r, hulls))
        case BinOp("/", l, r):
            return _hull_div(_hull_index(l, hulls), _hull_index(r, hulls))
        case Cond(_, then, orelse):
            return _hull_union(_hull_index(then, hulls), _hull_index(orelse, hulls))
    raise TypeError(f"not an index term: {t!r}")


def _division_free(t: IndexTerm) -> bool:
    match t:
        case IntLit() | Var():
            return True
        case BinOp(op, l, r):
            return op != "/" and _division_free(l) and _division_free(r)
        case Cond(test, then, orelse):
            return (
                all(_division_free(s) for s in _cmp_terms(test))
                and _division_free(then)
                and _division_free(orelse)
            )
    return False


def _cmp_terms(p: Proposition) -> list[IndexTerm]:
    match p:
        case TrueProp():
            return []
        case Cmp(_, l, r):
            return [l, r]
        case And(l, r) | Or(l, r):
            return _cmp_terms(l) + _cmp_terms(r)
        case Not(q):
            return _cmp_terms(q)
    return []


def _le(a: int | None, b: int | None, strict: bool = False) -> bool:
    """Conclusively a <= b (or a < b) given finite endpoint values only."""
    if a is None or b is None:
        return False
    return a < b if strict else a <= b


def _abs_cmp(op: str, l: IndexTerm, r: IndexTerm, hulls: Mapping[str, Hull]) -> bool | None:
    if l == r and _division_free(l):
        return op in ("=", "<=", ">=")
    (llo, lhi), (rlo, rhi) = _hull_index(l, hulls), _hull_index(r, hulls)
    if op == "=":
        if llo is not None and llo == lhi == rlo == rhi:
            return True
        if _le(lhi, rlo, strict=True) or _le(rhi, llo, strict=True):
            return False
        return None
    if op == "!=":
        inner = _abs_cmp("=", l, r, hulls)
        return None if inner is None else not inner
    if op == "<=":
        if _le(lhi, rlo):
            return True
        if _le(rhi, llo, strict=True):
            return False
        return None
    if op == "<":
        if _le(lhi, rlo, strict=True):
            return True
        if _le(rhi, llo):
            return False
        return None
    if op == ">=":
        return _abs_cmp("<=", r, l, hulls)
    if op == ">":
        return _abs_cmp("<", r, l, hulls)
    raise ValueError(op)


def _abs_prop(p: Proposition, hulls: Mapping[str, Hull]) -> bool | None:
    match p:
        case TrueProp():
            return True
        case Cmp(op, l, r):
            return _abs_cmp(op, l, r, hulls)
        case And(l, r):
            a, b = _abs_prop(l, hulls), _abs_prop(r, hulls)
            if a is False or b is False:
                return False
            if a is True and b is True:
                return True
            return None
        case Or(l, r):
            a, b = _abs_prop(l, hulls), _abs_prop(r, hulls)
            if a is True or b is True:
                return True
            if a is False and b is False:
                return False
            return None
        case Not(q):
            inner = _abs_prop(q, hulls)
            return None if inner is None else not inner
    raise TypeError(f"not a proposition: {p!r}")


def _context_hulls(ctx: TypingContext) -> dict[str, Hull]:
    hulls: dict[str, Hull] = {}
    for name, d in ctx.entries:
        if isinstance(d, Integer):
            hulls[name] = _TOP
        elif isinstance(d, Refined) and isinstance(d.base, Integer):
            eq = recognize_eq(d.pred, d.binder)
            if eq is not None:
                h: Hull = (None, None)
                acc = None
                for t in eq.terms:
                    th = _hull_index(t, hulls)
                    acc = th if acc is None else _hull_union(acc, th)
                hulls[name] = acc if acc is not None else _TOP
                continue
            bounds = recognize_bounds(d.pred, d.binder)
            lo: int | None = None
            hi: int | None = None
            if bounds is not None:
                for t in bounds.los:
                    tlo = _hull_index(t, hulls)[0]
                    if tlo is not None:
                        lo = tlo if lo is None else max(lo, tlo)
                for t in bounds.his:
                    thi = _hull_index(t, hulls)[1]
                    if thi is not None:
                        hi = thi if hi is None else min(hi, thi)
            hulls[name] = (lo, hi)
        # Non-integer entries get no hull; uses default to unbounded.
    return hulls


# ---------------------------------------------------------------------------
# Enumeration


class _Inconclusive(Exception):
    """Internal: enumeration infeasible (unbounded domain, cap, or eval error)."""


def _candidate_values(d: Datatype, env: dict[str, int], enum_cap: int) -> list[int]:
    if not (isinstance(d, Refined) and isinstance(d.base, Integer)):
        raise _Inconclusive
    binder, pred = d.binder, d.pred
    eq = recognize_eq(pred, binder)
    try:
        if eq is not None:
            vals = sorted({_eval_term(t, env) for t in eq.terms})
            return vals
        bounds = recognize_bounds(pred, binder)
        if bounds is None or not bounds.los or not bounds.his:
            raise _Inconclusive
        lo = max(_eval_term(t, env) for t in bounds.los)
        hi = min(_eval_term(t, env) for t in bounds.his)
        if hi < lo:
            return []
        if hi - lo + 1 > enum_cap:
            raise _Inconclusive
        vals = list(range(lo, hi + 1))
        for extra in bounds.residual:
            vals = [v for v in vals if eval_prop({**env, binder: v}, extra)]
        return vals
    except (UnboundVariable, DivisionByZero):
        raise _Inconclusive from None


def _eval_term(t: IndexTerm, env: dict[str, int]) -> int:
    return eval_index(env, t)


def _needed_entries(ctx: TypingContext, p: Proposition) -> list[tuple[str, Datatype]] | None:
    """Entries to enumerate: free vars of p plus refinement dependencies.

    Returns None when p mentions a variable the context does not bind.
    """
    needed = set(prop_vars(p))
    for name, d in reversed(ctx.entries):
        if name in needed and isinstance(d, Refined):
            needed |= prop_vars(d.pred) - {d.binder}
    if needed - set(ctx.names()):
        return None
    return [(name, d) for name, d in ctx.entries if name in needed]


def entails(ctx: TypingContext, p: Proposition, enum_cap: int = DEFAULT_ENUM_CAP) -> Verdict:
    """Decide whether ctx entails p.

    Valid: p holds under every assignment of the context variables' domains.
    Invalid: some assignment falsifies p. Undecidable: neither the interval
    abstraction nor enumeration within `enum_cap` assignments could settle it.
    """
    abstract = _abs_prop(p, _context_hulls(ctx))
    if abstract is True:
        # Sound even when no assignment satisfies the context: the hull box
        # covers the whole satisfying set, and a vacuous entailment is valid.
        return Verdict.VALID
    # A False abstraction refutes p over the hull box, but cannot witness a
    # falsifying assignment: the satisfying set may be empty (an unsatisfiable
    # refinement), in which case the entailment holds vacuously. Only the
    # enumeration below may answer Invalid.

    entries = _needed_entries(ctx, p)
    if entries is None:
        return Verdict.UNDECIDABLE

    budget = enum_cap

    def explore(i: int, env: dict[str, int]) -> bool:
        nonlocal budget
        if i == len(entries):
            budget -= 1
            if budget < 0:
                raise _Inconclusive
            try:
                return eval_prop(env, p)
            except (DivisionByZero, UnboundVariable):
                raise _Inconclusive from None
        name, d = entries[i]
        for v in _candidate_values(d, env, enum_cap):
            if not explore(i + 1, {**env, name: v}):
                return False
        return True

    try:
        return Verdict.VALID if explore(0, {}) else Verdict.INVALID
    except _Inconclusive:
        return Verdict.UNDECIDABLE


# ---------------------------------------------------------------------------
# Public domains


def domain_of(ctx: TypingContext, name: str) -> Domain:
    """Domain of an integer-refined context entry.

    FiniteSet for equality-disjunction refinements, Interval for pure bound
    conjunctions with resolvable endpoints, Unbounded otherwise.
    """
    d = ctx.lookup(name)
    if d is None:
        raise NotIntegerRefined(f"{name!r} is not bound in the context")
    if isinstance(d, Integer):
        return Unbounded()
    if not (isinstance(d, Refined) and isinstance(d.base, Integer)):
        raise NotIntegerRefined(f"{name!r} is not an integer refinement")
    env = singleton_env(ctx, upto=name)
    eq = recognize_eq(d.pred, d.binder)
    if eq is not None:
        try:
            vals = sorted({_eval_term(t, env) for t in eq.terms})
        except (UnboundVariable, DivisionByZero):
            return Unbounded()
        return FiniteSet(tuple(vals))
    bounds = recognize_bounds(d.pred, d.binder)
    if bounds is not None and not bounds.residual and bounds.los and bounds.his:
        try:
            lo = max(_eval_term(t, env) for t in bounds.los)
            hi = min(_eval_term(t, env) for t in bounds.his)
        except (UnboundVariable, DivisionByZero):
            return Unbounded()
        if lo <= hi:
            return Interval(lo, hi)
    return Unbounded()


def singleton_env(ctx: TypingContext, upto: str | None = None) -> dict[str, int]:
    """Values of context variables whose domains are single points.

    Used to resolve loop bounds and message endpoints that mention earlier
    context names (typically just `size`).
    """
    env: dict[str, int] = {}
    for name, d in ctx.entries:
        if name == upto:
            break
        if not (isinstance(d, Refined) and isinstance(d.base, Integer)):
            continue
        eq = recognize_eq(d.pred, d.binder)
        if eq is not None:
            try:
                vals = {_eval_term(t, env) for t in eq.terms}
            except (UnboundVariable, DivisionByZero):
                continue
            if len(vals) == 1:
                env[name] = vals.pop()
            continue
        bounds = recognize_bounds(d.pred, d.binder)
        if bounds is not None and not bounds.residual and bounds.los and bounds.his:
            try:
                lo = max(_eval_term(t, env) for t in bounds.los)
                hi = min(_eval_term(t, env) for t in bounds.his)
            except (UnboundVariable, DivisionByZero):
                continue
            if lo == hi:
                env[name] = lo
    return env


# ---------------------------------------------------------------------------
# Datatype equivalence


def _strip_trivial(d: Datatype) -> Datatype:
    match d:
        case Refined(_, base, TrueProp()):
            return base
        case Array(elem, length):
            return Array(_strip_trivial(elem), length)
        case _:
            return d


_ALPHA = "$"


def _alpha(pred: Proposition, binder: str) -> Proposition:
    return subst_prop(pred, {binder: Var(_ALPHA)})


@dataclass(frozen=True, slots=True)
class _DomainSpec:
    """Resolved description of a refinement's satisfying set."""

    values: tuple[int, ...] | None = None
    lo: int | None = None
    hi: int | None = None
    bounded: bool = False  # True when lo/hi carry meaning


def _refinement_spec(ctx: TypingContext, d: Refined, enum_cap: int) -> _DomainSpec | None:
    env = singleton_env(ctx)
    eq = recognize_eq(d.pred, d.binder)
    if eq is not None:
        try:
            return _DomainSpec(values=tuple(sorted({_eval_term(t, env) for t in eq.terms})))
        except (UnboundVariable, DivisionByZero):
            return None
    bounds = recognize_bounds(d.pred, d.binder)
    if bounds is None or bounds.residual:
        return None
    lo: int | None = None
    hi: int | None = None
    try:
        if bounds.los:
            lo = max(_eval_term(t, env) for t in bounds.los)
        if bounds.his:
            hi = min(_eval_term(t, env) for t in bounds.his)
    except (UnboundVariable, DivisionByZero):
        return None
    if lo is not None and hi is not None and hi - lo + 1 <= enum_cap:
        return _DomainSpec(values=tuple(range(lo, hi + 1)))
    return _DomainSpec(lo=lo, hi=hi, bounded=True)


def dtype_equiv(
    ctx: TypingContext, d1: Datatype, d2: Datatype, enum_cap: int = DEFAULT_ENUM_CAP
) -> bool:
    """Semantic equivalence of two datatypes under a context.

    Array lengths compare through entailment; refinements compare through
    their recognized satisfying sets (strict bounds normalized first). Raises
    UndecidableEquivalence when the engine cannot settle the question.
    """
    a, b = _strip_trivial(d1), _strip_trivial(d2)
    match (a, b):
        case (Integer(), Integer()) | (Float(), Float()):
            return True
        case (Hole(x), Hole(y)):
            if x == y:
                return True
            raise UndecidableEquivalence(f"cannot compare holes ?{x} and ?{y}")
        case (Hole(x), _) | (_, Hole(x)):
            raise UndecidableEquivalence(f"cannot compare hole ?{x} with a concrete type")
        case (Array(e1, l1), Array(e2, l2)):
            if not dtype_equiv(ctx, e1, e2, enum_cap):
                return False
            verdict = entails(ctx, Cmp("=", l1, l2), enum_cap)
            if verdict is Verdict.UNDECIDABLE:
                raise UndecidableEquivalence(
                    f"array lengths {l1!r} and {l2!r} are not comparable"
                )
            return verdict is Verdict.VALID
        case (Refined(b1, base1, p1), Refined(b2, base2, p2)):
            if base1 != base2:
                return False
            if _alpha(p1, b1) == _alpha(p2, b2):
                return True
            if isinstance(base1, Float):
                raise UndecidableEquivalence("float refinements compare only syntactically")
            s1 = _refinement_spec(ctx, a, enum_cap)
            s2 = _refinement_spec(ctx, b, enum_cap)
            if s1 is None or s2 is None:
                raise UndecidableEquivalence("unrecognized refinement shape")
            if s1.values is not None and s2.values is not None:
                return s1.values == s2.values
            if s1.bounded and s2.bounded:
                return (s1.lo, s1.hi) == (s2.lo, s2.hi)
            return False
        case (Refined(_, base, _), other) | (other, Refined(_, base, _)) if type(other) is type(base):
            refined = a if isinstance(a, Refined) else b
            if isinstance(base, Float):
                raise UndecidableEquivalence("float refinements compare only syntactically")
            spec = _refinement_spec(ctx, refined, enum_cap)
            if spec is None:
                raise UndecidableEquivalence("unrecognized refinement shape")
            # Equivalent to the bare base only when entirely unconstrained.
            return spec.values is None and spec.lo is None and spec.hi is None
        case _:
            return False


# ---------------------------------------------------------------------------
# Context builders


def initial_context(n: int) -> TypingContext:
    """Context for a world of n ranks: just ``size : {x:integer | x = n}``."""
    if n < 1:
        raise InvalidRankSet(f"world size must be positive, got {n}")
    return TypingContext((("size", Refined("x", Integer(), Cmp("=", Var("x"), IntLit(n)))),))


def merged_context(n: int, ranks: Iterable[int]) -> TypingContext:
    """Context carrying the already-merged rank set alongside size."""
    rs = sorted(set(ranks))
    if not rs:
        raise InvalidRankSet("merged rank set is empty")
    if rs[0] < 0 or rs[-1] >= n:
        raise InvalidRankSet(f"ranks {rs} out of range for size {n}")
    pred: Proposition = Cmp("=", Var("x"), IntLit(rs[0]))
    for r in rs[1:]:
        pred = Or(pred, Cmp("=", Var("x"), IntLit(r)))
    return initial_context(n).extend("rank", Refined("x", Integer(), pred))
