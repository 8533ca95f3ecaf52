"""Merging local types into a global protocol.

The merge judgment `ctx |- left || right @ k ~> result` combines the protocol
accumulated for the already-merged ranks (left, described by the context's
`rank` entry) with the local type of one more rank k (right). It is a partial
function realized here as a rule engine: deterministic rules first, then the
message-interleaving rules explored depth-first with backtracking; the first
derivation wins. Failure produces a Diagnostic naming the deepest point where
every applicable rule's premise broke.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .ast import (
    Allreduce,
    And,
    Cmp,
    Diagnostic,
    DiagnosticKind,
    DivisionByZero,
    Foreach,
    IndexTerm,
    IntLit,
    Integer,
    Message,
    Proposition,
    ProtocolType,
    ProtomergeError,
    Refined,
    RuleAttempt,
    Seq,
    Skip,
    TypingContext,
    UnboundVariable,
    Var,
    eval_index,
    index_vars,
    subst_type,
    type_holes,
)
from .logic import (
    DEFAULT_ENUM_CAP,
    FiniteSet,
    InvalidRankSet,
    UndecidableEquivalence,
    Verdict,
    domain_of,
    dtype_equiv,
    entails,
    merged_context,
    singleton_env,
)
from .syntax import compact_protocol, print_datatype, print_proposition

__all__ = [
    "DEFAULT_UNROLL",
    "MergeFailure",
    "MergeStep",
    "MergeTrace",
    "NonConstantBounds",
    "PremiseCheck",
    "RULE_NAMES",
    "attempt_rule",
    "merge_all",
    "merge_types",
    "normalize_seq",
    "unfold_foreach",
]

DEFAULT_UNROLL = 2


class NonConstantBounds(ProtomergeError):
    """A foreach's bounds do not evaluate to constants under the context."""


# ---------------------------------------------------------------------------
# Sequence normal form


def _seq_items(t: ProtocolType) -> list[ProtocolType]:
    match t:
        case Skip():
            return []
        case Seq(first, second):
            return _seq_items(first) + _seq_items(second)
        case _:
            return [_normalize_node(t)]


def _normalize_node(t: ProtocolType) -> ProtocolType:
    match t:
        case Allreduce(op, binder, payload, cont):
            return Allreduce(op, binder, payload, normalize_seq(cont))
        case Foreach(binder, lo, hi, body):
            return Foreach(binder, lo, hi, normalize_seq(body))
        case _:
            return t


def normalize_seq(t: ProtocolType) -> ProtocolType:
    """Right-associate sequences and drop skip units, recursively. Idempotent."""
    items = _seq_items(t)
    if not items:
        return Skip()
    result = items[-1]
    for item in reversed(items[:-1]):
        result = Seq(item, result)
    return result


# ---------------------------------------------------------------------------
# Constant-bound loop unfolding


def unfold_foreach(ctx: TypingContext, t: ProtocolType) -> ProtocolType:
    """Replace a constant-bound foreach by its instantiated body sequence."""
    if not isinstance(t, Foreach):
        raise ValueError(f"unfold_foreach expects a foreach type, got {type(t).__name__}")
    lo, hi = _constant_bounds(ctx, t)
    unfolded: ProtocolType = Skip()
    for v in range(hi, lo - 1, -1):
        instance = subst_type(t.body, {t.binder: IntLit(v)})
        unfolded = instance if isinstance(unfolded, Skip) else Seq(instance, unfolded)
    return normalize_seq(unfolded)


def _constant_bounds(ctx: TypingContext, t: Foreach) -> tuple[int, int]:
    env = singleton_env(ctx)
    try:
        return eval_index(env, t.lo), eval_index(env, t.hi)
    except (UnboundVariable, DivisionByZero) as exc:
        raise NonConstantBounds(f"foreach bounds are not constant: {exc}") from None


# ---------------------------------------------------------------------------
# Traces and failure


@dataclass(frozen=True, slots=True)
class PremiseCheck:
    name: str
    formula: str
    verdict: str


@dataclass(frozen=True, slots=True)
class MergeStep:
    rule: str
    left: str
    right: str
    premises: tuple[PremiseCheck, ...]


@dataclass(frozen=True, slots=True)
class MergeTrace:
    steps: tuple[MergeStep, ...]

    def rule_names(self) -> tuple[str, ...]:
        return tuple(s.rule for s in self.steps)


class MergeFailure(ProtomergeError):
    """The merge relation is not derivable for the given operands."""

    def __init__(self, diagnostic: Diagnostic):
        self.diagnostic = diagnostic
        super().__init__(f"{diagnostic.kind.value} at {diagnostic.location}")

    def annotated(self, prefix: str) -> "MergeFailure":
        d = self.diagnostic
        return MergeFailure(Diagnostic(d.kind, f"{prefix}: {d.location}", d.rule_trace))


# ---------------------------------------------------------------------------
# The rule engine

_RANK = Var("rank")

# Premise-failure classes, used to pick the Diagnostic kind at the deepest
# failing node.
_STRUCTURAL = "structural"
_DATATYPE = "datatype"
_ENTAILMENT = "entailment"
_SUBMERGE = "submerge"


@dataclass(frozen=True, slots=True)
class _Applied:
    result: ProtocolType
    steps: tuple[MergeStep, ...]


@dataclass(frozen=True, slots=True)
class _Refused:
    premise: str
    kind: str


_MISS = object()


def _both_endpoints_differ(m: Message, t: IndexTerm) -> Proposition:
    return And(Cmp("!=", m.src, t), Cmp("!=", m.dst, t))


def _seq_parts(t: ProtocolType) -> tuple[ProtocolType, ProtocolType]:
    if isinstance(t, Seq):
        return t.first, t.second
    return t, Skip()


def _fresh(base: str, avoid: Iterable[str]) -> str:
    taken = set(avoid)
    name = base
    while name in taken:
        name += "'"
    return name


class _Engine:
    def __init__(self, k: int, enum_cap: int):
        self.k = k
        self.enum_cap = enum_cap
        self.memo: dict = {}
        self.undecidable = False
        self.deepest_depth = -1
        self.deepest_path: tuple[str, ...] = ()
        self.deepest_attempts: tuple[tuple[RuleAttempt, str], ...] = ()
        self.rules: tuple[tuple[str, object], ...] = (
            ("skip-skip", self._rule_skip_skip),
            ("skip-msgS", self._rule_skip_msgS),
            ("msgS-skip", self._rule_msgS_skip),
            ("msgS-msgS", self._rule_msgS_msgS),
            ("msg-skip", self._rule_msg_skip),
            ("skip-msg", self._rule_skip_msg),
            ("msg-msgS", self._rule_msg_msgS),
            ("msgS-msg", self._rule_msgS_msg),
            ("msg-msg-eq", self._rule_msg_msg_eq),
            ("allred-allred", self._rule_allred_allred),
            ("foreach-foreach", self._rule_foreach_foreach),
            ("seq-seq", self._rule_seq_seq),
            ("skip-msgT", self._rule_skip_msgT),
            ("msgT-skipT", self._rule_msgT_skipT),
            ("msg-msg-right", self._rule_msg_msg_right),
            ("msg-msg-left", self._rule_msg_msg_left),
            ("msgT-msgT-left", self._rule_msgT_msgT_left),
            ("msgT-msgT-right", self._rule_msgT_msgT_right),
        )

    # -- plumbing

    def merge(
        self,
        ctx: TypingContext,
        left: ProtocolType,
        right: ProtocolType,
        path: tuple[str, ...],
    ) -> tuple[ProtocolType, tuple[MergeStep, ...]] | None:
        left, right = normalize_seq(left), normalize_seq(right)
        key = (ctx, left, right)
        hit = self.memo.get(key, _MISS)
        if hit is not _MISS:
            if hit is None or hit[0] == "fail":
                self._note_failure(path, () if hit is None else hit[1])
                return None
            return hit[1], hit[2]
        # Guard against re-entering the same subproblem while it is open.
        self.memo[key] = ("fail", ())
        attempts: list[tuple[RuleAttempt, str]] = []
        for name, rule in self.rules:
            outcome = rule(ctx, left, right, path)
            if outcome is None:
                continue
            if isinstance(outcome, _Applied):
                self.memo[key] = ("ok", outcome.result, outcome.steps)
                return outcome.result, outcome.steps
            attempts.append((RuleAttempt(name, outcome.premise), outcome.kind))
        record = tuple(attempts)
        self.memo[key] = ("fail", record)
        self._note_failure(path, record)
        return None

    def _note_failure(self, path: tuple[str, ...], attempts) -> None:
        if len(path) > self.deepest_depth:
            self.deepest_depth = len(path)
            self.deepest_path = path
            self.deepest_attempts = tuple(attempts)

    def diagnostic(self, left: ProtocolType, right: ProtocolType) -> Diagnostic:
        location = "/".join(self.deepest_path) or "root"
        kinds = {k for _, k in self.deepest_attempts}
        if self.undecidable:
            kind = DiagnosticKind.ENTAILMENT_UNDECIDABLE
        elif _DATATYPE in kinds:
            kind = DiagnosticKind.DATATYPE_MISMATCH
        elif _ENTAILMENT in kinds:
            kind = DiagnosticKind.ENTAILMENT_FAILED
        else:
            kind = DiagnosticKind.DEADLOCK_SUSPECTED
        trace = tuple(a for a, _ in self.deepest_attempts)
        if not trace:
            trace = (
                RuleAttempt(
                    "none",
                    f"no rule matches {compact_protocol(left)} against {compact_protocol(right)}",
                ),
            )
        return Diagnostic(kind, location, trace)

    def _step(
        self,
        rule: str,
        left: ProtocolType,
        right: ProtocolType,
        premises: Sequence[PremiseCheck],
    ) -> MergeStep:
        return MergeStep(rule, compact_protocol(left), compact_protocol(right), tuple(premises))

    def _entail(
        self, ctx: TypingContext, name: str, p: Proposition, want: Verdict
    ) -> tuple[bool, PremiseCheck]:
        verdict = entails(ctx, p, self.enum_cap)
        if verdict is Verdict.UNDECIDABLE:
            self.undecidable = True
        return verdict is want, PremiseCheck(name, print_proposition(p), verdict.value)

    # Skip-likeness of the left operand is judged against the merged rank
    # set (`rank`'s domain); of the right operand, against the single new
    # rank k. "Real" is the refutation of the same entailment.

    def _skipL(self, ctx, m: Message):
        return self._entail(ctx, "left-skip-like", _both_endpoints_differ(m, _RANK), Verdict.VALID)

    def _realL(self, ctx, m: Message):
        return self._entail(ctx, "left-real", _both_endpoints_differ(m, _RANK), Verdict.INVALID)

    def _skipK(self, ctx, m: Message):
        return self._entail(
            ctx, "right-skip-like", _both_endpoints_differ(m, IntLit(self.k)), Verdict.VALID
        )

    def _realK(self, ctx, m: Message):
        return self._entail(
            ctx, "right-real", _both_endpoints_differ(m, IntLit(self.k)), Verdict.INVALID
        )

    def _kfreeL(self, ctx, m: Message):
        return self._entail(
            ctx, "left-avoids-k", _both_endpoints_differ(m, IntLit(self.k)), Verdict.VALID
        )

    def _rankfreeR(self, ctx, m: Message):
        return self._entail(
            ctx, "right-avoids-merged", _both_endpoints_differ(m, _RANK), Verdict.VALID
        )

    def _payload_equiv(self, ctx, d1, d2) -> tuple[bool, PremiseCheck]:
        formula = f"{print_datatype(d1)} == {print_datatype(d2)}"
        try:
            ok = dtype_equiv(ctx, d1, d2, self.enum_cap)
            verdict = "equivalent" if ok else "different"
        except UndecidableEquivalence:
            self.undecidable = True
            ok, verdict = False, "Undecidable"
        return ok, PremiseCheck("payload-equivalent", formula, verdict)

    def _run_premises(self, checks) -> tuple[_Refused | None, tuple[PremiseCheck, ...]]:
        """Evaluate (ok, PremiseCheck, kind) triples in order; stop at first failure."""
        done: list[PremiseCheck] = []
        for ok, check, kind in checks:
            done.append(check)
            if not ok:
                return _Refused(f"{check.name}: {check.formula} is {check.verdict}", kind), tuple(done)
        return None, tuple(done)

    # -- skip and message rules

    def _rule_skip_skip(self, ctx, left, right, path):
        if not (isinstance(left, Skip) and isinstance(right, Skip)):
            return None
        return _Applied(Skip(), (self._step("skip-skip", left, right, ()),))

    def _rule_skip_msgS(self, ctx, left, right, path):
        if not (isinstance(left, Skip) and isinstance(right, Message)):
            return None
        ok, check = self._skipK(ctx, right)
        refused, premises = self._run_premises([(ok, check, _STRUCTURAL)])
        if refused:
            return refused
        return _Applied(Skip(), (self._step("skip-msgS", left, right, premises),))

    def _rule_msgS_skip(self, ctx, left, right, path):
        if not (isinstance(left, Message) and isinstance(right, Skip)):
            return None
        ok, check = self._skipL(ctx, left)
        refused, premises = self._run_premises([(ok, check, _STRUCTURAL)])
        if refused:
            return refused
        return _Applied(Skip(), (self._step("msgS-skip", left, right, premises),))

    def _rule_msgS_msgS(self, ctx, left, right, path):
        if not (isinstance(left, Message) and isinstance(right, Message)):
            return None
        refused, premises = self._run_premises(
            [(*self._skipL(ctx, left), _STRUCTURAL), (*self._skipK(ctx, right), _STRUCTURAL)]
        )
        if refused:
            return refused
        return _Applied(Skip(), (self._step("msgS-msgS", left, right, premises),))

    def _rule_msg_skip(self, ctx, left, right, path):
        if not (isinstance(left, Message) and isinstance(right, Skip)):
            return None
        refused, premises = self._run_premises(
            [(*self._realL(ctx, left), _STRUCTURAL), (*self._kfreeL(ctx, left), _STRUCTURAL)]
        )
        if refused:
            return refused
        return _Applied(left, (self._step("msg-skip", left, right, premises),))

    def _rule_skip_msg(self, ctx, left, right, path):
        if not (isinstance(left, Skip) and isinstance(right, Message)):
            return None
        refused, premises = self._run_premises(
            [(*self._rankfreeR(ctx, right), _STRUCTURAL), (*self._realK(ctx, right), _STRUCTURAL)]
        )
        if refused:
            return refused
        return _Applied(right, (self._step("skip-msg", left, right, premises),))

    def _rule_msg_msgS(self, ctx, left, right, path):
        if not (isinstance(left, Message) and isinstance(right, Message)):
            return None
        refused, premises = self._run_premises(
            [
                (*self._realL(ctx, left), _STRUCTURAL),
                (*self._kfreeL(ctx, left), _STRUCTURAL),
                (*self._skipK(ctx, right), _STRUCTURAL),
            ]
        )
        if refused:
            return refused
        return _Applied(left, (self._step("msg-msgS", left, right, premises),))

    def _rule_msgS_msg(self, ctx, left, right, path):
        if not (isinstance(left, Message) and isinstance(right, Message)):
            return None
        refused, premises = self._run_premises(
            [
                (*self._skipL(ctx, left), _STRUCTURAL),
                (*self._realK(ctx, right), _STRUCTURAL),
                (*self._rankfreeR(ctx, right), _STRUCTURAL),
            ]
        )
        if refused:
            return refused
        return _Applied(right, (self._step("msgS-msg", left, right, premises),))

    def _rule_msg_msg_eq(self, ctx, left, right, path):
        if not (isinstance(left, Message) and isinstance(right, Message)):
            return None
        endpoints = And(Cmp("=", left.src, right.src), Cmp("=", left.dst, right.dst))
        refused, premises = self._run_premises(
            [
                (*self._realL(ctx, left), _STRUCTURAL),
                (*self._realK(ctx, right), _STRUCTURAL),
                (*self._entail(ctx, "endpoints-equal", endpoints, Verdict.VALID), _STRUCTURAL),
                (*self._payload_equiv(ctx, left.payload, right.payload), _DATATYPE),
            ]
        )
        if refused:
            return refused
        return _Applied(left, (self._step("msg-msg-eq", left, right, premises),))

    def _rule_msg_msg_right(self, ctx, left, right, path):
        return self._interleave_messages(ctx, left, right, first=right, second=left, rule="msg-msg-right")

    def _rule_msg_msg_left(self, ctx, left, right, path):
        return self._interleave_messages(ctx, left, right, first=left, second=right, rule="msg-msg-left")

    def _interleave_messages(self, ctx, left, right, first, second, rule):
        if not (isinstance(left, Message) and isinstance(right, Message)):
            return None
        # Non-interference: the left message never touches rank k, the right
        # message never touches an already-merged rank, so the two orders are
        # indistinguishable to every rank involved.
        refused, premises = self._run_premises(
            [
                (*self._realL(ctx, left), _STRUCTURAL),
                (*self._kfreeL(ctx, left), _STRUCTURAL),
                (*self._realK(ctx, right), _STRUCTURAL),
                (*self._rankfreeR(ctx, right), _STRUCTURAL),
            ]
        )
        if refused:
            return refused
        return _Applied(Seq(first, second), (self._step(rule, left, right, premises),))

    # -- collective and structural rules

    def _rule_allred_allred(self, ctx, left, right, path):
        if not (isinstance(left, Allreduce) and isinstance(right, Allreduce)):
            return None
        op_check = PremiseCheck(
            "op-equal",
            f"{left.op.value} = {right.op.value}",
            "equal" if left.op is right.op else "different",
        )
        refused, premises = self._run_premises(
            [
                (left.op is right.op, op_check, _ENTAILMENT),
                (*self._payload_equiv(ctx, left.payload, right.payload), _DATATYPE),
            ]
        )
        if refused:
            return refused
        binder = left.binder
        rcont = right.cont
        if right.binder != binder:
            rcont = subst_type(rcont, {right.binder: Var(binder)})
        sub = self.merge(ctx.extend(binder, left.payload), left.cont, rcont, path + ("allreduce.cont",))
        if sub is None:
            return _Refused("continuations do not merge", _SUBMERGE)
        cont, substeps = sub
        result = Allreduce(left.op, binder, left.payload, cont)
        return _Applied(result, (self._step("allred-allred", left, right, premises),) + substeps)

    def _rule_foreach_foreach(self, ctx, left, right, path):
        if not (isinstance(left, Foreach) and isinstance(right, Foreach)):
            return None
        bounds = And(Cmp("=", left.lo, right.lo), Cmp("=", left.hi, right.hi))
        refused, premises = self._run_premises(
            [(*self._entail(ctx, "bounds-equal", bounds, Verdict.VALID), _ENTAILMENT)]
        )
        if refused:
            return refused
        binder = left.binder
        rbody = right.body
        if right.binder != binder:
            rbody = subst_type(rbody, {right.binder: Var(binder)})
        y = _fresh("y", index_vars(left.lo) | index_vars(left.hi) | {binder})
        entry = Refined(
            y, Integer(), And(Cmp("<=", left.lo, Var(y)), Cmp("<=", Var(y), left.hi))
        )
        sub = self.merge(ctx.extend(binder, entry), left.body, rbody, path + (f"foreach[{binder}].body",))
        if sub is None:
            return _Refused("loop bodies do not merge", _SUBMERGE)
        body, substeps = sub
        result = Foreach(binder, left.lo, left.hi, body)
        return _Applied(result, (self._step("foreach-foreach", left, right, premises),) + substeps)

    def _rule_seq_seq(self, ctx, left, right, path):
        if not (isinstance(left, Seq) or isinstance(right, Seq)):
            return None
        if isinstance(left, Skip) or isinstance(right, Skip):
            return None
        lh, lt = _seq_parts(left)
        rh, rt = _seq_parts(right)
        sub1 = self.merge(ctx, lh, rh, path + ("seq.first",))
        if sub1 is None:
            return _Refused("first components do not merge", _SUBMERGE)
        sub2 = self.merge(ctx, lt, rt, path + ("seq.second",))
        if sub2 is None:
            return _Refused("second components do not merge", _SUBMERGE)
        (t5, steps1), (t6, steps2) = sub1, sub2
        result = normalize_seq(Seq(t5, t6))
        return _Applied(result, (self._step("seq-seq", left, right, ()),) + steps1 + steps2)

    def _rule_skip_msgT(self, ctx, left, right, path):
        if not (
            isinstance(left, Skip) and isinstance(right, Seq) and isinstance(right.first, Message)
        ):
            return None
        sub1 = self.merge(ctx, Skip(), right.first, path + ("seq.head",))
        if sub1 is None:
            return _Refused("head does not merge against skip", _SUBMERGE)
        sub2 = self.merge(ctx, Skip(), right.second, path + ("seq.tail",))
        if sub2 is None:
            return _Refused("tail does not merge against skip", _SUBMERGE)
        (head, steps1), (tail, steps2) = sub1, sub2
        result = normalize_seq(Seq(head, tail))
        return _Applied(result, (self._step("skip-msgT", left, right, ()),) + steps1 + steps2)

    def _rule_msgT_skipT(self, ctx, left, right, path):
        if not (
            isinstance(right, Skip) and isinstance(left, Seq) and isinstance(left.first, Message)
        ):
            return None
        sub1 = self.merge(ctx, left.first, Skip(), path + ("seq.head",))
        if sub1 is None:
            return _Refused("head does not merge against skip", _SUBMERGE)
        sub2 = self.merge(ctx, left.second, Skip(), path + ("seq.tail",))
        if sub2 is None:
            return _Refused("tail does not merge against skip", _SUBMERGE)
        (head, steps1), (tail, steps2) = sub1, sub2
        result = normalize_seq(Seq(head, tail))
        return _Applied(result, (self._step("msgT-skipT", left, right, ()),) + steps1 + steps2)

    def _rule_msgT_msgT_left(self, ctx, left, right, path):
        if not (isinstance(left, Seq) or isinstance(right, Seq)):
            return None
        lh, lt = _seq_parts(left)
        rh, _ = _seq_parts(right)
        if not (isinstance(lh, Message) and isinstance(rh, Message)):
            return None
        # The left head is emitted first; it must be invisible to rank k,
        # whose own first action is the right head.
        refused, premises = self._run_premises(
            [
                (*self._realL(ctx, lh), _STRUCTURAL),
                (*self._kfreeL(ctx, lh), _STRUCTURAL),
                (*self._realK(ctx, rh), _STRUCTURAL),
            ]
        )
        if refused:
            return refused
        sub = self.merge(ctx, lt, right, path + ("seq.tail-vs-right",))
        if sub is None:
            return _Refused("left tail does not merge against the right type", _SUBMERGE)
        rest, substeps = sub
        result = normalize_seq(Seq(lh, rest))
        return _Applied(result, (self._step("msgT-msgT-left", left, right, premises),) + substeps)

    def _rule_msgT_msgT_right(self, ctx, left, right, path):
        if not (isinstance(left, Seq) or isinstance(right, Seq)):
            return None
        lh, _ = _seq_parts(left)
        rh, rt = _seq_parts(right)
        if not (isinstance(lh, Message) and isinstance(rh, Message)):
            return None
        refused, premises = self._run_premises(
            [
                (*self._realK(ctx, rh), _STRUCTURAL),
                (*self._rankfreeR(ctx, rh), _STRUCTURAL),
                (*self._realL(ctx, lh), _STRUCTURAL),
            ]
        )
        if refused:
            return refused
        sub = self.merge(ctx, left, rt, path + ("left-vs-seq.tail",))
        if sub is None:
            return _Refused("left type does not merge against the right tail", _SUBMERGE)
        rest, substeps = sub
        result = normalize_seq(Seq(rh, rest))
        return _Applied(result, (self._step("msgT-msgT-right", left, right, premises),) + substeps)


RULE_NAMES = (
    "skip-skip",
    "skip-msgS",
    "msgS-skip",
    "msgS-msgS",
    "msg-skip",
    "skip-msg",
    "msg-msgS",
    "msgS-msg",
    "msg-msg-eq",
    "allred-allred",
    "foreach-foreach",
    "seq-seq",
    "skip-msgT",
    "msgT-skipT",
    "msg-msg-right",
    "msg-msg-left",
    "msgT-msgT-left",
    "msgT-msgT-right",
)


def _validate_merge_inputs(
    ctx: TypingContext, left: ProtocolType, right: ProtocolType, k: int
) -> None:
    if ctx.lookup("size") is None or ctx.lookup("rank") is None:
        raise InvalidRankSet("merge context must bind both size and rank")
    domain = domain_of(ctx, "rank")
    if isinstance(domain, FiniteSet) and k in domain.values:
        raise InvalidRankSet(f"rank {k} is already part of the merged set {domain.values}")
    holes = type_holes(left) | type_holes(right)
    if holes:
        names = ", ".join(f"?{h}" for h in sorted(holes))
        raise ValueError(f"cannot merge types containing holes: {names}")


def merge_types(
    ctx: TypingContext,
    left: ProtocolType,
    right: ProtocolType,
    k: int,
    enum_cap: int = DEFAULT_ENUM_CAP,
) -> tuple[ProtocolType, MergeTrace]:
    """Merge the accumulated type with rank k's local type under ctx.

    Raises MergeFailure (with a Diagnostic) when no derivation exists.
    """
    left, right = normalize_seq(left), normalize_seq(right)
    _validate_merge_inputs(ctx, left, right, k)
    engine = _Engine(k, enum_cap)
    outcome = engine.merge(ctx, left, right, ())
    if outcome is None:
        raise MergeFailure(engine.diagnostic(left, right))
    result, steps = outcome
    return result, MergeTrace(steps)


def attempt_rule(
    ctx: TypingContext,
    rule: str,
    left: ProtocolType,
    right: ProtocolType,
    k: int,
    enum_cap: int = DEFAULT_ENUM_CAP,
) -> ProtocolType | None:
    """Apply exactly one named rule at the root (subgoals use the full engine).

    Returns the rule's conclusion, or None when the rule is inapplicable,
    whether because the operand shapes do not match or a premise fails.
    """
    engine = _Engine(k, enum_cap)
    for name, fn in engine.rules:
        if name == rule:
            outcome = fn(ctx, normalize_seq(left), normalize_seq(right), ())
            return outcome.result if isinstance(outcome, _Applied) else None
    raise ValueError(f"unknown merge rule {rule!r}; expected one of {', '.join(RULE_NAMES)}")


# ---------------------------------------------------------------------------
# Folding all ranks


def _head_unfoldable(ctx: TypingContext, t: ProtocolType, unroll: int) -> bool:
    head = t.first if isinstance(t, Seq) else t
    if not isinstance(head, Foreach):
        return False
    try:
        lo, hi = _constant_bounds(ctx, head)
    except NonConstantBounds:
        return False
    return hi - lo + 1 <= unroll


def _unfold_head(ctx: TypingContext, t: ProtocolType) -> ProtocolType:
    if isinstance(t, Seq):
        return normalize_seq(Seq(unfold_foreach(ctx, t.first), t.second))
    return unfold_foreach(ctx, t)


def merge_all(
    n: int,
    local_types: Sequence[tuple[int, ProtocolType]],
    order: Sequence[int] | None = None,
    enum_cap: int = DEFAULT_ENUM_CAP,
    unroll: int = DEFAULT_UNROLL,
) -> tuple[ProtocolType, list[MergeTrace]]:
    """Fold merge_types over all ranks in the given order (default 0..n-1).

    When a step fails and exactly one side starts with a small constant-bound
    foreach (at most `unroll` iterations), that side is unfolded and the step
    retried once.
    """
    types = dict(local_types)
    if len(types) != len(local_types):
        raise ValueError("duplicate rank in local types")
    if set(types) != set(range(n)):
        raise ValueError(f"local types must cover ranks 0..{n - 1} exactly once")
    sequence = list(order) if order is not None else list(range(n))
    if sorted(sequence) != list(range(n)):
        raise ValueError(f"order {sequence} is not a permutation of 0..{n - 1}")

    merged = [sequence[0]]
    accumulated = normalize_seq(types[sequence[0]])
    traces: list[MergeTrace] = []
    for k in sequence[1:]:
        ctx = merged_context(n, merged)
        incoming = normalize_seq(types[k])
        try:
            accumulated, trace = _merge_step(ctx, accumulated, incoming, k, enum_cap, unroll)
        except MergeFailure as failure:
            raise failure.annotated(
                f"merging rank {k} into ranks {sorted(merged)}"
            ) from None
        traces.append(trace)
        merged.append(k)
    return accumulated, traces


def _merge_step(
    ctx: TypingContext,
    left: ProtocolType,
    right: ProtocolType,
    k: int,
    enum_cap: int,
    unroll: int,
) -> tuple[ProtocolType, MergeTrace]:
    try:
        return merge_types(ctx, left, right, k, enum_cap)
    except MergeFailure:
        left_unfoldable = _head_unfoldable(ctx, left, unroll)
        right_unfoldable = _head_unfoldable(ctx, right, unroll)
        if left_unfoldable == right_unfoldable:
            raise
        if left_unfoldable:
            left = _unfold_head(ctx, left)
        else:
            right = _unfold_head(ctx, right)
        return merge_types(ctx, left, right, k, enum_cap)
