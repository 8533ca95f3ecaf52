"""Execution oracle for protocols.

A protocol is checked independently of the merge engine by projecting it to a
straight-line action list per rank (`linearize`) and then exhaustively
exploring every interleaving under rendezvous semantics (`simulate`): a send
and the matching receive advance together, and a collective advances all
ranks at once. The explorer prefers completion over mismatch over deadlock,
so a protocol is only reported stuck when no interleaving finishes.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

from .ast import (
    Allreduce,
    Datatype,
    DivisionByZero,
    Foreach,
    IndexTerm,
    IntLit,
    Message,
    ProtocolType,
    ProtomergeError,
    ReduceOp,
    Seq,
    Skip,
    TypingContext,
    UnboundVariable,
    eval_index,
)
from .logic import dtype_equiv, initial_context, singleton_env
from .merge import normalize_seq, unfold_foreach
from .syntax import print_datatype

__all__ = [
    "Collective",
    "CollectiveEvent",
    "Completed",
    "Deadlocked",
    "MessageEvent",
    "Mismatch",
    "OpenIndexTerm",
    "RecvFrom",
    "SendTo",
    "StateSpaceExceeded",
    "cap_loops",
    "linearize",
    "simulate",
]

DEFAULT_STATE_CAP = 10**6


class OpenIndexTerm(ProtomergeError):
    """A message endpoint does not evaluate to a constant rank."""


class StateSpaceExceeded(ProtomergeError):
    """The interleaving exploration outgrew its state budget."""


# -- per-rank actions


@dataclass(frozen=True, slots=True)
class SendTo:
    peer: int
    payload: Datatype


@dataclass(frozen=True, slots=True)
class RecvFrom:
    peer: int
    payload: Datatype


@dataclass(frozen=True, slots=True)
class Collective:
    op: ReduceOp
    payload: Datatype


Action = SendTo | RecvFrom | Collective


# -- simulation events and results


@dataclass(frozen=True, slots=True)
class MessageEvent:
    src: int
    dst: int
    payload: Datatype


@dataclass(frozen=True, slots=True)
class CollectiveEvent:
    op: ReduceOp
    payload: Datatype


SimEvent = MessageEvent | CollectiveEvent


@dataclass(frozen=True, slots=True)
class Completed:
    trace: tuple[SimEvent, ...]


@dataclass(frozen=True, slots=True)
class Deadlocked:
    stuck: str


@dataclass(frozen=True, slots=True)
class Mismatch:
    detail: str


SimResult = Completed | Deadlocked | Mismatch


# ---------------------------------------------------------------------------
# Projection to action lists


def _eval_endpoint(env: dict[str, int], term: IndexTerm) -> int:
    try:
        return eval_index(env, term)
    except (UnboundVariable, DivisionByZero) as exc:
        raise OpenIndexTerm(f"message endpoint is not a constant rank: {exc}") from None


def linearize(ctx: TypingContext, t: ProtocolType, self_rank: int) -> list[Action]:
    """Project a protocol to rank self_rank's straight-line action list.

    Every foreach is fully unfolded (bounds must be constant under ctx) and
    every message endpoint must evaluate to a concrete rank.
    """
    env = singleton_env(ctx)
    actions: list[Action] = []

    def walk(node: ProtocolType) -> None:
        match node:
            case Skip():
                pass
            case Seq(first, second):
                walk(first)
                walk(second)
            case Message(src, dst, payload):
                s = _eval_endpoint(env, src)
                d = _eval_endpoint(env, dst)
                if s == self_rank:
                    actions.append(SendTo(d, payload))
                elif d == self_rank:
                    actions.append(RecvFrom(s, payload))
            case Allreduce(op, _, payload, cont):
                actions.append(Collective(op, payload))
                walk(cont)
            case Foreach():
                walk(unfold_foreach(ctx, node))
            case _:
                raise TypeError(f"unexpected protocol node {type(node).__name__}")

    walk(normalize_seq(t))
    return actions


def cap_loops(ctx: TypingContext, t: ProtocolType, bound: int) -> ProtocolType:
    """Truncate every constant-bound foreach to at most `bound` iterations.

    Loops whose bounds do not evaluate under ctx are left untouched. Useful
    for keeping linearizations small before simulating.
    """
    if bound < 1:
        raise ValueError("loop bound must be at least 1")
    env = singleton_env(ctx)

    def walk(node: ProtocolType) -> ProtocolType:
        match node:
            case Seq(first, second):
                return Seq(walk(first), walk(second))
            case Allreduce(op, binder, payload, cont):
                return Allreduce(op, binder, payload, walk(cont))
            case Foreach(binder, lo, hi, body):
                capped = walk(body)
                try:
                    lo_v = eval_index(env, lo)
                    hi_v = eval_index(env, hi)
                except (UnboundVariable, DivisionByZero):
                    return Foreach(binder, lo, hi, capped)
                if hi_v - lo_v + 1 > bound:
                    return Foreach(binder, lo, IntLit(lo_v + bound - 1), capped)
                return Foreach(binder, lo, hi, capped)
            case _:
                return node

    return walk(t)


# ---------------------------------------------------------------------------
# Exhaustive interleaving exploration


def _describe_action(rank: int, action: Action | None) -> str:
    match action:
        case None:
            return f"rank {rank}: done"
        case SendTo(peer, payload):
            return f"rank {rank}: send {print_datatype(payload)} to {peer}"
        case RecvFrom(peer, payload):
            return f"rank {rank}: receive {print_datatype(payload)} from {peer}"
        case Collective(op, payload):
            return f"rank {rank}: allreduce {op.value} {print_datatype(payload)}"


def simulate(
    actions: Sequence[Sequence[Action]],
    n: int,
    state_cap: int = DEFAULT_STATE_CAP,
    ctx: TypingContext | None = None,
) -> SimResult:
    """Explore every interleaving of the per-rank action lists.

    Returns Completed with one witness trace if some interleaving finishes,
    else Mismatch if some reachable pairing is blocked only by payload or
    operator disagreement, else Deadlocked with the first stuck state found.
    """
    if len(actions) != n:
        raise ValueError(f"expected {n} action lists, got {len(actions)}")
    if ctx is None:
        ctx = initial_context(n)
    lists = [list(rank_actions) for rank_actions in actions]
    final = tuple(len(l) for l in lists)
    start = (0,) * n

    equiv_cache: dict[tuple[Datatype, Datatype], bool] = {}

    def payload_eq(d1: Datatype, d2: Datatype) -> bool:
        key = (d1, d2)
        if key not in equiv_cache:
            equiv_cache[key] = dtype_equiv(ctx, d1, d2)
        return equiv_cache[key]

    parents: dict[tuple[int, ...], tuple[tuple[int, ...], SimEvent] | None] = {start: None}
    queue: deque[tuple[int, ...]] = deque([start])
    mismatch: Mismatch | None = None
    stuck: tuple[int, ...] | None = None

    def head(state: tuple[int, ...], rank: int) -> Action | None:
        return lists[rank][state[rank]] if state[rank] < len(lists[rank]) else None

    def push(state: tuple[int, ...], succ: tuple[int, ...], event: SimEvent) -> None:
        if succ not in parents:
            if len(parents) >= state_cap:
                raise StateSpaceExceeded(
                    f"more than {state_cap} interleaving states explored"
                )
            parents[succ] = (state, event)
            queue.append(succ)

    while queue:
        state = queue.popleft()
        if state == final:
            trace: list[SimEvent] = []
            cursor = state
            while parents[cursor] is not None:
                cursor, event = parents[cursor]
                trace.append(event)
            return Completed(tuple(reversed(trace)))
        progressed = False

        # Point-to-point rendezvous: a send head paired with the matching
        # receive head advances both ranks at once.
        for i in range(n):
            a = head(state, i)
            if not isinstance(a, SendTo):
                continue
            j = a.peer
            if not (0 <= j < n) or j == i:
                continue
            b = head(state, j)
            if not (isinstance(b, RecvFrom) and b.peer == i):
                continue
            if payload_eq(a.payload, b.payload):
                succ = list(state)
                succ[i] += 1
                succ[j] += 1
                push(state, tuple(succ), MessageEvent(i, j, a.payload))
                progressed = True
            elif mismatch is None:
                mismatch = Mismatch(
                    f"rank {i} sends {print_datatype(a.payload)} but rank {j} "
                    f"expects {print_datatype(b.payload)}"
                )

        # Collective: fires only when every rank has reached one.
        heads = [head(state, r) for r in range(n)]
        if all(isinstance(h, Collective) for h in heads):
            ops = {h.op for h in heads}
            if len(ops) > 1 and mismatch is None:
                names = ", ".join(sorted(op.value for op in ops))
                mismatch = Mismatch(f"collective operators disagree: {names}")
            elif len(ops) == 1:
                base = heads[0]
                if all(payload_eq(h.payload, base.payload) for h in heads[1:]):
                    succ = tuple(idx + 1 for idx in state)
                    push(state, succ, CollectiveEvent(base.op, base.payload))
                    progressed = True
                elif mismatch is None:
                    shapes = ", ".join(
                        f"rank {r}: {print_datatype(h.payload)}" for r, h in enumerate(heads)
                    )
                    mismatch = Mismatch(f"collective payloads disagree: {shapes}")

        if not progressed and state != final and stuck is None:
            stuck = state

    if mismatch is not None:
        return mismatch
    if stuck is None:
        stuck = start
    pending = "; ".join(_describe_action(r, head(stuck, r)) for r in range(n))
    return Deadlocked(pending)
