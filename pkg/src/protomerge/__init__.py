"""Infer one global communication protocol from per-rank local behaviours.

The pipeline: parse each rank's process (`syntax`), extract its local
protocol type (`extract`), then fold the types together under the merge
relation (`merge`). A failed merge carries a Diagnostic pointing at the
communication pattern that no global protocol can explain. The `oracle`
module independently replays protocols over exhaustive interleavings.
"""

from .ast import (
    Allreduce,
    AllreduceStmt,
    And,
    Array,
    BinOp,
    Cmp,
    Cond,
    Datatype,
    Diagnostic,
    DiagnosticKind,
    DivisionByZero,
    Float,
    For,
    Foreach,
    FRESH_BINDER,
    Hole,
    If,
    IndexTerm,
    IntLit,
    Integer,
    Message,
    Not,
    Or,
    Process,
    Proposition,
    ProtocolType,
    ProtomergeError,
    PSeq,
    PSkip,
    Recv,
    ReduceOp,
    Refined,
    RuleAttempt,
    Send,
    Seq,
    Skip,
    TrueProp,
    TypingContext,
    UnboundVariable,
    Var,
    datatype_holes,
    datatype_vars,
    eval_index,
    eval_prop,
    fill_holes_datatype,
    fill_holes_type,
    index_vars,
    is_closed,
    prop_vars,
    subst_datatype,
    subst_index,
    subst_process,
    subst_prop,
    subst_type,
    trunc_div,
    type_holes,
)
from .extract import (
    ResidualConditional,
    UnsolvableEquations,
    collect,
    extract_local_type,
    solve,
    specialize,
)
from .logic import (
    DEFAULT_ENUM_CAP,
    FiniteSet,
    Interval,
    InvalidRankSet,
    NotIntegerRefined,
    Unbounded,
    UndecidableEquivalence,
    Verdict,
    domain_of,
    dtype_equiv,
    entails,
    initial_context,
    merged_context,
    singleton_env,
)
from .merge import (
    DEFAULT_UNROLL,
    MergeFailure,
    MergeStep,
    MergeTrace,
    NonConstantBounds,
    PremiseCheck,
    RULE_NAMES,
    attempt_rule,
    merge_all,
    merge_types,
    normalize_seq,
    unfold_foreach,
)
from .oracle import (
    Collective,
    CollectiveEvent,
    Completed,
    Deadlocked,
    MessageEvent,
    Mismatch,
    OpenIndexTerm,
    RecvFrom,
    SendTo,
    StateSpaceExceeded,
    cap_loops,
    linearize,
    simulate,
)
from .syntax import (
    ParseError,
    SourceSpan,
    compact_protocol,
    parse_datatype,
    parse_index,
    parse_process,
    parse_proposition,
    parse_protocol,
    print_datatype,
    print_index,
    print_process,
    print_proposition,
    print_protocol,
)

__version__ = "0.1.0"

__all__ = [
    "Allreduce",
    "AllreduceStmt",
    "And",
    "Array",
    "BinOp",
    "Cmp",
    "Collective",
    "CollectiveEvent",
    "Completed",
    "Cond",
    "DEFAULT_ENUM_CAP",
    "DEFAULT_UNROLL",
    "Datatype",
    "Deadlocked",
    "Diagnostic",
    "DiagnosticKind",
    "DivisionByZero",
    "FRESH_BINDER",
    "FiniteSet",
    "Float",
    "For",
    "Foreach",
    "Hole",
    "If",
    "IndexTerm",
    "IntLit",
    "Integer",
    "Interval",
    "InvalidRankSet",
    "MergeFailure",
    "MergeStep",
    "MergeTrace",
    "Message",
    "MessageEvent",
    "Mismatch",
    "NonConstantBounds",
    "Not",
    "NotIntegerRefined",
    "OpenIndexTerm",
    "Or",
    "PSeq",
    "PSkip",
    "ParseError",
    "PremiseCheck",
    "Process",
    "Proposition",
    "ProtocolType",
    "ProtomergeError",
    "RULE_NAMES",
    "Recv",
    "RecvFrom",
    "ReduceOp",
    "Refined",
    "ResidualConditional",
    "RuleAttempt",
    "Send",
    "SendTo",
    "Seq",
    "Skip",
    "SourceSpan",
    "StateSpaceExceeded",
    "TrueProp",
    "TypingContext",
    "UnboundVariable",
    "Unbounded",
    "UndecidableEquivalence",
    "UnsolvableEquations",
    "Var",
    "Verdict",
    "attempt_rule",
    "cap_loops",
    "collect",
    "compact_protocol",
    "datatype_holes",
    "datatype_vars",
    "domain_of",
    "dtype_equiv",
    "entails",
    "eval_index",
    "eval_prop",
    "extract_local_type",
    "fill_holes_datatype",
    "fill_holes_type",
    "index_vars",
    "initial_context",
    "is_closed",
    "linearize",
    "merge_all",
    "merge_types",
    "merged_context",
    "normalize_seq",
    "parse_datatype",
    "parse_index",
    "parse_process",
    "parse_proposition",
    "parse_protocol",
    "print_datatype",
    "print_index",
    "print_process",
    "print_proposition",
    "print_protocol",
    "prop_vars",
    "simulate",
    "singleton_env",
    "solve",
    "specialize",
    "subst_datatype",
    "subst_index",
    "subst_process",
    "subst_prop",
    "subst_type",
    "trunc_div",
    "type_holes",
    "unfold_foreach",
]
