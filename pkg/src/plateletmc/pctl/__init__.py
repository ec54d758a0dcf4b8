from .check import (
    QueryResult,
    Solution,
    bounded_reach,
    bounded_until,
    eval_state_formula,
    evaluate,
    expected_steps,
    unbounded_reach,
    unbounded_until,
)
from .syntax import (
    And,
    Atom,
    Eventually,
    Not,
    Or,
    ParseError,
    ProbQuery,
    ProbThreshold,
    TimeQuery,
    Until,
    UnsupportedFeature,
    bind,
    parse,
    pretty,
)
