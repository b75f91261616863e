"""Exception types shared across the package.

All of them derive from ``ValueError`` so callers that only care about
"bad input" can catch one thing. The CLI maps each class to a stable
error kind in its single-line error prefix.
"""


class StcnError(ValueError):
    kind = "error"


class ShapeError(StcnError):
    kind = "shape"


class ConfigError(StcnError):
    kind = "config"


class InputError(StcnError):
    kind = "input"


class NumericError(StcnError):
    kind = "numeric"
