"""Exception hierarchy.

Every error carries a short ``code`` so the command line can print a single
machine-parsable line (``error[CODE]: message``) and exit nonzero.
"""


class FedLoraError(Exception):
    code = "ERROR"


class ShapeError(FedLoraError, ValueError):
    code = "SHAPE"


class StateError(FedLoraError, RuntimeError):
    code = "STATE"


class UnsupportedOpError(FedLoraError, NotImplementedError):
    code = "UNSUPPORTED_OP"


class NumericError(FedLoraError, ArithmeticError):
    code = "NUMERIC"


class ParameterError(FedLoraError, ValueError):
    code = "PARAMETER"


class LabelError(FedLoraError, ValueError):
    code = "LABEL"


class ModeError(FedLoraError, ValueError):
    code = "MODE"


class ProtocolError(FedLoraError, ValueError):
    code = "PROTOCOL"


class DivergenceError(NumericError):
    code = "DIVERGENCE"


class InsufficientDataError(FedLoraError, ValueError):
    code = "INSUFFICIENT_DATA"


class InsufficientShotsError(InsufficientDataError):
    code = "INSUFFICIENT_SHOTS"


class PartitionInfeasibleError(FedLoraError, RuntimeError):
    code = "PARTITION_INFEASIBLE"


class ParseError(FedLoraError, ValueError):
    code = "PARSE"


class RangeError(ParseError):
    code = "RANGE"


class ConfigError(ParseError):
    code = "CONFIG"


class CohortError(ParameterError):
    code = "EMPTY_COHORT"
