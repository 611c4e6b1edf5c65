# hiernas/common.py

from enum import Enum, IntEnum, unique


@unique
class OperatorKind(Enum):
    SEP_CONV_3X3 = "sep_conv_3x3"
    SEP_CONV_5X5 = "sep_conv_5x5"
    ATROUS_CONV_3X3_RATE2 = "atrous_conv_3x3_rate2"
    ATROUS_CONV_5X5_RATE2 = "atrous_conv_5x5_rate2"
    AVG_POOL_3X3 = "avg_pool_3x3"
    MAX_POOL_3X3 = "max_pool_3x3"
    SKIP_CONNECT = "skip_connect"
    # no connection
    ZERO = "zero"

    @property
    def is_zero(self) -> bool:
        return self is OperatorKind.ZERO

    @property
    def is_conv(self) -> bool:
        """
        True if this operator owns weights (depthwise + pointwise + BN).
        """
        return self in {
            OperatorKind.SEP_CONV_3X3,
            OperatorKind.SEP_CONV_5X5,
            OperatorKind.ATROUS_CONV_3X3_RATE2,
            OperatorKind.ATROUS_CONV_5X5_RATE2,
        }

    @property
    def kernel_size(self) -> int:
        if self in {OperatorKind.SEP_CONV_5X5, OperatorKind.ATROUS_CONV_5X5_RATE2}:
            return 5
        if self in {OperatorKind.SKIP_CONNECT, OperatorKind.ZERO}:
            return 1
        return 3

    @property
    def dilation(self) -> int:
        if self in {OperatorKind.ATROUS_CONV_3X3_RATE2, OperatorKind.ATROUS_CONV_5X5_RATE2}:
            return 2
        return 1


# Fixed order: alpha columns, tie-breaking and JSON all use it.
OPERATORS = tuple(OperatorKind)
OPERATOR_INDEX = {op: k for k, op in enumerate(OPERATORS)}
NON_ZERO_OPERATORS = tuple(op for op in OPERATORS if not op.is_zero)


@unique
class Downsample(IntEnum):
    X4 = 4
    X8 = 8
    X16 = 16
    X32 = 32


FACTORS = tuple(int(d) for d in Downsample)
FACTOR_INDEX = {s: i for i, s in enumerate(FACTORS)}


@unique
class Direction(IntEnum):
    """
    Outgoing direction of a trellis edge, as a beta column index.
    """

    TO_HALF = 0  # s -> s/2
    STAY = 1  # s -> s
    TO_DOUBLE = 2  # s -> 2s

    def target(self, s: int) -> int:
        if self is Direction.TO_HALF:
            return s // 2
        if self is Direction.TO_DOUBLE:
            return s * 2
        return s

    @classmethod
    def between(cls, src: int, dst: int) -> "Direction":
        if dst == src:
            return cls.STAY
        if dst == src * 2:
            return cls.TO_DOUBLE
        if dst * 2 == src:
            return cls.TO_HALF
        raise InvalidArgumentError(f"no single trellis step from {src} to {dst}")


@unique
class StartConvention(Enum):
    FIRST_LAYER_4_OR_8 = "first4or8"
    FIRST_LAYER_4 = "first4"

    @property
    def start_factors(self) -> tuple:
        if self is StartConvention.FIRST_LAYER_4:
            return (4,)
        return (4, 8)


@unique
class ExitCode(IntEnum):
    OK = 0
    USAGE = 2
    VALIDATION = 3
    NUMERIC = 4


class HierNasError(Exception):
    exit_code = ExitCode.USAGE


class InvalidArgumentError(HierNasError, ValueError):
    exit_code = ExitCode.USAGE


class UsageError(HierNasError):
    exit_code = ExitCode.USAGE


class ValidationError(HierNasError, ValueError):
    exit_code = ExitCode.VALIDATION


class ShapeError(ValidationError):
    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        super().__init__(
            f"{primitive}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes)
        )


class ResourceLimitError(HierNasError):
    exit_code = ExitCode.VALIDATION


class NumericError(HierNasError, ArithmeticError):
    exit_code = ExitCode.NUMERIC


class InternalConsistencyError(NumericError):
    pass


class DivergenceError(NumericError):
    def __init__(self, epoch: int, minibatch: int, detail: str):
        self.epoch = epoch
        self.minibatch = minibatch
        super().__init__(f"non-finite loss at epoch {epoch}, minibatch {minibatch}: {detail}")
