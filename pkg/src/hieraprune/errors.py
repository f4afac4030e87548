"""Exception hierarchy shared by all hieraprune modules.

Every error carries a distinct CLI exit code so shell callers can tell
failure modes apart without parsing messages.
"""


class HieraPruneError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InvalidTensor(HieraPruneError):
    """Tensor construction rejected (non-finite values, shape mismatch)."""

    exit_code = 10


class ZeroNorm(HieraPruneError):
    """Cosine similarity requested for a vector with near-zero norm."""

    exit_code = 11


class BadMagic(HieraPruneError):
    """Tensor file does not start with the HVTK magic bytes."""

    exit_code = 12


class BadVersion(HieraPruneError):
    """Tensor file header carries an unsupported version."""

    exit_code = 13


class BadKind(HieraPruneError):
    """Tensor file kind byte is unknown or inconsistent with its rank."""

    exit_code = 14


class ShapeOverflow(HieraPruneError):
    """Tensor file dims describe an implausibly large payload."""

    exit_code = 15


class TruncatedPayload(HieraPruneError):
    """Tensor file payload length disagrees with the header dims."""

    exit_code = 16


class IoFailure(HieraPruneError):
    """Underlying OS error while reading or writing a file."""

    exit_code = 17


class BudgetTooLarge(HieraPruneError):
    """Requested top-K budget exceeds the number of rankable entries."""

    exit_code = 18


class PlanMismatch(HieraPruneError):
    """Merge plan was built for a video with a different shape."""

    exit_code = 19


class SegmentMismatch(HieraPruneError):
    """Segment index sets do not partition the current token set."""

    exit_code = 20


class BudgetExceeded(HieraPruneError):
    """Requested kept count exceeds the number of available items."""

    exit_code = 21


class NumericalBreakdown(HieraPruneError):
    """Cholesky pivot collapsed before the selection budget was met.

    The greedy selector handles this condition internally (remaining picks
    fall back to relevance order); it is raised only when a caller asks for
    strict behaviour.
    """

    exit_code = 22


class ScheduleInvalid(HieraPruneError):
    """Prune schedule fails validation (non-monotone boundaries, bad ratios)."""

    exit_code = 23


class BadShape(HieraPruneError):
    """Synthetic generator parameters are inconsistent."""

    exit_code = 24


class Overflow(HieraPruneError):
    """FLOPs accumulator would exceed its guaranteed-exact range."""

    exit_code = 25


class ConfigError(HieraPruneError):
    """Run configuration failed validation; message names the offending key."""

    exit_code = 2
