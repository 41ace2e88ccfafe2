"""Exception hierarchy.

Every error raised by this package derives from DipruneError.  The CLI maps
categories to exit codes: input/config problems exit 2, an unreachable
pruning budget exits 3, numerical failures exit 4.
"""


class DipruneError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class MalformedBlob(DipruneError):
    """Tensor blob file is corrupt, truncated, or violates its own header."""


class ModelLoadError(DipruneError):
    """Model manifest is invalid (dangling reference, cycle, shape clash)."""


class DatasetError(DipruneError):
    """Dataset file is invalid (bad label, row-length mismatch, bad format)."""


class ShapeError(DipruneError):
    """Tensor shapes are incompatible with the requested operation."""


class TapError(DipruneError):
    """Feature tap references an unknown layer or an unavailable stage."""


class DegenerateInput(DipruneError):
    """Input too small for the statistic (fewer than 2 samples per group)."""


class NumericalError(DipruneError):
    """A linear solve or factorization failed."""

    exit_code = 4


class HeuristicNotApplicable(DipruneError):
    """The scoring heuristic cannot be applied to this layer."""


class InvalidPrune(DipruneError):
    """Prune request would leave no channels or targets a protected layer."""


class ScoreCoverageError(DipruneError):
    """A ScoreTable does not cover every channel it is asked to rank."""


class GroupConstraintError(DipruneError):
    """A prune mask assigns different keep-vectors to members of one group."""


class ProfileError(DipruneError):
    """Stage profile cannot be extracted from or applied to the network."""


class TrainerUnsupported(DipruneError):
    """The network contains layer kinds the trainer cannot differentiate."""


class BudgetUnreachable(DipruneError):
    """Greedy pruning ran out of prunable channels before meeting the goal.

    Carries the partial result so callers can still inspect or save it.
    """

    exit_code = 3

    def __init__(self, message, net=None, trace=None):
        super().__init__(message)
        self.net = net
        self.trace = trace
