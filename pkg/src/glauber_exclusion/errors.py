"""Exception hierarchy.

Two families matter to callers: :class:`ConfigurationError` (bad input,
mapped to CLI exit code 2) and :class:`RuntimeGuardError` (a safety limit
tripped during a run, mapped to exit code 3).
"""


class GlauberExclusionError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(GlauberExclusionError, ValueError):
    """Input violates an operation's precondition."""


class RuntimeGuardError(GlauberExclusionError, RuntimeError):
    """A run exceeded a configured safety limit."""


class InternalConsistencyError(GlauberExclusionError, AssertionError):
    """An internal invariant failed; this signals a bug."""


# lattice
class RadiusTooLarge(ConfigurationError):
    pass


class DimensionUnsupported(ConfigurationError):
    pass


# flip_model
class NotAttractive(ConfigurationError):
    pass


class SupportIndicatorNotMonotone(InternalConsistencyError):
    pass


class BallTooLarge(ConfigurationError):
    pass


class BoundarySignViolation(ConfigurationError):
    pass


class ParameterOutOfRange(ConfigurationError):
    pass


class NotMonotone(ConfigurationError):
    pass


# hydrodynamics
class StepTooLarge(ConfigurationError):
    pass


class DivisionNearZero(RuntimeGuardError):
    pass


class NonPositiveValue(ConfigurationError):
    pass


# graphical
class ConstructionMismatch(ConfigurationError):
    pass


class MarkCollision(RuntimeGuardError):
    pass


class DeskScaleExceeded(RuntimeGuardError):
    pass


# dual
class TreeSizeExplosion(RuntimeGuardError):
    pass


class MissingLeafSpin(ConfigurationError):
    pass


class HorizonExceeded(ConfigurationError):
    pass


class NoExtinctionSamples(RuntimeGuardError):
    pass


# analysis
class SupportMismatch(ConfigurationError):
    pass


class ProfileDoesNotBracket(RuntimeGuardError):
    pass


class SetTooLarge(ConfigurationError):
    pass


class RhoDegenerate(ConfigurationError):
    pass


class CoincidentStart(ConfigurationError):
    pass


class PreconditionViolated(ConfigurationError):
    pass
