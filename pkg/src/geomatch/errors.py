"""Exception hierarchy shared by all geomatch modules."""


class GeomatchError(Exception):
    """Base class for every error raised by the library."""


class NumericalError(GeomatchError):
    """Raised when an integration or optimisation leaves the finite regime.

    The CLI maps every subclass to exit code 2.
    """


class NonFiniteError(NumericalError):
    pass


class JacobianCollapseError(NumericalError):
    pass


class SingularDifferentialError(NumericalError):
    pass


class LineSearchStallError(NumericalError):
    pass


class PartitionGapError(GeomatchError):
    """Pieces of a partition overlap or fail to cover the unit square."""


class OnJumpError(GeomatchError):
    pass


class OutsideDomainError(GeomatchError):
    pass


class FormatError(GeomatchError):
    pass


class ConfigError(GeomatchError):
    pass


class ExitedDomainWarning(UserWarning):
    """Particles left the unit square; Gaussian fields do not vanish on its boundary."""
