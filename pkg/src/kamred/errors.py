"""Exception hierarchy shared across the package."""


class KamredError(Exception):
    """Base class for all package errors."""


class WidthError(KamredError):
    """A norm was requested at a width larger than the declared one."""


class SmallDivisorError(KamredError):
    """A divisor |omega . l| fell below the Diophantine floor.

    Carries the offending multi-index and the measured margin.
    """

    def __init__(self, message, index=None, divisor=None, floor=None):
        super().__init__(message)
        self.index = index
        self.divisor = divisor
        self.floor = floor


class InversionError(KamredError):
    """Fixed-point inversion of a torus diffeomorphism failed to contract."""


class SmallnessError(KamredError):
    """A smallness certificate required by a lemma-level construction failed."""


class SeriesDivergenceError(KamredError):
    """Argument of an analytic composition exceeded the series radius."""


class CertificateError(KamredError):
    """A run-level certificate (structural residual, contraction, ...) failed.

    The failing invariant is named in the message; the CLI maps this to
    exit code 3.
    """


class OmegaExcludedError(KamredError):
    """The frequency was excluded by a Diophantine or Melnikov condition.

    Not a crash: the CLI maps this to exit code 4. Carries the offending
    (l, j, j') triple and the measured margin when available.
    """

    def __init__(self, message, triple=None, margin=None):
        super().__init__(message)
        self.triple = triple
        self.margin = margin


class ConfigError(KamredError):
    """A problem file failed to parse or validate; maps to exit code 2."""
