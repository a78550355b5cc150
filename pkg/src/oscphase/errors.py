"""Exception types raised across the library.

Every domain failure maps to one of these names so callers (and the CLI)
can distinguish configuration mistakes from numerical breakdowns.
"""


class OscphaseError(Exception):
    """Base class for all library errors."""


# -- model construction / evaluation ---------------------------------------

class UnknownModel(OscphaseError):
    """Requested built-in model name does not exist."""


class MissingParam(OscphaseError):
    """A required model parameter was not supplied."""


class NonPositiveParam(OscphaseError):
    """A parameter that must be positive was zero or negative."""


class NonFiniteInput(OscphaseError):
    """A state vector contained NaN or infinity."""


class BadCovariance(OscphaseError):
    """Noise covariance is not symmetric positive semidefinite."""


# -- periodic orbit ---------------------------------------------------------

class NoCycleFound(OscphaseError):
    """Newton shooting failed to converge to a periodic orbit."""


class UnstableCycle(OscphaseError):
    """A nontrivial Floquet multiplier has magnitude >= 1."""


class BadOrder(OscphaseError):
    """Requested derivative order is outside the supported range."""


class IntegrationFailure(OscphaseError):
    """The ODE integrator failed or produced an inconsistent result."""


# -- Floquet frame ----------------------------------------------------------

class ComplexMultipliers(OscphaseError):
    """Monodromy eigenvalues are not real and positive."""


class DegenerateEigenbasis(OscphaseError):
    """Monodromy eigenvector matrix is too ill-conditioned to invert."""


# -- phase extraction -------------------------------------------------------

class NewtonDivergence(OscphaseError):
    """Phase Newton iteration failed to converge to a stationary point."""


class DegenerateMinimum(OscphaseError):
    """Curvature of the weighted distance dropped to the stopping threshold."""


# -- stochastic simulation --------------------------------------------------

class BlowUp(OscphaseError):
    """Trajectory norm exceeded the configured bound."""


# -- first-passage machinery ------------------------------------------------

class BadDecay(OscphaseError):
    """Decay rate of the comparison process must be positive."""


class BadThreshold(OscphaseError):
    """Hitting threshold is inconsistent with the start point."""


class InsufficientSamples(OscphaseError):
    """Too few valid tube samples to fit the envelope constants."""


# -- CLI --------------------------------------------------------------------

class ConfigError(OscphaseError):
    """Experiment configuration failed validation."""
