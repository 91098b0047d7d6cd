"""Exception and warning types shared across the package."""


class KacflowError(Exception):
    """Base class for all package-specific errors."""


class GridMismatch(KacflowError):
    """Two gridded objects do not live on the same grid."""


class TiltOutOfRange(KacflowError):
    """Requested exponential tilt lies at or beyond the admissible range."""


class QuadratureOverflow(KacflowError):
    """A quadrature integrand exceeds the floating-point range.

    Usually signals that the grid box is too small for the requested tilt,
    or that the energy-tilt parameter sits too close to its supremum.
    """


class NoConvergence(KacflowError):
    """An iterative solver exhausted its iteration budget."""


class DegenerateSample(KacflowError):
    """A sampler drew a configuration from which it cannot proceed."""


class NotUnit(KacflowError):
    """A direction vector is not normalized."""


class DegeneratePair(KacflowError):
    """Two colliding velocities coincide; no scattering direction exists."""


class RateBoundViolated(KacflowError):
    """A perturbed collision kernel exceeded its declared rate bound."""


class NonFiniteObjective(KacflowError):
    """The variational objective evaluated to a non-finite value."""


class AlphaNotFound(KacflowError):
    """Root bracketing for the energy-restoring dilation factor failed."""


class EmptyFeasible(KacflowError):
    """No scan point dominates the energies of the supplied path."""


class NegativeDensity(KacflowError):
    """A density reconstruction went negative beyond the tolerated mass."""


class EventTooRare(KacflowError):
    """Direct Monte Carlo saw too few hits and tilting is disabled."""


class WeightDegenerate(KacflowError):
    """Importance weights collapsed; effective sample size too small."""


class ChainTooShort(UserWarning):
    """An MCMC chain accepted fewer moves than the recommended minimum."""


class TailClipped(UserWarning):
    """A non-negligible share of a moment integral sits in the outermost bins."""


class NoJump(UserWarning):
    """An energy profile has no jumps; the associated cost is zero."""
