"""Exception types raised across the package."""


class RBSLODError(Exception):
    """Base class for all solver errors."""


class PatchCoversDomain(RBSLODError):
    """Oversampling patch fills the whole domain; reduce ell or refine the coarse mesh."""


class NonFiniteCoefficient(RBSLODError):
    """A coefficient evaluated to NaN or infinity at a quadrature point."""


class SingularSystem(RBSLODError):
    """Constrained fine-scale system is (numerically) singular."""


class EmptySigma(RBSLODError):
    """Patch has no interior boundary edges."""


class OutOfBox(RBSLODError):
    """Parameter vector outside the problem's parameter box."""


class DegenerateEigenspace(RBSLODError):
    """Smallest eigenvalue of the flux Gram matrix is (numerically) multiple."""


class UnstableBasis(RBSLODError):
    """No candidate selection yields a well-conditioned coarse collocation matrix."""


class SingularReducedSystem(RBSLODError):
    """Reduced Galerkin system is numerically singular; training data degenerate."""


class ArchiveMismatch(RBSLODError):
    """Offline archive does not match the requested mesh/ell/problem."""


class SingularCoarseSystem(RBSLODError):
    """Coarse collocation matrix could not be solved."""


class ZeroReference(RBSLODError):
    """Reference solution has zero norm; relative errors undefined."""


class CorruptArchive(RBSLODError):
    """Archive file failed magic/version/CRC validation."""


class SchemaMismatch(RBSLODError):
    """Archive header does not describe the requested problem configuration."""


class ConfigError(RBSLODError):
    """Invalid run configuration."""
