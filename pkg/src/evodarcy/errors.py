"""Exception hierarchy shared by all modules."""


class EvoDarcyError(Exception):
    """Base class for every error raised by the package."""


class GeometryError(EvoDarcyError):
    pass


class DegenerateJacobian(GeometryError):
    """A deformation produced J below the admissible lower bound."""

    def __init__(self, jmin, c_j):
        super().__init__(f"Jacobian determinant {jmin:.6g} below lower bound c_J={c_j:.6g}")
        self.jmin = jmin
        self.c_j = c_j


class IncompatibleEpsilon(GeometryError):
    pass


class DisconnectedPore(GeometryError):
    pass


class EmptyPoreCell(GeometryError):
    pass


class EmptyDirichletSet(GeometryError):
    pass


class InconsistentBC(EvoDarcyError):
    pass


class SolverError(EvoDarcyError):
    pass


class NoConvergence(SolverError):
    def __init__(self, iterations, residual, what="solver"):
        super().__init__(f"{what} did not converge in {iterations} iterations "
                         f"(residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class SingularSystem(SolverError):
    pass


class NewtonDiverged(SolverError):
    pass


class AsymmetryExceeded(EvoDarcyError):
    pass


class NonSPDCoefficient(EvoDarcyError):
    pass


class SnapshotMismatch(EvoDarcyError):
    pass


class DegenerateFit(EvoDarcyError):
    pass


class ConfigError(EvoDarcyError):
    def __init__(self, message, key_path=""):
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path
