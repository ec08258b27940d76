"""Periodic Stokes cell problems and the permeability tensor they define."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import linalg
from .errors import AsymmetryExceeded, DisconnectedPore, EvoDarcyError, GeometryError
from .geometry import (DeformationFamily, FamilyDeformation, MicroDeformation, PorosityField,
                       ReferenceCell, midpoints)
from .io import write_csv
from .stokesfem import (DN2, N2, QUAD_W, BoundaryConditions, FemMesh, StokesRhs,
                        StokesSolution, TransformedCoeffs, assemble_system, solve_assembled)

log = logging.getLogger(__name__)

CELL_BC = BoundaryConditions(periodic=(True, True), solid="dirichlet", outer="dirichlet")
ASYMMETRY_TOL = 1e-8


@dataclass
class CellSolution:
    """Cell velocities and pressures for the unit forcings ``e_1, e_2``."""

    mesh: FemMesh
    coeffs: TransformedCoeffs
    solutions: list
    loads: list                  # assembled right-hand sides F_i
    free_velocity: list          # free velocity vectors u_i
    t: float = 0.0
    x: tuple = (0.0, 0.0)
    residuals: list = field(default_factory=list)

    @property
    def n(self):
        return self.mesh.nx


@dataclass
class PermeabilityTensor:
    K: np.ndarray                # gradient formula
    K_average: np.ndarray        # i-th component of the J-weighted mean of u_j
    min_eigenvalue: float
    t: float = 0.0
    x: tuple = (0.0, 0.0)
    grid_n: int = 0
    formula: str = "gradient"

    @property
    def asymmetry(self):
        return float(np.linalg.norm(self.K_average - self.K_average.T) /
                     max(np.linalg.norm(self.K_average), 1e-300))

    @property
    def galerkin_gap(self):
        return float(np.abs(self.K - self.K_average).max())

    def is_spd(self):
        return self.min_eigenvalue > 0.0


def cell_mesh(cell: ReferenceCell):
    return FemMesh.from_mask(cell.pore_mask, h=1.0 / cell.n)


def cell_coefficients(mesh, deformation: MicroDeformation, t, x):
    x = np.asarray(x, dtype=float)
    return TransformedCoeffs.from_jacobian(
        mesh, lambda y: deformation.jacobian(t, x, y), c_J=deformation.c_J,
        div_mode="zero" if deformation.analytic_piola else "fd")


def _unit_force(direction):
    d = np.asarray(direction, dtype=float)

    def force(pts):
        return np.broadcast_to(d, pts.shape).copy()

    return force


def _directions(i):
    if np.ndim(i) == 0:
        e = np.zeros(2)
        e[int(i)] = 1.0
        return e
    return np.asarray(i, dtype=float)


def solve_cell_problem(cell: ReferenceCell, deformation: MicroDeformation, t, x, i,
                       tol=linalg.DEFAULT_TOL, coeffs=None, precond="amg"):
    """Solve the transformed cell problem for forcing ``e_i`` (or a given vector).

    Returns the :class:`StokesSolution` (velocity ``u_i`` and J-mean-zero pressure).
    """
    mesh = cell_mesh(cell)
    coeffs = cell_coefficients(mesh, deformation, t, x) if coeffs is None else coeffs
    asm = assemble_system(mesh, coeffs, CELL_BC, StokesRhs(force=_unit_force(_directions(i))),
                          symmetric=False)
    return solve_assembled(asm, mesh, tol, precond)


def solve_cell_problems(cell: ReferenceCell, deformation: MicroDeformation, t=0.0, x=(0.0, 0.0),
                        tol=linalg.DEFAULT_TOL, scale=1.0):
    """Both cell problems on one assembly and one preconditioner setup."""
    cell.validate()
    mesh = cell_mesh(cell)
    coeffs = cell_coefficients(mesh, deformation, t, x)
    asm0 = assemble_system(mesh, coeffs, CELL_BC, symmetric=False)
    P = linalg.amg_preconditioner(asm0.system.A, components=2)
    sols, loads, frees, res = [], [], [], []
    for i in range(2):
        asm = assemble_system(mesh, coeffs, CELL_BC,
                              StokesRhs(force=_unit_force(scale * _directions(i))),
                              symmetric=False, dofmap=asm0.dofmap)
        sol = solve_assembled(asm, mesh, tol, precond=P)
        dm = asm.dofmap
        free = ~dm.dirichlet
        sols.append(sol)
        loads.append(asm.system.f)
        frees.append(np.concatenate([sol.velocity[free, 0], sol.velocity[free, 1]]))
        res.append(sol.residual)
    return CellSolution(mesh, coeffs, sols, loads, frees, t, tuple(np.asarray(x, dtype=float)), res)


def _weighted_gradients(sol: StokesSolution, coeffs: TransformedCoeffs):
    """``sqrt(w J) M grad u`` at all quadrature points, flattened."""
    mesh = sol.mesh
    ue = sol.element_velocity()                                # (n, 9, 2)
    G = np.einsum("qkb,nkc->nqbc", DN2 / mesh.h, ue)           # G[b, c] = d_b u_c
    if not coeffs.is_identity:
        G = np.einsum("nqab,nqbc->nqac", coeffs.M, G)
    w = np.sqrt(QUAD_W[None, :] * mesh.h ** 2 * coeffs.J)
    return (w[..., None, None] * G).ravel()


def permeability_from_gradients(sol: CellSolution, scale=1.0) -> PermeabilityTensor:
    """Gradient-formula permeability plus the average-velocity cross-check.

    ``scale`` is the forcing magnitude used in :func:`solve_cell_problems`;
    both tensors are normalised by it.
    """
    Z = np.column_stack([_weighted_gradients(s, sol.coeffs) for s in sol.solutions])
    K = (Z.T @ Z) / scale ** 2
    Kavg = np.array([[sol.loads[i] @ sol.free_velocity[j] for j in range(2)] for i in range(2)])
    Kavg /= scale ** 2
    # smallest eigenvalue of Z^T Z from the singular values of Z (no cancellation)
    smin = np.linalg.svd(Z, compute_uv=False).min() / abs(scale)
    tensor = PermeabilityTensor(K, Kavg, float(smin ** 2), sol.t, sol.x, sol.n)
    if tensor.asymmetry > ASYMMETRY_TOL:
        raise AsymmetryExceeded(f"relative asymmetry {tensor.asymmetry:.3e} exceeds {ASYMMETRY_TOL}")
    return tensor


def cell_permeability(cell, deformation, t=0.0, x=(0.0, 0.0), tol=linalg.DEFAULT_TOL):
    return permeability_from_gradients(solve_cell_problems(cell, deformation, t, x, tol))


def physical_cell(deformation: MicroDeformation, t, x, n):
    """Staircase mask of the deformed pore at resolution ``n``."""
    x = np.asarray(x, dtype=float)
    cell = ReferenceCell(n=n, pore_levelset=np.asarray(
        deformation.deformed_levelset(t, x, midpoints(n)), dtype=float))
    try:
        cell.validate()
    except DisconnectedPore:
        raise
    except GeometryError as exc:
        raise DisconnectedPore(f"deformed pore mask invalid: {exc}") from exc
    return cell


def solve_cell_physical(deformation: MicroDeformation, t, x, n, tol=linalg.DEFAULT_TOL):
    """Permeability from untransformed cell problems on the deformed staircase pore."""
    from .geometry import identity_deformation

    cell = physical_cell(deformation, t, x, n)
    ident = identity_deformation(lambda y: np.zeros(np.shape(y)[:-1]))
    return cell_permeability(cell, ident, t, x, tol)


# ---------------------------------------------------------------------------
# permeability table
# ---------------------------------------------------------------------------

@dataclass
class PermeabilityTable:
    theta: np.ndarray
    K: np.ndarray                # (m, 2, 2)
    min_eigenvalue: np.ndarray
    grid_n: int
    family: str = ""
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.K = np.asarray(self.K, dtype=float)
        if self.theta.size > 1 and np.any(np.diff(self.theta) <= 0):
            raise ValueError("porosity samples must be strictly increasing")
        if self.theta.size > 1:
            self._interp = PchipInterpolator(self.theta, self.K.reshape(len(self.theta), 4), axis=0)
            self._dinterp = self._interp.derivative()
        else:
            self._interp = None

    def __call__(self, theta):
        """Interpolated tensors, shape ``theta.shape + (2, 2)``."""
        theta = np.asarray(theta, dtype=float)
        if self._interp is None:
            return np.broadcast_to(self.K[0], theta.shape + (2, 2)).copy()
        lo, hi = self.theta[0], self.theta[-1]
        if np.any(theta < lo - 1e-12) or np.any(theta > hi + 1e-12):
            raise GeometryError(f"porosity outside the tabulated range [{lo}, {hi}]")
        return self._interp(np.clip(theta, lo, hi)).reshape(theta.shape + (2, 2))

    def to_csv(self, path):
        rows = [(th, K[0, 0], K[0, 1], K[1, 0], K[1, 1], lam, self.grid_n)
                for th, K, lam in zip(self.theta, self.K, self.min_eigenvalue)]
        return write_csv(path, ["theta", "K11", "K12", "K21", "K22", "min_eigenvalue", "grid_n"], rows)

    @classmethod
    def from_csv(cls, path):
        from .io import read_csv

        _, data = read_csv(path)
        K = data[:, 1:5].reshape(-1, 2, 2)
        return cls(data[:, 0], K, data[:, 5], int(data[0, 6]) if len(data) else 0)


def tabulate_permeability(family: DeformationFamily, thetas, n, tol=linalg.DEFAULT_TOL,
                          c_J=0.1, on_sample=None):
    """Permeability at each porosity of ``thetas`` for a porosity-driven family."""
    thetas = np.asarray(sorted(float(t) for t in thetas))
    family.check_theta(thetas)
    cell = family.reference_cell(n)
    tensors = []
    for th in thetas:
        deformation = FamilyDeformation(family, PorosityField.constant(th), c_J=c_J)
        try:
            kt = cell_permeability(cell, deformation, 0.0, (0.0, 0.0), tol)
        except EvoDarcyError as exc:
            exc.theta = float(th)
            exc.args = (f"porosity {th:g}: {exc}",) + exc.args[1:]
            raise
        log.info("theta=%.4f K11=%.6e K22=%.6e", th, kt.K[0, 0], kt.K[1, 1])
        tensors.append(kt)
        if on_sample is not None:
            on_sample(th, kt)
    return PermeabilityTable(thetas, np.array([k.K for k in tensors]),
                             np.array([k.min_eigenvalue for k in tensors]), n, family.name,
                             {"tensors": tensors})


def default_thetas(family: DeformationFamily, count=9):
    lo, hi = family.theta_range
    return np.linspace(lo, hi, count)
