"""Direct simulation of the eps-periodic transformed Stokes problem on the fixed perforated domain."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import ndimage

from . import linalg
from .errors import EmptyPoreCell
from .geometry import EpsDeformation, MacroDomain, ReferenceCell, _frac, build_lattice
from .macrodarcy import MacroData
from .stokesfem import (N1, N2, DN2, OUTSIDE, PORE, QUAD_W, SOLID, AssembledStokes,
                        BoundaryConditions, FemMesh, StokesRhs, StokesSolution, TransformedCoeffs,
                        assemble_system, build_dofmap, solve_assembled)
from .io import write_vtk_points

log = logging.getLogger(__name__)

DNS_BC = BoundaryConditions(periodic=(False, False), solid="dirichlet", outer="stress")
MIN_PORE_FRACTION = 1e-3
DARCY_GAMMA = 0.1


@dataclass
class PerforatedMesh:
    eps: Fraction
    m: int
    cell: ReferenceCell
    lattice: list
    mesh: FemMesh
    lattice_index: np.ndarray     # (nx, ny) grid cell -> lattice cell id (-1 outside)

    @property
    def dofmap(self):
        if not hasattr(self, "_dofmap"):
            self._dofmap = build_dofmap(self.mesh, DNS_BC)
        return self._dofmap

    @property
    def n_gamma_nodes(self):
        return int(self.dofmap.dirichlet.sum())

    def euler_characteristic(self):
        """Components minus holes of the pore region (cells joined through edges)."""
        pore = self.mesh.state == PORE
        _, n_comp = ndimage.label(pore)
        comp = np.pad(~pore, 1, constant_values=True)
        _, n_bg = ndimage.label(comp, structure=np.ones((3, 3)))
        return n_comp - (n_bg - 1)


def build_perforated_mesh(domain: MacroDomain, cell: ReferenceCell, eps, m=None):
    """Tile the domain with eps-scaled copies of the reference pore at ``m`` cells per period."""
    eps = _frac(eps)
    m = cell.n if m is None else m
    if cell.n != m:
        raise ValueError("reference cell resolution must equal the micro resolution m")
    if m < 16:
        log.warning("micro resolution m=%d below the recommended minimum 16", m)
    cell.validate()
    lattice = build_lattice(domain, eps)
    occ = domain.occupancy(eps)
    (x0, y0), _ = domain.bounding_box
    nlx, nly = occ.shape
    state = np.full((nlx * m, nly * m), OUTSIDE, dtype=np.int8)
    lat_idx = -np.ones((nlx * m, nly * m), dtype=np.int64)
    tile = np.where(cell.pore_mask, PORE, SOLID).astype(np.int8)
    for k, (i, j) in enumerate(np.argwhere(occ)):
        state[i * m:(i + 1) * m, j * m:(j + 1) * m] = tile
        lat_idx[i * m:(i + 1) * m, j * m:(j + 1) * m] = k
    mesh = FemMesh(nlx * m, nly * m, float(eps) / m, state, np.array([float(x0), float(y0)]))
    pm = PerforatedMesh(eps, m, cell, lattice, mesh, lat_idx)
    _, n_comp = ndimage.label(state == PORE)
    log.info("perforated mesh eps=%s: %d lattice cells, %d pore cells, %d pore components",
             eps, len(lattice), len(mesh.cells), n_comp)
    return pm


@dataclass
class PerforatedSolution:
    pmesh: PerforatedMesh
    stokes: StokesSolution        # total velocity v = w + v_Gamma and pressure q
    lift_nodes: np.ndarray        # boundary-velocity interpolant at merged nodes
    t: float
    deformation: EpsDeformation | None
    data: MacroData
    asm: AssembledStokes | None = None

    @property
    def w_nodes(self):
        return self.stokes.velocity - self.lift_nodes

    def norms(self):
        """Discrete ``(||w||, ||grad w||, ||q||)`` on the reference perforated domain."""
        mesh = self.pmesh.mesh
        nodes = self.stokes.dofmap.q2_merged[mesh.q2_nodes(mesh.cells)]
        we = self.w_nodes[nodes]
        wq = QUAD_W * mesh.h ** 2
        wv = np.einsum("qk,nkc->nqc", N2, we)
        wg = np.einsum("qka,nkc->nqac", DN2 / mesh.h, we)
        pe = self.stokes.element_pressure()
        pq = pe @ N1.T
        return (float(np.sqrt(np.einsum("q,nqc->", wq, wv ** 2))),
                float(np.sqrt(np.einsum("q,nqac->", wq, wg ** 2))),
                float(np.sqrt(np.einsum("q,nq->", wq, pq ** 2))))

    def apriori_quantity(self):
        w, gw, q = self.norms()
        return w + float(self.pmesh.eps) * gw + q

    def to_csv(self, path):
        return self.stokes.to_csv(path)


def eps_coefficients(pmesh: PerforatedMesh, deformation: EpsDeformation | None, t, nu):
    eps = float(pmesh.eps)
    if deformation is None:
        return TransformedCoeffs.identity(pmesh.mesh, nu, eps ** 2)
    return TransformedCoeffs.from_jacobian(pmesh.mesh, lambda x: deformation.jacobian(t, x),
                                           c_J=deformation.c_J, div_mode="zero",
                                           viscosity=nu, viscous_scale=eps ** 2)


def solve_eps_problem(pmesh: PerforatedMesh, deformation: EpsDeformation | None, data: MacroData,
                      t=0.0, tol=linalg.DEFAULT_TOL, lift_mode="lift", keep_system=False):
    """Solve for ``(w, q)`` with ``v = w + v_Gamma`` and ``p = q + p_b``.

    ``deformation=None`` means the identity map (static perforated domain).
    ``lift_mode="lift"`` subtracts the interpolated boundary velocity; with
    ``"dirichlet"`` the same data enter as inhomogeneous Dirichlet values.
    """
    mesh = pmesh.mesh
    coeffs = eps_coefficients(pmesh, deformation, t, data.nu)

    def psi(x):
        return x if deformation is None else deformation.psi(t, x)

    def force(x):
        z = psi(x)
        return np.asarray(data.f(t, z), dtype=float) - np.asarray(data.grad_p_b(t, z), dtype=float)

    boundary_velocity = None
    if deformation is not None:
        def boundary_velocity(x):
            return deformation.dt_psi(t, x)

    if lift_mode == "lift":
        rhs = StokesRhs(force=force, lift=boundary_velocity)
        bc = DNS_BC
    elif lift_mode == "dirichlet":
        rhs = StokesRhs(force=force)
        bc = BoundaryConditions(periodic=(False, False), solid="dirichlet", outer="stress",
                                dirichlet_value=boundary_velocity)
    else:
        raise ValueError(f"unknown lift mode '{lift_mode}'")
    asm = assemble_system(mesh, coeffs, bc, rhs, symmetric=True, dofmap=pmesh.dofmap,
                          darcy_gamma=DARCY_GAMMA)
    sol = solve_assembled(asm, mesh, tol)
    log.info("eps=%s: %d velocity / %d pressure dofs, %d MINRES iterations",
             pmesh.eps, asm.system.n_velocity, asm.system.n_pressure, sol.iterations)
    lift = np.zeros_like(sol.velocity)
    if boundary_velocity is not None:
        lift = np.asarray(boundary_velocity(asm.dofmap.node_coords), dtype=float)
    return PerforatedSolution(pmesh, sol, lift, t, deformation, data, asm if keep_system else None)


# ---------------------------------------------------------------------------
# extensions and back transformation
# ---------------------------------------------------------------------------

@dataclass
class ExtendedFields:
    """Zero-extended velocity and cell-mean-extended pressure on the reference domain."""

    solution: PerforatedSolution
    cell_means: np.ndarray        # pore mean of q per lattice cell (J-weighted)
    pore_measure: np.ndarray      # deformed pore measure per lattice cell

    def pressure_at_quadrature(self, J_all=None):
        """Extended pressure at the 3x3 Gauss points of every grid cell inside the domain.

        Returns ``(cells, values[n, 9])``.
        """
        pm = self.solution.pmesh
        mesh = pm.mesh
        cells = np.argwhere(mesh.state != OUTSIDE)
        vals = np.empty((len(cells), 9))
        cid = mesh.cell_id[cells[:, 0], cells[:, 1]]
        pore = cid >= 0
        pe = self.solution.stokes.element_pressure(mesh.cells[cid[pore]])
        vals[pore] = pe @ N1.T
        lat = pm.lattice_index[cells[~pore, 0], cells[~pore, 1]]
        vals[~pore] = self.cell_means[lat][:, None]
        return cells, vals

    def velocity_at(self, x):
        return self.solution.stokes.evaluate_velocity(x)

    def pressure_at(self, x):
        pm = self.solution.pmesh
        i, j, _, _ = pm.mesh.locate(x)
        out = self.solution.stokes.evaluate_pressure(x)
        solid = pm.mesh.cell_id[i, j] < 0
        lat = pm.lattice_index[i, j]
        out = np.where(solid & (lat >= 0), self.cell_means[np.maximum(lat, 0)], out)
        return out


def jacobian_at_cells(pmesh: PerforatedMesh, deformation, t, cells):
    mesh = pmesh.mesh
    if deformation is None:
        return np.ones((len(cells), 9))
    return deformation.det(t, mesh.quadrature_points(cells))


def extend_solution(sol: PerforatedSolution, min_fraction=MIN_PORE_FRACTION) -> ExtendedFields:
    """Velocity extended by zero; pressure by its J-weighted pore mean in each lattice cell."""
    pm = sol.pmesh
    mesh = pm.mesh
    J = jacobian_at_cells(pm, sol.deformation, sol.t, mesh.cells)
    wq = QUAD_W * mesh.h ** 2
    qv = sol.stokes.element_pressure() @ N1.T
    lat = pm.lattice_index[mesh.cells[:, 0], mesh.cells[:, 1]]
    nlat = len(pm.lattice)
    meas = np.bincount(lat, weights=J @ wq, minlength=nlat)
    integ = np.bincount(lat, weights=(J * qv) @ wq, minlength=nlat)
    eps2 = float(pm.eps) ** 2
    if np.any(meas < min_fraction * eps2):
        k = int(np.argmin(meas))
        raise EmptyPoreCell(f"lattice cell {k} has pore measure {meas[k]:.3e}")
    return ExtendedFields(sol, integ / meas, meas)


def back_transform(sol: PerforatedSolution, query, tol=1e-12, maxit=8):
    """Physical-domain samples at points ``query``: velocity, q and p = q + p_b.

    The preimage under ``psi_eps(t, .)`` is found by Newton's method.
    """
    query = np.asarray(query, dtype=float)
    if sol.deformation is None:
        x = query.copy()
    else:
        x = sol.deformation.inverse(sol.t, query, tol, maxit)
    v = sol.stokes.evaluate_velocity(x)
    q = sol.stokes.evaluate_pressure(x)
    p = q + np.asarray(sol.data.p_b(sol.t, query), dtype=float)
    return {"reference": x, "velocity": v, "q": q, "p": p}


def resample_physical(sol: PerforatedSolution, n_per_unit, path=None):
    """Back-transformed fields on a uniform grid of the bounding box (optionally to VTK)."""
    mesh = sol.pmesh.mesh
    nx = int(round(mesh.nx * mesh.h * n_per_unit)) + 1
    ny = int(round(mesh.ny * mesh.h * n_per_unit)) + 1
    xs = mesh.origin[0] + np.arange(nx) / n_per_unit
    ys = mesh.origin[1] + np.arange(ny) / n_per_unit
    pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
    res = back_transform(sol, pts)
    if path is not None:
        write_vtk_points(path, (nx, ny), mesh.origin, (1.0 / n_per_unit, 1.0 / n_per_unit),
                         {"velocity": res["velocity"], "q": res["q"], "p": res["p"]})
    return res
