"""Macroscopic Darcy pressure problem with a porosity-change source, Q1 on a Cartesian grid."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import linalg
from .errors import NonSPDCoefficient
from .geometry import MacroDomain
from .io import write_csv, write_vtk_points
from .stokesfem import OUTSIDE, PORE, FemMesh, q1_basis

_G2 = np.array([0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0)])
_S2, _T2 = np.meshgrid(_G2, _G2, indexing="xy")
QS, QT = _S2.ravel(), _T2.ravel()
QW = np.full(4, 0.25)
NQ, DNQ = q1_basis(QS, QT)                 # (4q, 4m), (4q, 4m, 2)
_, DNC = q1_basis(np.array(0.5), np.array(0.5))   # gradients at the cell centre


def _zero_scalar(t, x):
    return np.zeros(np.shape(x)[:-1])


def _zero_vector(t, x):
    return np.zeros(np.shape(x))


@dataclass
class MacroData:
    """Macroscopic data; every field is a callable ``(t, x)`` on point arrays."""

    f: Callable = _zero_vector
    p_b: Callable = _zero_scalar
    grad_p_b: Callable = _zero_vector
    nu: float = 1.0
    dt_theta: Callable = _zero_scalar

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("viscosity must be positive")


@dataclass
class MacroMesh:
    """Q1 mesh of a cuboid-union domain; boundary nodes carry q = 0."""

    grid: FemMesh
    node_index: np.ndarray       # grid Q1 node -> free node id (-1 boundary or outside)
    active: np.ndarray           # grid Q1 node touches the domain
    boundary: np.ndarray         # grid Q1 node on the domain boundary
    n_free: int

    @property
    def h(self):
        return self.grid.h

    @property
    def cells(self):
        return self.grid.cells

    def quadrature_points(self, cells=None):
        cells = self.cells if cells is None else cells
        g = self.grid
        x = g.origin[0] + g.h * (cells[:, 0, None] + QS[None, :])
        y = g.origin[1] + g.h * (cells[:, 1, None] + QT[None, :])
        return np.stack([x, y], axis=-1)

    def centers(self):
        g = self.grid
        return g.origin + g.h * (self.cells + 0.5)

    def element_nodes(self):
        return self.grid.q1_nodes(self.cells)


def build_macro_mesh(domain: MacroDomain, n_per_unit: int) -> MacroMesh:
    from fractions import Fraction

    h = Fraction(1, n_per_unit)
    occ = domain.occupancy(h)
    (x0, y0), _ = domain.bounding_box
    grid = FemMesh(occ.shape[0], occ.shape[1], float(h), np.where(occ, PORE, OUTSIDE),
                   np.array([float(x0), float(y0)]))
    nx, ny = occ.shape
    padded = np.zeros((nx + 2, ny + 2), dtype=bool)
    padded[1:-1, 1:-1] = occ
    touch_in = np.zeros((nx + 1, ny + 1), dtype=bool)
    touch_out = np.zeros((nx + 1, ny + 1), dtype=bool)
    for a in (0, 1):
        for b in (0, 1):
            c = padded[a:a + nx + 1, b:b + ny + 1]
            touch_in |= c
            touch_out |= ~c
    boundary = touch_in & touch_out
    free = touch_in & ~touch_out
    idx = -np.ones(free.size, dtype=np.int64)
    idx[free.ravel()] = np.arange(int(free.sum()))
    return MacroMesh(grid, idx, touch_in.ravel(), boundary.ravel(), int(free.sum()))


def _check_spd(K, tol=1e-12):
    Ks = np.asarray(K, dtype=float)
    asym = np.abs(Ks - np.swapaxes(Ks, -1, -2)).max() if Ks.size else 0.0
    scale = np.abs(Ks).max() if Ks.size else 1.0
    if asym > 1e-8 * max(scale, 1e-300):
        raise NonSPDCoefficient(f"permeability samples not symmetric (|K-K^T| = {asym:.3e})")
    lam = np.linalg.eigvalsh(0.5 * (Ks + np.swapaxes(Ks, -1, -2)))
    if lam.size and lam.min() < -tol * max(scale, 1e-300):
        raise NonSPDCoefficient(f"permeability sample with eigenvalue {lam.min():.3e}")
    if lam.size and lam.max(axis=-1).min() <= 0.0:
        raise NonSPDCoefficient("permeability sample vanishes identically")


def assemble_darcy(mesh: MacroMesh, K_field: Callable, nu: float):
    """Stiffness of ``int (1/nu) K grad q . grad phi`` on the interior nodes.

    ``K_field(points)`` returns tensors ``[..., 2, 2]``.  Semi-definite samples
    (eigenvalues down to ``-1e-12 |K|``) are accepted: degenerate directions
    are still controlled through the boundary condition.
    """
    pts = mesh.quadrature_points()
    K = np.asarray(K_field(pts), dtype=float)
    _check_spd(K)
    h = mesh.h
    dN = DNQ / h
    E = np.einsum("q,nqab,qma,qlb->nml", QW * h * h, K, dN, dN) / nu
    dofs = mesh.node_index[mesh.element_nodes()]
    rows = np.repeat(dofs, 4, axis=1).ravel()
    cols = np.tile(dofs, (1, 4)).ravel()
    keep = (rows >= 0) & (cols >= 0)
    A = sp.csr_matrix((E.ravel()[keep], (rows[keep], cols[keep])), shape=(mesh.n_free, mesh.n_free))
    return linalg.as_csr(A)


def assemble_darcy_rhs(mesh: MacroMesh, data: MacroData, K_field: Callable, t=0.0):
    """``int (1/nu) K (f - grad p_b) . grad phi - int dt_theta phi`` on interior nodes."""
    pts = mesh.quadrature_points()
    K = np.asarray(K_field(pts), dtype=float)
    drive = np.asarray(data.f(t, pts), dtype=float) - np.asarray(data.grad_p_b(t, pts), dtype=float)
    flux = np.einsum("nqab,nqb->nqa", K, drive) / data.nu
    h = mesh.h
    src = np.asarray(data.dt_theta(t, pts), dtype=float)
    be = (np.einsum("q,nqa,qma->nm", QW * h, flux, DNQ)
          - np.einsum("q,nq,qm->nm", QW * h * h, src, NQ))
    dofs = mesh.node_index[mesh.element_nodes()]
    b = np.zeros(mesh.n_free)
    keep = dofs >= 0
    np.add.at(b, dofs[keep], be[keep])
    return b


def solve_pressure(A, b, tol=linalg.DEFAULT_TOL, precond="jacobi"):
    """Interior nodal values of ``q`` by preconditioned CG."""
    if A.shape[0] == 0:
        return np.zeros(0)
    return linalg.cg_solve(A, b, tol=tol, precond=precond)


@dataclass
class MacroField:
    mesh: MacroMesh
    q: np.ndarray                # grid Q1 nodes, zero on the boundary and outside
    v: np.ndarray                # (n_cells, 2) velocity at cell centres
    t: float
    data: MacroData
    K_field: Callable

    def q_grid(self):
        return self.q.reshape(self.mesh.grid.q1_shape)

    def p(self):
        coords = self.mesh.grid.q1_coordinates().reshape(-1, 2)
        return self.q + np.where(self.mesh.active, self.data.p_b(self.t, coords), 0.0)

    def _locate(self, pts):
        g = self.mesh.grid
        i, j, s, tt = g.locate(pts)
        nodes = np.stack([i * (g.ny + 1) + j, (i + 1) * (g.ny + 1) + j,
                          i * (g.ny + 1) + j + 1, (i + 1) * (g.ny + 1) + j + 1], axis=-1)
        return nodes, s, tt

    def q_at(self, pts):
        nodes, s, t = self._locate(pts)
        val, _ = q1_basis(s, t)
        return np.einsum("...m,...m->...", val, self.q[nodes])

    def grad_q_at(self, pts):
        nodes, s, t = self._locate(pts)
        _, der = q1_basis(s, t)
        return np.einsum("...ma,...m->...a", der, self.q[nodes]) / self.mesh.h

    def driving_force(self, pts):
        """``f - grad p`` at points (the quantity multiplying K / nu)."""
        return (np.asarray(self.data.f(self.t, pts)) - np.asarray(self.data.grad_p_b(self.t, pts))
                - self.grad_q_at(pts))

    def to_vtk(self, path, theta=None):
        g = self.mesh.grid
        shape = g.q1_shape
        coords = g.q1_coordinates()
        pd = {"q": self.q_grid(), "p": self.p().reshape(shape)}
        # cell data averaged onto nodes for the structured-points format
        vn = np.zeros(shape + (2,))
        cnt = np.zeros(shape)
        for a in (0, 1):
            for b in (0, 1):
                np.add.at(vn, (self.mesh.cells[:, 0] + a, self.mesh.cells[:, 1] + b), self.v)
                np.add.at(cnt, (self.mesh.cells[:, 0] + a, self.mesh.cells[:, 1] + b), 1.0)
        pd["v"] = vn / np.maximum(cnt, 1.0)[..., None]
        if theta is not None:
            pd["theta"] = np.asarray(theta(self.t, coords), dtype=float)
        pd["dt_theta"] = np.asarray(self.data.dt_theta(self.t, coords), dtype=float)
        K = np.asarray(self.K_field(coords), dtype=float)
        for a in range(2):
            for b in range(2):
                pd[f"K{a + 1}{b + 1}"] = K[..., a, b]
        return write_vtk_points(path, shape, g.origin, (g.h, g.h), pd)


def reconstruct_velocity(mesh: MacroMesh, q_free, data: MacroData, K_field: Callable, t=0.0):
    """Darcy velocity ``(1/nu) K (f - grad p)`` at cell centres; returns a :class:`MacroField`."""
    q = np.zeros(mesh.node_index.size)
    q[mesh.node_index >= 0] = q_free
    c = mesh.centers()
    qe = q[mesh.element_nodes()]
    grad_q = np.einsum("ma,nm->na", DNC, qe) / mesh.h
    drive = np.asarray(data.f(t, c)) - np.asarray(data.grad_p_b(t, c)) - grad_q
    K = np.asarray(K_field(c), dtype=float)
    v = np.einsum("nab,nb->na", K, drive) / data.nu
    return MacroField(mesh, q, v, t, data, K_field)


def solve_darcy(mesh: MacroMesh, data: MacroData, K_field: Callable, t=0.0, tol=linalg.DEFAULT_TOL):
    A = assemble_darcy(mesh, K_field, data.nu)
    b = assemble_darcy_rhs(mesh, data, K_field, t)
    q = solve_pressure(A, b, tol)
    return reconstruct_velocity(mesh, q, data, K_field, t)


@dataclass
class MassBalance:
    boundary_outflux: float
    volume_source: float
    defect: float


def _boundary_faces(mesh: MacroMesh):
    """(cell id, axis, side, inner neighbour id or -1) for faces on the domain boundary."""
    g = mesh.grid
    faces = []
    for axis in range(2):
        for side in (0, 1):
            step = 1 if side else -1
            nb = mesh.cells.copy()
            nb[:, axis] += step
            lim = g.nx if axis == 0 else g.ny
            inside = (nb[:, axis] >= 0) & (nb[:, axis] < lim)
            nbc = np.clip(nb, 0, [g.nx - 1, g.ny - 1])
            out = ~inside | (g.state[nbc[:, 0], nbc[:, 1]] == OUTSIDE)
            inner = mesh.cells.copy()
            inner[:, axis] -= step
            ok = (inner[:, axis] >= 0) & (inner[:, axis] < lim)
            innc = np.clip(inner, 0, [g.nx - 1, g.ny - 1])
            inner_id = np.where(ok, g.cell_id[innc[:, 0], innc[:, 1]], -1)
            for c in np.nonzero(out)[0]:
                faces.append((int(c), axis, side, int(inner_id[c])))
    return faces


def mass_balance_report(field: MacroField) -> MassBalance:
    """Outflux through the boundary versus the integrated porosity source.

    Face velocities are linearly extrapolated from the two nearest cell
    centres along the face normal (second order); cells without an inner
    neighbour use their own centre value.
    """
    mesh, data, t = field.mesh, field.data, field.t
    v = field.v
    flux = 0.0
    for c, axis, side, inner in _boundary_faces(mesh):
        vn = v[c, axis] if inner < 0 else 1.5 * v[c, axis] - 0.5 * v[inner, axis]
        flux += (1.0 if side else -1.0) * vn * mesh.h
    pts = mesh.quadrature_points()
    src = float(np.einsum("q,nq->", QW * mesh.h ** 2, np.asarray(data.dt_theta(t, pts), dtype=float)))
    return MassBalance(float(flux), src, float(abs(flux + src)))


def weak_divergence_residual(field: MacroField):
    """Max over interior Q1 test functions of ``|-int v.grad phi + int dt_theta phi|``."""
    mesh = field.mesh
    h = mesh.h
    pts = mesh.quadrature_points()
    K = np.asarray(field.K_field(pts), dtype=float)
    drive = np.stack([field.driving_force(pts[:, q]) for q in range(4)], axis=1)
    vq = np.einsum("nqab,nqb->nqa", K, drive) / field.data.nu
    src = np.asarray(field.data.dt_theta(field.t, pts), dtype=float)
    be = (-np.einsum("q,nqa,qma->nm", QW * h, vq, DNQ)
          + np.einsum("q,nq,qm->nm", QW * h * h, src, NQ))
    dofs = mesh.node_index[mesh.element_nodes()]
    r = np.zeros(mesh.n_free)
    keep = dofs >= 0
    np.add.at(r, dofs[keep], be[keep])
    return float(np.abs(r).max()) if r.size else 0.0


def l2_error(field: MacroField, exact):
    pts = field.mesh.quadrature_points()
    diff = field.q_at(pts) - exact(pts)
    return float(np.sqrt(np.einsum("q,nq->", QW * field.mesh.h ** 2, diff ** 2)))


def write_mass_ledger(path, rows):
    return write_csv(path, ["t", "outflux", "source", "defect"], rows)


def constant_tensor(K):
    K = np.asarray(K, dtype=float)

    def field(pts):
        return np.broadcast_to(K, np.shape(pts)[:-1] + (2, 2)).copy()

    return field


def table_tensor(table, theta: Callable, t):
    """``K(x) = table(theta(t, x))``."""
    def field(pts):
        return table(np.asarray(theta(t, pts), dtype=float))

    return field
