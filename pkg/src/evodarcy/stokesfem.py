"""Taylor-Hood (Q2 velocity / Q1 pressure) assembly of the transformed Stokes forms.

The mesh is a Cartesian grid of square cells; a cell is outside the domain
(state 0), solid (state 1) or pore (state 2).  Only pore cells carry degrees
of freedom.  Velocity unknowns are ordered component-major: all first
components, then all second components.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import linalg
from .errors import DegenerateJacobian, InconsistentBC
from .geometry import cofactor_t, det2
from .io import write_csv, write_vtk_points

OUTSIDE, SOLID, PORE = 0, 1, 2
CHUNK = 8192

# ---------------------------------------------------------------------------
# reference element
# ---------------------------------------------------------------------------

GAUSS_PTS = np.array([0.5 - 0.5 * math.sqrt(0.6), 0.5, 0.5 + 0.5 * math.sqrt(0.6)])
GAUSS_WTS = np.array([5.0, 8.0, 5.0]) / 18.0
EDGE_PTS, EDGE_WTS = GAUSS_PTS, GAUSS_WTS


def lagrange2(s):
    s = np.asarray(s, dtype=float)
    val = np.stack([2 * (s - 0.5) * (s - 1), -4 * s * (s - 1), 2 * s * (s - 0.5)], axis=-1)
    der = np.stack([4 * s - 3, -8 * s + 4, 4 * s - 1], axis=-1)
    return val, der


def lagrange1(s):
    s = np.asarray(s, dtype=float)
    val = np.stack([1 - s, s], axis=-1)
    der = np.stack([-np.ones_like(s), np.ones_like(s)], axis=-1)
    return val, der


def q2_basis(s, t):
    """Values ``[..., k]`` and reference gradients ``[..., k, 2]``, ``k = a + 3 b``."""
    vs, ds = lagrange2(s)
    vt, dt = lagrange2(t)
    val = (vs[..., None, :] * vt[..., :, None]).reshape(*np.shape(s), 9)
    gx = (ds[..., None, :] * vt[..., :, None]).reshape(*np.shape(s), 9)
    gy = (vs[..., None, :] * dt[..., :, None]).reshape(*np.shape(s), 9)
    return val, np.stack([gx, gy], axis=-1)


def q1_basis(s, t):
    """Values ``[..., m]`` and reference gradients, ``m = a + 2 b``."""
    vs, ds = lagrange1(s)
    vt, dt = lagrange1(t)
    val = (vs[..., None, :] * vt[..., :, None]).reshape(*np.shape(s), 4)
    gx = (ds[..., None, :] * vt[..., :, None]).reshape(*np.shape(s), 4)
    gy = (vs[..., None, :] * dt[..., :, None]).reshape(*np.shape(s), 4)
    return val, np.stack([gx, gy], axis=-1)


_QS, _QT = np.meshgrid(GAUSS_PTS, GAUSS_PTS, indexing="xy")
QUAD_S = _QS.ravel()           # q = qa + 3 qb
QUAD_T = _QT.ravel()
QUAD_W = np.outer(GAUSS_WTS, GAUSS_WTS).ravel()
N2, DN2 = q2_basis(QUAD_S, QUAD_T)       # (9q, 9k), (9q, 9k, 2)
N1, _ = q1_basis(QUAD_S, QUAD_T)         # (9q, 4m)
LOCAL_Q2 = np.array([(a, b) for b in range(3) for a in range(3)])
LOCAL_Q1 = np.array([(a, b) for b in range(2) for a in range(2)])


# ---------------------------------------------------------------------------
# mesh and degrees of freedom
# ---------------------------------------------------------------------------

@dataclass
class FemMesh:
    nx: int
    ny: int
    h: float
    state: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=np.int8)
        self.origin = np.asarray(self.origin, dtype=float)
        if self.state.shape != (self.nx, self.ny):
            raise ValueError("state array does not match the grid")
        self.cells = np.argwhere(self.state == PORE)
        self.cell_id = -np.ones((self.nx, self.ny), dtype=np.int64)
        self.cell_id[self.cells[:, 0], self.cells[:, 1]] = np.arange(len(self.cells))

    @classmethod
    def from_mask(cls, pore_mask, h=None, origin=(0.0, 0.0)):
        pore_mask = np.asarray(pore_mask, dtype=bool)
        nx, ny = pore_mask.shape
        h = 1.0 / nx if h is None else h
        return cls(nx, ny, h, np.where(pore_mask, PORE, SOLID), np.asarray(origin, dtype=float))

    @classmethod
    def rectangle(cls, nx, ny, h, origin=(0.0, 0.0)):
        return cls(nx, ny, h, np.full((nx, ny), PORE), np.asarray(origin, dtype=float))

    @property
    def n_active(self):
        return len(self.cells)

    @property
    def q2_shape(self):
        return (2 * self.nx + 1, 2 * self.ny + 1)

    @property
    def q1_shape(self):
        return (self.nx + 1, self.ny + 1)

    def q2_nodes(self, cells):
        I = 2 * cells[:, 0, None] + LOCAL_Q2[None, :, 0]
        J = 2 * cells[:, 1, None] + LOCAL_Q2[None, :, 1]
        return I * (2 * self.ny + 1) + J

    def q1_nodes(self, cells):
        I = cells[:, 0, None] + LOCAL_Q1[None, :, 0]
        J = cells[:, 1, None] + LOCAL_Q1[None, :, 1]
        return I * (self.ny + 1) + J

    def quadrature_points(self, cells):
        x = self.origin[0] + self.h * (cells[:, 0, None] + QUAD_S[None, :])
        y = self.origin[1] + self.h * (cells[:, 1, None] + QUAD_T[None, :])
        return np.stack([x, y], axis=-1)

    def q2_coordinates(self):
        I, J = np.meshgrid(np.arange(2 * self.nx + 1), np.arange(2 * self.ny + 1), indexing="ij")
        return np.stack([self.origin[0] + 0.5 * self.h * I, self.origin[1] + 0.5 * self.h * J], -1)

    def q1_coordinates(self):
        I, J = np.meshgrid(np.arange(self.nx + 1), np.arange(self.ny + 1), indexing="ij")
        return np.stack([self.origin[0] + self.h * I, self.origin[1] + self.h * J], -1)

    def cell_centers(self):
        I, J = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="ij")
        return np.stack([self.origin[0] + self.h * (I + 0.5), self.origin[1] + self.h * (J + 0.5)], -1)

    def locate(self, pts):
        """Cell indices and local coordinates in [0,1]^2 of physical points."""
        pts = np.asarray(pts, dtype=float)
        rel = (pts - self.origin) / self.h
        i = np.clip(np.floor(rel[..., 0]).astype(np.int64), 0, self.nx - 1)
        j = np.clip(np.floor(rel[..., 1]).astype(np.int64), 0, self.ny - 1)
        return i, j, rel[..., 0] - i, rel[..., 1] - j


@dataclass
class BoundaryConditions:
    """Boundary description.

    ``solid``/``outer`` select the condition on the pore-solid interface and on
    the outer boundary ("dirichlet" or "stress").  ``dirichlet_value(points)``
    gives prescribed velocities (default zero) and ``traction_pressure(points)``
    the pressure ``p_b`` of the normal-stress condition ``sigma n = -p_b n``.
    """

    periodic: tuple = (False, False)
    solid: str = "dirichlet"
    outer: str = "stress"
    dirichlet_value: Callable | None = None
    traction_pressure: Callable | None = None


@dataclass
class DofMap:
    q2_merged: np.ndarray        # grid Q2 node -> merged node id (-1 inactive)
    n_nodes: int
    dirichlet: np.ndarray        # merged node -> bool
    free_index: np.ndarray       # merged node -> free id (-1 Dirichlet)
    n_free: int
    q1_merged: np.ndarray        # grid Q1 node -> pressure dof (-1 inactive)
    n_pressure: int
    stress_faces: np.ndarray     # (k, 3): active cell id, axis, side
    node_coords: np.ndarray      # merged node -> representative coordinates

    @property
    def n_velocity(self):
        return 2 * self.n_free

    def element_velocity_dofs(self, mesh, cells):
        nodes = self.q2_merged[mesh.q2_nodes(cells)]
        fi = self.free_index[nodes]
        dofs = np.concatenate([np.where(fi >= 0, fi, -1), np.where(fi >= 0, fi + self.n_free, -1)], axis=1)
        return nodes, dofs

    def element_pressure_dofs(self, mesh, cells):
        return self.q1_merged[mesh.q1_nodes(cells)]


def _neighbour_states(mesh, n_nodes_axis, axis, periodic):
    """For every grid node index along one axis, the two candidate cell indices."""
    idx = np.arange(n_nodes_axis)
    cand = np.stack([(idx - 1) // 2, idx // 2], axis=-1)
    n = mesh.nx if axis == 0 else mesh.ny
    if periodic:
        return cand % n, np.ones_like(cand, dtype=bool)
    valid = (cand >= 0) & (cand < n)
    return np.clip(cand, 0, n - 1), valid


def _node_touch(mesh, periodic, shape, factor):
    """Per grid node: whether it touches pore, solid and outside cells."""
    if factor == 2:
        cx, vx = _neighbour_states(mesh, shape[0], 0, periodic[0])
        cy, vy = _neighbour_states(mesh, shape[1], 1, periodic[1])
    else:
        def cand(n_axis, n_cells, per):
            idx = np.arange(n_axis)
            c = np.stack([idx - 1, idx], axis=-1)
            if per:
                return c % n_cells, np.ones_like(c, dtype=bool)
            v = (c >= 0) & (c < n_cells)
            return np.clip(c, 0, n_cells - 1), v
        cx, vx = cand(shape[0], mesh.nx, periodic[0])
        cy, vy = cand(shape[1], mesh.ny, periodic[1])
    pore = np.zeros(shape, dtype=bool)
    solid = np.zeros(shape, dtype=bool)
    outside = np.zeros(shape, dtype=bool)
    for a in range(2):
        for b in range(2):
            st = mesh.state[cx[:, a][:, None], cy[:, b][None, :]]
            valid = vx[:, a][:, None] & vy[:, b][None, :]
            st = np.where(valid, st, OUTSIDE)
            pore |= st == PORE
            solid |= st == SOLID
            outside |= st == OUTSIDE
    return pore, solid, outside


def _merge_periodic(shape, periodic):
    I, J = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    if periodic[0]:
        I = I % (shape[0] - 1)
    if periodic[1]:
        J = J % (shape[1] - 1)
    return I * shape[1] + J


def build_dofmap(mesh: FemMesh, bc: BoundaryConditions) -> DofMap:
    periodic = tuple(bool(p) for p in bc.periodic)
    if bc.solid not in ("dirichlet", "stress") or bc.outer not in ("dirichlet", "stress"):
        raise InconsistentBC("boundary kinds must be 'dirichlet' or 'stress'")
    for axis, per in enumerate(periodic):
        if per:
            a = mesh.state[0, :] if axis == 0 else mesh.state[:, 0]
            b = mesh.state[-1, :] if axis == 0 else mesh.state[:, -1]
            if not np.array_equal(a == PORE, b == PORE):
                raise InconsistentBC(f"periodic pairing along axis {axis} joins pore to non-pore cells")

    shape2 = mesh.q2_shape
    pore, solid, outside = _node_touch(mesh, periodic, shape2, 2)
    canon = _merge_periodic(shape2, periodic).ravel()
    pore_c = np.zeros(canon.max() + 1, dtype=bool)
    solid_c = np.zeros_like(pore_c)
    outside_c = np.zeros_like(pore_c)
    np.logical_or.at(pore_c, canon, pore.ravel())
    np.logical_or.at(solid_c, canon, solid.ravel())
    np.logical_or.at(outside_c, canon, outside.ravel())

    active = pore_c
    merged_id = -np.ones(pore_c.size, dtype=np.int64)
    merged_id[active] = np.arange(int(active.sum()))
    q2_merged = merged_id[canon]
    n_nodes = int(active.sum())

    diri = np.zeros(pore_c.size, dtype=bool)
    if bc.solid == "dirichlet":
        diri |= active & solid_c
    if bc.outer == "dirichlet":
        diri |= active & outside_c
    dirichlet = diri[active]
    free_index = -np.ones(n_nodes, dtype=np.int64)
    free_index[~dirichlet] = np.arange(int((~dirichlet).sum()))

    coords = mesh.q2_coordinates().reshape(-1, 2)
    node_coords = np.zeros((n_nodes, 2))
    # representative coordinate: the first grid node mapping to each merged node
    order = np.argsort(q2_merged, kind="stable")
    qs = q2_merged[order]
    keep = qs >= 0
    first = np.unique(qs[keep], return_index=True)[1]
    node_coords[qs[keep][first]] = coords[order[keep][first]]

    shape1 = mesh.q1_shape
    pore1, _, _ = _node_touch(mesh, periodic, shape1, 1)
    canon1 = _merge_periodic(shape1, periodic).ravel()
    pore1_c = np.zeros(canon1.max() + 1, dtype=bool)
    np.logical_or.at(pore1_c, canon1, pore1.ravel())
    pid = -np.ones(pore1_c.size, dtype=np.int64)
    pid[pore1_c] = np.arange(int(pore1_c.sum()))
    q1_merged = pid[canon1]

    faces = []
    for kind, st_match in (("outer", OUTSIDE), ("solid", SOLID)):
        if getattr(bc, kind) != "stress":
            continue
        for axis in range(2):
            for side in (0, 1):
                ci = mesh.cells.copy()
                ci[:, axis] += 1 if side else -1
                n_axis = mesh.nx if axis == 0 else mesh.ny
                if periodic[axis]:
                    ci[:, axis] %= n_axis
                    nb = mesh.state[ci[:, 0], ci[:, 1]]
                else:
                    inside = (ci[:, axis] >= 0) & (ci[:, axis] < n_axis)
                    cc = np.clip(ci, 0, [mesh.nx - 1, mesh.ny - 1])
                    nb = np.where(inside, mesh.state[cc[:, 0], cc[:, 1]], OUTSIDE)
                hit = np.nonzero(nb == st_match)[0]
                faces.extend((int(c), axis, side) for c in hit)
    stress_faces = np.array(sorted(faces), dtype=np.int64).reshape(-1, 3)
    return DofMap(q2_merged, n_nodes, dirichlet, free_index, int((~dirichlet).sum()),
                  q1_merged, int(pore1_c.sum()), stress_faces, node_coords)


def full_dofmap(mesh: FemMesh) -> DofMap:
    """Unconstrained numbering: every active node free, nothing merged."""
    return build_dofmap(mesh, BoundaryConditions(solid="stress", outer="stress"))


# ---------------------------------------------------------------------------
# coefficients
# ---------------------------------------------------------------------------

@dataclass
class TransformedCoeffs:
    """Coefficient samples at the 3x3 Gauss points of every active cell.

    ``M = Psi^{-T}``, ``A = J Psi^{-1}`` and ``divA[..., b] = sum_a d_a A_ab``.
    ``viscous_scale`` multiplies the velocity block (eps^2 for perforated
    problems, 1 for cell problems).
    """

    J: np.ndarray
    M: np.ndarray
    A: np.ndarray
    divA: np.ndarray | None = None
    viscosity: float = 1.0
    viscous_scale: float = 1.0
    is_identity: bool = False
    jacobian: Callable | None = None

    @classmethod
    def identity(cls, mesh, viscosity=1.0, viscous_scale=1.0):
        nc = mesh.n_active
        eye = np.broadcast_to(np.eye(2), (nc, 9, 2, 2))
        return cls(np.ones((nc, 9)), eye, eye, None, viscosity, viscous_scale, True)

    @classmethod
    def from_jacobian(cls, mesh, jacobian, c_J=0.1, div_mode="zero", viscosity=1.0,
                      viscous_scale=1.0):
        """Sample ``Psi = jacobian(points)`` at the Gauss points.

        ``div_mode`` is "zero" when the Piola identity holds analytically,
        "fd" for central differences with step ``h / 100``, or a callable
        returning ``div A`` at points.
        """
        pts = mesh.quadrature_points(mesh.cells)
        Psi = jacobian(pts)
        J = det2(Psi)
        if J.size and J.min() < c_J:
            raise DegenerateJacobian(float(J.min()), c_J)
        A = cofactor_t(Psi)
        M = np.swapaxes(A, -1, -2) / J[..., None, None]
        if div_mode == "zero":
            divA = None
        elif div_mode == "fd":
            divA = cofactor_divergence_fd(jacobian, pts, mesh.h / 100.0)
        else:
            divA = np.asarray(div_mode(pts), dtype=float)
        return cls(J, M, A, divA, viscosity, viscous_scale, False, jacobian)

    def take(self, sl):
        return TransformedCoeffs(self.J[sl], self.M[sl], self.A[sl],
                                 None if self.divA is None else self.divA[sl],
                                 self.viscosity, self.viscous_scale, self.is_identity,
                                 self.jacobian)

    @property
    def viscous_factor(self):
        return self.viscosity * self.viscous_scale


def cofactor_divergence_fd(jacobian, pts, step):
    out = np.zeros(pts.shape)
    for a in range(2):
        e = np.zeros(2)
        e[a] = step
        Ap = cofactor_t(jacobian(pts + e))
        Am = cofactor_t(jacobian(pts - e))
        out += (Ap[..., a, :] - Am[..., a, :]) / (2 * step)
    return out


# ---------------------------------------------------------------------------
# element kernels
# ---------------------------------------------------------------------------

def _element_viscous(coeffs: TransformedCoeffs, h, symmetric):
    """Element matrices ``[n, 18, 18]`` with local order ``(component, node)``."""
    wq = QUAD_W * h * h
    dN = DN2 / h                                           # (q, k, 2)
    if coeffs.is_identity:
        g = np.broadcast_to(dN, (coeffs.J.shape[0],) + dN.shape)
    else:
        g = np.einsum("nqab,qkb->nqka", coeffs.M, dN)      # M grad N
    wJ = coeffs.J * wq
    Kg = np.einsum("nq,nqka,nqla->nkl", wJ, g, g)
    n = Kg.shape[0]
    E = np.zeros((n, 2, 9, 2, 9))
    E[:, 0, :, 0, :] = Kg
    E[:, 1, :, 1, :] = Kg
    if symmetric:
        E += np.einsum("nq,nqkd,nqlc->nckdl", wJ, g, g)
    return coeffs.viscous_factor * E.reshape(n, 18, 18)


def _element_coupling(coeffs: TransformedCoeffs, h):
    """Element matrices ``[n, 4, 18]`` of ``int Q_m div(A phi)``."""
    wq = QUAD_W * h * h
    dN = DN2 / h
    if coeffs.is_identity:
        AtG = np.broadcast_to(np.swapaxes(dN, 1, 2), (coeffs.J.shape[0], 9, 2, 9))  # (n,q,d,k)
    else:
        AtG = np.einsum("nqad,qka->nqdk", coeffs.A, dN)
    if coeffs.divA is not None:
        AtG = AtG + coeffs.divA[:, :, :, None] * N2[None, :, None, :]
    B = np.einsum("q,qm,nqdk->nmdk", wq, N1, AtG)
    return B.reshape(B.shape[0], 4, 18)


def _element_load(force_q, h):
    """``int F . phi`` for quadrature samples ``force_q[n, q, 2]``."""
    wq = QUAD_W * h * h
    L = np.einsum("q,qk,nqd->ndk", wq, N2, force_q)
    return L.reshape(L.shape[0], 18)


# ---------------------------------------------------------------------------
# global assembly
# ---------------------------------------------------------------------------

@dataclass
class StokesRhs:
    """Data of a transformed Stokes problem.

    ``force(points)`` is the body-force integrand against test functions; it
    is multiplied by ``J`` when ``weight_by_jacobian`` is set.  ``div_source``
    is the right-hand side ``g`` of ``div(A u) = g``.  ``lift(points)``
    supplies a velocity field whose Q2 interpolant is subtracted before the
    solve and added back afterwards.
    """

    force: Callable | None = None
    weight_by_jacobian: bool = True
    div_source: Callable | None = None
    lift: Callable | None = None


@dataclass
class AssembledStokes:
    system: linalg.SaddleSystem
    dofmap: DofMap
    lift_nodes: np.ndarray           # merged node velocities added after the solve
    B_phys: sp.csr_matrix
    pressure_weights: np.ndarray


def _scatter(acc, rows, cols, vals, shape):
    keep = (rows >= 0) & (cols >= 0)
    m = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=shape)
    return m if acc is None else acc + m


def _node_values(dofmap, fn, mesh):
    if fn is None:
        return np.zeros((dofmap.n_nodes, 2))
    return np.asarray(fn(dofmap.node_coords), dtype=float).reshape(dofmap.n_nodes, 2)


def assemble_system(mesh: FemMesh, coeffs: TransformedCoeffs, bc: BoundaryConditions,
                    rhs: StokesRhs | None = None, symmetric=True, dofmap=None, darcy_gamma=None):
    """Assemble the constrained saddle-point system for the transformed Stokes problem.

    ``darcy_gamma`` attaches the pressure operator ``(gamma / nu) L`` (pore
    Laplacian, penalised on stress faces) used to precondition perforated
    problems whose Schur complement behaves like a Darcy operator.
    """
    rhs = StokesRhs() if rhs is None else rhs
    dm = build_dofmap(mesh, bc) if dofmap is None else dofmap
    nv, npr = dm.n_velocity, dm.n_pressure
    # known velocities: the lift everywhere, Dirichlet data overriding it on constrained nodes
    lift_nodes = _node_values(dm, rhs.lift, mesh)
    if bc.dirichlet_value is not None:
        dv = _node_values(dm, bc.dirichlet_value, mesh)
        lift_nodes[dm.dirichlet] = dv[dm.dirichlet]
    A = None
    Bp = None
    F = np.zeros(nv)
    G = np.zeros(npr)
    wts = np.zeros(npr)
    pmass = np.zeros(npr)
    for start in range(0, mesh.n_active, CHUNK):
        sl = slice(start, min(start + CHUNK, mesh.n_active))
        cells = mesh.cells[sl]
        cf = coeffs.take(sl)
        nodes, vd = dm.element_velocity_dofs(mesh, cells)
        pd = dm.element_pressure_dofs(mesh, cells)
        E = _element_viscous(cf, mesh.h, symmetric)
        Be = _element_coupling(cf, mesh.h)
        A = _scatter(A, np.repeat(vd, 18, axis=1).ravel(), np.tile(vd, (1, 18)).ravel(),
                     E.ravel(), (nv, nv))
        Bp = _scatter(Bp, np.repeat(pd, 18, axis=1).ravel(), np.tile(vd, (1, 4)).ravel(),
                      Be.ravel(), (npr, nv))
        ue = np.concatenate([lift_nodes[nodes, 0], lift_nodes[nodes, 1]], axis=1)
        Fe = -np.einsum("nij,nj->ni", E, ue)
        Ge = -np.einsum("nij,nj->ni", Be, ue)
        pts = mesh.quadrature_points(cells)
        if rhs.force is not None:
            fq = np.asarray(rhs.force(pts), dtype=float)
            if rhs.weight_by_jacobian:
                fq = fq * cf.J[..., None]
            Fe += _element_load(fq, mesh.h)
        if rhs.div_source is not None:
            sq = np.asarray(rhs.div_source(pts), dtype=float)
            Ge += np.einsum("q,qm,nq->nm", QUAD_W * mesh.h ** 2, N1, sq)
        keep = vd >= 0
        np.add.at(F, vd[keep], Fe[keep])
        np.add.at(G, pd.ravel(), Ge.ravel())
        np.add.at(wts, pd.ravel(), np.einsum("q,qm,nq->nm", QUAD_W * mesh.h ** 2, N1, cf.J).ravel())
        np.add.at(pmass, pd.ravel(), np.einsum("q,qm,nq->nm", QUAD_W * mesh.h ** 2, N1,
                                               np.ones_like(cf.J)).ravel())
    if A is None:
        A = sp.csr_matrix((nv, nv))
        Bp = sp.csr_matrix((npr, nv))
    if bc.traction_pressure is not None and len(dm.stress_faces):
        F += _traction_load(mesh, coeffs, dm, bc.traction_pressure)
    A = linalg.as_csr(A)
    Bp = linalg.as_csr(Bp)
    nullspace = len(dm.stress_faces) == 0
    L = None
    if darcy_gamma is not None and not nullspace:
        L = (darcy_gamma / coeffs.viscosity) * pressure_laplacian(mesh, dm)
    system = linalg.SaddleSystem(A, -Bp, F, -G, nullspace=nullspace, pressure_weights=wts,
                                 pressure_mass=pmass, viscous_scale=coeffs.viscous_factor,
                                 pressure_laplacian=L)
    return AssembledStokes(system, dm, lift_nodes, Bp, wts)


_, _DN1 = q1_basis(QUAD_S, QUAD_T)
Q1_STIFFNESS = np.einsum("q,qma,qla->ml", QUAD_W, _DN1, _DN1)


def pressure_laplacian(mesh, dm):
    """Q1 stiffness on the pore plus a unit diagonal on pressure nodes of stress faces."""
    npr = dm.n_pressure
    dofs = dm.element_pressure_dofs(mesh, mesh.cells)
    L = sp.csr_matrix((np.tile(Q1_STIFFNESS.ravel(), len(dofs)),
                       (np.repeat(dofs, 4, axis=1).ravel(), np.tile(dofs, (1, 4)).ravel())),
                      shape=(npr, npr))
    faces = dm.stress_faces
    on_face = np.zeros(npr, dtype=bool)
    if len(faces):
        fd = dm.element_pressure_dofs(mesh, mesh.cells[faces[:, 0]])
        axis, side = faces[:, 1], faces[:, 2]
        # local Q1 index m = a + 2 b
        m0 = np.where(axis == 0, side, 2 * side)
        m1 = np.where(axis == 0, side + 2, 2 * side + 1)
        r = np.arange(len(faces))
        on_face[fd[r, m0]] = True
        on_face[fd[r, m1]] = True
    return (L + sp.diags(on_face.astype(float))).tocsr()


def _traction_load(mesh, coeffs, dm, p_b):
    """``-int_{stress faces} p_b N . (A phi) dS`` on reference faces."""
    nv = dm.n_velocity
    F = np.zeros(nv)
    faces = dm.stress_faces
    cells = mesh.cells[faces[:, 0]]
    axis = faces[:, 1]
    side = faces[:, 2]
    nodes, vd = dm.element_velocity_dofs(mesh, cells)
    for k, (s_e, w_e) in enumerate(zip(EDGE_PTS, EDGE_WTS)):
        s = np.where(axis == 0, side.astype(float), s_e)
        t = np.where(axis == 0, s_e, side.astype(float))
        val, _ = q2_basis(s, t)                                   # (f, 9)
        pts = mesh.origin + mesh.h * np.stack([cells[:, 0] + s, cells[:, 1] + t], axis=-1)
        normal = np.zeros((len(faces), 2))
        normal[np.arange(len(faces)), axis] = np.where(side == 1, 1.0, -1.0)
        if coeffs.is_identity:
            An = normal
        elif coeffs.jacobian is not None:
            An = np.einsum("fb,fbd->fd", normal, cofactor_t(coeffs.jacobian(pts)))
        else:
            raise ValueError("traction on transformed faces needs the coefficient Jacobian")
        pb = np.asarray(p_b(pts), dtype=float)
        contrib = -(w_e * mesh.h) * pb[:, None, None] * An[:, :, None] * val[:, None, :]
        contrib = contrib.reshape(len(faces), 18)
        keep = vd >= 0
        np.add.at(F, vd[keep], contrib[keep])
    return F


def assemble_viscous_block(mesh, coeffs, symmetric, bc=None):
    """Velocity block on the constrained space of ``bc`` (unconstrained by default)."""
    dm = full_dofmap(mesh) if bc is None else build_dofmap(mesh, bc)
    return assemble_system(mesh, coeffs, bc or BoundaryConditions(solid="stress", outer="stress"),
                           symmetric=symmetric, dofmap=dm).system.A


def assemble_pressure_coupling(mesh, coeffs, bc=None):
    """Matrix of ``int q div(A phi)`` (rows pressure, columns velocity)."""
    dm = full_dofmap(mesh) if bc is None else build_dofmap(mesh, bc)
    return assemble_system(mesh, coeffs, bc or BoundaryConditions(solid="stress", outer="stress"),
                           dofmap=dm).B_phys


def apply_constraints(mesh, coeffs, bc, rhs=None, symmetric=True):
    """Constrained saddle system; ``nullspace`` is set exactly when no stress face exists."""
    return assemble_system(mesh, coeffs, bc, rhs, symmetric).system


# ---------------------------------------------------------------------------
# solution
# ---------------------------------------------------------------------------

@dataclass
class StokesSolution:
    mesh: FemMesh
    dofmap: DofMap
    velocity: np.ndarray      # (n_nodes, 2) merged-node velocities
    pressure: np.ndarray      # (n_pressure,)
    iterations: int = 0
    residual: float = 0.0

    def velocity_grid(self):
        """Velocity on the full Q2 grid, zero outside the pore."""
        m = self.dofmap.q2_merged
        out = np.zeros((m.size, 2))
        act = m >= 0
        out[act] = self.velocity[m[act]]
        return out.reshape(*self.mesh.q2_shape, 2)

    def pressure_grid(self):
        m = self.dofmap.q1_merged
        out = np.zeros(m.size)
        act = m >= 0
        out[act] = self.pressure[m[act]]
        return out.reshape(self.mesh.q1_shape)

    def element_velocity(self, cells=None):
        cells = self.mesh.cells if cells is None else cells
        nodes = self.dofmap.q2_merged[self.mesh.q2_nodes(cells)]
        return self.velocity[nodes]                         # (n, 9, 2)

    def element_pressure(self, cells=None):
        cells = self.mesh.cells if cells is None else cells
        return self.pressure[self.dofmap.q1_merged[self.mesh.q1_nodes(cells)]]

    def evaluate_velocity(self, pts):
        """Velocity at physical points; zero in non-pore cells."""
        pts = np.asarray(pts, dtype=float)
        i, j, s, t = self.mesh.locate(pts)
        cid = self.mesh.cell_id[i, j]
        val, _ = q2_basis(s, t)
        out = np.zeros(pts.shape)
        act = cid >= 0
        if np.any(act):
            ue = self.element_velocity(self.mesh.cells[cid[act]])
            out[act] = np.einsum("nk,nkc->nc", val[act], ue)
        return out

    def evaluate_pressure(self, pts):
        pts = np.asarray(pts, dtype=float)
        i, j, s, t = self.mesh.locate(pts)
        cid = self.mesh.cell_id[i, j]
        val, _ = q1_basis(s, t)
        out = np.zeros(pts.shape[:-1])
        act = cid >= 0
        if np.any(act):
            pe = self.element_pressure(self.mesh.cells[cid[act]])
            out[act] = np.einsum("nm,nm->n", val[act], pe)
        return out

    def to_vtk(self, path):
        m = self.mesh
        pg = self.pressure_grid()
        # pressure on the Q2 grid by bilinear refinement of the Q1 grid
        p2 = np.zeros(m.q2_shape)
        p2[::2, ::2] = pg
        p2[1::2, ::2] = 0.5 * (pg[:-1] + pg[1:])
        p2[:, 1::2] = 0.5 * (p2[:, :-1:2] + p2[:, 2::2])
        return write_vtk_points(path, m.q2_shape, m.origin, (m.h / 2, m.h / 2),
                                {"velocity": self.velocity_grid(), "pressure": p2})

    def to_csv(self, path):
        coords = self.mesh.q2_coordinates().reshape(-1, 2)
        vel = self.velocity_grid().reshape(-1, 2)
        act = self.dofmap.q2_merged >= 0
        rows = [(x, y, u, v) for (x, y), (u, v) in zip(coords[act], vel[act])]
        return write_csv(path, ["x1", "x2", "v1", "v2"], rows)


def solve_assembled(asm: AssembledStokes, mesh, tol=linalg.DEFAULT_TOL, precond="amg"):
    info = linalg.SolveInfo()
    S = asm.system
    u, p = linalg.saddle_solve(S, tol=tol, precond=precond, info=info)
    dm = asm.dofmap
    vel = asm.lift_nodes.copy()
    free = ~dm.dirichlet
    vel[free, 0] += u[: dm.n_free]
    vel[free, 1] += u[dm.n_free:]
    return StokesSolution(mesh, dm, vel, p, info.iterations, info.residual)


def solve_stokes(mesh, coeffs, bc, rhs=None, symmetric=True, tol=linalg.DEFAULT_TOL, precond="amg"):
    """Assemble and solve; returns a :class:`StokesSolution`."""
    asm = assemble_system(mesh, coeffs, bc, rhs, symmetric)
    return solve_assembled(asm, mesh, tol, precond)


def divergence_residual(asm: AssembledStokes, sol: StokesSolution):
    """``|| B_phys u - g ||`` in the lumped pressure-mass-inverse norm."""
    dm = asm.dofmap
    w = sol.velocity - asm.lift_nodes
    w_free = np.concatenate([w[~dm.dirichlet, 0], w[~dm.dirichlet, 1]])
    _, Bmul, _, g = linalg._saddle_operators(asm.system)
    r = Bmul(w_free) - g
    return float(np.sqrt(r @ (r / asm.system.pressure_mass)))


def l2_velocity_error(sol: StokesSolution, exact):
    """``||u_h - u||_{L2}`` over the pore with 3x3 Gauss quadrature."""
    mesh = sol.mesh
    pts = mesh.quadrature_points(mesh.cells)
    uh = np.einsum("qk,nkc->nqc", N2, sol.element_velocity())
    diff = uh - np.asarray(exact(pts))
    return float(np.sqrt(np.einsum("q,nqc->", QUAD_W * mesh.h ** 2, diff ** 2)))
