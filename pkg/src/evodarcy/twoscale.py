"""Two-scale verification: unfolding, limit reconstruction, error metrics and Korn/Poincare constants."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator

from . import linalg
from .cellstokes import CellSolution
from .dns import DNS_BC, ExtendedFields, PerforatedMesh, PerforatedSolution, jacobian_at_cells
from .errors import DegenerateFit, EmptyDirichletSet, SnapshotMismatch
from .io import write_csv
from .macrodarcy import MacroField
from .stokesfem import (N2, OUTSIDE, QUAD_S, QUAD_T, QUAD_W, TransformedCoeffs,
                        assemble_viscous_block)

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# test-function dictionary: products of macro and micro factors
# ---------------------------------------------------------------------------

def _one(p):
    return np.ones(np.shape(p)[:-1])


DICT_X = (
    ("1", _one),
    ("x1", lambda p: p[..., 0]),
    ("sin(pi x1) sin(pi x2)", lambda p: np.sin(math.pi * p[..., 0]) * np.sin(math.pi * p[..., 1])),
)
DICT_Y = (
    ("1", _one),
    ("cos(2 pi y1)", lambda y: np.cos(TWO_PI * y[..., 0])),
    ("sin(2 pi y2)", lambda y: np.sin(TWO_PI * y[..., 1])),
    ("cos(2 pi y1) cos(2 pi y2)", lambda y: np.cos(TWO_PI * y[..., 0]) * np.cos(TWO_PI * y[..., 1])),
)
DICTIONARY = tuple((ax, by) for ax in DICT_X for by in DICT_Y)


# ---------------------------------------------------------------------------
# unfolding
# ---------------------------------------------------------------------------

def grid_function(values, origin, h):
    """Bilinear interpolant of node values ``values[i, j, ...]`` on a uniform grid."""
    values = np.asarray(values, dtype=float)
    nx, ny = values.shape[:2]
    axes = (origin[0] + h * np.arange(nx), origin[1] + h * np.arange(ny))
    interp = RegularGridInterpolator(axes, values, method="linear", bounds_error=False,
                                     fill_value=None)
    return interp


def unfold(u: Callable, eps, x, y, origin=(0.0, 0.0)):
    """``T_eps(u)(x, y) = u(eps [x / eps] + eps y)`` for all pairs; shape ``(nx, ny, ...)``."""
    eps = float(eps)
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    y = np.asarray(y, dtype=float).reshape(-1, 2)
    o = np.asarray(origin, dtype=float)
    corner = o + eps * np.floor((x - o) / eps + 1e-12)
    pts = corner[:, None, :] + eps * y[None, :, :]
    return np.asarray(u(pts))


# ---------------------------------------------------------------------------
# limit fields
# ---------------------------------------------------------------------------

def _theta_key(theta):
    return round(float(theta), 9)


@dataclass
class TwoScaleField:
    """Two-scale limit ``w0(x, y) = sum_i d_i(x) u_i(y)`` and ``q1 = nu sum_i d_i(x) pi_i(y)``.

    ``d = (f - grad(q + p_b)) / nu`` comes from the macro solution; the cell
    solutions ``u_i, pi_i`` are looked up by the local porosity.
    """

    macro: MacroField
    cells: dict                       # porosity key -> CellSolution
    theta: Callable | None = None     # porosity (t, x); None for one geometry everywhere
    cell_map: Callable | None = None  # (theta, y_ref) -> physical cell coordinates
    x: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.x is None:
            g = self.macro.mesh.grid
            self.x = g.q1_coordinates().reshape(-1, 2)[self.macro.mesh.active]

    @property
    def nu(self):
        return self.macro.data.nu

    def drive(self, pts):
        return np.asarray(self.macro.driving_force(pts), dtype=float) / self.nu

    def cell_for(self, pts):
        """Porosity keys of points and the cell solution lookup."""
        if self.theta is None:
            key = next(iter(self.cells))
            return np.full(np.shape(pts)[:-1], key, dtype=float)
        th = np.asarray(self.theta(self.macro.t, pts), dtype=float)
        keys = np.vectorize(_theta_key)(th) if th.size else th
        missing = set(np.unique(keys).tolist()) - set(self.cells)
        if missing:
            raise SnapshotMismatch(f"no cell solution for porosity {sorted(missing)[0]}")
        return keys

    def _cell(self, key):
        return self.cells[float(key)] if self.theta is not None else next(iter(self.cells.values()))

    def sample(self):
        """``w0[nx, velocity nodes, 2]`` and ``q1[nx, pressure nodes]`` on macro nodes times cell nodes.

        All macro nodes must share one cell geometry.
        """
        keys = self.cell_for(self.x)
        if np.unique(keys).size > 1:
            raise SnapshotMismatch("sampling needs a single cell geometry")
        cs = self._cell(keys[0])
        d = self.drive(self.x)
        U = np.stack([s.velocity for s in cs.solutions], axis=0)                # (2, nodes, 2)
        w0 = np.einsum("xi,inc->xnc", d, U)
        P = np.stack([s.pressure for s in cs.solutions], axis=0)                # (2, nodes)
        q1 = self.nu * np.einsum("xi,in->xn", d, P)
        return w0, q1

    def evaluate(self, xpts, ypts):
        """``w0`` at all pairs of macro points and reference cell points."""
        xpts = np.asarray(xpts, dtype=float).reshape(-1, 2)
        ypts = np.asarray(ypts, dtype=float).reshape(-1, 2)
        keys = self.cell_for(xpts)
        d = self.drive(xpts)
        out = np.zeros((len(xpts), len(ypts), 2))
        for key in np.unique(keys):
            cs = self._cell(key)
            sel = keys == key
            U = np.stack([s.evaluate_velocity(ypts) for s in cs.solutions], axis=0)
            out[sel] = np.einsum("xi,iyc->xyc", d[sel], U)
        return out

    def cell_average(self, xpts):
        """``int_Y J0 w0 dy`` at macro points (the Darcy velocity)."""
        xpts = np.asarray(xpts, dtype=float).reshape(-1, 2)
        keys = self.cell_for(xpts)
        d = self.drive(xpts)
        out = np.zeros((len(xpts), 2))
        for key in np.unique(keys):
            cs = self._cell(key)
            sel = keys == key
            m = np.stack([_cell_moment(cs, s, _one) for s in range(2)], axis=0)  # (i, c)
            out[sel] = d[sel] @ m
        return out


def _cell_moment(cs: CellSolution, i, by, cell_map=None, theta=None):
    """``int_{Y^p} by(y_phys) u_i J0 dy`` with 3x3 Gauss quadrature on the cell mesh."""
    mesh = cs.mesh
    pts = mesh.quadrature_points(mesh.cells)
    if cell_map is not None:
        pts = cell_map(theta, pts)
    ue = cs.solutions[i].element_velocity()
    uq = np.einsum("qk,nkc->nqc", N2, ue)
    w = QUAD_W * mesh.h ** 2 * cs.coeffs.J
    return np.einsum("nq,nq,nqc->c", w, by(pts), uq)


def reconstruct_limit(cellsols, macro: MacroField, theta=None, cell_map=None) -> TwoScaleField:
    """Assemble the two-scale limit from cell solutions and a macro Darcy solution.

    ``cellsols`` is one :class:`CellSolution` (uniform geometry) or a dict
    keyed by porosity.
    """
    if isinstance(cellsols, CellSolution):
        if theta is None and abs(cellsols.t - macro.t) > 1e-12:
            raise SnapshotMismatch(f"cell solution at t={cellsols.t} but macro field at t={macro.t}")
        cells = {0.0: cellsols}
        theta = None
    else:
        cells = {_theta_key(k): v for k, v in cellsols.items()}
    ts = TwoScaleField(macro, cells, theta, cell_map)
    ts.cell_for(ts.x)
    return ts


# ---------------------------------------------------------------------------
# error metrics
# ---------------------------------------------------------------------------

@dataclass
class ErrorRow:
    eps: float
    pressure_lp: dict               # p -> ||Q_eps - q||_{L^p}
    weak_residuals: np.ndarray      # (12, 2) differences per dictionary entry and component
    unfolded_l2: float
    alpha: float = float("nan")
    poincare: float = float("nan")

    @property
    def weak_max(self):
        return float(np.abs(self.weak_residuals).max()) if self.weak_residuals.size else 0.0

    def as_tuple(self):
        return (self.eps, self.pressure_lp.get(1.5, float("nan")), self.pressure_lp.get(2.0, float("nan")),
                self.weak_max, self.unfolded_l2, self.alpha, self.poincare)


ERROR_HEADER = ["eps", "pressure_L1.5", "pressure_L2", "weak_residual_max", "unfolded_L2",
                "alpha", "C_over_eps"]

CHUNK = 16384


def _dns_quadrature(sol: PerforatedSolution, cells):
    """Quadrature points, reference weights times J_eps and physical points for grid cells."""
    mesh = sol.pmesh.mesh
    pts = mesh.quadrature_points(cells)
    J = jacobian_at_cells(sol.pmesh, sol.deformation, sol.t, cells)
    w = QUAD_W[None, :] * mesh.h ** 2 * J
    z = pts if sol.deformation is None else sol.deformation.psi(sol.t, pts)
    return pts, w, z


def pressure_errors(ext: ExtendedFields, macro: MacroField, powers=(1.5, 2.0)):
    """``||Q_eps - q||_{L^p(Omega)}`` on the physical domain via the change of variables."""
    sol = ext.solution
    cells, vals = ext.pressure_at_quadrature()
    acc = {p: 0.0 for p in powers}
    for s in range(0, len(cells), CHUNK):
        c = cells[s:s + CHUNK]
        _, w, z = _dns_quadrature(sol, c)
        diff = np.abs(vals[s:s + CHUNK] - macro.q_at(z))
        for p in powers:
            acc[p] += float(np.sum(w * diff ** p))
    return {p: acc[p] ** (1.0 / p) for p in powers}


def weak_residuals(sol: PerforatedSolution, limit: TwoScaleField):
    """Differences ``int v phi(x, x/eps) - int int w0 phi`` over the dictionary, shape (12, 2)."""
    eps = float(sol.pmesh.eps)
    mesh = sol.pmesh.mesh
    dns_vals = np.zeros((len(DICTIONARY), 2))
    for s in range(0, len(mesh.cells), CHUNK):
        c = mesh.cells[s:s + CHUNK]
        _, w, z = _dns_quadrature(sol, c)
        vq = np.einsum("qk,nkc->nqc", N2, sol.stokes.element_velocity(c))
        for k, ((_, ax), (_, by)) in enumerate(DICTIONARY):
            phi = ax(z) * by(z / eps)
            dns_vals[k] += np.einsum("nq,nq,nqc->c", w, phi, vq)
    return dns_vals - limit_integrals(limit)


def limit_integrals(limit: TwoScaleField):
    """``int_Omega int_Y w0 phi dy dx`` for every dictionary entry, shape (12, 2)."""
    grid = limit.macro.mesh.grid
    cells = np.argwhere(grid.state != OUTSIDE)
    xq = grid.origin + grid.h * np.stack([cells[:, 0, None] + QUAD_S[None, :],
                                          cells[:, 1, None] + QUAD_T[None, :]], axis=-1)
    wx = np.broadcast_to(QUAD_W * grid.h ** 2, xq.shape[:-1])
    keys = limit.cell_for(xq)
    d = limit.drive(xq)
    out = np.zeros((len(DICTIONARY), 2))
    for key in np.unique(keys):
        sel = keys == key
        cs = limit._cell(key)
        for k, ((_, ax), (_, by)) in enumerate(DICTIONARY):
            m = np.stack([_cell_moment(cs, i, by, limit.cell_map, key) for i in range(2)])
            out[k] += np.einsum("p,p,pi,ic->c", wx[sel], ax(xq[sel]), d[sel], m)
    return out


def unfolded_l2(sol: PerforatedSolution, limit: TwoScaleField, n_x=8):
    """``||T_eps(v) - w0||_{L2(Omega x Y)}`` in reference coordinates (reported only)."""
    eps = float(sol.pmesh.eps)
    grid = limit.macro.mesh.grid
    (x0, y0) = grid.origin
    Lx, Ly = grid.nx * grid.h, grid.ny * grid.h
    hx, hy = Lx / n_x, Ly / n_x
    I, J = np.meshgrid(np.arange(n_x), np.arange(n_x), indexing="ij")
    xs = np.stack([x0 + hx * (I + 0.5), y0 + hy * (J + 0.5)], axis=-1).reshape(-1, 2)
    i, j, _, _ = grid.locate(xs)
    xs = xs[grid.state[i, j] != OUTSIDE]
    keys = limit.cell_for(xs)
    total = 0.0
    for key in np.unique(keys):
        sel = keys == key
        cs = limit._cell(key)
        ymesh = cs.mesh
        yq = ymesh.quadrature_points(ymesh.cells).reshape(-1, 2)
        wy = (QUAD_W * ymesh.h ** 2 * cs.coeffs.J).ravel()
        w0 = limit.evaluate(xs[sel], yq)
        Tv = unfold(sol.stokes.evaluate_velocity, eps, xs[sel], yq, sol.pmesh.mesh.origin)
        total += hx * hy * float(np.einsum("y,xyc->", wy, (Tv - w0) ** 2))
    return math.sqrt(total)


def two_scale_errors(ladder, limit: TwoScaleField, powers=(1.5, 2.0), unfold_points=8):
    """Error rows for a list of ``(PerforatedSolution, ExtendedFields)`` pairs."""
    rows = []
    for sol, ext in ladder:
        pe = pressure_errors(ext, limit.macro, powers)
        wr = weak_residuals(sol, limit)
        ul = unfolded_l2(sol, limit, unfold_points)
        rows.append(ErrorRow(float(sol.pmesh.eps), pe, wr, ul))
        log.info("eps=%s pressure %s weak max %.3e unfolded %.3e", sol.pmesh.eps, pe,
                 rows[-1].weak_max, ul)
    return rows


def write_error_table(path, rows):
    return write_csv(path, ERROR_HEADER, [r.as_tuple() for r in rows])


def convergence_verdict(rows, power=1.5):
    """``(passed, message)``: pressure errors strictly decreasing and weak residuals smaller at the end."""
    rows = sorted(rows, key=lambda r: -r.eps)
    for a, b in zip(rows, rows[1:]):
        ea, eb = a.pressure_lp[power], b.pressure_lp[power]
        if not (eb < ea or (ea == 0.0 and eb == 0.0)):
            return False, f"pressure error not decreasing at eps={b.eps:g}: {eb:.6e} >= {ea:.6e}"
    first, last = rows[0].weak_max, rows[-1].weak_max
    if not (last < first or (first == 0.0 and last == 0.0)):
        return False, f"weak residual not decreasing: eps={rows[-1].eps:g} {last:.6e} >= {first:.6e}"
    return True, "pressure errors decrease monotonically and weak residuals decrease"


# ---------------------------------------------------------------------------
# Korn and Poincare constants on the perforated domain
# ---------------------------------------------------------------------------

EIG_TOL = 1e-10


def _require_gamma(pmesh: PerforatedMesh):
    if pmesh.n_gamma_nodes == 0:
        raise EmptyDirichletSet("the pore-solid interface carries no Dirichlet nodes")


def korn_constant(pmesh: PerforatedMesh, coeffs: TransformedCoeffs | None = None, tol=EIG_TOL):
    """Smallest ``alpha`` with ``alpha ||grad v||^2 <= ||sym(M grad v)||^2`` on ``H^1`` vanishing on Gamma."""
    _require_gamma(pmesh)
    mesh = pmesh.mesh
    if coeffs is None:
        coeffs = TransformedCoeffs.identity(mesh)
    ones = np.ones_like(coeffs.J)
    sym = TransformedCoeffs(ones, coeffs.M, coeffs.A, None, 1.0, 1.0, coeffs.is_identity)
    full = TransformedCoeffs.identity(mesh)
    S = 0.5 * assemble_viscous_block(mesh, sym, True, DNS_BC)
    G = assemble_viscous_block(mesh, full, False, DNS_BC)
    lam, _ = linalg.min_generalized_eig(S, G, tol=tol)
    return lam


def _scalar_matrices(pmesh: PerforatedMesh):
    """Q2 stiffness and mass on the first velocity component's free dofs."""
    mesh = pmesh.mesh
    A = assemble_viscous_block(mesh, TransformedCoeffs.identity(mesh), False, DNS_BC)
    nf = A.shape[0] // 2
    K = A[:nf, :nf].tocsr()
    dm = pmesh.dofmap
    _, vd = dm.element_velocity_dofs(mesh, mesh.cells)
    vd = vd[:, :9]
    Me = np.einsum("q,qk,ql->kl", QUAD_W * mesh.h ** 2, N2, N2)
    rows = np.repeat(vd, 9, axis=1).ravel()
    cols = np.tile(vd, (1, 9)).ravel()
    vals = np.tile(Me.ravel(), len(vd))
    keep = (rows >= 0) & (cols >= 0)
    M = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(nf, nf))
    return K, M


def poincare_ratio(pmesh: PerforatedMesh, tol=EIG_TOL):
    """``C_eps / eps`` with ``C_eps^2`` the largest Rayleigh quotient ``||v||^2 / ||grad v||^2``."""
    _require_gamma(pmesh)
    K, M = _scalar_matrices(pmesh)
    lam, _ = linalg.min_generalized_eig(K, M, tol=tol)
    return 1.0 / math.sqrt(lam) / float(pmesh.eps)


@dataclass
class KornReport:
    eps: list
    alpha: list
    poincare: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(not a > 0 for a in self.alpha):
            raise ValueError("Korn constants must be positive")

    @property
    def alpha_variation(self):
        return max(self.alpha) / min(self.alpha)

    @property
    def poincare_spread(self):
        c = np.asarray(self.poincare)
        return float((c.max() - c.min()) / c.mean())

    def to_csv(self, path):
        return write_csv(path, ["eps", "alpha", "C_over_eps"], list(zip(self.eps, self.alpha, self.poincare)))


def korn_report(pmeshes, coeffs_list=None, tol=EIG_TOL):
    coeffs_list = coeffs_list or [None] * len(pmeshes)
    alphas = [korn_constant(pm, c, tol) for pm, c in zip(pmeshes, coeffs_list)]
    ratios = [poincare_ratio(pm, tol) for pm in pmeshes]
    meta = {"m": [pm.m for pm in pmeshes], "n_gamma": [pm.n_gamma_nodes for pm in pmeshes]}
    return KornReport([float(pm.eps) for pm in pmeshes], alphas, ratios, meta)


# ---------------------------------------------------------------------------
# rates
# ---------------------------------------------------------------------------

def fit_rate(eps, errors):
    """Least-squares slope of ``log(error)`` against ``log(eps)``."""
    eps = np.asarray(eps, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if eps.size != errors.size or eps.size < 2:
        raise DegenerateFit("need at least two matching (eps, error) pairs")
    if np.any(errors <= 0) or np.any(eps <= 0):
        raise DegenerateFit("errors and eps must be positive for a log-log fit")
    if np.unique(eps).size < 2:
        raise DegenerateFit("eps values must differ")
    slope, _ = np.polyfit(np.log(eps), np.log(errors), 1)
    return float(slope)
