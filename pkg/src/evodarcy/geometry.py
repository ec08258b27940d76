"""Reference cell, macroscopic domain and the micro/epsilon deformation families.

Conventions used throughout the package:

* points are arrays with a trailing axis of length 2;
* a Jacobian ``Psi[..., a, b]`` is ``d psi_a / d y_b``;
* the cofactor-type matrix is ``A = J Psi^{-1}``;
* gridded cell data are indexed ``[i, j]`` with ``i`` along the first
  coordinate and ``j`` along the second.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .errors import DegenerateJacobian, DisconnectedPore, GeometryError, IncompatibleEpsilon

DIM = 2
DEFAULT_CJ = 0.1
FD_STEP = 1e-5


# ---------------------------------------------------------------------------
# small helpers
# ---------------------------------------------------------------------------

def det2(M):
    return M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]


def cofactor_t(M):
    """Return ``det(M) M^{-1}`` (the adjugate) for stacks of 2x2 matrices."""
    out = np.empty_like(M)
    out[..., 0, 0] = M[..., 1, 1]
    out[..., 1, 1] = M[..., 0, 0]
    out[..., 0, 1] = -M[..., 0, 1]
    out[..., 1, 0] = -M[..., 1, 0]
    return out


def inv2(M):
    return cofactor_t(M) / det2(M)[..., None, None]


def midpoints(n):
    """Cell midpoints of the uniform n x n grid on the unit square, shape (n, n, 2)."""
    c = (np.arange(n) + 0.5) / n
    return np.stack(np.meshgrid(c, c, indexing="ij"), axis=-1)


def periodic_components(mask, periodic=(True, True)):
    """Number of edge-connected components of ``mask``, optionally on a torus."""
    labels, n = ndimage.label(mask)
    if n == 0:
        return 0
    parent = list(range(n + 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    pairs = []
    if periodic[0]:
        pairs.append((labels[0, :], labels[-1, :]))
    if periodic[1]:
        pairs.append((labels[:, 0], labels[:, -1]))
    for a_row, b_row in pairs:
        for a, b in zip(a_row, b_row):
            if a and b:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[ra] = rb
    return len({find(k) for k in range(1, n + 1)})


# ---------------------------------------------------------------------------
# level sets (negative inside the pore)
# ---------------------------------------------------------------------------

def disc_levelset(radius, center=(0.5, 0.5)):
    """Pore = complement of a disc (the solid inclusion)."""
    c = np.asarray(center, dtype=float)

    def phi(y):
        return radius - np.linalg.norm(np.asarray(y) - c, axis=-1)

    return phi


def channel_levelset(height):
    """Pore = horizontal channel of the given height wrapped around y2 = 0."""
    half_solid = (1.0 - height) / 2.0

    def phi(y):
        return half_solid - np.abs(np.asarray(y)[..., 1] - 0.5)

    return phi


@dataclass(frozen=True)
class ReferenceCell:
    """Staircase pore of the unit cell, sampled at cell midpoints."""

    n: int
    pore_levelset: np.ndarray
    dim: int = DIM

    @classmethod
    def from_levelset(cls, levelset, n):
        return cls(n=n, pore_levelset=np.asarray(levelset(midpoints(n)), dtype=float))

    @property
    def pore_mask(self):
        return self.pore_levelset < 0.0

    @property
    def pore_fraction(self):
        return float(self.pore_mask.mean())

    def validate(self):
        frac = self.pore_fraction
        if not 0.0 < frac < 1.0:
            raise GeometryError(f"pore fraction {frac} not in (0, 1)")
        m = self.pore_mask
        if not (np.array_equal(m[0, :], m[-1, :]) and np.array_equal(m[:, 0], m[:, -1])):
            raise GeometryError("pore trace differs on opposite cell faces")
        if periodic_components(m) != 1:
            raise DisconnectedPore("pore mask is not connected on the torus")
        return self

    def to_csv(self, path):
        """Write the mask as 0/1 rows; row ``j`` holds the cells with second index ``j``."""
        with open(path, "w") as fh:
            for j in range(self.n):
                fh.write(",".join(str(int(v)) for v in self.pore_mask[:, j]) + "\n")


# ---------------------------------------------------------------------------
# deformation families  psi~_0(theta, y)
# ---------------------------------------------------------------------------

def _smoothstep(s):
    """Degree-7 step with three vanishing derivatives at both ends (C^3 joins)."""
    s = np.clip(s, 0.0, 1.0)
    return s ** 4 * (35.0 - 84.0 * s + 70.0 * s * s - 20.0 * s ** 3)


def _smoothstep_d(s):
    inside = (s > 0.0) & (s < 1.0)
    s = np.clip(s, 0.0, 1.0)
    return np.where(inside, 140.0 * s ** 3 * (1.0 - s) ** 3, 0.0)


class DeformationFamily:
    """Porosity-parameterised cell deformation ``y -> psi(theta, y)``.

    Subclasses provide the displacement and its derivatives analytically.
    """

    name = "abstract"
    theta_range = (0.0, 1.0)
    reference_theta = 0.5

    def reference_levelset(self, y):
        raise NotImplementedError

    def deformed_levelset(self, theta, y):
        raise NotImplementedError

    def displacement(self, theta, y):
        raise NotImplementedError

    def jacobian(self, theta, y):
        raise NotImplementedError

    def dtheta_displacement(self, theta, y):
        raise NotImplementedError

    def dtheta_det(self, theta, y):
        raise NotImplementedError

    def psi(self, theta, y):
        return np.asarray(y, dtype=float) + self.displacement(theta, y)

    def reference_cell(self, n):
        return ReferenceCell.from_levelset(self.reference_levelset, n)

    def check_theta(self, theta):
        lo, hi = self.theta_range
        theta = np.asarray(theta)
        if np.any(theta < lo - 1e-12) or np.any(theta > hi + 1e-12):
            raise GeometryError(f"porosity outside admissible range {self.theta_range} "
                                f"of family '{self.name}'")


class IdentityFamily(DeformationFamily):
    """No deformation; the pore is given by a fixed level set."""

    name = "identity"

    def __init__(self, levelset):
        self._levelset = levelset

    def reference_levelset(self, y):
        return self._levelset(y)

    def deformed_levelset(self, theta, y):
        return self._levelset(y)

    def displacement(self, theta, y):
        return np.zeros(np.broadcast_shapes(np.shape(theta), np.shape(y)[:-1]) + (DIM,))

    def jacobian(self, theta, y):
        shape = np.broadcast_shapes(np.shape(theta), np.shape(y)[:-1])
        return np.broadcast_to(np.eye(DIM), shape + (DIM, DIM)).copy()

    def dtheta_displacement(self, theta, y):
        return self.displacement(theta, y)

    def dtheta_det(self, theta, y):
        return np.zeros(np.broadcast_shapes(np.shape(theta), np.shape(y)[:-1]))


class RadialBumpFamily(DeformationFamily):
    """Disc-shaped solid of radius sqrt((1-theta)/pi) at the cell centre.

    Points are moved radially by ``delta(theta) b(rho)`` where ``b`` is a C^3
    bump equal to one on the reference interface and supported in
    ``r_in < rho < r_out``, so the cell boundary is never displaced.
    """

    name = "radial"

    def __init__(self, reference_theta=0.6, r_in=0.02, r_out=0.499, theta_range=(0.47, 0.83)):
        self.reference_theta = reference_theta
        self.r_in = r_in
        self.r_out = r_out
        self.theta_range = tuple(theta_range)
        self.r0 = self.radius(reference_theta)
        self.center = np.array([0.5, 0.5])
        if not r_in < self.r0 < r_out < 0.5:
            raise GeometryError("bump support must bracket the reference radius inside the cell")

    @staticmethod
    def radius(theta):
        return np.sqrt((1.0 - np.asarray(theta, dtype=float)) / math.pi)

    def _delta(self, theta):
        return self.radius(theta) - self.r0

    def _ddelta(self, theta):
        return -1.0 / (2.0 * math.pi * self.radius(theta))

    def _bump(self, rho):
        inner = (rho - self.r_in) / (self.r0 - self.r_in)
        outer = (self.r_out - rho) / (self.r_out - self.r0)
        b = np.where(rho < self.r0, _smoothstep(inner), _smoothstep(outer))
        db = np.where(rho < self.r0,
                      _smoothstep_d(inner) / (self.r0 - self.r_in),
                      -_smoothstep_d(outer) / (self.r_out - self.r0))
        return b, db

    def _polar(self, y):
        d = np.asarray(y, dtype=float) - self.center
        rho = np.linalg.norm(d, axis=-1)
        safe = np.where(rho > 0.0, rho, 1.0)
        return d, rho, safe

    def reference_levelset(self, y):
        return self.r0 - np.linalg.norm(np.asarray(y) - self.center, axis=-1)

    def deformed_levelset(self, theta, y):
        return self.radius(theta) - np.linalg.norm(np.asarray(y) - self.center, axis=-1)

    def displacement(self, theta, y):
        d, rho, safe = self._polar(y)
        b, _ = self._bump(rho)
        return (self._delta(theta) * b / safe)[..., None] * d

    def dtheta_displacement(self, theta, y):
        d, rho, safe = self._polar(y)
        b, _ = self._bump(rho)
        return (self._ddelta(theta) * b / safe)[..., None] * d

    def _jac_parts(self, y):
        d, rho, safe = self._polar(y)
        b, db = self._bump(rho)
        # psi = c + g(rho) d with g = 1 + delta b / rho
        iso = b / safe
        radial = (db * safe - b) / safe ** 2
        outer = d[..., :, None] * d[..., None, :] / safe[..., None, None]
        return iso, radial, outer, b, db, rho, safe

    def jacobian(self, theta, y):
        iso, radial, outer, *_ = self._jac_parts(y)
        delta = np.asarray(self._delta(theta))
        eye = np.eye(DIM)
        return ((1.0 + delta * iso)[..., None, None] * eye
                + (delta * radial)[..., None, None] * outer)

    def dtheta_jacobian(self, theta, y):
        iso, radial, outer, *_ = self._jac_parts(y)
        dd = np.asarray(self._ddelta(theta))
        return (dd * iso)[..., None, None] * np.eye(DIM) + (dd * radial)[..., None, None] * outer

    def dtheta_det(self, theta, y):
        _, _, _, b, db, rho, safe = self._jac_parts(y)
        delta = self._delta(theta)
        R = rho + delta * b
        dR = 1.0 + delta * db
        return self._ddelta(theta) * (b / safe * dR + R / safe * db)


class ChannelFamily(DeformationFamily):
    """Horizontal channel of height theta; the solid strip is stretched vertically.

    ``psi(theta, y) = (y1, y2 + beta(theta) sin(2 pi y2))`` maps the reference
    channel of height ``h0`` onto the channel of height ``theta``.
    """

    name = "channel"

    def __init__(self, reference_height=0.5, theta_range=(0.25, 0.75)):
        self.reference_theta = reference_height
        self.h0 = reference_height
        self.theta_range = tuple(theta_range)
        self._scale = 1.0 / (2.0 * math.sin(math.pi * reference_height))

    def _beta(self, theta):
        return (np.asarray(theta, dtype=float) - self.h0) * self._scale

    def reference_levelset(self, y):
        return channel_levelset(self.h0)(y)

    def deformed_levelset(self, theta, y):
        return (1.0 - np.asarray(theta)) / 2.0 - np.abs(np.asarray(y)[..., 1] - 0.5)

    def displacement(self, theta, y):
        y = np.asarray(y, dtype=float)
        s = np.sin(2.0 * math.pi * y[..., 1])
        out = np.zeros(np.broadcast_shapes(np.shape(theta), y.shape[:-1]) + (DIM,))
        out[..., 1] = self._beta(theta) * s
        return out

    def dtheta_displacement(self, theta, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.broadcast_shapes(np.shape(theta), y.shape[:-1]) + (DIM,))
        out[..., 1] = self._scale * np.sin(2.0 * math.pi * y[..., 1])
        return out

    def jacobian(self, theta, y):
        y = np.asarray(y, dtype=float)
        c = np.cos(2.0 * math.pi * y[..., 1])
        shape = np.broadcast_shapes(np.shape(theta), y.shape[:-1])
        out = np.zeros(shape + (DIM, DIM))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = 1.0 + 2.0 * math.pi * self._beta(theta) * c
        return out

    def dtheta_jacobian(self, theta, y):
        y = np.asarray(y, dtype=float)
        shape = np.broadcast_shapes(np.shape(theta), y.shape[:-1])
        out = np.zeros(shape + (DIM, DIM))
        out[..., 1, 1] = 2.0 * math.pi * self._scale * np.cos(2.0 * math.pi * y[..., 1])
        return out

    def dtheta_det(self, theta, y):
        y = np.asarray(y, dtype=float)
        val = 2.0 * math.pi * self._scale * np.cos(2.0 * math.pi * y[..., 1])
        return np.broadcast_to(val, np.broadcast_shapes(np.shape(theta), y.shape[:-1])).copy()


FAMILIES = {
    "radial": RadialBumpFamily,
    "disc": RadialBumpFamily,
    "channel": ChannelFamily,
}


# ---------------------------------------------------------------------------
# porosity fields
# ---------------------------------------------------------------------------

@dataclass
class PorosityField:
    """Porosity ``theta(t, x)`` together with its time and space derivatives."""

    theta: Callable
    dt_theta: Callable
    grad_theta: Callable

    @classmethod
    def constant(cls, value):
        def theta(t, x):
            return np.full(np.shape(x)[:-1], float(value))

        def zero(t, x):
            return np.zeros(np.shape(x)[:-1])

        def grad(t, x):
            return np.zeros(np.shape(x))

        return cls(theta, zero, grad)

    @classmethod
    def linear_in_time(cls, theta0, rate):
        """theta(t) = theta0 + rate * t, uniform in space."""

        def theta(t, x):
            return np.full(np.shape(x)[:-1], theta0 + rate * t)

        def dt(t, x):
            return np.full(np.shape(x)[:-1], float(rate))

        def grad(t, x):
            return np.zeros(np.shape(x))

        return cls(theta, dt, grad)

    def check_bounds(self, times, points, lo=0.0, hi=1.0):
        vals = np.concatenate([np.ravel(self.theta(t, points)) for t in times])
        if vals.min() <= lo or vals.max() >= hi:
            raise GeometryError(f"porosity samples leave ({lo}, {hi}): "
                                f"[{vals.min():.4g}, {vals.max():.4g}]")
        return float(vals.min()), float(vals.max())


# ---------------------------------------------------------------------------
# micro deformation  psi_0(t, x, y)
# ---------------------------------------------------------------------------

class MicroDeformation:
    """Cell deformation at macroscopic position x and time t."""

    c_J = DEFAULT_CJ

    def psi0(self, t, x, y):
        raise NotImplementedError

    def jacobian(self, t, x, y):
        raise NotImplementedError

    def dt_psi0(self, t, x, y):
        raise NotImplementedError

    def dt_det(self, t, x, y):
        h = 1e-6
        return (det2(self.jacobian(t + h, x, y)) - det2(self.jacobian(t - h, x, y))) / (2 * h)

    def div_cofactor(self, t, x, y, step=None):
        """Column divergence ``sum_a d_a A_ab`` of ``A = J Psi^{-1}``, by central differences."""
        y = np.asarray(y, dtype=float)
        step = step or FD_STEP
        out = np.zeros(y.shape)
        for a in range(DIM):
            e = np.zeros(DIM)
            e[a] = step
            Ap = cofactor_t(self.jacobian(t, x, y + e))
            Am = cofactor_t(self.jacobian(t, x, y - e))
            out += (Ap[..., a, :] - Am[..., a, :]) / (2 * step)
        return out

    def reference_levelset(self, y):
        raise NotImplementedError

    def deformed_levelset(self, t, x, y):
        raise NotImplementedError

    def reference_cell(self, n):
        return ReferenceCell.from_levelset(self.reference_levelset, n)

    @property
    def analytic_piola(self):
        return False


class FamilyDeformation(MicroDeformation):
    """``psi_0(t, x, y) = psi~_0(theta(t, x), y)`` for a porosity-driven family."""

    def __init__(self, family: DeformationFamily, porosity: PorosityField, c_J=DEFAULT_CJ):
        self.family = family
        self.porosity = porosity
        self.c_J = c_J

    def theta(self, t, x):
        return float(np.asarray(self.porosity.theta(t, np.asarray(x, dtype=float))))

    def psi0(self, t, x, y):
        return self.family.psi(self.theta(t, x), y)

    def jacobian(self, t, x, y):
        return self.family.jacobian(self.theta(t, x), y)

    def dt_psi0(self, t, x, y):
        rate = float(np.asarray(self.porosity.dt_theta(t, np.asarray(x, dtype=float))))
        return rate * self.family.dtheta_displacement(self.theta(t, x), y)

    def dt_det(self, t, x, y):
        rate = float(np.asarray(self.porosity.dt_theta(t, np.asarray(x, dtype=float))))
        return rate * self.family.dtheta_det(self.theta(t, x), y)

    def div_cofactor(self, t, x, y, step=None):
        # cofactor of a gradient map is divergence free
        return np.zeros(np.shape(y))

    @property
    def analytic_piola(self):
        return True

    def reference_levelset(self, y):
        return self.family.reference_levelset(y)

    def deformed_levelset(self, t, x, y):
        return self.family.deformed_levelset(self.theta(t, x), y)


class CustomDeformation(MicroDeformation):
    """User-supplied ``psi0(t, x, y)``; Jacobians by central differences."""

    def __init__(self, psi, levelset, dt_psi=None, c_J=DEFAULT_CJ, step=FD_STEP):
        self._psi = psi
        self._levelset = levelset
        self._dt_psi = dt_psi
        self.c_J = c_J
        self.step = step

    def psi0(self, t, x, y):
        return np.asarray(self._psi(t, x, np.asarray(y, dtype=float)), dtype=float)

    def jacobian(self, t, x, y):
        return jacobian_fd(lambda z: self.psi0(t, x, z), y, self.step)

    def dt_psi0(self, t, x, y):
        if self._dt_psi is not None:
            return np.asarray(self._dt_psi(t, x, y), dtype=float)
        h = 1e-6
        return (self.psi0(t + h, x, y) - self.psi0(t - h, x, y)) / (2 * h)

    def reference_levelset(self, y):
        return self._levelset(y)

    def deformed_levelset(self, t, x, y):
        yref = invert_map(lambda z: self.psi0(t, x, z), lambda z: self.jacobian(t, x, z), y)
        return self._levelset(yref)


def identity_deformation(levelset):
    return FamilyDeformation(IdentityFamily(levelset), PorosityField.constant(0.5))


def jacobian_fd(fn, y, step=FD_STEP):
    """Central-difference Jacobian ``[..., a, b] = d fn_a / d y_b``."""
    y = np.asarray(y, dtype=float)
    cols = []
    for b in range(DIM):
        e = np.zeros(DIM)
        e[b] = step
        cols.append((fn(y + e) - fn(y - e)) / (2 * step))
    return np.stack(cols, axis=-1)


def invert_map(fn, jac, z, tol=1e-12, maxit=8, x0=None):
    """Solve ``fn(x) = z`` pointwise by Newton's method."""
    from .errors import NewtonDiverged

    z = np.asarray(z, dtype=float)
    x = z.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    for _ in range(maxit + 1):
        r = fn(x) - z
        err = np.abs(r).max() if r.size else 0.0
        if err <= tol:
            return x
        x = x - np.einsum("...ab,...b->...a", inv2(jac(x)), r)
    r = fn(x) - z
    if r.size and np.abs(r).max() > tol:
        raise NewtonDiverged(f"Newton inversion residual {np.abs(r).max():.3e} after {maxit} steps")
    return x


# ---------------------------------------------------------------------------
# operations on micro deformations
# ---------------------------------------------------------------------------

def eval_micro_deformation(deformation: MicroDeformation, t, x, y):
    """Return ``(psi0, Psi0, J0, A0)`` at the cell points ``y``."""
    y = np.asarray(y, dtype=float)
    if np.any(y < -1e-14) or np.any(y > 1 + 1e-14):
        raise ValueError("cell points must lie in [0, 1]^2")
    psi = deformation.psi0(t, x, y)
    Psi = deformation.jacobian(t, x, y)
    J = det2(Psi)
    jmin = float(np.min(J))
    if jmin < deformation.c_J:
        raise DegenerateJacobian(jmin, deformation.c_J)
    return psi, Psi, J, cofactor_t(Psi)


def _node_grid(n):
    c = np.arange(n + 1) / n
    return np.stack(np.meshgrid(c, c, indexing="ij"), axis=-1)


def check_piola(deformation: MicroDeformation, t, x, n):
    """Finite-difference residuals of the Piola identity on an (n+1)^2 node grid.

    Returns ``(max |div_y(A0 dt psi0) - dt J0|, max_b |sum_a d_a A0_ab|)`` over
    interior nodes; the divergences use second-order central differences.
    """
    h = 1.0 / n
    y = _node_grid(n)
    Psi = deformation.jacobian(t, x, y)
    A = cofactor_t(Psi)
    flux = np.einsum("...ab,...b->...a", A, deformation.dt_psi0(t, x, y))
    div_flux = ((flux[2:, 1:-1, 0] - flux[:-2, 1:-1, 0])
                + (flux[1:-1, 2:, 1] - flux[1:-1, :-2, 1])) / (2 * h)
    dtJ = deformation.dt_det(t, x, y)[1:-1, 1:-1]
    div_A = ((A[2:, 1:-1, 0, :] - A[:-2, 1:-1, 0, :])
             + (A[1:-1, 2:, 1, :] - A[1:-1, :-2, 1, :])) / (2 * h)
    return float(np.abs(div_flux - dtJ).max()), float(np.abs(div_A).max())


_G3 = np.array([-math.sqrt(0.6), 0.0, math.sqrt(0.6)]) / 2 + 0.5
_W3 = np.array([5.0, 8.0, 5.0]) / 18.0


def _cell_gauss_points(n):
    """3x3 Gauss points and weights of every cell, shapes (n, n, 9, 2) and (9,)."""
    h = 1.0 / n
    gx, gy = np.meshgrid(_G3, _G3, indexing="ij")
    local = np.stack([gx.ravel(), gy.ravel()], axis=-1) * h
    w = np.outer(_W3, _W3).ravel() * h * h
    corner = np.stack(np.meshgrid(np.arange(n) * h, np.arange(n) * h, indexing="ij"), axis=-1)
    return corner[:, :, None, :] + local[None, None], w


def _levelset_fraction(levelset, n):
    """Pore fraction of each cell from a linearised level set."""
    h = 1.0 / n
    mid = midpoints(n)
    phi = levelset(mid)
    step = 1e-3 * h
    grad = np.stack([(levelset(mid + step * e) - levelset(mid - step * e)) / (2 * step)
                     for e in np.eye(DIM)], axis=-1)
    # half-width of the cell along the level-set normal
    reach = 0.5 * h * np.abs(grad).sum(axis=-1)
    reach = np.where(reach > 0, reach, 1.0)
    return np.clip(0.5 - phi / (2 * reach), 0.0, 1.0)


def pore_volume(deformation: MicroDeformation, t, x, n=256, method="mask"):
    """Deformed pore volume ``int_{Y^p} J0 dy`` over the reference pore.

    ``method="mask"`` integrates J0 with 3x3 Gauss points over the staircase
    pore cells; ``method="levelset"`` weights every cell by its linearised
    level-set pore fraction instead.
    """
    pts, w = _cell_gauss_points(n)
    J = det2(deformation.jacobian(t, x, pts))
    if np.min(J) < deformation.c_J:
        raise DegenerateJacobian(float(np.min(J)), deformation.c_J)
    cell_int = J @ w
    if method == "mask":
        weight = (deformation.reference_levelset(midpoints(n)) < 0).astype(float)
    elif method == "levelset":
        weight = _levelset_fraction(deformation.reference_levelset, n)
    else:
        raise ValueError(f"unknown quadrature '{method}'")
    return float((cell_int * weight).sum())


def dt_pore_volume(deformation: MicroDeformation, t, x, dt=1e-4, n=256, method="mask"):
    """Central difference in time of :func:`pore_volume`."""
    return (pore_volume(deformation, t + dt, x, n, method)
            - pore_volume(deformation, t - dt, x, n, method)) / (2 * dt)


def integrated_dt_det(deformation: MicroDeformation, t, x, n=256):
    """``int_{Y^p} dt J0 dy`` over the staircase reference pore (3x3 Gauss per cell)."""
    pts, w = _cell_gauss_points(n)
    mask = deformation.reference_levelset(midpoints(n)) < 0
    return float(((deformation.dt_det(t, x, pts) @ w) * mask).sum())


# ---------------------------------------------------------------------------
# macroscopic domain and lattice
# ---------------------------------------------------------------------------

def _frac(v):
    if isinstance(v, Fraction):
        return v
    if isinstance(v, int):
        return Fraction(v)
    return Fraction(v).limit_denominator(10 ** 6)


@dataclass(frozen=True)
class MacroDomain:
    """Finite union of non-overlapping axis-parallel rectangles with rational corners."""

    cuboids: tuple
    epsilon_ladder: tuple = ()

    def __post_init__(self):
        boxes = tuple(((_frac(a[0]), _frac(a[1])), (_frac(b[0]), _frac(b[1])))
                      for a, b in self.cuboids)
        object.__setattr__(self, "cuboids", boxes)
        object.__setattr__(self, "epsilon_ladder", tuple(_frac(e) for e in self.epsilon_ladder))
        for (x0, y0), (x1, y1) in boxes:
            if not (x1 > x0 and y1 > y0):
                raise GeometryError("degenerate cuboid")
        for i, p in enumerate(boxes):
            for q in boxes[i + 1:]:
                ox = min(p[1][0], q[1][0]) - max(p[0][0], q[0][0])
                oy = min(p[1][1], q[1][1]) - max(p[0][1], q[0][1])
                if ox > 0 and oy > 0:
                    raise GeometryError("cuboids overlap")

    @classmethod
    def unit_square(cls, ladder=()):
        return cls((((0, 0), (1, 1)),), tuple(ladder))

    @classmethod
    def l_shape(cls, ladder=()):
        return cls((((0, 0), (1, 1)), ((1, 0), (2, 1)), ((0, 1), (1, 2))), tuple(ladder))

    @property
    def area(self):
        return sum((b[0] - a[0]) * (b[1] - a[1]) for a, b in self.cuboids)

    @property
    def bounding_box(self):
        x0 = min(a[0] for a, _ in self.cuboids)
        y0 = min(a[1] for a, _ in self.cuboids)
        x1 = max(b[0] for _, b in self.cuboids)
        y1 = max(b[1] for _, b in self.cuboids)
        return (x0, y0), (x1, y1)

    def contains(self, pts):
        pts = np.asarray(pts, dtype=float)
        inside = np.zeros(pts.shape[:-1], dtype=bool)
        for a, b in self.cuboids:
            inside |= ((pts[..., 0] >= float(a[0])) & (pts[..., 0] <= float(b[0]))
                       & (pts[..., 1] >= float(a[1])) & (pts[..., 1] <= float(b[1])))
        return inside

    def occupancy(self, h):
        """Boolean grid of the cells of size ``h`` covering the bounding box that lie in the domain."""
        h = _frac(h)
        (x0, y0), (x1, y1) = self.bounding_box
        nx, ny = (x1 - x0) / h, (y1 - y0) / h
        if nx.denominator != 1 or ny.denominator != 1:
            raise IncompatibleEpsilon(f"bounding box not a multiple of {h}")
        occ = np.zeros((int(nx), int(ny)), dtype=bool)
        for a, b in self.cuboids:
            i0, i1 = (a[0] - x0) / h, (b[0] - x0) / h
            j0, j1 = (a[1] - y0) / h, (b[1] - y0) / h
            if any(v.denominator != 1 for v in (i0, i1, j0, j1)):
                raise IncompatibleEpsilon(f"cuboid corners not on the lattice of spacing {h}")
            occ[int(i0):int(i1), int(j0):int(j1)] = True
        return occ


def build_lattice(domain: MacroDomain, eps):
    """Lattice offsets ``k`` with ``k + eps Y`` inside the domain, as exact fractions."""
    eps = _frac(eps)
    occ = domain.occupancy(eps)
    (x0, y0), _ = domain.bounding_box
    idx = np.argwhere(occ)
    return [(x0 + int(i) * eps, y0 + int(j) * eps) for i, j in idx]


# ---------------------------------------------------------------------------
# epsilon-scaled deformation  psi_eps(t, x) = x + eps psi~_0(theta(t, x), x / eps)
# ---------------------------------------------------------------------------

@dataclass
class EpsDeformation:
    family: DeformationFamily
    porosity: PorosityField
    eps: float
    c_J: float = DEFAULT_CJ

    def _theta(self, t, x):
        return np.asarray(self.porosity.theta(t, x), dtype=float)

    def _cell(self, x):
        y = np.asarray(x, dtype=float) / self.eps
        return y - np.floor(y)

    def psi(self, t, x):
        x = np.asarray(x, dtype=float)
        return x + self.eps * self.family.displacement(self._theta(t, x), self._cell(x))

    def jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        theta = self._theta(t, x)
        y = self._cell(x)
        Psi = self.family.jacobian(theta, y)
        dth = self.family.dtheta_displacement(theta, y)
        grad = np.asarray(self.porosity.grad_theta(t, x), dtype=float)
        return Psi + self.eps * dth[..., :, None] * grad[..., None, :]

    def jacobian_fd(self, t, x, step=FD_STEP):
        return jacobian_fd(lambda z: self.psi(t, z), x, step)

    def det(self, t, x):
        return det2(self.jacobian(t, x))

    def dt_psi(self, t, x):
        """Boundary-deformation velocity ``d_t psi_eps``."""
        x = np.asarray(x, dtype=float)
        theta = self._theta(t, x)
        rate = np.asarray(self.porosity.dt_theta(t, x), dtype=float)
        return self.eps * rate[..., None] * self.family.dtheta_displacement(theta, self._cell(x))

    def coefficients(self, t, x):
        """``(J, Psi^{-T}, A)`` at the points ``x``; raises on degenerate Jacobians."""
        Psi = self.jacobian(t, x)
        J = det2(Psi)
        if J.size and J.min() < self.c_J:
            raise DegenerateJacobian(float(J.min()), self.c_J)
        A = cofactor_t(Psi)
        Minv_t = np.swapaxes(A, -1, -2) / J[..., None, None]
        return J, Minv_t, A

    def inverse(self, t, z, tol=1e-12, maxit=8):
        return invert_map(lambda x: self.psi(t, x), lambda x: self.jacobian(t, x), z, tol, maxit)
