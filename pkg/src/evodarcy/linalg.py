"""Sparse storage helpers and the Krylov / eigenvalue solvers used by every solver module."""
from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from .errors import NoConvergence, SingularSystem

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
OUTER_TOL = 1e-8
_RNG_LOCK = threading.Lock()
AMG_SEED = 20240601


def default_maxit(n):
    return max(50, int(20 * math.sqrt(max(n, 1))))


# ---------------------------------------------------------------------------
# storage
# ---------------------------------------------------------------------------

def as_csr(M):
    """Canonical CSR copy: float64, duplicates summed, column indices sorted."""
    M = sp.csr_matrix(M, dtype=np.float64)
    M.sum_duplicates()
    M.sort_indices()
    return M


def is_symmetric(M, rtol=1e-12, samples=256, seed=0):
    """Check ``M[i, j] == M[j, i]`` on a fixed random sample of stored entries."""
    M = sp.csr_matrix(M)
    if M.shape[0] != M.shape[1]:
        return False
    coo = M.tocoo()
    if coo.nnz == 0:
        return True
    rng = np.random.default_rng(seed)
    pick = rng.choice(coo.nnz, size=min(samples, coo.nnz), replace=False)
    Mt = M.T.tocsr()
    a = np.asarray(M[coo.row[pick], coo.col[pick]]).ravel()
    b = np.asarray(Mt[coo.row[pick], coo.col[pick]]).ravel()
    scale = max(abs(M).max(), 1e-300)
    return bool(np.all(np.abs(a - b) <= rtol * scale))


def dump_matrix_market(M, path, comment=""):
    """Write ``M`` as Matrix Market coordinate text."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(M), comment=comment)


# ---------------------------------------------------------------------------
# preconditioners
# ---------------------------------------------------------------------------

def jacobi_preconditioner(M):
    d = np.asarray(sp.csr_matrix(M).diagonal(), dtype=float)
    d = np.where(d != 0.0, d, 1.0)
    inv = 1.0 / d
    return LinearOperator(M.shape, matvec=lambda x: inv * np.ravel(x), dtype=float)


def amg_preconditioner(M, near_nullspace=None, components=1):
    """One smoothed-aggregation V-cycle; dense Cholesky for small matrices.

    ``components > 1`` declares component-major vector unknowns and uses the
    per-component constants as near-nullspace.
    """
    M = sp.csr_matrix(M)
    n = M.shape[0]
    if n <= 400:
        factor = scipy.linalg.cho_factor(M.toarray())
        return LinearOperator(M.shape, matvec=lambda x: scipy.linalg.cho_solve(factor, np.ravel(x)),
                              dtype=float)
    import pyamg

    kwargs = {}
    if near_nullspace is None and components > 1 and n % components == 0:
        near_nullspace = np.kron(np.eye(components), np.ones((n // components, 1)))
    if near_nullspace is not None:
        kwargs["B"] = near_nullspace
    # pyamg draws spectral-radius start vectors from the global generator; fix it
    # so that repeated runs build identical hierarchies
    with _RNG_LOCK:
        state = np.random.get_state()
        np.random.seed(AMG_SEED)
        try:
            ml = pyamg.smoothed_aggregation_solver(M, max_coarse=400,
                                                  strength=("symmetric", {"theta": 0.0}), **kwargs)
        finally:
            np.random.set_state(state)
    return ml.aspreconditioner(cycle="V")


def _make_preconditioner(M, precond, components=1):
    if precond is None:
        return None
    if precond == "jacobi":
        return jacobi_preconditioner(M)
    if precond == "amg":
        return amg_preconditioner(M, components=components)
    return aslinearoperator(precond)


# ---------------------------------------------------------------------------
# conjugate gradients
# ---------------------------------------------------------------------------

@dataclass
class SolveInfo:
    iterations: int = 0
    residual: float = 0.0
    history: list = field(default_factory=list)


def cg_solve(M, b, tol=DEFAULT_TOL, maxit=None, x0=None, precond="jacobi", info=None):
    """Preconditioned conjugate gradients for an SPD matrix.

    Stops when ``||M x - b|| <= tol ||b||``; raises :class:`NoConvergence`
    after ``maxit`` iterations.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    maxit = default_maxit(n) if maxit is None else maxit
    Mop = aslinearoperator(M)
    P = _make_preconditioner(M, precond)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    info = SolveInfo() if info is None else info
    if bnorm == 0.0:
        info.iterations, info.residual = 0, 0.0
        return np.zeros(n)
    r = b - Mop.matvec(x)
    res = np.linalg.norm(r) / bnorm
    it = 0
    if res <= tol:
        info.iterations, info.residual = 0, res
        return x
    z = r if P is None else P.matvec(r)
    p = z.copy()
    rz = r @ z
    while it < maxit:
        it += 1
        Mp = Mop.matvec(p)
        pMp = p @ Mp
        if pMp <= 0.0:
            raise NoConvergence(it, res, "cg (matrix not positive definite)")
        alpha = rz / pMp
        x += alpha * p
        r -= alpha * Mp
        res = np.linalg.norm(r) / bnorm
        info.history.append(res)
        if res <= tol:
            # confirm against the true residual
            res = np.linalg.norm(b - Mop.matvec(x)) / bnorm
            if res <= tol:
                break
            r = b - Mop.matvec(x)
        z = r if P is None else P.matvec(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    info.iterations, info.residual = it, res
    if res > tol:
        raise NoConvergence(it, res, "cg")
    return x


# ---------------------------------------------------------------------------
# saddle-point systems
# ---------------------------------------------------------------------------

@dataclass
class SaddleSystem:
    """``A u + B^T p = f``, ``B u = g``.

    ``pressure_mass`` is a positive diagonal used for the Schur-complement
    preconditioner and ``viscous_scale`` the factor multiplying the velocity
    block.  With ``nullspace`` set the pressure is fixed by
    ``pressure_weights . p = 0``.  An optional SPD ``pressure_laplacian``
    adds its inverse to the pressure block of the preconditioner.
    """

    A: sp.spmatrix
    B: sp.spmatrix
    f: np.ndarray
    g: np.ndarray
    nullspace: bool = False
    pressure_weights: np.ndarray | None = None
    pressure_mass: np.ndarray | None = None
    viscous_scale: float = 1.0
    components: int = 2
    pressure_laplacian: sp.spmatrix | None = None

    def __post_init__(self):
        nu, npr = self.A.shape[0], self.B.shape[0]
        if self.A.shape != (nu, nu) or self.B.shape[1] != nu:
            raise ValueError("inconsistent block shapes")
        if self.f.shape != (nu,) or self.g.shape != (npr,):
            raise ValueError("inconsistent right-hand side shapes")
        if self.pressure_weights is None:
            self.pressure_weights = np.ones(npr)
        if self.pressure_mass is None:
            self.pressure_mass = np.asarray(self.pressure_weights, dtype=float).copy()

    @property
    def n_velocity(self):
        return self.A.shape[0]

    @property
    def n_pressure(self):
        return self.B.shape[0]


def project_mean_zero(p, weights):
    """Remove the weighted mean: ``p - (w.p / w.1) 1``."""
    p = np.asarray(p, dtype=float)
    w = np.asarray(weights, dtype=float)
    return p - (w @ p) / w.sum()


def _minres(K, rhs, P, tol, maxit, x0=None, window=400):
    """Preconditioned MINRES for a symmetric indefinite operator.

    ``P`` applies the inverse of an SPD preconditioner.  Returns the iterate
    and the preconditioned residual history.
    """
    n = rhs.shape[0]
    x = np.zeros(n) if x0 is None else x0.copy()
    v = rhs - K(x)
    z = P(v)
    gamma = math.sqrt(max(v @ z, 0.0))
    eta0 = eta = gamma
    hist = [1.0]
    if gamma == 0.0:
        return x, hist
    v_old = np.zeros(n)
    w_old = np.zeros(n)
    w = np.zeros(n)
    gamma_old = 1.0
    c_old = c = 1.0
    s_old = s = 0.0
    for _ in range(maxit):
        z = z / gamma
        Kz = K(z)
        delta = Kz @ z
        v_new = Kz - (delta / gamma) * v - (gamma / gamma_old) * v_old
        z_new = P(v_new)
        gamma_new = math.sqrt(max(v_new @ z_new, 0.0))
        a0 = c * delta - c_old * s * gamma
        a1 = math.hypot(a0, gamma_new)
        a2 = s * delta + c_old * c * gamma
        a3 = s_old * gamma
        if a1 == 0.0:
            break
        c_old, c = c, a0 / a1
        s_old, s = s, gamma_new / a1
        w_new = (z - a3 * w_old - a2 * w) / a1
        x += c * eta * w_new
        eta = -s * eta
        hist.append(abs(eta) / eta0)
        if hist[-1] <= tol or gamma_new == 0.0:
            break
        if len(hist) > window and hist[-1] > 0.999 * hist[-1 - window]:
            raise SingularSystem(f"MINRES stagnated at relative residual {hist[-1]:.3e}")
        w_old, w = w, w_new
        v_old, v = v, v_new
        z = z_new
        gamma_old, gamma = gamma, gamma_new
    return x, hist


def _saddle_operators(S: SaddleSystem):
    A = sp.csr_matrix(S.A)
    B = sp.csr_matrix(S.B)
    nu = S.n_velocity
    g = np.asarray(S.g, dtype=float)
    if S.nullspace:
        w = np.asarray(S.pressure_weights, dtype=float)
        wn = w / w.sum()
        colsum = np.asarray(B.sum(axis=0)).ravel()     # 1^T B

        def Bmul(u):
            return B @ u - wn * (colsum @ u)

        def BTmul(p):
            return B.T @ p - colsum * (wn @ p)

        g = g - wn * g.sum()
    else:
        def Bmul(u):
            return B @ u

        def BTmul(p):
            return B.T @ p

    def K(x):
        u, p = x[:nu], x[nu:]
        return np.concatenate([A @ u + BTmul(p), Bmul(u)])

    return K, Bmul, BTmul, g


def saddle_solve(S: SaddleSystem, tol=DEFAULT_TOL, maxit=None, precond="amg", info=None):
    """Solve the saddle-point system with block-diagonally preconditioned MINRES.

    The velocity block is preconditioned by one AMG V-cycle (or Jacobi) and
    the pressure block by the lumped pressure mass scaled with
    ``1 / viscous_scale``.  Returns ``(u, p)``; the pressure has zero weighted
    mean when ``S.nullspace`` is set.
    """
    nu, npr = S.n_velocity, S.n_pressure
    info = SolveInfo() if info is None else info
    if npr == 0:
        u = cg_solve(S.A, S.f, tol=tol, precond=precond, info=info) if nu else np.zeros(0)
        return u, np.zeros(0)
    K, Bmul, BTmul, g = _saddle_operators(S)
    rhs = np.concatenate([np.asarray(S.f, dtype=float), g])
    rnorm = np.linalg.norm(rhs)
    if rnorm == 0.0:
        info.iterations, info.residual = 0, 0.0
        return np.zeros(nu), np.zeros(npr)
    PA = _make_preconditioner(S.A, precond, S.components)
    schur_diag = np.asarray(S.pressure_mass, dtype=float) / S.viscous_scale
    PL = None if S.pressure_laplacian is None else amg_preconditioner(S.pressure_laplacian)

    def P(x):
        pp = x[nu:] / schur_diag
        if PL is not None:
            # additive Darcy-type correction for macroscopically smooth pressures
            pp = pp + PL.matvec(x[nu:])
        return np.concatenate([PA.matvec(x[:nu]), pp])

    maxit = default_maxit(nu + npr) if maxit is None else maxit
    # MINRES minimises the preconditioned residual; tighten its target until the
    # Euclidean residual meets ``tol`` (each pass restarts from zero, so the
    # result does not depend on earlier passes' rounding)
    inner = tol / 30.0
    total = 0
    res = np.inf
    for _ in range(4):
        x, hist = _minres(K, rhs, P, inner, maxit)
        total += len(hist) - 1
        info.history.extend(hist[1:])
        res = np.linalg.norm(K(x) - rhs) / rnorm
        if res <= tol or inner < 1e-15:
            break
        inner *= 0.5 * tol / res
    info.iterations, info.residual = total, res
    if res > tol:
        raise NoConvergence(total, res, "minres")
    u, p = x[:nu], x[nu:]
    if S.nullspace:
        p = project_mean_zero(p, S.pressure_weights)
    return u, p


def uzawa_solve(S: SaddleSystem, tol=OUTER_TOL, inner_tol=None, maxit=None, precond="amg",
                info=None):
    """Schur-complement conjugate gradients on the pressure (exact Uzawa).

    Every Schur product needs one inner velocity solve; the outer iteration is
    preconditioned by the scaled pressure mass.  Slower than
    :func:`saddle_solve` and intended as an independent cross-check.
    """
    nu, npr = S.n_velocity, S.n_pressure
    inner_tol = tol * 1e-2 if inner_tol is None else inner_tol
    info = SolveInfo() if info is None else info
    _, Bmul, BTmul, g = _saddle_operators(S)
    PA = _make_preconditioner(S.A, precond, S.components)

    def Ainv(r):
        return cg_solve(S.A, r, tol=inner_tol, precond=PA, maxit=10 * default_maxit(nu))

    # B A^{-1} (f - B^T p) = g  ->  (B A^{-1} B^T) p = B A^{-1} f - g
    u0 = Ainv(S.f)
    b = Bmul(u0) - g
    schur_diag = np.asarray(S.pressure_mass, dtype=float) / S.viscous_scale
    Sop = LinearOperator((npr, npr), matvec=lambda p: Bmul(Ainv(BTmul(p))), dtype=float)
    Pop = LinearOperator((npr, npr), matvec=lambda r: r / schur_diag, dtype=float)
    if S.nullspace:
        # keep every iterate orthogonal to constants in the Euclidean sense
        b = b - b.mean()
    p = cg_solve(Sop, b, tol=tol, maxit=maxit or default_maxit(npr) * 5, precond=Pop, info=info)
    u = Ainv(S.f - BTmul(p))
    if S.nullspace:
        p = project_mean_zero(p, S.pressure_weights)
    return u, p


def saddle_residuals(S: SaddleSystem, u, p):
    """Relative block residuals ``(||A u + B^T p - f||, ||B u - g||)`` with the mean projection applied."""
    _, Bmul, BTmul, g = _saddle_operators(S)
    scale = max(np.linalg.norm(S.f) + np.linalg.norm(g), 1e-300)
    r1 = np.linalg.norm(S.A @ u + BTmul(p) - S.f) / scale
    r2 = np.linalg.norm(Bmul(u) - g) / scale
    return r1, r2


def spurious_pressure_modes(B, rtol=1e-10):
    """Dimension of the kernel of ``B^T`` (dense SVD, small systems only).

    A stable mixed pair has at most the constant mode; more indicates a
    violated inf-sup condition.
    """
    Bd = sp.csr_matrix(B).toarray()
    sv = np.linalg.svd(Bd, compute_uv=False)
    npr = Bd.shape[0]
    full = np.zeros(npr)
    full[: sv.size] = sv
    return int(np.sum(full <= rtol * max(sv.max(), 1e-300)))


# ---------------------------------------------------------------------------
# generalized eigenvalues
# ---------------------------------------------------------------------------

def min_generalized_eig(A, M, tol=1e-8, maxit=500, block=1, seed=0, precond="amg",
                        inner_tol=1e-10, x0=None, method="auto"):
    """Smallest eigenpair of ``A v = lambda M v`` for SPD ``A`` and ``M``.

    ``method`` is "dense" (LAPACK), "lanczos" (shift-invert Lanczos about zero
    with a sparse LU of ``A``), "inverse" (inverse subspace iteration with
    preconditioned CG inner solves; ``block > 1`` adds a Rayleigh-Ritz step)
    or "auto" (dense up to 400 unknowns, Lanczos beyond).  The returned
    ``lambda`` is exactly the Rayleigh quotient of the returned vector.
    """
    A = sp.csr_matrix(A)
    M = sp.csr_matrix(M)
    n = A.shape[0]
    if n == 0:
        raise ValueError("empty eigenproblem")
    if method == "auto":
        method = "dense" if n <= 400 else "lanczos"
    if method == "dense":
        w, V = scipy.linalg.eigh(A.toarray(), M.toarray(), subset_by_index=[0, 0])
        v = V[:, 0]
        lam = float(v @ (A @ v)) / float(v @ (M @ v))
        return lam, v / math.sqrt(v @ (M @ v))
    if method == "lanczos":
        lu = scipy.sparse.linalg.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A")
        op = LinearOperator(A.shape, matvec=lu.solve, dtype=float)
        v0 = np.random.default_rng(seed).standard_normal(n)
        try:
            _, V = scipy.sparse.linalg.eigsh(A, k=1, M=M, sigma=0.0, which="LM", OPinv=op,
                                             tol=min(tol, 1e-10), v0=v0, maxiter=maxit * 10)
        except scipy.sparse.linalg.ArpackNoConvergence as exc:
            raise NoConvergence(maxit * 10, float("nan"), "shift-invert Lanczos") from exc
        v = V[:, 0]
        v = v / math.sqrt(v @ (M @ v))
        return float(v @ (A @ v)), v
    if method != "inverse":
        raise ValueError(f"unknown eigen method '{method}'")
    PA = _make_preconditioner(A, precond)
    rng = np.random.default_rng(seed)
    k = max(1, min(block, n))
    X = rng.standard_normal((n, k)) if x0 is None else np.asarray(x0, dtype=float).reshape(n, -1)
    lam_old = np.inf
    lam = np.inf
    v = X[:, 0]
    for it in range(1, maxit + 1):
        Y = np.column_stack([cg_solve(A, M @ X[:, j], tol=inner_tol, precond=PA,
                                      maxit=10 * default_maxit(n)) for j in range(X.shape[1])])
        # Rayleigh-Ritz on span(Y)
        AY = np.column_stack([A @ Y[:, j] for j in range(Y.shape[1])])
        MY = np.column_stack([M @ Y[:, j] for j in range(Y.shape[1])])
        Ah = Y.T @ AY
        Mh = Y.T @ MY
        Ah = 0.5 * (Ah + Ah.T)
        Mh = 0.5 * (Mh + Mh.T)
        w, C = scipy.linalg.eigh(Ah, Mh)
        X = Y @ C
        X /= np.sqrt(np.einsum("ij,ij->j", X, M @ X))
        v = X[:, 0]
        lam = float(v @ (A @ v)) / float(v @ (M @ v))
        if abs(lam - lam_old) <= tol * abs(lam):
            return lam, v
        lam_old = lam
    raise NoConvergence(maxit, abs(lam - lam_old) / max(abs(lam), 1e-300), "inverse iteration")
