import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evodarcy import linalg
from evodarcy.stokesfem import (BoundaryConditions, FemMesh, StokesRhs, TransformedCoeffs,
                                assemble_system, build_dofmap, divergence_residual,
                                l2_velocity_error, pressure_laplacian, q1_basis, q2_basis,
                                solve_stokes)

PI = math.pi


@given(s=st.floats(0, 1), t=st.floats(0, 1))
def test_bases_partition_of_unity(s, t):
    for basis, k in ((q2_basis, 9), (q1_basis, 4)):
        val, der = basis(np.array(s), np.array(t))
        assert val.shape[-1] == k
        assert val.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.abs(der.sum(axis=-2)).max() < 1e-12


def test_q2_basis_reproduces_quadratics():
    s, t = np.array(0.3), np.array(0.8)
    nodes = np.array([(a / 2, b / 2) for b in range(3) for a in range(3)])
    f = lambda x, y: x * x * y + 2 * y * y - x * y
    val, _ = q2_basis(s, t)
    assert val @ f(nodes[:, 0], nodes[:, 1]) == pytest.approx(f(0.3, 0.8), abs=1e-12)


def test_periodic_dofmap_counts():
    mesh = FemMesh.rectangle(4, 4, 0.25)
    dm = build_dofmap(mesh, BoundaryConditions(periodic=(True, True)))
    assert dm.n_nodes == 64 and dm.n_pressure == 16 and dm.n_free == 64


def test_taylor_hood_has_only_constant_pressure_mode():
    mesh = FemMesh.rectangle(3, 3, 1 / 3)
    bc = BoundaryConditions(periodic=(True, True))
    asm = assemble_system(mesh, TransformedCoeffs.identity(mesh), bc)
    assert linalg.spurious_pressure_modes(asm.B_phys) == 1


def test_periodic_poiseuille_exact():
    n = 8
    mesh = FemMesh.rectangle(n, n, 1 / n)
    bc = BoundaryConditions(periodic=(True, False), outer="dirichlet")
    rhs = StokesRhs(force=lambda x: np.stack([np.ones(x.shape[:-1]), np.zeros(x.shape[:-1])], -1))
    sol = solve_stokes(mesh, TransformedCoeffs.identity(mesh), bc, rhs, tol=1e-12)

    def exact(x):
        return np.stack([x[..., 1] * (1 - x[..., 1]) / 2, np.zeros(x.shape[:-1])], -1)

    assert l2_velocity_error(sol, exact) < 1e-9


def _S(t):
    return np.sin(PI * t) ** 2, PI * np.sin(2 * PI * t), 2 * PI ** 2 * np.cos(2 * PI * t), \
        -4 * PI ** 3 * np.sin(2 * PI * t)


def _manufactured(x):
    Sx, Sx1, Sx2, Sx3 = _S(x[..., 0])
    Sy, Sy1, Sy2, Sy3 = _S(x[..., 1])
    u = np.stack([Sx * Sy1, -Sx1 * Sy], -1)
    lap = np.stack([Sx2 * Sy1 + Sx * Sy3, -(Sx3 * Sy + Sx1 * Sy2)], -1)
    gp = np.stack([-PI * np.sin(PI * x[..., 0]) * np.cos(PI * x[..., 1]),
                   -PI * np.cos(PI * x[..., 0]) * np.sin(PI * x[..., 1])], -1)
    return u, -lap + gp


@pytest.mark.parametrize("symmetric", [True, False])
def test_manufactured_stokes_third_order(symmetric):
    errs = []
    for n in (4, 8, 16):
        mesh = FemMesh.rectangle(n, n, 1 / n)
        bc = BoundaryConditions(outer="dirichlet")
        rhs = StokesRhs(force=lambda x: _manufactured(x)[1])
        sol = solve_stokes(mesh, TransformedCoeffs.identity(mesh), bc, rhs, symmetric, tol=1e-12)
        errs.append(l2_velocity_error(sol, lambda x: _manufactured(x)[0]))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert rates[-1] > 2.7


def test_dilation_scales_coupling_only():
    mesh = FemMesh.rectangle(3, 3, 1 / 3)
    bc = BoundaryConditions(periodic=(True, True))
    c = 1.7
    ident = assemble_system(mesh, TransformedCoeffs.identity(mesh), bc, symmetric=False)
    dil = assemble_system(mesh, TransformedCoeffs.from_jacobian(
        mesh, lambda x: np.broadcast_to(c * np.eye(2), x.shape + (2,)).copy()), bc, symmetric=False)
    assert abs(dil.system.A - ident.system.A).max() < 1e-12
    assert abs(dil.B_phys - c * ident.B_phys).max() < 1e-12


def test_identity_jacobian_reproduces_identity_coefficients():
    mesh = FemMesh.rectangle(3, 2, 0.5)
    bc = BoundaryConditions(outer="dirichlet")
    a = assemble_system(mesh, TransformedCoeffs.identity(mesh), bc)
    b = assemble_system(mesh, TransformedCoeffs.from_jacobian(
        mesh, lambda x: np.broadcast_to(np.eye(2), x.shape + (2,)).copy()), bc)
    assert abs(a.system.A - b.system.A).max() < 1e-13
    assert abs(a.B_phys - b.B_phys).max() < 1e-13


def test_solution_is_discretely_divergence_free():
    mesh = FemMesh.rectangle(6, 6, 1 / 6)
    bc = BoundaryConditions(outer="dirichlet")
    rhs = StokesRhs(force=lambda x: _manufactured(x)[1])
    asm = assemble_system(mesh, TransformedCoeffs.identity(mesh), bc, rhs)
    from evodarcy.stokesfem import solve_assembled

    sol = solve_assembled(asm, mesh, 1e-12)
    assert divergence_residual(asm, sol) < 1e-9


def test_pressure_laplacian_symmetric_positive():
    mask = np.ones((4, 4), dtype=bool)
    mask[1:3, 1:3] = False
    mesh = FemMesh.from_mask(mask)
    bc = BoundaryConditions(solid="dirichlet", outer="stress")
    dm = build_dofmap(mesh, bc)
    L = pressure_laplacian(mesh, dm).toarray()
    assert np.allclose(L, L.T)
    assert np.linalg.eigvalsh(L).min() > 0
