import math
from fractions import Fraction

import numpy as np
import pytest

from evodarcy.dns import (back_transform, build_perforated_mesh, extend_solution, resample_physical,
                          solve_eps_problem)
from evodarcy.geometry import ChannelFamily, EpsDeformation, MacroDomain, PorosityField, RadialBumpFamily
from evodarcy.macrodarcy import MacroData

PI = math.pi
SQUARE = MacroDomain.unit_square()


def phi(x):
    return np.sin(PI * x[..., 0]) * np.sin(PI * x[..., 1])


def grad_phi(t, x):
    return PI * np.stack([np.cos(PI * x[..., 0]) * np.sin(PI * x[..., 1]),
                          np.sin(PI * x[..., 0]) * np.cos(PI * x[..., 1])], -1)


@pytest.mark.parametrize("eps", [Fraction(1, 2), Fraction(1, 4)])
def test_radial_euler_characteristic(eps):
    # one connected pore with one hole per period cell
    pm = build_perforated_mesh(SQUARE, RadialBumpFamily().reference_cell(16), eps, 16)
    assert pm.euler_characteristic() == 1 - int(1 / eps) ** 2
    assert len(pm.lattice) == int(1 / eps) ** 2
    assert pm.n_gamma_nodes > 0


def test_channel_strips():
    # 1/eps - 1 interior strips and two half strips along y2 = 0 and y2 = 1
    pm = build_perforated_mesh(SQUARE, ChannelFamily().reference_cell(16), Fraction(1, 4), 16)
    assert pm.euler_characteristic() == 5


def test_resolution_mismatch_rejected():
    with pytest.raises(ValueError):
        build_perforated_mesh(SQUARE, ChannelFamily().reference_cell(16), Fraction(1, 2), 32)


def test_zero_data_zero_solution():
    pm = build_perforated_mesh(SQUARE, RadialBumpFamily().reference_cell(16), Fraction(1, 2), 16)
    sol = solve_eps_problem(pm, None, MacroData())
    assert not sol.stokes.velocity.any() and not sol.stokes.pressure.any()
    assert sol.norms() == (0.0, 0.0, 0.0)


def test_hydrostatic_force_balanced_by_pressure():
    # f = grad phi with phi = 0 on the outer boundary: w = 0, q = phi
    errs = []
    for m in (8, 16):
        pm = build_perforated_mesh(SQUARE, RadialBumpFamily().reference_cell(m), Fraction(1, 4), m)
        sol = solve_eps_problem(pm, None, MacroData(f=grad_phi), tol=1e-12)
        nodes = pm.mesh.cells
        pe = sol.stokes.element_pressure(nodes)
        x = pm.mesh.q1_coordinates().reshape(-1, 2)[pm.mesh.q1_nodes(nodes)]
        errs.append(np.abs(pe - phi(x)).max())
        assert sol.norms()[0] < 1e-3 * sol.norms()[2]
    assert errs[1] < errs[0] / 3


def test_lift_and_dirichlet_modes_agree():
    fam = RadialBumpFamily()
    pm = build_perforated_mesh(SQUARE, fam.reference_cell(16), Fraction(1, 2), 16)
    d = EpsDeformation(fam, PorosityField.linear_in_time(0.65, -0.1), 0.5)
    data = MacroData(f=lambda t, x: np.broadcast_to([1.0, 0.0], np.shape(x)).copy(),
                     dt_theta=lambda t, x: np.full(np.shape(x)[:-1], -0.1))
    a = solve_eps_problem(pm, d, data, 0.0, 1e-12, lift_mode="lift")
    b = solve_eps_problem(pm, d, data, 0.0, 1e-12, lift_mode="dirichlet")
    assert np.allclose(a.stokes.velocity, b.stokes.velocity, atol=1e-9)
    assert np.allclose(a.stokes.pressure, b.stokes.pressure, atol=1e-8)
    # the total velocity matches the interface velocity on Gamma
    gamma = pm.dofmap.dirichlet
    assert np.allclose(a.stokes.velocity[gamma], d.dt_psi(0.0, pm.dofmap.node_coords[gamma]))


def test_extension_means_and_back_transform(tmp_path):
    fam = RadialBumpFamily()
    pm = build_perforated_mesh(SQUARE, fam.reference_cell(16), Fraction(1, 4), 16)
    d = EpsDeformation(fam, PorosityField.constant(0.75), 0.25)
    sol = solve_eps_problem(pm, d, MacroData(f=grad_phi), tol=1e-12)
    ext = extend_solution(sol)
    # hydrostatic pressure phi(psi(x)): the J-weighted mean is the mean of phi over the deformed pore
    g = (np.arange(400) + 0.5) / 400
    y = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    pore = fam.deformed_levelset(0.75, y) < 0
    oracle = np.array([phi(np.array([float(a), float(b)]) + 0.25 * y[pore]).mean()
                       for a, b in pm.lattice])
    assert np.abs(ext.cell_means - oracle).max() < 5e-3
    assert np.all(ext.pore_measure > 0)
    x = np.array([[0.3, 0.2], [0.71, 0.55]])
    z = d.psi(0.0, x)
    res = back_transform(sol, z)
    assert np.allclose(res["reference"], x, atol=1e-10)
    assert np.allclose(res["q"], sol.stokes.evaluate_pressure(x))
    out = resample_physical(sol, 8, tmp_path / "r.vtk")
    assert out["q"].shape == (9, 9)
    assert (tmp_path / "r.vtk").read_text().startswith("# vtk DataFile Version 3.0")


def test_apriori_quantity_definition():
    pm = build_perforated_mesh(SQUARE, ChannelFamily().reference_cell(16), Fraction(1, 2), 16)
    sol = solve_eps_problem(pm, None, MacroData(f=lambda t, x: np.broadcast_to([1.0, 0.0],
                                                                                 np.shape(x)).copy()))
    w, gw, q = sol.norms()
    assert sol.apriori_quantity() == pytest.approx(w + 0.5 * gw + q)
    assert w > 0 and gw > 0
