import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evodarcy.errors import NonSPDCoefficient
from evodarcy.geometry import MacroDomain
from evodarcy.macrodarcy import (MacroData, build_macro_mesh, constant_tensor, l2_error,
                                 mass_balance_report, solve_darcy, weak_divergence_residual)

PI = math.pi


def sinsin(x):
    return np.sin(PI * x[..., 0]) * np.sin(PI * x[..., 1])


def manufactured(K):
    # -div(K grad q) = (K11 + K22) pi^2 q for q = sin sin and diagonal K; div v = -dt_theta
    k = K[0][0] + K[1][1]
    return MacroData(dt_theta=lambda t, x: -k * PI ** 2 * sinsin(x))


@pytest.mark.parametrize("K", [[[1.0, 0.0], [0.0, 1.0]], [[2.0, 0.0], [0.0, 0.5]]])
def test_manufactured_second_order(K):
    errs = []
    for n in (16, 32, 64):
        mesh = build_macro_mesh(MacroDomain.unit_square(), n)
        fld = solve_darcy(mesh, manufactured(K), constant_tensor(K))
        errs.append(l2_error(fld, sinsin))
    slope = -np.polyfit(np.log([16, 32, 64]), np.log(errs), 1)[0]
    assert slope >= 1.9


def test_uniform_force_gives_uniform_flow():
    K = np.array([[0.3, 0.1], [0.1, 0.2]])
    mesh = build_macro_mesh(MacroDomain.unit_square(), 8)
    data = MacroData(f=lambda t, x: np.broadcast_to([1.0, -2.0], np.shape(x)).copy(), nu=2.0)
    fld = solve_darcy(mesh, data, constant_tensor(K))
    assert np.abs(fld.q).max() < 1e-12
    assert np.allclose(fld.v, K @ np.array([1.0, -2.0]) / 2.0)


def test_background_pressure_enters_driving_force():
    mesh = build_macro_mesh(MacroDomain.unit_square(), 8)
    data = MacroData(p_b=lambda t, x: 3.0 * np.asarray(x)[..., 0],
                     grad_p_b=lambda t, x: np.broadcast_to([3.0, 0.0], np.shape(x)).copy())
    fld = solve_darcy(mesh, data, constant_tensor(np.eye(2)))
    assert np.allclose(fld.v, [-3.0, 0.0])


def test_zero_data_zero_field():
    mesh = build_macro_mesh(MacroDomain.l_shape(), 8)
    fld = solve_darcy(mesh, MacroData(), constant_tensor(np.eye(2)))
    mb = mass_balance_report(fld)
    assert not fld.q.any() and not fld.v.any() and mb.defect == 0.0


@pytest.mark.parametrize("domain", [MacroDomain.unit_square(), MacroDomain.l_shape()],
                         ids=["square", "l_shape"])
def test_mass_balance_uniform_source(domain):
    data = MacroData(dt_theta=lambda t, x: np.full(np.shape(x)[:-1], -0.1))
    defects = []
    for n in (16, 32, 64):
        fld = solve_darcy(build_macro_mesh(domain, n), data, constant_tensor(np.eye(2)))
        mb = mass_balance_report(fld)
        assert mb.volume_source == pytest.approx(-0.1 * float(domain.area), rel=1e-12)
        defects.append(mb.defect)
    assert defects[2] < defects[1] < defects[0]
    assert defects[2] <= 0.02 * 0.1 * float(domain.area)


def test_weak_divergence_residual_small():
    mesh = build_macro_mesh(MacroDomain.unit_square(), 16)
    fld = solve_darcy(mesh, manufactured([[1, 0], [0, 1]]), constant_tensor(np.eye(2)))
    assert weak_divergence_residual(fld) < 1e-8


@given(c=st.floats(0.05, 20.0))
def test_pressure_scales_inversely_with_permeability(c):
    mesh = build_macro_mesh(MacroDomain.unit_square(), 8)
    data = manufactured([[1, 0], [0, 1]])
    K = np.array([[1.0, 0.2], [0.2, 0.7]])
    q1 = solve_darcy(mesh, data, constant_tensor(K), tol=1e-12).q
    q2 = solve_darcy(mesh, data, constant_tensor(c * K), tol=1e-12).q
    assert np.allclose(q2 * c, q1, rtol=1e-7, atol=1e-10)


def test_indefinite_tensor_rejected():
    mesh = build_macro_mesh(MacroDomain.unit_square(), 4)
    with pytest.raises(NonSPDCoefficient):
        solve_darcy(mesh, MacroData(), constant_tensor(np.diag([1.0, -1.0])))


def test_vtk_output(tmp_path):
    mesh = build_macro_mesh(MacroDomain.unit_square(), 4)
    fld = solve_darcy(mesh, manufactured([[1, 0], [0, 1]]), constant_tensor(np.eye(2)))
    text = fld.to_vtk(tmp_path / "d.vtk").read_text().splitlines()
    assert text[3] == "DATASET STRUCTURED_POINTS" and text[4] == "DIMENSIONS 5 5 1"
    assert "VECTORS v double" in text
