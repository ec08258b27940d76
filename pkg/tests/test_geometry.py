import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evodarcy.errors import DegenerateJacobian, DisconnectedPore, GeometryError, IncompatibleEpsilon
from evodarcy.geometry import (ChannelFamily, EpsDeformation, FamilyDeformation, MacroDomain,
                               PorosityField, RadialBumpFamily, ReferenceCell, build_lattice,
                               channel_levelset, check_piola, det2, disc_levelset, jacobian_fd,
                               periodic_components, pore_volume)

FAMS = [RadialBumpFamily(), ChannelFamily()]
unit_pts = st.tuples(st.floats(0.0, 1.0), st.floats(0.0, 1.0))


def test_reference_cell_fraction_matches_disc_area():
    cell = ReferenceCell.from_levelset(disc_levelset(0.3), 256)
    assert abs(cell.pore_fraction - (1 - math.pi * 0.09)) < 5e-3
    cell.validate()


def test_disconnected_pore_rejected():
    # pore = two separate discs
    a, b = disc_levelset(0.1, (0.25, 0.25)), disc_levelset(0.1, (0.75, 0.75))
    cell = ReferenceCell.from_levelset(lambda y: np.minimum(-a(y), -b(y)), 32)
    with pytest.raises(DisconnectedPore):
        cell.validate()


def test_periodic_components_counts_wrapping_strip_once():
    mask = np.zeros((8, 8), dtype=bool)
    mask[:, :2] = True
    mask[:, -2:] = True
    assert periodic_components(mask) == 1
    assert periodic_components(mask, (False, False)) == 2


def test_channel_cell_fraction_equals_height():
    for h in (0.25, 0.5, 0.75):
        cell = ReferenceCell.from_levelset(channel_levelset(h), 64)
        assert cell.pore_fraction == pytest.approx(h)


def test_mask_csv_rows(tmp_path):
    cell = ReferenceCell.from_levelset(channel_levelset(0.5), 8)
    cell.to_csv(tmp_path / "m.csv")
    rows = (tmp_path / "m.csv").read_text().split()
    assert len(rows) == 8
    assert rows[0] == "1,1,1,1,1,1,1,1" and rows[4] == "0,0,0,0,0,0,0,0"


@pytest.mark.parametrize("fam", FAMS, ids=lambda f: f.name)
def test_reference_theta_is_identity(fam):
    y = np.random.default_rng(0).random((50, 2))
    assert np.allclose(fam.psi(fam.reference_theta, y), y)


@pytest.mark.parametrize("fam", FAMS, ids=lambda f: f.name)
@given(p=unit_pts, s=st.floats(0.0, 1.0))
def test_family_jacobian_matches_finite_differences(fam, p, s):
    lo, hi = fam.theta_range
    theta = lo + s * (hi - lo)
    y = np.array(p)
    J = fam.jacobian(theta, y)
    Jfd = jacobian_fd(lambda z: fam.psi(theta, z), y, 1e-6)
    assert np.allclose(J, Jfd, atol=1e-5)
    dth = (fam.displacement(theta + 1e-6, y) - fam.displacement(theta - 1e-6, y)) / 2e-6
    assert np.allclose(fam.dtheta_displacement(theta, y), dth, atol=1e-5)
    ddet = (det2(fam.jacobian(theta + 1e-6, y)) - det2(fam.jacobian(theta - 1e-6, y))) / 2e-6
    assert fam.dtheta_det(theta, y) == pytest.approx(ddet, abs=1e-5)


@pytest.mark.parametrize("fam", FAMS, ids=lambda f: f.name)
def test_cell_boundary_fixed_and_jacobian_positive(fam):
    s = np.linspace(0, 1, 41)
    edges = np.concatenate([np.stack([s, 0 * s], -1), np.stack([0 * s, s], -1),
                            np.stack([s, 0 * s + 1], -1), np.stack([0 * s + 1, s], -1)])
    g = (np.arange(64) + 0.5) / 64
    grid = np.stack(np.meshgrid(g, g, indexing="ij"), -1)
    for theta in fam.theta_range:
        d = fam.displacement(theta, edges)
        if fam.name == "channel":
            d = d[:, 0]   # the channel map slides along the horizontal edges
        assert np.abs(d).max() < 1e-12
        assert det2(fam.jacobian(theta, grid)).min() > 0.1


@pytest.mark.parametrize("fam", FAMS, ids=lambda f: f.name)
def test_deformed_interface_is_image_of_reference(fam):
    theta = fam.theta_range[1] - 0.02
    rng = np.random.default_rng(1)
    if fam.name == "radial":
        ang = rng.random(40) * 2 * math.pi
        y = 0.5 + fam.r0 * np.stack([np.cos(ang), np.sin(ang)], -1)
    else:
        y = np.stack([rng.random(40), np.full(40, 0.25)], -1)
    assert np.abs(fam.deformed_levelset(theta, fam.psi(theta, y))).max() < 1e-10


@pytest.mark.parametrize("fam", FAMS, ids=lambda f: f.name)
def test_pore_volume_is_porosity(fam):
    theta = 0.7
    d = FamilyDeformation(fam, PorosityField.constant(theta))
    assert pore_volume(d, 0.0, np.zeros(2), 256) == pytest.approx(theta, abs=2e-3)


def test_theta_range_enforced():
    with pytest.raises(GeometryError):
        RadialBumpFamily().check_theta(0.95)


def test_piola_residual_second_order():
    fam = RadialBumpFamily()
    d = FamilyDeformation(fam, PorosityField.linear_in_time(0.7, -0.1))
    res = [check_piola(d, 0.0, np.zeros(2), n)[0] for n in (32, 64, 128)]
    rates = np.log2(np.array(res[:-1]) / np.array(res[1:]))
    assert rates.min() > 1.7


def test_channel_piola_exact_in_x():
    # the channel map only depends on y2, so the cofactor columns are exactly divergence free
    d = FamilyDeformation(ChannelFamily(), PorosityField.linear_in_time(0.5, 0.1))
    assert check_piola(d, 0.0, np.zeros(2), 32)[1] < 1e-12


def test_unit_square_lattice():
    dom = MacroDomain.unit_square()
    assert len(build_lattice(dom, Fraction(1, 4))) == 16
    assert dom.area == 1


def test_l_shape_lattice_and_contains():
    dom = MacroDomain.l_shape()
    assert len(build_lattice(dom, Fraction(1, 2))) == 12
    assert dom.contains(np.array([[0.5, 1.5], [1.5, 1.5]])).tolist() == [True, False]


def test_incompatible_epsilon():
    with pytest.raises(IncompatibleEpsilon):
        MacroDomain.unit_square().occupancy(Fraction(2, 3))


def test_overlapping_cuboids_rejected():
    with pytest.raises(GeometryError):
        MacroDomain((((0, 0), (1, 1)), ((Fraction(1, 2), 0), (2, 1))))


@given(p=st.lists(unit_pts, min_size=1, max_size=20))
def test_eps_deformation_inverse_roundtrip(p):
    fam = RadialBumpFamily()
    por = PorosityField.linear_in_time(0.75, -0.1)
    d = EpsDeformation(fam, por, 0.25)
    x = np.array(p)
    z = d.psi(0.5, x)
    assert np.allclose(d.inverse(0.5, z), x, atol=1e-10)


def test_eps_deformation_jacobian_includes_porosity_gradient():
    fam = RadialBumpFamily()
    por = PorosityField(lambda t, x: 0.65 + 0.1 * np.asarray(x)[..., 0],
                        lambda t, x: np.zeros(np.shape(x)[:-1]),
                        lambda t, x: np.broadcast_to([0.1, 0.0], np.shape(x)).copy())
    d = EpsDeformation(fam, por, 0.125)
    x = np.random.default_rng(3).random((30, 2)) * 0.9 + 0.05
    assert np.allclose(d.jacobian(0.0, x), d.jacobian_fd(0.0, x), atol=1e-5)


def test_eps_deformation_dt_psi_matches_time_difference():
    d = EpsDeformation(ChannelFamily(), PorosityField.linear_in_time(0.5, 0.2), 0.25)
    x = np.random.default_rng(4).random((20, 2))
    fd = (d.psi(1e-6, x) - d.psi(-1e-6, x)) / 2e-6
    assert np.allclose(d.dt_psi(0.0, x), fd, atol=1e-7)


def test_degenerate_jacobian_detected():
    d = EpsDeformation(RadialBumpFamily(), PorosityField.constant(0.8), 0.25, c_J=5.0)
    with pytest.raises(DegenerateJacobian):
        d.coefficients(0.0, np.array([[0.1, 0.1]]))


def test_disconnected_pore_is_geometry_error():
    assert issubclass(DisconnectedPore, GeometryError)
