"""Acceptance suite: one test and one summary line per criterion."""
import csv
import math
import time

import numpy as np
import pytest

from evodarcy.cellstokes import cell_permeability, solve_cell_physical
from evodarcy.cli import main
from evodarcy.geometry import (ChannelFamily, FamilyDeformation, MacroDomain, PorosityField,
                               RadialBumpFamily, ReferenceCell, channel_levelset, identity_deformation)
from evodarcy.macrodarcy import MacroData, build_macro_mesh, constant_tensor, l2_error, mass_balance_report, solve_darcy
from evodarcy.twoscale import fit_rate

from tests.acceptance_report import record

PI = math.pi


def read_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: float(v) for k, v in r.items()} for r in rows]


def cli(tmp, command, text, name, threads=1):
    cfg = tmp / f"{name}.toml"
    cfg.write_text(text)
    out = tmp / name
    start = time.perf_counter()
    code = main([command, "--config", str(cfg), "--out", str(out), "--threads", str(threads),
                 "--log-level", "WARNING"])
    return code, out, time.perf_counter() - start


# ---------------------------------------------------------------------------
# shared runs
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def channel_identity():
    start = time.perf_counter()
    kt = cell_permeability(ReferenceCell.from_levelset(channel_levelset(0.5), 128),
                           identity_deformation(lambda y: np.zeros(np.shape(y)[:-1])))
    return kt, time.perf_counter() - start


@pytest.fixture(scope="module")
def radial_pairs():
    fam = RadialBumpFamily()
    d = FamilyDeformation(fam, PorosityField.constant(0.7))
    return {n: (cell_permeability(fam.reference_cell(n), d), solve_cell_physical(d, 0.0, (0.0, 0.0), n))
            for n in (64, 128)}


@pytest.fixture(scope="module")
def channel_transformed():
    fam = ChannelFamily()
    return cell_permeability(fam.reference_cell(64), FamilyDeformation(fam, PorosityField.constant(0.6)))


CONVERGE = """
[geometry]
family = "channel"
theta = "0.6 - 0.1*t"

[data]
f = ["1", "0"]

[domain]
ladder = ["1/4", "1/8", "1/16"]
m = 32
"""


@pytest.fixture(scope="module")
def converge_run(tmp_path_factory):
    return cli(tmp_path_factory.mktemp("converge"), "converge", CONVERGE, "run")


def all_tensors(channel_identity, radial_pairs, channel_transformed):
    """Every permeability tensor computed by this suite with a label and a nondegeneracy flag."""
    out = [("channel identity n=128", channel_identity[0], False),
           ("channel transformed n=64", channel_transformed, False)]
    for n, (a, b) in radial_pairs.items():
        out += [(f"radial transformed n={n}", a, True), (f"radial physical n={n}", b, True)]
    return out


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def test_criterion_01_analytic_channel_permeability(channel_identity):
    kt, elapsed = channel_identity
    target = 1 / 96
    rel = abs(kt.K[0, 0] - target) / target
    ok = rel <= 0.02 and abs(kt.K[1, 1]) <= 1e-8 and abs(kt.K[0, 1]) <= 1e-8 and elapsed <= 60
    record(1, ok, f"K11={kt.K[0, 0]:.7f} rel.err={rel:.2e} K22={kt.K[1, 1]:.1e} "
                  f"|K12|={abs(kt.K[0, 1]):.1e} time={elapsed:.1f}s")
    assert ok


def test_criterion_02_symmetry_and_definiteness(channel_identity, radial_pairs, channel_transformed,
                                                converge_run):
    tensors = all_tensors(channel_identity, radial_pairs, channel_transformed)
    worst_asym, worst_lam, failures = 0.0, np.inf, []
    for label, kt, nondegenerate in tensors:
        worst_asym = max(worst_asym, kt.asymmetry)
        if kt.asymmetry > 1e-8:
            failures.append(f"{label} asymmetric")
        if nondegenerate:
            lam = kt.min_eigenvalue / np.linalg.norm(kt.K, 2)
            worst_lam = min(worst_lam, lam)
            if not lam > 1e-8:
                failures.append(f"{label} not positive definite")
        elif kt.min_eigenvalue < -1e-12 * np.linalg.norm(kt.K, 2):
            failures.append(f"{label} indefinite")
    # the tensor written by the convergence run
    row = read_rows(converge_run[1] / "permeability.csv")[0]
    K = np.array([[row["K11"], row["K12"]], [row["K21"], row["K22"]]])
    asym = abs(K[0, 1] - K[1, 0]) / np.linalg.norm(K)
    worst_asym = max(worst_asym, asym)
    if asym > 1e-8:
        failures.append("converge tensor asymmetric")
    ok = not failures
    record(2, ok, f"{len(tensors) + 1} tensors, max asymmetry={worst_asym:.1e}, "
                  f"min lambda/|K| (percolating cells)={worst_lam:.3f}, "
                  f"channel K22=0 by construction (semidefinite)"
           + ("" if ok else "; " + "; ".join(failures)))
    assert ok


def test_criterion_03_transformation_independence(radial_pairs):
    gaps = {n: np.linalg.norm(a.K - b.K) / np.linalg.norm(b.K) for n, (a, b) in radial_pairs.items()}
    ok = gaps[128] <= 0.05 and gaps[128] < gaps[64]
    record(3, ok, f"relative gap n=64: {gaps[64]:.4f}, n=128: {gaps[128]:.4f}")
    assert ok


def test_criterion_04_galerkin_identity(channel_identity, radial_pairs, channel_transformed):
    tensors = all_tensors(channel_identity, radial_pairs, channel_transformed)
    gap = max(float(np.abs(kt.K - kt.K_average).max()) for _, kt, _ in tensors)
    ok = gap <= 1e-6 and all(kt.galerkin_gap <= 1e-6 for _, kt, _ in tensors)
    record(4, ok, f"max |K_grad - K_avg| = {gap:.1e} over {len(tensors)} geometries")
    assert ok


def test_criterion_05_manufactured_darcy():
    def q(x):
        return np.sin(PI * x[..., 0]) * np.sin(PI * x[..., 1])

    # -div grad q = 2 pi^2 q and div v = -dt_theta
    data = MacroData(dt_theta=lambda t, x: -2 * PI ** 2 * q(x))
    start = time.perf_counter()
    grids, errs = (16, 32, 64), []
    for n in grids:
        fld = solve_darcy(build_macro_mesh(MacroDomain.unit_square(), n), data, constant_tensor(np.eye(2)))
        errs.append(l2_error(fld, q))
    elapsed = time.perf_counter() - start
    slope = -np.polyfit(np.log(grids), np.log(errs), 1)[0]
    ok = slope >= 1.9 and elapsed <= 30
    record(5, ok, f"L2 errors {', '.join(f'{e:.2e}' for e in errs)} slope={slope:.3f} time={elapsed:.1f}s")
    assert ok


def test_criterion_06_mass_balance():
    data = MacroData(dt_theta=lambda t, x: np.full(np.shape(x)[:-1], -0.1))
    reports = {}
    for n in (16, 32, 64):
        fld = solve_darcy(build_macro_mesh(MacroDomain.unit_square(), n), data, constant_tensor(np.eye(2)))
        reports[n] = mass_balance_report(fld)
    rel = abs(reports[64].boundary_outflux - 0.1) / 0.1
    defects = [reports[n].defect for n in (16, 32, 64)]
    ok = rel <= 0.02 and defects[0] > defects[1] > defects[2]
    record(6, ok, f"outflux(64)={reports[64].boundary_outflux:.6f} rel.err={rel:.2e} "
                  f"defects {', '.join(f'{d:.2e}' for d in defects)}")
    assert ok


def test_criterion_07_pressure_strong_convergence(converge_run):
    code, out, elapsed = converge_run
    rows = read_rows(out / "errors.csv")
    errs = [r["pressure_L1.5"] for r in sorted(rows, key=lambda r: -r["eps"])]
    ok = code == 0 and all(b < a for a, b in zip(errs, errs[1:])) and elapsed <= 600
    record(7, ok, f"L1.5 errors {', '.join(f'{e:.4e}' for e in errs)} time={elapsed:.0f}s exit={code}")
    assert ok


def test_criterion_08_weak_two_scale_residuals(converge_run):
    rows = sorted(read_rows(converge_run[1] / "errors.csv"), key=lambda r: -r["eps"])
    weak = [r["weak_residual_max"] for r in rows]
    ok = weak[-1] < weak[0]
    record(8, ok, f"dictionary residual max {', '.join(f'{w:.3e}' for w in weak)}")
    assert ok


def test_criterion_09_apriori_bound(converge_run):
    rows = read_rows(converge_run[1] / "dns_summary.csv")
    a = [r["apriori"] for r in rows]
    ratio = max(a) / min(a)
    ok = ratio <= 3.0
    record(9, ok, f"a-priori quantity {', '.join(f'{v:.4f}' for v in a)} max/min={ratio:.3f}")
    assert ok


KORN = """
[geometry]
family = "radial"
theta = "0.7"

[domain]
ladder = ["1/4", "1/8", "1/16"]
m = 16

[run]
korn = true
piola_grids = [32, 64]
"""


def test_criterion_10_korn_poincare_uniformity(tmp_path):
    code, out, elapsed = cli(tmp_path, "diag", KORN, "korn")
    rows = read_rows(out / "korn.csv")
    alphas = [r["alpha"] for r in rows]
    ratios = np.array([r["C_over_eps"] for r in rows])
    variation = max(alphas) / min(alphas)
    spread = (ratios.max() - ratios.min()) / ratios.mean()
    ok = code == 0 and min(alphas) > 0 and variation <= 2.0 and spread <= 0.05 and elapsed <= 180
    record(10, ok, f"alpha {', '.join(f'{a:.4f}' for a in alphas)} variation={variation:.3f} "
                   f"C/eps spread={spread:.1e} time={elapsed:.0f}s")
    assert ok


PIOLA = """
[geometry]
family = "radial"
theta = "0.7 - 0.05*t"

[run]
times = [0.0, 0.5]
piola_grids = [32, 64, 128]
"""


def test_criterion_11_piola_residual_rate(tmp_path):
    code, out, _ = cli(tmp_path, "diag", PIOLA, "piola")
    rows = read_rows(out / "piola.csv")
    details, ok = [], code == 0
    for t in sorted({r["t"] for r in rows}):
        sel = sorted((r for r in rows if r["t"] == t), key=lambda r: r["n"])
        n = [r["n"] for r in sel]
        res = [r["piola_residual"] for r in sel]
        rate = -fit_rate(n, res)
        pair = [math.log2(a / b) for a, b in zip(res, res[1:])]
        # second order: fitted rate near 2 and the pairwise rate approaching 2 under refinement
        ok &= abs(rate - 2.0) <= 0.2 and abs(pair[-1] - 2.0) < abs(pair[0] - 2.0)
        details.append(f"t={t:g} rate={rate:.3f} pairwise {', '.join(f'{p:.3f}' for p in pair)}")
    record(11, ok, "; ".join(details))
    assert ok


SMALL = """
[geometry]
family = "radial"
theta = "0.72 - 0.05*t"
cell_n = 32

[data]
f = ["1", "sin(pi*x1)"]

[domain]
ladder = ["1/2", "1/4", "1/8"]
m = 16
macro_n = 16
"""


def test_criterion_12_determinism(tmp_path):
    _, a, _ = cli(tmp_path, "converge", SMALL, "first")
    _, b, _ = cli(tmp_path, "converge", SMALL, "second", threads=2)
    names = sorted(p.name for p in a.glob("*.csv"))
    same = [n for n in names if (a / n).read_bytes() == (b / n).read_bytes()]
    ok = len(names) >= 3 and same == names
    record(12, ok, f"{len(same)}/{len(names)} CSVs byte-identical ({', '.join(names)}); "
                   f"second run used 2 threads")
    assert ok
