"""Subcommand pipelines; each returns an exit code and records its artifacts."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from ..cellstokes import (PermeabilityTable, default_thetas, permeability_from_gradients,
                          physical_cell, solve_cell_problems, tabulate_permeability)
from ..dns import (build_perforated_mesh, eps_coefficients, extend_solution, resample_physical,
                   solve_eps_problem)
from ..errors import ConfigError, DegenerateFit, EvoDarcyError
from ..geometry import (FAMILIES, EpsDeformation, FamilyDeformation, MacroDomain, PorosityField,
                        check_piola, dt_pore_volume, identity_deformation, pore_volume)
from ..io import sha256_file, write_csv
from ..macrodarcy import (MacroData, build_macro_mesh, constant_tensor, l2_error,
                          mass_balance_report, solve_darcy, table_tensor, write_mass_ledger)
from ..twoscale import (convergence_verdict, fit_rate, korn_constant, poincare_ratio,
                        reconstruct_limit, two_scale_errors, write_error_table)
from .expr import Expression, VectorExpression, gradient

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_MASS, EXIT_FAIL = 0, 2, 3, 4, 5


@dataclass
class Run:
    """Output directory, worker count and the list of written artifacts."""

    out: Path
    threads: int = 1
    artifacts: list = field(default_factory=list)

    def path(self, name):
        p = self.out / name
        self.artifacts.append(p)
        return p

    def map(self, fn, items):
        items = list(items)
        if self.threads <= 1 or len(items) <= 1:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    def write_manifest(self):
        lines = [f"{sha256_file(p)}  {p.relative_to(self.out).as_posix()}"
                 for p in sorted(set(self.artifacts))]
        manifest = self.out / "manifest.txt"
        manifest.write_text("\n".join(lines) + "\n")
        return manifest


# ---------------------------------------------------------------------------
# config to model objects
# ---------------------------------------------------------------------------

def family_of(cfg):
    return FAMILIES[cfg["geometry"]["family"]]()


def domain_of(cfg):
    d = cfg["domain"]
    ladder = [Fraction(e) for e in d["ladder"]]
    if d["shape"] == "unit_square":
        return MacroDomain.unit_square(ladder)
    if d["shape"] == "l_shape":
        return MacroDomain.l_shape(ladder)
    boxes = tuple(tuple(tuple(Fraction(c) for c in corner) for corner in box) for box in d["cuboids"])
    return MacroDomain(boxes, tuple(ladder))


def porosity_of(cfg, family):
    src = cfg["geometry"]["theta"]
    if not src:
        return PorosityField.constant(family.reference_theta)
    e = Expression(src)
    return PorosityField(e, e.derivative("t"), gradient(e))


def theta_is_uniform(cfg):
    src = cfg["geometry"]["theta"]
    if not src:
        return True
    e = Expression(src)
    return all(d.is_constant and float(d(0.0, np.zeros(2))) == 0.0
               for d in (e.derivative("x1"), e.derivative("x2")))


def data_of(cfg, porosity):
    d = cfg["data"]
    p_b = Expression(d["p_b"])
    return MacroData(f=VectorExpression(d["f"]), p_b=p_b, grad_p_b=gradient(p_b), nu=float(d["nu"]),
                     dt_theta=porosity.dt_theta)


def _identity(cfg):
    return cfg["geometry"]["deformation"] == "identity"


def _static_geometry(cfg):
    if _identity(cfg) and cfg["geometry"]["theta"]:
        raise ConfigError("a prescribed porosity needs the family deformation", "geometry.theta")


def _eps_of(cfg, domain):
    if cfg["run"]["eps"]:
        return Fraction(cfg["run"]["eps"])
    return max(domain.epsilon_ladder)


# ---------------------------------------------------------------------------
# cell and table
# ---------------------------------------------------------------------------

TABLE_HEADER = ["theta", "K11", "K12", "K21", "K22", "min_eigenvalue", "grid_n"]


def _cell_tensor(cfg, family, theta, t=0.0):
    g = cfg["geometry"]
    n = g["cell_n"]
    if _identity(cfg):
        deformation = FamilyDeformation(family, PorosityField.constant(theta), c_J=g["c_J"])
        cell = physical_cell(deformation, t, np.zeros(2), n)
        micro = identity_deformation(lambda y: np.zeros(np.shape(y)[:-1]))
    else:
        cell = family.reference_cell(n)
        micro = FamilyDeformation(family, PorosityField.constant(theta), c_J=g["c_J"])
    sol = solve_cell_problems(cell, micro, t, (0.0, 0.0), cfg["run"]["tol"])
    return sol, permeability_from_gradients(sol)


def run_cell(cfg, run: Run):
    family = family_of(cfg)
    thetas = sorted(set(cfg["geometry"]["thetas"] or [family.reference_theta]))
    family.check_theta(np.asarray(thetas))

    def one(theta):
        try:
            return _cell_tensor(cfg, family, theta)
        except EvoDarcyError as exc:
            exc.args = (f"porosity {theta:g}: {exc}",) + exc.args[1:]
            raise

    results = run.map(one, thetas)
    if cfg["run"]["vtk"]:
        for k, (sol, _) in enumerate(results):
            for i, s in enumerate(sol.solutions):
                s.to_vtk(run.path(f"cell_{k:03d}_e{i + 1}.vtk"))
    table = PermeabilityTable(thetas, [kt.K for _, kt in results],
                              [kt.min_eigenvalue for _, kt in results], cfg["geometry"]["cell_n"],
                              family.name)
    table.to_csv(run.path("permeability.csv"))
    rows = [(th, kt.asymmetry, kt.galerkin_gap) for th, (_, kt) in zip(thetas, results)]
    write_csv(run.path("cell_checks.csv"), ["theta", "asymmetry", "galerkin_gap"], rows)
    return EXIT_OK


def _table(cfg, family):
    g = cfg["geometry"]
    return tabulate_permeability(family, default_thetas(family, g["table_count"]), g["cell_n"],
                                 cfg["run"]["tol"], c_J=g["c_J"])


def run_table(cfg, run: Run):
    _table(cfg, family_of(cfg)).to_csv(run.path("permeability.csv"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# darcy
# ---------------------------------------------------------------------------

def run_darcy(cfg, run: Run):
    family = family_of(cfg)
    porosity = porosity_of(cfg, family)
    data = data_of(cfg, porosity)
    mesh = build_macro_mesh(domain_of(cfg), cfg["domain"]["macro_n"])
    times = cfg["run"]["times"]
    if cfg["data"]["permeability"] == "constant":
        K = np.asarray(cfg["data"]["K"], dtype=float)

        def K_at(t):
            return constant_tensor(K)
    else:
        nodes = mesh.grid.q1_coordinates().reshape(-1, 2)[mesh.active]
        for t in times:
            family.check_theta(porosity.theta(t, nodes))
        table = _table(cfg, family)
        table.to_csv(run.path("permeability.csv"))

        def K_at(t):
            return table_tensor(table, porosity.theta, t)

    exact = Expression(cfg["data"]["q_exact"]) if cfg["data"]["q_exact"] else None

    def snapshot(t):
        fld = solve_darcy(mesh, data, K_at(t), t, cfg["run"]["tol"])
        return fld, mass_balance_report(fld)

    results = run.map(snapshot, times)
    rows, violations = [], []
    mass_tol = cfg["run"]["mass_tol"]
    for k, (t, (fld, mb)) in enumerate(zip(times, results)):
        if cfg["run"]["vtk"]:
            fld.to_vtk(run.path(f"darcy_{k:03d}.vtk"), porosity.theta)
        row = [t, mb.boundary_outflux, mb.volume_source, mb.defect]
        if exact is not None:
            row.append(l2_error(fld, lambda pts, t=t: exact(t, pts)))
        rows.append(row)
        allowed = mass_tol * max(abs(mb.volume_source), abs(mb.boundary_outflux))
        if mb.defect > allowed and mb.defect != 0.0:
            violations.append((t, mb.defect, allowed))
    if exact is None:
        write_mass_ledger(run.path("mass_balance.csv"), rows)
    else:
        write_csv(run.path("mass_balance.csv"), ["t", "outflux", "source", "defect", "l2_error"], rows)
    for t, defect, allowed in violations:
        log.error("mass balance violated at t=%g: defect %.6e exceeds %.6e", t, defect, allowed)
    return EXIT_MASS if violations else EXIT_OK


# ---------------------------------------------------------------------------
# direct simulation
# ---------------------------------------------------------------------------

DNS_HEADER = ["t", "eps", "w_L2", "grad_w_L2", "q_L2", "apriori", "iterations"]


def _eps_deformation(cfg, family, porosity, eps):
    if _identity(cfg):
        return None
    return EpsDeformation(family, porosity, float(eps), cfg["geometry"]["c_J"])


def _dns_row(sol):
    w, gw, q = sol.norms()
    return [sol.t, float(sol.pmesh.eps), w, gw, q, sol.apriori_quantity(), sol.stokes.iterations]


def run_dns(cfg, run: Run):
    _static_geometry(cfg)
    family = family_of(cfg)
    porosity = porosity_of(cfg, family)
    data = data_of(cfg, porosity)
    domain = domain_of(cfg)
    eps = _eps_of(cfg, domain)
    m = cfg["domain"]["m"]
    pm = build_perforated_mesh(domain, family.reference_cell(m), eps, m)
    deformation = _eps_deformation(cfg, family, porosity, eps)

    def snapshot(t):
        sol = solve_eps_problem(pm, deformation, data, t, cfg["run"]["tol"])
        extend_solution(sol)
        return sol

    sols = run.map(snapshot, cfg["run"]["times"])
    for k, sol in enumerate(sols):
        sol.to_csv(run.path(f"dns_{k:03d}.csv"))
        if cfg["run"]["vtk"]:
            resample_physical(sol, cfg["run"]["resample"], run.path(f"dns_{k:03d}.vtk"))
    write_csv(run.path("dns_summary.csv"), DNS_HEADER, [_dns_row(s) for s in sols])
    return EXIT_OK


# ---------------------------------------------------------------------------
# convergence study
# ---------------------------------------------------------------------------

def run_converge(cfg, run: Run):
    _static_geometry(cfg)
    if not theta_is_uniform(cfg):
        raise ConfigError("a convergence study needs a porosity independent of x", "geometry.theta")
    family = family_of(cfg)
    porosity = porosity_of(cfg, family)
    data = data_of(cfg, porosity)
    domain = domain_of(cfg)
    t = cfg["run"]["times"][0]
    tol = cfg["run"]["tol"]
    theta0 = float(porosity.theta(t, np.zeros(2)))
    family.check_theta(np.asarray(theta0))

    g = cfg["geometry"]
    if _identity(cfg):
        micro = identity_deformation(family.reference_levelset)
        cell_map = None
    else:
        micro = FamilyDeformation(family, PorosityField.constant(theta0), c_J=g["c_J"])

        def cell_map(_, y):
            return family.psi(theta0, y)
    csol = solve_cell_problems(family.reference_cell(g["cell_n"]), micro, t, (0.0, 0.0), tol)
    K = permeability_from_gradients(csol)
    macro = solve_darcy(build_macro_mesh(domain, cfg["domain"]["macro_n"]), data,
                        constant_tensor(K.K), t, tol)
    limit = reconstruct_limit(csol, macro, cell_map=cell_map)
    m = cfg["domain"]["m"]
    ladder = sorted(domain.epsilon_ladder, reverse=True)

    def entry(eps):
        pm = build_perforated_mesh(domain, family.reference_cell(m), eps, m)
        deformation = _eps_deformation(cfg, family, porosity, eps)
        sol = solve_eps_problem(pm, deformation, data, t, tol)
        ext = extend_solution(sol)
        row = two_scale_errors([(sol, ext)], limit, unfold_points=cfg["run"]["unfold_points"])[0]
        if cfg["run"]["korn"]:
            row.alpha = korn_constant(pm, eps_coefficients(pm, deformation, t, data.nu))
            row.poincare = poincare_ratio(pm)
        return row, _dns_row(sol)

    results = run.map(entry, ladder)
    rows = [r for r, _ in results]
    write_error_table(run.path("errors.csv"), rows)
    write_csv(run.path("dns_summary.csv"), DNS_HEADER, [d for _, d in results])
    write_csv(run.path("permeability.csv"), TABLE_HEADER,
              [(theta0, *K.K.ravel(), K.min_eigenvalue, g["cell_n"])])
    passed, message = convergence_verdict(rows)
    lines = [f"verdict: {'PASS' if passed else 'FAIL'}", message]
    for power in (1.5, 2.0):
        try:
            rate = fit_rate([r.eps for r in rows], [r.pressure_lp[power] for r in rows])
            lines.append(f"pressure L{power:g} fitted rate: {rate:.4f}")
        except DegenerateFit as exc:
            lines.append(f"pressure L{power:g} fitted rate: unavailable ({exc})")
    run.path("report.txt").write_text("\n".join(lines) + "\n")
    (log.info if passed else log.error)("convergence verdict: %s", message)
    return EXIT_OK if passed else EXIT_FAIL


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def run_diag(cfg, run: Run):
    family = family_of(cfg)
    porosity = porosity_of(cfg, family)
    domain = domain_of(cfg)
    g = cfg["geometry"]
    (x0, y0), (x1, y1) = domain.bounding_box
    x = np.array([float(x0 + x1) / 2, float(y0 + y1) / 2])
    deformation = FamilyDeformation(family, porosity, c_J=g["c_J"])
    times = cfg["run"]["times"]

    grids = sorted(cfg["run"]["piola_grids"])
    rows = []
    for t in times:
        for n in grids:
            rows.append((t, n, *check_piola(deformation, t, x, n)))
    write_csv(run.path("piola.csv"), ["t", "n", "piola_residual", "cofactor_divergence"], rows)

    lines = []
    for t in times:
        res = [r[2] for r in rows if r[0] == t]
        try:
            rate = -fit_rate(grids, res)
            lines.append(f"t={t:g}: piola residual rate {rate:.4f}")
        except DegenerateFit as exc:
            lines.append(f"t={t:g}: piola residual rate unavailable ({exc})")

    prow = []
    for t in times:
        theta = float(porosity.theta(t, x))
        dtheta = float(porosity.dt_theta(t, x))
        prow.append((t, theta, pore_volume(deformation, t, x, g["cell_n"]), dtheta,
                     dt_pore_volume(deformation, t, x, n=g["cell_n"])))
    write_csv(run.path("porosity.csv"), ["t", "theta", "pore_volume", "dt_theta", "dt_pore_volume"],
              prow)

    if cfg["run"]["korn"]:
        _static_geometry(cfg)
        m = cfg["domain"]["m"]
        ladder = sorted(domain.epsilon_ladder, reverse=True)
        t = times[0]

        def korn(eps):
            pm = build_perforated_mesh(domain, family.reference_cell(m), eps, m)
            de = _eps_deformation(cfg, family, porosity, eps)
            return (float(eps), korn_constant(pm, eps_coefficients(pm, de, t, 1.0)),
                    korn_constant(pm), poincare_ratio(pm))

        krows = run.map(korn, ladder)
        write_csv(run.path("korn.csv"), ["eps", "alpha", "alpha_identity", "C_over_eps"], krows)
        alphas = [r[1] for r in krows]
        ratios = np.array([r[3] for r in krows])
        lines.append(f"korn alpha variation {max(alphas) / min(alphas):.4f}")
        lines.append(f"poincare C/eps spread {float((ratios.max() - ratios.min()) / ratios.mean()):.4e}")
    run.path("diag.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK


COMMANDS = {
    "cell": run_cell,
    "table": run_table,
    "darcy": run_darcy,
    "dns": run_dns,
    "converge": run_converge,
    "diag": run_diag,
}
