"""Experiment orchestration: preflight checks, runs, reports, plot data.

Each experiment produces an :class:`ExperimentReport` holding the scenario
echo, the hypothesis-check table, one entry per solver run (keyed by run id
and seed), and derived tables.  ``report.json`` is deterministic for a fixed
config and seed except for the ``created_at`` stamp.  Exit-code contract of
:func:`run`: 0 success, 2 hypothesis-check failure without force_run,
3 solver non-convergence.
"""

from __future__ import annotations

import datetime
import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioConfig, parse_expression
from .constitutive import check_growth, check_strong_monotonicity
from .errors import NonConvergenceError, ParameterError, SmallnessViolationError
from .fem import assemble, build_space, estimate_trace_norm, evaluate_force
from .mesh import generate_rectangle
from .potentials import (SlipModel, estimate_relaxed_monotonicity, verify_growth,
                         verify_weight_bounds)
from .qvhi_solver import (HypothesisConstants, QVHIState, check_smallness,
                          dependence_study, initial_state, solve_qvhi)

EXIT_OK = 0
EXIT_HYPOTHESIS = 2
EXIT_NONCONVERGENCE = 3


@dataclass
class ExperimentReport:
    scenario: dict
    experiment: str
    hypothesis: dict
    runs: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    created_at: str = ""

    def to_dict(self):
        return {
            "scenario": self.scenario,
            "experiment": self.experiment,
            "hypothesis": self.hypothesis,
            "runs": self.runs,
            "tables": self.tables,
            "created_at": self.created_at,
        }

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


def preflight(config: ScenarioConfig, problem=None):
    """Verify hypotheses and collect every constant before any solve."""
    if problem is None:
        problem = config.build_problem()
    seed = config.solver.seed
    law = problem.law
    slip = problem.slip

    mono = check_strong_monotonicity(law, seed=seed)
    growth_law = check_growth(law, seed=seed)
    growth_slip = verify_growth(slip.potential, n_samples=2000, seed=seed)
    weight_ok = verify_weight_bounds(slip.weight, seed=seed)
    trace = estimate_trace_norm(problem, seed=seed)
    m_j = slip.m_j
    if m_j is None:
        m_j = estimate_relaxed_monotonicity(slip.potential, seed=seed)
    hc = HypothesisConstants.stokes(problem, trace_norm=trace, m_j=m_j, seed=seed)
    small = check_smallness(hc)

    notes = []
    if problem.constraints.k_kind == "dissipation_sq":
        notes.append("dissipation_sq is degree-2 homogeneous; the scaling "
                     "recovery construction does not apply to it")
    table = {
        "m_T_declared": law.mT,
        "m_T_sampled": mono.stat,
        "m_A_used": problem.m_A,
        "trace_norm": trace,
        "d1": hc.d1,
        "d2": hc.d2,
        "d3": hc.d3,
        "b0_l2": hc.b0_l2,
        "b1": hc.b1,
        "h0": hc.h0,
        "h1": hc.h1,
        "c_phi": hc.c_phi,
        "m_j": m_j,
        "g_yield": problem.g_yield,
        "gamma1_length": problem.gamma1_length,
        "domain_area": problem.domain_area,
        "norm_f_dual": problem.dual_norm(problem.load_f1),
        "checks": {
            "law_monotonicity": {"passed": mono.passed, "stat": mono.stat},
            "law_growth": {"passed": growth_law.passed, "stat": growth_law.stat},
            "slip_growth": {"passed": growth_slip.passed, "stat": growth_slip.stat},
            "weight_bounds": {"passed": weight_ok.passed, "stat": weight_ok.stat},
        },
        "smallness": small.margins,
        "notes": notes,
        "seed": seed,
    }
    return _jsonable(table), hc, problem


def format_preflight(table):
    lines = [f"{'constant':18s} value"]
    for key in ("m_T_declared", "m_T_sampled", "m_A_used", "trace_norm", "d1", "d2",
                "d3", "c_phi", "m_j", "g_yield", "gamma1_length", "norm_f_dual"):
        lines.append(f"{key:18s} {table[key]}")
    for name, chk in table["checks"].items():
        state = "pass" if chk["passed"] else "FAIL"
        lines.append(f"check {name:24s} [{state}] stat={chk['stat']:.6g}")
    for name, m in table["smallness"].items():
        state = "ok" if m["ok"] else "VIOLATED"
        ratio = m["ratio"]
        ratio_s = "nan" if ratio is None else f"{ratio:.6g}"
        lines.append(f"smallness {name:12s} lhs={m['lhs']} rhs={m['rhs']} "
                     f"ratio={ratio_s} [{state}]")
    for note in table["notes"]:
        lines.append(f"note: {note}")
    return "\n".join(lines)


def _solver_opts(config: ScenarioConfig, force_run=False):
    s = config.solver
    return dict(outer_tol=s.outer_tol, inner_tol=s.inner_tol, max_outer=s.max_outer,
                damping=s.damping, seed=s.seed,
                force_run=force_run or s.force_run)


def _run_entry(run_id, label, report, seed):
    entry = {"run_id": run_id, "label": label, "seed": seed}
    entry.update(_jsonable(report.summary()))
    return entry


def _fit_slope(xs, ys):
    xs = np.log(np.asarray(xs, dtype=float))
    ys = np.log(np.asarray(ys, dtype=float))
    return float(np.polyfit(xs, ys, 1)[0])


# -- experiment kinds ----------------------------------------------------

def exp_single(config, problem, hc, force_run):
    rep = solve_qvhi(problem, hc, **_solver_opts(config, force_run))
    runs = [_run_entry(0, "solve", rep, config.solver.seed)]
    rows = [[0, r["iteration"], r["rho"]] for r in rep.rows]
    tables = {"residual_vs_iteration": {"columns": ["run_id", "iteration", "rho"],
                                        "rows": rows}}
    return runs, tables, [("field", problem, rep.u)]


def manufactured_fields(mu0):
    """Exact velocity and matching body force on the unit square.

    Stream function (x(1-x)y(1-y))^2: the velocity vanishes with its normal
    derivative on the whole boundary and is divergence-free by construction.
    """
    import sympy

    x, y = sympy.symbols("x y")
    psi = (x * (1 - x) * y * (1 - y)) ** 2
    u_sym = (sympy.diff(psi, y), -sympy.diff(psi, x))
    f_sym = tuple(-mu0 / 2 * (sympy.diff(c, x, 2) + sympy.diff(c, y, 2)) for c in u_sym)
    u_fn = sympy.lambdify((x, y), u_sym, "numpy")
    f_fn = sympy.lambdify((x, y), f_sym, "numpy")

    def wrap(fn):
        def fld(pts, _fn=fn):
            fx, fy = _fn(pts[:, 0], pts[:, 1])
            n = len(pts)
            return np.column_stack([np.broadcast_to(fx, n), np.broadcast_to(fy, n)])
        return fld

    return wrap(u_fn), wrap(f_fn)


def exp_manufactured(config, problem, hc, force_run):
    """Convergence order of the L2 velocity error on the unit square.

    Builds its own all-Dirichlet meshes (the configured mesh is not used);
    requires the Newtonian law and zero yield stress so the exact solution is
    available in closed form.
    """
    if config.law.kind != "newtonian":
        raise ParameterError("manufactured experiment needs the newtonian law")
    if config.g_yield != 0.0:
        raise ParameterError("manufactured experiment needs g_yield = 0")
    levels = config.experiment_params.get("levels", [4, 8, 16])
    mu0 = config.law.mu0
    u_exact, f_field = manufactured_fields(mu0)

    runs, rows = [], []
    exports = []
    for i, n in enumerate(levels):
        mesh = generate_rectangle(1.0, 1.0, int(n), int(n), frozenset())
        space = build_space(mesh)
        prob = assemble(space, problem.law, f_field, SlipModel.frictionless(), 0.0,
                        problem.constraints, seed=config.solver.seed)
        hc_n = HypothesisConstants.stokes(prob, trace_norm=0.0, m_j=0.0)
        rep = solve_qvhi(prob, hc_n, **_solver_opts(config, force_run))
        err = prob.l2_error(rep.u, u_exact)
        runs.append(_run_entry(i, f"n={n}", rep, config.solver.seed))
        rows.append([1.0 / n, err])
        exports.append((f"field_n{n}", prob, rep.u))
    slope = _fit_slope([r[0] for r in rows], [r[1] for r in rows])
    orders = [math.log2(rows[i][1] / rows[i + 1][1]) for i in range(len(rows) - 1)]
    tables = {
        "error_vs_h": {"columns": ["h", "l2_error", "fitted_slope"],
                       "rows": [r + [slope] for r in rows]},
        "pairwise_orders": {"columns": ["step", "order"],
                            "rows": [[i, o] for i, o in enumerate(orders)]},
    }
    return runs, tables, exports[-1:]


def exp_newtonian_limit(config, problem, hc, force_run):
    """Yield-stress sweep g_n = g0 * 2^-n against the g = 0 limit solve."""
    params = config.experiment_params
    n_levels = int(params.get("n_levels", 8))
    g0 = float(params.get("g0", 1.0))
    family = [(f"g={g0}*2^-{n}", problem.with_yield(g0 * 2.0 ** (-n)))
              for n in range(n_levels + 1)]
    limit = problem.with_yield(0.0)
    results, limit_rep = dependence_study(family, limit, hc,
                                          tol=config.solver.outer_tol,
                                          **{k: v for k, v in _solver_opts(config, force_run).items()
                                             if k != "outer_tol"})
    runs = [_run_entry(0, "limit g=0", limit_rep, config.solver.seed)]
    rows = []
    for n, r in enumerate(results):
        rows.append([n, g0 * 2.0 ** (-n), r["deviation"]])
        runs.append({"run_id": n + 1, "label": r["label"], "seed": config.solver.seed,
                     "deviation": r["deviation"], "iterations": r["iterations"],
                     "converged": r["converged"], "norm_u_V": r["norm_u_V"]})
    devs = [r[2] for r in rows]
    tables = {
        "deviation_vs_n": {"columns": ["n", "g", "deviation"], "rows": rows},
        "limit_summary": {"columns": ["norm_u_V", "monotone_non_increasing"],
                          "rows": [[limit_rep.rows[-1]["norm_u_V"],
                                    bool(np.all(np.diff(devs) <= 1e-10))]]},
    }
    return runs, tables, [("field_limit", problem, limit_rep.u)]


def exp_f_perturbation(config, problem, hc, force_run):
    """Load-continuity probe: deviations under delta-f of shrinking magnitude."""
    params = config.experiment_params
    mags = [float(m) for m in params.get("magnitudes", [1e-1, 1e-2, 1e-3])]
    dfx = parse_expression(params.get("direction", ["sin(pi*y)", "0"])[0])
    dfy = parse_expression(params.get("direction", ["sin(pi*y)", "0"])[1])

    def direction(pts):
        return np.column_stack([dfx(pts[:, 0], pts[:, 1]), dfy(pts[:, 0], pts[:, 1])])

    # normalize the direction in L2(Omega) using the problem quadrature
    dvals = direction(problem._qp.reshape(-1, 2)).reshape(problem._qp.shape)
    nrm = math.sqrt(float(np.sum(problem._qw * np.sum(dvals * dvals, axis=-1))))
    if nrm == 0:
        raise ParameterError("perturbation direction is identically zero")
    base_force = problem.body_force

    def perturbed(mag):
        def force(pts, _m=mag / nrm):
            return evaluate_force(base_force, pts) + _m * direction(pts)
        return force

    family = [(f"|df|={m}", problem.with_body_force(perturbed(m))) for m in mags]
    results, base_rep = dependence_study(family, problem, hc,
                                         tol=config.solver.outer_tol,
                                         **{k: v for k, v in _solver_opts(config, force_run).items()
                                            if k != "outer_tol"})
    runs = [_run_entry(0, "base", base_rep, config.solver.seed)]
    rows = []
    for i, (m, r) in enumerate(zip(mags, results)):
        rows.append([m, r["deviation"], r["deviation"] / m])
        runs.append({"run_id": i + 1, "label": r["label"], "seed": config.solver.seed,
                     "deviation": r["deviation"], "iterations": r["iterations"],
                     "converged": r["converged"]})
    slope = _fit_slope(mags, [r[1] for r in rows]) if len(rows) >= 2 else float("nan")
    tables = {"deviation_vs_magnitude": {
        "columns": ["magnitude", "deviation", "deviation_over_magnitude"],
        "rows": rows},
        "linearity": {"columns": ["fitted_slope"], "rows": [[slope]]}}
    return runs, tables, [("field_base", problem, base_rep.u)]


def exp_uniqueness(config, problem, hc, force_run):
    """Multi-start agreement in the uniqueness regime (convex slip, fixed set)."""
    opts = _solver_opts(config, force_run)
    rng = np.random.default_rng(config.solver.seed)
    starts = [("zero", initial_state(problem))]
    w2 = rng.normal(size=(problem.n_bq, 2))
    if problem.n_bq:
        xn = problem.x_norm(w2)
        if xn > 0:
            w2 *= 0.5 * max(hc.d1, 0.1) / xn
    starts.append(("w-random", QVHIState(v=np.zeros(problem.n_free), w=w2)))
    v3 = problem.project_divfree(rng.normal(size=problem.n_free))
    nv3 = problem.norm_V(v3)
    if nv3 > 0:
        v3 *= 0.5 / nv3
    w3 = -0.5 * w2
    starts.append(("vw-random", QVHIState(v=v3, w=w3)))

    runs, sols = [], []
    for i, (label, st) in enumerate(starts):
        rep = solve_qvhi(problem, hc, start=st, **opts)
        runs.append(_run_entry(i, label, rep, config.solver.seed))
        sols.append(rep.u)
    rows = []
    for i in range(len(sols)):
        for j in range(i + 1, len(sols)):
            rows.append([i, j, problem.norm_V(sols[i] - sols[j])])
    tables = {"pairwise_differences": {"columns": ["run_i", "run_j", "diff_V"],
                                       "rows": rows}}
    return runs, tables, [("field_start0", problem, sols[0])]


_EXPERIMENTS = {
    "single": exp_single,
    "manufactured": exp_manufactured,
    "newtonian_limit": exp_newtonian_limit,
    "f_perturbation": exp_f_perturbation,
    "uniqueness": exp_uniqueness,
}


def emit_plotdata(report: ExperimentReport, outdir):
    """One CSV per derived table; column naming documented in the README."""
    written = []
    if not report.runs:
        print("warning: empty report, no plot data written", file=sys.stderr)
        return written
    for name, table in report.tables.items():
        path = os.path.join(outdir, f"{name}.csv")
        with open(path, "w") as fh:
            fh.write(",".join(table["columns"]) + "\n")
            for row in table["rows"]:
                fh.write(",".join(_csv_cell(v) for v in row) + "\n")
        written.append(path)
    return written


def _csv_cell(v):
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def run(config: ScenarioConfig, outdir, force_run=False, seed=None):
    """Execute the configured experiment and write report + tables + fields."""
    config.validate()
    if seed is not None:
        config.solver.seed = int(seed)
    os.makedirs(outdir, exist_ok=True)

    table, hc, problem = preflight(config)
    report = ExperimentReport(
        scenario=config.to_dict(),
        experiment=config.experiment,
        hypothesis=table,
        created_at=datetime.datetime.now().isoformat(),
    )

    small_ok = table["smallness"]["stokes"]["ok"]
    if not small_ok and not (force_run or config.solver.force_run):
        m = table["smallness"]["stokes"]
        print(f"hypothesis check failed: stokes smallness lhs={m['lhs']} "
              f"rhs={m['rhs']} ratio={m['ratio']}", file=sys.stderr)
        report.write(os.path.join(outdir, "report.json"))
        return EXIT_HYPOTHESIS

    try:
        runs, tables, exports = _EXPERIMENTS[config.experiment](
            config, problem, hc, force_run)
    except NonConvergenceError as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        report.tables["failure"] = {"columns": ["message"], "rows": [[str(exc)]]}
        report.write(os.path.join(outdir, "report.json"))
        return EXIT_NONCONVERGENCE
    except SmallnessViolationError as exc:
        print(f"hypothesis check failed during run: {exc}", file=sys.stderr)
        report.write(os.path.join(outdir, "report.json"))
        return EXIT_HYPOTHESIS

    report.runs = _jsonable(runs)
    report.tables = _jsonable(tables)
    report.write(os.path.join(outdir, "report.json"))
    emit_plotdata(report, outdir)
    for name, prob, u in exports:
        prob.export_vtk(u, os.path.join(outdir, f"{name}.vtk"), title=name)
    return EXIT_OK
