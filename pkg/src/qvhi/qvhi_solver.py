"""Outer fixed-point iteration for the quasi variational-hemivariational flow.

One outer step freezes the constraint anchor v and the boundary selection w,
solves the inner VI with shifted load f1 - M* w on the set {k <= r(v)}, and
then refreshes the selection pointwise on the slip wall:
w+(x) = h(u_tau(x)) * zeta(x) with zeta(x) the minimal-norm subgradient of
the slip potential at u_tau(x).  The iteration stops when the combined
residual |u - v|_V + |w+ - w|_X falls below the outer tolerance.

Smallness checkers guard the run: the abstract condition
(d2 + d3) |M|^2 < m_A, its flow form sqrt(2) b1 h1 |gamma|^2 < m_T, and the
uniqueness condition h1 m_j |gamma|^2 < m_T.  When smallness holds, the
iterates are checked against the invariant-box radii (r1, r2) at every
step.  Existence theory does not promise convergence of this iteration, so
non-convergence is surfaced as an explicit error carrying the history.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import (NonConvergenceError, ParameterError, SmallnessViolationError,
                     UndefinedRadiiError, UnsupportedOperation)
from .fem import DiscreteProblem, estimate_trace_norm
from .potentials import estimate_relaxed_monotonicity, subgradient_select
from .vi_solver import VIProblem, solve_vi, vi_certificate


@dataclass(frozen=True)
class HypothesisConstants:
    """Constants entering the smallness conditions and invariant-box radii.

    For the flow instance the mapping is d1 = sqrt(2) h1 |b0|_{L2(Gamma1)},
    d2 = 0, d3 = sqrt(2) h1 b1, m_A = m_T, and norm_M is the tangential
    trace-norm estimate.
    """

    m_A: float
    d1: float = 0.0
    d2: float = 0.0
    d3: float = 0.0
    norm_M: float = 0.0
    c_phi: float = 0.0
    b0_l2: float = 0.0
    b1: float = 0.0
    h0: float = 1.0
    h1: float = 1.0
    m_j: Optional[float] = None
    g_yield: float = 0.0

    def __post_init__(self):
        if self.m_A <= 0:
            raise ParameterError("m_A must be positive")
        for name in ("d1", "d2", "d3", "norm_M", "c_phi", "b0_l2", "b1", "g_yield"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be nonnegative")

    @classmethod
    def stokes(cls, problem: DiscreteProblem, trace_norm=None, m_j=None, seed=0):
        """Constants of an assembled flow problem, trace norm included."""
        slip = problem.slip
        tn = estimate_trace_norm(problem, seed=seed) if trace_norm is None else trace_norm
        b0_l2 = slip.b0 * math.sqrt(problem.gamma1_length)
        if m_j is None:
            m_j = slip.m_j
        if m_j is None:
            m_j = estimate_relaxed_monotonicity(slip.potential, seed=seed)
        return cls(
            m_A=problem.m_A,
            d1=math.sqrt(2.0) * slip.h1 * b0_l2,
            d2=0.0,
            d3=math.sqrt(2.0) * slip.h1 * slip.b1,
            norm_M=tn,
            c_phi=problem.phi_c,
            b0_l2=b0_l2,
            b1=slip.b1,
            h0=slip.h0,
            h1=slip.h1,
            m_j=m_j,
            g_yield=problem.g_yield,
        )


@dataclass(frozen=True)
class SmallnessReport:
    abstract_ok: bool
    stokes_ok: bool
    uniqueness_ok: bool
    margins: dict

    def __str__(self):
        rows = []
        for name, m in self.margins.items():
            state = "ok " if m["ok"] else "VIOLATED"
            rows.append(f"  {name}: lhs={m['lhs']:.6g} rhs={m['rhs']:.6g} "
                        f"ratio={m['ratio']:.6g} [{state}]")
        return "smallness conditions:\n" + "\n".join(rows)


def check_smallness(hc: HypothesisConstants) -> SmallnessReport:
    """Evaluate the three strict inequalities with numeric margins."""
    mm = hc.norm_M * hc.norm_M

    def entry(lhs, rhs):
        return {"lhs": lhs, "rhs": rhs, "ratio": lhs / rhs, "ok": lhs < rhs}

    margins = {
        "abstract": entry((hc.d2 + hc.d3) * mm, hc.m_A),
        "stokes": entry(math.sqrt(2.0) * hc.b1 * hc.h1 * mm, hc.m_A),
    }
    if hc.m_j is None:
        margins["uniqueness"] = {"lhs": float("nan"), "rhs": hc.m_A,
                                 "ratio": float("nan"), "ok": False}
    else:
        margins["uniqueness"] = entry(hc.h1 * hc.m_j * mm, hc.m_A)
    return SmallnessReport(
        abstract_ok=margins["abstract"]["ok"],
        stokes_ok=margins["stokes"]["ok"],
        uniqueness_ok=margins["uniqueness"]["ok"],
        margins=margins,
    )


def invariant_radii(hc: HypothesisConstants, norm_f_minus_A0):
    """Box radii r1 = (C1 + d1 |M|) / (m_A - (d2+d3)|M|^2), r2 = d1 + (d2+d3)|M| r1.

    C1 uses |f - A0| + c_phi; for the shipped laws A0 = 0, so this agrees
    with |A0| + |f| + c_phi.
    """
    denom = hc.m_A - (hc.d2 + hc.d3) * hc.norm_M ** 2
    if denom <= 0:
        raise UndefinedRadiiError(
            f"smallness denominator {denom:.3e} is not positive; radii undefined")
    c1 = norm_f_minus_A0 + hc.c_phi
    r1 = (c1 + hc.d1 * hc.norm_M) / denom
    r2 = hc.d1 + (hc.d2 + hc.d3) * hc.norm_M * r1
    return r1, r2


@dataclass
class QVHIState:
    """Current anchor v, boundary selection w, last inner solution u."""

    v: np.ndarray
    w: np.ndarray                 # (n_bq, 2) values at slip-wall quadrature points
    u: Optional[np.ndarray] = None
    rho: Optional[float] = None
    iteration: int = 0


def initial_state(problem: DiscreteProblem) -> QVHIState:
    return QVHIState(v=np.zeros(problem.n_free), w=np.zeros((problem.n_bq, 2)))


def slip_selection(problem: DiscreteProblem, u):
    """Pointwise selection w+(x) = h(u_tau(x)) zeta(x) on the slip wall."""
    mtau = problem.M_apply(u)
    if len(mtau) == 0:
        return mtau
    pot = problem.slip.potential
    zeta = np.array([subgradient_select(pot, xi) for xi in mtau])
    h = problem.slip.weight(mtau)
    return h[:, None] * zeta


def lambda_step(state: QVHIState, problem: DiscreteProblem, hc: HypothesisConstants,
                inner_tol, damping=1.0, max_inner=400, eps0=None):
    """One application of the outer map; returns (new_state, inner_result, w_plus)."""
    c = problem.eval_r(state.v)
    f_tilde = problem.load_f1 - problem.M_adjoint(state.w)
    vi = VIProblem(problem, f_tilde, problem.phi_spec, c, problem.constraints.k_kind)
    inner = solve_vi(vi, u0=state.u, tol=inner_tol, max_iter=max_inner, eps0=eps0)
    u = inner.u
    w_plus = slip_selection(problem, u)
    rho = problem.norm_V(u - state.v) + problem.x_norm(w_plus - state.w)
    if damping >= 1.0:
        v_new, w_new = u, w_plus
    else:
        v_new = (1.0 - damping) * state.v + damping * u
        w_new = (1.0 - damping) * state.w + damping * w_plus
    new_state = QVHIState(v=v_new, w=w_new, u=u, rho=rho, iteration=state.iteration + 1)
    return new_state, inner, w_plus


@dataclass
class SolveReport:
    """Full record of one outer solve; one row per outer iteration."""

    converged: bool
    iterations: int
    u: np.ndarray
    w: np.ndarray
    u_history: list
    outer_residuals: list
    rows: list
    radii: Optional[tuple]
    box_ok: bool
    box_violations: list
    constraint_ok: bool
    certificate: Optional[tuple]
    smallness: SmallnessReport
    constants: dict
    contraction: list
    inner_iterations: list
    outer_tol: float
    inner_tol: float
    seed: int
    damping: float

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iteration,rho,norm_u_V,norm_w_X,k_u,r_u,active\n")
            for row in self.rows:
                fh.write("{iteration},{rho:.17g},{norm_u_V:.17g},{norm_w_X:.17g},"
                         "{k_u:.17g},{r_u:.17g},{active}\n".format(**row))

    def summary(self):
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "outer_residuals": [float(r) for r in self.outer_residuals],
            "rows": self.rows,
            "radii": list(self.radii) if self.radii else None,
            "box_ok": self.box_ok,
            "box_violations": self.box_violations,
            "constraint_ok": self.constraint_ok,
            "certificate_ok": None if self.certificate is None else bool(self.certificate[0]),
            "certificate_margin": None if self.certificate is None else float(self.certificate[1]),
            "smallness": self.smallness.margins,
            "constants": self.constants,
            "contraction": [float(c) for c in self.contraction],
            "inner_iterations": self.inner_iterations,
            "outer_tol": self.outer_tol,
            "inner_tol": self.inner_tol,
            "norm_u_V": self.rows[-1]["norm_u_V"] if self.rows else 0.0,
            "seed": self.seed,
            "damping": self.damping,
        }


def solve_qvhi(problem: DiscreteProblem, hc: HypothesisConstants, outer_tol=None,
               max_outer=100, damping=1.0, inner_tol=None, force_run=False,
               start: Optional[QVHIState] = None, certificate_probes=50, seed=0,
               warm_eps0=1e-8) -> SolveReport:
    """Iterate the outer map from (v, w) = (0, 0) until the residual settles.

    Raises SmallnessViolationError when the flow smallness condition fails
    and ``force_run`` is not set, and NonConvergenceError (with history)
    when ``max_outer`` steps do not reach the tolerance.
    """
    small = check_smallness(hc)
    if not small.stokes_ok and not force_run:
        raise SmallnessViolationError(
            "flow smallness condition violated; pass force_run to override",
            margins=small.margins)
    if not (0.0 < damping <= 1.0):
        raise ParameterError("damping must lie in (0, 1]")

    norm_f = problem.dual_norm(problem.load_f1)
    if outer_tol is None:
        outer_tol = 1e-8 * (1.0 + norm_f)
    if inner_tol is None:
        inner_tol = 0.25 * outer_tol

    radii = None
    if small.stokes_ok and small.abstract_ok:
        radii = invariant_radii(hc, norm_f)

    state = start if start is not None else initial_state(problem)
    rows, residuals, contraction, inner_iters, box_violations = [], [], [], [], []
    u_history = []
    converged = False

    for it in range(1, max_outer + 1):
        eps0 = None if state.u is None else warm_eps0
        state, inner, w_plus = lambda_step(state, problem, hc, inner_tol,
                                           damping=damping, eps0=eps0)
        u_history.append(state.u.copy())
        norm_u = problem.norm_V(state.u)
        norm_wp = problem.x_norm(w_plus)
        k_u = problem.eval_k(state.u)
        r_u = problem.eval_r(state.u)
        row = {
            "iteration": it,
            "rho": float(state.rho),
            "norm_u_V": norm_u,
            "norm_w_X": norm_wp,
            "k_u": k_u,
            "r_u": r_u,
            "active": bool(inner.active),
        }
        rows.append(row)
        residuals.append(float(state.rho))
        inner_iters.append(inner.iterations)
        if len(residuals) >= 2 and residuals[-2] > 0:
            contraction.append(residuals[-1] / residuals[-2])
        if radii is not None:
            r1, r2 = radii
            if norm_u > r1 * (1 + 1e-6) or norm_wp > r2 * (1 + 1e-6):
                box_violations.append(it)
        if state.rho <= outer_tol:
            converged = True
            break

    if not converged:
        raise NonConvergenceError(
            f"outer iteration did not reach {outer_tol:.3e} in {max_outer} steps "
            f"(last rho = {residuals[-1]:.3e})",
            best=state, history=residuals)

    u, w = state.u, state.w
    constraint_ok = problem.eval_k(u) <= problem.eval_r(u) * (1.0 + 1e-8)
    slack = 20.0 * problem.g_yield * problem.domain_area * 1e-8
    cert_tol = max(2.0 * inner_tol, outer_tol * (1.0 + hc.norm_M), slack)
    f_tilde = problem.load_f1 - problem.M_adjoint(w)
    vi = VIProblem(problem, f_tilde, problem.phi_spec,
                   problem.eval_r(u), problem.constraints.k_kind)
    certificate = vi_certificate(vi, u, n_probes=certificate_probes,
                                 seed=seed, tol=cert_tol)

    return SolveReport(
        converged=converged and constraint_ok and certificate[0],
        iterations=len(rows),
        u=u,
        w=w,
        u_history=u_history,
        outer_residuals=residuals,
        rows=rows,
        radii=radii,
        box_ok=not box_violations,
        box_violations=box_violations,
        constraint_ok=constraint_ok,
        certificate=certificate,
        smallness=small,
        constants=asdict(hc),
        contraction=contraction,
        inner_iterations=inner_iters,
        outer_tol=outer_tol,
        inner_tol=inner_tol,
        seed=seed,
        damping=damping,
    )


def worker_count(n_tasks):
    """Pool width for independent runs: QVHI_THREADS opt-in, serial default
    (instances cloned from one assembly share factorization objects)."""
    cap = os.environ.get("QVHI_THREADS")
    if cap:
        return max(1, min(int(cap), n_tasks))
    return 1


def dependence_study(family, limit_problem: DiscreteProblem, hc: HypothesisConstants,
                     tol=None, **solver_opts):
    """Solve each (label, problem) instance and report |u_n - u_limit|_V.

    The limit instance is solved first; the family then runs in a small
    thread pool (capped by QVHI_THREADS), each instance being independent
    and deterministic.  Rows are returned in family order.
    """
    limit_report = solve_qvhi(limit_problem, hc, outer_tol=tol, **solver_opts)
    u_ref = limit_report.u

    def run(item):
        idx, (label, prob) = item
        rep = solve_qvhi(prob, hc, outer_tol=tol, **solver_opts)
        return idx, {
            "label": label,
            "deviation": limit_problem.norm_V(rep.u - u_ref),
            "iterations": rep.iterations,
            "converged": rep.converged,
            "norm_u_V": rep.rows[-1]["norm_u_V"],
        }

    items = list(enumerate(family))
    results = [None] * len(items)
    if items:
        with ThreadPoolExecutor(max_workers=worker_count(len(items))) as pool:
            for idx, row in pool.map(run, items):
                results[idx] = row
    return results, limit_report


def mosco_scaling_rows(problem: DiscreteProblem, iterate_history, u_final,
                       n_triples=100, seed=0, feasibility=0.9):
    """Recovery-sequence identity rows for the scaling construction.

    For feasible v (k(v) <= r(u)) and any iterate u_n, the scaled element
    v_n = (r(u_n)/r(u)) v satisfies k(v_n) <= r(u_n) and
    |v_n - v|_V = |r(u_n) - r(u)| / r(u) * |v|_V exactly.  Only the
    homogeneous V-seminorm constraint supports this construction.
    """
    if problem.constraints.k_kind != "vseminorm":
        raise UnsupportedOperation(
            "scaling construction requires the degree-1 homogeneous constraint kind")
    if not iterate_history:
        raise ParameterError("need at least one iterate")
    rng = np.random.default_rng(seed)
    r_u = problem.eval_r(u_final)
    rows = []
    for _ in range(n_triples):
        u_n = iterate_history[int(rng.integers(len(iterate_history)))]
        raw = rng.normal(size=problem.n_free)
        v = problem.project_divfree(raw)
        nv = problem.norm_V(v)
        if nv == 0:
            continue
        v *= feasibility * r_u / nv
        r_n = problem.eval_r(u_n)
        v_n = (r_n / r_u) * v
        k_vn = problem.eval_k(v_n)
        lhs = problem.norm_V(v_n - v)
        rhs = abs(r_n - r_u) / r_u * problem.norm_V(v)
        rows.append({
            "r_n": r_n,
            "r_u": r_u,
            "k_vn": k_vn,
            "feasible": bool(k_vn <= r_n),
            "identity_error": abs(lhs - rhs),
            "scale": max(problem.norm_V(v), 1.0),
        })
    return rows
