"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines and the
measured runtimes.  Oracles are independent of the solver paths they check:
dense grid search, a numba projected-subgradient loop, closed forms, and
hand-computed constants.
"""

import math
import time

import numpy as np
import pytest
from numba import njit

from qvhi.constitutive import ConstitutiveLaw
from qvhi.errors import NonConvergenceError
from qvhi.experiments import manufactured_fields
from qvhi.fem import ConstraintFunctionals, assemble, build_space
from qvhi.mesh import generate_rectangle
from qvhi.potentials import SlipModel, SlipPotential, WeightFunction, jlambda_deriv, jlambda_value
from qvhi.qvhi_solver import (HypothesisConstants, QVHIState, check_smallness,
                              initial_state, invariant_radii, mosco_scaling_rows,
                              solve_qvhi)
from qvhi.vi_solver import DenseWorkspace, VIProblem, solve_vi


def report(criterion, passed, elapsed, budget, detail=""):
    state = "PASS" if passed else "FAIL"
    print(f"\nACCEPTANCE {criterion}: {state} ({elapsed:.1f}s / budget {budget:.0f}s) {detail}")
    assert passed, f"criterion {criterion}: {detail}"
    assert elapsed < budget, f"criterion {criterion} exceeded runtime budget"


def shear_force(scale):
    def force(pts):
        return np.column_stack([scale * (1 - pts[:, 1]), np.zeros(len(pts))])
    return force


@njit
def projected_subgradient(A, f, g, c, n_iter, t0, k0):
    n = A.shape[0]
    u = np.zeros(n)
    best = np.zeros(n)
    best_E = 1e300
    for k in range(n_iter):
        Au = A @ u
        nu = np.sqrt((u * u).sum())
        E = 0.5 * (u @ Au) - f @ u + g * nu
        if E < best_E:
            best_E = E
            best[:] = u
        grad = Au - f
        if nu > 0:
            grad = grad + (g / nu) * u
        t = t0 / (k + k0)
        u = u - t * grad
        nu2 = np.sqrt((u * u).sum())
        if nu2 > c:
            u = (c / nu2) * u
    return best


def test_criterion_1_potentials_suite():
    t0 = time.perf_counter()
    ok = True
    detail = []

    # branch continuity at |r| = 1 via both branch formulas
    for lam in (0.1, 0.5, 1.0):
        s = math.sqrt(1 + lam * lam)
        inner = s - lam
        outer = (1 / s - 1) * 1.0 + math.log(1.0) + s - lam - 1 / s + 1
        if abs(inner - outer) > 1e-12:
            ok = False
            detail.append(f"branch gap {abs(inner - outer):.2e} at lam={lam}")
        if abs(jlambda_value(1.0, lam) - inner) > 1e-12:
            ok = False

    # derivative bound on 1e5 random (r, lambda) pairs
    rng = np.random.default_rng(2024)
    r = rng.uniform(-100, 100, size=100_000)
    lams = 10.0 ** rng.uniform(-3, 1, size=100_000)
    worst = float(np.max(np.abs(jlambda_deriv(r, lams))))
    if worst > 1.0 + 1e-15:
        ok = False
        detail.append(f"derivative bound violated: {worst}")

    # sup distance to |r| on [-1, 1]
    grid = np.linspace(-1, 1, 200_001)
    for lam in (0.5, 0.1, 1e-3):
        sup = float(np.max(np.abs(jlambda_value(grid, lam) - np.abs(grid))))
        if sup > lam:
            ok = False
            detail.append(f"sup distance {sup} > lam={lam}")

    report(1, ok, time.perf_counter() - t0, 1.0, "; ".join(detail))


def test_criterion_2_inner_vi_oracle_equivalence():
    t0 = time.perf_counter()
    ok = True
    detail = []

    # 1D instance against the grid-search oracle at step 1e-6
    ws1 = DenseWorkspace(np.array([[1.0]]), g=1.0)
    vi1 = VIProblem(ws1, np.array([2.0]), ws1.phi_spec, None, None)
    u1 = solve_vi(vi1, tol=1e-9).u[0]
    grid = np.arange(-3.0, 3.0 + 1e-6, 1e-6)
    E = 0.5 * grid * grid - 2.0 * grid + np.abs(grid)
    u_grid = float(grid[np.argmin(E)])
    if abs(u1 - 1.0) > 1e-6 or abs(u1 - u_grid) > 2e-6:
        ok = False
        detail.append(f"1D instance: solver {u1}, grid {u_grid}")

    # 20 random dense instances vs the projected-subgradient oracle
    rng = np.random.default_rng(12345)
    worst = 0.0
    for _ in range(20):
        dim = int(rng.integers(2, 9))
        Q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        A = Q @ np.diag(rng.uniform(1.0, 3.0, dim)) @ Q.T
        f = rng.normal(size=dim) * 1.5
        g = rng.uniform(0.2, 0.8)
        c = rng.uniform(0.8, 1.5)
        ws = DenseWorkspace(A, g=g)
        vi = VIProblem(ws, f, ws.phi_spec, c, "vseminorm")
        u = solve_vi(vi, tol=1e-11).u
        u_orc = projected_subgradient(A, f, g, c, 1_000_000, 4.0 / ws.m_A, 20.0)
        worst = max(worst, float(np.linalg.norm(u - u_orc)))
    if worst > 1e-5:
        ok = False
        detail.append(f"worst oracle gap {worst:.2e}")
    else:
        detail.append(f"worst oracle gap {worst:.2e}")

    report(2, ok, time.perf_counter() - t0, 60.0, "; ".join(detail))


def test_criterion_3_manufactured_convergence_order():
    t0 = time.perf_counter()
    mu0 = 1.0
    u_exact, f_field = manufactured_fields(mu0)
    law = ConstitutiveLaw.newtonian(mu0)
    errs = []
    for n in (4, 8, 16):
        mesh = generate_rectangle(1.0, 1.0, n, n, frozenset())
        space = build_space(mesh)
        prob = assemble(space, law, f_field, SlipModel.frictionless(), 0.0,
                        ConstraintFunctionals(r_kind="constant", r_const=100.0))
        hc = HypothesisConstants.stokes(prob, trace_norm=0.0, m_j=0.0)
        rep = solve_qvhi(prob, hc)
        errs.append(prob.l2_error(rep.u, u_exact))
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    ok = min(orders) >= 2.5
    report(3, ok, time.perf_counter() - t0, 120.0,
           f"L2 errors {['%.3e' % e for e in errs]}, orders {['%.2f' % o for o in orders]}")


def _channel_16x8(g_yield, scale=100.0):
    mesh = generate_rectangle(2.0, 1.0, 16, 8, {"bottom"})
    space = build_space(mesh)
    slip = SlipModel(weight=WeightFunction.constant(0.5),
                     potential=SlipPotential.jlambda_kind(0.5))
    return assemble(space, ConstitutiveLaw.newtonian(1.0), shear_force(scale), slip,
                    g_yield, ConstraintFunctionals(r_kind="constant", r_const=1000.0))


def test_criterion_4_newtonian_limit():
    t0 = time.perf_counter()
    base = _channel_16x8(1.0)
    hc = HypothesisConstants.stokes(base)
    limit = solve_qvhi(base.with_yield(0.0), hc, seed=1)
    norm_limit = base.norm_V(limit.u)
    devs = []
    for n in range(9):
        rep = solve_qvhi(base.with_yield(2.0 ** (-n)), hc, seed=1)
        devs.append(base.norm_V(rep.u - limit.u))
        assert rep.box_ok  # invariant box holds on every CI solve
    non_increasing = all(b <= a + 1e-10 for a, b in zip(devs, devs[1:]))
    final_ok = devs[-1] <= 1e-3 * norm_limit
    ok = non_increasing and final_ok and limit.converged
    report(4, ok, time.perf_counter() - t0, 300.0,
           f"devs {['%.2e' % d for d in devs]}, final/|u0| = {devs[-1] / norm_limit:.2e}")


def test_criterion_5_uniqueness_regime():
    t0 = time.perf_counter()
    mesh = generate_rectangle(2.0, 1.0, 8, 4, {"bottom"})
    space = build_space(mesh)
    slip = SlipModel(weight=WeightFunction.constant(0.1),
                     potential=SlipPotential.norm_convex(), m_j=0.0)
    prob = assemble(space, ConstitutiveLaw.newtonian(1.0), shear_force(8.0), slip,
                    0.0, ConstraintFunctionals(r_kind="constant", r_const=100.0))
    hc = HypothesisConstants.stokes(prob)
    small = check_smallness(hc)
    margin_pos = small.uniqueness_ok and small.margins["uniqueness"]["ratio"] < 1.0

    inner_tol = 1e-10
    rng = np.random.default_rng(5)
    w2 = rng.normal(size=(prob.n_bq, 2))
    w2 *= 0.1 / prob.x_norm(w2)
    starts = [initial_state(prob),
              QVHIState(v=np.zeros(prob.n_free), w=w2),
              QVHIState(v=np.zeros(prob.n_free), w=-w2)]
    sols = [solve_qvhi(prob, hc, inner_tol=inner_tol, outer_tol=4e-10,
                       start=st, seed=6).u for st in starts]
    worst = max(prob.norm_V(sols[i] - sols[j])
                for i in range(3) for j in range(i + 1, 3))
    ok = margin_pos and worst <= 10 * inner_tol
    report(5, ok, time.perf_counter() - t0, 120.0,
           f"uniqueness margin ratio {small.margins['uniqueness']['ratio']:.3f}, "
           f"worst pairwise {worst:.2e} vs 10*inner_tol {10 * inner_tol:.0e}")


def test_criterion_6_invariant_box():
    t0 = time.perf_counter()
    mesh = generate_rectangle(2.0, 1.0, 8, 4, {"bottom"})
    space = build_space(mesh)
    # velocity-feedback slip (b1 > 0) so both radii formulas are exercised
    slip = SlipModel(weight=WeightFunction.constant(0.5),
                     potential=SlipPotential.quadratic(0.2), m_j=0.0)
    prob = assemble(space, ConstitutiveLaw.newtonian(1.0), shear_force(6.0), slip,
                    0.0, ConstraintFunctionals(r_kind="constant", r_const=100.0))
    hc = HypothesisConstants.stokes(prob)
    small = check_smallness(hc)
    margin = 1.0 - small.margins["abstract"]["ratio"]
    rep = solve_qvhi(prob, hc, seed=7)
    r1, r2 = invariant_radii(hc, prob.dual_norm(prob.load_f1))
    inside = all(row["norm_u_V"] <= r1 * (1 + 1e-6)
                 and row["norm_w_X"] <= r2 * (1 + 1e-6) for row in rep.rows)
    ok = margin >= 0.10 and inside and rep.box_ok and rep.converged
    report(6, ok, time.perf_counter() - t0, 120.0,
           f"margin {margin:.2f}, radii ({r1:.3f}, {r2:.3f}), "
           f"max |u|_V {max(r['norm_u_V'] for r in rep.rows):.3f}, "
           f"max |w|_X {max(r['norm_w_X'] for r in rep.rows):.3f}")


def test_criterion_7_smallness_checkers():
    t0 = time.perf_counter()
    prob = _channel_16x8(0.0)
    hc = HypothesisConstants.stokes(prob)
    # hand-computed constants for the slip-weakening model: b0 = 1, b1 = 0
    h1 = 0.5
    gamma1_len = 2.0
    d1_hand = math.sqrt(2) * h1 * math.sqrt(gamma1_len)
    ok = (abs(hc.d1 - d1_hand) <= 1e-14 * d1_hand and hc.d3 == 0.0 and hc.d2 == 0.0)

    small = check_smallness(hc)
    mm = hc.norm_M ** 2
    hand_abstract = (hc.d2 + hc.d3) * mm < hc.m_A
    hand_stokes = math.sqrt(2) * hc.b1 * hc.h1 * mm < hc.m_A
    hand_unique = hc.h1 * hc.m_j * mm < hc.m_A
    ok = ok and (small.abstract_ok == hand_abstract
                 and small.stokes_ok == hand_stokes
                 and small.uniqueness_ok == hand_unique)

    # boundary equality must report fail for all three strict inequalities
    hc_eq = HypothesisConstants(m_A=1.0, d3=0.25, norm_M=2.0, b1=0.25 / math.sqrt(2),
                                h1=1.0, m_j=0.25)
    small_eq = check_smallness(hc_eq)
    ok = ok and not small_eq.abstract_ok and not small_eq.stokes_ok \
        and not small_eq.uniqueness_ok
    report(7, ok, time.perf_counter() - t0, 60.0,
           f"d1 = {hc.d1:.15g} vs hand {d1_hand:.15g}")


def test_criterion_8_mosco_scaling_identity():
    t0 = time.perf_counter()
    mesh = generate_rectangle(2.0, 1.0, 8, 4, {"bottom"})
    space = build_space(mesh)
    slip = SlipModel(weight=WeightFunction.constant(0.5),
                     potential=SlipPotential.jlambda_kind(0.5))
    cons = ConstraintFunctionals(k_kind="vseminorm", r_kind="affine_l1", alpha=1.0,
                                 rho=lambda pts: np.ones(len(pts)))
    prob = assemble(space, ConstitutiveLaw.newtonian(1.0), shear_force(8.0), slip,
                    0.0, cons)
    hc = HypothesisConstants.stokes(prob)
    rep = solve_qvhi(prob, hc, seed=8)
    rows = mosco_scaling_rows(prob, rep.u_history, rep.u, n_triples=100, seed=9)
    feasible = all(r["feasible"] for r in rows)
    identity = all(r["identity_error"] <= 1e-12 * r["scale"] for r in rows)
    ok = feasible and identity and len(rows) == 100
    report(8, ok, time.perf_counter() - t0, 60.0,
           f"max identity error {max(r['identity_error'] for r in rows):.2e}")


def test_criterion_9_f_continuity():
    t0 = time.perf_counter()
    mesh = generate_rectangle(2.0, 1.0, 8, 4, {"bottom"})
    space = build_space(mesh)
    slip = SlipModel(weight=WeightFunction.constant(0.5),
                     potential=SlipPotential.jlambda_kind(0.5))
    prob = assemble(space, ConstitutiveLaw.newtonian(1.0), shear_force(8.0), slip,
                    0.0, ConstraintFunctionals(r_kind="constant", r_const=100.0))
    hc = HypothesisConstants.stokes(prob)
    base = solve_qvhi(prob, hc, outer_tol=1e-10, seed=10)

    # perturbation direction normalized in L2(Omega)
    def direction(pts):
        return np.column_stack([np.sin(np.pi * pts[:, 1]), np.zeros(len(pts))])

    dvals = direction(prob._qp.reshape(-1, 2)).reshape(prob._qp.shape)
    nrm = math.sqrt(float(np.sum(prob._qw * np.sum(dvals * dvals, axis=-1))))

    devs = []
    for mag in (1e-1, 1e-2, 1e-3):
        def force(pts, _m=mag / nrm):
            return shear_force(8.0)(pts) + _m * direction(pts)
        rep = solve_qvhi(prob.with_body_force(force), hc, outer_tol=1e-10, seed=10)
        devs.append(prob.norm_V(rep.u - base.u))
    ratios = [devs[i] / devs[i + 1] for i in range(2)]
    ok = all(10.0 / 3.0 <= r <= 30.0 for r in ratios)
    report(9, ok, time.perf_counter() - t0, 300.0,
           f"deviations {['%.3e' % d for d in devs]}, decade ratios "
           f"{['%.2f' % r for r in ratios]}")
