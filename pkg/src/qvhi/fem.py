"""P2/P1 finite elements for the divergence-constrained velocity space.

Velocity lives in vector P2 on triangles; the incompressibility constraint
is enforced through a P1 pressure-like multiplier block (internal plumbing,
not a physical pressure field).  No-slip nodes are eliminated, slip-wall
nodes are rotated into (normal, tangent) frames with the normal component
pinned, so impermeability is exact.  All operators act on the free-dof
vector; Riesz representatives and Newton steps are computed through the
saddle-point factorization, which keeps iterates divergence-free.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constitutive import ConstitutiveLaw, monotonicity_constant, tangent_coefficients
from .errors import InvalidDomainError, ParameterError
from .mesh import GAMMA0, Mesh, edge_normals, rotate_minus90, unique_edges
from .potentials import ConvexPotentialSpec, SlipModel

NODE_FREE = 0
NODE_FIXED = 1
NODE_SLIP = 2

# Gauss rules on the reference triangle (barycentric points, weights sum to 1)
_TRI_RULES = {
    2: (
        np.array([
            [2 / 3, 1 / 6, 1 / 6],
            [1 / 6, 2 / 3, 1 / 6],
            [1 / 6, 1 / 6, 2 / 3],
        ]),
        np.array([1 / 3, 1 / 3, 1 / 3]),
    ),
    4: (
        np.array([
            [0.108103018168070, 0.445948490915965, 0.445948490915965],
            [0.445948490915965, 0.108103018168070, 0.445948490915965],
            [0.445948490915965, 0.445948490915965, 0.108103018168070],
            [0.816847572980459, 0.091576213509771, 0.091576213509771],
            [0.091576213509771, 0.816847572980459, 0.091576213509771],
            [0.091576213509771, 0.091576213509771, 0.816847572980459],
        ]),
        np.array([
            0.223381589678011, 0.223381589678011, 0.223381589678011,
            0.109951743655322, 0.109951743655322, 0.109951743655322,
        ]),
    ),
}

# 3-point Gauss-Legendre on [0, 1] (exact to degree 5)
_EDGE_T = np.array([0.5 - np.sqrt(15) / 10, 0.5, 0.5 + np.sqrt(15) / 10])
_EDGE_W = np.array([5 / 18, 8 / 18, 5 / 18])


def _p2_shapes(bary):
    """P2 shape values (nq, 6) in local order [v0, v1, v2, m12, m20, m01]."""
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    return np.column_stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1,
    ])


def _p2_grads_ref(bary):
    """Gradients w.r.t. (l1, l2) reference coordinates, shape (nq, 6, 2)."""
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    nq = len(bary)
    g = np.zeros((nq, 6, 2))
    # dl0 = (-1, -1), dl1 = (1, 0), dl2 = (0, 1)
    g[:, 0, 0] = -(4 * l0 - 1)
    g[:, 0, 1] = -(4 * l0 - 1)
    g[:, 1, 0] = 4 * l1 - 1
    g[:, 2, 1] = 4 * l2 - 1
    g[:, 3, 0] = 4 * l2
    g[:, 3, 1] = 4 * l1
    g[:, 4, 0] = -4 * l2
    g[:, 4, 1] = 4 * (l0 - l2)
    g[:, 5, 0] = 4 * (l0 - l1)
    g[:, 5, 1] = -4 * l1
    return g


def _edge_shapes(t):
    """Quadratic shapes on an edge at parameter t for nodes (a, b, midpoint)."""
    t = np.asarray(t)
    return np.column_stack([(1 - t) * (1 - 2 * t), t * (2 * t - 1), 4 * t * (1 - t)])


@dataclass
class VelocitySpace:
    """Vector P2 velocity space with slip rotation and P1 multiplier layout."""

    mesh: Mesh
    edges: np.ndarray          # (ne, 2) sorted vertex pairs
    tri_p2: np.ndarray         # (m, 6) P2 node ids per triangle
    p2_coords: np.ndarray      # (n_p2, 2)
    node_status: np.ndarray    # (n_p2,)
    frames: np.ndarray         # (n_p2, 2, 2), rows (nu, tau)
    free_index: np.ndarray     # (n_p2, 2) -> free dof id or -1
    n_free: int
    pressure_index: np.ndarray  # (n_vertex,) -> multiplier id or -1 (pinned)
    n_pressure: int
    gamma1_edge_nodes: np.ndarray  # (nbe, 3) [a, b, midpoint] P2 ids on Gamma1
    gamma1_edge_vecs: np.ndarray   # (nbe, 2, 2) rows (nu, tau) of the edge

    @property
    def n_p2(self):
        return len(self.p2_coords)

    @property
    def n_vertex(self):
        return self.mesh.n_nodes


def build_space(mesh: Mesh) -> VelocitySpace:
    """Classify P2 nodes, build slip frames, and number the free dofs."""
    if not np.any(mesh.boundary_tags == GAMMA0):
        raise InvalidDomainError("Gamma0 is empty: the velocity seminorm would be degenerate")

    edges, tri_edges = unique_edges(mesh.triangles)
    n_vertex = mesh.n_nodes
    midpts = 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])
    p2_coords = np.vstack([mesh.nodes, midpts])
    tri_p2 = np.hstack([mesh.triangles, n_vertex + tri_edges])
    n_p2 = len(p2_coords)

    edge_lookup = {(int(a), int(b)): n_vertex + e for e, (a, b) in enumerate(edges)}
    normals = edge_normals(mesh)

    status = np.full(n_p2, NODE_FREE, dtype=int)
    slip_normal = np.zeros((n_p2, 2))
    has_slip = np.zeros(n_p2, dtype=bool)
    corner = np.zeros(n_p2, dtype=bool)
    fixed = np.zeros(n_p2, dtype=bool)

    bedges = []
    for (a, b), tag, nu in zip(mesh.boundary_edges, mesh.boundary_tags, normals):
        m = edge_lookup[(min(int(a), int(b)), max(int(a), int(b)))]
        if tag == GAMMA0:
            fixed[[a, b, m]] = True
        else:
            bedges.append((int(a), int(b), m, nu))
            for v in (int(a), int(b), m):
                if has_slip[v]:
                    cross = slip_normal[v, 0] * nu[1] - slip_normal[v, 1] * nu[0]
                    if abs(cross) > 1e-12:
                        # non-collinear slip edges: impermeability pins the node
                        corner[v] = True
                slip_normal[v] = nu
                has_slip[v] = True

    status[has_slip] = NODE_SLIP
    status[fixed | corner] = NODE_FIXED

    frames = np.tile(np.eye(2), (n_p2, 1, 1))
    for v in np.nonzero(status == NODE_SLIP)[0]:
        nu = slip_normal[v]
        frames[v, 0] = nu
        frames[v, 1] = rotate_minus90(nu)

    free_index = np.full((n_p2, 2), -1, dtype=int)
    counter = 0
    for v in range(n_p2):
        if status[v] == NODE_FREE:
            free_index[v, 0] = counter
            free_index[v, 1] = counter + 1
            counter += 2
        elif status[v] == NODE_SLIP:
            free_index[v, 1] = counter  # tangential dof only; normal pinned
            counter += 1

    pressure_index = np.arange(n_vertex) - 1  # pin vertex 0
    pressure_index[0] = -1

    if bedges:
        g1_nodes = np.array([[a, b, m] for a, b, m, _ in bedges], dtype=int)
        g1_vecs = np.array([[nu, rotate_minus90(nu)] for _, _, _, nu in bedges])
    else:
        g1_nodes = np.zeros((0, 3), dtype=int)
        g1_vecs = np.zeros((0, 2, 2))

    return VelocitySpace(
        mesh=mesh,
        edges=edges,
        tri_p2=tri_p2,
        p2_coords=p2_coords,
        node_status=status,
        frames=frames,
        free_index=free_index,
        n_free=counter,
        pressure_index=pressure_index,
        n_pressure=n_vertex - 1,
        gamma1_edge_nodes=g1_nodes,
        gamma1_edge_vecs=g1_vecs,
    )


@dataclass(frozen=True)
class ConstraintFunctionals:
    """Constraint pair (k, r) defining the state-dependent feasible set.

    k kinds: ``vseminorm`` (the V-norm itself; degree-1 homogeneous and
    subadditive) and ``dissipation_sq`` (nu0 * |Dv|^2 integral; degree-2
    homogeneous, so it does NOT satisfy the homogeneity/subadditivity pair
    the scaling construction needs -- flagged via
    :attr:`supports_scaling_construction`).  r kinds: ``constant`` and
    ``affine_l1`` (alpha + integral of |v| against a nonnegative weight).
    """

    k_kind: str = "vseminorm"
    nu0: float = 1.0
    r_kind: str = "constant"
    alpha: float = 1.0
    rho: Optional[Callable] = None
    r_const: float = 1.0

    def __post_init__(self):
        if self.k_kind not in ("vseminorm", "dissipation_sq"):
            raise ParameterError(f"unknown k kind {self.k_kind!r}")
        if self.r_kind not in ("constant", "affine_l1"):
            raise ParameterError(f"unknown r kind {self.r_kind!r}")
        if self.k_kind == "dissipation_sq" and self.nu0 <= 0:
            raise ParameterError("dissipation_sq needs nu0 > 0")
        if self.r_kind == "constant" and self.r_const <= 0:
            raise ParameterError("constant r must be positive")
        if self.r_kind == "affine_l1" and self.alpha <= 0:
            raise ParameterError("affine_l1 needs alpha > 0")

    @property
    def supports_scaling_construction(self):
        return self.k_kind == "vseminorm"


class DiscreteProblem:
    """Assembled operators of one flow scenario on a fixed space.

    Heavy tables (quadrature, gradients, Gram/divergence factorizations) are
    shared by the cheap clones produced by :meth:`with_body_force` and
    :meth:`with_yield`, which is what the parameter sweeps rely on.
    """

    def __init__(self, space: VelocitySpace, law: ConstitutiveLaw, body_force,
                 slip: SlipModel, g_yield, constraints: ConstraintFunctionals,
                 quad_degree=4, seed=0):
        if quad_degree not in _TRI_RULES:
            raise ParameterError(
                f"quadrature degree {quad_degree} not available; need >= 2 for "
                "exactness of the bilinear terms")
        self.space = space
        self.law = law
        self.slip = slip
        self.constraints = constraints
        self.quad_degree = quad_degree
        self.seed = seed

        mesh = space.mesh
        bary, wref = _TRI_RULES[quad_degree]
        self._N2 = _p2_shapes(bary)            # (nq, 6)
        self._P1 = bary.copy()                 # (nq, 3)
        grads_ref = _p2_grads_ref(bary)        # (nq, 6, 2)

        p = mesh.nodes[mesh.triangles]         # (m, 3, 2)
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)  # columns
        detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        invJ = np.empty_like(J)
        invJ[:, 0, 0] = J[:, 1, 1]
        invJ[:, 0, 1] = -J[:, 0, 1]
        invJ[:, 1, 0] = -J[:, 1, 0]
        invJ[:, 1, 1] = J[:, 0, 0]
        invJ /= detJ[:, None, None]
        area = 0.5 * detJ

        self._qw = area[:, None] * wref[None, :]                     # (m, nq)
        self._grads = np.einsum("tba,qjb->tqja", invJ, grads_ref)    # (m, nq, 6, 2)
        self._qp = np.einsum("qk,tka->tqa", bary, p)                 # (m, nq, 2)
        self._Rt = space.frames[space.tri_p2]                        # (m, 6, 2, 2)
        self._rows6 = space.free_index[space.tri_p2]                 # (m, 6, 2)
        self.domain_area = float(np.sum(area))

        self.gram_V = self._assemble_matrix(np.ones_like(self._qw), None, None).tocsr()
        self._assemble_divergence()
        self._gram_lu = spla.splu(self.gram_V.tocsc())
        self._riesz_lu = spla.splu(self._saddle(self.gram_V).tocsc())
        self._jac_const = None

        self._assemble_boundary()
        self.set_body_force(body_force)
        self.set_yield(g_yield)

        # rho values at volume quadrature points for the affine_l1 constraint
        if constraints.r_kind == "affine_l1" and constraints.rho is not None:
            self._rho_q = np.asarray(
                constraints.rho(self._qp.reshape(-1, 2))).reshape(self._qw.shape)
            if np.any(self._rho_q < -1e-12):
                raise ParameterError("constraint weight rho must be nonnegative")
        else:
            self._rho_q = None

        self.m_A = monotonicity_constant(law, seed=seed)
        self.norm_A0_dual = self.dual_norm(self.apply_A(np.zeros(self.n_free)))

    # -- assembly ------------------------------------------------------

    @property
    def n_free(self):
        return self.space.n_free

    @property
    def n_bq(self):
        return self._bq_tangents.shape[0]

    def _saddle(self, K):
        return sp.bmat([[K, self.B_div.T], [self.B_div, None]], format="csc")

    def _assemble_matrix(self, c_iso, c_rank1, D):
        """Element matrices c_iso*(Dphi_i : Dphi_j) + c_rank1*(D:Dphi_i)(D:Dphi_j)."""
        qw = self._qw
        g = self._grads
        t1a = np.einsum("tq,tqic,tqjc->tij", qw * c_iso, g, g)
        K = 0.5 * np.einsum("tq,tqib,tqja->tiajb", qw * c_iso, g, g)
        K[:, :, 0, :, 0] += 0.5 * t1a
        K[:, :, 1, :, 1] += 0.5 * t1a
        if c_rank1 is not None:
            W = np.einsum("tqab,tqib->tqia", D, g)
            K += np.einsum("tq,tqia,tqjb->tiajb", qw * c_rank1, W, W)
        Krot = np.einsum("tiAa,tiajb,tjBb->tiAjB", self._Rt, K, self._Rt)
        rows = np.broadcast_to(self._rows6[:, :, :, None, None], Krot.shape)
        cols = np.broadcast_to(self._rows6[:, None, None, :, :], Krot.shape)
        mask = (rows >= 0) & (cols >= 0)
        return sp.coo_matrix(
            (Krot[mask], (rows[mask], cols[mask])),
            shape=(self.n_free, self.n_free),
        )

    def _assemble_divergence(self):
        space = self.space
        Bel = np.einsum("tq,qk,tqjb->tkjb", self._qw, self._P1, self._grads)
        Brot = np.einsum("tkjb,tjBb->tkjB", Bel, self._Rt)
        prow_full = space.mesh.triangles           # vertex ids as pressure rows
        cols = np.broadcast_to(self._rows6[:, None, :, :], Brot.shape)
        rows_full = np.broadcast_to(prow_full[:, :, None, None], Brot.shape)
        mask = cols >= 0
        self.B_full = sp.coo_matrix(
            (Brot[mask], (rows_full[mask], cols[mask])),
            shape=(space.n_vertex, self.n_free),
        ).tocsr()
        rows_pinned = space.pressure_index[prow_full]
        rows_p = np.broadcast_to(rows_pinned[:, :, None, None], Brot.shape)
        mask_p = mask & (rows_p >= 0)
        self.B_div = sp.coo_matrix(
            (Brot[mask_p], (rows_p[mask_p], cols[mask_p])),
            shape=(space.n_pressure, self.n_free),
        ).tocsr()

    def _assemble_boundary(self):
        """Tangential trace matrix M and the diagonal Gram of X = L2(Gamma1)."""
        space = self.space
        nodes3 = space.gamma1_edge_nodes
        nbe = len(nodes3)
        nq1 = len(_EDGE_T)
        S = _edge_shapes(_EDGE_T)  # (nq1, 3)
        rows, cols, vals = [], [], []
        wts = np.zeros(nbe * nq1)
        tangents = np.zeros((nbe * nq1, 2))
        qpos = np.zeros((nbe * nq1, 2))
        for e in range(nbe):
            a, b, m = nodes3[e]
            tau = space.gamma1_edge_vecs[e, 1]
            pa, pb = space.p2_coords[a], space.p2_coords[b]
            elen = float(np.hypot(*(pb - pa)))
            for q in range(nq1):
                gq = e * nq1 + q
                wts[gq] = _EDGE_W[q] * elen
                tangents[gq] = tau
                qpos[gq] = (1 - _EDGE_T[q]) * pa + _EDGE_T[q] * pb
                for loc, nid in enumerate((a, b, m)):
                    Rtau = space.frames[nid] @ tau  # components of tau in node frame
                    for beta in range(2):
                        fi = space.free_index[nid, beta]
                        if fi < 0:
                            continue
                        coeff = S[q, loc] * Rtau[beta]
                        for alpha in range(2):
                            rows.append(2 * gq + alpha)
                            cols.append(fi)
                            vals.append(coeff * tau[alpha])
        self.M = sp.coo_matrix(
            (vals, (rows, cols)), shape=(2 * nbe * nq1 if nbe else 0, self.n_free)
        ).tocsr()
        self._bq_weights = wts
        self._bq_tangents = tangents
        self._bq_positions = qpos
        self.gram_X = sp.diags(np.repeat(wts, 2)) if nbe else sp.diags(np.zeros(0))
        self._wX = np.repeat(wts, 2)
        self.gamma1_length = float(np.sum(wts)) if nbe else 0.0

    def set_body_force(self, body_force):
        self.body_force = body_force
        fvals = evaluate_force(body_force, self._qp.reshape(-1, 2)).reshape(self._qp.shape)
        load = np.einsum("tq,tqa,qi->tia", self._qw, fvals, self._N2)
        lrot = np.einsum("tiAa,tia->tiA", self._Rt, load)
        f1 = np.zeros(self.n_free)
        mask = self._rows6 >= 0
        np.add.at(f1, self._rows6[mask], lrot[mask])
        self.load_f1 = f1

    def set_yield(self, g_yield):
        if g_yield < 0:
            raise ParameterError("yield stress must be nonnegative")
        self.g_yield = float(g_yield)
        self.phi_c = self.g_yield * np.sqrt(self.domain_area)  # L2 norm of constant g
        self.phi_spec = (ConvexPotentialSpec.bingham(self.g_yield, self.phi_c)
                         if self.g_yield > 0 else ConvexPotentialSpec.none())

    def with_body_force(self, body_force):
        other = copy.copy(self)
        other.set_body_force(body_force)
        return other

    def with_yield(self, g_yield):
        other = copy.copy(self)
        other.set_yield(g_yield)
        return other

    # -- velocity kinematics --------------------------------------------

    def _cartesian_nodes(self, u):
        """Free-dof vector -> (n_p2, 2) Cartesian nodal velocities."""
        hat = np.zeros((self.space.n_p2, 2))
        mask = self.space.free_index >= 0
        hat[mask] = u[self.space.free_index[mask]]
        return np.einsum("nAa,nA->na", self.space.frames, hat)

    def _scatter_dual(self, res_cart_elem):
        """(m, 6, 2) Cartesian element functional -> rotated free-dof vector."""
        rrot = np.einsum("tiAa,tia->tiA", self._Rt, res_cart_elem)
        out = np.zeros(self.n_free)
        mask = self._rows6 >= 0
        np.add.at(out, self._rows6[mask], rrot[mask])
        return out

    def strain_at_qp(self, u):
        U = self._cartesian_nodes(u)[self.space.tri_p2]       # (m, 6, 2)
        gu = np.einsum("tja,tqjb->tqab", U, self._grads)      # grad u
        return 0.5 * (gu + np.swapaxes(gu, -1, -2))

    def velocity_at_qp(self, u):
        U = self._cartesian_nodes(u)[self.space.tri_p2]
        return np.einsum("qj,tja->tqa", self._N2, U)

    # -- nonlinear viscous operator --------------------------------------

    def apply_A(self, u):
        """Dual vector of the viscous operator: <A u, v> = int T(Du) : Dv."""
        if self.law.kind == "newtonian":
            return self._newtonian_matrix() @ u
        D = self.strain_at_qp(u)
        r = np.sqrt(np.sum(D * D, axis=(-2, -1)))
        T = self.law.mu_of(r)[..., None, None] * D
        res = np.einsum("tq,tqab,tqjb->tja", self._qw, T, self._grads)
        return self._scatter_dual(res)

    def _newtonian_matrix(self):
        if self._jac_const is None:
            self._jac_const = (self.law.mu0 * self.gram_V).tocsr()
        return self._jac_const

    def jacobian_A(self, u):
        if self.law.kind == "newtonian":
            return self._newtonian_matrix()
        D = self.strain_at_qp(u)
        mu, beta = tangent_coefficients(self.law, D)
        return self._assemble_matrix(mu, beta, D).tocsr()

    # -- convex yield term ------------------------------------------------

    def phi_value(self, u):
        if self.g_yield == 0.0:
            return 0.0
        D = self.strain_at_qp(u)
        r = np.sqrt(np.sum(D * D, axis=(-2, -1)))
        return float(np.sum(self._qw * self.g_yield * r))

    def phi_eps_value(self, u, eps):
        if self.g_yield == 0.0:
            return 0.0
        D = self.strain_at_qp(u)
        r2 = np.sum(D * D, axis=(-2, -1))
        return float(np.sum(self._qw * self.g_yield * (np.sqrt(r2 + eps * eps) - eps)))

    def phi_eps_grad(self, u, eps):
        if self.g_yield == 0.0:
            return np.zeros(self.n_free)
        D = self.strain_at_qp(u)
        s = np.sqrt(np.sum(D * D, axis=(-2, -1)) + eps * eps)
        T = (self.g_yield / s)[..., None, None] * D
        res = np.einsum("tq,tqab,tqjb->tja", self._qw, T, self._grads)
        return self._scatter_dual(res)

    def phi_eps_hess(self, u, eps):
        if self.g_yield == 0.0:
            return None
        D = self.strain_at_qp(u)
        s = np.sqrt(np.sum(D * D, axis=(-2, -1)) + eps * eps)
        return self._assemble_matrix(self.g_yield / s, -self.g_yield / s ** 3, D).tocsr()

    def newton_matrix(self, u, eps, eta):
        """Linearization jacobian_A + phi_eps_hess + eta * gram_V for Newton steps."""
        K = self.jacobian_A(u)
        if eps is not None and self.g_yield > 0.0:
            K = K + self.phi_eps_hess(u, eps)
        if eta:
            K = K + eta * self.gram_V
        return K

    # -- inner products, projections, linear solves ----------------------

    def gram_apply(self, u):
        return self.gram_V @ u

    def gram_solve(self, r):
        """Free-space (not divergence-constrained) Gram inverse."""
        return self._gram_lu.solve(np.asarray(r, dtype=float))

    def inner_V(self, a, b):
        return float(a @ (self.gram_V @ b))

    def norm_V(self, a):
        return float(np.sqrt(max(self.inner_V(a, a), 0.0)))

    def riesz(self, r):
        """Divergence-free Riesz representative of a free-dof functional."""
        rhs = np.concatenate([r, np.zeros(self.space.n_pressure)])
        return self._riesz_lu.solve(rhs)[: self.n_free]

    def project_divfree(self, u):
        return self.riesz(self.gram_V @ u)

    def dual_norm(self, r):
        """Norm of the functional on the divergence-free subspace."""
        return self.norm_V(self.riesz(r))

    def solve_kkt(self, K, rhs):
        """Solve K u + B^T q = rhs, B u = 0; returns the velocity block."""
        S = sp.bmat([[K, self.B_div.T], [self.B_div, None]], format="csc")
        full = spla.splu(S).solve(np.concatenate([rhs, np.zeros(self.space.n_pressure)]))
        return full[: self.n_free]

    def divergence_residual(self, u):
        return float(np.linalg.norm(self.B_full @ u))

    # -- boundary trace ---------------------------------------------------

    def M_apply(self, u):
        """Tangential trace at slip-wall quadrature points, shape (n_bq, 2)."""
        return (self.M @ u).reshape(-1, 2)

    def M_adjoint(self, w):
        """Adjoint against the X inner product: <M* w, v> = <w, Mv>_X."""
        return self.M.T @ (self._wX * np.asarray(w).reshape(-1))

    def x_inner(self, w1, w2):
        return float(np.sum(self._wX * np.asarray(w1).reshape(-1) * np.asarray(w2).reshape(-1)))

    def x_norm(self, w):
        return float(np.sqrt(max(self.x_inner(w, w), 0.0)))

    # -- constraint functionals -------------------------------------------

    def eval_k(self, v):
        c = self.constraints
        if c.k_kind == "vseminorm":
            return self.norm_V(v)
        return c.nu0 * self.inner_V(v, v)

    def eval_r(self, v):
        c = self.constraints
        if c.r_kind == "constant":
            return c.r_const
        vals = np.linalg.norm(self.velocity_at_qp(v), axis=-1)
        rho = self._rho_q if self._rho_q is not None else 0.0
        return c.alpha + float(np.sum(self._qw * vals * rho))

    def ball_radius(self, c):
        """V-norm radius equivalent to the constraint k(u) <= c."""
        if self.constraints.k_kind == "vseminorm":
            return c
        return float(np.sqrt(c / self.constraints.nu0))

    # -- diagnostics and output -------------------------------------------

    def l2_error(self, u, exact):
        uh = self.velocity_at_qp(u)
        ue = evaluate_force(exact, self._qp.reshape(-1, 2)).reshape(uh.shape)
        return float(np.sqrt(np.sum(self._qw * np.sum((uh - ue) ** 2, axis=-1))))

    def export_vtk(self, u, path, title="velocity"):
        mesh = self.space.mesh
        vel = self._cartesian_nodes(u)[: mesh.n_nodes]
        D = self.strain_at_qp(u)
        dnorm = np.sqrt(np.sum(D * D, axis=(-2, -1)))
        cell_rate = np.sum(self._qw * dnorm, axis=1) / np.sum(self._qw, axis=1)
        with open(path, "w") as fh:
            fh.write("# vtk DataFile Version 3.0\n")
            fh.write(f"{title}\n")
            fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
            fh.write(f"POINTS {mesh.n_nodes} double\n")
            for x, y in mesh.nodes:
                fh.write(f"{x:.17g} {y:.17g} 0.0\n")
            fh.write(f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}\n")
            for a, b, c in mesh.triangles:
                fh.write(f"3 {a} {b} {c}\n")
            fh.write(f"CELL_TYPES {mesh.n_triangles}\n")
            fh.write("5\n" * mesh.n_triangles)
            fh.write(f"POINT_DATA {mesh.n_nodes}\n")
            fh.write("VECTORS velocity double\n")
            for vx, vy in vel:
                fh.write(f"{vx:.17g} {vy:.17g} 0.0\n")
            fh.write(f"CELL_DATA {mesh.n_triangles}\n")
            fh.write("SCALARS shear_rate double 1\nLOOKUP_TABLE default\n")
            for val in cell_rate:
                fh.write(f"{val:.17g}\n")


def evaluate_force(f, pts):
    """Normalize the body-force argument: None, (fx, fy) pair, or callable."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    if f is None:
        return np.zeros_like(pts)
    if callable(f):
        out = np.asarray(f(pts), dtype=float)
        if out.shape != pts.shape:
            raise ParameterError("body-force callable must return an (n, 2) array")
        return out
    fx, fy = f
    return np.column_stack([np.full(len(pts), float(fx)), np.full(len(pts), float(fy))])


def assemble(space: VelocitySpace, law: ConstitutiveLaw, f, slip: SlipModel,
             g_yield, constraints: ConstraintFunctionals, quad_degree=4, seed=0):
    """Build the discrete problem; see :class:`DiscreteProblem`."""
    return DiscreteProblem(space, law, f, slip, g_yield, constraints,
                           quad_degree=quad_degree, seed=seed)


def eval_phi(problem: DiscreteProblem, v):
    return problem.phi_value(v)


def eval_phi_smoothed_grad(problem: DiscreteProblem, v, eps):
    if eps <= 0:
        raise ParameterError("eps must be positive")
    return problem.phi_eps_grad(v, eps)


def eval_k(constraints: ConstraintFunctionals, problem: DiscreteProblem, v):
    if constraints.k_kind == "vseminorm":
        return problem.norm_V(v)
    return constraints.nu0 * problem.inner_V(v, v)


def eval_r(constraints: ConstraintFunctionals, problem: DiscreteProblem, v):
    if constraints.r_kind == "constant":
        return constraints.r_const
    vals = np.linalg.norm(problem.velocity_at_qp(v), axis=-1)
    if constraints is problem.constraints and problem._rho_q is not None:
        rho = problem._rho_q
    elif constraints.rho is not None:
        rho = np.asarray(constraints.rho(problem._qp.reshape(-1, 2))).reshape(problem._qw.shape)
    else:
        rho = np.zeros_like(problem._qw)
    return constraints.alpha + float(np.sum(problem._qw * vals * rho))


def estimate_trace_norm(problem: DiscreteProblem, tol=1e-8, max_iter=5000, seed=0):
    """Largest generalized singular value of the tangential trace.

    Power iteration on G^-1 M^T W M in the V inner product over the free
    dofs (an upper bound for the divergence-free subspace, which is the safe
    direction for every smallness check).  Returns 0 when the slip wall is
    empty.
    """
    if problem.n_bq == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    v = rng.normal(size=problem.n_free)
    v /= problem.norm_V(v)
    lam = 0.0
    for _ in range(max_iter):
        Kv = problem.M_adjoint(problem.M_apply(v))
        lam_new = float(v @ Kv)
        z = problem._gram_lu.solve(Kv)
        nz = problem.norm_V(z)
        if nz == 0.0:
            return 0.0
        v = z / nz
        if abs(lam_new - lam) <= tol * max(lam_new, 1e-300):
            lam = lam_new
            break
        lam = lam_new
    return float(np.sqrt(max(lam, 0.0)))


def pressure_block_rank(problem: DiscreteProblem):
    """Rank of the pinned multiplier block (dense; desk scale only)."""
    return int(np.linalg.matrix_rank(problem.B_div.toarray()))


def gram_spd_check(problem: DiscreteProblem):
    """Smallest eigenvalues of gram_V and gram_X (dense; desk scale only)."""
    ev_v = float(np.linalg.eigvalsh(problem.gram_V.toarray()).min())
    wx = problem._wX
    ev_x = float(wx.min()) if len(wx) else np.inf
    return ev_v, ev_x


def interpolate_velocity(problem: DiscreteProblem, fn):
    """Nodal interpolation of a field onto the free dofs.

    Constrained components are dropped, so the result represents the field
    only if it already satisfies the essential constraints.
    """
    space = problem.space
    vals = evaluate_force(fn, space.p2_coords)
    hat = np.einsum("nAa,na->nA", space.frames, vals)
    out = np.zeros(problem.n_free)
    mask = space.free_index >= 0
    out[space.free_index[mask]] = hat[mask]
    return out
