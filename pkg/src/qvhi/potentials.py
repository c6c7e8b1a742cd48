"""Nonsmooth scalar/vector potentials for slip laws and yield terms.

The slip potentials act radially on tangential velocity vectors: a 1D
profile ``rho(t)`` is evaluated at ``t = |xi|``.  Built-in profiles are the
smooth slip-weakening family ``jlambda`` (tangential traction decreasing
with slip speed), the Euclidean norm (Tresca-type friction), and custom
piecewise profiles.  Growth and monotonicity hypotheses are verified by
deterministic seeded samplers that return :class:`CheckReport` objects.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import ParameterError, UnsupportedOperation

#: absolute tolerance on normalized check ratios; guards against FP noise only
CHECK_TOL = 1e-12

#: default smoothing continuation schedule parameters
EPS0_DEFAULT = 1e-2
EPS_MIN_DEFAULT = 1e-8
EPS_FACTOR = 0.25


def _as_array(r):
    a = np.asarray(r, dtype=float)
    return a, (a.ndim == 0)


def jlambda_value(r, lam):
    """Two-branch slip-weakening potential value.

    Smooth for every ``lam > 0``; on ``[-1, 1]`` it approaches ``|r|`` as
    ``lam -> 0``.  Both arguments broadcast (scalars or arrays).
    """
    lam_arr = np.asarray(lam, dtype=float)
    if np.any(lam_arr <= 0):
        raise ParameterError(f"lambda must be positive, got {lam}")
    r_arr, scalar = _as_array(r)
    scalar = scalar and lam_arr.ndim == 0
    a = np.abs(r_arr)
    s = np.sqrt(1.0 + lam_arr * lam_arr)
    inner = np.sqrt(a * a + lam_arr * lam_arr) - lam_arr
    with np.errstate(divide="ignore", invalid="ignore"):
        outer = (1.0 / s - 1.0) * a + np.log(np.maximum(a, 1.0)) + s - lam_arr - 1.0 / s + 1.0
    val = np.where(a <= 1.0, inner, outer)
    return float(val) if scalar else val


def jlambda_deriv(r, lam):
    """Derivative of :func:`jlambda_value`; odd in ``r`` and bounded by 1."""
    lam_arr = np.asarray(lam, dtype=float)
    if np.any(lam_arr <= 0):
        raise ParameterError(f"lambda must be positive, got {lam}")
    r_arr, scalar = _as_array(r)
    scalar = scalar and lam_arr.ndim == 0
    s = np.sqrt(1.0 + lam_arr * lam_arr)
    inner = r_arr / np.sqrt(r_arr * r_arr + lam_arr * lam_arr)
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = 1.0 / np.where(r_arr > 1.0, r_arr, 1.0) + 1.0 / s - 1.0
        neg = 1.0 / np.where(r_arr < -1.0, r_arr, -1.0) - 1.0 / s + 1.0
    val = np.where(np.abs(r_arr) <= 1.0, inner, np.where(r_arr > 0, pos, neg))
    return float(val) if scalar else val


@dataclass(frozen=True)
class SlipPotential:
    """Radial nonsmooth potential with its declared growth constants.

    ``kind`` is one of ``jlambda`` (parameter ``lam``), ``norm`` (Euclidean
    norm), or ``piecewise`` (1D profile given by breakpoints and branch
    evaluators).  ``growth_b0``/``growth_b1`` are the declared constants of
    the subgradient growth bound; samplers check them, they are not derived.
    """

    kind: str
    growth_b0: float
    growth_b1: float
    regular: bool = True
    lam: Optional[float] = None
    breakpoints: tuple = ()
    branch_values: tuple = ()
    branch_derivs: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("jlambda", "norm", "piecewise"):
            raise ParameterError(f"unknown slip potential kind {self.kind!r}")
        if self.kind == "jlambda" and (self.lam is None or self.lam <= 0):
            raise ParameterError("jlambda potential needs lam > 0")
        if self.growth_b0 < 0 or self.growth_b1 < 0:
            raise ParameterError("growth constants must be nonnegative")
        if self.kind == "piecewise":
            if not self.branch_values:
                raise ParameterError("piecewise potential needs branch evaluators")
            if abs(self.branch_values[0](0.0)) > 1e-14:
                raise ParameterError("built-in potentials must vanish at 0")

    @classmethod
    def jlambda_kind(cls, lam):
        return cls(kind="jlambda", growth_b0=1.0, growth_b1=0.0, regular=True, lam=lam)

    @classmethod
    def norm_convex(cls):
        return cls(kind="norm", growth_b0=1.0, growth_b1=0.0, regular=True)

    @classmethod
    def piecewise(cls, breakpoints, values, derivs, growth_b0, growth_b1, regular=True):
        return cls(
            kind="piecewise",
            growth_b0=growth_b0,
            growth_b1=growth_b1,
            regular=regular,
            breakpoints=tuple(breakpoints),
            branch_values=tuple(values),
            branch_derivs=tuple(derivs) if derivs is not None else None,
        )

    @classmethod
    def zero(cls):
        """Identically vanishing slip potential (slip term switched off)."""
        return cls.piecewise((), (lambda t: 0.0 * t,), (lambda t: 0.0 * t,), 0.0, 0.0)

    @classmethod
    def quadratic(cls, coeff=1.0):
        """Smooth viscous-friction profile ``coeff * t^2 / 2`` (linear growth b1 = coeff)."""
        if coeff < 0:
            raise ParameterError("quadratic coefficient must be nonnegative")
        return cls.piecewise(
            (), (lambda t, c=coeff: 0.5 * c * t * t,), (lambda t, c=coeff: c * t,), 0.0, coeff
        )

    # -- radial profile ------------------------------------------------

    def profile_value(self, t):
        t_arr, scalar = _as_array(t)
        if self.kind == "jlambda":
            out = jlambda_value(t_arr, self.lam)
        elif self.kind == "norm":
            out = np.abs(t_arr)
        else:
            flat = np.atleast_1d(t_arr).astype(float)
            idx = np.searchsorted(np.asarray(self.breakpoints), flat, side="right")
            out = np.empty_like(flat)
            for b, fn in enumerate(self.branch_values):
                mask = idx == b
                if np.any(mask):
                    out[mask] = fn(flat[mask])
            out = out.reshape(t_arr.shape)
        return float(out) if scalar else out

    def profile_deriv_pair(self, t):
        """One-sided derivatives (left, right) of the radial profile at ``t >= 0``."""
        if self.kind == "jlambda":
            d = jlambda_deriv(t, self.lam)
            return d, d
        if self.kind == "norm":
            if t == 0.0:
                return -1.0, 1.0
            return 1.0, 1.0
        if self.branch_derivs is None:
            raise UnsupportedOperation("piecewise potential carries no derivative data")
        bps = self.breakpoints
        i_right = int(np.searchsorted(np.asarray(bps), t, side="right"))
        i_left = int(np.searchsorted(np.asarray(bps), t, side="left"))
        d_right = float(self.branch_derivs[i_right](t))
        d_left = float(self.branch_derivs[i_left](t)) if t > 0 else d_right
        return d_left, d_right

    def is_smooth_at(self, t):
        d_minus, d_plus = self.profile_deriv_pair(t)
        return abs(d_minus - d_plus) <= 1e-14 * (1.0 + abs(d_minus) + abs(d_plus))


def potential_value(p: SlipPotential, xi):
    """Value of the radial potential at a vector point ``xi``."""
    xi = np.asarray(xi, dtype=float)
    return p.profile_value(np.linalg.norm(xi, axis=-1))


def clarke_directional(p: SlipPotential, xi, direction):
    """Generalized directional derivative of the radial potential.

    For C1 kinds this is the plain directional derivative; at radial kinks
    the worst one-sided branch is taken, and at the origin the value is
    ``|rho'(0+)| * |direction|``.
    """
    xi = np.asarray(xi, dtype=float)
    v = np.asarray(direction, dtype=float)
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return 0.0
    t = float(np.linalg.norm(xi))
    if t == 0.0:
        _, d_plus = p.profile_deriv_pair(0.0)
        return abs(d_plus) * nv
    d_minus, d_plus = p.profile_deriv_pair(t)
    s = float(xi @ v) / t
    return max(d_minus * s, d_plus * s)


def subgradient_select(p: SlipPotential, xi):
    """Minimal-norm element of the generalized subgradient at ``xi``.

    Single-valued and deterministic; at radial kinks the scalar closest to
    zero in the one-sided derivative interval is taken, at the origin the
    selection is 0 (the subgradient there is a centred ball).
    """
    xi = np.asarray(xi, dtype=float)
    t = float(np.linalg.norm(xi))
    if t == 0.0:
        return np.zeros_like(xi)
    d_minus, d_plus = p.profile_deriv_pair(t)
    lo, hi = min(d_minus, d_plus), max(d_minus, d_plus)
    if lo <= 0.0 <= hi:
        scal = 0.0
    elif lo > 0.0:
        scal = lo
    else:
        scal = hi
    return (scal / t) * xi


def _subgradient_sup_norm(p: SlipPotential, t):
    """sup of |zeta| over the radial subgradient at distance ``t`` from 0."""
    d_minus, d_plus = p.profile_deriv_pair(t)
    if t == 0.0:
        return abs(d_plus)
    return max(abs(d_minus), abs(d_plus))


@dataclass(frozen=True)
class CheckReport:
    """Outcome of a sampled hypothesis check; failure is data, not an exception."""

    passed: bool
    stat: float
    threshold: float
    label: str
    n_samples: int
    seed: int
    witness: Optional[tuple] = None

    def __str__(self):
        state = "pass" if self.passed else "FAIL"
        return f"[{state}] {self.label}: stat={self.stat:.6g} threshold={self.threshold:.6g}"


def _sample_ball(rng, n, dim, radius):
    pts = rng.normal(size=(n, dim))
    norms = np.linalg.norm(pts, axis=1)
    norms[norms == 0] = 1.0
    radii = radius * rng.uniform(size=n) ** (1.0 / dim)
    return pts * (radii / norms)[:, None]


def verify_growth(p: SlipPotential, n_samples, radius=10.0, seed=0, dim=2):
    """Check the declared subgradient growth bound |∂j(xi)| <= b0 + b1 |xi|.

    Samples the ball of the given radius plus deterministic special points
    (origin, axes, the unit ring where built-in branches join).  Uses the
    worst element of the subgradient, not the minimal-norm selection.
    """
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    pts = _sample_ball(rng, n_samples, dim, radius)
    specials = [np.zeros(dim)]
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = 1.0
        specials += [radius * e, e, (1.0 + 1e-9) * e, (1.0 - 1e-9) * e]
    pts = np.vstack([pts, specials])
    max_ratio = 0.0
    witness = None
    for xi in pts:
        t = float(np.linalg.norm(xi))
        top = _subgradient_sup_norm(p, t)
        denom = p.growth_b0 + p.growth_b1 * t
        if denom == 0.0:
            ratio = 0.0 if top == 0.0 else np.inf
        else:
            ratio = top / denom
        if ratio > max_ratio:
            max_ratio = ratio
            witness = tuple(xi)
    passed = max_ratio <= 1.0 + CHECK_TOL
    return CheckReport(
        passed=passed,
        stat=max_ratio,
        threshold=1.0 + CHECK_TOL,
        label=f"subgradient growth of {p.kind}",
        n_samples=len(pts),
        seed=seed,
        witness=None if passed else witness,
    )


def estimate_relaxed_monotonicity(p: SlipPotential, n_samples=2000, radius=10.0, seed=0, dim=2):
    """Sampled estimate of the relaxed-monotonicity defect m_j >= 0.

    Combines random vector pairs with (for 1D profiles) a dense grid scan of
    the profile derivative's slope, which is where the most negative
    quotients of the built-in kinds live.  Returns 0 for monotone kinds.
    """
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0

    # dense 1D scan of adjacent difference quotients of the profile derivative
    ts = np.linspace(1e-6, radius, 4001)
    extra = []
    for bp in (1.0,) + tuple(p.breakpoints):
        if 0 < bp < radius:
            extra += [bp * (1 + s) for s in (-1e-5, -1e-7, 1e-7, 1e-5)]
    ts = np.sort(np.concatenate([ts, np.asarray(extra)])) if extra else ts
    dvals = np.array([p.profile_deriv_pair(t)[1] for t in ts])
    quot = np.diff(dvals) / np.diff(ts)
    worst = min(worst, float(np.min(quot)))

    a = _sample_ball(rng, n_samples, dim, radius)
    b = _sample_ball(rng, n_samples, dim, radius)
    keep = np.linalg.norm(a - b, axis=1) > 1e-10
    for xi1, xi2 in zip(a[keep], b[keep]):
        z1 = subgradient_select(p, xi1)
        z2 = subgradient_select(p, xi2)
        d = xi1 - xi2
        q = float((z1 - z2) @ d) / float(d @ d)
        worst = min(worst, q)

    m_hat = max(0.0, -worst)
    return 0.0 if m_hat < 1e-12 else m_hat


@dataclass(frozen=True)
class WeightFunction:
    """Bounded positive slip weight h with its declared bounds 0 < h0 <= h <= h1."""

    evaluator: Callable[[np.ndarray], np.ndarray]
    h0: float
    h1: float

    def __post_init__(self):
        if not (0 < self.h0 <= self.h1):
            raise ParameterError("weight bounds must satisfy 0 < h0 <= h1")

    def __call__(self, xi):
        return self.evaluator(np.asarray(xi, dtype=float))

    @classmethod
    def constant(cls, h):
        return cls(evaluator=lambda xi, h=h: np.full(xi.shape[:-1], float(h)), h0=h, h1=h)

    @classmethod
    def rational(cls, h0, h1):
        """h(xi) = h0 + (h1 - h0) / (1 + |xi|^2): slip-rate softening weight."""

        def ev(xi, h0=h0, h1=h1):
            n2 = np.sum(xi * xi, axis=-1)
            return h0 + (h1 - h0) / (1.0 + n2)

        return cls(evaluator=ev, h0=h0, h1=h1)


def verify_weight_bounds(w: WeightFunction, n_samples=2000, radius=10.0, seed=0, dim=2):
    rng = np.random.default_rng(seed)
    pts = np.vstack([_sample_ball(rng, n_samples, dim, radius), np.zeros((1, dim))])
    vals = w(pts)
    lo, hi = float(np.min(vals)), float(np.max(vals))
    ok = lo >= w.h0 - CHECK_TOL and hi <= w.h1 + CHECK_TOL
    stat = max(w.h0 - lo, hi - w.h1, 0.0)
    return CheckReport(ok, stat, CHECK_TOL, "weight bounds", len(pts), seed)


@dataclass(frozen=True)
class ConvexPotentialSpec:
    """Convex yield-term potential: pointwise g|t| (Bingham) or zero.

    ``lipschitz_c`` is the Lipschitz constant of the induced integral
    functional; for the Bingham kind on a domain it equals the L2 norm of g
    and is filled in at assembly time.
    """

    kind: str
    g: float = 0.0
    lipschitz_c: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("bingham_norm", "zero"):
            raise ParameterError(f"unknown convex potential kind {self.kind!r}")
        if self.g < 0:
            raise ParameterError("yield coefficient must be nonnegative")

    @classmethod
    def bingham(cls, g, lipschitz_c=None):
        return cls(kind="bingham_norm", g=g, lipschitz_c=lipschitz_c)

    @classmethod
    def none(cls):
        return cls(kind="zero", g=0.0, lipschitz_c=0.0)

    def with_lipschitz(self, c):
        return replace(self, lipschitz_c=c)

    def value(self, t):
        """Pointwise value at a vector/tensor argument (last axis = components)."""
        t = np.asarray(t, dtype=float)
        if self.kind == "zero":
            return np.zeros(t.shape[:-1]) if t.ndim else 0.0
        return self.g * np.linalg.norm(t, axis=-1)


@dataclass(frozen=True)
class SmoothedPotential:
    """Epsilon-regularization g(sqrt(|t|^2 + eps^2) - eps) of a norm-type potential.

    Vanishes at 0, lies within g*eps below the original, and has gradient
    bounded by the original Lipschitz constant g.
    """

    g: float
    eps: float
    base: str

    def value_of_norm(self, s):
        s = np.asarray(s, dtype=float)
        return self.g * (np.sqrt(s * s + self.eps * self.eps) - self.eps)

    def deriv_of_norm(self, s):
        """d/ds of value_of_norm; equals g * s / sqrt(s^2 + eps^2)."""
        s = np.asarray(s, dtype=float)
        return self.g * s / np.sqrt(s * s + self.eps * self.eps)

    def value(self, t):
        t = np.asarray(t, dtype=float)
        return self.value_of_norm(np.linalg.norm(t, axis=-1))

    def grad(self, t):
        t = np.asarray(t, dtype=float)
        s = np.linalg.norm(t, axis=-1, keepdims=True)
        return self.g * t / np.sqrt(s * s + self.eps * self.eps)


def smooth_epsilon(kind, eps):
    """Smoothed evaluator for a convex potential spec or a norm slip potential."""
    if eps <= 0:
        raise ParameterError("eps must be positive")
    if isinstance(kind, ConvexPotentialSpec):
        g = 0.0 if kind.kind == "zero" else kind.g
        return SmoothedPotential(g=g, eps=eps, base=kind.kind)
    if isinstance(kind, SlipPotential):
        if kind.kind == "norm":
            return SmoothedPotential(g=1.0, eps=eps, base="norm")
        if kind.kind == "jlambda":
            # already C1: no regularization needed, gap is exactly 0
            return SmoothedPotential(g=0.0, eps=eps, base="jlambda")
        raise UnsupportedOperation("no smoothing rule for piecewise slip potentials")
    raise ParameterError(f"cannot smooth object of type {type(kind).__name__}")


def eps_schedule(eps0=EPS0_DEFAULT, eps_min=EPS_MIN_DEFAULT, factor=EPS_FACTOR):
    """Geometric continuation schedule eps0 * factor^k, clamped to end at eps_min."""
    if eps0 <= 0 or eps_min <= 0 or not (0 < factor < 1):
        raise ParameterError("bad continuation parameters")
    out = []
    e = eps0
    while e > eps_min * (1 + 1e-12):
        out.append(e)
        e *= factor
    out.append(eps_min)
    return out


@dataclass(frozen=True)
class SlipModel:
    """Slip boundary model: weight h paired with a radial potential.

    ``m_j`` is the optional relaxed-monotonicity constant of the potential;
    ``None`` means unknown (estimate it before uniqueness claims).
    """

    weight: WeightFunction
    potential: SlipPotential
    m_j: Optional[float] = None

    @property
    def h0(self):
        return self.weight.h0

    @property
    def h1(self):
        return self.weight.h1

    @property
    def b0(self):
        return self.potential.growth_b0

    @property
    def b1(self):
        return self.potential.growth_b1

    @classmethod
    def frictionless(cls):
        return cls(weight=WeightFunction.constant(1.0), potential=SlipPotential.zero(), m_j=0.0)
