"""Constitutive laws T(D) on symmetric 2x2 tensors and their hypothesis checks.

Laws are radial, T(D) = mu(|D|) D, with the Newtonian special case
mu = const.  Growth and strong-monotonicity constants are declared on the
law and verified numerically by seeded samplers; for nonlinear laws the
monotonicity constant is an estimate, not a proof.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ParameterError
from .potentials import CHECK_TOL, CheckReport

#: safety factor applied to sampled monotonicity constants before they are
#: used in smallness checks of nonlinear laws
MONOTONICITY_SAFETY = 0.9


@dataclass(frozen=True)
class SymTensor2:
    """Symmetric 2x2 tensor in Voigt storage (d11, d12, d22)."""

    d11: float
    d12: float
    d22: float

    def norm(self):
        return math.sqrt(self.d11 ** 2 + 2.0 * self.d12 ** 2 + self.d22 ** 2)

    def as_matrix(self):
        return np.array([[self.d11, self.d12], [self.d12, self.d22]])

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        if m.shape != (2, 2) or abs(m[0, 1] - m[1, 0]) > 1e-12 * (1 + np.abs(m).max()):
            raise ParameterError("expected a symmetric 2x2 matrix")
        return cls(float(m[0, 0]), 0.5 * float(m[0, 1] + m[1, 0]), float(m[1, 1]))

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 1.0)

    def scaled(self, t):
        return SymTensor2(t * self.d11, t * self.d12, t * self.d22)


@dataclass(frozen=True)
class ConstitutiveLaw:
    """Viscous stress law with declared hypothesis constants (a0, a1, mT).

    ``newtonian``: T(D) = mu0 D exactly.  ``generalized``: T(D) = mu(|D|) D
    with a bounded viscosity profile mu_lo <= mu <= mu_hi; ``mu2`` is the
    declared monotonicity constant of the induced operator (power-2 form).
    """

    kind: str
    a0: float
    a1: float
    mT: float
    mu0: Optional[float] = None
    mu: Optional[Callable] = None
    mu_prime: Optional[Callable] = None
    mu_lo: Optional[float] = None
    mu_hi: Optional[float] = None
    mu2: Optional[float] = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("newtonian", "generalized"):
            raise ParameterError(f"unknown constitutive kind {self.kind!r}")
        if self.kind == "newtonian" and (self.mu0 is None or self.mu0 <= 0):
            raise ParameterError("newtonian law needs mu0 > 0")
        if self.kind == "generalized":
            if self.mu is None or self.mu_lo is None or self.mu_hi is None:
                raise ParameterError("generalized law needs mu, mu_lo, mu_hi")
            if not (0 < self.mu_lo <= self.mu_hi):
                raise ParameterError("viscosity bounds must satisfy 0 < mu_lo <= mu_hi")
        if self.a0 < 0 or self.a1 <= 0 or self.mT <= 0:
            raise ParameterError("growth/monotonicity constants must be positive (a0 >= 0)")

    @classmethod
    def newtonian(cls, mu0):
        return cls(kind="newtonian", a0=0.0, a1=mu0, mT=mu0, mu0=mu0, label=f"newtonian(mu0={mu0})")

    @classmethod
    def carreau(cls, mu_inf, mu_ref, kappa=1.0, q=1.5):
        """Bounded shear-thinning profile mu_inf + (mu_ref-mu_inf)(1+kappa r^2)^((q-2)/2).

        Non-standard parameterization chosen so the viscosity bounds are
        mu_inf and mu_ref; requires q in (1, 2] and 0 < mu_inf <= mu_ref.
        The declared monotonicity constant is the large-shear limit mu_inf.
        """
        if not (0 < mu_inf <= mu_ref):
            raise ParameterError("need 0 < mu_inf <= mu_ref")
        if not (1.0 < q <= 2.0):
            raise ParameterError("need q in (1, 2]")
        if kappa <= 0:
            raise ParameterError("need kappa > 0")
        dmu = mu_ref - mu_inf

        def mu(r, mu_inf=mu_inf, dmu=dmu, kappa=kappa, q=q):
            r = np.asarray(r, dtype=float)
            return mu_inf + dmu * (1.0 + kappa * r * r) ** ((q - 2.0) / 2.0)

        def mu_prime(r, dmu=dmu, kappa=kappa, q=q):
            r = np.asarray(r, dtype=float)
            return dmu * (q - 2.0) * kappa * r * (1.0 + kappa * r * r) ** ((q - 4.0) / 2.0)

        return cls(
            kind="generalized",
            a0=0.0,
            a1=mu_ref,
            mT=mu_inf,
            mu=mu,
            mu_prime=mu_prime,
            mu_lo=mu_inf,
            mu_hi=mu_ref,
            mu2=mu_inf,
            label=f"carreau(mu_inf={mu_inf}, mu_ref={mu_ref}, kappa={kappa}, q={q})",
        )

    @classmethod
    def generalized(cls, mu, mu_lo, mu_hi, mu2, mu_prime=None, label="generalized"):
        return cls(
            kind="generalized",
            a0=0.0,
            a1=mu_hi,
            mT=mu2,
            mu=mu,
            mu_prime=mu_prime,
            mu_lo=mu_lo,
            mu_hi=mu_hi,
            mu2=mu2,
            label=label,
        )

    # -- vectorized evaluation over arrays of |D| ------------------------

    def mu_of(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "newtonian":
            return np.full_like(r, self.mu0)
        return np.asarray(self.mu(r), dtype=float)

    def dmu_of(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "newtonian":
            return np.zeros_like(r)
        if self.mu_prime is not None:
            return np.asarray(self.mu_prime(r), dtype=float)
        h = 1e-6 * np.maximum(1.0, r)
        return (self.mu_of(r + h) - self.mu_of(np.maximum(r - h, 0.0))) / (h + np.minimum(r, h))


def tensor_norm(D):
    """Frobenius norm over trailing (2, 2) axes."""
    D = np.asarray(D, dtype=float)
    return np.sqrt(np.sum(D * D, axis=(-2, -1)))


def stress_array(law: ConstitutiveLaw, D):
    """T(D) for an array of symmetric tensors with shape (..., 2, 2)."""
    D = np.asarray(D, dtype=float)
    r = tensor_norm(D)
    return law.mu_of(r)[..., None, None] * D


def stress(law: ConstitutiveLaw, D: SymTensor2) -> SymTensor2:
    """Stress of a single symmetric tensor."""
    mu = float(law.mu_of(D.norm()))
    return D.scaled(mu)


def tangent_coefficients(law: ConstitutiveLaw, D):
    """Coefficients (mu, beta) of the tangent dT[E] = mu E + beta (D:E) D.

    beta = mu'(r)/r with the removable singularity at r = 0 set to 0
    (valid for bounded mu'); shapes follow the leading axes of D.
    """
    D = np.asarray(D, dtype=float)
    r = tensor_norm(D)
    mu = law.mu_of(r)
    dmu = law.dmu_of(r)
    beta = np.where(r > 1e-14, dmu / np.where(r > 1e-14, r, 1.0), 0.0)
    return mu, beta


def _sample_sym(rng, n, radius):
    comps = rng.normal(size=(n, 3))
    D = np.zeros((n, 2, 2))
    D[:, 0, 0] = comps[:, 0]
    D[:, 1, 1] = comps[:, 1]
    D[:, 0, 1] = D[:, 1, 0] = comps[:, 2]
    norms = tensor_norm(D)
    norms[norms == 0] = 1.0
    radii = radius * rng.uniform(size=n) ** (1.0 / 3.0)
    return D * (radii / norms)[:, None, None]


def check_strong_monotonicity(law: ConstitutiveLaw, n_pairs=2000, radius=10.0, seed=0):
    """Sampled monotonicity quotient (T(C)-T(D)):(C-D)/|C-D|^2 against declared mT.

    Random symmetric pairs plus a collinear grid scan (which probes the
    radial curvature of mu(r) r, where thinning laws are weakest).  The
    estimate in ``stat`` may be used with a safety factor for smallness
    checks of nonlinear laws.
    """
    if n_pairs < 1:
        raise ParameterError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    C = _sample_sym(rng, n_pairs, radius)
    D = _sample_sym(rng, n_pairs, radius)
    diff = C - D
    dn2 = np.sum(diff * diff, axis=(-2, -1))
    keep = dn2 > 1e-16
    q_rand = np.sum((stress_array(law, C) - stress_array(law, D)) * diff, axis=(-2, -1))[keep] / dn2[keep]

    # collinear scan along a unit symmetric direction: quotient = (mu(r) r)' averaged
    E = np.array([[1.0, 0.5], [0.5, -0.3]])
    E /= tensor_norm(E)
    ts = np.linspace(0.0, radius, 2001)
    phi = law.mu_of(ts) * ts
    q_line = np.diff(phi) / np.diff(ts)

    m_hat = float(min(np.min(q_rand), np.min(q_line)))
    witness = None
    passed = m_hat >= law.mT - 1e-10
    if not passed:
        i = int(np.argmin(q_rand)) if np.min(q_rand) <= np.min(q_line) else None
        if i is not None:
            idx = np.nonzero(keep)[0][i]
            witness = (C[idx].tolist(), D[idx].tolist())
        else:
            j = int(np.argmin(q_line))
            witness = ((ts[j] * E).tolist(), (ts[j + 1] * E).tolist())
    return CheckReport(
        passed=passed,
        stat=m_hat,
        threshold=law.mT - 1e-10,
        label=f"strong monotonicity of {law.label or law.kind}",
        n_samples=int(np.sum(keep)) + len(q_line),
        seed=seed,
        witness=witness,
    )


def check_growth(law: ConstitutiveLaw, n_samples=2000, radius=10.0, seed=0):
    """Check |T(D)| <= a0 + a1 |D| on sampled tensors; failure carries a witness."""
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    D = _sample_sym(rng, n_samples, radius)
    D = np.concatenate([D, np.zeros((1, 2, 2)), radius * np.eye(2)[None, :, :]])
    r = tensor_norm(D)
    tn = tensor_norm(stress_array(law, D))
    denom = law.a0 + law.a1 * r
    ratio = np.where(denom > 0, tn / np.where(denom > 0, denom, 1.0), np.where(tn > 0, np.inf, 0.0))
    i = int(np.argmax(ratio))
    max_ratio = float(ratio[i])
    passed = max_ratio <= 1.0 + CHECK_TOL
    return CheckReport(
        passed=passed,
        stat=max_ratio,
        threshold=1.0 + CHECK_TOL,
        label=f"stress growth of {law.label or law.kind}",
        n_samples=len(D),
        seed=seed,
        witness=None if passed else (D[i].tolist(),),
    )


def monotonicity_constant(law: ConstitutiveLaw, seed=0):
    """Constant fed to solvers/smallness checks: exact for Newtonian, sampled
    with a safety factor for nonlinear laws."""
    if law.kind == "newtonian":
        return law.mu0
    rep = check_strong_monotonicity(law, n_pairs=2000, radius=20.0, seed=seed)
    return MONOTONICITY_SAFETY * rep.stat
