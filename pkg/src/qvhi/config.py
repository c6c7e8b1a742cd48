"""Scenario configuration: JSON schema, validation, and the expression grammar.

A scenario file is one JSON object; ``ScenarioConfig.from_json`` and
``to_json`` round-trip exactly.  Scalar fields over the domain (body force
components, the constraint weight rho) use a small arithmetic grammar over
the coordinates: ``+ - * / **``, ``sin``, ``cos``, ``exp``, the names
``x``, ``y``, ``pi``, and numeric literals.
"""

from __future__ import annotations

import ast
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .constitutive import ConstitutiveLaw
from .errors import ParameterError
from .fem import ConstraintFunctionals, build_space
from .mesh import SIDES, generate_rectangle, load_mesh
from .potentials import SlipModel, SlipPotential, WeightFunction

_ALLOWED_CALLS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
_ALLOWED_NAMES = {"x", "y", "pi"}
_ALLOWED_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)


def _check_node(node):
    if isinstance(node, ast.Expression):
        _check_node(node.body)
    elif isinstance(node, ast.BinOp) and isinstance(node.op, _ALLOWED_BINOPS):
        _check_node(node.left)
        _check_node(node.right)
    elif isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.UAdd, ast.USub)):
        _check_node(node.operand)
    elif isinstance(node, ast.Call):
        if not (isinstance(node.func, ast.Name) and node.func.id in _ALLOWED_CALLS
                and not node.keywords and len(node.args) == 1):
            raise ParameterError(f"call not allowed in expression: {ast.dump(node)}")
        _check_node(node.args[0])
    elif isinstance(node, ast.Name):
        if node.id not in _ALLOWED_NAMES:
            raise ParameterError(f"unknown name {node.id!r} in expression")
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)):
            raise ParameterError(f"literal {node.value!r} not allowed in expression")
    else:
        raise ParameterError(f"syntax not allowed in expression: {type(node).__name__}")


def parse_expression(src):
    """Compile a scalar expression of (x, y) into a vectorized evaluator."""
    if isinstance(src, (int, float)):
        value = float(src)
        return lambda x, y: np.full_like(np.asarray(x, dtype=float), value)
    try:
        tree = ast.parse(str(src), mode="eval")
    except SyntaxError as exc:
        raise ParameterError(f"cannot parse expression {src!r}: {exc}")
    _check_node(tree)
    code = compile(tree, "<scenario-expression>", "eval")
    env = dict(_ALLOWED_CALLS, pi=math.pi)

    def evaluator(x, y, _code=code, _env=env):
        out = eval(_code, {"__builtins__": {}}, dict(_env, x=np.asarray(x, dtype=float),
                                                     y=np.asarray(y, dtype=float)))
        return np.broadcast_to(np.asarray(out, dtype=float), np.asarray(x).shape).copy()

    return evaluator


@dataclass
class MeshSpec:
    kind: str = "rectangle"
    lx: float = 1.0
    ly: float = 1.0
    nx: int = 8
    ny: int = 8
    gamma1_sides: list = field(default_factory=list)
    path: Optional[str] = None

    def validate(self):
        if self.kind not in ("rectangle", "file"):
            raise ParameterError(f"unknown mesh kind {self.kind!r}")
        if self.kind == "rectangle":
            if self.lx <= 0 or self.ly <= 0 or self.nx < 1 or self.ny < 1:
                raise ParameterError("rectangle mesh needs lx, ly > 0 and nx, ny >= 1")
            bad = set(self.gamma1_sides) - set(SIDES)
            if bad:
                raise ParameterError(f"unknown gamma1 sides {sorted(bad)}")
        elif not self.path:
            raise ParameterError("file mesh needs a path")

    def build(self):
        self.validate()
        if self.kind == "rectangle":
            return generate_rectangle(self.lx, self.ly, self.nx, self.ny,
                                      frozenset(self.gamma1_sides))
        return load_mesh(self.path)


@dataclass
class LawSpec:
    kind: str = "newtonian"
    mu0: float = 1.0
    mu_inf: float = 0.5
    mu_ref: float = 1.0
    kappa: float = 1.0
    q: float = 1.5

    def validate(self):
        if self.kind not in ("newtonian", "carreau"):
            raise ParameterError(f"unknown law kind {self.kind!r}")
        if self.kind == "newtonian" and self.mu0 <= 0:
            raise ParameterError("mu0 must be positive")

    def build(self):
        self.validate()
        if self.kind == "newtonian":
            return ConstitutiveLaw.newtonian(self.mu0)
        return ConstitutiveLaw.carreau(self.mu_inf, self.mu_ref, self.kappa, self.q)


@dataclass
class SlipSpec:
    potential: str = "none"       # none | jlambda | norm | quadratic
    lam: float = 1.0
    coeff: float = 1.0
    weight: str = "constant"      # constant | rational
    h: float = 1.0
    h0: float = 0.5
    h1: float = 1.0
    m_j: Optional[float] = None

    def validate(self):
        if self.potential not in ("none", "jlambda", "norm", "quadratic"):
            raise ParameterError(f"unknown slip potential {self.potential!r}")
        if self.potential == "jlambda" and self.lam <= 0:
            raise ParameterError("jlambda slip needs lam > 0")
        if self.weight not in ("constant", "rational"):
            raise ParameterError(f"unknown weight kind {self.weight!r}")
        if self.weight == "constant" and self.h <= 0:
            raise ParameterError("constant weight needs h > 0")
        if self.weight == "rational" and not (0 < self.h0 <= self.h1):
            raise ParameterError("rational weight needs 0 < h0 <= h1")

    def build(self):
        self.validate()
        if self.potential == "jlambda":
            pot = SlipPotential.jlambda_kind(self.lam)
        elif self.potential == "norm":
            pot = SlipPotential.norm_convex()
        elif self.potential == "quadratic":
            pot = SlipPotential.quadratic(self.coeff)
        else:
            pot = SlipPotential.zero()
        if self.weight == "constant":
            w = WeightFunction.constant(self.h)
        else:
            w = WeightFunction.rational(self.h0, self.h1)
        m_j = self.m_j
        if m_j is None and self.potential in ("none", "norm", "quadratic"):
            m_j = 0.0  # convex built-ins
        return SlipModel(weight=w, potential=pot, m_j=m_j)


@dataclass
class ConstraintSpec:
    k: str = "vseminorm"
    nu0: float = 1.0
    r: str = "constant"
    r_const: float = 1.0
    alpha: float = 1.0
    rho: object = 0.0            # expression string or number

    def validate(self):
        if self.k not in ("vseminorm", "dissipation_sq"):
            raise ParameterError(f"unknown constraint kind {self.k!r}")
        if self.r not in ("constant", "affine_l1"):
            raise ParameterError(f"unknown bound kind {self.r!r}")
        if self.r == "constant" and self.r_const <= 0:
            raise ParameterError("constant bound must be positive")
        if self.r == "affine_l1" and self.alpha <= 0:
            raise ParameterError("affine_l1 bound needs alpha > 0")
        if self.k == "dissipation_sq" and self.nu0 <= 0:
            raise ParameterError("dissipation_sq needs nu0 > 0")

    def build(self):
        self.validate()
        rho_field = None
        if self.r == "affine_l1":
            ev = parse_expression(self.rho)
            rho_field = lambda pts, _ev=ev: _ev(pts[:, 0], pts[:, 1])
        return ConstraintFunctionals(k_kind=self.k, nu0=self.nu0, r_kind=self.r,
                                     alpha=self.alpha, rho=rho_field, r_const=self.r_const)


@dataclass
class SolverSpec:
    outer_tol: Optional[float] = None
    inner_tol: Optional[float] = None
    max_outer: int = 100
    max_inner: int = 400
    damping: float = 1.0
    seed: int = 0
    force_run: bool = False

    def validate(self):
        for name in ("outer_tol", "inner_tol"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ParameterError(f"{name} must be positive")
        if not (0 < self.damping <= 1):
            raise ParameterError("damping must lie in (0, 1]")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ParameterError("iteration limits must be >= 1")


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    experiment: str = "single"
    mesh: MeshSpec = field(default_factory=MeshSpec)
    law: LawSpec = field(default_factory=LawSpec)
    slip: SlipSpec = field(default_factory=SlipSpec)
    g_yield: float = 0.0
    body_force: list = field(default_factory=lambda: [0.0, 0.0])
    constraints: ConstraintSpec = field(default_factory=ConstraintSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    experiment_params: dict = field(default_factory=dict)

    EXPERIMENTS = ("single", "manufactured", "newtonian_limit", "f_perturbation",
                   "uniqueness")

    def validate(self):
        if self.experiment not in self.EXPERIMENTS:
            raise ParameterError(f"unknown experiment kind {self.experiment!r}")
        if self.g_yield < 0:
            raise ParameterError("g_yield must be nonnegative")
        if len(self.body_force) != 2:
            raise ParameterError("body_force must have two components")
        for comp in self.body_force:
            parse_expression(comp)  # syntax check
        self.mesh.validate()
        self.law.validate()
        self.slip.validate()
        self.constraints.validate()
        self.solver.validate()

    # -- (de)serialization --------------------------------------------

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        cfg = cls(
            name=data.get("name", "scenario"),
            experiment=data.get("experiment", "single"),
            mesh=MeshSpec(**data.get("mesh", {})),
            law=LawSpec(**data.get("law", {})),
            slip=SlipSpec(**data.get("slip", {})),
            g_yield=data.get("g_yield", 0.0),
            body_force=list(data.get("body_force", [0.0, 0.0])),
            constraints=ConstraintSpec(**data.get("constraints", {})),
            solver=SolverSpec(**data.get("solver", {})),
            experiment_params=dict(data.get("experiment_params", {})),
        )
        cfg.validate()
        return cfg

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    # -- builders -------------------------------------------------------

    def build_force(self):
        fx = parse_expression(self.body_force[0])
        fy = parse_expression(self.body_force[1])

        def force(pts, _fx=fx, _fy=fy):
            return np.column_stack([_fx(pts[:, 0], pts[:, 1]), _fy(pts[:, 0], pts[:, 1])])

        return force

    def build_problem(self):
        """Assemble mesh, space, and operators for this scenario."""
        from .fem import assemble  # local import keeps module load light

        self.validate()
        mesh = self.mesh.build()
        space = build_space(mesh)
        problem = assemble(space, self.law.build(), self.build_force(),
                           self.slip.build(), self.g_yield, self.constraints.build(),
                           seed=self.solver.seed)
        return problem
