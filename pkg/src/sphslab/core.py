"""(Stochastic) port-Hamiltonian models in local coordinates.

A model bundles four structure evaluators J, R, g, xi with an energy
function H and its gradient.  The drift is ``(J - R) grad H + g u``;
noise enters through the columns of ``xi``, and the port outputs are
``y = g^T grad H`` (control port) and ``z = xi^T grad H`` (noise port).

Models are immutable after construction and all evaluators are pure, so
they are safe to call concurrently.  Models built by the factories in
this module accept batched states (leading axes before the state axis),
which the ensemble integrators exploit; this is advertised through the
``vectorized`` flag.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, NumericError

Array = np.ndarray

SKEW_TOL = 1e-10
SYM_TOL = 1e-10
# Smallest admissible eigenvalue of R: absorbs eigensolver noise without
# admitting genuinely indefinite dissipation matrices.
PSD_EIG_FLOOR = -1e-9

CANONICAL_KINDS = (
    "simple_spring",
    "damped_spring",
    "forced_spring",
    "forced_complex_spring",
    "duffing",
    "agent_ring",
    "stochastic_spring",
)


def finite_difference_gradient(f: Callable[[Array], float], x: Array) -> Array:
    """Central differences of a scalar map, per-coordinate step 1e-6*(1+|x_i|)."""
    x = np.asarray(x, dtype=float)
    steps = 1e-6 * (1.0 + np.abs(x))
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = steps[i]
        grad[i] = (float(f(x + e)) - float(f(x - e))) / (2.0 * steps[i])
    return grad


@dataclass(frozen=True)
class EnergyFunction:
    """Hamiltonian H with gradient and (optional) Hessian evaluators.

    ``value`` maps a state to a scalar, ``gradient`` to a length-n vector.
    When no Hessian is supplied, ``hessian_at`` falls back to central
    differences of the gradient; the analytic form is only needed for
    Ito energy accounting and second-order diagnostics.
    """

    value: Callable[[Array], float]
    gradient: Callable[[Array], Array]
    hessian: Optional[Callable[[Array], Array]] = None

    def hessian_at(self, x: Array) -> Array:
        if self.hessian is not None:
            return np.asarray(self.hessian(x), dtype=float)
        x = np.asarray(x, dtype=float)
        steps = 1e-6 * (1.0 + np.abs(x))
        cols = []
        for i in range(x.size):
            e = np.zeros_like(x)
            e[i] = steps[i]
            df = np.asarray(self.gradient(x + e), dtype=float) - np.asarray(
                self.gradient(x - e), dtype=float
            )
            cols.append(df / (2.0 * steps[i]))
        hess = np.column_stack(cols)
        return 0.5 * (hess + hess.T)

    def gradient_error(self, x: Array) -> float:
        """Relative mismatch between the gradient and finite differences."""
        g = np.asarray(self.gradient(x), dtype=float)
        fd = finite_difference_gradient(self.value, x)
        scale = max(float(np.linalg.norm(g)), float(np.linalg.norm(fd)), 1e-8)
        return float(np.linalg.norm(fd - g)) / scale


@dataclass(frozen=True)
class StructureField:
    """The four structure evaluators of Eq.-style local coordinates."""

    J: Callable[[Array], Array]
    R: Callable[[Array], Array]
    g: Callable[[Array], Array]
    xi: Callable[[Array], Array]


@dataclass(frozen=True)
class SPHSModel:
    """A stochastic port-Hamiltonian model in local coordinates.

    Attributes
    ----------
    n, m, k : state, control-port and noise-port dimensions.
    structure : evaluators for J (skew), R (sym. PSD), g (n x m), xi (n x k).
    energy : Hamiltonian with gradient (and optional Hessian).
    forcing : optional default control signal u(t, x) carried by forced
        systems; ``simulate`` uses it when no controller is passed.
    vectorized : evaluators accept batched states (leading axes).
    recipe : serializable construction record, when one exists.
    """

    n: int
    m: int
    k: int
    structure: StructureField
    energy: EnergyFunction
    name: str = "model"
    forcing: Optional[Callable[[float, Array], Array]] = None
    vectorized: bool = False
    constant_structure: bool = False
    recipe: Optional[dict] = None

    def J(self, x):
        return np.asarray(self.structure.J(x), dtype=float)

    def R(self, x):
        return np.asarray(self.structure.R(x), dtype=float)

    def g(self, x):
        return np.asarray(self.structure.g(x), dtype=float)

    def xi(self, x):
        return np.asarray(self.structure.xi(x), dtype=float)

    def H(self, x):
        return self.energy.value(np.asarray(x, dtype=float))

    def grad_H(self, x):
        return np.asarray(self.energy.gradient(x), dtype=float)

    def hessian_H(self, x):
        return self.energy.hessian_at(x)


@dataclass(frozen=True)
class PortSignals:
    """Control effort u with the conjugate outputs y = g^T grad H, z = xi^T grad H."""

    u: Array
    y: Array
    z: Array


@dataclass(frozen=True)
class Violation:
    field_name: str
    kind: str  # "skew" | "symmetry" | "psd"
    state_index: int
    magnitude: float


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple
    n_states: int

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "n_states": self.n_states,
            "violations": [
                {
                    "field": v.field_name,
                    "kind": v.kind,
                    "state_index": v.state_index,
                    "magnitude": v.magnitude,
                }
                for v in self.violations
            ],
        }


def _as_state(model: SPHSModel, x) -> Array:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n,):
        raise ConfigurationError(
            f"state has shape {x.shape}, expected ({model.n},) for model '{model.name}'"
        )
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite state for model '{model.name}'", state=x)
    return x


def _as_control(model: SPHSModel, u) -> Array:
    if u is None:
        return np.zeros(model.m)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (model.m,):
        raise ConfigurationError(
            f"control has shape {u.shape}, expected ({model.m},) for model '{model.name}'"
        )
    return u


def _expect_shape(name: str, a: Array, shape: tuple, model_name: str):
    if a.shape != shape:
        raise ConfigurationError(
            f"{name} evaluates to shape {a.shape}, expected {shape} (model '{model_name}')"
        )


def eval_dynamics(model: SPHSModel, x, u=None, t: float = 0.0):
    """Drift and diffusion of the model at state ``x`` under control ``u``.

    Returns ``(drift, diffusion)`` with drift = (J - R) grad H + g u and
    diffusion = xi(x).  Raises :class:`NumericError` if any evaluator
    output is non-finite.
    """
    x = _as_state(model, x)
    u = _as_control(model, u)
    J = model.J(x)
    R = model.R(x)
    g = model.g(x)
    xi = model.xi(x)
    _expect_shape("J", J, (model.n, model.n), model.name)
    _expect_shape("R", R, (model.n, model.n), model.name)
    _expect_shape("g", g, (model.n, model.m), model.name)
    _expect_shape("xi", xi, (model.n, model.k), model.name)
    gh = model.grad_H(x)
    _expect_shape("grad_H", gh, (model.n,), model.name)
    drift = (J - R) @ gh + g @ u
    if not (np.all(np.isfinite(drift)) and np.all(np.isfinite(xi))):
        raise NumericError(f"non-finite dynamics for model '{model.name}'", state=x)
    return drift, xi


def port_signals(model: SPHSModel, x, u=None) -> PortSignals:
    """Port outputs at a state: y = g^T grad H, z = xi^T grad H."""
    x = _as_state(model, x)
    gh = model.grad_H(x)
    return PortSignals(
        u=_as_control(model, u),
        y=model.g(x).T @ gh,
        z=model.xi(x).T @ gh,
    )


def validate_structure(model: SPHSModel, probe_states: Sequence) -> ValidationReport:
    """Check skew symmetry of J and symmetric positive semidefiniteness of R.

    Dimension mismatches raise :class:`ConfigurationError` naming the
    offending field; structural violations are collected per probe state
    with their magnitude.
    """
    probe_states = list(probe_states)
    if not probe_states:
        raise ConfigurationError("validate_structure needs at least one probe state")
    violations = []
    for i, x in enumerate(probe_states):
        x = _as_state(model, x)
        J = model.J(x)
        _expect_shape("J", J, (model.n, model.n), model.name)
        skew = float(np.max(np.abs(J + J.T))) if model.n else 0.0
        if skew > SKEW_TOL:
            violations.append(Violation("J", "skew", i, skew))
        R = model.R(x)
        _expect_shape("R", R, (model.n, model.n), model.name)
        asym = float(np.max(np.abs(R - R.T))) if model.n else 0.0
        if asym > SYM_TOL:
            violations.append(Violation("R", "symmetry", i, asym))
        if model.n:
            min_eig = float(np.linalg.eigvalsh(0.5 * (R + R.T)).min())
            if min_eig < PSD_EIG_FLOOR:
                violations.append(Violation("R", "psd", i, min_eig))
        _expect_shape("g", model.g(x), (model.n, model.m), model.name)
        _expect_shape("xi", model.xi(x), (model.n, model.k), model.name)
    return ValidationReport(violations=tuple(violations), n_states=len(probe_states))


# ---------------------------------------------------------------------------
# canonical systems
# ---------------------------------------------------------------------------

_CANONICAL_J2 = np.array([[0.0, 1.0], [-1.0, 0.0]])
_FORCE_PORT = np.array([[0.0], [1.0]])


def _const(mat: Array) -> Callable[[Array], Array]:
    mat = np.asarray(mat, dtype=float)

    def f(x):
        return mat

    return f


def _spring_energy(mass: float, stiffness: float) -> EnergyFunction:
    hess = np.diag([stiffness, 1.0 / mass])
    coef = np.array([stiffness, 1.0 / mass])

    def value(x):
        q = x[..., 0]
        p = x[..., 1]
        return 0.5 * stiffness * q**2 + p**2 / (2.0 * mass)

    def gradient(x):
        return np.asarray(x) * coef

    return EnergyFunction(value=value, gradient=gradient, hessian=lambda x: hess)


def _double_well_energy() -> EnergyFunction:
    def value(x):
        q = x[..., 0]
        p = x[..., 1]
        return 0.5 * p**2 - 0.5 * q**2 + 0.25 * q**4

    def gradient(x):
        q = x[..., 0]
        p = x[..., 1]
        return np.stack([-q + q**3, p], axis=-1)

    def hessian(x):
        q = x[..., 0]
        return np.array([[-1.0 + 3.0 * q**2, 0.0], [0.0, 1.0]])

    return EnergyFunction(value=value, gradient=gradient, hessian=hessian)


def _sin_forcing(amplitude: float, omega: float):
    def u(t, x):
        return np.array([amplitude * np.sin(omega * t)])

    return u


def _sin_sin_forcing(amplitude: float, omega: float):
    def u(t, x):
        return np.array([amplitude * np.sin(omega * t) * np.sin(2.0 * omega * t)])

    return u


def _merge_params(kind: str, params: Optional[dict], defaults: dict, required=()) -> dict:
    params = dict(params or {})
    unknown = set(params) - set(defaults) - set(required)
    if unknown:
        raise ConfigurationError(f"unknown parameter(s) {sorted(unknown)} for kind '{kind}'")
    missing = [key for key in required if key not in params]
    if missing:
        raise ConfigurationError(f"missing parameter(s) {missing} for kind '{kind}'")
    out = dict(defaults)
    out.update(params)
    return out


def make_canonical_system(kind: str, params: Optional[dict] = None) -> SPHSModel:
    """Build one of the canonical systems by name.

    Kinds: simple_spring, damped_spring, forced_spring,
    forced_complex_spring, duffing, agent_ring, stochastic_spring.
    Forced systems carry their time-dependent input through the g-port
    (``forcing`` attribute); the stochastic spring has additive momentum
    noise xi = (0, sigma)^T.
    """
    if kind == "simple_spring":
        p = _merge_params(kind, params, {"m": 1.0, "k": 1.0})
        return _spring_model(kind, p["m"], p["k"], delta=0.0)
    if kind == "damped_spring":
        p = _merge_params(kind, params, {"m": 1.0, "k": 1.0, "delta": 0.3})
        return _spring_model(kind, p["m"], p["k"], delta=p["delta"])
    if kind == "forced_spring":
        p = _merge_params(kind, params, {"m": 1.0, "k": 1.0, "F0": 0.5, "omega": 1.0})
        model = _spring_model(kind, p["m"], p["k"], delta=0.0)
        return _with(model, forcing=_sin_forcing(p["F0"], p["omega"]), recipe={"kind": kind, "params": p})
    if kind == "forced_complex_spring":
        p = _merge_params(kind, params, {"m": 1.0, "k": 1.0, "F0": 0.5, "omega": 1.0})
        model = _spring_model(kind, p["m"], p["k"], delta=0.0)
        return _with(model, forcing=_sin_sin_forcing(p["F0"], p["omega"]), recipe={"kind": kind, "params": p})
    if kind == "duffing":
        # Double-well potential, periodic forcing through the momentum port.
        # Defaults sit in the classic chaotic regime; the often-quoted
        # (F0, omega) = (0.39, 1.4) settles onto a period-1 orbit here.
        p = _merge_params(kind, params, {"delta": 0.3, "F0": 0.5, "omega": 1.2})
        structure = StructureField(
            J=_const(_CANONICAL_J2),
            R=_const(np.diag([0.0, p["delta"]])),
            g=_const(_FORCE_PORT),
            xi=_const(np.zeros((2, 0))),
        )
        return SPHSModel(
            n=2,
            m=1,
            k=0,
            structure=structure,
            energy=_double_well_energy(),
            name="duffing",
            forcing=_sin_forcing(p["F0"], p["omega"]),
            vectorized=True,
            constant_structure=True,
            recipe={"kind": kind, "params": p},
        )
    if kind == "stochastic_spring":
        p = _merge_params(kind, params, {"m": 1.0, "k": 1.0, "delta": 0.0}, required=("sigma",))
        model = _spring_model(kind, p["m"], p["k"], delta=p["delta"])
        xi = np.array([[0.0], [float(p["sigma"])]])
        structure = StructureField(J=model.structure.J, R=model.structure.R, g=model.structure.g, xi=_const(xi))
        return _with(model, structure=structure, k=1, recipe={"kind": kind, "params": p})
    if kind == "agent_ring":
        from .agents import RingParams, build_ring_model

        p = _merge_params(
            kind,
            params,
            {"alpha": 1.0, "beta": 1.0, "sigma": 0.2, "offset": 1},
            required=("N",),
        )
        return build_ring_model(
            RingParams(
                n_agents=int(p["N"]),
                alpha=p["alpha"],
                beta=p["beta"],
                sigma_noise=p["sigma"],
                interaction_offset=int(p["offset"]),
            )
        )
    raise ConfigurationError(f"unknown canonical kind '{kind}' (choose from {CANONICAL_KINDS})")


def _spring_model(kind: str, mass: float, stiffness: float, delta: float) -> SPHSModel:
    if mass <= 0 or stiffness <= 0:
        raise ConfigurationError(f"kind '{kind}' needs m > 0 and k > 0")
    if delta < 0:
        raise ConfigurationError(f"kind '{kind}' needs delta >= 0")
    structure = StructureField(
        J=_const(_CANONICAL_J2),
        R=_const(np.diag([0.0, float(delta)])),
        g=_const(_FORCE_PORT),
        xi=_const(np.zeros((2, 0))),
    )
    recipe_params = {"m": mass, "k": stiffness}
    if kind == "damped_spring":
        recipe_params["delta"] = delta
    return SPHSModel(
        n=2,
        m=1,
        k=0,
        structure=structure,
        energy=_spring_energy(mass, stiffness),
        name=kind,
        vectorized=True,
        constant_structure=True,
        recipe={"kind": kind, "params": recipe_params},
    )


def _with(model: SPHSModel, **changes) -> SPHSModel:
    from dataclasses import replace

    return replace(model, **changes)


def linear_model(J, R, g=None, xi=None, Q=None, name: str = "linear") -> SPHSModel:
    """Explicit linear (S)PHS: constant matrices and quadratic H = x^T Q x / 2."""
    J = np.atleast_2d(np.asarray(J, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = J.shape[0]
    if J.shape != (n, n) or R.shape != (n, n):
        raise ConfigurationError("linear model: J and R must be square of equal size")
    g = np.zeros((n, 0)) if g is None else np.asarray(g, dtype=float).reshape(n, -1)
    xi = np.zeros((n, 0)) if xi is None else np.asarray(xi, dtype=float).reshape(n, -1)
    if Q is None:
        Q = np.eye(n)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if Q.shape != (n, n):
        raise ConfigurationError("linear model: Q must be n x n")
    if np.max(np.abs(Q - Q.T)) > SYM_TOL:
        raise ConfigurationError("linear model: Q must be symmetric")
    if np.linalg.eigvalsh(Q).min() < PSD_EIG_FLOOR:
        raise ConfigurationError("linear model: Q must be positive semidefinite")

    def value(x):
        return 0.5 * np.einsum("...i,ij,...j->...", x, Q, x)

    def gradient(x):
        return np.asarray(x) @ Q.T

    energy = EnergyFunction(value=value, gradient=gradient, hessian=lambda x: Q)
    structure = StructureField(J=_const(J), R=_const(R), g=_const(g), xi=_const(xi))
    return SPHSModel(
        n=n,
        m=g.shape[1],
        k=xi.shape[1],
        structure=structure,
        energy=energy,
        name=name,
        vectorized=True,
        constant_structure=True,
        recipe={
            "kind": "linear",
            "params": {
                "J": J.tolist(),
                "R": R.tolist(),
                "g": g.tolist(),
                "xi": xi.tolist(),
                "Q": Q.tolist(),
            },
        },
    )


# ---------------------------------------------------------------------------
# model definition files
# ---------------------------------------------------------------------------

_MODEL_KEYS = {"name", "n", "m", "k", "kind", "params"}


def model_from_dict(spec: dict) -> SPHSModel:
    """Construct a model from its JSON definition (strict keys)."""
    if not isinstance(spec, dict):
        raise ConfigurationError("model definition must be a JSON object")
    unknown = set(spec) - _MODEL_KEYS
    if unknown:
        raise ConfigurationError(f"unknown model definition key(s) {sorted(unknown)}")
    if "kind" not in spec:
        raise ConfigurationError("model definition needs a 'kind'")
    kind = spec["kind"]
    params = spec.get("params", {})
    if kind == "linear":
        allowed = {"J", "R", "g", "xi", "Q"}
        unknown = set(params) - allowed
        if unknown:
            raise ConfigurationError(f"unknown linear-model parameter(s) {sorted(unknown)}")
        if "J" not in params or "R" not in params:
            raise ConfigurationError("linear model definition needs 'J' and 'R'")
        model = linear_model(
            params["J"],
            params["R"],
            params.get("g"),
            params.get("xi"),
            params.get("Q"),
            name=spec.get("name", "linear"),
        )
    elif kind == "composite":
        from .interconnect import composite_from_recipe

        model = composite_from_recipe({"kind": "composite", "params": params})
    else:
        model = make_canonical_system(kind, params)
        if "name" in spec:
            model = _with(model, name=spec["name"])
    for dim in ("n", "m", "k"):
        if dim in spec and int(spec[dim]) != getattr(model, dim):
            raise ConfigurationError(
                f"declared {dim}={spec[dim]} does not match constructed {dim}={getattr(model, dim)}"
            )
    return model


def model_to_dict(model: SPHSModel) -> dict:
    if model.recipe is None:
        raise ConfigurationError(
            f"model '{model.name}' has no serializable construction recipe"
        )
    out = {"name": model.name, "n": model.n, "m": model.m, "k": model.k}
    out.update(model.recipe)
    return out


def load_model(path) -> SPHSModel:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def save_model(model: SPHSModel, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=2, sort_keys=True)
        fh.write("\n")
