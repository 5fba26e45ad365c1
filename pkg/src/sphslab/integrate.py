"""Stochastic and structure-preserving time integration.

Schemes
-------
``euler_maruyama``     explicit Ito step
``heun_stratonovich``  predictor/corrector midpoint step (Stratonovich)
``collocation``        implicit Gauss-Legendre collocation (s = 1 is the
                       stochastic implicit midpoint rule); conserves
                       quadratic invariants of deterministic lossless
                       systems.

Noise increments are truncated centred Gaussians of variance h, one
Philox counter-stream per (path, noise dimension).  Keying streams by
noise dimension means a subsystem sees the same increments whether it is
simulated alone or as a leading block of a composite model, and makes
every trajectory a pure function of (seed, path index) regardless of
chunking or worker count.

Models whose evaluators broadcast over leading state axes
(``model.vectorized``) are stepped in path batches; everything else
falls back to a per-path loop over the public step functions.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .core import SPHSModel, eval_dynamics, _as_state, _as_control
from .errors import ConfigurationError, IntegrationError, NumericError

Array = np.ndarray

SCHEMES = ("euler_maruyama", "heun_stratonovich", "collocation")
# Schemes whose noise quadrature is Stratonovich (midpoint) consistent.
STRATONOVICH_SCHEMES = ("heun_stratonovich", "collocation")

_DEFAULT_CHUNK = 512


@dataclass(frozen=True)
class IntegratorConfig:
    scheme: str = "euler_maruyama"
    h: float = 1e-2
    stages: int = 1
    truncation_bound: float = 4.0
    implicit_tol: float = 1e-12
    implicit_max_iter: int = 100

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"unknown scheme '{self.scheme}' (choose from {SCHEMES})")
        if not (self.h > 0):
            raise ConfigurationError("step size h must be > 0")
        if not (1 <= self.stages <= 3):
            raise ConfigurationError("collocation stages must lie in [1, 3]")
        if not (self.truncation_bound > 0):
            raise ConfigurationError("truncation_bound must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Trajectory:
    """One realized path: grid, states and every recorded port signal.

    ``outputs_z_mid`` holds the noise-port effort at midpoint states
    (average of adjacent grid states) for Stratonovich-consistent
    schemes; it is None for Ito runs.
    """

    times: Array          # (K+1,)
    states: Array         # (K+1, n)
    noise_increments: Array  # (K, k)
    controls: Array       # (K, m)
    outputs_y: Array      # (K, m)
    outputs_z: Array      # (K, k)
    scheme: str
    outputs_z_mid: Optional[Array] = None

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def h(self) -> float:
        return float(self.times[1] - self.times[0])


@dataclass
class Ensemble:
    """A seeded bundle of trajectories plus the config that produced them."""

    seed: int
    trajectories: list
    model: SPHSModel
    config: IntegratorConfig
    n_paths: int
    horizon: float
    first_path: int = 0

    def states_at_index(self, idx: int) -> Array:
        return np.stack([tr.states[idx] for tr in self.trajectories])

    def summary_dict(self) -> dict:
        return ensemble_summary(self)


# ---------------------------------------------------------------------------
# noise streams
# ---------------------------------------------------------------------------


def path_noise_rng(seed: int, path: int, dim: int) -> np.random.Generator:
    """Counter-based stream for one (path, noise dimension) pair."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(path), int(dim)))
    return np.random.Generator(np.random.Philox(ss))


def sample_truncated_gaussian(h: float, bound: float, rng: np.random.Generator, size=None):
    """N(0, h) conditioned on |dW| <= bound * sqrt(h), by inverse CDF.

    One uniform consumed per sample; the rng state advances
    deterministically.
    """
    if not (h > 0 and bound > 0):
        raise ConfigurationError("sample_truncated_gaussian needs h > 0 and bound > 0")
    lo = ndtr(-bound)
    hi = ndtr(bound)
    u = rng.random(size)
    return math.sqrt(h) * ndtri(lo + (hi - lo) * u)


def truncated_gaussian_variance(h: float, bound: float) -> float:
    """Closed-form variance of the truncated law (oracle for tests)."""
    b = float(bound)
    phi = math.exp(-0.5 * b * b) / math.sqrt(2.0 * math.pi)
    mass = 2.0 * ndtr(b) - 1.0
    return h * (1.0 - 2.0 * b * phi / mass)


def draw_noise_matrix(seed: int, path: int, K: int, k: int, h: float, bound: float) -> Array:
    """The (K, k) increment matrix of one path, column d from stream (path, d)."""
    if k == 0:
        return np.zeros((K, 0))
    cols = [
        sample_truncated_gaussian(h, bound, path_noise_rng(seed, path, d), size=K)
        for d in range(k)
    ]
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# single-state step functions
# ---------------------------------------------------------------------------


def euler_maruyama_step(model: SPHSModel, x, u, t: float, h: float, dW) -> Array:
    """x + drift(x, u) h + xi(x) dW  (Ito reading)."""
    drift, xi = eval_dynamics(model, x, u, t)
    dW = np.asarray(dW, dtype=float).reshape(model.k)
    out = np.asarray(x, dtype=float) + h * drift + xi @ dW
    if not np.all(np.isfinite(out)):
        raise NumericError(f"Euler-Maruyama step produced non-finite state", state=out)
    return out


def heun_stratonovich_step(model: SPHSModel, x, u, t: float, h: float, dW) -> Array:
    """Predictor/corrector midpoint step, Stratonovich consistent."""
    x = np.asarray(x, dtype=float)
    dW = np.asarray(dW, dtype=float).reshape(model.k)
    b0, xi0 = eval_dynamics(model, x, u, t)
    xp = x + h * b0 + xi0 @ dW
    b1, xi1 = eval_dynamics(model, xp, u, t + h)
    out = x + 0.5 * h * (b0 + b1) + 0.5 * (xi0 + xi1) @ dW
    if not np.all(np.isfinite(out)):
        raise NumericError("Heun step produced non-finite state", state=out)
    return out


def ito_drift_correction(model: SPHSModel, x) -> Array:
    """Stratonovich -> Ito drift adjustment 0.5 sum_i (d xi_i / dx) xi_i.

    Column derivatives by central differences with step 1e-6.
    """
    x = _as_state(model, x)
    xi0 = model.xi(x)
    step = 1e-6
    corr = np.zeros(model.n)
    for j in range(model.n):
        e = np.zeros(model.n)
        e[j] = step
        d_j = (model.xi(x + e) - model.xi(x - e)) / (2.0 * step)  # (n, k)
        corr += d_j @ xi0[j, :]
    return 0.5 * corr


@lru_cache(maxsize=8)
def collocation_tableau(s: int):
    """Gauss-Legendre nodes on [0, 1] with Lagrange quadrature coefficients.

    Returns (c, A, b): nodes c_i, stage coefficients
    A[i, j] = int_0^{c_i} l_j and final weights b[j] = int_0^1 l_j.
    """
    nodes, _ = np.polynomial.legendre.leggauss(s)
    c = 0.5 * (nodes + 1.0)
    A = np.zeros((s, s))
    b = np.zeros(s)
    for j in range(s):
        lj = np.poly1d([1.0])
        for i in range(s):
            if i != j:
                lj = lj * np.poly1d([1.0, -c[i]]) / (c[j] - c[i])
        LJ = lj.integ()
        b[j] = LJ(1.0) - LJ(0.0)
        for i in range(s):
            A[i, j] = LJ(c[i]) - LJ(0.0)
    return c, A, b


@dataclass(frozen=True)
class StageDiagnostics:
    iterations: int
    residual: float
    stage_states: Array  # (s, n)


def collocation_step(model: SPHSModel, x, u_stages, t: float, h: float, dW, config: IntegratorConfig):
    """One implicit collocation step; returns (next state, stage diagnostics).

    Stage states solve X_i = x + sum_j A[i,j] (h v_j + xi(X_j) dW) with
    v_j the drift at stage j, by damped fixed-point iteration; the noise
    enters every stage through the same quadrature weights as the drift.
    """
    s = config.stages
    c, A, b = collocation_tableau(s)
    x = np.asarray(x, dtype=float)
    dW = np.asarray(dW, dtype=float).reshape(model.k)
    u_stages = np.asarray(u_stages, dtype=float).reshape(s, model.m)

    def increments(X):
        """h v_j + xi(X_j) dW for every stage (s, n)."""
        out = np.empty((s, model.n))
        for j in range(s):
            drift, xi = eval_dynamics(model, X[j], u_stages[j], t + c[j] * h)
            out[j] = h * drift + xi @ dW
        return out

    # explicit Euler predictor to the stage times
    f0 = increments(np.tile(x, (s, 1)))
    X = x + c[:, None] * f0[0][None, :]
    damping = 1.0
    prev_res = math.inf
    converged = False
    iterations = 0
    for iterations in range(1, config.implicit_max_iter + 1):
        F = increments(X)
        target = x[None, :] + A @ F
        res = float(np.max(np.abs(target - X))) if X.size else 0.0
        if res > prev_res:
            damping = max(0.125, 0.5 * damping)
        prev_res = res
        X = X + damping * (target - X)
        if res <= config.implicit_tol:
            converged = True
            break
    if not converged:
        raise IntegrationError(
            f"collocation stage solve did not converge (residual {prev_res:.3e})",
            residual=prev_res,
        )
    F = increments(X)
    x1 = x + b @ F
    if not np.all(np.isfinite(x1)):
        raise NumericError("collocation step produced non-finite state", state=x1)
    return x1, StageDiagnostics(iterations=iterations, residual=prev_res, stage_states=X)


# ---------------------------------------------------------------------------
# ensemble simulation
# ---------------------------------------------------------------------------


def resolve_controller(model: SPHSModel, controller):
    """Controller priority: explicit argument, model forcing, zero input."""
    if controller is not None:
        return controller
    if model.forcing is not None:
        return model.forcing
    zero = np.zeros(model.m)
    return lambda t, x: zero


def _steps_for(T: float, h: float) -> int:
    K = int(round(T / h))
    if K < 1 or abs(K * h - T) > 1e-9 * max(1.0, abs(T)):
        raise ConfigurationError(f"horizon T={T} is not a positive multiple of h={h}")
    return K


def _control_batch(ctrl, t, X, m):
    U = np.asarray(ctrl(t, X), dtype=float)
    P = X.shape[0]
    if U.ndim <= 1:
        U = np.broadcast_to(U.reshape(-1), (P, m)) if m else np.zeros((P, 0))
    return U


def _mat(model_field, X):
    """Evaluate a structure field on a batch; constants stay unbatched."""
    return np.asarray(model_field(X), dtype=float)


def _apply(M, v):
    """Batched matrix-vector product with broadcasting over leading axes."""
    return np.einsum("...ij,...j->...i", M, v)


def _batch_drift(model, X, U):
    gh = np.asarray(model.energy.gradient(X), dtype=float)
    JmR = _mat(model.structure.J, X) - _mat(model.structure.R, X)
    drift = _apply(JmR, gh)
    if model.m:
        drift = drift + _apply(_mat(model.structure.g, X), U)
    return drift, gh


def _port_T(field_eval, X, gh):
    """g(x)^T grad H for a batch; handles constant and batched fields."""
    M = np.asarray(field_eval(X), dtype=float)
    return np.einsum("...ij,...i->...j", M, gh)


def _check_finite(X, paths, step):
    # cheap screen first: NaN/Inf propagate through the sum
    if math.isfinite(float(X.sum())):
        return
    bad = ~np.all(np.isfinite(X), axis=-1)
    p = int(np.argmax(bad))
    raise NumericError(
        f"non-finite state at path {paths[p]}, step {step}",
        state=X[p],
        path=paths[p],
        step=step,
    )


def _batch_engine(model, ctrl, x0, K, config, seed, paths, noise_override, t0):
    P = len(paths)
    n, m, k = model.n, model.m, model.k
    h = config.h
    times = t0 + h * np.arange(K + 1)
    if noise_override is not None:
        dW_all = np.stack([np.asarray(noise_override(p), dtype=float).reshape(K, k) for p in paths])
    else:
        dW_all = np.stack(
            [draw_noise_matrix(seed, p, K, k, h, config.truncation_bound) for p in paths]
        )
    states = np.empty((P, K + 1, n))
    controls = np.zeros((P, K, m))
    ys = np.zeros((P, K, m))
    zs = np.zeros((P, K, k))
    states[:, 0] = x0

    strat = config.scheme in STRATONOVICH_SCHEMES
    c_nodes, A_tab, b_tab = collocation_tableau(config.stages)
    s = config.stages
    grad = model.energy.gradient
    const = model.constant_structure
    x_probe = np.asarray(x0, dtype=float)
    if const:
        JmR_T = (model.J(x_probe) - model.R(x_probe)).T
        g_T = model.g(x_probe).T if m else None
        xi_T = model.xi(x_probe).T if k else None

        def drift_at(X, U):
            d = np.asarray(grad(X), dtype=float) @ JmR_T
            return d + U @ g_T if m else d

        def noise_at(X, dW):
            return dW @ xi_T
    else:

        def drift_at(X, U):
            d, _ = _batch_drift(model, X, U)
            return d

        def noise_at(X, dW):
            return _apply(_mat(model.structure.xi, X), dW)

    F_prev = None  # warm start carried between collocation steps
    X = states[:, 0].copy()
    for j in range(K):
        t = float(times[j])
        _check_finite(X, paths, j)
        U = _control_batch(ctrl, t, X, m)
        gh = np.asarray(grad(X), dtype=float)
        controls[:, j] = U
        if m:
            ys[:, j] = gh @ g_T.T if const else _port_T(model.structure.g, X, gh)
        if k:
            zs[:, j] = gh @ xi_T.T if const else _port_T(model.structure.xi, X, gh)
        dW = dW_all[:, j]

        if config.scheme == "euler_maruyama":
            X1 = X + h * drift_at(X, U)
            if k:
                X1 = X1 + noise_at(X, dW)
        elif config.scheme == "heun_stratonovich":
            b0 = drift_at(X, U)
            n0 = noise_at(X, dW) if k else 0.0
            Xp = X + h * b0 + n0
            U1 = _control_batch(ctrl, t + h, Xp, m)
            b1 = drift_at(Xp, U1)
            X1 = X + 0.5 * h * (b0 + b1)
            if k:
                X1 = X1 + 0.5 * (n0 + noise_at(Xp, dW))
        elif s == 1:  # implicit midpoint, the common case kept lean
            a11 = A_tab[0, 0]
            b1 = b_tab[0]
            Um = _control_batch(ctrl, t + c_nodes[0] * h, X, m)
            if F_prev is None:
                f = h * drift_at(X, Um)
                if k:
                    f = f + noise_at(X, dW)
            else:
                f = F_prev
            Z1 = X + a11 * f
            damping = 1.0
            prev_res = math.inf
            converged = False
            for _ in range(config.implicit_max_iter):
                f = h * drift_at(Z1, Um)
                if k:
                    f = f + noise_at(Z1, dW)
                target = X + a11 * f
                res = float(np.max(np.abs(target - Z1)))
                if res > prev_res:
                    damping = max(0.125, 0.5 * damping)
                prev_res = res
                Z1 = Z1 + damping * (target - Z1)
                if res <= config.implicit_tol:
                    converged = True
                    break
            if not converged:
                raise IntegrationError(
                    f"collocation stage solve did not converge at step {j} "
                    f"(residual {prev_res:.3e})",
                    residual=prev_res,
                    step=j,
                )
            f = h * drift_at(Z1, Um)
            if k:
                f = f + noise_at(Z1, dW)
            X1 = X + b1 * f
            F_prev = f
        else:  # general collocation
            U_stage = [
                U if ci == 0.0 else _control_batch(ctrl, t + ci * h, X, m)
                for ci in c_nodes
            ]
            if F_prev is None:
                inc0 = h * drift_at(X, U_stage[0])
                if k:
                    inc0 = inc0 + noise_at(X, dW)
                Z = X[:, None, :] + c_nodes[None, :, None] * inc0[:, None, :]
            else:
                Z = X[:, None, :] + np.einsum("ij,pjn->pin", A_tab, F_prev)
            damping = 1.0
            prev_res = math.inf
            converged = False
            F = np.empty((P, s, n))
            for _ in range(config.implicit_max_iter):
                for i in range(s):
                    F[:, i] = h * drift_at(Z[:, i], U_stage[i])
                    if k:
                        F[:, i] += noise_at(Z[:, i], dW)
                target = X[:, None, :] + np.einsum("ij,pjn->pin", A_tab, F)
                res = float(np.max(np.abs(target - Z)))
                if res > prev_res:
                    damping = max(0.125, 0.5 * damping)
                prev_res = res
                Z = Z + damping * (target - Z)
                if res <= config.implicit_tol:
                    converged = True
                    break
            if not converged:
                raise IntegrationError(
                    f"collocation stage solve did not converge at step {j} "
                    f"(residual {prev_res:.3e})",
                    residual=prev_res,
                    step=j,
                )
            for i in range(s):
                F[:, i] = h * drift_at(Z[:, i], U_stage[i])
                if k:
                    F[:, i] += noise_at(Z[:, i], dW)
            X1 = X + np.einsum("j,pjn->pn", b_tab, F)
            F_prev = F

        states[:, j + 1] = X1
        X = X1
    _check_finite(X, paths, K)

    z_mid_all = None
    if strat and k:
        Xm = 0.5 * (states[:, :-1] + states[:, 1:])
        ghm = np.asarray(model.energy.gradient(Xm), dtype=float)
        z_mid_all = _port_T(model.structure.xi, Xm, ghm)

    trajectories = []
    for idx in range(P):
        trajectories.append(
            Trajectory(
                times=times.copy(),
                states=states[idx].copy(),
                noise_increments=dW_all[idx].copy(),
                controls=controls[idx].copy(),
                outputs_y=ys[idx].copy(),
                outputs_z=zs[idx].copy(),
                scheme=config.scheme,
                outputs_z_mid=None if z_mid_all is None else z_mid_all[idx].copy(),
            )
        )
    return trajectories


_WORKER_THREADS = 1


def set_worker_threads(n: int):
    """Cap for path-level parallel workers in the per-path engine.

    Per-path noise streams are pre-split, so results are identical for
    any worker count.
    """
    global _WORKER_THREADS
    _WORKER_THREADS = max(1, int(n))


def _loop_engine(model, ctrl, x0, K, config, seed, paths, noise_override, t0):
    """Per-path reference engine for models without batched evaluators."""
    if _WORKER_THREADS > 1 and len(paths) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=_WORKER_THREADS) as pool:
            parts = list(
                pool.map(
                    lambda p: _loop_engine(model, ctrl, x0, K, config, seed, [p], noise_override, t0),
                    paths,
                )
            )
        return [tr for part in parts for tr in part]
    h = config.h
    n, m, k = model.n, model.m, model.k
    times = t0 + h * np.arange(K + 1)
    strat = config.scheme in STRATONOVICH_SCHEMES
    c_nodes, _, _ = collocation_tableau(config.stages)
    out = []
    for p in paths:
        if noise_override is not None:
            dW_all = np.asarray(noise_override(p), dtype=float).reshape(K, k)
        else:
            dW_all = draw_noise_matrix(seed, p, K, k, h, config.truncation_bound)
        states = np.empty((K + 1, n))
        controls = np.zeros((K, m))
        ys = np.zeros((K, m))
        zs = np.zeros((K, k))
        states[0] = x0
        x = states[0].copy()
        for j in range(K):
            t = float(times[j])
            u = _as_control(model, np.asarray(ctrl(t, x), dtype=float).reshape(-1) if m else None)
            gh = model.grad_H(x)
            controls[j] = u
            ys[j] = model.g(x).T @ gh
            zs[j] = model.xi(x).T @ gh
            dW = dW_all[j]
            try:
                if config.scheme == "euler_maruyama":
                    x = euler_maruyama_step(model, x, u, t, h, dW)
                elif config.scheme == "heun_stratonovich":
                    x = heun_stratonovich_step(model, x, u, t, h, dW)
                else:
                    u_stages = np.tile(u, (config.stages, 1))
                    if m:
                        u_stages = np.stack(
                            [
                                np.asarray(ctrl(t + ci * h, x), dtype=float).reshape(m)
                                for ci in c_nodes
                            ]
                        )
                    x, _ = collocation_step(model, x, u_stages, t, h, dW, config)
            except (NumericError, IntegrationError) as err:
                err.path = p
                err.step = j
                raise
            states[j + 1] = x
        z_mid = None
        if strat and k:
            xm = 0.5 * (states[:-1] + states[1:])
            z_mid = np.stack([model.xi(q).T @ model.grad_H(q) for q in xm])
        out.append(
            Trajectory(
                times=times.copy(),
                states=states,
                noise_increments=dW_all,
                controls=controls,
                outputs_y=ys,
                outputs_z=zs,
                scheme=config.scheme,
                outputs_z_mid=z_mid,
            )
        )
    return out


def iter_simulate(
    model: SPHSModel,
    controller,
    T: float,
    config: IntegratorConfig,
    n_paths: int,
    seed: int,
    x0=None,
    chunk: int = _DEFAULT_CHUNK,
    noise=None,
) -> Iterator[Ensemble]:
    """Yield the ensemble in path chunks (for streaming reductions).

    Chunking only groups work: every trajectory is a pure function of
    (seed, path index) and identical to what ``simulate`` returns.
    """
    if n_paths < 1:
        raise ConfigurationError("n_paths must be >= 1")
    K = _steps_for(T, config.h)
    x0 = default_initial_state(model) if x0 is None else np.asarray(x0, dtype=float)
    if x0.shape != (model.n,):
        raise ConfigurationError(f"x0 has shape {x0.shape}, expected ({model.n},)")
    ctrl = resolve_controller(model, controller)
    engine = _batch_engine if model.vectorized else _loop_engine
    for start in range(0, n_paths, chunk):
        paths = list(range(start, min(start + chunk, n_paths)))
        trajectories = engine(model, ctrl, x0, K, config, seed, paths, noise, 0.0)
        yield Ensemble(
            seed=seed,
            trajectories=trajectories,
            model=model,
            config=config,
            n_paths=n_paths,
            horizon=T,
            first_path=start,
        )


def simulate(
    model: SPHSModel,
    controller,
    T: float,
    config: IntegratorConfig,
    n_paths: int,
    seed: int,
    x0=None,
    noise=None,
) -> Ensemble:
    """Simulate ``n_paths`` independent trajectories over [0, T].

    ``controller`` maps (t, x) to the control vector (None uses the
    model's forcing, or zero input).  ``noise`` optionally overrides the
    increments: a callable path -> (K, k) array.
    """
    trajectories = []
    for part in iter_simulate(model, controller, T, config, n_paths, seed, x0=x0, noise=noise):
        trajectories.extend(part.trajectories)
    return Ensemble(
        seed=seed,
        trajectories=trajectories,
        model=model,
        config=config,
        n_paths=n_paths,
        horizon=T,
        first_path=0,
    )


def default_initial_state(model: SPHSModel) -> Array:
    if model.recipe and model.recipe.get("kind") == "agent_ring":
        from .agents import default_ring_state

        return default_ring_state(model)
    x0 = np.zeros(model.n)
    if model.n >= 1:
        x0[0] = 1.0
    return x0


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def ensemble_to_csv(ensemble: Ensemble, path):
    """One row per (path, grid point); step signals are empty on the final row."""
    model = ensemble.model
    n, m, k = model.n, model.m, model.k
    header = (
        ["path", "step", "t"]
        + [f"x{i}" for i in range(n)]
        + [f"u{i}" for i in range(m)]
        + [f"y{i}" for i in range(m)]
        + [f"z{i}" for i in range(k)]
        + [f"dW{i}" for i in range(k)]
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for p, tr in enumerate(ensemble.trajectories, start=ensemble.first_path):
            K = tr.n_steps
            for j in range(K + 1):
                row = [str(p), str(j), _fmt(tr.times[j])]
                row += [_fmt(v) for v in tr.states[j]]
                if j < K:
                    row += [_fmt(v) for v in tr.controls[j]]
                    row += [_fmt(v) for v in tr.outputs_y[j]]
                    row += [_fmt(v) for v in tr.outputs_z[j]]
                    row += [_fmt(v) for v in tr.noise_increments[j]]
                else:
                    row += [""] * (2 * m + 2 * k)
                writer.writerow(row)


def ensemble_summary(ensemble: Ensemble) -> dict:
    """Config snapshot, seed and first/second moments (plot-ready JSON)."""
    model = ensemble.model
    finals = ensemble.states_at_index(-1)
    energies = []
    max_drift = 0.0
    for tr in ensemble.trajectories:
        H_t = np.asarray(model.energy.value(tr.states), dtype=float)
        energies.append(H_t[-1])
        max_drift = max(max_drift, float(np.max(np.abs(H_t - H_t[0]))))
    max_dw = 0.0
    for tr in ensemble.trajectories:
        if tr.noise_increments.size:
            max_dw = max(max_dw, float(np.max(np.abs(tr.noise_increments))))
    return {
        "model": model.name,
        "seed": ensemble.seed,
        "n_paths": ensemble.n_paths,
        "horizon": ensemble.horizon,
        "config": ensemble.config.to_dict(),
        "final_state_mean": [float(v) for v in finals.mean(axis=0)],
        "final_state_variance": [float(v) for v in finals.var(axis=0, ddof=1)]
        if len(ensemble.trajectories) > 1
        else [0.0] * model.n,
        "final_energy_mean": float(np.mean(energies)),
        "max_abs_energy_drift": max_drift,
        "max_abs_noise_increment": max_dw,
    }


def write_summary(ensemble: Ensemble, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ensemble_summary(ensemble), fh, indent=2, sort_keys=True)
        fh.write("\n")
