"""Port-Hamiltonian neural networks and baselines.

Four model families predict state derivatives from (q, p, t):

* bNN    one network (q, p, t) -> (dq, dp), no structure;
* HNN    one network (q, p) -> H_hat, prediction (dH/dp, -dH/dq);
* TDHNN  like HNN with t as an extra input to H_hat;
* pHNN   H_hat(q, p) plus a force network F_hat(t) and a damping
         network N_hat(q, p), predicting
         dq = dH/dp,  dp = -dH/dq + N_hat * dH/dp + F_hat(t).

Training minimizes the squared derivative residual plus L1 penalties
lambda_F ||F_hat||_1 and lambda_N |N_hat| (averaged per batch sample,
subgradient 0 at 0).  Datasets come from deterministic collocation runs
of the canonical systems with derivative labels from the true dynamics;
evaluation rolls every model out inside the same implicit-midpoint
integrator and reports state and energy MSE.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import SPHSModel, eval_dynamics, make_canonical_system
from .errors import ConfigurationError, ContractError, TrainingError
from .integrate import IntegratorConfig, Trajectory, resolve_controller, simulate
from .mlp import MLP, Adam

Array = np.ndarray

KINDS = ("bNN", "HNN", "TDHNN", "pHNN")

H_WIDTHS = (64, 64)
AUX_WIDTHS = (32, 32)


@dataclass
class NetworkModel:
    """A derivative predictor of one of the four families."""

    kind: str
    nets: dict
    dof: int  # d = dim(q) = dim(p)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown network kind '{self.kind}'")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 2000
    lam_F: float = 0.01
    lam_N: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.lam_F < 0 or self.lam_N < 0:
            raise ConfigurationError("L1 weights lam_F, lam_N must be >= 0")


@dataclass
class Dataset:
    q: Array
    p: Array
    t: Array
    dq: Array
    dp: Array
    traj_id: Array
    train_mask: Array
    provenance: dict

    def split(self, train: bool):
        m = self.train_mask if train else ~self.train_mask
        return self.q[m], self.p[m], self.t[m], self.dq[m], self.dp[m]

    def __len__(self):
        return len(self.t)


@dataclass
class EvalReport:
    kind: str
    state_mse: float
    energy_mse: float
    per_traj_state_mse: list
    per_traj_energy_mse: list
    force_mse: Optional[float] = None
    damping_mse: Optional[float] = None
    mean_abs_force: Optional[float] = None
    mean_abs_damping: Optional[float] = None
    diverged: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "state_mse": self.state_mse,
            "energy_mse": self.energy_mse,
            "per_traj_state_mse": self.per_traj_state_mse,
            "per_traj_energy_mse": self.per_traj_energy_mse,
            "force_mse": self.force_mse,
            "damping_mse": self.damping_mse,
            "mean_abs_force": self.mean_abs_force,
            "mean_abs_damping": self.mean_abs_damping,
            "diverged": self.diverged,
        }


# ---------------------------------------------------------------------------
# construction and prediction
# ---------------------------------------------------------------------------


def build_network_model(kind: str, dof: int = 1, rng: Optional[np.random.Generator] = None) -> NetworkModel:
    rng = rng or np.random.default_rng(0)
    if kind == "bNN":
        nets = {"f": MLP((2 * dof + 1, *H_WIDTHS, 2 * dof), rng=rng)}
    elif kind == "HNN":
        nets = {"H": MLP((2 * dof, *H_WIDTHS, 1), rng=rng)}
    elif kind == "TDHNN":
        nets = {"H": MLP((2 * dof + 1, *H_WIDTHS, 1), rng=rng)}
    elif kind == "pHNN":
        nets = {
            "H": MLP((2 * dof, *H_WIDTHS, 1), rng=rng),
            "F": MLP((1, *AUX_WIDTHS, dof), rng=rng),
            "N": MLP((2 * dof, *AUX_WIDTHS, 1), rng=rng),
        }
    else:
        raise ConfigurationError(f"unknown network kind '{kind}' (choose from {KINDS})")
    return NetworkModel(kind=kind, nets=nets, dof=dof)


def _batched(q, p, t):
    q = np.atleast_2d(np.asarray(q, dtype=float))
    p = np.atleast_2d(np.asarray(p, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return q, p, t


def model_predict(model: NetworkModel, q, p, t):
    """Predicted (dq, dp) for a batch of (q, p, t)."""
    q, p, t = _batched(q, p, t)
    d = model.dof
    if model.kind == "bNN":
        out = model.nets["f"].value(np.concatenate([q, p, t[:, None]], axis=1))
        return out[:, :d], out[:, d:]
    if model.kind == "HNN":
        u = model.nets["H"].input_grad(np.concatenate([q, p], axis=1))
        return u[:, d:], -u[:, :d]
    if model.kind == "TDHNN":
        u = model.nets["H"].input_grad(np.concatenate([q, p, t[:, None]], axis=1))
        return u[:, d : 2 * d], -u[:, :d]
    return phnn_predict(model, q, p, t)


def phnn_predict(model: NetworkModel, q, p, t):
    """pHNN map: dq = dH/dp, dp = -dH/dq + N_hat dH/dp + F_hat(t)."""
    if model.kind != "pHNN":
        raise ConfigurationError("phnn_predict needs a pHNN model")
    q, p, t = _batched(q, p, t)
    d = model.dof
    u = model.nets["H"].input_grad(np.concatenate([q, p], axis=1))
    u_q, u_p = u[:, :d], u[:, d:]
    N = model.nets["N"].value(np.concatenate([q, p], axis=1))  # (B, 1)
    F = model.nets["F"].value(t[:, None])  # (B, d)
    return u_p, -u_q + N * u_p + F


def loss(model: NetworkModel, batch, lam_F: float = 0.0, lam_N: float = 0.0,
         with_grads: bool = False):
    """Mean squared derivative residual plus L1 force/damping penalties.

    ``batch`` is (q, p, t, dq, dp).  With ``with_grads`` the parameter
    gradients per component network are returned as well.
    """
    q, p, t, dq, dp = batch
    q, p, t = _batched(q, p, t)
    dq = np.atleast_2d(np.asarray(dq, dtype=float))
    dp = np.atleast_2d(np.asarray(dp, dtype=float))
    B = q.shape[0]
    if B == 0:
        raise ConfigurationError("loss needs a non-empty batch")
    d = model.dof

    N_val = F_val = None
    if model.kind == "pHNN":
        X = np.concatenate([q, p], axis=1)
        u = model.nets["H"].input_grad(X)
        u_q, u_p = u[:, :d], u[:, d:]
        N_val = model.nets["N"].value(X)
        F_val = model.nets["F"].value(t[:, None])
        dq_hat, dp_hat = u_p, -u_q + N_val * u_p + F_val
    else:
        dq_hat, dp_hat = model_predict(model, q, p, t)

    value = float(np.mean(np.sum((dq_hat - dq) ** 2, axis=1) + np.sum((dp_hat - dp) ** 2, axis=1)))
    if model.kind == "pHNN":
        value += lam_F * float(np.mean(np.sum(np.abs(F_val), axis=1)))
        value += lam_N * float(np.mean(np.abs(N_val[:, 0])))
    if not with_grads:
        return value

    e_q = 2.0 * (dq_hat - dq) / B
    e_p = 2.0 * (dp_hat - dp) / B
    grads = {}
    if model.kind == "bNN":
        X = np.concatenate([q, p, t[:, None]], axis=1)
        grads["f"] = model.nets["f"].grads_value(X, np.concatenate([e_q, e_p], axis=1))
    elif model.kind == "HNN":
        X = np.concatenate([q, p], axis=1)
        V = np.concatenate([-e_p, e_q], axis=1)
        grads["H"] = model.nets["H"].grads_directional(X, V)
    elif model.kind == "TDHNN":
        X = np.concatenate([q, p, t[:, None]], axis=1)
        V = np.concatenate([-e_p, e_q, np.zeros((B, 1))], axis=1)
        grads["H"] = model.nets["H"].grads_directional(X, V)
    else:  # pHNN
        X = np.concatenate([q, p], axis=1)
        V = np.concatenate([-e_p, e_q + N_val * e_p], axis=1)
        grads["H"] = model.nets["H"].grads_directional(X, V)
        gN = np.sum(e_p * u_p, axis=1, keepdims=True) + lam_N * np.sign(N_val) / B
        grads["N"] = model.nets["N"].grads_value(X, gN)
        gF = e_p + lam_F * np.sign(F_val) / B
        grads["F"] = model.nets["F"].grads_value(t[:, None], gF)
    return value, grads


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def annulus_sampler(r_lo: float = 0.4, r_hi: float = 1.6):
    """Uniform angle, uniform radius on an annulus in the (q, p) plane."""

    def sample(rng: np.random.Generator) -> Array:
        r = rng.uniform(r_lo, r_hi)
        th = rng.uniform(0.0, 2.0 * np.pi)
        return np.array([r * np.cos(th), r * np.sin(th)])

    return sample


def generate_dataset(
    system,
    n_train_traj: int,
    n_test_traj: int,
    T: float,
    h: float,
    ic_sampler: Optional[Callable] = None,
    label_noise: float = 0.0,
    seed: int = 0,
    params: Optional[dict] = None,
) -> Dataset:
    """Roll deterministic collocation trajectories and label with true derivatives.

    Splits are disjoint by trajectory.  ``system`` is a canonical kind
    name or an SPHSModel with dof = n/2 phase-space pairs.
    """
    model = make_canonical_system(system, params) if isinstance(system, str) else system
    if model.k != 0:
        raise ConfigurationError("dataset generation uses deterministic systems (k = 0)")
    d = model.n // 2
    rng = np.random.default_rng(seed)
    sample_ic = ic_sampler or annulus_sampler()
    cfg = IntegratorConfig(scheme="collocation", h=h, stages=1)
    ctrl = resolve_controller(model, None)
    qs, ps, ts, dqs, dps, ids = [], [], [], [], [], []
    n_total = n_train_traj + n_test_traj
    for i in range(n_total):
        x0 = np.asarray(sample_ic(rng), dtype=float)
        ens = simulate(model, None, T, cfg, 1, seed=seed + 1000 * i, x0=x0)
        tr = ens.trajectories[0]
        for j, t in enumerate(tr.times):
            x = tr.states[j]
            drift, _ = eval_dynamics(model, x, np.asarray(ctrl(float(t), x)).reshape(-1), float(t))
            qs.append(x[:d])
            ps.append(x[d:])
            ts.append(float(t))
            dqs.append(drift[:d])
            dps.append(drift[d:])
            ids.append(i)
    q = np.array(qs)
    p = np.array(ps)
    t = np.array(ts)
    dq = np.array(dqs)
    dp = np.array(dps)
    if label_noise > 0:
        dq = dq + label_noise * rng.standard_normal(dq.shape)
        dp = dp + label_noise * rng.standard_normal(dp.shape)
    traj_id = np.array(ids)
    return Dataset(
        q=q,
        p=p,
        t=t,
        dq=dq,
        dp=dp,
        traj_id=traj_id,
        train_mask=traj_id < n_train_traj,
        provenance={
            "system": model.name,
            "params": model.recipe.get("params") if model.recipe else None,
            "n_train_traj": n_train_traj,
            "n_test_traj": n_test_traj,
            "T": T,
            "h": h,
            "label_noise": label_noise,
            "seed": seed,
        },
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _pack(model: NetworkModel):
    names = sorted(model.nets)
    theta = np.concatenate([model.nets[n].get_flat() for n in names])
    return names, theta


def _unpack(model: NetworkModel, names, theta):
    pos = 0
    for n in names:
        net = model.nets[n]
        net.set_flat(theta[pos : pos + net.n_params])
        pos += net.n_params


def train(kind: str, dataset: Dataset, config: TrainConfig = TrainConfig()):
    """Train one network family on the dataset's train split.

    Returns (NetworkModel, loss_history) with one mean-loss entry per
    epoch; deterministic for a given config seed.
    """
    q, p, t, dq, dp = dataset.split(train=True)
    if len(t) == 0:
        raise ConfigurationError("dataset has an empty train split")
    d = q.shape[1]
    rng = np.random.default_rng(config.seed)
    model = build_network_model(kind, dof=d, rng=rng)
    names, theta = _pack(model)
    opt = Adam(theta.size, lr=config.learning_rate)
    history = []
    n = len(t)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = (q[idx], p[idx], t[idx], dq[idx], dp[idx])
            value, grads = loss(model, batch, config.lam_F, config.lam_N, with_grads=True)
            if not math.isfinite(value):
                raise TrainingError(f"training loss diverged at epoch {epoch}", epoch=epoch)
            flat = np.concatenate([MLP.flatten_grads(grads[nm]) for nm in names])
            theta = opt.step(theta, flat)
            _unpack(model, names, theta)
            epoch_loss += value
            n_batches += 1
        history.append(epoch_loss / n_batches)
    return model, history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _midpoint_rollout(field: Callable, X0: Array, T: float, h: float,
                      tol: float = 1e-10, max_iter: int = 50):
    """Implicit-midpoint rollout of a generic field f(X, t) for a batch of ICs.

    Diverging rows are frozen at their last finite state and reported.
    Returns (times, states (B, K+1, n), n_diverged).
    """
    K = int(round(T / h))
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    B, n = X0.shape
    times = h * np.arange(K + 1)
    out = np.empty((B, K + 1, n))
    out[:, 0] = X0
    alive = np.ones(B, dtype=bool)
    X = X0.copy()
    for j in range(K):
        t_mid = times[j] + 0.5 * h
        f = field(X, t_mid)
        Z = X + 0.5 * h * f
        for _ in range(max_iter):
            f = field(Z, t_mid)
            target = X + 0.5 * h * f
            res = np.max(np.abs(target - Z)) if Z.size else 0.0
            Z = target
            if not np.isfinite(res) or res <= tol:
                break
        X1 = X + h * f
        bad = ~np.all(np.isfinite(X1), axis=1)
        if np.any(bad):
            X1[bad] = X[bad]
            alive &= ~bad
        X = X1
        out[:, j + 1] = X
    return times, out, int(np.sum(~alive))


def network_field(model: NetworkModel):
    d = model.dof

    def field(X, t):
        q, p = X[:, :d], X[:, d:]
        tt = np.full(X.shape[0], t)
        dq, dp = model_predict(model, q, p, tt)
        return np.concatenate([dq, dp], axis=1)

    return field


def true_field(system: SPHSModel):
    ctrl = resolve_controller(system, None)
    from .integrate import _batch_drift, _control_batch

    def field(X, t):
        U = _control_batch(ctrl, float(t), X, system.m)
        drift, _ = _batch_drift(system, X, U)
        return drift

    return field


def evaluate(
    model,
    system: SPHSModel,
    n_ic: int = 25,
    T: float = 10.0,
    h: float = 0.1,
    seed: int = 123,
    ic_sampler: Optional[Callable] = None,
) -> EvalReport:
    """Roll the learned field out against ground truth from fresh ICs.

    Both sides use the same deterministic implicit-midpoint integrator,
    so the reported MSEs measure the learned field, not the scheme.
    ``model`` may also be a raw field callable f(X, t) (the ground-truth
    oracle hook), in which case only the MSEs are reported.
    """
    rng = np.random.default_rng(seed)
    sample_ic = ic_sampler or annulus_sampler()
    X0 = np.stack([np.asarray(sample_ic(rng), dtype=float) for _ in range(n_ic)])
    _, truth, _ = _midpoint_rollout(true_field(system), X0, T, h)
    field = model if callable(model) else network_field(model)
    _, pred, diverged = _midpoint_rollout(field, X0, T, h)
    err = np.sum((pred - truth) ** 2, axis=2)  # (B, K+1), squared state error
    per_state = err.mean(axis=1)
    if system.vectorized:
        H_true = np.asarray(system.energy.value(truth), dtype=float)
        H_pred = np.asarray(system.energy.value(pred), dtype=float)
    else:
        H_true = np.apply_along_axis(system.H, 2, truth)
        H_pred = np.apply_along_axis(system.H, 2, pred)
    per_energy = ((H_pred - H_true) ** 2).mean(axis=1)
    kind = "oracle" if callable(model) else model.kind
    report = EvalReport(
        kind=kind,
        state_mse=float(per_state.mean()),
        energy_mse=float(per_energy.mean()),
        per_traj_state_mse=[float(v) for v in per_state],
        per_traj_energy_mse=[float(v) for v in per_energy],
        diverged=diverged,
    )
    if not callable(model) and model.kind == "pHNN":
        times = h * np.arange(int(round(T / h)) + 1)
        F_hat = model.nets["F"].value(times[:, None])
        states = truth.reshape(-1, system.n)
        N_hat = model.nets["N"].value(states)
        report.mean_abs_force = float(np.mean(np.abs(F_hat)))
        report.mean_abs_damping = float(np.mean(np.abs(N_hat)))
        F_true, N_true = _true_force_damping(system, times)
        if F_true is not None:
            report.force_mse = float(np.mean((F_hat - F_true) ** 2))
        if N_true is not None:
            report.damping_mse = float(np.mean((N_hat - N_true) ** 2))
    return report


def _true_force_damping(system: SPHSModel, times: Array):
    """Ground-truth force signal and damping coefficient where known."""
    recipe = system.recipe or {}
    params = recipe.get("params", {})
    kind = recipe.get("kind")
    if kind not in ("simple_spring", "damped_spring", "forced_spring", "stochastic_spring"):
        return None, None
    ctrl = resolve_controller(system, None)
    F_true = np.stack([np.asarray(ctrl(float(t), np.zeros(system.n))).reshape(-1) for t in times])
    # dp = -dH/dq + N dH/dp with dH/dp = p/m  =>  N = -delta * m
    delta = float(params.get("delta", 0.0))
    mass = float(params.get("m", 1.0))
    return F_true, np.full((1, 1), -delta * mass)


# ---------------------------------------------------------------------------
# Poincare sections
# ---------------------------------------------------------------------------


def poincare_section(trajectory: Trajectory, period: float, transient_periods: int = 10) -> Array:
    """Stroboscopic (q, p) samples at integer multiples of the forcing period.

    Linear interpolation between grid points; the first
    ``transient_periods`` periods are discarded.  The trajectory must
    cover at least 50 periods.
    """
    times = trajectory.times
    horizon = float(times[-1] - times[0])
    if horizon < 50.0 * period:
        raise ConfigurationError(
            f"horizon {horizon:.1f} covers fewer than 50 periods of {period:.3f}"
        )
    n_max = int(math.floor(horizon / period))
    samples = []
    for n in range(transient_periods, n_max + 1):
        t = times[0] + n * period
        if t > times[-1] + 1e-12:
            break
        j = min(int(np.searchsorted(times, t, side="right")) - 1, len(times) - 2)
        w = (t - times[j]) / (times[j + 1] - times[j])
        samples.append((1.0 - w) * trajectory.states[j] + w * trajectory.states[j + 1])
    return np.array(samples)


def section_dispersion(points: Array, cell: float = 0.1) -> int:
    """Number of occupied cells on a (q, p) grid of the given pitch.

    A section collapsed onto <= 10 clusters occupies only a handful of
    cells; a chaotic section spreads over many.
    """
    if len(points) == 0:
        return 0
    cells = np.unique(np.floor(np.asarray(points) / cell).astype(int), axis=0)
    return int(len(cells))


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def network_to_dict(model: NetworkModel) -> dict:
    return {
        "kind": model.kind,
        "dof": model.dof,
        "nets": {name: net.to_dict() for name, net in model.nets.items()},
    }


def network_from_dict(d: dict) -> NetworkModel:
    try:
        nets = {name: MLP.from_dict(nd) for name, nd in d["nets"].items()}
        return NetworkModel(kind=d["kind"], nets=nets, dof=int(d["dof"]))
    except KeyError as err:
        raise ConfigurationError(f"network file is missing key {err}") from err


def save_network(model: NetworkModel, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(network_to_dict(model), fh, sort_keys=True)
        fh.write("\n")


def load_network(path) -> NetworkModel:
    with open(path, "r", encoding="utf-8") as fh:
        return network_from_dict(json.load(fh))
