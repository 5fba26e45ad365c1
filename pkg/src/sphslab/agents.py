"""Stochastic agent ring model and its Gaussian stationary oracle.

N agents on a ring carry headways Q and velocities p.  Headways relax
toward the neighbours' velocity difference, velocities feel the
potential force of the own and the q-shifted headway plus a velocity
Laplacian with rate beta and additive momentum noise:

    dQ_n = (p_{n+1} - p_n) dt
    dp_n = (U'(Q_n) - U'(Q_{n-q})) dt
           + beta (p_{n+1} - 2 p_n + p_{n-1}) dt + sigma dW_n

With the quadratic potential U(x) = (alpha x)^2 / 2 the drift is linear,
dZ = B Z dt + G dW, and the law of the stable part of Z converges to a
centred Gaussian whose covariance solves the restricted Lyapunov
equation -- the independent oracle the Monte-Carlo runs are audited
against.  The ring drift always has neutral directions (uniform headway
and uniform velocity shifts), so the stationary law lives on the stable
subspace and the neutral basis is reported alongside it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .core import EnergyFunction, SPHSModel, StructureField
from .errors import ConfigurationError, StabilityError

Array = np.ndarray

NEUTRAL_TOL = 1e-9


@dataclass(frozen=True)
class RingParams:
    n_agents: int
    alpha: float = 1.0
    beta: float = 1.0
    sigma_noise: float = 0.2
    interaction_offset: int = 1

    def __post_init__(self):
        if self.n_agents < 2:
            raise ConfigurationError("ring needs at least 2 agents")
        if not (self.alpha > 0 and self.beta >= 0):
            raise ConfigurationError("ring needs alpha > 0 and beta >= 0")


@dataclass(frozen=True)
class GaussianLaw:
    """Gaussian limit law; extras describe the neutral (non-mixing) part."""

    mean: Array
    covariance: Array
    neutral_basis: Optional[Array] = None
    projector: Optional[Array] = None


@dataclass(frozen=True)
class Moments:
    mean: Array
    covariance: Array
    se_mean: Array
    se_covariance: Array


def _shift(N: int) -> Array:
    """Permutation with (S v)_n = v_{n+1 mod N}."""
    return np.roll(np.eye(N), 1, axis=1)


def ring_matrices(params: RingParams):
    """Drift/noise matrices and the structure split of the linear ring.

    Returns (B, G, J, R, Q_H) with B = (J - R) Q_H, J skew, R the
    symmetric part of the negated generator (PSD for offset 1), and Q_H
    the Hessian of the quadratic Hamiltonian.
    """
    N = params.n_agents
    a2 = params.alpha**2
    S = _shift(N)
    Sq = np.linalg.matrix_power(S.T, params.interaction_offset)
    L = S + S.T - 2.0 * np.eye(N)
    # generator acting on grad H = (alpha^2 Q, p)
    M = np.block([[np.zeros((N, N)), S - np.eye(N)], [np.eye(N) - Sq, params.beta * L]])
    J = 0.5 * (M - M.T)
    R = -0.5 * (M + M.T)
    Q_H = np.block(
        [[a2 * np.eye(N), np.zeros((N, N))], [np.zeros((N, N)), np.eye(N)]]
    )
    B = M @ Q_H
    G = np.vstack([np.zeros((N, N)), params.sigma_noise * np.eye(N)])
    return B, G, J, R, Q_H


def build_ring_model(params: RingParams) -> SPHSModel:
    """The ring as a linear SPHS with quadratic H and momentum noise."""
    N = params.n_agents
    a2 = params.alpha**2
    B, G, J, R, Q_H = ring_matrices(params)

    def value(x):
        q = x[..., :N]
        p = x[..., N:]
        return 0.5 * a2 * np.sum(q**2, axis=-1) + 0.5 * np.sum(p**2, axis=-1)

    def gradient(x):
        return np.asarray(x) @ Q_H  # Q_H symmetric

    energy = EnergyFunction(value=value, gradient=gradient, hessian=lambda x: Q_H)
    structure = StructureField(
        J=lambda x: J, R=lambda x: R, g=lambda x: np.zeros((2 * N, 0)), xi=lambda x: G
    )
    return SPHSModel(
        n=2 * N,
        m=0,
        k=N,
        structure=structure,
        energy=energy,
        name=f"agent_ring_{N}",
        vectorized=True,
        constant_structure=True,
        recipe={
            "kind": "agent_ring",
            "params": {
                "N": N,
                "alpha": params.alpha,
                "beta": params.beta,
                "sigma": params.sigma_noise,
                "offset": params.interaction_offset,
            },
        },
    )


def default_ring_state(model: SPHSModel) -> Array:
    """Equal headways, zero velocities."""
    N = model.n // 2
    x0 = np.zeros(model.n)
    x0[:N] = 1.0
    return x0


def stationary_distribution(B, G, neutral_tol: float = NEUTRAL_TOL) -> GaussianLaw:
    """Gaussian stationary law of dZ = B Z dt + G dW on the stable subspace.

    Eigen-decomposes B, rejects any eigenvalue with positive real part,
    and solves the Lyapunov equation mode by mode for the stable block.
    The returned covariance is the minimal PSD solution supported on the
    stable subspace; ``neutral_basis`` spans the non-decaying directions
    and ``projector`` is the spectral projector onto the stable part.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n = B.shape[0]
    G = np.asarray(G, dtype=float).reshape(n, -1)
    lam, V = np.linalg.eig(B)
    scale = max(1.0, float(np.max(np.abs(lam))) if n else 1.0)
    tol = neutral_tol * scale
    if np.any(lam.real > tol):
        raise StabilityError(
            f"drift matrix has eigenvalue with positive real part (max {lam.real.max():.3e})"
        )
    stable = lam.real < -tol
    Vinv = np.linalg.inv(V)
    C = Vinv @ G
    cov_modes = C @ C.conj().T
    idx = np.where(stable)[0]
    if idx.size:
        lam_s = lam[idx]
        denom = -(lam_s[:, None] + lam_s.conj()[None, :])
        sig_modes = cov_modes[np.ix_(idx, idx)] / denom
        Vs = V[:, idx]
        cov = (Vs @ sig_modes @ Vs.conj().T).real
        projector = (Vs @ Vinv[idx, :]).real
    else:
        cov = np.zeros((n, n))
        projector = np.zeros((n, n))
    cov = 0.5 * (cov + cov.T)
    neutral_idx = np.where(~stable)[0]
    if neutral_idx.size:
        raw = np.column_stack([V[:, neutral_idx].real, V[:, neutral_idx].imag])
        neutral_basis = scipy.linalg.orth(raw, rcond=1e-9)
    else:
        neutral_basis = np.zeros((n, 0))
    return GaussianLaw(
        mean=np.zeros(n), covariance=cov, neutral_basis=neutral_basis, projector=projector
    )


def lyapunov_residual(B, G, law: GaussianLaw) -> float:
    """Max-norm of B S + S B^T + P G G^T P^T restricted to the stable subspace."""
    B = np.asarray(B, dtype=float)
    G = np.asarray(G, dtype=float)
    P = law.projector
    S = law.covariance
    res = B @ S + S @ B.T + P @ (G @ G.T) @ P.T
    res = P @ res @ P.T
    return float(np.max(np.abs(res))) if res.size else 0.0


def empirical_moments(ensemble, t: float) -> Moments:
    """Unbiased sample moments at a grid time with jackknife standard errors."""
    times = ensemble.trajectories[0].times
    idx = int(np.argmin(np.abs(times - t)))
    if abs(times[idx] - t) > 1e-9 * max(1.0, abs(t)):
        raise ConfigurationError(f"time {t} is not on the trajectory grid")
    X = ensemble.states_at_index(idx)
    return moments_from_states(X)


def moments_from_states(X: Array) -> Moments:
    X = np.asarray(X, dtype=float)
    P, n = X.shape
    if P < 2:
        raise ConfigurationError("moment estimation needs at least 2 paths")
    mean = X.mean(axis=0)
    d = X - mean
    cov = (d.T @ d) / (P - 1)
    se_mean = d.std(axis=0, ddof=1) / np.sqrt(P)
    if P >= 3:
        S = d.T @ d
        outer = np.einsum("pi,pj->pij", d, d)
        cov_loo = (S[None, :, :] - (P / (P - 1)) * outer) / (P - 2)
        cov_bar = cov_loo.mean(axis=0)
        se_cov = np.sqrt((P - 1) / P * np.sum((cov_loo - cov_bar) ** 2, axis=0))
    else:
        se_cov = np.full((n, n), np.nan)
    return Moments(mean=mean, covariance=cov, se_mean=se_mean, se_covariance=se_cov)


def covariance_relative_errors(empirical: Array, oracle: Array, projector: Array) -> Array:
    """Componentwise |emp - oracle| / sqrt(diag outer) on the stable subspace.

    Both covariances are projected onto the stable subspace first; the
    normalization sqrt(oracle_ii * oracle_jj) keeps near-zero
    cross-terms from inflating the relative error.
    """
    P = projector
    emp = P @ np.asarray(empirical, dtype=float) @ P.T
    ora = P @ np.asarray(oracle, dtype=float) @ P.T
    d = np.sqrt(np.abs(np.diag(ora)))
    denom = np.outer(d, d)
    denom = np.maximum(denom, 1e-12)
    return np.abs(emp - ora) / denom
