"""Self-adaptive (mu, lambda) evolution strategy and controller tuning.

Each individual carries exogenous parameters pi (the search point) and
endogenous per-coordinate step sizes sigma.  Mutation perturbs pi by
sigma-scaled standard normals and self-adapts sigma with learning rates

    tau = 1 / sqrt(2 n_pi),      tau' = 1 / sqrt(2 sqrt(n_pi)).

Two sigma rules are provided.  The default ``log_normal`` rule is the
standard coupled update sigma * exp(tau N_global + tau' N_i), which
these learning rates belong to and which actually contracts the step
sizes near an optimum.  The ``additive`` rule applies tau' N outside
the exponential; the additive noise keeps typical step sizes at the
tau' scale, so it stalls far from machine-level optima (kept selectable
for comparison, floored at 1e-12, and exercised by the unit tests).

Controller synthesis wraps a closed loop u = -K x + M z around a plant
and scores gains by a common-random-number Monte-Carlo estimate of a
quadratic running cost plus terminal energy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .core import SPHSModel
from .errors import ConfigurationError, NumericError
from .integrate import IntegratorConfig, simulate

Array = np.ndarray

SIGMA_FLOOR = 1e-12
SIGMA_RULES = ("log_normal", "additive")
PENALTY_FITNESS = 1e9


def default_tau(n_pi: int) -> float:
    return 1.0 / math.sqrt(2.0 * n_pi)


def default_tau_prime(n_pi: int) -> float:
    return 1.0 / math.sqrt(2.0 * math.sqrt(n_pi))


@dataclass
class Individual:
    pi: Array
    sigma: Array

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.pi.shape != self.sigma.shape:
            raise ConfigurationError("pi and sigma must have the same length")
        if np.any(self.sigma <= 0):
            raise ConfigurationError("sigma entries must be > 0")


@dataclass(frozen=True)
class ESConfig:
    mu: int = 5
    lam: int = 35
    generations: int = 300
    tau: Optional[float] = None        # default (2 n_pi)^{-1/2}
    tau_prime: Optional[float] = None  # default (2 sqrt(n_pi))^{-1/2}
    selection: str = "comma"
    sigma_rule: str = "log_normal"
    sigma_init: float = 0.3
    init_low: float = -1.0
    init_high: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (self.lam >= self.mu >= 1):
            raise ConfigurationError("need lambda >= mu >= 1")
        if self.selection not in ("comma", "plus"):
            raise ConfigurationError("selection must be 'comma' or 'plus'")
        if self.sigma_rule not in SIGMA_RULES:
            raise ConfigurationError(f"sigma_rule must be one of {SIGMA_RULES}")

    def taus(self, n_pi: int):
        tau = self.tau if self.tau is not None else default_tau(n_pi)
        tau_p = self.tau_prime if self.tau_prime is not None else default_tau_prime(n_pi)
        return tau, tau_p


@dataclass
class ESResult:
    best: Individual
    best_fitness: float
    history: list  # dicts: generation, best, median, best_so_far
    nan_discards: int


def mutate(ind: Individual, config: ESConfig, rng: np.random.Generator, n_pi: Optional[int] = None) -> Individual:
    """Mutation and self-adaptation with independent standard normal draws.

    pi' = pi + sigma * N(0, 1) per coordinate (parent sigma), then the
    configured sigma update, floored at 1e-12.
    """
    n = ind.pi.size if n_pi is None else n_pi
    tau, tau_p = config.taus(n)
    pi_new = ind.pi + ind.sigma * rng.standard_normal(ind.pi.size)
    if config.sigma_rule == "log_normal":
        g = rng.standard_normal()
        sigma_new = ind.sigma * np.exp(tau * g + tau_p * rng.standard_normal(ind.sigma.size))
    else:  # additive
        sigma_new = ind.sigma * np.exp(tau * rng.standard_normal(ind.sigma.size))
        sigma_new = sigma_new + tau_p * rng.standard_normal(ind.sigma.size)
    sigma_new = np.maximum(sigma_new, SIGMA_FLOOR)
    return Individual(pi=pi_new, sigma=sigma_new)


def es_optimize(fitness: Callable[[Array], float], n_pi: int, config: ESConfig = ESConfig()) -> ESResult:
    """(mu, lambda) / (mu + lambda) loop with rank selection.

    Offspring draw a uniformly random parent; candidates whose fitness
    is NaN are discarded (counted).  Deterministic per config seed.
    """
    rng = np.random.default_rng(config.seed)
    parents = []
    for _ in range(config.mu):
        pi0 = rng.uniform(config.init_low, config.init_high, n_pi)
        parents.append(Individual(pi=pi0, sigma=np.full(n_pi, config.sigma_init)))
    parent_fit = np.array([_eval_fitness(fitness, ind.pi) for ind in parents])
    nan_discards = int(np.sum(np.isnan(parent_fit)))
    keep = ~np.isnan(parent_fit)
    if not np.any(keep):
        raise ConfigurationError("all initial candidates returned NaN fitness")
    parents = [p for p, ok in zip(parents, keep) if ok]
    parent_fit = parent_fit[keep]

    best_idx = int(np.argmin(parent_fit))
    best = parents[best_idx]
    best_fitness = float(parent_fit[best_idx])
    history = []
    for gen in range(config.generations):
        offspring = []
        off_fit = []
        for _ in range(config.lam):
            parent = parents[int(rng.integers(len(parents)))]
            child = mutate(parent, config, rng, n_pi=n_pi)
            f = _eval_fitness(fitness, child.pi)
            if math.isnan(f):
                nan_discards += 1
                continue
            offspring.append(child)
            off_fit.append(f)
        if config.selection == "plus":
            pool = list(parents) + offspring
            pool_fit = np.concatenate([parent_fit, np.asarray(off_fit)])
        else:
            pool = offspring if offspring else list(parents)
            pool_fit = np.asarray(off_fit) if offspring else parent_fit
        order = np.argsort(pool_fit, kind="stable")[: config.mu]
        parents = [pool[i] for i in order]
        parent_fit = pool_fit[order]
        gen_best = float(parent_fit[0])
        if gen_best < best_fitness:
            best_fitness = gen_best
            best = parents[0]
        history.append(
            {
                "generation": gen,
                "best": gen_best,
                "median": float(np.median(pool_fit)),
                "best_so_far": best_fitness,
            }
        )
    return ESResult(best=best, best_fitness=best_fitness, history=history, nan_discards=nan_discards)


def _eval_fitness(fitness, pi: Array) -> float:
    try:
        return float(fitness(pi))
    except NumericError:
        return PENALTY_FITNESS


# ---------------------------------------------------------------------------
# controller synthesis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControllerSpec:
    """Closed-loop law u = -K x + M z: state feedback plus a noise-output
    compensation gain on the noise-port output z = xi^T grad H."""

    plant: SPHSModel

    @property
    def n_gains(self) -> int:
        return self.plant.m * (self.plant.n + self.plant.k)

    def unpack(self, gains: Array):
        m, n, k = self.plant.m, self.plant.n, self.plant.k
        gains = np.asarray(gains, dtype=float).reshape(self.n_gains)
        K = gains[: m * n].reshape(m, n)
        M = gains[m * n :].reshape(m, k)
        return K, M

    def controller(self, gains: Array):
        K, M = self.unpack(gains)
        plant = self.plant

        def u(t, x):
            x = np.asarray(x, dtype=float)
            gh = np.asarray(plant.energy.gradient(x), dtype=float)
            z = np.einsum("...nk,...n->...k", np.asarray(plant.structure.xi(x), dtype=float), gh)
            return -(x @ K.T) + z @ M.T

        return u


def controller_fitness(
    gains: Array,
    plant: SPHSModel,
    n_paths: int = 16,
    T: float = 3.0,
    h: float = 0.01,
    Q_weight: float = 1.0,
    R_weight: float = 0.1,
    ensemble_seed: int = 1234,
    x0=None,
    penalty: float = PENALTY_FITNESS,
) -> float:
    """Monte-Carlo cost E[int (x' Qw x + u' Rw u) dt + H(x_T)], lower is better.

    The ensemble seed is fixed, so every candidate sees the same noise
    (common random numbers) and repeat evaluations are identical.
    Closed-loop blow-ups return the penalty cap.
    """
    spec = ControllerSpec(plant)
    ctrl = spec.controller(gains)
    cfg = IntegratorConfig(scheme="euler_maruyama", h=h)
    try:
        ens = simulate(plant, ctrl, T, cfg, n_paths, seed=ensemble_seed, x0=x0)
    except NumericError:
        return penalty
    costs = []
    for tr in ens.trajectories:
        xs = tr.states[:-1]
        us = tr.controls
        run = h * (Q_weight * np.sum(xs**2) + R_weight * np.sum(us**2))
        term = float(plant.energy.value(tr.states[-1]))
        costs.append(run + term)
    total = float(np.mean(costs))
    if not math.isfinite(total) or total > penalty:
        return penalty
    return total
