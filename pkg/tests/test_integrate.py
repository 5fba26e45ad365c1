import math

import numpy as np
import pytest

from sphslab.core import (
    EnergyFunction,
    SPHSModel,
    StructureField,
    linear_model,
    make_canonical_system,
)
from sphslab.errors import ConfigurationError
from sphslab.integrate import (
    IntegratorConfig,
    collocation_step,
    collocation_tableau,
    draw_noise_matrix,
    ensemble_summary,
    euler_maruyama_step,
    heun_stratonovich_step,
    ito_drift_correction,
    iter_simulate,
    path_noise_rng,
    sample_truncated_gaussian,
    simulate,
    truncated_gaussian_variance,
)


def scalar_decay_model():
    """dx = -x dt + dW as a (S)PHS: J = 0, R = 1, H = x^2/2, xi = 1."""
    return linear_model([[0.0]], [[1.0]], xi=[[1.0]], Q=[[1.0]], name="scalar_decay")


def multiplicative_model(a=-0.5, s=0.5):
    """Stratonovich dX = a X dt + s X dW with quadratic energy (a < 0)."""
    structure = StructureField(
        J=lambda x: np.zeros((1, 1)),
        R=lambda x: np.array([[-a]]),
        g=lambda x: np.zeros((1, 0)),
        xi=lambda x: s * np.asarray(x)[..., :, None],
    )
    energy = EnergyFunction(
        value=lambda x: 0.5 * np.sum(np.asarray(x) ** 2, axis=-1),
        gradient=lambda x: np.asarray(x),
        hessian=lambda x: np.eye(1),
    )
    return SPHSModel(n=1, m=0, k=1, structure=structure, energy=energy,
                     name="multiplicative", vectorized=True)


# ---------------------------------------------------------------------------
# truncated Gaussian noise
# ---------------------------------------------------------------------------


def test_truncation_bound_is_respected():
    rng = path_noise_rng(1, 0, 0)
    s = sample_truncated_gaussian(0.01, 4.0, rng, size=10000)
    assert np.max(np.abs(s)) <= 4.0 * math.sqrt(0.01)


def test_truncated_moments_match_closed_form():
    rng = path_noise_rng(2, 0, 0)
    h = 0.01
    s = sample_truncated_gaussian(h, 4.0, rng, size=1_000_000)
    assert abs(s.mean()) <= 3.0 * math.sqrt(h / 1_000_000)
    var_oracle = truncated_gaussian_variance(h, 4.0)
    assert var_oracle == pytest.approx(0.00999, abs=2e-5)
    assert s.var() == pytest.approx(var_oracle, rel=0.01)


def test_heavy_truncation_shrinks_variance():
    rng = path_noise_rng(3, 0, 0)
    s = sample_truncated_gaussian(0.01, 0.01, rng, size=20000)
    assert s.var() < 0.01 * 1e-3


def test_bad_truncation_args_raise():
    with pytest.raises(ConfigurationError):
        sample_truncated_gaussian(-1.0, 4.0, path_noise_rng(0, 0, 0))


# ---------------------------------------------------------------------------
# single steps (hand arithmetic oracles)
# ---------------------------------------------------------------------------


def test_euler_maruyama_hand_values():
    model = scalar_decay_model()
    x = np.array([1.0])
    assert euler_maruyama_step(model, x, None, 0.0, 0.1, [0.0]) == pytest.approx([0.9])
    assert euler_maruyama_step(model, x, None, 0.0, 0.1, [0.2]) == pytest.approx([1.1])
    assert euler_maruyama_step(model, x, None, 0.0, 1e-12, [0.0]) == pytest.approx([1.0], abs=1e-11)


def test_heun_deterministic_hand_value():
    model = linear_model([[0.0]], [[1.0]], Q=[[1.0]], name="decay")  # dx = -x dt
    out = heun_stratonovich_step(model, np.array([1.0]), None, 0.0, 0.1, np.zeros(0))
    assert out == pytest.approx([0.905], abs=1e-15)


def test_heun_zero_step_is_identity():
    model = scalar_decay_model()
    out = heun_stratonovich_step(model, np.array([1.3]), None, 0.0, 1e-12, [0.0])
    assert out == pytest.approx([1.3], abs=1e-11)


def test_ito_drift_correction_values():
    const = scalar_decay_model()
    assert ito_drift_correction(const, np.array([1.7])) == pytest.approx([0.0], abs=1e-9)
    mult = multiplicative_model(a=-0.5, s=1.0)  # xi(x) = x
    assert ito_drift_correction(mult, np.array([2.0])) == pytest.approx([1.0], rel=1e-6)
    assert ito_drift_correction(mult, np.array([0.0])) == pytest.approx([0.0], abs=1e-9)


# ---------------------------------------------------------------------------
# collocation
# ---------------------------------------------------------------------------


def midpoint_oracle(A, x0, h):
    """Exact implicit-midpoint step for linear dx = A x: solve the 2x2 system."""
    n = len(x0)
    x_mid = np.linalg.solve(np.eye(n) - 0.5 * h * A, x0)
    return x0 + h * A @ x_mid


def test_collocation_midpoint_matches_exact_linear_solve():
    model = make_canonical_system("simple_spring")
    cfg = IntegratorConfig(scheme="collocation", h=0.1, stages=1)
    x1, diag = collocation_step(model, np.array([1.0, 0.0]), np.zeros((1, 1)), 0.0, 0.1,
                                np.zeros(0), cfg)
    oracle = midpoint_oracle(np.array([[0.0, 1.0], [-1.0, 0.0]]), np.array([1.0, 0.0]), 0.1)
    assert oracle == pytest.approx([0.9950124688279301, -0.09975062344139651], abs=1e-15)
    assert x1 == pytest.approx(oracle, abs=1e-12)
    assert diag.residual <= cfg.implicit_tol


@pytest.mark.parametrize("stages", [1, 2])
def test_collocation_single_step_conserves_quadratic_energy(stages):
    model = make_canonical_system("simple_spring")
    cfg = IntegratorConfig(scheme="collocation", h=0.1, stages=stages)
    x = np.array([1.0, 0.3])
    x1, _ = collocation_step(model, x, np.zeros((stages, 1)), 0.0, 0.1, np.zeros(0), cfg)
    assert abs(model.H(x1) - model.H(x)) <= 1e-12


def test_collocation_tableau_midpoint():
    c, A, b = collocation_tableau(1)
    assert c == pytest.approx([0.5])
    assert A[0] == pytest.approx([0.5])
    assert b == pytest.approx([1.0])


def test_collocation_reduces_to_deterministic_when_noise_vanishes():
    noisy = make_canonical_system("stochastic_spring", {"sigma": 0.5})
    clean = make_canonical_system("simple_spring")
    cfg = IntegratorConfig(scheme="collocation", h=0.05)
    x0 = np.array([1.0, 0.0])
    zero_noise = lambda p: np.zeros((40, 1))
    e1 = simulate(noisy, None, 2.0, cfg, 1, seed=0, x0=x0, noise=zero_noise)
    e2 = simulate(clean, None, 2.0, cfg, 1, seed=0, x0=x0)
    assert np.max(np.abs(e1.trajectories[0].states - e2.trajectories[0].states)) <= 1e-12


@pytest.mark.parametrize("stages", [1, 2])
def test_collocation_order_on_harmonic_oscillator(stages):
    model = make_canonical_system("simple_spring")
    exact = np.array([math.cos(1.0), -math.sin(1.0)])
    errs = []
    for h in (0.02, 0.01):
        cfg = IntegratorConfig(scheme="collocation", h=h, stages=stages)
        ens = simulate(model, None, 1.0, cfg, 1, seed=0, x0=np.array([1.0, 0.0]))
        errs.append(np.linalg.norm(ens.trajectories[0].states[-1] - exact))
    assert errs[0] / errs[1] >= 2.0 ** (2 * stages - 0.5)


def test_lossless_conservation_over_many_steps():
    model = make_canonical_system("simple_spring")
    cfg = IntegratorConfig(scheme="collocation", h=0.01)
    ens = simulate(model, None, 100.0, cfg, 1, seed=1, x0=np.array([1.0, 0.0]))
    H = np.asarray(model.energy.value(ens.trajectories[0].states))
    assert np.max(np.abs(H - H[0])) <= 1e-10


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------


def test_deterministic_model_ignores_seed():
    model = make_canonical_system("simple_spring")
    cfg = IntegratorConfig(scheme="collocation", h=0.05)
    a = simulate(model, None, 2.0, cfg, 1, seed=1, x0=np.array([1.0, 0.0]))
    b = simulate(model, None, 2.0, cfg, 1, seed=999, x0=np.array([1.0, 0.0]))
    assert np.array_equal(a.trajectories[0].states, b.trajectories[0].states)


def test_same_seed_bit_identical_and_chunk_invariant():
    model = make_canonical_system("stochastic_spring", {"sigma": 0.3})
    cfg = IntegratorConfig(scheme="euler_maruyama", h=0.01)
    a = simulate(model, None, 1.0, cfg, 9, seed=5, x0=np.array([1.0, 0.0]))
    b = simulate(model, None, 1.0, cfg, 9, seed=5, x0=np.array([1.0, 0.0]))
    for ta, tb in zip(a.trajectories, b.trajectories):
        assert np.array_equal(ta.states, tb.states)
        assert np.array_equal(ta.noise_increments, tb.noise_increments)
    chunks = list(iter_simulate(model, None, 1.0, cfg, 9, seed=5,
                                x0=np.array([1.0, 0.0]), chunk=4))
    stitched = [tr for part in chunks for tr in part.trajectories]
    for ta, tb in zip(a.trajectories, stitched):
        assert np.array_equal(ta.states, tb.states)


def test_noise_streams_are_keyed_by_path_and_dimension():
    a = draw_noise_matrix(seed=9, path=3, K=50, k=2, h=0.01, bound=4.0)
    b = draw_noise_matrix(seed=9, path=3, K=50, k=3, h=0.01, bound=4.0)
    # adding a noise dimension must not disturb the existing columns
    assert np.array_equal(a, b[:, :2])


def test_ou_terminal_variance_matches_closed_form():
    model = scalar_decay_model()
    cfg = IntegratorConfig(scheme="euler_maruyama", h=0.01)
    ens = simulate(model, None, 10.0, cfg, 5000, seed=42, x0=np.array([1.0]))
    finals = ens.states_at_index(-1)[:, 0]
    target = 0.5 * (1.0 - math.exp(-20.0))
    assert finals.var(ddof=1) == pytest.approx(target, rel=0.05)


def test_no_recorded_increment_exceeds_bound():
    model = make_canonical_system("stochastic_spring", {"sigma": 1.0})
    cfg = IntegratorConfig(scheme="heun_stratonovich", h=0.02, truncation_bound=4.0)
    ens = simulate(model, None, 2.0, cfg, 50, seed=8, x0=np.array([1.0, 0.0]))
    cap = 4.0 * math.sqrt(0.02)
    for tr in ens.trajectories:
        assert np.max(np.abs(tr.noise_increments)) <= cap


def test_weak_ito_stratonovich_equivalence_small():
    strat = multiplicative_model(a=-0.5, s=0.5)
    # Euler-Maruyama on the corrected drift (a + s^2/2) x
    corrected = multiplicative_model(a=-0.5 + 0.5 * 0.5**2, s=0.5)
    h = 2e-3
    n_paths = 4000
    e1 = simulate(strat, None, 1.0, IntegratorConfig(scheme="heun_stratonovich", h=h),
                  n_paths, seed=11, x0=np.array([1.0]))
    e2 = simulate(corrected, None, 1.0, IntegratorConfig(scheme="euler_maruyama", h=h),
                  n_paths, seed=11, x0=np.array([1.0]))
    m1 = e1.states_at_index(-1)[:, 0]
    m2 = e2.states_at_index(-1)[:, 0]
    se = math.sqrt(m1.var(ddof=1) / n_paths + m2.var(ddof=1) / n_paths)
    assert abs(m1.mean() - m2.mean()) <= 3.0 * se


def test_horizon_must_be_multiple_of_h():
    model = make_canonical_system("simple_spring")
    with pytest.raises(ConfigurationError):
        simulate(model, None, 1.05, IntegratorConfig(h=0.1), 1, seed=0)


def test_integrator_config_validation():
    with pytest.raises(ConfigurationError):
        IntegratorConfig(scheme="rk4")
    with pytest.raises(ConfigurationError):
        IntegratorConfig(h=-0.1)
    with pytest.raises(ConfigurationError):
        IntegratorConfig(stages=4)


def test_trajectory_grid_and_summary():
    model = make_canonical_system("stochastic_spring", {"sigma": 0.1})
    cfg = IntegratorConfig(scheme="euler_maruyama", h=0.05)
    ens = simulate(model, None, 1.0, cfg, 3, seed=2, x0=np.array([1.0, 0.0]))
    tr = ens.trajectories[0]
    assert np.all(np.diff(tr.times) > 0)
    assert np.allclose(np.diff(tr.times), 0.05)
    assert tr.states.shape == (21, 2)
    assert tr.noise_increments.shape == (20, 1)
    summary = ensemble_summary(ens)
    assert summary["n_paths"] == 3
    assert summary["max_abs_noise_increment"] <= 4.0 * math.sqrt(0.05)


def test_csv_export_round_trip(tmp_path):
    from sphslab.integrate import ensemble_to_csv

    model = make_canonical_system("stochastic_spring", {"sigma": 0.2})
    cfg = IntegratorConfig(scheme="euler_maruyama", h=0.1)
    ens = simulate(model, None, 0.5, cfg, 2, seed=3, x0=np.array([1.0, 0.0]))
    path = tmp_path / "ens.csv"
    ensemble_to_csv(ens, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].split(",")[:3] == ["path", "step", "t"]
    assert len(lines) == 1 + 2 * 6  # header + 2 paths x (5 steps + final row)
    first = lines[1].split(",")
    assert float(first[3]) == ens.trajectories[0].states[0, 0]
