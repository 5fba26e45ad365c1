import numpy as np
import pytest

from sphslab.core import (
    EnergyFunction,
    eval_dynamics,
    finite_difference_gradient,
    linear_model,
    make_canonical_system,
    model_from_dict,
    model_to_dict,
    port_signals,
    validate_structure,
)
from sphslab.errors import ConfigurationError, NumericError

CANONICAL = [
    ("simple_spring", None),
    ("damped_spring", {"delta": 0.3}),
    ("forced_spring", None),
    ("forced_complex_spring", None),
    ("duffing", None),
    ("stochastic_spring", {"sigma": 0.2, "delta": 0.3}),
    ("agent_ring", {"N": 3}),
]


def probes(n, count, seed=0):
    return np.random.default_rng(seed).uniform(-2.0, 2.0, (count, n))


def test_canonical_symplectic_skew_no_violations():
    model = linear_model([[0.0, 1.0], [-1.0, 0.0]], np.zeros((2, 2)), Q=np.eye(2))
    report = validate_structure(model, probes(2, 20))
    assert report.ok


def test_psd_violation_reports_eigenvalue():
    model = linear_model(np.zeros((2, 2)), [[-0.1, 0.0], [0.0, 1.0]], Q=np.eye(2))
    report = validate_structure(model, probes(2, 3))
    psd = [v for v in report.violations if v.kind == "psd"]
    assert len(psd) == 3
    assert psd[0].field_name == "R"
    assert psd[0].magnitude == pytest.approx(-0.1, abs=1e-12)


def test_damped_spring_validates_at_100_random_states():
    model = make_canonical_system("damped_spring", {"m": 1.0, "k": 1.0, "delta": 0.3})
    assert validate_structure(model, probes(2, 100)).ok


@pytest.mark.parametrize("kind,params", CANONICAL)
def test_every_canonical_system_validates_on_1000_states(kind, params):
    model = make_canonical_system(kind, params)
    report = validate_structure(model, probes(model.n, 1000, seed=7))
    assert report.ok, report.to_dict()


def test_eval_dynamics_mass_spring_example():
    model = make_canonical_system("simple_spring", {"m": 1.0, "k": 1.0})
    drift, diffusion = eval_dynamics(model, [1.0, 0.0], u=0.0)
    assert drift == pytest.approx([0.0, -1.0], abs=1e-14)
    assert diffusion.shape == (2, 0)


def test_eval_dynamics_zero_gradient_gives_zero_drift():
    model = make_canonical_system("damped_spring")
    drift, _ = eval_dynamics(model, [0.0, 0.0], u=0.0)
    assert np.max(np.abs(drift)) == 0.0


def test_eval_dynamics_damped_example():
    model = make_canonical_system("damped_spring", {"delta": 0.3})
    drift, _ = eval_dynamics(model, [0.0, 1.0], u=0.0)
    assert drift == pytest.approx([1.0, -0.3], abs=1e-14)


def test_eval_dynamics_nan_raises_numeric_error():
    model = linear_model([[0.0]], [[1.0]], Q=[[1.0]])
    bad = EnergyFunction(value=lambda x: np.nan, gradient=lambda x: np.full(1, np.nan))
    from dataclasses import replace

    broken = replace(model, energy=bad)
    with pytest.raises(NumericError):
        eval_dynamics(broken, [1.0])


def test_simple_spring_hamiltonian_value():
    model = make_canonical_system("simple_spring", {"m": 1.0, "k": 1.0})
    assert model.H(np.array([1.0, 0.0])) == pytest.approx(0.5, abs=1e-15)


def test_damped_spring_structure_matrix():
    model = make_canonical_system("damped_spring", {"delta": 0.25})
    R = model.R(np.zeros(2))
    assert np.allclose(R, [[0.0, 0.0], [0.0, 0.25]])


def test_duffing_energy_at_origin_and_chaotic_defaults():
    model = make_canonical_system("duffing")
    assert model.H(np.zeros(2)) == pytest.approx(0.0, abs=1e-15)
    assert model.recipe["params"]["delta"] == 0.3
    assert model.forcing is not None


def test_unknown_kind_and_missing_parameter_raise():
    with pytest.raises(ConfigurationError):
        make_canonical_system("pendulum")
    with pytest.raises(ConfigurationError):
        make_canonical_system("stochastic_spring")  # sigma required
    with pytest.raises(ConfigurationError):
        make_canonical_system("simple_spring", {"bogus": 1.0})


def test_energy_orthogonality_without_dissipation():
    model = make_canonical_system("simple_spring")
    rng = np.random.default_rng(3)
    for x in rng.uniform(-2, 2, (50, 2)):
        drift, _ = eval_dynamics(model, x, u=0.0)
        assert abs(model.grad_H(x) @ drift) <= 1e-10


def test_drift_linear_in_control():
    model = make_canonical_system("forced_spring")
    rng = np.random.default_rng(4)
    for _ in range(20):
        x = rng.uniform(-2, 2, 2)
        u1, u2 = rng.normal(size=2)
        d = lambda u: eval_dynamics(model, x, u=u)[0]
        gap = d(u1 + u2) - d(u1) - d(u2) + d(0.0)
        assert np.max(np.abs(gap)) <= 1e-12


@pytest.mark.parametrize("kind,params", CANONICAL)
def test_gradient_matches_finite_differences(kind, params):
    model = make_canonical_system(kind, params)
    rng = np.random.default_rng(11)
    worst = 0.0
    for x in rng.uniform(-2, 2, (100, model.n)):
        worst = max(worst, model.energy.gradient_error(x))
    assert worst < 1e-5


def test_port_signals_recompute_exactly():
    model = make_canonical_system("stochastic_spring", {"sigma": 0.4})
    x = np.array([0.3, -1.2])
    sig = port_signals(model, x, u=0.7)
    gh = model.grad_H(x)
    assert np.max(np.abs(sig.y - model.g(x).T @ gh)) <= 1e-12
    assert np.max(np.abs(sig.z - model.xi(x).T @ gh)) <= 1e-12
    assert sig.u == pytest.approx([0.7])


def test_default_hessian_matches_analytic():
    model = make_canonical_system("duffing")
    analytic = model.hessian_H(np.array([0.7, -0.2]))
    fd_energy = EnergyFunction(value=model.energy.value, gradient=model.energy.gradient)
    fd = fd_energy.hessian_at(np.array([0.7, -0.2]))
    assert np.max(np.abs(fd - analytic)) < 1e-5
    assert np.max(np.abs(fd - fd.T)) <= 1e-10


def test_finite_difference_gradient_on_polynomial():
    f = lambda x: x[0] ** 3 + 2.0 * x[0] * x[1]
    g = finite_difference_gradient(f, np.array([1.5, -0.5]))
    assert g == pytest.approx([3 * 1.5**2 + 2 * (-0.5), 2 * 1.5], rel=1e-6)


def test_linear_model_requires_psd_symmetric_Q():
    with pytest.raises(ConfigurationError):
        linear_model([[0.0]], [[0.0]], Q=[[-1.0]])
    with pytest.raises(ConfigurationError):
        linear_model(np.zeros((2, 2)), np.zeros((2, 2)), Q=[[1.0, 0.5], [0.0, 1.0]])


def test_model_json_round_trip_and_dim_check(tmp_path):
    model = make_canonical_system("damped_spring", {"delta": 0.3})
    d = model_to_dict(model)
    clone = model_from_dict(d)
    x = np.array([0.4, -0.9])
    assert clone.H(x) == pytest.approx(model.H(x), abs=1e-15)
    d_bad = dict(d)
    d_bad["n"] = 5
    with pytest.raises(ConfigurationError):
        model_from_dict(d_bad)
    with pytest.raises(ConfigurationError):
        model_from_dict({"kind": "simple_spring", "surprise": 1})


def test_linear_model_json_round_trip():
    model = linear_model([[0.0, 2.0], [-2.0, 0.0]], np.diag([0.0, 0.1]), g=[[0.0], [1.0]],
                         xi=[[0.0], [0.3]], Q=np.diag([2.0, 1.0]), name="custom")
    clone = model_from_dict(model_to_dict(model))
    x = np.array([1.0, -1.0])
    assert np.allclose(clone.J(x), model.J(x))
    assert np.allclose(clone.xi(x), model.xi(x))
    assert clone.H(x) == pytest.approx(model.H(x))
