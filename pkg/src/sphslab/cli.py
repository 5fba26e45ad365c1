"""Configuration-driven experiment runner.

Every command reads a strict JSON config (unknown keys are rejected),
runs one experiment and writes its artifacts plus a resolved-config
snapshot into the output directory.  Reruns with the same config and
seed produce byte-identical artifacts; the only moving part is the
timestamp, which lives isolated in the snapshot header.

Exit codes: 0 success, 2 config/validation failure, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import agents as agents_mod
from . import phnn as phnn_mod
from .core import (
    SPHSModel,
    make_canonical_system,
    model_from_dict,
    model_to_dict,
    validate_structure,
)
from .errors import (
    ConfigurationError,
    ContractError,
    IntegrationError,
    NumericError,
    SphsError,
    StabilityError,
    TrainingError,
)
from .es import ControllerSpec, ESConfig, controller_fitness, es_optimize
from .integrate import (
    IntegratorConfig,
    ensemble_to_csv,
    iter_simulate,
    set_worker_threads,
    simulate,
    write_summary,
)
from .interconnect import compose_many
from .passivity import (
    audit_table,
    check_discrete_passivity,
    check_strong_passivity,
    check_weak_passivity,
    energy_balance,
    weak_passivity_mc,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_CONFIG_ERRORS = (ConfigurationError, ContractError, json.JSONDecodeError, OSError, KeyError)
_NUMERIC_ERRORS = (NumericError, IntegrationError, StabilityError, TrainingError)


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _strict(section, allowed, required=(), where="config"):
    if not isinstance(section, dict):
        raise ConfigurationError(f"{where} must be a JSON object")
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) {sorted(unknown)} in {where}")
    missing = [k for k in required if k not in section]
    if missing:
        raise ConfigurationError(f"missing key(s) {missing} in {where}")
    return section


def _integrator(section) -> IntegratorConfig:
    allowed = ("scheme", "h", "stages", "truncation_bound", "implicit_tol", "implicit_max_iter")
    _strict(section, allowed, where="integrator")
    return IntegratorConfig(**section)


def _write_json(path: Path, payload: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_matrix_csv(path: Path, mat, header=None):
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow(header)
        for row in mat:
            writer.writerow([_fmt(v) for v in row])


def _snapshot(out: Path, command: str, config: dict):
    _write_json(
        out / "resolved_config.json",
        {
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "command": command,
            "config": config,
        },
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_simulate(config: dict, out: Path, seed_override):
    _strict(config, ("model", "integrator", "ensemble"), ("model", "integrator", "ensemble"))
    model = model_from_dict(config["model"])
    icfg = _integrator(config["integrator"])
    ens_cfg = _strict(
        dict(config["ensemble"]), ("n_paths", "T", "seed", "x0"), ("n_paths", "T", "seed"), "ensemble"
    )
    if seed_override is not None:
        ens_cfg["seed"] = seed_override
    x0 = np.asarray(ens_cfg["x0"], dtype=float) if "x0" in ens_cfg else None
    ensemble = simulate(
        model, None, float(ens_cfg["T"]), icfg, int(ens_cfg["n_paths"]), int(ens_cfg["seed"]), x0=x0
    )
    resolved = dict(config)
    resolved["ensemble"] = ens_cfg
    _snapshot(out, "simulate", resolved)
    ensemble_to_csv(ensemble, out / "ensemble.csv")
    write_summary(ensemble, out / "summary.json")
    return EXIT_OK


def _cmd_passivity(config: dict, out: Path, seed_override):
    _strict(
        config,
        ("model", "integrator", "ensemble", "passivity"),
        ("model", "integrator", "ensemble", "passivity"),
    )
    model = model_from_dict(config["model"])
    icfg = _integrator(config["integrator"])
    ens_cfg = _strict(
        dict(config["ensemble"]), ("n_paths", "T", "seed", "x0"), ("n_paths", "T", "seed"), "ensemble"
    )
    if seed_override is not None:
        ens_cfg["seed"] = seed_override
    pas = _strict(
        dict(config["passivity"]), ("mode", "include_noise_supply"), ("mode",), "passivity"
    )
    mode = pas["mode"]
    include_noise = bool(pas.get("include_noise_supply", True))
    x0 = np.asarray(ens_cfg["x0"], dtype=float) if "x0" in ens_cfg else None
    T = float(ens_cfg["T"])
    n_paths = int(ens_cfg["n_paths"])
    seed = int(ens_cfg["seed"])

    if mode == "weak" and n_paths > 2048:
        verdict = weak_passivity_mc(
            model, None, T, icfg, n_paths, seed, include_noise_supply=include_noise, x0=x0
        )
        reports = {}
    else:
        ensemble = simulate(model, None, T, icfg, n_paths, seed, x0=x0)
        if mode == "strong":
            verdicts = [check_strong_passivity(tr, model) for tr in ensemble.trajectories]
            margin = min(v.margin for v in verdicts)
            verdict = verdicts[int(np.argmin([v.margin for v in verdicts]))]
        elif mode == "weak":
            verdict = check_weak_passivity(ensemble, include_noise_supply=include_noise)
        elif mode == "discrete":
            verdict = check_discrete_passivity(ensemble, include_noise_supply=include_noise)
        else:
            raise ConfigurationError("passivity mode must be strong, weak or discrete")
        show = min(len(ensemble.trajectories), 8)
        reports = {
            i: energy_balance(ensemble.trajectories[i], model) for i in range(show)
        }
    resolved = dict(config)
    resolved["ensemble"] = ens_cfg
    _snapshot(out, "passivity", resolved)
    if reports:
        table = audit_table(reports)
        print(table)
        (out / "audit.txt").write_text(table + "\n", encoding="utf-8")
    _write_json(out / "verdict.json", verdict.to_dict())
    return EXIT_OK


def _cmd_interconnect(config: dict, out: Path, seed_override):
    _strict(config, ("models", "couplings", "check"), ("models",))
    parts = [model_from_dict(spec) for spec in config["models"]]
    couplings = []
    for c in config.get("couplings", []):
        _strict(c, ("a", "b", "a_port", "b_port", "sign"), ("a", "b", "a_port", "b_port"), "coupling")
        couplings.append((c["a"], c["a_port"], c["b"], c["b_port"], c.get("sign", 1)))
    composite = compose_many(parts, couplings)
    check = _strict(dict(config.get("check", {})), ("T", "h", "x0", "probe_states"), (), "check")
    rng = np.random.default_rng(0)
    probes = rng.uniform(-2.0, 2.0, (int(check.get("probe_states", 100)), composite.n))
    report = validate_structure(composite, probes)
    T = float(check.get("T", 10.0))
    h = float(check.get("h", 0.01))
    x0 = np.asarray(check["x0"], dtype=float) if "x0" in check else None
    icfg = IntegratorConfig(scheme="collocation", h=h)
    ens = simulate(composite, None, T, icfg, 1, seed=0, x0=x0)
    tr = ens.trajectories[0]
    if composite.vectorized:
        H = np.asarray(composite.energy.value(tr.states), dtype=float)
    else:
        H = np.array([composite.H(x) for x in tr.states])
    balance = energy_balance(tr, composite)
    _snapshot(out, "interconnect", config)
    _write_json(out / "composite_model.json", model_to_dict(composite))
    _write_json(
        out / "interconnect_report.json",
        {
            "structure_ok": report.ok,
            "violations": report.to_dict()["violations"],
            "max_abs_energy_drift": float(np.max(np.abs(H - H[0]))),
            "balance": balance.to_dict(),
        },
    )
    return EXIT_OK


def _cmd_agents(config: dict, out: Path, seed_override):
    _strict(config, ("ring", "mc"), ("ring",))
    ring = _strict(
        dict(config["ring"]), ("N", "alpha", "beta", "sigma", "offset"), ("N",), "ring"
    )
    params = agents_mod.RingParams(
        n_agents=int(ring["N"]),
        alpha=float(ring.get("alpha", 1.0)),
        beta=float(ring.get("beta", 1.0)),
        sigma_noise=float(ring.get("sigma", 0.2)),
        interaction_offset=int(ring.get("offset", 1)),
    )
    mc = _strict(
        dict(config.get("mc", {})), ("n_paths", "T", "h", "seed", "scheme"), (), "mc"
    )
    n_paths = int(mc.get("n_paths", 5000))
    T = float(mc.get("T", 50.0))
    h = float(mc.get("h", 0.01))
    seed = int(seed_override if seed_override is not None else mc.get("seed", 2024))
    scheme = mc.get("scheme", "heun_stratonovich")

    B, G, J, R, Q = agents_mod.ring_matrices(params)
    law = agents_mod.stationary_distribution(B, G)
    model = agents_mod.build_ring_model(params)
    icfg = IntegratorConfig(scheme=scheme, h=h)
    finals = []
    for part in iter_simulate(
        model, None, T, icfg, n_paths, seed, x0=agents_mod.default_ring_state(model), chunk=500
    ):
        finals.append(part.states_at_index(-1))
    X = np.concatenate(finals)
    mom = agents_mod.moments_from_states(X)
    errs = agents_mod.covariance_relative_errors(mom.covariance, law.covariance, law.projector)
    resolved = dict(config)
    resolved["mc"] = {"n_paths": n_paths, "T": T, "h": h, "seed": seed, "scheme": scheme}
    _snapshot(out, "agents", resolved)
    _write_matrix_csv(out / "lyapunov_covariance.csv", law.covariance)
    emp_proj = law.projector @ mom.covariance @ law.projector.T
    _write_matrix_csv(out / "empirical_covariance.csv", emp_proj)
    _write_matrix_csv(out / "relative_errors.csv", errs)
    _write_json(
        out / "agents_report.json",
        {
            "n_paths": n_paths,
            "horizon": T,
            "lyapunov_residual": agents_mod.lyapunov_residual(B, G, law),
            "n_neutral_directions": int(law.neutral_basis.shape[1]),
            "max_componentwise_relative_error": float(errs.max()),
        },
    )
    print(f"max componentwise relative error: {errs.max():.4f}")
    return EXIT_OK


def _cmd_phnn_train(config: dict, out: Path, seed_override):
    _strict(config, ("system", "dataset", "model", "train"), ("system", "dataset", "model"))
    sys_cfg = _strict(dict(config["system"]), ("kind", "params"), ("kind",), "system")
    ds_cfg = _strict(
        dict(config["dataset"]),
        ("n_train_traj", "n_test_traj", "T", "h", "label_noise", "seed"),
        (),
        "dataset",
    )
    model_cfg = _strict(dict(config["model"]), ("kind",), ("kind",), "model")
    train_cfg = _strict(
        dict(config.get("train", {})),
        ("learning_rate", "batch_size", "epochs", "lam_F", "lam_N", "seed"),
        (),
        "train",
    )
    if seed_override is not None:
        train_cfg["seed"] = seed_override
        ds_cfg["seed"] = seed_override
    dataset = phnn_mod.generate_dataset(
        sys_cfg["kind"],
        n_train_traj=int(ds_cfg.get("n_train_traj", 20)),
        n_test_traj=int(ds_cfg.get("n_test_traj", 5)),
        T=float(ds_cfg.get("T", 10.0)),
        h=float(ds_cfg.get("h", 0.1)),
        label_noise=float(ds_cfg.get("label_noise", 0.0)),
        seed=int(ds_cfg.get("seed", 0)),
        params=sys_cfg.get("params"),
    )
    tcfg = phnn_mod.TrainConfig(**train_cfg)
    network, history = phnn_mod.train(model_cfg["kind"], dataset, tcfg)
    resolved = dict(config)
    resolved["dataset"] = ds_cfg
    resolved["train"] = train_cfg
    _snapshot(out, "phnn-train", resolved)
    phnn_mod.save_network(network, out / "network.json")
    with open(out / "loss_history.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, v in enumerate(history):
            writer.writerow([str(i), _fmt(v)])
    return EXIT_OK


def _cmd_phnn_eval(config: dict, out: Path, seed_override):
    _strict(config, ("system", "models", "eval"), ("system", "models"))
    sys_cfg = _strict(dict(config["system"]), ("kind", "params"), ("kind",), "system")
    ev = _strict(dict(config.get("eval", {})), ("n_ic", "T", "h", "seed"), (), "eval")
    system = make_canonical_system(sys_cfg["kind"], sys_cfg.get("params"))
    reports = {}
    for path in config["models"]:
        network = phnn_mod.load_network(path)
        rep = phnn_mod.evaluate(
            network,
            system,
            n_ic=int(ev.get("n_ic", 25)),
            T=float(ev.get("T", 10.0)),
            h=float(ev.get("h", 0.1)),
            seed=int(ev.get("seed", 123)),
        )
        reports[str(path)] = rep.to_dict()
    _snapshot(out, "phnn-eval", config)
    _write_json(out / "eval_report.json", {"system": system.name, "models": reports})
    return EXIT_OK


def _cmd_poincare(config: dict, out: Path, seed_override):
    _strict(config, ("model", "section", "learned_model"), ("model",))
    model = model_from_dict(config["model"])
    sec = _strict(
        dict(config.get("section", {})),
        ("periods", "h", "transient_periods", "cell", "omega"),
        (),
        "section",
    )
    recipe_params = (model.recipe or {}).get("params", {})
    omega = float(sec.get("omega", recipe_params.get("omega", 1.0)))
    period = 2.0 * math.pi / omega
    periods = int(sec.get("periods", 500))
    h = float(sec.get("h", 0.01))
    transient = int(sec.get("transient_periods", 10))
    cell = float(sec.get("cell", 0.1))
    K = int(math.ceil(periods * period / h))
    T = K * h
    icfg = IntegratorConfig(scheme="collocation", h=h)
    ens = simulate(model, None, T, icfg, 1, seed=0, x0=np.array([1.0, 0.0]))
    points = phnn_mod.poincare_section(ens.trajectories[0], period, transient_periods=transient)
    _snapshot(out, "poincare", config)
    _write_matrix_csv(out / "section.csv", points, header=["q", "p"])
    result = {
        "n_points": int(len(points)),
        "occupied_cells": phnn_mod.section_dispersion(points, cell=cell),
        "cell": cell,
        "period": period,
    }
    if config.get("learned_model"):
        network = phnn_mod.load_network(config["learned_model"])
        field = phnn_mod.network_field(network)
        times, states, _ = phnn_mod._midpoint_rollout(field, np.array([[1.0, 0.0]]), T, h)
        from .integrate import Trajectory

        tr = Trajectory(
            times=times,
            states=states[0],
            noise_increments=np.zeros((K, 0)),
            controls=np.zeros((K, 0)),
            outputs_y=np.zeros((K, 0)),
            outputs_z=np.zeros((K, 0)),
            scheme="collocation",
        )
        lpoints = phnn_mod.poincare_section(tr, period, transient_periods=transient)
        _write_matrix_csv(out / "learned_section.csv", lpoints, header=["q", "p"])
        result["learned_n_points"] = int(len(lpoints))
        result["learned_occupied_cells"] = phnn_mod.section_dispersion(lpoints, cell=cell)
    _write_json(out / "poincare_report.json", result)
    return EXIT_OK


def _cmd_es_tune(config: dict, out: Path, seed_override):
    _strict(config, ("plant", "es", "fitness"), ("plant",))
    plant = model_from_dict(config["plant"])
    es_cfg = _strict(
        dict(config.get("es", {})),
        (
            "mu",
            "lam",
            "generations",
            "selection",
            "sigma_rule",
            "sigma_init",
            "init_low",
            "init_high",
            "seed",
            "tau",
            "tau_prime",
        ),
        (),
        "es",
    )
    fit_cfg = _strict(
        dict(config.get("fitness", {})),
        ("n_paths", "T", "h", "Q_weight", "R_weight", "ensemble_seed", "x0"),
        (),
        "fitness",
    )
    if seed_override is not None:
        es_cfg["seed"] = seed_override
    spec = ControllerSpec(plant)
    x0 = np.asarray(fit_cfg["x0"], dtype=float) if "x0" in fit_cfg else None
    kwargs = {
        "n_paths": int(fit_cfg.get("n_paths", 16)),
        "T": float(fit_cfg.get("T", 3.0)),
        "h": float(fit_cfg.get("h", 0.01)),
        "Q_weight": float(fit_cfg.get("Q_weight", 1.0)),
        "R_weight": float(fit_cfg.get("R_weight", 0.1)),
        "ensemble_seed": int(fit_cfg.get("ensemble_seed", 1234)),
        "x0": x0,
    }
    fitness = lambda g: controller_fitness(g, plant, **kwargs)
    result = es_optimize(fitness, spec.n_gains, ESConfig(**es_cfg))
    zero = fitness(np.zeros(spec.n_gains))
    resolved = dict(config)
    resolved["es"] = es_cfg
    _snapshot(out, "es-tune", resolved)
    _write_json(
        out / "es_report.json",
        {
            "n_gains": spec.n_gains,
            "best_fitness": result.best_fitness,
            "zero_gain_fitness": zero,
            "best_gains": [float(v) for v in result.best.pi],
            "nan_discards": result.nan_discards,
        },
    )
    with open(out / "es_history.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["generation", "best", "median", "best_so_far"])
        for row in result.history:
            writer.writerow(
                [str(row["generation"]), _fmt(row["best"]), _fmt(row["median"]), _fmt(row["best_so_far"])]
            )
    return EXIT_OK


_COMMANDS = {
    "simulate": _cmd_simulate,
    "passivity": _cmd_passivity,
    "interconnect": _cmd_interconnect,
    "agents": _cmd_agents,
    "phnn-train": _cmd_phnn_train,
    "phnn-eval": _cmd_phnn_eval,
    "poincare": _cmd_poincare,
    "es-tune": _cmd_es_tune,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sphslab", description=__doc__)
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--threads", type=int, default=1, help="worker cap for path-parallel engines")
    args = parser.parse_args(argv)

    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = json.load(fh)
        if not isinstance(config, dict):
            raise ConfigurationError("config root must be a JSON object")
        set_worker_threads(args.threads)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](config, out, args.seed)
    except _NUMERIC_ERRORS as err:
        print(f"sphslab {args.command}: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except _CONFIG_ERRORS as err:
        print(f"sphslab {args.command}: invalid configuration: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
