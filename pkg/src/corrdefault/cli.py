"""Batch experiment runner.

Three subcommands, each driven by a single JSON config for reproducibility:

  model     exact distribution, spin-form parameters, extracted interactions,
            and optional moment fitting (--fit) for a model file
  dynamics  forward-equation trajectory, candidate parameter curves,
            family-membership report, and master-equation residuals for a
            generator (or the built-in independent construction)
  search    lumped-rate feasibility search and coefficient-system checks for
            the symmetric model families

Exit codes: 0 success, 2 config error, 3 infeasible input, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as cdio
from ._num import geometric_grid
from .consistency import curves_from_rates, master_residual, membership_over_time
from .ctmc import ForwardSolveError, forward_solve, independent_generator
from .model import (
    InfeasibleTargetsError,
    FitConvergenceError,
    extract_interactions,
    fit_moments,
    full_distribution,
    moments,
    to_ising,
)
from .reduced import (
    SearchConfig,
    coeff_check_I,
    coeff_check_II,
    coeff_check_III,
    feasibility_search,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


def _load_config(path) -> dict:
    try:
        with open(path) as handle:
            config = json.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    return config


def _numerics(config) -> dict:
    numerics = {
        "rtol": 1e-9,
        "atol": 1e-12,
        "t_min_fraction": 1e-3,
        "grid_points": 32,
    }
    numerics.update(config.get("numerics", {}))
    if min(numerics["rtol"], numerics["atol"], numerics["t_min_fraction"]) <= 0.0:
        raise ConfigError("numerics tolerances must be positive")
    if int(numerics["grid_points"]) < 2:
        raise ConfigError("grid_points must be at least 2")
    return numerics


def _out_dir(config, args) -> Path:
    out = args.out or config.get("io", {}).get("out_dir")
    if out is None:
        raise ConfigError("no output directory (set io.out_dir or pass --out)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_model(config, args) -> int:
    io_block = config.get("io", {})
    model_file = io_block.get("model_file")
    if model_file is None:
        raise ConfigError("model command needs io.model_file")
    out = _out_dir(config, args)
    params = cdio.read_model_json(model_file)
    dist = full_distribution(params)
    cdio.write_distribution_csv(out / "distribution.csv", dist, config)
    cdio.write_json(out / "ising.json", cdio.ising_to_dict(to_ising(params)), config)
    cdio.write_interactions_csv(out / "interactions.csv", extract_interactions(dist), config)
    if args.fit:
        targets_file = io_block.get("targets_file")
        if targets_file is None:
            raise ConfigError("--fit needs io.targets_file")
        with open(targets_file) as handle:
            targets = json.load(handle)
        vertex_targets = np.asarray(targets["vertex_targets"], dtype=float)
        pair_targets = np.zeros(params.graph.n_edges)
        for entry in targets.get("pair_targets", []):
            u, v = (int(x) for x in entry["edge"])
            pair_targets[params.graph.edge_position(u, v)] = float(entry["value"])
        fitted = fit_moments(params.graph, vertex_targets, pair_targets)
        cdio.write_model_json(out / "fitted_model.json", fitted, config)
        v_fit, p_fit = moments(fitted)
        rows = [(f"v{u}", float(x)) for u, x in enumerate(v_fit)]
        rows += [(f"e{u}-{v}", float(x)) for (u, v), x in zip(fitted.graph.edges, p_fit)]
        cdio.write_csv(out / "fitted_moments.csv", ("vertex_or_edge", "value"), rows, config)
    return EXIT_OK


def _dynamics_generator(config, args):
    if args.independent is not None:
        alpha_file, horizon_text = args.independent
        with open(alpha_file) as handle:
            payload = json.load(handle)
        alpha = payload["alpha"] if isinstance(payload, dict) else payload
        return independent_generator(np.asarray(alpha, dtype=float), float(horizon_text)), float(
            horizon_text
        )
    independent = config.get("independent")
    if independent is not None:
        horizon = float(independent.get("horizon", config.get("horizon", 1.0)))
        return independent_generator(np.asarray(independent["alpha"], dtype=float), horizon), horizon
    generator_file = config.get("io", {}).get("generator_file")
    if generator_file is None:
        raise ConfigError("dynamics needs io.generator_file, an independent block, or --independent")
    return cdio.read_generator_json(generator_file), float(config.get("horizon", 1.0))


def cmd_dynamics(config, args) -> int:
    numerics = _numerics(config)
    out = _out_dir(config, args)
    gen, horizon = _dynamics_generator(config, args)
    grid = geometric_grid(horizon, int(numerics["grid_points"]), numerics["t_min_fraction"])
    solution = forward_solve(gen, grid, rtol=numerics["rtol"], atol=numerics["atol"])
    cdio.write_trajectory_csv(out / "trajectory.csv", solution, config)
    curves = curves_from_rates(gen, horizon=horizon, t_grid=grid)
    cdio.write_curves_csv(out / "curves.csv", curves, grid, config)
    peak, per_t = membership_over_time(gen, grid)
    cdio.write_membership_csv(out / "membership.csv", grid, per_t, config)
    residuals = [master_residual(gen, curves, float(t)) for t in grid]
    cdio.write_master_residual_csv(out / "master_residual.csv", grid, residuals, config)
    return EXIT_OK


def _search_model(config):
    kind = config.get("model")
    if kind == "I":
        if "N" not in config:
            raise ConfigError("Model I needs N")
        return ("I", int(config["N"]))
    if kind in ("II", "III"):
        if "M" not in config or "N" not in config:
            raise ConfigError(f"Model {kind} needs M and N")
        return (kind, int(config["M"]), int(config["N"]))
    raise ConfigError(f"unknown search model {kind!r}")


def cmd_search(config, args) -> int:
    model = _search_model(config)
    targets = config.get("targets")
    if not isinstance(targets, dict):
        raise ConfigError("search needs a targets object")
    numerics = _numerics(config)
    search_block = dict(config.get("search", {}))
    if args.seed is not None:
        search_block["seed"] = args.seed
    search_config = SearchConfig(
        restarts=int(search_block.get("restarts", 16)),
        max_iter=search_block.get("max_iter"),
        seed=int(search_block.get("seed", 0)),
        grid_points=int(numerics["grid_points"]),
        t_min_fraction=float(numerics["t_min_fraction"]),
        penalty_weight=float(search_block.get("penalty_weight", 1e4)),
        horizon=float(config.get("horizon", 1.0)),
    )
    out = _out_dir(config, args)
    try:
        result = feasibility_search(model, targets, search_config)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cdio.write_search_json(out / "result.json", result, config)
    cdio.write_restarts_csv(out / "restarts.csv", result, config)
    beta_star = float(targets["beta"])
    if model[0] == "I":
        report = coeff_check_I(result.best_rates, beta_star)
        payload = {
            "model": "I",
            "beta_star": beta_star,
            "lam_linear": [float(x) for x in report.lam_linear],
            "lam_exponential": [float(x) for x in report.lam_exponential],
            "mismatch": [float(x) for x in report.mismatch],
            "consistent": report.consistent,
        }
    elif model[0] == "II":
        value = coeff_check_II(model[1], model[2], beta_star)
        payload = {"model": "II", "beta_star": beta_star, "inconsistency": float(value)}
    else:
        report = coeff_check_III(result.best_rates, beta_star)
        payload = {
            "model": "III",
            "beta_star": beta_star,
            "coefficients": {
                "A": report.coeff_a,
                "B": report.coeff_b,
                "C": report.coeff_c,
                "D": report.coeff_d,
            },
            "diagonal_mismatch": [float(x) for x in report.diagonal_mismatch],
            "n_equations": report.n_equations,
            "n_satisfied": report.n_satisfied,
            "intersection_bound": report.intersection_bound,
            "bound_violated": report.bound_violated,
        }
    cdio.write_json(out / "coeff_check.json", payload, config)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corrdefault",
        description="Correlated-default models on subset lattices: exact inference, "
        "monotone Markov dynamics, and admissibility diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("model", "evaluate, convert, and optionally fit a default model"),
        ("dynamics", "forward-solve a monotone chain and score its admissibility"),
        ("search", "feasibility search over lumped rates for the symmetric models"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="JSON run configuration")
        cmd.add_argument("--out", default=None, help="output directory (overrides io.out_dir)")
        cmd.add_argument("--seed", type=int, default=None, help="override the configured seed")
        if name == "model":
            cmd.add_argument("--fit", action="store_true", help="fit moments from io.targets_file")
        if name == "dynamics":
            cmd.add_argument(
                "--independent",
                nargs=2,
                metavar=("ALPHA_FILE", "HORIZON"),
                default=None,
                help="use the independent construction for these terminal alphas",
            )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"model": cmd_model, "dynamics": cmd_dynamics, "search": cmd_search}
    try:
        config = _load_config(args.config)
        return handlers[args.command](config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleTargetsError as exc:
        print(f"infeasible input: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ForwardSolveError, FitConvergenceError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (KeyError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
