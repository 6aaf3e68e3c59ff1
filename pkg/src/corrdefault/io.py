"""File formats: model/generator JSON schemas and CSV emitters.

Every emitted file carries a header block with the effective config hash and
the tool version so runs are diffable; numeric values use the shortest
round-trip representation.
"""

from __future__ import annotations

import hashlib
import json
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .ctmc import ForwardSolution, MonotoneGenerator
from .model import Graph, ModelParams, IsingParams, InteractionCoeffs, SubsetDist

TOOL_VERSION = "0.1.0"


def config_hash(config: Mapping) -> str:
    """Stable hash of a JSON-serializable config."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _fmt(value) -> str:
    return repr(float(value))


def _header_lines(meta: Mapping[str, str]) -> str:
    return "".join(f"# {key}={value}\n" for key, value in meta.items())


def _meta(config: Optional[Mapping]) -> dict:
    meta = {"tool_version": TOOL_VERSION}
    if config is not None:
        meta["config_hash"] = config_hash(config)
    return meta


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence], config=None, extra_meta=None):
    meta = _meta(config)
    if extra_meta:
        meta.update(extra_meta)
    with open(path, "w") as handle:
        handle.write(_header_lines(meta))
        handle.write(",".join(columns) + "\n")
        for row in rows:
            handle.write(
                ",".join(
                    str(c) if isinstance(c, (str, int, np.integer)) else _fmt(c) for c in row
                )
            )
            handle.write("\n")


def write_json(path, payload: Mapping, config=None):
    document = {"meta": _meta(config)}
    document.update(payload)
    with open(path, "w") as handle:
        json.dump(document, handle, indent=2, sort_keys=True)
        handle.write("\n")


def model_to_dict(params: ModelParams) -> dict:
    graph = params.graph
    payload = {
        "n_vertices": graph.n_vertices,
        "edges": [list(edge) for edge in graph.edges],
        "alpha": [float(a) for a in params.alpha],
        "beta": [
            {"edge": list(edge), "value": float(b)} for edge, b in zip(graph.edges, params.beta)
        ],
    }
    if graph.bipartition is not None:
        hat, check = graph.bipartition
        payload["bipartition"] = {"hat": list(hat), "check": list(check)}
    return payload


def model_from_dict(payload: Mapping) -> ModelParams:
    n_vertices = int(payload["n_vertices"])
    edges = tuple(tuple(int(v) for v in edge) for edge in payload.get("edges", []))
    bipartition = None
    if payload.get("bipartition") is not None:
        bip = payload["bipartition"]
        bipartition = (tuple(int(v) for v in bip["hat"]), tuple(int(v) for v in bip["check"]))
    graph = Graph(n_vertices, edges, bipartition)
    alpha = np.asarray(payload["alpha"], dtype=float)
    beta = np.zeros(graph.n_edges)
    for entry in payload.get("beta", []):
        u, v = (int(x) for x in entry["edge"])
        beta[graph.edge_position(u, v)] = float(entry["value"])
    return ModelParams(graph, alpha, beta)


def write_model_json(path, params: ModelParams, config=None):
    write_json(path, model_to_dict(params), config)


def read_model_json(path) -> ModelParams:
    with open(path) as handle:
        return model_from_dict(json.load(handle))


def ising_to_dict(ising: IsingParams) -> dict:
    return {
        "n_vertices": ising.graph.n_vertices,
        "edges": [list(edge) for edge in ising.graph.edges],
        "gamma": [float(g) for g in ising.gamma],
        "delta": [
            {"edge": list(edge), "value": float(d)}
            for edge, d in zip(ising.graph.edges, ising.delta)
        ],
        "log_norm": float(ising.log_norm),
    }


def generator_to_dict(gen: MonotoneGenerator) -> dict:
    entries = []
    for mask in range(1 << gen.n_vertices):
        for v in range(gen.n_vertices):
            rate = float(gen.rates[mask, v])
            if rate != 0.0:
                entries.append({"subset_bitmask": mask, "vertex": v, "rate": rate})
    return {"n_vertices": gen.n_vertices, "entries": entries}


def generator_from_dict(payload: Mapping) -> MonotoneGenerator:
    n_vertices = int(payload["n_vertices"])
    entries = [
        (int(e["subset_bitmask"]), int(e["vertex"]), float(e["rate"]))
        for e in payload.get("entries", [])
    ]
    return MonotoneGenerator.from_entries(n_vertices, entries)


def write_generator_json(path, gen: MonotoneGenerator, config=None):
    write_json(path, generator_to_dict(gen), config)


def read_generator_json(path) -> MonotoneGenerator:
    with open(path) as handle:
        return generator_from_dict(json.load(handle))


def write_distribution_csv(path, dist: SubsetDist, config=None):
    rows = ((mask, float(p)) for mask, p in enumerate(dist.probs))
    write_csv(path, ("subset_bitmask", "probability"), rows, config)


def read_distribution_csv(path) -> SubsetDist:
    masks, probs = [], []
    with open(path) as handle:
        for line in handle:
            if line.startswith("#") or line.startswith("subset_bitmask"):
                continue
            mask, prob = line.strip().split(",")
            masks.append(int(mask))
            probs.append(float(prob))
    size = max(masks) + 1
    vec = np.zeros(size)
    vec[np.array(masks)] = probs
    n = size.bit_length() - 1
    return SubsetDist(n, vec)


def write_trajectory_csv(path, solution: ForwardSolution, config=None):
    def rows():
        for i, t in enumerate(solution.t_grid):
            for mask, p in enumerate(solution.probs[i]):
                yield (_fmt(t), mask, float(p))

    write_csv(path, ("t", "subset_bitmask", "probability"), rows(), config)


def write_membership_csv(path, t_grid, per_t, config=None):
    peak = float(np.max(per_t)) if len(per_t) else 0.0
    rows = ((_fmt(t), float(r)) for t, r in zip(t_grid, per_t))
    write_csv(path, ("t", "residual"), rows, config, extra_meta={"max_residual": _fmt(peak)})


def write_master_residual_csv(path, t_grid, residuals_by_t, config=None):
    def rows():
        for t, res in zip(t_grid, residuals_by_t):
            for mask, value in enumerate(res):
                yield (_fmt(t), mask, float(value))

    write_csv(path, ("t", "subset_bitmask", "residual"), rows(), config)


def write_curves_csv(path, curves, t_grid, config=None):
    """Curve dump: one row per time per vertex (alpha) and per pair (beta)."""

    def rows():
        for t in t_grid:
            alpha, alpha_prime, _ = curves.alpha(float(t))
            for u in range(curves.n_vertices):
                yield (_fmt(t), f"v{u}", "alpha", float(alpha[u]), float(alpha_prime[u]))
            for (u, v), curve in sorted(curves.pair_curves.items()):
                beta, beta_prime = curve(float(t))
                yield (_fmt(t), f"e{u}-{v}", "beta", float(beta), float(beta_prime))

    write_csv(path, ("t", "vertex_or_edge", "alpha_or_beta", "value", "derivative"), rows(), config)


def lumped_to_dict(rates) -> dict:
    from .reduced import LumpedRatesBi, LumpedRatesI

    if isinstance(rates, LumpedRatesI):
        return {"kind": "complete", "n_vertices": rates.n_vertices, "lam": [float(x) for x in rates.lam]}
    if isinstance(rates, LumpedRatesBi):
        return {
            "kind": "bipartite",
            "n_hat": rates.n_hat,
            "n_check": rates.n_check,
            "hat_rates": [[float(x) for x in row] for row in rates.hat_rates],
            "check_rates": [[float(x) for x in row] for row in rates.check_rates],
        }
    raise TypeError(f"not a lumped rate table: {type(rates)!r}")


def write_search_json(path, result, config=None):
    payload = {
        "model": result.model,
        "sizes": list(result.sizes),
        "targets": result.targets,
        "residual_floor": float(result.residual_floor),
        "terminal_mismatch": float(result.terminal_mismatch),
        "restarts_used": result.restarts_used,
        "best_index": result.best_index,
        "best_rates": lumped_to_dict(result.best_rates),
    }
    write_json(path, payload, config)


def write_restarts_csv(path, result, config=None):
    rows = (
        (
            record.index,
            record.n_evaluations,
            float(record.objective),
            float(record.terminal_mismatch),
            float(record.residual_max),
        )
        for record in result.trace
    )
    write_csv(
        path,
        ("restart", "iteration", "objective", "terminal_mismatch", "residual_floor"),
        rows,
        config,
    )


def interactions_rows(coeffs: InteractionCoeffs):
    for mask in range(1, 1 << coeffs.n_vertices):
        yield (mask, float(coeffs.coeffs[mask]))


def write_interactions_csv(path, coeffs: InteractionCoeffs, config=None):
    write_csv(path, ("subset_bitmask", "coefficient"), interactions_rows(coeffs), config)
