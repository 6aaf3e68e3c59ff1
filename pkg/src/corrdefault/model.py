"""Exact representation of the graphical correlated-default distribution.

A model is a finite simple graph plus a real weight per vertex (individual
default propensity, log-odds scale) and per edge (joint propensity).  The
probability of a default pattern, identified with the subset of defaulted
vertices, is exp(H(A))/Z with H the pairwise Hamiltonian.  Everything here
enumerates the 2^n subset lattice exactly, so vertex counts are capped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from ._num import (
    EXACT_ENUM_CAP,
    mobius_from_log,
    popcounts,
    subset_bit_matrix,
    zeta_over_subsets,
)

SubsetLike = Union[int, Iterable[int]]

# Sum-to-one tolerance for constructing a distribution.  Looser than the
# 1e-12 achieved by parameter-derived distributions because forward-equation
# solutions may carry up to 1e-10 of un-renormalized drift.
_DIST_SUM_TOL = 1e-9


class EnumerationCapError(ValueError):
    """Raised when an exact operation would enumerate more than 2^cap states."""


class ZeroProbabilityError(ValueError):
    """Raised when log-probability coordinates are requested for a distribution with empty cells."""


class InfeasibleTargetsError(ValueError):
    """Raised when requested moments violate Frechet bounds or strict positivity."""


class FitConvergenceError(RuntimeError):
    """Raised when moment fitting exhausts its iteration budget.

    Carries the final residual in the ``residual`` attribute.
    """

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


def _check_cap(n_vertices, cap=EXACT_ENUM_CAP):
    if n_vertices > cap:
        raise EnumerationCapError(
            f"exact enumeration over {n_vertices} vertices exceeds the cap of {cap}"
        )


def subset_mask(subset: SubsetLike, n_vertices: int) -> int:
    """Normalize a subset (bitmask or vertex iterable) to a bitmask."""
    if isinstance(subset, (int, np.integer)):
        mask = int(subset)
        if mask < 0 or mask >= (1 << n_vertices):
            raise ValueError(f"bitmask {mask} out of range for {n_vertices} vertices")
        return mask
    mask = 0
    for v in subset:
        v = int(v)
        if v < 0 or v >= n_vertices:
            raise ValueError(f"vertex {v} out of range for {n_vertices} vertices")
        if mask & (1 << v):
            raise ValueError(f"vertex {v} listed twice")
        mask |= 1 << v
    return mask


def _canonical_edge(u, v):
    u, v = int(u), int(v)
    if u == v:
        raise ValueError(f"self-loop at vertex {u}")
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True)
class Graph:
    """Finite simple graph; vertices are 0..n_vertices-1.

    ``bipartition`` optionally names two disjoint vertex classes covering all
    vertices; when present every edge must join the classes.
    """

    n_vertices: int
    edges: Tuple[Tuple[int, int], ...]
    bipartition: Optional[Tuple[Tuple[int, ...], Tuple[int, ...]]] = None

    def __post_init__(self):
        if self.n_vertices < 1:
            raise ValueError("need at least one vertex")
        canon = sorted({_canonical_edge(u, v) for (u, v) in self.edges})
        if len(canon) != len(tuple(self.edges)):
            raise ValueError("duplicate edges")
        for u, v in canon:
            if not (0 <= u < self.n_vertices and 0 <= v < self.n_vertices):
                raise ValueError(f"edge ({u},{v}) out of range")
        object.__setattr__(self, "edges", tuple(canon))
        if self.bipartition is not None:
            hat, check = (tuple(int(v) for v in c) for c in self.bipartition)
            if set(hat) & set(check):
                raise ValueError("bipartition classes overlap")
            if set(hat) | set(check) != set(range(self.n_vertices)):
                raise ValueError("bipartition must cover all vertices")
            for u, v in self.edges:
                if (u in hat) == (v in hat):
                    raise ValueError(f"edge ({u},{v}) does not join the bipartition classes")
            object.__setattr__(self, "bipartition", (hat, check))

    @classmethod
    def complete(cls, n_vertices: int) -> "Graph":
        edges = tuple((u, v) for u in range(n_vertices) for v in range(u + 1, n_vertices))
        return cls(n_vertices, edges)

    @classmethod
    def complete_bipartite(cls, n_hat: int, n_check: int) -> "Graph":
        hat = tuple(range(n_hat))
        check = tuple(range(n_hat, n_hat + n_check))
        edges = tuple((u, v) for u in hat for v in check)
        return cls(n_hat + n_check, edges, bipartition=(hat, check))

    @classmethod
    def empty(cls, n_vertices: int) -> "Graph":
        return cls(n_vertices, ())

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def has_edge(self, u: int, v: int) -> bool:
        return _canonical_edge(u, v) in self._edge_index

    def edge_position(self, u: int, v: int) -> int:
        return self._edge_index[_canonical_edge(u, v)]

    @property
    def _edge_index(self) -> Mapping[Tuple[int, int], int]:
        cached = self.__dict__.get("_edge_index_cache")
        if cached is None:
            cached = {e: i for i, e in enumerate(self.edges)}
            self.__dict__["_edge_index_cache"] = cached
        return cached

    def is_complete(self) -> bool:
        return self.n_edges == self.n_vertices * (self.n_vertices - 1) // 2

    def is_complete_bipartite(self) -> bool:
        if self.bipartition is None:
            return False
        hat, check = self.bipartition
        return self.n_edges == len(hat) * len(check)

    def relabel(self, perm: Iterable[int]) -> "Graph":
        """Graph with vertex v renamed to perm[v]."""
        perm = tuple(int(p) for p in perm)
        edges = tuple(_canonical_edge(perm[u], perm[v]) for (u, v) in self.edges)
        bip = None
        if self.bipartition is not None:
            hat, check = self.bipartition
            bip = (tuple(sorted(perm[v] for v in hat)), tuple(sorted(perm[v] for v in check)))
        return Graph(self.n_vertices, edges, bip)


def _frozen_array(values, length, name):
    arr = np.array(values, dtype=float)
    if arr.shape != (length,):
        raise ValueError(f"{name} must have length {length}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ModelParams:
    """Default-model parameters: alpha per vertex, beta per edge (aligned with graph.edges)."""

    graph: Graph
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", _frozen_array(self.alpha, self.graph.n_vertices, "alpha"))
        object.__setattr__(self, "beta", _frozen_array(self.beta, self.graph.n_edges, "beta"))

    def beta_of(self, u: int, v: int) -> float:
        """Edge weight, 0 for non-edges."""
        if self.graph.has_edge(u, v):
            return float(self.beta[self.graph.edge_position(u, v)])
        _canonical_edge(u, v)
        return 0.0


@dataclass(frozen=True)
class IsingParams:
    """Spin-form parameters over {-1,+1}^V equivalent to a ModelParams."""

    graph: Graph
    gamma: np.ndarray
    delta: np.ndarray
    log_norm: float

    def __post_init__(self):
        object.__setattr__(self, "gamma", _frozen_array(self.gamma, self.graph.n_vertices, "gamma"))
        object.__setattr__(self, "delta", _frozen_array(self.delta, self.graph.n_edges, "delta"))


@dataclass(frozen=True)
class SubsetDist:
    """Exact probability vector over subsets of the vertex set, indexed by bitmask."""

    n_vertices: int
    probs: np.ndarray
    log_partition: Optional[float] = None

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.shape != (1 << self.n_vertices,):
            raise ValueError("probability vector length must be 2^n_vertices")
        if np.any(probs < -1e-15):
            raise ValueError("negative probability")
        probs = np.maximum(probs, 0.0)
        total = probs.sum()
        if abs(total - 1.0) > _DIST_SUM_TOL:
            raise ValueError(f"probabilities sum to {total}, not 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    def probability(self, subset: SubsetLike) -> float:
        return float(self.probs[subset_mask(subset, self.n_vertices)])

    def vertex_marginals(self) -> np.ndarray:
        bits = subset_bit_matrix(self.n_vertices)
        return bits.T.astype(float) @ self.probs

    def pair_probability(self, u: int, v: int) -> float:
        u, v = _canonical_edge(u, v)
        masks = np.arange(1 << self.n_vertices)
        both = ((masks >> u) & 1).astype(bool) & ((masks >> v) & 1).astype(bool)
        return float(self.probs[both].sum())

    def relabel(self, perm: Iterable[int]) -> "SubsetDist":
        """Distribution after renaming vertex v to perm[v]."""
        perm = tuple(int(p) for p in perm)
        masks = np.arange(1 << self.n_vertices)
        new_masks = np.zeros_like(masks)
        for v in range(self.n_vertices):
            new_masks |= ((masks >> v) & 1) << perm[v]
        out = np.empty_like(self.probs)
        out[new_masks] = self.probs
        return SubsetDist(self.n_vertices, out, self.log_partition)


@dataclass(frozen=True)
class InteractionCoeffs:
    """Canonical log-linear coordinates c_A per nonempty subset A.

    Defined by the Mobius inversion of log p; the reconstruction identity is
    log(p(A)/p(empty)) = sum over nonempty B subseteq A of c_B.  For a
    distribution generated by a ModelParams, c_{u} = alpha_u, c_{uv} = beta_uv
    on edges and every other coefficient vanishes.
    """

    n_vertices: int
    coeffs: np.ndarray
    log_p_empty: float

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=float)
        if coeffs.shape != (1 << self.n_vertices,):
            raise ValueError("coefficient vector length must be 2^n_vertices")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)

    def single(self, u: int) -> float:
        return float(self.coeffs[1 << u])

    def pair(self, u: int, v: int) -> float:
        u, v = _canonical_edge(u, v)
        return float(self.coeffs[(1 << u) | (1 << v)])

    def max_above_order(self, order: int) -> float:
        pc = popcounts(self.n_vertices)
        sel = pc > order
        return float(np.max(np.abs(self.coeffs[sel]))) if np.any(sel) else 0.0


def hamiltonian_vector(params: ModelParams) -> np.ndarray:
    """H(A) for every bitmask A; H(empty) = 0 exactly."""
    graph = params.graph
    _check_cap(graph.n_vertices)
    bits = subset_bit_matrix(graph.n_vertices).astype(float)
    h = bits @ params.alpha
    for (u, v), b in zip(graph.edges, params.beta):
        h += b * bits[:, u] * bits[:, v]
    return h


def hamiltonian(params: ModelParams, subset: SubsetLike) -> float:
    """Sum of alpha over the subset plus beta over edges inside it."""
    mask = subset_mask(subset, params.graph.n_vertices)
    total = 0.0
    for u in range(params.graph.n_vertices):
        if mask & (1 << u):
            total += params.alpha[u]
    for (u, v), b in zip(params.graph.edges, params.beta):
        if (mask >> u) & 1 and (mask >> v) & 1:
            total += b
    return float(total)


def log_partition(params: ModelParams) -> float:
    """log of the normalizer sum_B exp(H(B)), computed with max-shift."""
    return float(logsumexp(hamiltonian_vector(params)))


def full_distribution(params: ModelParams) -> SubsetDist:
    """The exact distribution exp(H(A) - log Z) over all subsets."""
    h = hamiltonian_vector(params)
    log_z = float(logsumexp(h))
    return SubsetDist(params.graph.n_vertices, np.exp(h - log_z), log_partition=log_z)


def subset_probability(params: ModelParams, subset: SubsetLike) -> float:
    mask = subset_mask(subset, params.graph.n_vertices)
    h = hamiltonian_vector(params)
    return float(np.exp(h[mask] - logsumexp(h)))


def to_ising(params: ModelParams) -> IsingParams:
    """Equivalent spin-model parameters under sigma_v = 2*1[v in A] - 1.

    gamma_u = alpha_u/2 + (1/4) sum of beta over edges at u; delta = beta/4;
    log_norm absorbs the constant so both pmfs coincide.
    """
    graph = params.graph
    gamma = params.alpha / 2.0
    for (u, v), b in zip(graph.edges, params.beta):
        gamma[u] += b / 4.0
        gamma[v] += b / 4.0
    delta = params.beta / 4.0
    log_norm = log_partition(params) - 0.5 * params.alpha.sum() - 0.25 * params.beta.sum()
    return IsingParams(graph, gamma, delta, log_norm)


def from_ising(ising: IsingParams) -> ModelParams:
    """Inverse of to_ising."""
    graph = ising.graph
    alpha = 2.0 * np.array(ising.gamma)
    for (u, v), d in zip(graph.edges, ising.delta):
        alpha[u] -= 2.0 * d
        alpha[v] -= 2.0 * d
    return ModelParams(graph, alpha, 4.0 * ising.delta)


def spin_distribution(ising: IsingParams) -> SubsetDist:
    """Spin-model pmf indexed by the subset where the spin is +1."""
    graph = ising.graph
    _check_cap(graph.n_vertices)
    signs = 2.0 * subset_bit_matrix(graph.n_vertices).astype(float) - 1.0
    energy = signs @ ising.gamma
    for (u, v), d in zip(graph.edges, ising.delta):
        energy += d * signs[:, u] * signs[:, v]
    log_z = float(logsumexp(energy))
    return SubsetDist(graph.n_vertices, np.exp(energy - log_z), log_partition=log_z)


def extract_interactions(dist: SubsetDist) -> InteractionCoeffs:
    """Mobius inversion of log p into canonical interaction coordinates.

    Requires every cell positive; zero cells are rejected rather than
    smoothed so downstream consistency residuals stay honest.
    """
    if np.any(dist.probs <= 0.0):
        raise ZeroProbabilityError(
            "distribution has empty cells; interactions are undefined (smooth first if that is acceptable)"
        )
    logp = np.log(dist.probs)
    coeffs = mobius_from_log(logp)
    log_p_empty = float(logp[0])
    coeffs = np.array(coeffs)
    coeffs[0] = 0.0
    return InteractionCoeffs(dist.n_vertices, coeffs, log_p_empty)


def reconstruct_log_ratios(coeffs: InteractionCoeffs) -> np.ndarray:
    """log(p(A)/p(empty)) for every A from the interaction coordinates."""
    return zeta_over_subsets(coeffs.coeffs)


def family_membership_residual(dist: SubsetDist, graph: Graph) -> float:
    """Max out-of-family interaction magnitude for the graph's model family.

    Out-of-family coordinates are every c_A with |A| >= 3 and every pair
    coefficient on a non-edge.  Zero (within tolerance) iff dist is
    exp(H)/Z for some parameters on this graph.
    """
    if dist.n_vertices != graph.n_vertices:
        raise ValueError("distribution and graph sizes differ")
    coeffs = extract_interactions(dist)
    pc = popcounts(dist.n_vertices)
    out = pc >= 3
    masks = np.arange(1 << dist.n_vertices)
    for u in range(dist.n_vertices):
        for v in range(u + 1, dist.n_vertices):
            if not graph.has_edge(u, v):
                out |= masks == ((1 << u) | (1 << v))
    return float(np.max(np.abs(coeffs.coeffs[out]))) if np.any(out) else 0.0


def exact_sample(params: ModelParams, n_draws: int, seed: int) -> np.ndarray:
    """i.i.d. subset bitmask draws by inverse CDF on the enumerated pmf."""
    if n_draws < 0:
        raise ValueError("n_draws must be nonnegative")
    dist = full_distribution(params)
    cdf = np.cumsum(dist.probs)
    cdf[-1] = 1.0
    rng = np.random.default_rng(seed)
    u = rng.random(n_draws)
    return np.searchsorted(cdf, u, side="right").astype(np.int64)


def moments(params: ModelParams) -> Tuple[np.ndarray, np.ndarray]:
    """Exact vertex marginals and edge pair probabilities."""
    dist = full_distribution(params)
    bits = subset_bit_matrix(params.graph.n_vertices).astype(float)
    vertex = bits.T @ dist.probs
    pair = np.array(
        [float(np.dot(bits[:, u] * bits[:, v], dist.probs)) for (u, v) in params.graph.edges]
    )
    return vertex, pair


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _check_target_feasibility(graph, vertex_targets, pair_targets):
    if np.any(vertex_targets <= 0.0) or np.any(vertex_targets >= 1.0):
        raise InfeasibleTargetsError("vertex targets must lie strictly inside (0, 1)")
    for (u, v), p_uv in zip(graph.edges, pair_targets):
        lo = max(0.0, vertex_targets[u] + vertex_targets[v] - 1.0)
        hi = min(vertex_targets[u], vertex_targets[v])
        if not (lo < p_uv < hi):
            raise InfeasibleTargetsError(
                f"pair target {p_uv} for edge ({u},{v}) violates the Frechet bounds ({lo}, {hi})"
            )


def fit_moments(
    graph: Graph,
    vertex_targets,
    pair_targets,
    tol: float = 1e-8,
    damping: float = 0.5,
    max_iter: int = 10_000,
) -> ModelParams:
    """Parameters matching prescribed vertex marginals and edge pair probabilities.

    Damped coordinate updates in the style of iterative proportional fitting:
    each sweep recomputes the exact moments, then moves alpha_u by the logit
    gap and beta_uv by the log odds-ratio gap of the target vs current 2x2
    table.  The targets' 2x2 tables must be strictly positive (Frechet).
    """
    _check_cap(graph.n_vertices)
    vertex_targets = np.asarray(vertex_targets, dtype=float)
    pair_targets = np.asarray(pair_targets, dtype=float)
    if vertex_targets.shape != (graph.n_vertices,):
        raise ValueError("need one vertex target per vertex")
    if pair_targets.shape != (graph.n_edges,):
        raise ValueError("need one pair target per edge")
    _check_target_feasibility(graph, vertex_targets, pair_targets)

    def log_odds_ratio(p_u, p_v, p_uv):
        c11 = p_uv
        c10 = p_u - p_uv
        c01 = p_v - p_uv
        c00 = 1.0 - p_u - p_v + p_uv
        return np.log(c11) + np.log(c00) - np.log(c10) - np.log(c01)

    target_logit = _logit(vertex_targets)
    target_lor = np.array(
        [
            log_odds_ratio(vertex_targets[u], vertex_targets[v], p_uv)
            for (u, v), p_uv in zip(graph.edges, pair_targets)
        ]
    )

    alpha = np.array(target_logit)
    beta = np.zeros(graph.n_edges)
    residual = np.inf
    for _ in range(max_iter):
        cur_vertex, cur_pair = moments(ModelParams(graph, alpha, beta))
        residual = max(
            float(np.max(np.abs(cur_vertex - vertex_targets), initial=0.0)),
            float(np.max(np.abs(cur_pair - pair_targets), initial=0.0)),
        )
        if residual <= tol:
            return ModelParams(graph, alpha, beta)
        alpha = alpha + damping * (target_logit - _logit(cur_vertex))
        cur_lor = np.array(
            [
                log_odds_ratio(cur_vertex[u], cur_vertex[v], p_uv)
                for (u, v), p_uv in zip(graph.edges, cur_pair)
            ]
        )
        beta = beta + damping * (target_lor - cur_lor)
    raise FitConvergenceError(
        f"moment fit did not reach tol={tol} in {max_iter} sweeps (residual {residual:.3e})",
        residual,
    )


def independent_params(graph: Graph, marginals) -> ModelParams:
    """Edge-free parameters whose marginals are the given probabilities."""
    marginals = np.asarray(marginals, dtype=float)
    return ModelParams(graph, _logit(marginals), np.zeros(graph.n_edges))


def bernoulli_product_distribution(n_vertices: int, marginals) -> SubsetDist:
    """Product law with the given per-vertex success probabilities."""
    marginals = np.asarray(marginals, dtype=float)
    bits = subset_bit_matrix(n_vertices).astype(float)
    probs = np.prod(bits * marginals + (1.0 - bits) * (1.0 - marginals), axis=1)
    return SubsetDist(n_vertices, probs)
