"""Candidate parameter curves and the master consistency equation.

For any monotone generator, the transient probabilities of subsets of size
at most two form a closed subsystem, so the single-vertex curve alpha_u(t)
has a closed form and the pair curve beta_uv(t) solves a scalar ODE driven
only by low-order rates.  Admissible dynamics additionally require the
master equation to hold for every larger subset; its residuals are the
certificates this module computes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.special import logsumexp

from ._num import (
    alpha_prime_value,
    exp_alpha_value,
    expm1_over,
    geometric_grid,
    phi_minus,
    subset_bit_matrix,
)
from .ctmc import MonotoneGenerator, ForwardSolveError, forward_solve
from .model import Graph, SubsetDist, family_membership_residual

# The attracting initial layer makes the bounded solution forgiving: starting
# this far below the first requested time washes the O(t0) seed error out to
# ~1e-12 by the time the grid begins.
_SEED_TIME_FRACTION = 1e-5


def alpha_curve(q_u: float, r_empty: float, r_u: float, t):
    """Closed-form single-vertex curve: (alpha, alpha', e^alpha) at times t.

    Solves alpha' = q_u e^{-alpha} + (r_empty - r_u) with the boundary
    behavior e^{alpha} -> 0 as t -> 0.  The expm1-based forms are continuous
    through the degenerate case r_empty = r_u, where they reduce to
    alpha = log(q_u t), alpha' = 1/t.
    """
    if q_u <= 0.0:
        raise ValueError("q_u must be positive")
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0.0):
        raise ValueError("t must be positive")
    delta = r_empty - r_u
    exp_alpha = exp_alpha_value(q_u, delta, t)
    with np.errstate(divide="ignore"):
        alpha = np.log(exp_alpha)
    return alpha, alpha_prime_value(delta, t), exp_alpha


@dataclass(frozen=True)
class BetaCurve:
    """Pair interaction curve beta_uv on a grid, with a dense evaluator."""

    t_grid: np.ndarray
    beta: np.ndarray
    beta_prime: np.ndarray
    _dense: object
    _rhs: object
    t_min: float
    t_max: float

    def __call__(self, t):
        """(beta, beta') at arbitrary times within the integrated span."""
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t_min) or np.any(t > self.t_max * (1.0 + 1e-12)):
            raise ValueError(f"t outside the integrated span [{self.t_min}, {self.t_max}]")
        beta = self._dense(np.log(t))
        if beta.ndim > 1:
            beta = beta[0]
        else:
            beta = float(beta[0]) if beta.shape == (1,) else beta
        beta_prime = self._rhs(t, beta)
        return beta, beta_prime


def _pair_rhs(q_u, q_v, q_uv, q_vu, r_empty, r_u, r_v, r_uv):
    d_u, d_v, c = r_empty - r_u, r_empty - r_v, r_empty - r_uv

    def rhs(t, beta):
        ap = alpha_prime_value(d_u, t) + alpha_prime_value(d_v, t)
        drive = q_vu / exp_alpha_value(q_u, d_u, t) + q_uv / exp_alpha_value(q_v, d_v, t)
        return c - ap + drive * np.exp(-beta)

    def rhs_log_time(s, beta):
        # t * rhs, with the 1/t singular factors cancelled analytically
        t = np.exp(s)
        ap = 1.0 / phi_minus(d_u * t) + 1.0 / phi_minus(d_v * t)
        drive = q_vu / (q_u * expm1_over(d_u * t)) + q_uv / (q_v * expm1_over(d_v * t))
        return c * t - ap + drive * np.exp(-beta)

    return rhs, rhs_log_time


def beta_curve(
    q_u: float,
    q_v: float,
    q_uv: float,
    q_vu: float,
    r_empty: float,
    r_u: float,
    r_v: float,
    r_uv: float,
    t_grid,
    rtol: float = 1e-10,
    atol: float = 1e-12,
) -> BetaCurve:
    """Pair curve by integrating the consistency ODE for the two-vertex subset.

    beta' = (R_empty - R_uv - alpha_u' - alpha_v')
            + (q_vu e^{-alpha_u} + q_uv e^{-alpha_v}) e^{-beta},
    integrated in log-time from the small-t limit value
    beta(0+) = log((q_u q_uv + q_v q_vu) / (2 q_u q_v)), which is the unique
    initial condition with a bounded solution.
    """
    if q_u <= 0.0 or q_v <= 0.0:
        raise ValueError("q_u and q_v must be positive")
    if q_uv < 0.0 or q_vu < 0.0:
        raise ValueError("pair rates must be nonnegative")
    if q_u * q_uv + q_v * q_vu <= 0.0:
        raise ValueError("the pair state is unreachable; beta diverges to -inf")
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    if np.any(t_grid <= 0.0) or np.any(np.diff(t_grid) <= 0.0):
        raise ValueError("t_grid must be positive and strictly increasing")
    beta0 = float(np.log((q_u * q_uv + q_v * q_vu) / (2.0 * q_u * q_v)))
    rhs, rhs_log = _pair_rhs(q_u, q_v, q_uv, q_vu, r_empty, r_u, r_v, r_uv)
    t0 = _SEED_TIME_FRACTION * float(t_grid[0])
    sol = solve_ivp(
        rhs_log,
        (np.log(t0), np.log(float(t_grid[-1]))),
        np.array([beta0]),
        method="DOP853",
        t_eval=np.log(t_grid),
        dense_output=True,
        rtol=rtol,
        atol=atol,
    )
    if not sol.success:
        raise ForwardSolveError(f"pair-curve integration failed: {sol.message}")
    beta = sol.y[0]
    return BetaCurve(
        t_grid, beta, rhs(t_grid, beta), sol.sol, rhs, t_min=t0, t_max=float(t_grid[-1])
    )


@dataclass(frozen=True)
class ParamCurves:
    """Time-dependent parameters (alpha_u, beta_uv) with derivative evaluators.

    Vertex curves are closed-form; pair curves are integrated.  Pairs absent
    from the mapping evaluate to the constant zero curve.
    """

    n_vertices: int
    q: np.ndarray
    delta: np.ndarray
    pair_curves: Dict[Tuple[int, int], BetaCurve]
    horizon: float

    def alpha(self, t: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(alpha_u, alpha_u', e^{alpha_u}) for all vertices at scalar t."""
        exp_alpha = exp_alpha_value(self.q, self.delta, t)
        with np.errstate(divide="ignore"):
            alpha = np.log(exp_alpha)
        return alpha, alpha_prime_value(self.delta, t), exp_alpha

    def beta_matrices(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        """Symmetric (beta, beta') matrices at scalar t; zeros off the stored pairs."""
        n = self.n_vertices
        b = np.zeros((n, n))
        bp = np.zeros((n, n))
        for (u, v), curve in self.pair_curves.items():
            beta, beta_prime = curve(t)
            b[u, v] = b[v, u] = float(beta)
            bp[u, v] = bp[v, u] = float(beta_prime)
        return b, bp

    def beta(self, u: int, v: int, t) -> Tuple[np.ndarray, np.ndarray]:
        key = (u, v) if u < v else (v, u)
        curve = self.pair_curves.get(key)
        if curve is None:
            t = np.asarray(t, dtype=float)
            return np.zeros_like(t), np.zeros_like(t)
        return curve(t)

    def log_partition_curve(self, t: float) -> Tuple[float, float]:
        """(log Z_t, d/dt log Z_t) from the curves by exact enumeration."""
        alpha, alpha_prime, _ = self.alpha(t)
        b, bp = self.beta_matrices(t)
        bits = subset_bit_matrix(self.n_vertices).astype(float)
        h = bits @ alpha + 0.5 * np.einsum("au,av,uv->a", bits, bits, b)
        h_prime = bits @ alpha_prime + 0.5 * np.einsum("au,av,uv->a", bits, bits, bp)
        log_z = float(logsumexp(h))
        weights = np.exp(h - log_z)
        return log_z, float(np.dot(weights, h_prime))


def curves_from_rates(
    gen: MonotoneGenerator,
    horizon: float = 1.0,
    t_grid=None,
    rtol: float = 1e-10,
    atol: float = 1e-12,
) -> ParamCurves:
    """Assemble every vertex and pair curve from the generator's low-order rates.

    These curves are forced by the consistency requirements on subsets of
    size one and two, so they are the only candidate parameter trajectories
    the generator could realize.
    """
    n = gen.n_vertices
    q = np.array([gen.q_u(u) for u in range(n)])
    for u in range(n):
        if q[u] <= 0.0:
            raise ValueError(f"q(empty, {u}) must be positive; alpha_{u} is undefined otherwise")
    if t_grid is None:
        t_grid = geometric_grid(horizon)
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    r_empty = gen.r_empty
    delta = r_empty - np.array([gen.r_u(u) for u in range(n)])
    pair_curves = {}
    for u in range(n):
        for v in range(u + 1, n):
            pair_curves[(u, v)] = beta_curve(
                q[u],
                q[v],
                gen.q_uv(u, v),
                gen.q_uv(v, u),
                r_empty,
                gen.r_u(u),
                gen.r_u(v),
                gen.r_uv(u, v),
                t_grid,
                rtol=rtol,
                atol=atol,
            )
    return ParamCurves(n, q, delta, pair_curves, horizon=float(t_grid[-1]))


def independent_curves(alpha, horizon: float = 1.0, t_grid=None) -> ParamCurves:
    """Curves of the independent construction: closed-form alphas, no pair terms."""
    alpha = np.asarray(alpha, dtype=float)
    lam = np.logaddexp(0.0, alpha) / horizon
    if t_grid is None:
        t_grid = geometric_grid(horizon)
    return ParamCurves(
        alpha.shape[0], lam, lam, {}, horizon=float(np.max(t_grid))
    )


def master_residual(gen: MonotoneGenerator, curves: ParamCurves, t: float) -> np.ndarray:
    """Residual of the master consistency equation for every nonempty subset.

    Entry B holds  sum_{u in B} alpha_u' + sum_{pairs in B} beta_uv'
    - sum_{u in B} q(B-u, u) exp(-alpha_u - sum_{v in B-u} beta_uv)
    - R_empty + R_B, evaluated at time t; entry 0 (the empty set) is zero.
    Admissible dynamics require every entry to vanish on (0, horizon].
    """
    if gen.n_vertices != curves.n_vertices:
        raise ValueError("generator and curves have different vertex counts")
    t = float(t)
    if not (0.0 < t <= curves.horizon):
        raise ValueError("t must lie in (0, horizon]")
    n = gen.n_vertices
    alpha, alpha_prime, _ = curves.alpha(t)
    b, bp = curves.beta_matrices(t)
    bits = subset_bit_matrix(n).astype(float)
    lhs = bits @ alpha_prime + 0.5 * np.einsum("au,av,uv->a", bits, bits, bp)
    masks = np.arange(1 << n)
    inflow = np.zeros(1 << n)
    for u in range(n):
        has_u = ((masks >> u) & 1).astype(bool)
        b_masks = masks[has_u]
        beta_sum = bits[b_masks] @ b[u] - b[u, u]
        inflow[b_masks] += gen.rates[b_masks ^ (1 << u), u] * np.exp(-alpha[u] - beta_sum)
    res = lhs - inflow - gen.r_empty + gen.exit_rates
    res[0] = 0.0
    return res


def membership_over_time(
    gen: MonotoneGenerator,
    t_grid,
    graph: Optional[Graph] = None,
    rtol: float = 1e-11,
    atol: float = 1e-14,
) -> Tuple[float, np.ndarray]:
    """Max out-of-family interaction residual of the transient law over a grid.

    Solves the forward equations once, Mobius-extracts interactions at every
    grid time, and scores them against the graph's family (complete graph by
    default, so only coefficients of order three and higher count).
    Returns (max over the grid, per-time residuals).
    """
    if graph is None:
        graph = Graph.complete(gen.n_vertices)
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    solution = forward_solve(gen, t_grid, rtol=rtol, atol=atol)
    per_t = np.array(
        [
            family_membership_residual(SubsetDist(gen.n_vertices, row), graph)
            for row in solution.probs
        ]
    )
    return float(per_t.max()), per_t
