"""Symmetry-lumped consistency systems and the multi-start feasibility search.

Three symmetric model families are covered: the complete graph with
exchangeable vertices (I), the complete bipartite graph with a common
individual propensity (II), and the complete bipartite graph with
class-dependent propensities (III).  Lumping the master equation over
symmetry orbits turns the 2^n-subset system into a small family of scalar
equations indexed by occupancy counts; the curves constructed from the
lowest-order equations are then scored against all the others.  A positive
residual floor over many search restarts is numerical evidence that no
admissible rate choice exists for the requested terminal parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.linalg import lstsq as scipy_lstsq
from scipy.optimize import least_squares, minimize

from ._num import (
    alpha_prime_value,
    exp_alpha_value,
    exp_beta_pair,
    exp_beta_single,
    geometric_grid,
    popcounts,
    softplus,
    subset_bit_matrix,
)
from .ctmc import MonotoneGenerator


@dataclass(frozen=True)
class LumpedRatesI:
    """Orbit-averaged exit rates on the complete graph: lam[k] for 0 <= k <= N."""

    n_vertices: int
    lam: np.ndarray

    def __post_init__(self):
        if self.n_vertices < 2:
            raise ValueError("need at least two vertices")
        lam = np.array(self.lam, dtype=float)
        if lam.shape != (self.n_vertices + 1,):
            raise ValueError("need one rate per occupancy level 0..N")
        if lam[-1] != 0.0:
            raise ValueError("the full set is absorbing; lam[N] must be 0")
        if np.any(lam[:-1] <= 0.0):
            raise ValueError("lam[0..N-1] must be positive")
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)


@dataclass(frozen=True)
class LumpedRatesBi:
    """Orbit-averaged exit rates on the complete bipartite graph.

    hat_rates[m, n] is the total rate of hat-class additions from a state
    with m hat and n check defaults; check_rates likewise for the check
    class.  Boundary rows (m = M for hat, n = N for check) are zero.
    """

    n_hat: int
    n_check: int
    hat_rates: np.ndarray
    check_rates: np.ndarray

    def __post_init__(self):
        m1, n1 = self.n_hat + 1, self.n_check + 1
        hat = np.array(self.hat_rates, dtype=float)
        check = np.array(self.check_rates, dtype=float)
        if hat.shape != (m1, n1) or check.shape != (m1, n1):
            raise ValueError("rate tables must have shape (M+1, N+1)")
        if np.any(hat[-1, :] != 0.0):
            raise ValueError("hat_rates[M, :] must be zero (no hat vertices left)")
        if np.any(check[:, -1] != 0.0):
            raise ValueError("check_rates[:, N] must be zero (no check vertices left)")
        if np.any(hat[:-1, :] <= 0.0) or np.any(check[:, :-1] <= 0.0):
            raise ValueError("interior lumped rates must be positive")
        hat.setflags(write=False)
        check.setflags(write=False)
        object.__setattr__(self, "hat_rates", hat)
        object.__setattr__(self, "check_rates", check)

    @property
    def r(self) -> float:
        """Exit rate of the empty state."""
        return float(self.hat_rates[0, 0] + self.check_rates[0, 0])


def lump_generator(
    gen: MonotoneGenerator, symmetry: Union[str, Tuple[str, int, int]]
) -> Union[LumpedRatesI, LumpedRatesBi]:
    """Average exit rates over symmetry orbits of the subset lattice.

    symmetry is "complete" (orbits are cardinality levels) or
    ("bipartite", M, N) with hat vertices 0..M-1 and check vertices M..M+N-1
    (orbits are occupancy pairs).
    """
    n = gen.n_vertices
    if symmetry == "complete":
        pc = popcounts(n)
        lam = np.array([gen.exit_rates[pc == k].mean() for k in range(n + 1)])
        lam[-1] = 0.0
        return LumpedRatesI(n, lam)
    if isinstance(symmetry, tuple) and len(symmetry) == 3 and symmetry[0] == "bipartite":
        _, m_hat, n_check = symmetry
        if m_hat + n_check != n:
            raise ValueError(f"bipartite sizes {m_hat}+{n_check} do not match {n} vertices")
        bits = subset_bit_matrix(n)
        occ_hat = bits[:, :m_hat].sum(axis=1)
        occ_check = bits[:, m_hat:].sum(axis=1)
        hat_exit = gen.rates[:, :m_hat].sum(axis=1)
        check_exit = gen.rates[:, m_hat:].sum(axis=1)
        hat = np.zeros((m_hat + 1, n_check + 1))
        check = np.zeros((m_hat + 1, n_check + 1))
        for m in range(m_hat + 1):
            for k in range(n_check + 1):
                orbit = (occ_hat == m) & (occ_check == k)
                hat[m, k] = hat_exit[orbit].mean()
                check[m, k] = check_exit[orbit].mean()
        hat[-1, :] = 0.0
        check[:, -1] = 0.0
        return LumpedRatesBi(m_hat, n_check, hat, check)
    raise ValueError(f"unknown symmetry {symmetry!r}")


def independent_lumped_I(n_vertices: int, alpha_horizon: float, horizon: float = 1.0) -> LumpedRatesI:
    """Lumped rates of the independent construction with common alpha at the horizon."""
    lam_v = float(softplus(alpha_horizon)) / horizon
    lam = lam_v * np.arange(n_vertices, -1, -1, dtype=float)
    return LumpedRatesI(n_vertices, lam)


def independent_lumped_bi(
    n_hat: int,
    n_check: int,
    alpha_hat_horizon: float,
    alpha_check_horizon: float,
    horizon: float = 1.0,
) -> LumpedRatesBi:
    """Lumped rates of the independent bipartite construction."""
    s_hat = float(softplus(alpha_hat_horizon)) / horizon
    s_check = float(softplus(alpha_check_horizon)) / horizon
    hat = s_hat * np.tile(np.arange(n_hat, -1, -1, dtype=float)[:, None], (1, n_check + 1))
    check = s_check * np.tile(np.arange(n_check, -1, -1, dtype=float)[None, :], (n_hat + 1, 1))
    return LumpedRatesBi(n_hat, n_check, hat, check)


@dataclass(frozen=True)
class SharedAlphaProfile:
    """One-pass evaluation of a shared-alpha curve pair on a time grid."""

    t: np.ndarray
    alpha: np.ndarray
    alpha_prime: np.ndarray
    exp_neg_alpha: np.ndarray
    beta: np.ndarray
    beta_prime: np.ndarray
    exp_beta: np.ndarray


@dataclass(frozen=True)
class ReducedCurvesI:
    """Exchangeable-model curves (alpha(t), beta(t)) from (lam0, lam1, lam2)."""

    n_vertices: int
    lam0: float
    lam1: float
    lam2: float

    @property
    def _q(self):
        return self.lam0 / self.n_vertices

    @property
    def _delta(self):
        return self.lam0 - self.lam1

    @property
    def _b1(self):
        return 2.0 * self.lam1 / (self.n_vertices - 1)

    @property
    def _c(self):
        return self.lam0 - self.lam2

    def profile(self, t) -> SharedAlphaProfile:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return _shared_alpha_profile(self._q, self._delta, self._b1, self._c, t)

    def alpha(self, t):
        exp_alpha = exp_alpha_value(self._q, self._delta, t)
        with np.errstate(divide="ignore"):
            return np.log(exp_alpha), alpha_prime_value(self._delta, t)

    def exp_neg_alpha(self, t):
        return 1.0 / exp_alpha_value(self._q, self._delta, t)

    def exp_beta(self, t):
        return exp_beta_single(self._q, self._delta, self._b1, self._c, t)

    def beta(self, t):
        w = self.exp_beta(t)
        _, ap = self.alpha(t)
        beta_prime = self._c - 2.0 * ap + self._b1 * self.exp_neg_alpha(t) / w
        return np.log(w), beta_prime


def _shared_alpha_profile(q, delta, b1, c, t) -> SharedAlphaProfile:
    exp_alpha = exp_alpha_value(q, delta, t)
    ena = 1.0 / exp_alpha
    with np.errstate(divide="ignore"):
        alpha = np.log(exp_alpha)
    alpha_prime = alpha_prime_value(delta, t)
    w = exp_beta_single(q, delta, b1, c, t)
    beta_prime = c - 2.0 * alpha_prime + b1 * ena / w
    return SharedAlphaProfile(t, alpha, alpha_prime, ena, np.log(w), beta_prime, w)


def reduced_curves_I(
    lam0: float, lam1: float, lam2: float, n_vertices: int
) -> ReducedCurvesI:
    """Curves forced by the k = 1, 2 lumped equations on the complete graph.

    alpha solves alpha' = (lam0 - lam1) + (lam0/N) e^{-alpha} in closed form;
    beta is the bounded solution of the k = 2 equation, whose small-t limit
    is log(lam1 N / ((N-1) lam0)).
    """
    if n_vertices < 2:
        raise ValueError("need at least two vertices")
    if min(lam0, lam1, lam2) <= 0.0:
        raise ValueError("lumped rates entering the curves must be positive")
    return ReducedCurvesI(n_vertices, float(lam0), float(lam1), float(lam2))


def _residual_I_kernel(lam, n, prof: SharedAlphaProfile) -> np.ndarray:
    k = np.arange(1, n + 1, dtype=float)[:, None]
    inflow = lam[:-1, None] * (k / (n - k + 1.0)) * prof.exp_neg_alpha[None, :] * np.exp(
        -(k - 1.0) * prof.beta[None, :]
    )
    lhs = k * prof.alpha_prime[None, :] + 0.5 * k * (k - 1.0) * prof.beta_prime[None, :]
    return lhs - (lam[0] - lam[1:, None]) - inflow


def residual_I(lumped: LumpedRatesI, curves: ReducedCurvesI, t) -> np.ndarray:
    """Lumped master-equation residuals, one row per occupancy k = 1..N.

    Row k-1 holds  k alpha' + C(k,2) beta' - (lam0 - lam_k)
    - lam_{k-1} (k/(N-k+1)) e^{-alpha - (k-1) beta}  at each time.
    Rows 0 and 1 (k = 1, 2) vanish by construction.
    """
    if lumped.n_vertices != curves.n_vertices:
        raise ValueError("lumped rates and curves disagree on N")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t <= 0.0):
        raise ValueError("t must be positive")
    return _residual_I_kernel(lumped.lam, lumped.n_vertices, curves.profile(t))


@dataclass(frozen=True)
class CoeffCheckI:
    """Both closed-form rate ladders implied by constant beta, and their gap."""

    beta_star: float
    lam_linear: np.ndarray
    lam_exponential: np.ndarray

    @property
    def mismatch(self) -> np.ndarray:
        return self.lam_linear - self.lam_exponential

    @property
    def consistent(self) -> bool:
        scale = max(1.0, float(np.max(np.abs(self.lam_linear))))
        return bool(np.max(np.abs(self.mismatch)) <= 1e-12 * scale)


def coeff_check_I(lumped: LumpedRatesI, beta_star: float) -> CoeffCheckI:
    """Pointwise comparison of the two rate ladders forced by constant beta.

    Matching polynomial coefficients in e^{-alpha(t)} forces both
    lam_k = k (lam1 - lam0) + lam0 and lam_k = ((N-k)/N) lam0 e^{k beta*};
    a linear ladder and a scaled exponential can agree at N+1 >= 5 points
    only when beta* = 0.
    """
    n = lumped.n_vertices
    k = np.arange(n + 1, dtype=float)
    lam0, lam1 = float(lumped.lam[0]), float(lumped.lam[1])
    linear = k * (lam1 - lam0) + lam0
    exponential = (n - k) / n * lam0 * np.exp(k * beta_star)
    return CoeffCheckI(float(beta_star), linear, exponential)


@dataclass(frozen=True)
class ReducedCurvesII:
    """Common-propensity bipartite curves from the (1,0) and (1,1) equations.

    identity_violation records |hat00/M - check00/N|; admissible dynamics
    force it to zero (the (0,1) equation then pins the same alpha curve).
    """

    n_hat: int
    n_check: int
    q: float
    delta: float
    b1: float
    c: float
    identity_violation: float

    def profile(self, t) -> SharedAlphaProfile:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return _shared_alpha_profile(self.q, self.delta, self.b1, self.c, t)

    def alpha(self, t):
        exp_alpha = exp_alpha_value(self.q, self.delta, t)
        with np.errstate(divide="ignore"):
            return np.log(exp_alpha), alpha_prime_value(self.delta, t)

    def exp_neg_alpha(self, t):
        return 1.0 / exp_alpha_value(self.q, self.delta, t)

    def exp_beta(self, t):
        return exp_beta_single(self.q, self.delta, self.b1, self.c, t)

    def beta(self, t):
        w = self.exp_beta(t)
        _, ap = self.alpha(t)
        beta_prime = self.c - 2.0 * ap + self.b1 * self.exp_neg_alpha(t) / w
        return np.log(w), beta_prime


def reduced_curves_II(lumped: LumpedRatesBi) -> ReducedCurvesII:
    """Curves forced by the (1,0) and (1,1) occupancy equations."""
    m, n = lumped.n_hat, lumped.n_check
    hat, check = lumped.hat_rates, lumped.check_rates
    r = lumped.r
    q = float(hat[0, 0]) / m
    delta = r - float(hat[1, 0] + check[1, 0])
    b1 = float(hat[0, 1]) / m + float(check[1, 0]) / n
    c = r - float(hat[1, 1] + check[1, 1])
    identity_violation = abs(float(hat[0, 0]) / m - float(check[0, 0]) / n)
    return ReducedCurvesII(m, n, q, delta, b1, c, identity_violation)


def _shift_hat(table):
    """table[m-1, n] with a zero row at m = 0."""
    out = np.zeros_like(table)
    out[1:, :] = table[:-1, :]
    return out


def _shift_check(table):
    """table[m, n-1] with a zero column at n = 0."""
    out = np.zeros_like(table)
    out[:, 1:] = table[:, :-1]
    return out


def _residual_II_kernel_raw(hat, check, m_hat, n_check, prof: SharedAlphaProfile) -> np.ndarray:
    r = hat[0, 0] + check[0, 0]
    m = np.arange(m_hat + 1, dtype=float)[:, None, None]
    n = np.arange(n_check + 1, dtype=float)[None, :, None]
    hat_in = _shift_hat(hat)[:, :, None]
    check_in = _shift_check(check)[:, :, None]
    exp_nb = np.exp(-n * prof.beta[None, None, :])
    exp_mb = np.exp(-m * prof.beta[None, None, :])
    inflow = (m / (m_hat - m + 1.0)) * hat_in * prof.exp_neg_alpha * exp_nb
    inflow += (n / (n_check - n + 1.0)) * check_in * prof.exp_neg_alpha * exp_mb
    lhs = (m + n) * prof.alpha_prime[None, None, :] + m * n * prof.beta_prime[None, None, :]
    res = lhs - (r - hat[:, :, None] - check[:, :, None]) - inflow
    res[0, 0, :] = 0.0
    return res


def _residual_II_kernel(lumped: LumpedRatesBi, prof: SharedAlphaProfile) -> np.ndarray:
    return _residual_II_kernel_raw(lumped.hat_rates, lumped.check_rates, lumped.n_hat, lumped.n_check, prof)


def residual_II(lumped: LumpedRatesBi, curves: ReducedCurvesII, t) -> np.ndarray:
    """Occupancy-equation residuals, shape (M+1, N+1, len(t)); entry (0,0) is zero.

    Entry (m, n) holds (m+n) alpha' + m n beta' - r + hat_mn + check_mn
    - (m/(M-m+1)) hat_{m-1,n} e^{-alpha - n beta}
    - (n/(N-n+1)) check_{m,n-1} e^{-alpha - m beta}.
    """
    m_hat, n_check = lumped.n_hat, lumped.n_check
    if (m_hat, n_check) != (curves.n_hat, curves.n_check):
        raise ValueError("lumped rates and curves disagree on (M, N)")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t <= 0.0):
        raise ValueError("t must be positive")
    return _residual_II_kernel(lumped, curves.profile(t))


def coeff_check_II(n_hat: int, n_check: int, beta_star: float) -> float:
    """Scalar inconsistency of the constant-beta bipartite rate system.

    The forced boundary entries pin check_{1,0} two ways: through the (1,1)
    equation and through the (2,0) equation.  Their normalized gap is
    exactly 2 e^{beta*} - 2, which vanishes iff beta* = 0; the two routes
    are re-derived here and checked against that closed form before it is
    returned.
    """
    m, n = int(n_hat), int(n_check)
    if m < 1 or n < 1:
        raise ValueError("class sizes must be at least 1")
    if m < 2:
        if n < 2:
            raise ValueError("need M >= 2 or N >= 2 to form the (2,0) equation")
        m, n = n, m
    scale = 1.0  # hat00 / M; the gap is scale-free
    check01 = (n - 1) * scale
    from_11 = n * (scale * (2.0 * np.exp(beta_star) - (m + n - 1) / m) + check01 / m)
    from_20 = -(m - 1) / 2.0 * scale * (2.0 - 2.0 * (m + n - 1) / (m - 1))
    gap = float((from_11 - from_20) / (n * scale))
    closed_form = float(2.0 * np.exp(beta_star) - 2.0)
    if abs(gap - closed_form) > 1e-12 * max(1.0, abs(closed_form)):
        raise ArithmeticError(
            f"rate-system gap {gap} disagrees with its closed form {closed_form}"
        )
    return closed_form


@dataclass(frozen=True)
class TwoAlphaProfile:
    """One-pass evaluation of the class-dependent curves on a time grid."""

    t: np.ndarray
    alpha_hat: np.ndarray
    alpha_hat_prime: np.ndarray
    exp_neg_alpha_hat: np.ndarray
    alpha_check: np.ndarray
    alpha_check_prime: np.ndarray
    exp_neg_alpha_check: np.ndarray
    beta: np.ndarray
    beta_prime: np.ndarray
    exp_beta: np.ndarray


@dataclass(frozen=True)
class ReducedCurvesIII:
    """Class-dependent bipartite curves from the (1,0), (0,1), (1,1) equations."""

    n_hat: int
    n_check: int
    q_hat: float
    delta_hat: float
    q_check: float
    delta_check: float
    drive_hat: float
    drive_check: float
    c: float

    def profile(self, t) -> TwoAlphaProfile:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        ea_hat = exp_alpha_value(self.q_hat, self.delta_hat, t)
        ea_check = exp_alpha_value(self.q_check, self.delta_check, t)
        ena_hat, ena_check = 1.0 / ea_hat, 1.0 / ea_check
        with np.errstate(divide="ignore"):
            a_hat, a_check = np.log(ea_hat), np.log(ea_check)
        ap_hat = alpha_prime_value(self.delta_hat, t)
        ap_check = alpha_prime_value(self.delta_check, t)
        w = exp_beta_pair(
            self.q_hat,
            self.delta_hat,
            self.q_check,
            self.delta_check,
            self.drive_check,
            self.drive_hat,
            self.c,
            t,
        )
        drive = self.drive_hat * ena_hat + self.drive_check * ena_check
        beta_prime = self.c - ap_hat - ap_check + drive / w
        return TwoAlphaProfile(
            t, a_hat, ap_hat, ena_hat, a_check, ap_check, ena_check, np.log(w), beta_prime, w
        )

    def alpha_hat(self, t):
        exp_alpha = exp_alpha_value(self.q_hat, self.delta_hat, t)
        with np.errstate(divide="ignore"):
            return np.log(exp_alpha), alpha_prime_value(self.delta_hat, t)

    def alpha_check(self, t):
        exp_alpha = exp_alpha_value(self.q_check, self.delta_check, t)
        with np.errstate(divide="ignore"):
            return np.log(exp_alpha), alpha_prime_value(self.delta_check, t)

    def exp_neg_alpha_hat(self, t):
        return 1.0 / exp_alpha_value(self.q_hat, self.delta_hat, t)

    def exp_neg_alpha_check(self, t):
        return 1.0 / exp_alpha_value(self.q_check, self.delta_check, t)

    def exp_beta(self, t):
        return exp_beta_pair(
            self.q_hat,
            self.delta_hat,
            self.q_check,
            self.delta_check,
            self.drive_check,
            self.drive_hat,
            self.c,
            t,
        )

    def beta(self, t):
        w = self.exp_beta(t)
        _, ap_hat = self.alpha_hat(t)
        _, ap_check = self.alpha_check(t)
        drive = self.drive_hat * self.exp_neg_alpha_hat(t) + self.drive_check * self.exp_neg_alpha_check(t)
        beta_prime = self.c - ap_hat - ap_check + drive / w
        return np.log(w), beta_prime


def reduced_curves_III(lumped: LumpedRatesBi) -> ReducedCurvesIII:
    """Curves forced by the three lowest bipartite occupancy equations.

    alpha_hat and alpha_check have separate closed forms; beta is the
    bounded solution of the (1,1) equation with small-t limit
    log((hat00 check10 + check00 hat01) / (2 hat00 check00)).
    """
    m, n = lumped.n_hat, lumped.n_check
    hat, check = lumped.hat_rates, lumped.check_rates
    r = lumped.r
    return ReducedCurvesIII(
        m,
        n,
        q_hat=float(hat[0, 0]) / m,
        delta_hat=r - float(hat[1, 0] + check[1, 0]),
        q_check=float(check[0, 0]) / n,
        delta_check=r - float(hat[0, 1] + check[0, 1]),
        drive_hat=float(hat[0, 1]) / m,
        drive_check=float(check[1, 0]) / n,
        c=r - float(hat[1, 1] + check[1, 1]),
    )


def _residual_III_kernel_raw(hat, check, m_hat, n_check, prof: TwoAlphaProfile) -> np.ndarray:
    r = hat[0, 0] + check[0, 0]
    m = np.arange(m_hat + 1, dtype=float)[:, None, None]
    n = np.arange(n_check + 1, dtype=float)[None, :, None]
    hat_in = _shift_hat(hat)[:, :, None]
    check_in = _shift_check(check)[:, :, None]
    inflow = (m / (m_hat - m + 1.0)) * hat_in * prof.exp_neg_alpha_hat * np.exp(
        -n * prof.beta[None, None, :]
    )
    inflow += (n / (n_check - n + 1.0)) * check_in * prof.exp_neg_alpha_check * np.exp(
        -m * prof.beta[None, None, :]
    )
    lhs = (
        m * prof.alpha_hat_prime[None, None, :]
        + n * prof.alpha_check_prime[None, None, :]
        + m * n * prof.beta_prime[None, None, :]
    )
    res = lhs - (r - hat[:, :, None] - check[:, :, None]) - inflow
    res[0, 0, :] = 0.0
    return res


def _residual_III_kernel(lumped: LumpedRatesBi, prof: TwoAlphaProfile) -> np.ndarray:
    return _residual_III_kernel_raw(lumped.hat_rates, lumped.check_rates, lumped.n_hat, lumped.n_check, prof)


def residual_III(lumped: LumpedRatesBi, curves: ReducedCurvesIII, t) -> np.ndarray:
    """Occupancy-equation residuals with class-dependent alphas; (0,0) is zero.

    Entry (m, n) holds m alpha_hat' + n alpha_check' + m n beta' - r
    + hat_mn + check_mn - (m/(M-m+1)) hat_{m-1,n} e^{-alpha_hat - n beta}
    - (n/(N-n+1)) check_{m,n-1} e^{-alpha_check - m beta}.
    """
    m_hat, n_check = lumped.n_hat, lumped.n_check
    if (m_hat, n_check) != (curves.n_hat, curves.n_check):
        raise ValueError("lumped rates and curves disagree on (M, N)")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t <= 0.0):
        raise ValueError("t must be positive")
    return _residual_III_kernel(lumped, curves.profile(t))


@dataclass(frozen=True)
class CoeffCheckIII:
    """Report on the constant-beta coefficient system for Model III.

    The three per-(m,n) condition residuals score the supplied rate tables.
    The diagonal system compares the curve (B - A k) e^{k beta*} (A, B > 0
    assembled from the forced entries) with the line C k + D at
    k = 0..min(M,N); with beta* != 0 a line can meet that curve at most
    twice (beta* > 0) or three times (beta* < 0), so needing more points is
    a certificate of inconsistency.
    """

    beta_star: float
    cond_hat: np.ndarray
    cond_check: np.ndarray
    cond_drift: np.ndarray
    coeff_a: float
    coeff_b: float
    coeff_c: float
    coeff_d: float
    diagonal_mismatch: np.ndarray
    n_equations: int
    n_satisfied: int
    intersection_bound: int

    @property
    def bound_violated(self) -> bool:
        return self.n_equations > self.intersection_bound and self.n_satisfied < self.n_equations


def coeff_check_III(
    lumped: LumpedRatesBi, beta_star: float, n_hat: Optional[int] = None, n_check: Optional[int] = None
) -> CoeffCheckIII:
    """Evaluate the constant-beta coefficient conditions and the diagonal system.

    The per-(m,n) conditions are the coefficients (drift, e^{-alpha_hat},
    e^{-alpha_check}) that must all vanish for the occupancy equations to
    hold with beta identically beta*.  The diagonal system is assembled from
    the forced rate tables those conditions imply.
    """
    m_hat = lumped.n_hat if n_hat is None else int(n_hat)
    n_chk = lumped.n_check if n_check is None else int(n_check)
    if (m_hat, n_chk) != (lumped.n_hat, lumped.n_check):
        raise ValueError("sizes disagree with the lumped tables")
    hat, check = lumped.hat_rates, lumped.check_rates
    r = lumped.r
    m = np.arange(m_hat + 1, dtype=float)[:, None]
    n = np.arange(n_chk + 1, dtype=float)[None, :]
    hat00, check00 = float(hat[0, 0]), float(check[0, 0])
    cond_hat = m * (hat00 / m_hat - _shift_hat(hat) * np.exp(-n * beta_star) / (m_hat - m + 1.0))
    cond_check = n * (
        check00 / n_chk - _shift_check(check) * np.exp(-m * beta_star) / (n_chk - n + 1.0)
    )
    cond_drift = (
        m * (r - hat[1, 0] - check[1, 0])
        + n * (r - hat[0, 1] - check[0, 1])
        + (hat + check)
        - r
    )

    # Forced tables: hat_{m,n} = ((M-m)/M) hat00 e^{n b*}, check_{m,n} = ((N-n)/N) check00 e^{m b*}
    b = float(beta_star)
    f_hat10 = (m_hat - 1) / m_hat * hat00
    f_check10 = check00 * np.exp(b)
    f_hat01 = hat00 * np.exp(b)
    f_check01 = (n_chk - 1) / n_chk * check00
    coeff_a = hat00 / m_hat + check00 / n_chk
    coeff_b = r
    coeff_c = -((r - f_hat10 - f_check10) + (r - f_hat01 - f_check01))
    coeff_d = r
    k = np.arange(min(m_hat, n_chk) + 1, dtype=float)
    mismatch = (coeff_b - coeff_a * k) * np.exp(k * b) - (coeff_d + coeff_c * k)
    tol = 1e-9 * max(1.0, abs(coeff_b), abs(coeff_d))
    n_satisfied = int(np.sum(np.abs(mismatch) <= tol))
    if b > 0.0:
        bound = 2
    elif b < 0.0:
        bound = 3
    else:
        bound = len(k)
    return CoeffCheckIII(
        beta_star=b,
        cond_hat=cond_hat,
        cond_check=cond_check,
        cond_drift=cond_drift,
        coeff_a=float(coeff_a),
        coeff_b=float(coeff_b),
        coeff_c=float(coeff_c),
        coeff_d=float(coeff_d),
        diagonal_mismatch=mismatch,
        n_equations=len(k),
        n_satisfied=n_satisfied,
        intersection_bound=bound,
    )


@dataclass(frozen=True)
class SearchConfig:
    """Knobs for the multi-start feasibility search."""

    restarts: int = 16
    max_iter: Optional[int] = None
    seed: int = 0
    grid_points: int = 32
    t_min_fraction: float = 1e-3
    penalty_weight: float = 1e4
    horizon: float = 1.0
    polish_rounds: int = 5
    polish_gain: float = 0.5


@dataclass(frozen=True)
class RestartRecord:
    """Outcome of one restart: objective and its residual/mismatch parts."""

    index: int
    objective: float
    residual_max: float
    terminal_mismatch: float
    n_evaluations: int
    rounds: int


@dataclass(frozen=True)
class SearchResult:
    """Best rates found, the residual floor, and the per-restart trace.

    residual_floor is the minimum over restarts of each restart's maximum
    lumped-equation residual over the scored occupancy indices and the time
    grid.  Terminal mismatch is reported separately (from the best-objective
    restart) so a small residual obtained by missing the terminal targets
    cannot pass as feasibility.
    """

    model: str
    sizes: Tuple[int, ...]
    targets: Dict[str, float]
    best_rates: Union[LumpedRatesI, LumpedRatesBi]
    best_index: int
    residual_floor: float
    terminal_mismatch: float
    restarts_used: int
    trace: Tuple[RestartRecord, ...]


def _parse_model(model):
    if isinstance(model, str):
        raise ValueError("model must carry sizes, e.g. ('I', 4) or ('II', 3, 3)")
    kind = model[0]
    if kind == "I":
        if len(model) != 2 or model[1] < 2:
            raise ValueError("Model I needs ('I', N) with N >= 2")
        return "I", (int(model[1]),)
    if kind in ("II", "III"):
        if len(model) != 3 or model[1] < 2 or model[2] < 2:
            # the (1,0)/(0,1)/(1,1) constructor cells must not sit on the
            # absorbing boundary, which they do when a class has one vertex
            raise ValueError(f"Model {kind} needs ('{kind}', M, N) with M, N >= 2")
        return kind, (int(model[1]), int(model[2]))
    raise ValueError(f"unknown model kind {kind!r}")


def _normalize_targets(kind, targets):
    if isinstance(targets, dict):
        t = dict(targets)
    elif kind == "III":
        t = {"alpha_hat": targets[0], "alpha_check": targets[1], "beta": targets[2]}
    else:
        t = {"alpha": targets[0], "beta": targets[1]}
    if kind == "III":
        needed = {"alpha_hat", "alpha_check", "beta"}
        if set(t) != needed:
            raise ValueError(f"Model III targets need keys {sorted(needed)}")
        if t["alpha_hat"] == t["alpha_check"]:
            raise ValueError("Model III requires distinct alpha_hat and alpha_check targets")
    else:
        if set(t) != {"alpha", "beta"}:
            raise ValueError("targets need keys {'alpha', 'beta'}")
    for key, value in t.items():
        if not np.isfinite(value):
            raise ValueError(f"target {key} must be finite")
        t[key] = float(value)
    return t


class _SearchProblem:
    """Objective machinery for one model family.

    Full-space parameterization maps R^dim through softplus to positive rate
    tables.  For the bipartite models the warm start additionally exploits
    that every rate outside the small constructor set (the entries the
    curves are built from) enters the scored residuals linearly: for fixed
    constructor rates those entries are solved by weighted least squares,
    leaving a well-conditioned outer problem of 6-8 variables.  The reported
    objective is always evaluated on the full space, so floors are
    max-residuals of explicit positive rate tables.
    """

    def __init__(self, kind, sizes, targets, config):
        self.kind = kind
        self.sizes = sizes
        self.targets = targets
        self.config = config
        self.grid = geometric_grid(config.horizon, config.grid_points, config.t_min_fraction)
        self.horizon = np.array([config.horizon])
        if kind == "I":
            (n,) = sizes
            self.dim = n
            self.outer_dim = n
            keep = np.zeros(n, dtype=bool)
            keep[2:] = True  # rows are k = 1..N; score k >= 3
            self.keep_I = keep
            return
        m, n = sizes
        grid_m, grid_n = np.meshgrid(np.arange(m + 1), np.arange(n + 1), indexing="ij")
        keep = np.ones((m + 1, n + 1), dtype=bool)
        keep[0, 0] = keep[1, 0] = keep[1, 1] = False
        if kind == "III":
            keep[0, 1] = False
        self.keep_bi = keep
        if kind == "II":
            hat_free = (grid_m < m) & ~((grid_m == 0) & (grid_n == 0))
            check_free = (grid_n < n) & ~((grid_m == 0) & (grid_n == 0))
            hat_ctor = {(0, 0), (1, 0), (0, 1), (1, 1)}
            check_ctor = {(0, 0), (1, 0), (1, 1)}
            self.outer_dim = 6  # s, hat10, hat01, hat11, check10, check11
        else:
            hat_free = grid_m < m
            check_free = grid_n < n
            hat_ctor = {(0, 0), (1, 0), (0, 1), (1, 1)}
            check_ctor = {(0, 0), (1, 0), (0, 1), (1, 1)}
            self.outer_dim = 8
        self.hat_idx = np.where(hat_free)
        self.check_idx = np.where(check_free)
        self.dim = (self.kind == "II") + len(self.hat_idx[0]) + len(self.check_idx[0])
        self.hat_inner = [
            (mm, nn)
            for mm, nn in zip(*self.hat_idx)
            if (mm, nn) not in hat_ctor
        ]
        self.check_inner = [
            (mm, nn)
            for mm, nn in zip(*self.check_idx)
            if (mm, nn) not in check_ctor
        ]
        self.scored_cells = [(mm, nn) for mm, nn in zip(*np.where(keep))]
        self.cell_row = {cell: i for i, cell in enumerate(self.scored_cells)}

    def unpack(self, x):
        rates = softplus(np.asarray(x, dtype=float))
        if self.kind == "I":
            (n,) = self.sizes
            lam = np.zeros(n + 1)
            lam[:n] = rates
            return LumpedRatesI(n, lam)
        m, n = self.sizes
        hat = np.zeros((m + 1, n + 1))
        check = np.zeros((m + 1, n + 1))
        if self.kind == "II":
            s = rates[0]
            hat[0, 0] = m * s
            check[0, 0] = n * s
            n_hat = len(self.hat_idx[0])
            hat[self.hat_idx] = rates[1 : 1 + n_hat]
            check[self.check_idx] = rates[1 + n_hat :]
        else:
            n_hat = len(self.hat_idx[0])
            hat[self.hat_idx] = rates[:n_hat]
            check[self.check_idx] = rates[n_hat:]
        return LumpedRatesBi(m, n, hat, check)

    def pack(self, rates) -> np.ndarray:
        """Inverse of unpack, for seeding full-space polish from a table."""
        from ._num import inv_softplus

        if self.kind == "I":
            return np.asarray(inv_softplus(rates.lam[:-1]), dtype=float)
        hat, check = rates.hat_rates, rates.check_rates
        parts = []
        if self.kind == "II":
            parts.append([hat[0, 0] / self.sizes[0]])
        parts.append(hat[self.hat_idx])
        parts.append(check[self.check_idx])
        return np.asarray(inv_softplus(np.concatenate([np.atleast_1d(p) for p in parts])), dtype=float)

    def evaluate(self, rates):
        """(residual_max, terminal_mismatch) for a rate table.

        The grid ends exactly at the horizon, so terminal values are the
        last profile entries.
        """
        targets = self.targets
        if self.kind == "I":
            lam = rates.lam
            curves = reduced_curves_I(lam[0], lam[1], lam[2], rates.n_vertices)
            prof = curves.profile(self.grid)
            res = _residual_I_kernel(lam, rates.n_vertices, prof)[self.keep_I]
            mismatch = float(
                np.hypot(prof.alpha[-1] - targets["alpha"], prof.beta[-1] - targets["beta"])
            )
        elif self.kind == "II":
            curves = reduced_curves_II(rates)
            prof = curves.profile(self.grid)
            res = _residual_II_kernel(rates, prof)[self.keep_bi]
            mismatch = float(
                np.hypot(prof.alpha[-1] - targets["alpha"], prof.beta[-1] - targets["beta"])
            )
        else:
            curves = reduced_curves_III(rates)
            prof = curves.profile(self.grid)
            res = _residual_III_kernel(rates, prof)[self.keep_bi]
            mismatch = float(
                np.sqrt(
                    (prof.alpha_hat[-1] - targets["alpha_hat"]) ** 2
                    + (prof.alpha_check[-1] - targets["alpha_check"]) ** 2
                    + (prof.beta[-1] - targets["beta"]) ** 2
                )
            )
        residual_max = float(np.max(np.abs(res))) if res.size else 0.0
        return residual_max, mismatch

    def objective(self, x):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            try:
                residual_max, mismatch = self.evaluate(self.unpack(x))
            except (ValueError, FloatingPointError):
                return 1e12
        value = residual_max + self.config.penalty_weight * mismatch * mismatch
        if not np.isfinite(value):
            return 1e12
        return value

    def _parts(self, rates):
        """Kept residual block (cells x grid) and terminal deltas for a table."""
        targets = self.targets
        if self.kind == "I":
            lam = rates.lam
            curves = reduced_curves_I(lam[0], lam[1], lam[2], rates.n_vertices)
            prof = curves.profile(self.grid)
            res = _residual_I_kernel(lam, rates.n_vertices, prof)[self.keep_I]
            deltas = np.array(
                [prof.alpha[-1] - targets["alpha"], prof.beta[-1] - targets["beta"]]
            )
        elif self.kind == "II":
            prof = reduced_curves_II(rates).profile(self.grid)
            res = _residual_II_kernel(rates, prof)[self.keep_bi]
            deltas = np.array(
                [prof.alpha[-1] - targets["alpha"], prof.beta[-1] - targets["beta"]]
            )
        else:
            prof = reduced_curves_III(rates).profile(self.grid)
            res = _residual_III_kernel(rates, prof)[self.keep_bi]
            deltas = np.array(
                [
                    prof.alpha_hat[-1] - targets["alpha_hat"],
                    prof.alpha_check[-1] - targets["alpha_check"],
                    prof.beta[-1] - targets["beta"],
                ]
            )
        return res, deltas

    @property
    def ls_length(self):
        if self.kind == "I":
            kept = int(np.sum(self.keep_I))
            n_deltas = 2
        else:
            kept = len(self.scored_cells)
            n_deltas = 2 if self.kind == "II" else 3
        return kept * len(self.grid) + n_deltas

    def ls_residual(self, outer_x):
        """Smooth companion residual vector for the trust-region warm start.

        Kept residuals (t-weighted to tame their 1/t growth near the grid's
        lower edge) stacked with sqrt(penalty)-scaled terminal deltas; its
        zeros are exactly the zeros of the search objective.
        """
        targets = self.targets
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            try:
                if self.kind == "I":
                    res, deltas = self._parts(self.unpack(outer_x))
                else:
                    outer_rates = softplus(np.asarray(outer_x, dtype=float))
                    hat, check, curves = self._tables_from_outer(outer_rates)
                    prof = curves.profile(self.grid)
                    hat, check = self._solve_inner(hat, check, prof)
                    m, n = self.sizes
                    if self.kind == "II":
                        res = _residual_II_kernel_raw(hat, check, m, n, prof)[self.keep_bi]
                        deltas = np.array(
                            [prof.alpha[-1] - targets["alpha"], prof.beta[-1] - targets["beta"]]
                        )
                    else:
                        res = _residual_III_kernel_raw(hat, check, m, n, prof)[self.keep_bi]
                        deltas = np.array(
                            [
                                prof.alpha_hat[-1] - targets["alpha_hat"],
                                prof.alpha_check[-1] - targets["alpha_check"],
                                prof.beta[-1] - targets["beta"],
                            ]
                        )
            except (ValueError, FloatingPointError, np.linalg.LinAlgError):
                return np.full(self.ls_length, 1e6)
        vec = np.concatenate(
            [
                (res * self.grid).reshape(-1),
                np.sqrt(self.config.penalty_weight) * deltas,
            ]
        )
        return np.where(np.isfinite(vec), vec, 1e6)

    def _tables_from_outer(self, outer_rates):
        """Constructor-only tables (inner entries zero), plus curves and profile."""
        m, n = self.sizes
        hat = np.zeros((m + 1, n + 1))
        check = np.zeros((m + 1, n + 1))
        if self.kind == "II":
            s, hat10, hat01, hat11, check10, check11 = outer_rates
            hat[0, 0], check[0, 0] = m * s, n * s
            hat[1, 0], hat[0, 1], hat[1, 1] = hat10, hat01, hat11
            check[1, 0], check[1, 1] = check10, check11
            r = hat[0, 0] + check[0, 0]
            curves = ReducedCurvesII(
                m,
                n,
                q=s,
                delta=r - hat10 - check10,
                b1=hat01 / m + check10 / n,
                c=r - hat11 - check11,
                identity_violation=0.0,
            )
        else:
            hat00, hat10, hat01, hat11, check00, check10, check01, check11 = outer_rates
            hat[0, 0], check[0, 0] = hat00, check00
            hat[1, 0], hat[0, 1], hat[1, 1] = hat10, hat01, hat11
            check[1, 0], check[0, 1], check[1, 1] = check10, check01, check11
            r = hat00 + check00
            curves = ReducedCurvesIII(
                m,
                n,
                q_hat=hat00 / m,
                delta_hat=r - hat10 - check10,
                q_check=check00 / n,
                delta_check=r - hat01 - check01,
                drive_hat=hat01 / m,
                drive_check=check10 / n,
                c=r - hat11 - check11,
            )
        return hat, check, curves

    def _solve_inner(self, hat, check, prof):
        """Fill the non-constructor entries by weighted least squares.

        Those entries enter the scored residuals linearly (own-cell sum plus
        one downstream inflow term each), so for fixed constructor rates the
        best-fitting table is a small linear problem.  Rows are weighted by t
        to tame the 1/t growth of the residuals near the grid's lower edge;
        the solution is floored at a tiny positive rate to stay admissible.
        """
        m_hat, n_check = self.sizes
        n_grid = len(self.grid)
        unknowns = self.hat_inner + self.check_inner
        n_unknown = len(unknowns)
        rows = len(self.scored_cells) * n_grid
        if self.kind == "II":
            ena_hat = ena_check = prof.exp_neg_alpha
        else:
            ena_hat, ena_check = prof.exp_neg_alpha_hat, prof.exp_neg_alpha_check
        beta = prof.beta
        weight = self.grid
        a = np.zeros((rows, n_unknown))
        n_hat_inner = len(self.hat_inner)
        for j, (mm, nn) in enumerate(unknowns):
            is_hat = j < n_hat_inner
            own = self.cell_row.get((mm, nn))
            if own is not None:
                a[own * n_grid : (own + 1) * n_grid, j] = weight
            if is_hat:
                down = self.cell_row.get((mm + 1, nn))
                if down is not None:
                    coef = (mm + 1.0) / (m_hat - mm) * ena_hat * np.exp(-nn * beta)
                    a[down * n_grid : (down + 1) * n_grid, j] = -coef * weight
            else:
                down = self.cell_row.get((mm, nn + 1))
                if down is not None:
                    coef = (nn + 1.0) / (n_check - nn) * ena_check * np.exp(-mm * beta)
                    a[down * n_grid : (down + 1) * n_grid, j] = -coef * weight
        if self.kind == "II":
            base = _residual_II_kernel_raw(hat, check, m_hat, n_check, prof)
        else:
            base = _residual_III_kernel_raw(hat, check, m_hat, n_check, prof)
        b = np.empty(rows)
        for i, (mm, nn) in enumerate(self.scored_cells):
            b[i * n_grid : (i + 1) * n_grid] = -base[mm, nn, :] * weight
        solution = scipy_lstsq(a, b, lapack_driver="gelsy", check_finite=False)[0]
        solution = np.maximum(solution, 1e-10)
        hat = hat.copy()
        check = check.copy()
        for j, (mm, nn) in enumerate(unknowns):
            if j < n_hat_inner:
                hat[mm, nn] = solution[j]
            else:
                check[mm, nn] = solution[j]
        return hat, check

    def assemble(self, outer_x):
        """Full rate table from outer softplus coordinates (inner solved)."""
        outer_rates = softplus(np.asarray(outer_x, dtype=float))
        hat, check, curves = self._tables_from_outer(outer_rates)
        prof = curves.profile(self.grid)
        hat, check = self._solve_inner(hat, check, prof)
        return LumpedRatesBi(self.sizes[0], self.sizes[1], hat, check)


def _nm_rounds(objective, x0, budget, max_rounds, gain, adaptive):
    """Nelder-Mead with simplex re-seeding while the objective keeps dropping."""
    x = np.asarray(x0, dtype=float)
    value = np.inf
    n_evals = 0
    rounds = 0
    for _ in range(max_rounds):
        out = minimize(
            objective,
            x,
            method="Nelder-Mead",
            options={
                "maxfev": budget,
                "maxiter": budget,
                "xatol": 1e-10,
                "fatol": 1e-14,
                "adaptive": adaptive,
            },
        )
        n_evals += out.nfev
        rounds += 1
        x = out.x
        improved_enough = out.fun < gain * value
        value = float(out.fun)
        if value < 1e-14 or not improved_enough:
            break
    return x, value, n_evals, rounds


def feasibility_search(model, targets, config: SearchConfig = SearchConfig()) -> SearchResult:
    """Multi-start Nelder-Mead search for admissible lumped rates.

    Minimizes (max lumped-equation residual over the scored occupancy
    indices and the time grid) + penalty_weight * (terminal mismatch)^2 over
    positive softplus-parameterized rates; boundary rates are pinned to zero
    and Model II carries the forced identity check00 = (N/M) hat00.

    The objective valley is extremely ill-conditioned (residuals grow like
    1/t toward the grid's lower edge), so each restart is warm-started with
    a deterministic trust-region least-squares solve of the smooth companion
    system (same zeros as the objective); for the bipartite models the warm
    start runs over the constructor rates only, with the linearly-entering
    remainder of the table solved by least squares.  Nelder-Mead over the
    full rate space then minimizes the stated max-norm objective, re-seeding
    its simplex at the optimum while the value keeps dropping.  Reported
    floors are always max-residuals of explicit positive full rate tables.
    Non-convergence is reported, never raised.
    """
    kind, sizes = _parse_model(model)
    targets = _normalize_targets(kind, targets)
    problem = _SearchProblem(kind, sizes, targets, config)
    records: List[RestartRecord] = []
    best: Dict[str, object] = {}
    full_budget = config.max_iter if config.max_iter is not None else max(800, 80 * problem.dim)
    for index in range(config.restarts):
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, index)))
        x_outer = rng.normal(0.5, 1.0, problem.outer_dim)
        warm = least_squares(
            problem.ls_residual,
            x_outer,
            method="trf",
            xtol=1e-13,
            ftol=1e-13,
            gtol=1e-13,
            max_nfev=150,
        )
        n_evals = int(warm.nfev) * (problem.outer_dim + 1)  # include jacobian columns
        if kind == "I":
            x_full = warm.x
        else:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                x_full = problem.pack(problem.assemble(warm.x))
        # a warm start that already solved the system only needs a short
        # confirmation round; otherwise Nelder-Mead does the minimax shaping
        if problem.objective(x_full) < 1e-7:
            budget, max_rounds = min(600, full_budget), 1
        else:
            budget, max_rounds = full_budget, 1 + config.polish_rounds
        x_full, value, extra_evals, rounds = _nm_rounds(
            problem.objective,
            x_full,
            budget,
            max_rounds,
            config.polish_gain,
            adaptive=problem.dim > 6,
        )
        n_evals += extra_evals
        residual_max, mismatch = problem.evaluate(problem.unpack(x_full))
        records.append(
            RestartRecord(
                index=index,
                objective=value,
                residual_max=residual_max,
                terminal_mismatch=mismatch,
                n_evaluations=n_evals,
                rounds=rounds,
            )
        )
        if not best or value < best["value"]:
            best = {"value": value, "index": index, "x": np.array(x_full)}
    best_rates = problem.unpack(best["x"])
    best_record = records[best["index"]]
    floor = min(record.residual_max for record in records)
    return SearchResult(
        model=kind,
        sizes=sizes,
        targets=targets,
        best_rates=best_rates,
        best_index=best["index"],
        residual_floor=float(floor),
        terminal_mismatch=best_record.terminal_mismatch,
        restarts_used=config.restarts,
        trace=tuple(records),
    )
