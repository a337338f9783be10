"""Closed-form finite-size quantities for the CHSH-tested erasure protocol.

All logarithms are base 2 unless the name says ``ln``.  Functions are pure
and operate on Python floats.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import binom

from .errors import DomainError
from .params import DELTA_MIN, P_OPT, WseParams

P_MIN = 0.5 - 1.0 / (2.0 * math.sqrt(2.0))
LOG2_7 = math.log2(7.0)
LOG2_19 = math.log2(19.0)
ALPHA_MAX = 1.0 + 1.0 / LOG2_7
ALPHA_BACKOFF = 1e-9
ENDPOINT_GUARD = 1e-6
_DOMAIN_TOL = 1e-12


def binary_entropy(x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"binary entropy needs x in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1 - x) * math.log2(1 - x)


def one_minus_sqrt_term(eps: float) -> float:
    """``1 - sqrt(1 - (eps/4)^2)`` without cancellation."""
    a = (eps / 4.0) ** 2
    return a / (1.0 + math.sqrt(1.0 - a))


# Rounding noise of ``16p(1-p) - 2`` and ``8 - S^2`` near the quantum maximum.  Radicands
# below it are treated as zero so the double nearest the maximum evaluates as the maximum.
_RADICAND_NOISE = 4.0 * sys.float_info.epsilon
_CHSH_RADICAND_NOISE = 16.0 * sys.float_info.epsilon


def _radicand(p: float) -> float:
    r = 16.0 * p * (1.0 - p) - 2.0
    if r < -_DOMAIN_TOL:
        raise DomainError(f"p={p} lies outside [{P_MIN}, {P_OPT}] where zeta is defined")
    return 0.0 if r <= _RADICAND_NOISE else r


def zeta(p: float) -> float:
    """Bound on the effective anti-commutator from a CHSH win probability ``p``."""
    return (4.0 * p - 2.0) * math.sqrt(_radicand(p))


def zeta_derivative(p: float) -> float:
    r = _radicand(p)
    if r == 0.0:
        raise DomainError("zeta has unbounded slope at the ends of its domain")
    return 4.0 * math.sqrt(r) + 8.0 * (4.0 * p - 2.0) * (1.0 - 2.0 * p) / math.sqrt(r)


def zeta_from_chsh_value(s: float) -> float:
    """Same quantity written with the CHSH value ``S = 8p - 4``."""
    rad = 8.0 - s * s
    if rad < -_DOMAIN_TOL:
        raise DomainError(f"CHSH value {s} exceeds 2*sqrt(2)")
    if rad <= _CHSH_RADICAND_NOISE:
        rad = 0.0
    return s / 4.0 * math.sqrt(rad)


@dataclass(frozen=True)
class Frequency:
    """Distribution of the score register over {0, 1, ⊥}."""

    q0: float
    q1: float
    qbot: float

    def __post_init__(self):
        for name in ("q0", "q1", "qbot"):
            v = getattr(self, name)
            if not -1e-15 <= v <= 1.0 + 1e-15:
                raise DomainError(f"{name}={v} is not a probability")
        if abs(self.q0 + self.q1 + self.qbot - 1.0) > 1e-12:
            raise DomainError(f"frequencies sum to {self.q0 + self.q1 + self.qbot}, expected 1")

    @classmethod
    def from_counts(cls, n0: int, n1: int, nbot: int) -> "Frequency":
        total = n0 + n1 + nbot
        if total <= 0:
            raise DomainError("cannot form a frequency from zero observations")
        return cls(n0 / total, n1 / total, nbot / total)

    @classmethod
    def from_scores(cls, scores) -> "Frequency":
        """Empirical frequency of a score string encoded with -1 for ⊥."""
        c = np.asarray(scores)
        return cls.from_counts(int(np.sum(c == 0)), int(np.sum(c == 1)), int(np.sum(c == -1)))

    @property
    def p(self) -> float:
        """Win fraction among rounds where the game was played."""
        if self.qbot >= 1.0:
            raise DomainError("win probability is undefined when no game was played (q_bot = 1)")
        return self.q1 / (1.0 - self.qbot)

    def as_array(self) -> np.ndarray:
        return np.array([self.q0, self.q1, self.qbot])


def _clamped_zeta(p: float) -> float:
    # Below 3/4 a commuting (classical) strategy is possible: no entropy is certified.
    # Above the Tsirelson value no quantum state exists, so the bound is free there;
    # use its value at the endpoint.
    if p < DELTA_MIN:
        return 1.0
    if p > P_OPT:
        return 0.0
    return zeta(p)


def tradeoff_h(delta: float, mu: float) -> float:
    """Tradeoff value at win fraction ``delta`` (closed interval [3/4, p_opt] allowed)."""
    if not DELTA_MIN - _DOMAIN_TOL <= delta <= P_OPT + _DOMAIN_TOL:
        raise DomainError(f"delta={delta} outside [0.75, {P_OPT}]")
    return (1.0 - mu) * (1.0 - zeta(min(max(delta, DELTA_MIN), P_OPT))) / 2.0


def tradeoff_f(q: Frequency, mu: float) -> float:
    """Convex min-tradeoff function of the score distribution ``q``."""
    return (1.0 - mu) * (1.0 - _clamped_zeta(q.p)) / 2.0


def tangent_point(delta: float, mu: float) -> Frequency:
    """Score distribution of a run that tests with probability ``mu`` and wins a fraction ``delta``."""
    return Frequency(mu * (1.0 - delta), mu * delta, 1.0 - mu)


def _check_open_delta(delta: float) -> None:
    if not DELTA_MIN < delta < P_OPT:
        raise DomainError(f"delta={delta} must lie strictly inside (0.75, {P_OPT})")
    if P_OPT - delta < ENDPOINT_GUARD:
        raise DomainError(
            f"delta={delta} is within {ENDPOINT_GUARD} of {P_OPT}; the tangent slope is unstable there"
        )


@dataclass(frozen=True)
class AffineTradeoff:
    gradient: np.ndarray
    intercept: float
    point: Frequency

    def __call__(self, q: Frequency) -> float:
        return float(self.gradient @ q.as_array() + self.intercept)


def affine_tradeoff_at(delta: float, mu: float) -> AffineTradeoff:
    """First-order expansion of ``tradeoff_f`` at the distribution with win fraction ``delta``."""
    _check_open_delta(delta)
    if not 0.0 < mu < 1.0:
        raise DomainError(f"mu={mu} must lie in (0, 1)")
    q = tangent_point(delta, mu)
    denom = 1.0 - q.qbot
    p = q.q1 / denom
    dfdp = -(1.0 - mu) / 2.0 * zeta_derivative(p)
    grad = np.array([0.0, dfdp / denom, dfdp * q.q1 / denom**2])
    value = tradeoff_f(q, mu)
    intercept = value - float(grad @ q.as_array())
    grad.setflags(write=False)
    return AffineTradeoff(grad, intercept, q)


def grad_inf_norm(delta: float, mu: float) -> float:
    return float(np.max(np.abs(affine_tradeoff_at(delta, mu).gradient)))


def eat_penalty_v(eps: float, p_omega: float, grad_norm: float, d_a: int = 3, d_c: int = 3) -> float:
    """Second-order penalty of the entropy accumulation bound."""
    if not 0.0 < eps < 1.0 or not 0.0 < p_omega <= 1.0:
        raise DomainError(f"eps={eps}, p_omega={p_omega} must lie in (0, 1)")
    if d_a < 1 or d_c < 1:
        raise DomainError("dimensions must be at least 1")
    if grad_norm < 0:
        raise DomainError("gradient norm cannot be negative")
    lead = math.log2(1 + 2 * d_a * d_c) + math.ceil(grad_norm)
    return 2.0 * lead * math.sqrt(1.0 - 2.0 * math.log2(eps * p_omega))


def hmax_coefficient(eps: float, p_omega: float) -> float:
    """Coefficient of sqrt(n) in the optimised max-entropy bound."""
    return 2.0 * LOG2_7 * math.sqrt(_hmax_log_term(eps, p_omega))


def _hmax_log_term(eps: float, p_omega: float) -> float:
    if not 0.0 < eps < 1.0 or not 0.0 < p_omega <= 1.0:
        raise DomainError(f"eps={eps}, p_omega={p_omega} must lie in (0, 1)")
    return -(2.0 * math.log2(p_omega) + math.log2(one_minus_sqrt_term(eps)))


def vtilde(eps: float, p_omega: float, delta: float, mu: float) -> float:
    """Total sqrt(n) penalty with an explicit non-abort probability ``p_omega``."""
    return eat_penalty_v(eps, p_omega, grad_inf_norm(delta, mu), 3, 3) + hmax_coefficient(eps, p_omega)


def vbar(eps: float, delta: float, mu: float) -> float:
    """Total sqrt(n) penalty with ``p_omega`` replaced by ``eps``."""
    return vtilde(eps, eps, delta, mu)


def hmax_alpha(n: int, eps: float, p_omega: float) -> tuple[float, bool]:
    """Optimal Rényi order for the max-entropy bound and whether it had to be clamped."""
    alpha = 1.0 + math.sqrt(_hmax_log_term(eps, p_omega) / (n * LOG2_7**2))
    if alpha >= ALPHA_MAX:
        return ALPHA_MAX - ALPHA_BACKOFF, True
    return alpha, False


def hmax_bound(n: int, mu: float, eps: float, p_omega: float) -> float:
    """Upper bound on the smooth max-entropy of the score string given tests and side info."""
    if n < 1:
        raise DomainError("n must be positive")
    if not 0.0 <= mu <= 1.0:
        raise DomainError(f"mu={mu} must lie in [0, 1]")
    alpha, clamped = hmax_alpha(n, eps, p_omega)
    if not clamped:
        return mu * n + 2.0 * math.sqrt(n) * LOG2_7 * math.sqrt(_hmax_log_term(eps, p_omega))
    a1 = alpha - 1.0
    return mu * n + n * a1 * LOG2_7**2 + _hmax_log_term(eps, p_omega) / a1


def alice_abort_bound(n: int, mu: float, delta: float, p: float) -> float:
    """Hoeffding bound on the probability that the win fraction falls below ``delta``."""
    if p <= delta:
        return 1.0
    return (1.0 - mu * (-math.expm1(-2.0 * (p - delta) ** 2))) ** n


def _win_cutoffs(k: np.ndarray, delta: float, strict: bool) -> np.ndarray:
    """Largest win count j with j/k <= delta (or < delta when ``strict``)."""
    kk = np.maximum(k, 1).astype(float)
    ok = (lambda j: j / kk < delta) if strict else (lambda j: j / kk <= delta)
    j = np.floor(delta * kk)
    j = np.where(ok(j + 1), j + 1, j)
    j = np.where(ok(j), j, j - 1)
    j = np.where(ok(j), j, j - 1)
    return j


def alice_abort_exact(n: int, mu: float, delta: float, p: float, strict: bool = False) -> float:
    """Exact double binomial sum for the abort probability.

    With ``strict=False`` the inner sum includes j = delta*k, as in the
    analytic derivation.  ``strict=True`` matches the protocol's rule
    (abort iff the win fraction is strictly below ``delta``; no tests
    counts as an abort).
    """
    k = np.arange(n + 1)
    log_outer = binom.logpmf(k, n, mu)
    j = _win_cutoffs(k, delta, strict)
    with np.errstate(divide="ignore"):
        log_inner = np.where(j >= 0, binom.logcdf(np.maximum(j, 0), np.maximum(k, 1), p), -np.inf)
    log_inner[0] = 0.0
    return float(min(1.0, math.exp(logsumexp(log_outer + log_inner))))


def bob_abort_threshold(n: int, mu: float, eps: float) -> float:
    return mu * n + math.sqrt(n * math.log(1.0 / eps) / 2.0)


def bob_abort_exact(n: int, mu: float, eps: float) -> float:
    """Probability that the test count strictly exceeds the receiver's threshold."""
    thr = bob_abort_threshold(n, mu, eps)
    return float(binom.sf(math.floor(thr), n, mu))


def min_rounds_for_correctness(eps: float, mu: float, delta: float, p: float = P_OPT) -> int:
    if delta >= p:
        raise DomainError(f"no finite round count: delta={delta} is not below p={p}")
    rate = math.log1p(-mu * (-math.expm1(-2.0 * (p - delta) ** 2)))
    return math.ceil(math.log(eps) / rate)


def n_tilde(n: int, mu: float, eps: float) -> float:
    return (1.0 - mu) * n - math.sqrt(n * math.log(1.0 / eps) / 2.0)


def classical_min_entropy(joint) -> float:
    """Min-entropy of X given classical K from a table ``joint[x, k]``."""
    t = np.asarray(joint, dtype=float)
    if t.ndim == 1:
        t = t[:, None]
    if np.any(t < 0) or abs(t.sum() - 1.0) > 1e-12:
        raise DomainError("joint table must be nonnegative and sum to 1")
    return float(-math.log2(t.max(axis=0).sum()))


def shannon_lower_from_zeta(z: float) -> tuple[float, float]:
    """Linear and binary-entropy lower bounds on H(X|ΘK); the second is never smaller."""
    if not 0.0 <= z <= 1.0:
        raise DomainError(f"zeta={z} must lie in [0, 1]")
    return (1.0 - z) / 2.0, 0.5 * binary_entropy((1.0 + math.sqrt(z)) / 2.0)


@dataclass(frozen=True)
class PvCheatBound:
    bound: float
    kappa_sup: float  # any kappa below this works for large n
    kappa: float      # exponent valid at this n: bound == 2**(-kappa * n)


def pv_cheat_bound(n: int, alpha_decay: float, hmin_rate: float) -> PvCheatBound:
    """Guessing-probability bound 2^(-min(alpha, C) n + 1) from a linear smooth min-entropy bound."""
    if alpha_decay <= 0 or hmin_rate <= 0:
        raise DomainError("decay rate and min-entropy rate must be positive")
    if n < 1:
        raise DomainError("n must be positive")
    m = min(alpha_decay, hmin_rate)
    return PvCheatBound(bound=2.0 ** (-m * n + 1), kappa_sup=m, kappa=m - 1.0 / n)


@dataclass(frozen=True)
class RateReport:
    n: int
    mu: float
    delta: float
    eps: float
    d: int
    h: float
    grad_inf_norm: float
    vbar: float
    lambda_: float
    n_tilde: float
    hmax_bound: float
    hmax_alpha: float
    alpha_clamped: bool
    alice_abort_bound: float
    bob_abort_bound: float
    bob_threshold: float
    min_n_correctness: int
    min_entropy_bound_bits: float

    def recomputed_lambda(self) -> float:
        return (
            self.h
            - self.mu
            - self.vbar / math.sqrt(self.n)
            + (3 * math.log2(one_minus_sqrt_term(self.eps)) - math.log2(self.d)) / self.n
        )

    def is_consistent(self, tol: float = 1e-9) -> bool:
        return abs(self.recomputed_lambda() - self.lambda_) <= tol and abs(
            self.lambda_ * self.n - self.min_entropy_bound_bits
        ) <= tol * max(1.0, abs(self.min_entropy_bound_bits))


def lambda_rate(params: WseParams, p_honest: float = P_OPT) -> RateReport:
    """Min-entropy rate and companion quantities for ``params``."""
    n, mu, delta, eps, d = params.n, params.mu, params.delta, params.eps, params.d
    _check_open_delta(delta)
    h = tradeoff_h(delta, mu)
    g = grad_inf_norm(delta, mu)
    vb = vbar(eps, delta, mu)
    tail = 3 * math.log2(one_minus_sqrt_term(eps)) - math.log2(d)
    lam = h - mu - vb / math.sqrt(n) + tail / n
    alpha, clamped = hmax_alpha(n, eps, eps)
    return RateReport(
        n=n,
        mu=mu,
        delta=delta,
        eps=eps,
        d=d,
        h=h,
        grad_inf_norm=g,
        vbar=vb,
        lambda_=lam,
        n_tilde=n_tilde(n, mu, eps),
        hmax_bound=hmax_bound(n, mu, eps, eps),
        hmax_alpha=alpha,
        alpha_clamped=clamped,
        alice_abort_bound=alice_abort_bound(n, mu, delta, p_honest),
        bob_abort_bound=eps,
        bob_threshold=bob_abort_threshold(n, mu, eps),
        min_n_correctness=min_rounds_for_correctness(eps, mu, delta, p_honest),
        min_entropy_bound_bits=(h - mu) * n - vb * math.sqrt(n) + tail,
    )


def pv_bound_from_rate(params: WseParams) -> PvCheatBound | None:
    """Compose the erasure rate with the smoothing lemma; ``None`` when the rate is not positive.

    The smoothing parameter is read as ``eps = 2^(-alpha n)``.
    """
    rep = lambda_rate(params)
    if rep.lambda_ <= 0:
        return None
    alpha = -math.log2(params.eps) / params.n
    return pv_cheat_bound(params.n, alpha, rep.lambda_)
