"""Tail bounds, Monte Carlo estimation and plug-in conditional entropy."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import binom, norm

from .errors import DomainError
from .qcore import RngStream

N_BOOTSTRAP = 200


@dataclass(frozen=True)
class EstimateWithCI:
    point: float
    half_width: float
    confidence: float
    sample_count: int
    std_error: float | None = None

    def __post_init__(self):
        if self.half_width < 0:
            raise DomainError("half width must be nonnegative")
        if not 0.0 < self.confidence < 1.0:
            raise DomainError("confidence must lie in (0, 1)")

    @property
    def low(self) -> float:
        return self.point - self.half_width

    @property
    def high(self) -> float:
        return self.point + self.half_width

    def contains(self, value: float) -> bool:
        return self.low <= value <= self.high

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "half_width": self.half_width,
            "confidence": self.confidence,
            "sample_count": self.sample_count,
            "std_error": self.std_error,
        }


def hoeffding_tail(n: int, t: float) -> float:
    """``exp(-2 t^2 n)``: bound on a one-sided deviation of ``t`` for the mean of n bounded variables."""
    if n < 1 or t < 0:
        raise DomainError(f"need n >= 1 and t >= 0, got n={n}, t={t}")
    return math.exp(-2.0 * t * t * n)


def hoeffding_half_width(trials: int, confidence: float) -> float:
    """Two-sided Hoeffding interval half width for the mean of [0, 1] outcomes."""
    if trials < 1 or not 0.0 < confidence < 1.0:
        raise DomainError(f"need trials >= 1 and confidence in (0, 1), got {trials}, {confidence}")
    return math.sqrt(math.log(2.0 / (1.0 - confidence)) / (2.0 * trials))


def binomial_tail_exact(n: int, k: int, p: float) -> float:
    """``Pr[Bin(n, p) <= k]``."""
    if not 0 <= k <= n:
        raise DomainError(f"need 0 <= k <= n, got k={k}, n={n}")
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"p={p} is not a probability")
    if k == n or p == 0.0:
        return 1.0
    return float(min(1.0, binom.cdf(k, n, p)))


def monte_carlo(
    trials: int,
    confidence: float,
    experiment: Callable[[RngStream], float],
    rng: RngStream,
    workers: int = 1,
) -> EstimateWithCI:
    """Mean of ``experiment`` over ``trials`` independent streams with a Hoeffding interval.

    Trial ``i`` receives ``rng.child(i)``, so the estimate does not depend
    on ``workers``.  Outcomes must lie in [0, 1].
    """
    if trials < 1:
        raise DomainError("need at least one trial")
    streams = [rng.child(i) for i in range(trials)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(experiment, streams))
    else:
        values = [experiment(s) for s in streams]
    arr = np.asarray(values, dtype=float)
    if np.any(arr < 0) or np.any(arr > 1):
        raise DomainError("experiment outcomes must lie in [0, 1]")
    return EstimateWithCI(
        point=float(arr.mean()),
        half_width=hoeffding_half_width(trials, confidence),
        confidence=confidence,
        sample_count=trials,
        std_error=float(arr.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0,
    )


def _encode(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim == 1:
        return np.unique(arr, return_inverse=True)[1].reshape(-1)
    return np.unique(arr.reshape(len(arr), -1), axis=0, return_inverse=True)[1].reshape(-1)


def _entropy_from_table(table: np.ndarray) -> float:
    """Miller-Madow corrected plug-in H(X|S) in bits from counts ``table[s, x]``."""
    total = table.sum()
    strata = table.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(table > 0, table / strata[:, None], 1.0)
        h_s = -np.sum(np.where(table > 0, p * np.log2(p), 0.0), axis=1)
    support = np.count_nonzero(table, axis=1)
    plug_in = float(np.sum(strata / total * h_s))
    correction = float(np.sum(np.maximum(support - 1, 0))) / (2.0 * total * math.log(2.0))
    return plug_in + correction


def empirical_conditional_entropy(
    x: Sequence,
    side: Sequence,
    confidence: float = 0.95,
    rng: RngStream | None = None,
    n_bootstrap: int = N_BOOTSTRAP,
    alphabet_size: int | None = None,
) -> EstimateWithCI:
    """Plug-in estimate of H(X | side) in bits with a bootstrap interval.

    Parameters
    ----------
    x : sequence
        Samples of X (any hashable encoding, e.g. trits with -1 for BOT).
    side : sequence
        Matching side information; rows of a 2-D array are treated as tuples.
    alphabet_size : int, optional
        Size of X's alphabet for the upper clip; defaults to the number of
        distinct observed values.

    Notes
    -----
    The Miller-Madow term ``(m_s - 1) / (2 N ln 2)`` is added per stratum
    ``s`` with ``m_s`` observed symbols.  The bootstrap resamples the joint
    count table multinomially, which is equivalent to resampling rows.
    """
    xs = np.asarray(x)
    if len(xs) == 0:
        raise DomainError("cannot estimate entropy from zero samples")
    ss = np.asarray(side)
    if len(ss) != len(xs):
        raise DomainError(f"x has {len(xs)} samples but side has {len(ss)}")
    xc = _encode(xs)
    sc = _encode(ss)
    nx, ns = int(xc.max()) + 1, int(sc.max()) + 1
    table = np.zeros((ns, nx))
    np.add.at(table, (sc, xc), 1.0)
    size = alphabet_size if alphabet_size is not None else nx
    upper = math.log2(size) if size > 1 else 0.0

    def clip(h):
        return min(max(h, 0.0), upper)

    point = clip(_entropy_from_table(table))
    rng = rng if rng is not None else RngStream(0)
    n = len(xs)
    flat = table.ravel() / n
    boots = np.empty(n_bootstrap)
    for b in range(n_bootstrap):
        t = rng.generator.multinomial(n, flat).reshape(table.shape).astype(float)
        boots[b] = clip(_entropy_from_table(t))
    se = float(boots.std(ddof=1)) if n_bootstrap > 1 else 0.0
    z = float(norm.ppf(0.5 + confidence / 2.0))
    return EstimateWithCI(point, z * se, confidence, n, std_error=se)
