"""Named self-checks over the analytic formulas and the device calibration."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import bounds
from .devices import calibrate, honest_strategy, swapped_test_bases
from .params import P_OPT, WseParams
from .stats import binomial_tail_exact, hoeffding_tail

FD_STEP = 1e-6
FD_GRID_DELTA = np.linspace(0.76, 0.845, 10)
FD_GRID_MU = np.linspace(0.1, 0.55, 10)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    margin: float
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "margin": float(self.margin), "detail": self.detail}


def fd_gradient(delta: float, mu: float, step: float = FD_STEP) -> np.ndarray:
    """Central differences of the tradeoff function at the tangent point.

    The q1 and q_bot directions are taken against q0 so the perturbed
    points stay on the simplex; this is exact because the function does
    not depend on q0.
    """
    q = bounds.tangent_point(delta, mu)

    def f(a, b, c):
        return bounds.tradeoff_f(bounds.Frequency(a, b, c), mu)

    d1 = (f(q.q0 - step, q.q1 + step, q.qbot) - f(q.q0 + step, q.q1 - step, q.qbot)) / (2 * step)
    d2 = (f(q.q0 - step, q.q1, q.qbot + step) - f(q.q0 + step, q.q1, q.qbot - step)) / (2 * step)
    return np.array([0.0, d1, d2])


def gradient_relative_errors(step: float = FD_STEP) -> np.ndarray:
    errs = np.empty((len(FD_GRID_DELTA), len(FD_GRID_MU)))
    for i, d in enumerate(FD_GRID_DELTA):
        for j, m in enumerate(FD_GRID_MU):
            g = bounds.affine_tradeoff_at(d, m).gradient
            fd = fd_gradient(d, m, step)
            errs[i, j] = np.max(np.abs(fd[1:] - g[1:]) / np.abs(g[1:]))
    return errs


def check_gradient() -> CheckResult:
    worst = float(gradient_relative_errors().max())
    return CheckResult("gradient_finite_difference", worst < 1e-6, 1e-6 - worst, f"max relative error {worst:.3e}")


def check_alice_dominance() -> CheckResult:
    margin = math.inf
    for n, mu, p in itertools.product((50, 200, 1000), (0.1, 0.3), (0.8536, P_OPT)):
        exact = bounds.alice_abort_exact(n, mu, 0.8, p)
        bound = bounds.alice_abort_bound(n, mu, 0.8, p)
        margin = min(margin, bound - exact)
    return CheckResult("alice_abort_exact_below_bound", margin >= 0, margin)


def check_binomial_dominance() -> CheckResult:
    margin = math.inf
    for n in (20, 100, 500):
        for p in (0.3, 0.5, 0.8):
            for t in (0.05, 0.1, 0.2):
                k = math.floor((p - t) * n)
                margin = min(margin, hoeffding_tail(n, t) - binomial_tail_exact(n, k, p))
    return CheckResult("binomial_tail_below_hoeffding", margin >= 0, margin)


def check_convexity(points: int = 401) -> CheckResult:
    ps = np.linspace(0.75, P_OPT, points)
    f = np.array([(1 - bounds.zeta(p)) / 2 for p in ps])
    second = f[2:] - 2 * f[1:-1] + f[:-2]
    worst = float(second.min())
    return CheckResult("tradeoff_convex_in_p", worst >= -1e-9, worst + 1e-9)


def check_zeta_chsh(points: int = 401) -> CheckResult:
    ps = np.linspace(bounds.P_MIN, P_OPT, points)
    worst = float(max(abs(bounds.zeta(p) - bounds.zeta_from_chsh_value(8 * p - 4)) for p in ps))
    return CheckResult("zeta_matches_chsh_form", worst <= 1e-12, 1e-12 - worst)


def check_rate_consistency() -> CheckResult:
    worst = 0.0
    for n in (10**3, 10**5, 10**7):
        for mu in (0.01, 0.2):
            for delta in (0.78, 0.85):
                for eps in (1e-9, 0.05):
                    for d in (1, 4):
                        r = bounds.lambda_rate(WseParams(n, mu, delta, eps, d))
                        worst = max(worst, abs(r.recomputed_lambda() - r.lambda_))
    return CheckResult("rate_report_consistent", worst <= 1e-9, 1e-9 - worst)


def check_shannon_order() -> CheckResult:
    margin = float(min(t - l for l, t in (bounds.shannon_lower_from_zeta(z) for z in np.linspace(0, 1, 11))))
    return CheckResult("shannon_tight_not_below_loose", margin >= -1e-15, margin)


def check_vbar_monotone() -> CheckResult:
    eps = np.linspace(1e-4, 0.5, 200)
    v = np.array([bounds.vbar(e, 0.8, 0.2) for e in eps])
    worst = float(np.max(np.diff(v)))
    return CheckResult("vbar_decreasing_in_eps", worst < 0, -worst)


def check_calibration(swap_test_bases: bool = False) -> CheckResult:
    strat = honest_strategy()
    if swap_test_bases:
        strat = strat.with_test_bases(swapped_test_bases())
    rep = calibrate(strat, raise_on_failure=False)
    return CheckResult("calibration", rep.passed, 1e-9 - rep.deviation, f"win probability {rep.value:.12f}")


def run_all(swap_test_bases: bool = False) -> list[CheckResult]:
    return [
        check_calibration(swap_test_bases),
        check_gradient(),
        check_alice_dominance(),
        check_binomial_dominance(),
        check_convexity(),
        check_zeta_chsh(),
        check_rate_consistency(),
        check_shannon_order(),
        check_vbar_monotone(),
    ]
