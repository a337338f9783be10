import csv
import math
from fractions import Fraction
from pathlib import Path

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diwse import bounds
from diwse.errors import DomainError
from diwse.params import P_OPT, WseParams

GOLDEN = Path(__file__).parent / "golden" / "rates.csv"

# Reference values from independent mpmath evaluation at 40 digits.
ZETA_08 = 0.89799777282574593
F_08_MU01 = 0.04590100222841433
EAT_EXAMPLE = 76.121080174526041
TIGHT_025 = 0.40563906222956643
ALICE_EXACT_200 = 0.18043774296626051  # inner sum over j <= delta*k
ALICE_STRICT_200 = 0.1596607733109755  # inner sum over j/k < delta, no tests counts as abort
BOB_EXACT_200 = 0.0014935526000280539
MIN_ROUNDS_001 = 4023.5386830579892
MIN_ROUNDS_005 = 2617.3722576863982
BOB_THRESHOLD_100 = 35.174271293851464


class TestZeta:
    @pytest.mark.parametrize(
        "p, expected",
        [(P_OPT, 0.0), (0.75, 1.0), (0.8, ZETA_08)],
    )
    def test_values(self, p, expected):
        assert bounds.zeta(p) == pytest.approx(expected, abs=1e-12)

    def test_only_the_endpoint_double_is_snapped(self):
        below = np.nextafter(np.nextafter(P_OPT, 0), 0)
        ref = (4 * mp.mpf(below) - 2) * mp.sqrt(16 * mp.mpf(below) * (1 - mp.mpf(below)) - 2)
        assert bounds.zeta(float(below)) > 0
        assert bounds.zeta(float(below)) == pytest.approx(float(ref), rel=0.5)

    @pytest.mark.parametrize("p", [0.0, 0.1, 0.9, 1.0])
    def test_outside_domain(self, p):
        with pytest.raises(DomainError):
            bounds.zeta(p)

    def test_chsh_value_form_agrees(self):
        for p in np.linspace(bounds.P_MIN, P_OPT, 301):
            s = 8 * p - 4
            assert bounds.zeta_from_chsh_value(s) == pytest.approx(bounds.zeta(p), abs=1e-12)

    @pytest.mark.parametrize("p", [0.76, 0.8, 0.84, 0.85])
    def test_derivative_matches_mpmath(self, p):
        ref = mp.diff(lambda t: (4 * t - 2) * mp.sqrt(16 * t * (1 - t) - 2), mp.mpf(p))
        assert bounds.zeta_derivative(p) == pytest.approx(float(ref), rel=1e-10)


class TestTradeoff:
    def test_maximal_win_gives_half(self):
        q = bounds.Frequency(0.0, 1.0, 0.0)
        assert bounds.tradeoff_f(bounds.Frequency(1 - P_OPT, P_OPT, 0.0), 0.0) == pytest.approx(0.5, abs=1e-12)
        assert bounds.tradeoff_f(q, 0.0) == 0.5  # above the quantum maximum: clamped

    @pytest.mark.parametrize("mu", [0.0, 0.1, 0.5])
    def test_classical_threshold_gives_zero(self, mu):
        assert bounds.tradeoff_f(bounds.Frequency(0.25 * 0.5, 0.75 * 0.5, 0.5), mu) == pytest.approx(0.0, abs=1e-12)

    def test_below_classical_threshold_is_zero(self):
        assert bounds.tradeoff_f(bounds.Frequency(0.5, 0.5, 0.0), 0.2) == 0.0

    def test_example_value(self):
        q = bounds.Frequency(0.2 * 0.5, 0.8 * 0.5, 0.5)
        assert bounds.tradeoff_f(q, 0.1) == pytest.approx(F_08_MU01, abs=1e-12)

    def test_undefined_without_games(self):
        with pytest.raises(DomainError):
            bounds.tradeoff_f(bounds.Frequency(0.0, 0.0, 1.0), 0.1)

    def test_frequency_must_normalise(self):
        with pytest.raises(DomainError):
            bounds.Frequency(0.5, 0.5, 0.5)

    def test_from_scores(self):
        q = bounds.Frequency.from_scores([1, 1, 0, -1])
        assert (q.q0, q.q1, q.qbot) == (0.25, 0.5, 0.25)

    @pytest.mark.parametrize("delta, mu", [(0.76, 0.1), (0.8, 0.2), (0.85, 0.5)])
    def test_h_matches_tradeoff_at_tangent_point(self, delta, mu):
        q = bounds.tangent_point(delta, mu)
        assert q.p == pytest.approx(delta, abs=1e-14)
        assert bounds.tradeoff_f(q, mu) == pytest.approx(bounds.tradeoff_h(delta, mu), abs=1e-14)

    def test_h_endpoints(self):
        for mu in (0.0, 0.01, 0.3):
            assert bounds.tradeoff_h(P_OPT, mu) == pytest.approx((1 - mu) / 2, abs=1e-12)
            assert bounds.tradeoff_h(0.75, mu) == pytest.approx(0.0, abs=1e-12)

    def test_convex_in_p(self):
        ps = np.linspace(0.75, P_OPT, 501)
        f = np.array([bounds.tradeoff_f(bounds.Frequency(1 - p, p, 0.0), 0.0) for p in ps])
        assert np.all(f[2:] - 2 * f[1:-1] + f[:-2] >= -1e-9)


def central_difference(delta, mu, step=1e-6):
    q = bounds.tangent_point(delta, mu)
    h = step * mu  # keeps the induced step in p fixed

    def f(a, b, c):
        return bounds.tradeoff_f(bounds.Frequency(a, b, c), mu)

    return np.array([
        0.0,
        (f(q.q0 - h, q.q1 + h, q.qbot) - f(q.q0 + h, q.q1 - h, q.qbot)) / (2 * h),
        (f(q.q0 - h, q.q1, q.qbot + h) - f(q.q0 + h, q.q1, q.qbot - h)) / (2 * h),
    ])


class TestAffineTradeoff:
    @pytest.mark.parametrize("delta, mu", [(0.77, 0.05), (0.8, 0.2), (0.84, 0.6)])
    def test_tangent(self, delta, mu):
        aff = affine = bounds.affine_tradeoff_at(delta, mu)
        q = bounds.tangent_point(delta, mu)
        assert affine(q) == pytest.approx(bounds.tradeoff_f(q, mu), abs=1e-14)
        assert aff.gradient[0] == 0.0

    def test_gradient_matches_mpmath(self):
        mp.mp.dps = 40
        delta, mu = mp.mpf("0.8"), mp.mpf("0.2")

        def f(q1, qb):
            p = q1 / (1 - qb)
            return (1 - mu) * (1 - (4 * p - 2) * mp.sqrt(16 * p * (1 - p) - 2)) / 2

        g1 = mp.diff(lambda a: f(a, 1 - mu), mu * delta)
        g2 = mp.diff(lambda b: f(mu * delta, b), 1 - mu)
        g = bounds.affine_tradeoff_at(0.8, 0.2).gradient
        assert g[1] == pytest.approx(float(g1), rel=1e-12)
        assert g[2] == pytest.approx(float(g2), rel=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(delta=st.floats(0.752, 0.85), mu=st.floats(0.02, 0.9))
    def test_gradient_matches_central_difference(self, delta, mu):
        g = bounds.affine_tradeoff_at(delta, mu).gradient
        fd = central_difference(delta, mu)
        assert np.allclose(fd, g, rtol=1e-5, atol=0)

    @settings(max_examples=40, deadline=None)
    @given(
        delta=st.floats(0.76, 0.85),
        mu=st.floats(0.05, 0.9),
        p2=st.floats(0.5, 1.0),
        qb=st.floats(0.0, 0.95),
    )
    def test_affine_evaluation(self, delta, mu, p2, qb):
        aff = bounds.affine_tradeoff_at(delta, mu)
        q = bounds.Frequency((1 - qb) * (1 - p2), (1 - qb) * p2, qb)
        manual = aff.intercept + aff.gradient[1] * q.q1 + aff.gradient[2] * q.qbot
        assert aff(q) == pytest.approx(manual, abs=1e-12)

    def test_norm_is_positive_and_finite(self):
        g = bounds.grad_inf_norm(0.8, 0.2)
        assert 0 < g < math.inf

    def test_norm_grows_towards_endpoint(self):
        deltas = [0.8, 0.84, 0.85, 0.853, 0.8535]
        norms = [bounds.grad_inf_norm(d, 0.2) for d in deltas]
        assert norms == sorted(norms)

    @pytest.mark.parametrize("delta", [0.75, P_OPT, P_OPT - 1e-7, 0.9])
    def test_rejects_endpoint_and_outside(self, delta):
        with pytest.raises(DomainError):
            bounds.affine_tradeoff_at(delta, 0.2)


class TestPenalties:
    def test_eat_example(self):
        assert bounds.eat_penalty_v(0.01, 0.01, 2.3, 3, 3) == pytest.approx(EAT_EXAMPLE, rel=1e-12)

    def test_leading_constant_is_log19(self):
        v = bounds.eat_penalty_v(0.5, 1.0, 0.0, 3, 3)
        assert v == pytest.approx(2 * math.log2(19) * math.sqrt(1 - 2 * math.log2(0.5)), rel=1e-14)

    def test_penalty_tends_to_minimum(self):
        v = bounds.eat_penalty_v(1 - 1e-12, 1.0, 0.0, 3, 3)
        assert v == pytest.approx(2 * math.log2(19), rel=1e-9)

    @pytest.mark.parametrize("args", [(0.0, 0.5, 1.0), (0.5, 0.0, 1.0), (1.0, 0.5, 1.0), (0.5, 0.5, -1.0)])
    def test_penalty_rejects(self, args):
        with pytest.raises(DomainError):
            bounds.eat_penalty_v(*args)

    def test_vbar_decomposition(self):
        eps, delta, mu = 0.05, 0.8, 0.2
        g = bounds.grad_inf_norm(delta, mu)
        expected = bounds.eat_penalty_v(eps, eps, g, 3, 3) + bounds.hmax_coefficient(eps, eps)
        assert bounds.vbar(eps, delta, mu) == pytest.approx(expected, rel=1e-14)
        assert bounds.vtilde(eps, eps, delta, mu) == bounds.vbar(eps, delta, mu)

    def test_vbar_decreasing_in_eps(self):
        v = [bounds.vbar(e, 0.8, 0.2) for e in np.linspace(1e-4, 0.5, 300)]
        assert np.all(np.diff(v) < 0)

    def test_stable_small_eps_term(self):
        for eps in (1e-3, 1e-8, 1e-12):
            ref = 1 - mp.sqrt(1 - (mp.mpf(eps) / 4) ** 2)
            assert bounds.one_minus_sqrt_term(eps) == pytest.approx(float(ref), rel=1e-14)


class TestHmax:
    @pytest.mark.parametrize("n", [10, 100, 10**4, 10**7])
    def test_at_least_mu_n(self, n):
        assert bounds.hmax_bound(n, 0.2, 0.05, 0.05) >= 0.2 * n

    def test_rate_tends_to_mu(self):
        r = [bounds.hmax_bound(n, 0.2, 0.05, 0.05) / n for n in (10**4, 10**6, 10**8, 10**10)]
        assert all(a > b for a, b in zip(r, r[1:]))
        assert r[-1] == pytest.approx(0.2, abs=1e-3)

    def test_alpha_is_clamped_for_small_n(self):
        alpha, clamped = bounds.hmax_alpha(10, 1e-6, 1e-6)
        assert clamped
        assert alpha == pytest.approx(bounds.ALPHA_MAX - 1e-9, abs=1e-15)
        alpha, clamped = bounds.hmax_alpha(10**5, 1e-6, 1e-6)
        assert not clamped and 1 < alpha < bounds.ALPHA_MAX

    def test_optimised_form_equals_free_form_at_optimum(self):
        n, mu, eps = 10**4, 0.2, 0.05
        alpha, _ = bounds.hmax_alpha(n, eps, eps)
        a1 = alpha - 1
        a = -math.log2(eps**2 * bounds.one_minus_sqrt_term(eps))
        free = mu * n + n * a1 * math.log2(7) ** 2 + a / a1
        assert bounds.hmax_bound(n, mu, eps, eps) == pytest.approx(free, rel=1e-12)

    def test_clamped_bound_exceeds_optimised_formula(self):
        # Off the optimum the free form is larger than the closed form.
        n, mu, eps = 10, 0.2, 1e-6
        a = -math.log2(eps**2 * bounds.one_minus_sqrt_term(eps))
        closed = mu * n + 2 * math.sqrt(n) * math.log2(7) * math.sqrt(a)
        assert bounds.hmax_bound(n, mu, eps, eps) > closed


def brute_alice(n, mu, delta, p, strict=False):
    mp.mp.dps = 30
    d = Fraction(delta).limit_denominator(10**9)
    total = mp.mpf(0)
    for k in range(n + 1):
        w = mp.binomial(n, k) * mp.mpf(mu) ** k * (1 - mp.mpf(mu)) ** (n - k)
        if k == 0:
            total += w
            continue
        keep = (lambda j: Fraction(j, k) < d) if strict else (lambda j: Fraction(j, k) <= d)
        total += w * mp.fsum(mp.binomial(k, j) * mp.mpf(p) ** j * (1 - mp.mpf(p)) ** (k - j) for j in range(k + 1) if keep(j))
    return float(total)


class TestAbortBounds:
    def test_exact_against_frozen_oracle(self):
        assert bounds.alice_abort_exact(200, 0.2, 0.8, P_OPT) == pytest.approx(ALICE_EXACT_200, rel=1e-10)
        assert bounds.alice_abort_exact(200, 0.2, 0.8, P_OPT, strict=True) == pytest.approx(ALICE_STRICT_200, rel=1e-10)

    @pytest.mark.parametrize("n, mu, delta, p", [(30, 0.3, 0.8, 0.85), (41, 0.5, 0.7, 0.8), (25, 0.9, 0.76, 0.853)])
    @pytest.mark.parametrize("strict", [False, True])
    def test_exact_against_brute_force(self, n, mu, delta, p, strict):
        assert bounds.alice_abort_exact(n, mu, delta, p, strict) == pytest.approx(brute_alice(n, mu, delta, p, strict), rel=1e-10)

    @pytest.mark.parametrize("n", [50, 200, 1000])
    @pytest.mark.parametrize("mu", [0.1, 0.3])
    @pytest.mark.parametrize("p", [0.8536, P_OPT])
    def test_exact_below_bound(self, n, mu, p):
        assert bounds.alice_abort_exact(n, mu, 0.8, p) <= bounds.alice_abort_bound(n, mu, 0.8, p)

    def test_no_decay_at_threshold(self):
        assert bounds.alice_abort_bound(500, 0.3, 0.8, 0.8) == 1.0

    def test_exact_survives_large_n(self):
        v = bounds.alice_abort_exact(5000, 0.2, 0.8, P_OPT)
        assert 0 <= v < 1e-5

    def test_bob_threshold(self):
        assert bounds.bob_abort_threshold(100, 0.2, 0.01) == pytest.approx(BOB_THRESHOLD_100, abs=1e-12)
        assert bounds.bob_abort_threshold(100, 0.2, 1 - 1e-15) == pytest.approx(20.0, abs=1e-6)

    def test_bob_exact(self):
        assert bounds.bob_abort_exact(200, 0.2, 0.05) == pytest.approx(BOB_EXACT_200, rel=1e-10)
        for n in (50, 200, 2000):
            assert bounds.bob_abort_exact(n, 0.2, 0.05) <= 0.05

    def test_min_rounds(self):
        assert bounds.min_rounds_for_correctness(0.01, 0.2, 0.8, P_OPT) == math.ceil(MIN_ROUNDS_001) == 4024
        assert bounds.min_rounds_for_correctness(0.05, 0.2, 0.8, P_OPT) == math.ceil(MIN_ROUNDS_005) == 2618

    def test_min_rounds_monotone(self):
        mus = [0.05, 0.1, 0.2, 0.4, 0.8]
        ns = [bounds.min_rounds_for_correctness(0.01, m, 0.8) for m in mus]
        assert ns == sorted(ns, reverse=True)
        assert bounds.min_rounds_for_correctness(0.5, 0.2, 0.8) < bounds.min_rounds_for_correctness(0.01, 0.2, 0.8)

    def test_min_rounds_needs_margin(self):
        with pytest.raises(DomainError):
            bounds.min_rounds_for_correctness(0.01, 0.2, 0.85, 0.85)

    def test_bound_holds_at_min_rounds(self):
        n = bounds.min_rounds_for_correctness(0.01, 0.2, 0.8)
        assert bounds.alice_abort_bound(n, 0.2, 0.8, P_OPT) <= 0.01
        assert bounds.alice_abort_bound(n - 1, 0.2, 0.8, P_OPT) > 0.01


class TestEntropyArithmetic:
    def test_uniform_independent(self):
        assert bounds.classical_min_entropy(np.full((8, 1), 1 / 8)) == pytest.approx(3.0, abs=1e-12)

    def test_side_equals_x(self):
        assert bounds.classical_min_entropy(np.eye(4) / 4) == pytest.approx(0.0, abs=1e-12)

    def test_random_table_against_enumeration(self):
        g = np.random.default_rng(4)
        t = g.random((4, 5))
        t /= t.sum()
        pguess = 0.0
        for k in range(5):
            best = 0.0
            for x in range(4):
                best = max(best, t[x, k])
            pguess += best
        assert bounds.classical_min_entropy(t) == pytest.approx(-math.log2(pguess), abs=1e-12)

    def test_rejects_unnormalised(self):
        with pytest.raises(DomainError):
            bounds.classical_min_entropy(np.full((2, 2), 0.3))

    @pytest.mark.parametrize("z, loose, tight", [(0.0, 0.5, 0.5), (1.0, 0.0, 0.0), (0.25, 0.375, TIGHT_025)])
    def test_shannon_values(self, z, loose, tight):
        lo, ti = bounds.shannon_lower_from_zeta(z)
        assert lo == pytest.approx(loose, abs=1e-12)
        assert ti == pytest.approx(tight, abs=1e-12)

    def test_tight_never_below_loose(self):
        for z in np.linspace(0, 1, 11):
            lo, ti = bounds.shannon_lower_from_zeta(z)
            assert ti >= lo - 1e-15


class TestPvBound:
    def test_formula(self):
        b = bounds.pv_cheat_bound(100, 0.1, 0.1)
        assert b.bound == pytest.approx(2.0**-9, rel=1e-12)
        assert b.kappa_sup == 0.1
        assert 2.0 ** (-b.kappa * 100) == pytest.approx(b.bound, rel=1e-12)

    def test_doubling_rate_squares_bound(self):
        a = bounds.pv_cheat_bound(50, 0.05, 0.2).bound / 2
        b = bounds.pv_cheat_bound(50, 0.1, 0.2).bound / 2
        assert b == pytest.approx(a * a, rel=1e-12)

    @pytest.mark.parametrize("args", [(10, 0.0, 0.1), (10, 0.1, -0.1), (0, 0.1, 0.1)])
    def test_rejects(self, args):
        with pytest.raises(DomainError):
            bounds.pv_cheat_bound(*args)

    def test_composition_with_rate(self):
        p = WseParams(10**12, 0.01, 0.8, 2.0**-100, 2)
        rep = bounds.lambda_rate(p)
        assert rep.lambda_ > 0
        b = bounds.pv_bound_from_rate(p)
        assert b.kappa_sup == pytest.approx(min(100 / 10**12, rep.lambda_), rel=1e-12)
        assert bounds.pv_bound_from_rate(WseParams(1000, 0.2, 0.8, 0.05)) is None


class TestRateReport:
    def test_consistency(self):
        for n in (10**3, 10**6):
            for d in (1, 8):
                rep = bounds.lambda_rate(WseParams(n, 0.1, 0.84, 1e-4, d))
                assert rep.is_consistent()

    def test_lambda_tends_to_h_minus_mu(self):
        ns = [10**k for k in range(3, 18)]
        reps = [bounds.lambda_rate(WseParams(n, 0.01, 0.85, 1e-6, 2)) for n in ns]
        lams = [r.lambda_ for r in reps]
        assert all(a < b for a, b in zip(lams, lams[1:]))
        h = bounds.tradeoff_h(0.85, 0.01)
        assert lams[-1] == pytest.approx(h - 0.01, abs=1e-3)
        # The gap closes like vbar / sqrt(n).
        gap = (h - 0.01 - lams[-1]) * math.sqrt(ns[-1])
        assert gap == pytest.approx(reps[-1].vbar, rel=1e-3)

    def test_h_tends_to_half(self):
        assert bounds.tradeoff_h(P_OPT - 1e-9, 1e-9) == pytest.approx(0.5, abs=1e-3)

    def test_lambda_negative_at_low_threshold(self):
        for n in (10**3, 10**6, 10**12):
            assert bounds.lambda_rate(WseParams(n, 0.01, 0.7500001, 0.05)).lambda_ < 0

    def test_delta_outside_interval_rejected(self):
        with pytest.raises(ValueError):
            bounds.lambda_rate(WseParams(100, 0.2, 0.9, 0.05))


def _golden_rows():
    with GOLDEN.open() as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("row", _golden_rows(), ids=lambda r: f"n{r['n']}-mu{r['mu']}-d{r['delta']}-e{r['eps']}-D{r['d']}")
def test_golden_rate_table(row):
    p = WseParams(int(row["n"]), float(row["mu"]), float(row["delta"]), float(row["eps"]), int(row["d"]))
    rep = bounds.lambda_rate(p)
    got = {
        "h": rep.h, "grad_norm": rep.grad_inf_norm, "vbar": rep.vbar, "lambda": rep.lambda_,
        "n_tilde": rep.n_tilde, "hmax_bound": rep.hmax_bound, "alice_abort_bound": rep.alice_abort_bound,
        "bob_threshold": rep.bob_threshold,
    }
    for key, value in got.items():
        assert value == pytest.approx(float(row[key]), rel=1e-9, abs=1e-300), key
    assert rep.min_n_correctness == int(row["min_n"])
