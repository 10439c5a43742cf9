import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize
from scipy.stats import norm

from d2c.errors import InvalidParameter
from d2c.priorhole import (
    HoleReport,
    build_rings,
    gaussian_ball_mass,
    hole_masses,
    hole_report,
    invert_mass,
    kl_analytic,
    kl_divergence,
    noised_hole_deficit,
    noised_hole_kl,
    q_total_mass,
    w2_bound,
    w2_density_bound,
    wasserstein2_exact_1d,
)

LN2 = math.log(2.0)


def quantile_oracle_w2(delta, n, nodes=4000):
    """W2 from a brentq-inverted CDF of q and a midpoint rule over u in (1/2, 1)."""
    # ball masses of the ring edges, rebuilt from the normal quantile instead of bisection
    edges = [norm.ppf(0.5 + 0.5 * k * delta / n) for k in range(2 * n + 1)]

    def phi_cdf(x):
        return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))

    def cdf_pos(x):
        # F_q(x) for x >= 0, by symmetry 1/2 plus the q-mass of [0, x]
        total = 0.5
        for k in range(2 * n):
            lo, hi = edges[k], edges[k + 1]
            if x <= lo:
                break
            w = 2.0 if k % 2 == 0 else 0.0
            total += w * (phi_cdf(min(x, hi)) - phi_cdf(lo))
        if x > edges[-1]:
            total += phi_cdf(x) - phi_cdf(edges[-1])
        return total

    u = 0.5 + (np.arange(nodes) + 0.5) / (2 * nodes)
    sq = []
    for ui in u:
        hi = 1.0
        while cdf_pos(hi) < ui:
            hi *= 2
        xq = optimize.brentq(lambda x: cdf_pos(x) - ui, 0.0, hi, xtol=1e-13)
        sq.append((xq - norm.ppf(ui)) ** 2)
    return math.sqrt(float(np.mean(sq)))


class TestBallMass:
    def test_examples(self):
        assert gaussian_ball_mass(0.0) == 0.0
        assert invert_mass(0.0) == 0.0
        assert gaussian_ball_mass(1.0) == pytest.approx(math.erf(1 / math.sqrt(2)), abs=1e-15)
        assert gaussian_ball_mass(1.0) == pytest.approx(0.6826894921370859, abs=1e-14)
        assert gaussian_ball_mass(1.5, d=2) == pytest.approx(1 - math.exp(-1.125), abs=1e-15)

    @settings(max_examples=80, deadline=None)
    @given(st.floats(0.0, 5.0), st.sampled_from([1, 2]))
    def test_round_trip(self, R, d):
        assert invert_mass(gaussian_ball_mass(R, d), d) == pytest.approx(R, abs=1e-10)

    def test_bad_inputs(self):
        with pytest.raises(InvalidParameter):
            gaussian_ball_mass(-1.0)
        with pytest.raises(InvalidParameter):
            gaussian_ball_mass(1.0, d=3)
        with pytest.raises(InvalidParameter):
            invert_mass(1.0)


class TestConstruction:
    def test_two_ring_base_case(self):
        c = build_rings(0.25, 1)
        assert c.radii[0] == 0.0
        assert c.radii[1] == pytest.approx(invert_mass(0.25), abs=1e-12)
        assert c.radii[2] == pytest.approx(invert_mass(0.5), abs=1e-12)

    @pytest.mark.parametrize("d", [1, 2])
    @pytest.mark.parametrize("delta,n", [(0.1, 1), (0.3, 3), (0.49, 8)])
    def test_arithmetic_progression_and_mass(self, delta, n, d):
        c = build_rings(delta, n, d)
        masses = gaussian_ball_mass(c.radii, d)
        assert masses[-1] == pytest.approx(2 * delta, abs=1e-10)
        assert np.allclose(np.diff(masses), delta / n, atol=1e-10)
        assert q_total_mass(c) == pytest.approx(1.0, abs=1e-8)
        p, q = hole_masses(c)
        assert abs(p - delta) <= 1e-6 and q <= 1e-10

    def test_density_ratio(self):
        c = build_rings(0.3, 2)
        mids = 0.5 * (c.radii[:-1] + c.radii[1:])
        assert list(c.density_ratio(mids)) == [2.0, 0.0, 2.0, 0.0]
        assert c.density_ratio(c.radii[-1] + 1.0) == 1.0

    @pytest.mark.parametrize("delta,n,d", [(0.5, 1, 1), (-0.1, 1, 1), (0.2, 0, 1), (0.2, 1, 3)])
    def test_rejects(self, delta, n, d):
        with pytest.raises(InvalidParameter):
            build_rings(delta, n, d)


class TestKL:
    def test_headline_value(self):
        kl = kl_divergence(build_rings(0.49, 1))
        assert kl == pytest.approx(0.98 * LN2, abs=1e-3)
        assert kl == pytest.approx(0.6792842, abs=1e-6)
        assert kl < LN2

    def test_independent_of_ring_count(self):
        vals = [kl_divergence(build_rings(0.49, n)) for n in (1, 2, 4, 8)]
        assert np.ptp(vals) < 1e-8

    def test_small_delta(self):
        assert kl_divergence(build_rings(1e-6, 2)) < 1e-5
        assert kl_divergence(build_rings(0.0, 2)) == 0.0

    @pytest.mark.parametrize("d", [1, 2])
    def test_quadrature_matches_closed_form(self, d):
        c = build_rings(0.37, 3, d)
        assert kl_divergence(c) == pytest.approx(kl_analytic(c), abs=1e-9)
        assert kl_analytic(c) == pytest.approx(0.74 * LN2, abs=1e-12)


class TestWasserstein:
    @pytest.mark.parametrize("delta,n", [(0.49, 1), (0.49, 4), (0.2, 2)])
    def test_matches_quantile_oracle(self, delta, n):
        assert wasserstein2_exact_1d(build_rings(delta, n)) == pytest.approx(quantile_oracle_w2(delta, n), rel=2e-3)

    def test_degenerate_is_zero(self):
        assert wasserstein2_exact_1d(build_rings(0.0, 3)) < 1e-6

    def test_decreases_with_ring_count(self):
        w = [wasserstein2_exact_1d(build_rings(0.49, n)) for n in (1, 2, 4, 8, 16)]
        assert all(a > b for a, b in zip(w[:-1], w[1:]))
        assert all(b / a < 0.75 for a, b in zip(w[1:-1], w[2:]))

    @pytest.mark.parametrize("delta", [0.1, 0.3, 0.49])
    @pytest.mark.parametrize("n", [1, 2, 5])
    def test_gap_bound_dominates(self, delta, n):
        c = build_rings(delta, n)
        assert w2_bound(c) >= wasserstein2_exact_1d(c) ** 2

    def test_gap_bound_base_case(self):
        c = build_rings(0.49, 1)
        assert c.radii[2] == pytest.approx(2.3263478740408408, abs=1e-9)
        assert w2_bound(c) == pytest.approx(c.radii[2] ** 2, rel=1e-14)
        assert w2_bound(c) == pytest.approx(5.41, abs=0.005)

    def test_bounds_shrink(self):
        for d in (1, 2):
            b = [w2_bound(build_rings(0.4, n, d)) for n in (1, 2, 4, 8)]
            assert all(x > y for x, y in zip(b[:-1], b[1:]))
            assert all(w2_bound(build_rings(0.4, n, d)) < w2_density_bound(build_rings(0.4, n, d)) for n in (2, 4, 8))

    def test_exact_needs_one_dimension(self):
        with pytest.raises(InvalidParameter):
            wasserstein2_exact_1d(build_rings(0.3, 1, 2))


class TestNoising:
    def test_monotone_in_alpha(self):
        c = build_rings(0.49, 4)
        kl = [noised_hole_kl(c, a) for a in (1.0, 0.9, 0.5, 0.1)]
        assert kl[0] == pytest.approx(0.98 * LN2, abs=1e-3)
        assert all(a > b for a, b in zip(kl[:-1], kl[1:]))
        assert kl[-1] < 1e-3

    def test_vanishes_as_alpha_goes_to_zero(self):
        assert noised_hole_kl(build_rings(0.49, 2), 1e-4) < 1e-6

    @pytest.mark.parametrize("alpha", [1.0, 0.95, 0.7, 0.3, 0.05])
    @pytest.mark.parametrize("n", [1, 4])
    def test_pinsker(self, alpha, n):
        c = build_rings(0.49, n)
        deficit = noised_hole_deficit(c, alpha)
        assert deficit <= math.sqrt(noised_hole_kl(c, alpha) / 2) + 1e-7

    def test_rejects(self):
        with pytest.raises(InvalidParameter):
            noised_hole_kl(build_rings(0.3, 1), 0.0)
        with pytest.raises(InvalidParameter):
            noised_hole_kl(build_rings(0.3, 1, 2), 0.5)


def test_report():
    r = hole_report(0.49, 2)
    assert isinstance(r, HoleReport)
    assert r.row() == [getattr(r, f) for f in HoleReport.FIELDS]
    assert r.p_mass >= 0.49 - 1e-6 and r.q_mass <= 1e-10
    r2 = hole_report(0.49, 2, d=2)
    assert math.isnan(r2.w2) and r2.w2_bound > 0
