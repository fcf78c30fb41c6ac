"""Distribution-ball uncertainty sets: norms, worst-case means against a
simplex-grid brute force, monotonicity, robust threshold learning, and
radius selection."""

import numpy as np
import pytest

from policyshift.dro import (
    NotAbsolutelyContinuousError,
    RadiusError,
    UncertaintySet,
    dro_learn_threshold,
    lk_norm,
    minimal_c,
    select_c_calibrated,
    worst_case_centered_value,
    worst_case_mean,
)
from policyshift.model import (
    DiscretizedDistribution,
    LabeledDataset,
    NuisanceSet,
    ThresholdPolicy,
)

N_CASES = 200


def _dist(mass):
    mass = np.asarray(mass, dtype=float)
    return DiscretizedDistribution(np.arange(len(mass), dtype=float).reshape(-1, 1), mass)


class TestLkNorm:
    def test_hand_values(self):
        p = _dist([0.5, 0.5])
        q = _dist([0.75, 0.25])
        # ratios (1.5, 0.5): L2 norm sqrt(0.5*2.25 + 0.5*0.25) = sqrt(1.25)
        assert lk_norm(q, p, 2) == pytest.approx(np.sqrt(1.25))
        assert lk_norm(q, p, np.inf) == pytest.approx(1.5)
        assert lk_norm(p, p, 2) == pytest.approx(1.0)

    def test_norm_is_at_least_one(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            k = float(rng.choice([1.5, 2.0, 4.0, np.inf]))
            n = int(rng.integers(2, 6))
            p = _dist(rng.dirichlet(np.full(n, 1.0)) * 0.9 + 0.1 / n)
            q = _dist(rng.dirichlet(np.full(n, 1.0)))
            assert lk_norm(q, p, k) >= 1.0 - 1e-12

    def test_monotone_in_k(self):
        p = _dist([0.2, 0.3, 0.5])
        q = _dist([0.5, 0.3, 0.2])
        norms = [lk_norm(q, p, k) for k in (1.5, 2, 4, 10, np.inf)]
        assert all(a <= b + 1e-12 for a, b in zip(norms, norms[1:]))

    def test_off_support_mass_rejected(self):
        p = DiscretizedDistribution([[0.0], [1.0]], [0.5, 0.5])
        q = DiscretizedDistribution([[0.0], [2.0]], [0.5, 0.5])
        with pytest.raises(NotAbsolutelyContinuousError):
            lk_norm(q, p, 2)

    def test_minimal_c_is_the_norm(self):
        p = _dist([0.5, 0.5])
        q = _dist([0.75, 0.25])
        assert minimal_c(q, p, 2) == pytest.approx(lk_norm(q, p, 2))


class TestUncertaintySet:
    def test_radius_below_one_rejected(self):
        with pytest.raises(RadiusError):
            UncertaintySet(_dist([0.5, 0.5]), 2, 0.9)

    def test_k_must_exceed_one(self):
        with pytest.raises(ValueError):
            UncertaintySet(_dist([0.5, 0.5]), 1.0, 2.0)

    def test_contains(self):
        uset = UncertaintySet(_dist([0.5, 0.5]), 2, 1.2)
        assert uset.contains(_dist([0.5, 0.5]))
        assert not uset.contains(_dist([0.95, 0.05]))


def _brute_force_worst(v, p, k, c):
    """Simplex-grid brute force on a 3-point support: grid over (q1, q2)
    refined adaptively around the running argmin. The window re-centers
    while the argmin sits on its edge and shrinks once it is interior, so
    the search tracks an optimum on the ball boundary to fine resolution."""
    v = np.asarray(v, dtype=float)

    def feasible_min(q1, q2):
        q1, q2 = np.meshgrid(q1, q2, indexing="ij")
        q1, q2 = q1.ravel(), q2.ravel()
        q3 = 1.0 - q1 - q2
        ok = q3 >= -1e-15
        q = np.stack([q1[ok], q2[ok], np.maximum(q3[ok], 0.0)], axis=1)
        ratio = q / p
        if np.isinf(k):
            norms = ratio.max(axis=1)
        else:
            norms = (q * ratio ** (k - 1)).sum(axis=1) ** (1.0 / k)
        inside = norms <= c + 1e-12
        if not inside.any():
            return None, None
        vals = q[inside] @ v
        i = int(vals.argmin())
        return float(vals[i]), q[inside][i]

    lin = np.linspace(0.0, 1.0, 201)
    # the center itself is always feasible; keep it on the grid so that
    # radii just above 1 have at least one candidate
    best, q0 = feasible_min(np.append(lin, p[0]), np.append(lin, p[1]))
    h = 1.0 / 200
    for _ in range(400):
        g1 = np.linspace(max(0.0, q0[0] - h), min(1.0, q0[0] + h), 81)
        g2 = np.linspace(max(0.0, q0[1] - h), min(1.0, q0[1] + h), 81)
        val, q_new = feasible_min(np.append(g1, q0[0]), np.append(g2, q0[1]))
        if val is None:
            val = np.inf
        improved = val < best - 1e-13
        if val < best:
            best = val
            q0 = q_new
        if not improved:
            # the current window is exhausted; zoom in on the boundary
            h *= 0.5
            if h < 1e-10:
                break
    return best


def _random_ball_case(rng):
    p = rng.dirichlet(np.full(3, 1.5)) * 0.85 + 0.05
    p = p / p.sum()
    v = rng.choice([-1.0, 0.0, 1.0], 3)
    k = float(rng.choice([2.0, np.inf]))
    c = float(rng.choice([1.0, 1.1, 1.5, 3.0]))
    return _dist(p), v, k, c


class TestWorstCaseMean:
    def test_matches_simplex_grid_brute_force(self):
        rng = np.random.default_rng(20240905)
        for case in range(N_CASES):
            center, v, k, c = _random_ball_case(rng)
            uset = UncertaintySet(center, k, c)
            wc, q_worst = worst_case_mean(v, uset)
            brute = _brute_force_worst(v, center.mass, k, c)
            assert wc == pytest.approx(brute, abs=1e-4), \
                f"case {case}: p={center.mass} v={v} k={k} c={c}"

    def test_attaining_distribution_is_feasible_and_attains(self):
        rng = np.random.default_rng(20240906)
        for _ in range(N_CASES):
            center, v, k, c = _random_ball_case(rng)
            uset = UncertaintySet(center, k, c)
            wc, q_worst = worst_case_mean(v, uset)
            assert lk_norm(q_worst, center, k) <= c + 1e-6
            assert q_worst.expect(v) == pytest.approx(wc, abs=1e-12)

    def test_monotone_in_radius(self):
        """Enlarging the ball can only lower the worst-case mean."""
        rng = np.random.default_rng(20240907)
        for _ in range(N_CASES):
            center, v, k, _ = _random_ball_case(rng)
            cs = np.sort(rng.uniform(1.0, 4.0, 4))
            vals = [worst_case_mean(v, UncertaintySet(center, k, float(c)))[0]
                    for c in cs]
            assert all(a >= b - 1e-10 for a, b in zip(vals, vals[1:]))

    def test_radius_one_returns_center_mean(self):
        center = _dist([0.2, 0.3, 0.5])
        v = np.array([3.0, -1.0, 2.0])
        wc, q = worst_case_mean(v, UncertaintySet(center, 2, 1.0))
        assert wc == pytest.approx(center.expect(v))
        np.testing.assert_allclose(q.mass, center.mass)

    def test_large_radius_concentrates_on_argmin(self):
        center = _dist([0.25, 0.5, 0.25])
        v = np.array([1.0, 0.0, -2.0])
        wc, _ = worst_case_mean(v, UncertaintySet(center, np.inf, 4.0))
        assert wc == pytest.approx(-2.0)

    def test_infinite_values_rejected(self):
        with pytest.raises(ValueError):
            worst_case_mean([np.inf, 0.0], UncertaintySet(_dist([0.5, 0.5]), 2, 1.5))


class TestRobustLearning:
    def test_learn_threshold_no_robustness(self):
        """With c = 1 the robust rule maximizes the plain centered value."""
        X = np.array([[-1.0], [0.0], [1.0]])
        pol = dro_learn_threshold([-1.5, -0.5, 0.5], lambda x: x[:, 0], X, 2, 1.0)
        assert pol.theta == pytest.approx(-0.5)

    def test_learn_threshold_shrinks_with_radius(self):
        """A larger ball pulls the rule toward protecting the worst region."""
        rng = np.random.default_rng(41)
        X = rng.uniform(-1, 1, (60, 1))
        cate = lambda x: 0.2 + x[:, 0]  # treatment helps for x > -0.2
        grid = np.linspace(-1, 1, 81)
        v1 = dro_learn_threshold(grid, cate, X, 2, 1.0)
        val_plain, _ = worst_case_centered_value(v1, cate, X, 2, 1.0)
        v2 = dro_learn_threshold(grid, cate, X, 2, 2.0)
        val_rob, _ = worst_case_centered_value(v2, cate, X, 2, 2.0)
        # worst-case value under the bigger ball can only be lower
        assert val_rob <= val_plain + 1e-12

    def test_robust_threshold_beats_plain_under_worst_case(self):
        rng = np.random.default_rng(43)
        X = rng.uniform(-1, 1, (60, 1))
        cate = lambda x: 0.2 + x[:, 0]
        grid = np.linspace(-1, 1, 81)
        plain = dro_learn_threshold(grid, cate, X, 2, 1.0)
        robust = dro_learn_threshold(grid, cate, X, 2, 2.0)
        v_plain, _ = worst_case_centered_value(plain, cate, X, 2, 2.0)
        v_robust, _ = worst_case_centered_value(robust, cate, X, 2, 2.0)
        assert v_robust >= v_plain - 1e-12


class TestRadiusSelection:
    def _setup(self, rng):
        n = 400
        X = rng.uniform(-1, 1, (n, 1))
        site = (np.arange(n) % 2).astype(int)
        a = np.where(site == 1, rng.choice([-1, 1], n), np.nan)
        y = np.where(site == 1, (a if isinstance(a, float) else a) * X[:, 0]
                     + 0.1 * rng.normal(size=n), np.nan)
        data = LabeledDataset(X, a, y, site)
        nuis = NuisanceSet(
            mu=lambda aa, x: aa * x[:, 0],
            phi=lambda aa, x, s=None: np.full(x.shape[0], 0.5),
            w_star=lambda x: np.ones(x.shape[0]),
            cate=lambda x: 2.0 * x[:, 0],
        )
        return data, nuis

    def test_select_c_calibrated_prefers_better_policy(self):
        rng = np.random.default_rng(47)
        data, nuis = self._setup(rng)
        policies = {1.0: ThresholdPolicy(0.0), 2.0: ThresholdPolicy(0.9)}
        assert select_c_calibrated(policies, data, nuis) == 1.0

    def test_select_c_ties_break_small(self):
        rng = np.random.default_rng(53)
        data, nuis = self._setup(rng)
        policies = {1.0: ThresholdPolicy(0.0), 1.5: ThresholdPolicy(0.0)}
        assert select_c_calibrated(policies, data, nuis) == 1.0

    def test_select_c_needs_two_candidates(self):
        rng = np.random.default_rng(59)
        data, nuis = self._setup(rng)
        from policyshift.model import ConfigurationError
        with pytest.raises(ConfigurationError):
            select_c_calibrated({1.0: ThresholdPolicy(0.0)}, data, nuis)
