"""L^k-ball uncertainty sets over covariate distributions: norms and minimal
radii, exact worst-case means (greedy capping for k = inf, KKT bisection for
finite k), robust threshold learning, and radius selection by calibration."""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .model import (
    ConfigurationError,
    DiscretizedDistribution,
    LabeledDataset,
    NuisanceSet,
    Policy,
    ThresholdPolicy,
    as_matrix,
    empirical_distribution,
)
from .estimators import (
    centered_value_plugin,
    fit_density_ratio,
    value_aipw,
    value_eff,
    value_ipw,
    value_onlyx,
)


class NotAbsolutelyContinuousError(ValueError):
    pass


class RadiusError(ValueError):
    pass


@dataclass(frozen=True)
class UncertaintySet:
    """All covariate laws whose density ratio to the center has L^k norm <= c."""

    center: DiscretizedDistribution
    k: float
    c: float

    def __post_init__(self):
        if self.c < 1:
            raise RadiusError("radius must be at least 1")
        if not self.k > 1:
            raise ValueError("power order must lie in (1, inf]")

    def contains(self, q: DiscretizedDistribution, tol=1e-8):
        return lk_norm(q, self.center, self.k) <= self.c + tol


def _align_masses(q: DiscretizedDistribution, p: DiscretizedDistribution):
    """Mass of q at each support point of p; errors if q has mass off p."""
    qm = np.zeros(p.support.shape[0])
    claimed = 0.0
    for i, row in enumerate(p.support):
        hit = np.all(np.isclose(q.support, row, atol=1e-12), axis=1)
        if hit.any():
            qm[i] = q.mass[hit.argmax()]
            claimed += qm[i]
    if claimed < 1.0 - 1e-10 or ((qm > 1e-15) & (p.mass == 0)).any():
        raise NotAbsolutelyContinuousError("q puts mass where p has none")
    return qm


def lk_norm(q: DiscretizedDistribution, p: DiscretizedDistribution, k) -> float:
    """||dQ/dP||_{L^k(P)} on a shared finite support; max ratio for k = inf."""
    qm = _align_masses(q, p)
    pos = p.mass > 0
    ratio = qm[pos] / p.mass[pos]
    if np.isinf(k):
        return float(ratio.max())
    return float((p.mass[pos] * ratio**k).sum() ** (1.0 / k))


def minimal_c(p_star: DiscretizedDistribution, p: DiscretizedDistribution, k) -> float:
    """Smallest radius c with p_star inside the L^k ball centered at p."""
    return lk_norm(p_star, p, k)


def worst_case_mean(v, uset: UncertaintySet):
    """Minimize E_Q[v] over the uncertainty set; returns (value, attaining Q)."""
    p = uset.center.mass
    sup = uset.center.support
    v = np.asarray(v, dtype=float).reshape(p.shape[0])
    if not np.isfinite(v).all():
        raise ValueError("values must be finite")
    pos = p > 0
    if uset.c == 1.0 or np.ptp(v[pos]) == 0:
        q = p.copy()
    elif np.isinf(uset.k):
        q = _worst_case_inf(v, p, uset.c)
    else:
        q = _worst_case_finite_k(v, p, uset.k, uset.c)
    q_dist = DiscretizedDistribution(sup, q)
    return float(np.dot(q, v)), q_dist


def _worst_case_inf(v, p, c):
    """Greedy capping: q_i <= c p_i, filled from the smallest v up."""
    q = np.zeros_like(p)
    remaining = 1.0
    for i in np.argsort(v, kind="stable"):
        take = min(c * p[i], remaining)
        q[i] = take
        remaining -= take
        if remaining <= 0:
            break
    q /= q.sum()
    return q


def _worst_case_finite_k(v, p, k, c):
    """KKT water-filling: ratios prop. to max(eta - v, 0)^(1/(k-1)), with eta
    found by bisection so the L^k norm constraint binds."""
    pos = p > 0
    vp, pp = v[pos], p[pos]
    expo = 1.0 / (k - 1.0)

    def ratios(eta):
        u = np.maximum(eta - vp, 0.0) ** expo
        denom = float((pp * u).sum())
        return u / denom

    def norm(eta):
        r = ratios(eta)
        return float((pp * r**k).sum() ** (1.0 / k))

    # all mass on the argmin of v: the largest achievable norm
    argmin = vp == vp.min()
    p_min = pp[argmin].sum()
    max_norm = p_min ** ((1.0 - k) / k)
    q = np.zeros_like(p)
    if c >= max_norm:
        qp = np.where(argmin, pp / p_min, 0.0)
    else:
        lo, hi = vp.min(), vp.max() + np.ptp(vp) + 1.0
        while norm(hi) > c:
            hi = vp.min() + 2.0 * (hi - vp.min())
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if norm(mid) > c:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-10 * max(1.0, abs(hi)):
                break
        qp = pp * ratios(hi)
        qp /= qp.sum()
    q[pos] = qp
    return q


def centered_objective(pi: Policy, X, cate_values):
    return (2.0 * pi.prob(1, X) - 1.0) * cate_values


def dro_learn_threshold(theta_grid, cate_hat, covariates, k, c) -> ThresholdPolicy:
    """Threshold maximizing the worst-case centered value over the L^k ball
    centered at the empirical distribution of the given covariate sample."""
    theta_grid = np.asarray(theta_grid, dtype=float)
    if theta_grid.size == 0:
        raise ConfigurationError("empty threshold grid")
    center = empirical_distribution(as_matrix(covariates))
    cate = np.asarray(cate_hat(center.support), dtype=float).reshape(center.support.shape[0])
    uset = UncertaintySet(center, k, c)
    best = None
    for theta in theta_grid:
        pi = ThresholdPolicy(theta)
        val, _ = worst_case_mean(centered_objective(pi, center.support, cate), uset)
        if best is None or val > best[0]:
            best = (val, theta)
    return ThresholdPolicy(best[1])


def worst_case_centered_value(pi: Policy, cate_hat, covariates, k, c):
    """inf over the ball of E_Q[(2 pi(1|X) - 1) C(X)], with the attaining Q."""
    center = empirical_distribution(as_matrix(covariates))
    cate = np.asarray(cate_hat(center.support), dtype=float).reshape(center.support.shape[0])
    uset = UncertaintySet(center, k, c)
    return worst_case_mean(centered_objective(pi, center.support, cate), uset)


def _estimate(tag, pi, data, nuis: NuisanceSet):
    if tag == "ipw":
        return value_ipw(pi, data, nuis.phi_at)
    if tag == "aipw":
        return value_aipw(pi, data, nuis.phi_at, nuis.mu)
    if tag == "eff":
        return value_eff(pi, data, nuis)
    if tag == "onlyx":
        return value_onlyx(pi, data, nuis)
    if tag == "plugin":
        calib = data.rows(data.site == 0)
        return centered_value_plugin(pi, calib.covariates, nuis.cate)
    raise ConfigurationError(f"unknown estimator tag: {tag}")


def select_c_calibrated(policies, data: LabeledDataset, nuis: NuisanceSet,
                        estimator="onlyx"):
    """Pick the radius whose learned policy scores highest on the calibration
    estimate of the testing value. Ties break toward the smaller radius."""
    if len(policies) < 2:
        raise ConfigurationError("need at least two candidate radii")
    best = None
    for c in sorted(policies):
        val = _estimate(estimator, policies[c], data, nuis).point
        if best is None or val > best[0] + 1e-12:
            best = (val, c)
    return best[1]


def select_c_multisite(policies, site_covariates, train_data: LabeledDataset,
                       nuis: NuisanceSet):
    """Pick the radius maximizing the minimum across-site value, each site's
    value estimated from its covariate sample alone."""
    if len(site_covariates) < 1:
        raise ConfigurationError("need at least one calibration site")
    if len(policies) < 2:
        raise ConfigurationError("need at least two candidate radii")
    train = train_data.rows(train_data.site == 1)
    site_data = []
    for X_site in site_covariates:
        X_site = as_matrix(X_site)
        combined = LabeledDataset(
            np.vstack([train.covariates, X_site]),
            np.concatenate([train.actions, np.full(X_site.shape[0], np.nan)]),
            np.concatenate([train.outcomes, np.full(X_site.shape[0], np.nan)]),
            np.concatenate([train.site, np.zeros(X_site.shape[0], dtype=int)]),
        )
        w_star, sel, _ = fit_density_ratio(combined)
        site_data.append((combined, dataclasses.replace(nuis, w_star=w_star, sel=sel)))
    best = None
    for c in sorted(policies):
        site_vals = [value_onlyx(policies[c], d, nz).point for d, nz in site_data]
        val = min(site_vals)
        if best is None or val > best[0] + 1e-12:
            best = (val, c)
    return best[1]
