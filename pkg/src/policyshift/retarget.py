"""Retargeting weights and curvature diagnostics.

Implements the variance-style objective over weight/reference-policy pairs,
its constrained minimizers (L1(nu), global curvature, local curvature over
an interpolation family), and the regret-ratio diagnostics for threshold
policy classes.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .model import (
    ConfigurationError,
    DegenerateWeightError,
    DiscretizedDistribution,
    NuisanceSet,
    WeightFn,
    as_matrix,
    derive_M,
    normalize_weight,
)

RATIO_FLOOR = 1e-6  # sigma2 and phi are clipped below this inside ratios


class PositivityError(ValueError):
    pass


class UnboundedWeightError(ValueError):
    pass


class NoSignalError(ValueError):
    pass


class CurvatureDegenerateError(ValueError):
    pass


@dataclass
class OmegaIntegrandParts:
    """Inner bracket value g at the optimal reference policy, per support row."""

    g: np.ndarray
    rho_star: np.ndarray  # rows (n), columns per action
    rho_in_range: bool


def pop_points(pop):
    """Support rows and probability masses of a population (discrete or sample)."""
    if isinstance(pop, DiscretizedDistribution):
        return pop.support, pop.mass
    X = as_matrix(pop)
    return X, np.full(X.shape[0], 1.0 / X.shape[0])


def _variance_ratios(nuis: NuisanceSet, X):
    """sigma2/phi per action with floor clipping; raises on exact zeros of phi."""
    nuis.require("phi", "sigma2")
    X = as_matrix(X)
    n = X.shape[0]
    m = len(nuis.action_set)
    phi = np.empty((n, m))
    sig2 = np.empty((n, m))
    for j, a in enumerate(nuis.action_set):
        phi[:, j] = nuis.phi_at(a, X)
        sig2[:, j] = np.asarray(nuis.sigma2(a, X), dtype=float).reshape(n)
    if (phi == 0).any():
        raise PositivityError("propensity is exactly 0 on the support")
    nuis.clip_counts["phi"] = nuis.clip_counts.get("phi", 0) + int((phi < RATIO_FLOOR).sum())
    nuis.clip_counts["sigma2"] = nuis.clip_counts.get("sigma2", 0) + int((sig2 < RATIO_FLOOR).sum())
    phi = np.clip(phi, RATIO_FLOOR, None)
    sig2 = np.clip(sig2, RATIO_FLOOR, None)
    return sig2 / phi


def optimal_reference(nuis: NuisanceSet, x):
    """Reference policy minimizing the inner bracket pointwise.

    rho(a|x) = (1 - (phi/sigma2) * xi) / 2 with
    xi = (m - 2) / sum_a phi/sigma2. For two actions this is 1/2 each.
    Rows can leave [0, 1] for extreme phi/sigma2 with m >= 3; they are
    flagged (rho_in_range) rather than clipped.
    """
    s = _variance_ratios(nuis, x)
    m = s.shape[1]
    xi = (m - 2) / (1.0 / s).sum(axis=1)
    rho = 0.5 * (1.0 - xi[:, None] / s)
    in_range = bool(((rho >= -1e-12) & (rho <= 1 + 1e-12)).all())
    return rho, in_range


def omega_integrand_parts(nuis: NuisanceSet, x) -> OmegaIntegrandParts:
    """Value of the inner bracket at the optimal reference policy.

    g = (sum_a sigma2/phi + (2 - m) * xi) / 4, the pointwise minimum of the
    bracket over reference policies on the probability simplex.
    """
    s = _variance_ratios(nuis, x)
    m = s.shape[1]
    xi = (m - 2) / (1.0 / s).sum(axis=1)
    g = 0.25 * (s.sum(axis=1) + (2 - m) * xi)
    rho, in_range = optimal_reference(nuis, x)
    if not in_range:
        warnings.warn("optimal reference policy leaves [0, 1] at some support points")
    return OmegaIntegrandParts(g=g, rho_star=rho, rho_in_range=in_range)


def omega(w: WeightFn, rho, pop, nuis: NuisanceSet) -> float:
    """E[w^2(X) (sum_a (sigma2/phi) rho^2 + max_a (sigma2/phi)(1 - 2 rho))].

    rho may be a Policy or an (n, m) array of action probabilities aligned
    with the population support.
    """
    X, mass = pop_points(pop)
    s = _variance_ratios(nuis, X)
    if hasattr(rho, "prob"):
        rho_mat = np.column_stack([rho.prob(a, X) for a in nuis.action_set])
    else:
        rho_mat = np.asarray(rho, dtype=float)
        if rho_mat.ndim == 1:
            rho_mat = np.broadcast_to(rho_mat, (X.shape[0], s.shape[1]))
    bracket = (s * rho_mat**2).sum(axis=1) + (s * (1.0 - 2.0 * rho_mat)).max(axis=1)
    return float(np.dot(mass, w(X) ** 2 * bracket))


def _nu_density_ratio(nu, pop):
    """d nu / d P on the population support."""
    X, mass = pop_points(pop)
    if nu is None:
        return np.ones(X.shape[0])
    if isinstance(nu, DiscretizedDistribution):
        ratio = np.zeros(X.shape[0])
        for i, row in enumerate(X):
            hit = np.all(np.isclose(nu.support, row, atol=1e-12), axis=1)
            if hit.any():
                ratio[i] = nu.mass[hit.argmax()]
        if mass.min() <= 0:
            raise ValueError("population mass must be positive on its support")
        return ratio / mass
    raise TypeError("nu must be None (training distribution) or a DiscretizedDistribution")


def weight_l1(nu, pop, nuis: NuisanceSet) -> WeightFn:
    """Minimizer of the objective at the optimal reference policy subject to
    E_nu[w] = 1. Closed form: w(x) proportional to (d nu / d P)(x) / g(x)."""
    X, mass = pop_points(pop)
    parts = omega_integrand_parts(nuis, X)
    ratio = _nu_density_ratio(nu, pop)
    if ((parts.g <= 0) & (ratio > 0)).any():
        raise UnboundedWeightError("integrand vanishes on a nu-positive set")
    if nu is None:
        # evaluable anywhere: w(x) = 1/g(x), renormalized under the population
        raw = WeightFn(lambda x: 1.0 / np.maximum(omega_integrand_parts(nuis, x).g, 1e-300))
        if isinstance(pop, DiscretizedDistribution):
            total = float(np.dot(mass, 1.0 / parts.g))
            return WeightFn(lambda x, _r=raw, _t=total: _r(x) / _t, normalization="train")
        return normalize_weight(raw, X)
    vals = ratio / np.maximum(parts.g, 1e-300)
    total = float(np.dot(nu.mass, _lookup(nu.support, X, vals)))
    if total <= 0:
        raise DegenerateWeightError("weight integrates to 0 under nu")
    vals = vals / total
    return WeightFn(lambda x, _X=X, _v=vals: _lookup(x, _X, _v), normalization=nu)


def _lookup(query, support, values):
    query = as_matrix(query)
    out = np.empty(query.shape[0])
    for i, row in enumerate(query):
        hit = np.all(np.isclose(support, row, atol=1e-12), axis=1)
        if not hit.any():
            raise ValueError("weight evaluated off the discrete support")
        out[i] = values[hit.argmax()]
    return out


def weight_retargeting(pop, nuis: NuisanceSet) -> WeightFn:
    """The retargeting weight: the L1 solution with nu = P_X."""
    return weight_l1(None, pop, nuis)


def weight_global_curvature(pop, nuis: NuisanceSet) -> WeightFn:
    """Weight proportional to M(x) / (sum_a sigma2/phi + xi/2), normalized so
    that it integrates to 1 under the measure with density prop. to M(x)p(x)."""
    X, mass = pop_points(pop)
    M = derive_M(nuis, X)
    if not (M > 0).any():
        raise NoSignalError("arm means coincide everywhere; no informative region")

    def raw(x):
        s = _variance_ratios(nuis, x)
        m = s.shape[1]
        xi = (m - 2) / (1.0 / s).sum(axis=1)
        return derive_M(nuis, x) / (s.sum(axis=1) + 0.5 * xi)

    vals = raw(X)
    nu1 = mass * M
    total = float(np.dot(nu1 / nu1.sum(), vals))
    return WeightFn(lambda x, _t=total: raw(x) / _t, normalization="unnormalized")


def cate_fn(nuis: NuisanceSet):
    if nuis.cate is not None:
        return lambda x: np.asarray(nuis.cate(x), dtype=float).reshape(as_matrix(x).shape[0])
    nuis.require("mu")
    return lambda x: (np.asarray(nuis.mu(1, x), dtype=float)
                      - np.asarray(nuis.mu(-1, x), dtype=float)).reshape(as_matrix(x).shape[0])


def curvature_vpp_threshold(theta, w: WeightFn, density, nuis: NuisanceSet,
                            step=None, support_range=2.0) -> float:
    """Second derivative of the weighted value surface at a threshold:
    w(theta) p(theta) (-C'(theta)), with C' estimated as the local-linear
    slope of C over [theta - h, theta + h]. The window is wide enough (and
    the slope averaged over enough points) to read a stable derivative off
    piecewise-constant tree-based fits of C."""
    h = step if step is not None else 0.3 * support_range
    C = cate_fn(nuis)
    point = np.array([[theta]])
    grid = theta + np.linspace(-h, h, 17)
    cvals = C(grid.reshape(-1, 1))
    cprime = float(np.polyfit(grid, cvals, 1)[0])
    p_at = density(point) if callable(density) else float(density)
    p_at = float(np.asarray(p_at).reshape(-1)[0])
    return float(w(point)[0] * p_at * (-cprime))


def weight_local_curvature(theta_sharp, pop, nuis: NuisanceSet, t_grid=None,
                           density=None, w0: WeightFn = None, step=None,
                           support_range=2.0, winsor_q=0.75):
    """Search the interpolation family w_t prop. to (1-t) w0 + t, rescaling each
    member so the value curvature at theta_sharp equals -1, and return the
    member (and t) minimizing the objective. Ties break toward larger t.
    Within the comparison objective the estimated variance-ratio integrand is
    winsorized at the winsor_q quantile so that the family ranking is not
    driven by a handful of extreme propensity estimates.

    theta_sharp may be a scalar or a callable t -> threshold (per-t initial
    estimates). density is the covariate density used in the curvature
    formula; defaults to Unif[-1, 1].
    """
    if t_grid is None:
        t_grid = np.linspace(0.0, 1.0, 101)
    if density is None:
        density = lambda x: np.full(x.shape[0], 0.5)
    if w0 is None:
        w0 = weight_retargeting(pop, nuis)
    X, mass = pop_points(pop)
    # Omega(w_t, rho*) = E[w_t^2 g]: quadratic in t given g and w0 on the
    # support, so the grid search costs one nuisance evaluation total.
    g = omega_integrand_parts(nuis, X).g
    if winsor_q is not None:
        g = np.minimum(g, np.quantile(g, winsor_q))
    w0v = w0(X)
    moments = (float(np.dot(mass, w0v**2 * g)),
               float(np.dot(mass, w0v * g)),
               float(np.dot(mass, g)))
    candidates = []
    skipped = 0
    tg = np.asarray(t_grid, dtype=float)
    for t in tg:
        base = WeightFn(lambda x, _t=t, _w0=w0: (1.0 - _t) * _w0(x) + _t)
        theta = theta_sharp(t, base) if callable(theta_sharp) else theta_sharp
        vpp = curvature_vpp_threshold(theta, base, density, nuis,
                                      step=step, support_range=support_range)
        if abs(vpp) < 1e-12:
            warnings.warn(f"degenerate curvature at t={t:.3f}; skipped")
            skipped += 1
            continue
        scale = -1.0 / vpp
        if scale < 0:
            warnings.warn(f"convex value surface at t={t:.3f}; skipped")
            skipped += 1
            continue
        om = scale**2 * ((1 - t) ** 2 * moments[0]
                         + 2 * t * (1 - t) * moments[1] + t**2 * moments[2])
        if t in (tg[0], tg[-1]):
            vals = scale**2 * ((1 - t) * w0v + t) ** 2 * g
            se = float(np.sqrt((mass**2 * (vals - om) ** 2).sum()))
        else:
            se = None
        candidates.append((om, float(t), se,
                           WeightFn(lambda x, _b=base, _k=scale: _k * _b(x))))
    if not candidates:
        raise CurvatureDegenerateError(f"curvature degenerate at all {skipped} grid points")
    om_min = min(om for om, _, _, _ in candidates)
    # one-standard-error rule toward the anchors of the family (retargeting
    # at t=0, uniform at t=1): the objective is a heavy-tailed sample mean,
    # so an anchor within one SE of the minimum is preferred over an
    # interior minimizer
    anchors = [c for c in candidates
               if c[2] is not None and c[0] <= om_min + c[2] + 1e-12 * abs(om_min)]
    if anchors:
        om_best, t_best, _, w_best = min(anchors, key=lambda c: c[0])
    else:
        # ties break toward larger t
        _, t_best, _, w_best = max((c for c in candidates if c[0] <= om_min),
                                   key=lambda c: c[1])
    return w_best, t_best


def regret_bound_esssup(w: WeightFn, w_star: WeightFn, regret_w: float, pop) -> float:
    """Upper bound on the testing regret: (sup of w*/w over the support) times
    the w-weighted regret. Returns +inf (with a warning) if w vanishes where
    w* does not."""
    X, mass = pop_points(pop)
    keep = mass > 0
    wv, sv = w(X)[keep], w_star(X)[keep]
    if ((wv == 0) & (sv > 0)).any():
        warnings.warn("weight vanishes where the testing weight is positive; bound is infinite")
        return float("inf")
    ratio = np.where(sv > 0, sv / np.where(wv > 0, wv, 1.0), 0.0)
    return float(ratio.max() * regret_w)


def regret_ratio_firstorder(theta, theta_sharp, w: WeightFn, w_star: WeightFn,
                            density=None, nuis: NuisanceSet = None) -> float:
    """Leading term of the testing-to-weighted regret ratio for threshold
    classes: w*(theta_sharp) / w(theta_sharp)."""
    point = np.array([[theta_sharp]])
    denom = float(w(point)[0])
    if denom == 0:
        raise CurvatureDegenerateError("weight vanishes at the optimal threshold")
    return float(w_star(point)[0]) / denom


@dataclass
class CurvatureReport:
    theta_sharp: float
    vpp: dict
    regret_ratio_estimate: float
    esssup_bound: float


def curvature_report(theta_sharp, w: WeightFn, w_star: WeightFn, density, nuis,
                     pop, regret_w=1.0, support_range=2.0) -> CurvatureReport:
    vpp = {
        "w": curvature_vpp_threshold(theta_sharp, w, density, nuis, support_range=support_range),
        "w_star": curvature_vpp_threshold(theta_sharp, w_star, density, nuis,
                                          support_range=support_range),
    }
    for key, val in vpp.items():
        if val > 0:
            warnings.warn(f"positive curvature for {key}: value surface is not concave")
    return CurvatureReport(
        theta_sharp=theta_sharp,
        vpp=vpp,
        regret_ratio_estimate=regret_ratio_firstorder(theta_sharp, theta_sharp, w, w_star),
        esssup_bound=regret_bound_esssup(w, w_star, regret_w, pop),
    )
