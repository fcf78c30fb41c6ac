"""Threshold-policy learning: weighted efficient value estimation, grid
search, the two-fold cross-fitted weight/policy scheme, and regret
evaluation on fresh test samples."""

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import (
    LabeledDataset,
    NuisanceSet,
    Policy,
    ThresholdPolicy,
    WeightFn,
    as_matrix,
    uniform_weight,
)
from .retarget import (
    PositivityError,
    cate_fn,
    weight_global_curvature,
    weight_local_curvature,
    weight_retargeting,
)

WEIGHT_RECIPES = ("uniform", "retarget", "local_curvature", "global_curvature")
SCAN_TRIM = 0.05  # inverse-propensity trim inside value estimation


@dataclass(frozen=True)
class CrossfitPlan:
    """Reproducible two-fold split of the sample rows."""

    fold_of_row: np.ndarray
    seed: int

    @classmethod
    def make(cls, n, seed):
        rng = np.random.default_rng(seed)
        perm = rng.permutation(n)
        fold = np.where(np.argsort(perm) < n // 2, 1, 2)
        if (fold == 1).sum() == 0 or (fold == 2).sum() == 0:
            raise ValueError("both folds must be nonempty")
        return cls(fold_of_row=fold, seed=seed)


def _unweighted_parts(rows: LabeledDataset, nuis: NuisanceSet):
    """Weight-free decomposition of the AIPW value for threshold rules:
    value(theta; w) = mean(w(X) * (base + inc * 1{x1 > theta}))."""
    nuis.require("mu", "phi")
    X = rows.covariates
    n = rows.n
    mu_m = np.asarray(nuis.mu(-1, X), dtype=float).reshape(n)
    mu_p = np.asarray(nuis.mu(1, X), dtype=float).reshape(n)
    phi_p = np.asarray(nuis.phi_at(1, X), dtype=float).reshape(n)
    if not np.isfinite(phi_p).all():
        raise PositivityError("propensity evaluated to a non-finite value")
    # trim inverse propensities at the estimation stage (the weights are
    # built from the untrimmed fit)
    phi_p = np.clip(phi_p, SCAN_TRIM, 1 - SCAN_TRIM)
    mu_own = np.where(rows.actions == 1, mu_p, mu_m)
    resid = rows.outcomes - mu_own
    inv_p = np.where(rows.actions == 1, 1.0 / phi_p, 0.0)
    inv_m = np.where(rows.actions == -1, 1.0 / (1.0 - phi_p), 0.0)
    base = mu_m + resid * inv_m
    inc = mu_p - mu_m + resid * (inv_p - inv_m)
    return base, inc


def _value_parts(pi_free, w: WeightFn, rows: LabeledDataset, nuis: NuisanceSet):
    """Per-row decomposition of the weighted AIPW value for threshold rules:
    value(theta) = mean(base) + mean(inc * 1{x1 > theta})."""
    base, inc = _unweighted_parts(rows, nuis)
    wv = w(rows.covariates)
    return wv * base, wv * inc


def weighted_value_estimate(pi: Policy, w: WeightFn, rows: LabeledDataset,
                            nuis: NuisanceSet) -> float:
    """Weighted AIPW value: mean of
    w(X) [ sum_a pi(a|X) mu(a,X) + pi(A|X)/phi(A|X) (Y - mu(A,X)) ]."""
    nuis.require("mu", "phi")
    X = rows.covariates
    n = rows.n
    mu_sum = sum(np.asarray(nuis.mu(a, X), dtype=float).reshape(n) * pi.prob(a, X)
                 for a in nuis.action_set)
    phi_own = np.empty(n)
    for a in nuis.action_set:
        m = rows.actions == a
        if m.any():
            phi_own[m] = np.asarray(nuis.phi_at(a, X[m]), dtype=float).reshape(int(m.sum()))
    if not np.isfinite(phi_own).all():
        raise PositivityError("propensity evaluated to a non-finite value")
    phi_own = np.clip(phi_own, SCAN_TRIM, 1 - SCAN_TRIM)
    mu_own = np.empty(n)
    for a in nuis.action_set:
        m = rows.actions == a
        if m.any():
            mu_own[m] = np.asarray(nuis.mu(a, X[m]), dtype=float).reshape(int(m.sum()))
    resid = rows.outcomes - mu_own
    vals = w(X) * (mu_sum + pi.prob_of(rows.actions, X) * resid / phi_own)
    return float(vals.mean())


def default_theta_grid(x1, lo=-1.0, hi=1.0):
    """Candidate thresholds: the sorted observed first coordinates plus the
    class endpoints (the empirical objective is piecewise constant between
    observed points)."""
    vals = np.unique(np.asarray(x1, dtype=float))
    return np.unique(np.concatenate([[min(lo, vals.min() - 1e-9)], vals,
                                     [max(hi, vals.max())]]))


def _scan(parts, theta_grid):
    """Sum of fold value curves over the grid from (base, inc, x1, n) parts."""
    total = np.zeros(len(theta_grid))
    for base, inc, x1, n in parts:
        order = np.argsort(x1, kind="stable")
        xs = x1[order]
        suffix = np.concatenate([np.cumsum(inc[order][::-1])[::-1], [0.0]])
        idx = np.searchsorted(xs, theta_grid, side="right")
        total += (base.sum() + suffix[idx]) / n
    return total


def learn_threshold(w: WeightFn, rows: LabeledDataset, nuis: NuisanceSet,
                    theta_grid=None) -> ThresholdPolicy:
    """Threshold maximizing the weighted AIPW value over the grid; ties break
    toward the smallest threshold."""
    if theta_grid is None:
        theta_grid = default_theta_grid(rows.covariates[:, 0])
    theta_grid = np.asarray(theta_grid, dtype=float)
    if theta_grid.size == 0:
        raise ValueError("empty threshold grid")
    base, inc = _value_parts(None, w, rows, nuis)
    values = _scan([(base, inc, rows.covariates[:, 0], rows.n)], theta_grid)
    return ThresholdPolicy(theta_grid[int(np.argmax(values))])


@dataclass
class LearnResult:
    policy: ThresholdPolicy
    t_selected: Optional[dict]  # per-fold interpolation parameter, if applicable
    plan: Optional[CrossfitPlan]


def _fold_weight(recipe, rows, nuis, theta_for_t, t_grid, density, w0=None):
    if recipe == "uniform":
        return uniform_weight(), None
    if recipe == "retarget":
        return weight_retargeting(rows.covariates, nuis), None
    if recipe == "global_curvature":
        return weight_global_curvature(rows.covariates, nuis), None
    if recipe == "local_curvature":
        w, t = weight_local_curvature(theta_for_t, rows.covariates, nuis,
                                      t_grid=t_grid, density=density, w0=w0)
        return w, t
    raise ValueError(f"unknown weight recipe: {recipe}")


def crossfit_learn(data: LabeledDataset, weight_recipe, nuisance_fitter,
                   theta_grid=None, seed=0, t_grid=None, density=None,
                   oracle_theta=None) -> LearnResult:
    """Two-fold cross-fitted learning. Per fold, nuisances and the fold
    weight are fit on that fold's data; for the local-curvature recipe the
    per-t initial threshold comes from the opposite fold. The final policy
    maximizes the sum of the two per-fold weighted-value estimates.

    With oracle_theta set (local-curvature only), the true threshold is used
    and no cross-fitting is performed."""
    if weight_recipe not in WEIGHT_RECIPES:
        raise ValueError(f"unknown weight recipe: {weight_recipe}")
    if data.n < 20:
        raise ValueError("need at least 20 rows for cross-fitting")
    if theta_grid is None:
        theta_grid = default_theta_grid(data.covariates[:, 0])
    theta_grid = np.asarray(theta_grid, dtype=float)

    if oracle_theta is not None:
        nuis = nuisance_fitter(data)
        w, t = _fold_weight("local_curvature", data, nuis, oracle_theta, t_grid, density)
        pol = learn_threshold(w, data, nuis, theta_grid)
        return LearnResult(pol, {"oracle": t}, None)

    plan = CrossfitPlan.make(data.n, seed)
    folds = {j: data.rows(plan.fold_of_row == j) for j in (1, 2)}
    nuis = {j: nuisance_fitter(folds[j]) for j in (1, 2)}

    theta_by_t = {}
    base_w0 = {}
    if weight_recipe == "local_curvature":
        tg = np.linspace(0.0, 1.0, 101) if t_grid is None else np.asarray(t_grid, dtype=float)
        for j in (1, 2):
            w0 = weight_retargeting(folds[j].covariates, nuis[j])
            base_w0[j] = w0
            # initial per-t thresholds: reuse the weight-free value parts so
            # the t grid costs one nuisance evaluation per fold
            b, inc = _unweighted_parts(folds[j], nuis[j])
            x1 = folds[j].covariates[:, 0]
            w0v = w0(folds[j].covariates)
            theta_by_t[j] = {}
            for t in tg:
                wv = (1 - t) * w0v + t
                vals = _scan([(wv * b, wv * inc, x1, folds[j].n)], theta_grid)
                theta_by_t[j][float(t)] = float(theta_grid[int(np.argmax(vals))])
    else:
        tg = t_grid

    parts = []
    t_sel = {} if weight_recipe == "local_curvature" else None
    for j, other in ((1, 2), (2, 1)):
        theta_for_t = (lambda t, base, _o=other: theta_by_t[_o][float(t)]) \
            if weight_recipe == "local_curvature" else None
        try:
            w_j, t_j = _fold_weight(weight_recipe, folds[j], nuis[j], theta_for_t,
                                    tg, density, w0=base_w0.get(j))
        except ValueError as err:
            warnings.warn(f"fold {j} weight degenerate ({err}); falling back to uniform")
            w_j, t_j = uniform_weight(), None
        if t_sel is not None:
            t_sel[j] = t_j
        base, inc = _value_parts(None, w_j, folds[j], nuis[j])
        parts.append((base, inc, folds[j].covariates[:, 0], folds[j].n))

    values = _scan(parts, theta_grid)
    pol = ThresholdPolicy(theta_grid[int(np.argmax(values))])
    return LearnResult(pol, t_sel, plan)


def value_surface(test_covariates, mu, theta_grid, w_star=None):
    """Exact-nuisance value V(theta; w*) on a test sample for every grid
    threshold, by sample means of w*(X) sum_a pi(a|X) mu(a, X)."""
    X = as_matrix(test_covariates)
    wv = np.ones(X.shape[0]) if w_star is None else w_star(X)
    mu_m = np.asarray(mu(-1, X), dtype=float).reshape(X.shape[0])
    mu_p = np.asarray(mu(1, X), dtype=float).reshape(X.shape[0])
    base = wv * mu_m
    inc = wv * (mu_p - mu_m)
    return _scan([(base, inc, X[:, 0], X.shape[0])], np.asarray(theta_grid, dtype=float))


def regret_eval(pi: ThresholdPolicy, test_covariates, mu, theta_grid=None,
                w_star=None) -> float:
    """Regret of pi against the best grid threshold, both values computed with
    the true outcome regression on a fresh test sample."""
    X = as_matrix(test_covariates)
    if theta_grid is None:
        theta_grid = default_theta_grid(X[:, 0])
    grid = np.unique(np.concatenate([np.asarray(theta_grid, dtype=float), [pi.theta]]))
    values = value_surface(X, mu, grid, w_star)
    own = values[int(np.searchsorted(grid, pi.theta))]
    return float(values.max() - own)
