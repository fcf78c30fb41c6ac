"""Value estimators under covariate shift, plus the regression learners
(sieve polynomials, boosted stumps, logistic selection model) used to fit
their nuisance functions.

Estimator conventions: `if_variance` is the squared standard error (the
empirical variance of the influence function divided by the sample size it
is averaged over). The plug-in centered-value estimator is not
asymptotically linear and carries no variance.
"""

from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Callable, Optional

import numpy as np
from sklearn.linear_model import LogisticRegression

from . import _accel
from .model import ConfigurationError, LabeledDataset, Policy, WeightFn, as_matrix

PROPENSITY_CLIP = (0.01, 0.99)
W_STAR_CLIP = (0.01, 100.0)


class CannotIdentifyError(ValueError):
    pass


class MissingDataError(ValueError):
    pass


class NotApplicableError(ValueError):
    pass


@dataclass
class ValueEstimate:
    point: float
    if_variance: Optional[float]
    n_used: int
    estimator_tag: str
    clipped_fraction: float = 0.0

    def __post_init__(self):
        if self.if_variance is not None and self.if_variance < 0:
            raise ValueError("if_variance must be nonnegative")
        if self.n_used <= 0:
            raise ValueError("n_used must be positive")


@dataclass
class FittedRegression:
    predict: Callable[[np.ndarray], np.ndarray]
    family: str
    selected_complexity: int


# ---------------------------------------------------------------------------
# regression learners


def _poly_design(X, degree):
    X = as_matrix(X)
    cols = [np.ones(X.shape[0])]
    for d in range(1, degree + 1):
        for combo in combinations_with_replacement(range(X.shape[1]), d):
            cols.append(np.prod(X[:, combo], axis=1))
    return np.column_stack(cols)


def _lstsq_ridge(design, y):
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < design.shape[1]:
        gram = design.T @ design + 1e-8 * np.eye(design.shape[1])
        coef = np.linalg.solve(gram, design.T @ y)
    return coef


def fit_sieve(features, targets, degrees=(1, 2, 3, 5), folds=5, seed=0) -> FittedRegression:
    """Polynomial series regression with the truncation degree selected by
    k-fold cross-validation. Falls back to a small ridge penalty when the
    design is rank deficient."""
    X = as_matrix(features)
    y = np.asarray(targets, dtype=float).reshape(X.shape[0])
    n = X.shape[0]
    if n < folds:
        raise ValueError(f"need at least {folds} rows for {folds}-fold selection")
    rng = np.random.default_rng(seed)
    fold_of = rng.permutation(n) % folds
    cv_err = []
    for degree in degrees:
        err = 0.0
        for k in range(folds):
            tr = fold_of != k
            design = _poly_design(X[tr], degree)
            coef = _lstsq_ridge(design, y[tr])
            pred = _poly_design(X[~tr], degree) @ coef
            err += float(((y[~tr] - pred) ** 2).sum())
        cv_err.append(err / n)
    degree = int(degrees[int(np.argmin(cv_err))])
    coef = _lstsq_ridge(_poly_design(X, degree), y)
    return FittedRegression(
        predict=lambda x, _c=coef, _d=degree: _poly_design(x, _d) @ _c,
        family="sieve_poly",
        selected_complexity=degree,
    )


def fit_boosted_stumps(features, targets, trees=500, depth=2, shrinkage=0.05,
                       min_leaf=5) -> FittedRegression:
    """Stagewise least-squares boosting with depth-limited regression trees."""
    X = np.ascontiguousarray(as_matrix(features))
    y = np.ascontiguousarray(np.asarray(targets, dtype=float).reshape(X.shape[0]))
    if X.shape[0] < 10:
        raise ValueError("need at least 10 rows")
    base, feat, thresh, value = _accel.fit_forest(X, y, trees, depth, shrinkage, min_leaf)
    return FittedRegression(
        predict=lambda x: _accel.predict_forest(
            np.ascontiguousarray(as_matrix(x)), base, feat, thresh, value, shrinkage),
        family="boosted_stumps",
        selected_complexity=trees,
    )


def fit_logistic(features, labels) -> FittedRegression:
    """Logistic regression for P(label=1 | x), predictions clipped away from
    0 and 1."""
    X = as_matrix(features)
    y = np.asarray(labels, dtype=int).reshape(X.shape[0])
    if len(np.unique(y)) < 2:
        const = float(np.clip(y.mean(), *PROPENSITY_CLIP))
        return FittedRegression(
            predict=lambda x: np.full(as_matrix(x).shape[0], const),
            family="logistic", selected_complexity=0)
    model = LogisticRegression(penalty=None, max_iter=1000)
    model.fit(X, y)
    return FittedRegression(
        predict=lambda x: np.clip(model.predict_proba(as_matrix(x))[:, 1], *PROPENSITY_CLIP),
        family="logistic",
        selected_complexity=X.shape[1],
    )


def fit_density_ratio(data: LabeledDataset):
    """Density ratio of calibration to training covariates:
    w*(x) = P(S=1) P(S=0|x) / [P(S=0) P(S=1|x)], with the marginals
    estimated empirically and the conditional by logistic regression."""
    s = data.site
    if len(np.unique(s)) < 2:
        raise CannotIdentifyError("both site values are required to identify the density ratio")
    p1 = float((s == 1).mean())
    sel = fit_logistic(data.covariates, s)

    def w_star(x):
        ps1 = sel.predict(x)
        return np.clip(p1 * (1.0 - ps1) / ((1.0 - p1) * ps1), *W_STAR_CLIP)

    return WeightFn(w_star, normalization="unnormalized"), sel.predict, p1


def fit_cate_signal(data: LabeledDataset, phi, **stump_params) -> FittedRegression:
    """Fit C(x) by boosted stumps on the unbiased signal A*Y/phi(A|X).

    Substitute for a causal forest; retains the plug-in estimator's
    bias-dominated behavior without a forest implementation."""
    rows = data.rows(data.observed & (data.site == 1))
    phi_own, _ = _phi_own(phi, rows, s=1)
    signal = rows.actions * rows.outcomes / phi_own
    return fit_boosted_stumps(rows.covariates, signal, **stump_params)


# ---------------------------------------------------------------------------
# value estimators


def _phi_own(phi, rows, s):
    out = np.empty(rows.n)
    X = rows.covariates
    for a in (-1, 1):
        m = rows.actions == a
        if m.any():
            try:
                vals = phi(a, X[m], s)
            except TypeError:
                vals = phi(a, X[m])
            out[m] = np.asarray(vals, dtype=float).reshape(int(m.sum()))
    frac = float(((out < PROPENSITY_CLIP[0]) | (out > PROPENSITY_CLIP[1])).mean())
    return np.clip(out, *PROPENSITY_CLIP), frac


def _calib_rows(data: LabeledDataset):
    usable = (data.site == 0) & data.observed
    if not usable.any():
        raise MissingDataError("no calibration rows with observed (A, Y)")
    return data.rows(usable)


def value_ipw(pi: Policy, data: LabeledDataset, phi_hat) -> ValueEstimate:
    """Inverse-probability-weighted value over the calibration sample:
    mean of pi(A|X) Y / phi(A|X, S=0)."""
    calib = _calib_rows(data)
    phi_own, clip_frac = _phi_own(phi_hat, calib, s=0)
    terms = pi.prob_of(calib.actions, calib.covariates) * calib.outcomes / phi_own
    point = float(terms.mean())
    return ValueEstimate(point, float(terms.var() / calib.n), calib.n, "ipw", clip_frac)


def _aipw_terms(pi, calib, phi_hat, mu_hat):
    phi_own, clip_frac = _phi_own(phi_hat, calib, s=0)
    pi_own = pi.prob_of(calib.actions, calib.covariates)
    mu_own = _mu_of_own_action(mu_hat, calib)
    mu_sum = sum(np.asarray(mu_hat(a, calib.covariates), dtype=float).reshape(calib.n)
                 * pi.prob(a, calib.covariates) for a in (-1, 1))
    terms = pi_own / phi_own * (calib.outcomes - mu_own) + mu_sum
    return terms, clip_frac


def _mu_of_own_action(mu_hat, rows):
    out = np.zeros(rows.n)
    for a in (-1, 1):
        m = rows.actions == a
        if m.any():
            out[m] = np.asarray(mu_hat(a, rows.covariates[m]), dtype=float).reshape(int(m.sum()))
    return out


def value_aipw(pi: Policy, data: LabeledDataset, phi_hat, mu_hat) -> ValueEstimate:
    """Augmented IPW value: IPW plus the outcome-regression augmentation,
    averaged over the calibration sample."""
    calib = _calib_rows(data)
    terms, clip_frac = _aipw_terms(pi, calib, phi_hat, mu_hat)
    return ValueEstimate(float(terms.mean()), float(terms.var() / calib.n),
                         calib.n, "aipw", clip_frac)


def _eff_if(pi: Policy, data: LabeledDataset, mu_hat, phi_hat, sel_hat, w_star_hat):
    """Per-row influence-function contributions of the efficient estimator
    (before centering); their mean is the point estimate."""
    calib = data.rows(data.site == 0)
    if not calib.observed.all() or calib.n == 0:
        raise NotApplicableError("efficient estimator needs (A, Y) in the calibration sample")
    n = data.n
    X = data.covariates
    sel = np.asarray(sel_hat(X), dtype=float).reshape(n)
    w_star = np.asarray(w_star_hat(X), dtype=float).reshape(n)
    phi0, f0 = _phi_own(phi_hat, data, s=0)
    phi1, f1 = _phi_own(phi_hat, data, s=1)
    tau = (1.0 - sel) / phi0 + sel * w_star / phi1
    mu_own = _mu_of_own_action(mu_hat, data)
    resid_term = pi.prob_of(data.actions, X) * tau * (data.outcomes - mu_own)
    mu_sum = sum(np.asarray(mu_hat(a, X), dtype=float).reshape(n) * pi.prob(a, X)
                 for a in (-1, 1))
    p0 = float((data.site == 0).mean())
    aug = (data.site == 0) / p0 * mu_sum
    return resid_term + aug, max(f0, f1)


def value_eff(pi: Policy, data: LabeledDataset, nuis, centered=False) -> ValueEstimate:
    """Estimator efficient under outcome-site independence given (A, X). Uses
    action-outcome data from both samples. With centered=True, returns the
    centered value (policy minus its complement)."""
    nuis.require("mu", "phi", "sel", "w_star")
    contrib, clip_frac = _eff_if(pi, data, nuis.mu, nuis.phi_at, nuis.sel, nuis.w_star)
    if centered:
        bar, _ = _eff_if(pi.complement(), data, nuis.mu, nuis.phi_at, nuis.sel, nuis.w_star)
        contrib = contrib - bar
    point = float(contrib.mean())
    iff = contrib - point
    return ValueEstimate(point, float((iff**2).mean() / data.n), data.n,
                         "eff", clip_frac)


def _onlyx_if(rho: Policy, data: LabeledDataset, mu_hat, phi_hat, w_star_hat):
    n = data.n
    X = data.covariates
    train = data.site == 1
    calib = data.site == 0
    if not calib.any():
        raise MissingDataError("no calibration rows")
    p1 = float(train.mean())
    p0 = 1.0 - p1
    w_star = np.asarray(w_star_hat(X), dtype=float).reshape(n)
    phi0, clip_frac = _phi_own(phi_hat, data.rows(train), s=0)
    resid = np.zeros(n)
    mu_own = _mu_of_own_action(mu_hat, data.rows(train))
    tr_rows = data.rows(train)
    resid_tr = (rho.prob_of(tr_rows.actions, tr_rows.covariates) / phi0
                * w_star[train] * (tr_rows.outcomes - mu_own))
    contrib = np.zeros(n)
    contrib[train] = resid_tr / p1
    mu_sum = sum(np.asarray(mu_hat(a, X), dtype=float).reshape(n) * rho.prob(a, X)
                 for a in (-1, 1))
    contrib[calib] += mu_sum[calib] / p0
    return contrib, clip_frac


def value_onlyx(rho: Policy, data: LabeledDataset, nuis, centered=False) -> ValueEstimate:
    """Estimator that uses only covariates from the calibration sample:
    density-ratio-weighted training residuals plus the calibration plug-in
    mean. Efficient when calibration (A, Y) are missing."""
    nuis.require("mu", "phi", "w_star")
    contrib, clip_frac = _onlyx_if(rho, data, nuis.mu, nuis.phi_at, nuis.w_star)
    if centered:
        bar, _ = _onlyx_if(rho.complement(), data, nuis.mu, nuis.phi_at, nuis.w_star)
        contrib = contrib - bar
    point = float(contrib.mean())
    iff = contrib - point
    return ValueEstimate(point, float((iff**2).mean() / data.n), data.n,
                         "onlyx", clip_frac)


def centered_value_plugin(pi: Policy, calib_covariates, cate_hat) -> ValueEstimate:
    """Plug-in centered value: mean over calibration covariates of
    (2 pi(1|X) - 1) C_hat(X). Not asymptotically linear; no variance."""
    X = as_matrix(calib_covariates)
    vals = (2.0 * pi.prob(1, X) - 1.0) * np.asarray(cate_hat(X), dtype=float).reshape(X.shape[0])
    return ValueEstimate(float(vals.mean()), None, X.shape[0], "plugin")


# ---------------------------------------------------------------------------
# cross-fitted nuisance pipeline


def _fit_mu(data: LabeledDataset, mu_source, degrees, seed):
    if mu_source == "train":
        rows = data.rows((data.site == 1) & data.observed)
    elif mu_source == "calib":
        rows = data.rows((data.site == 0) & data.observed)
    elif mu_source == "pooled":
        rows = data.rows(data.observed)
    else:
        raise ConfigurationError(f"unknown mu source: {mu_source}")
    if rows.n == 0:
        raise MissingDataError(f"no observed rows to fit mu from source '{mu_source}'")
    fits = {}
    for a in (-1, 1):
        m = rows.actions == a
        fits[a] = fit_sieve(rows.covariates[m], rows.outcomes[m], degrees=degrees, seed=seed)
    return lambda a, x: fits[a].predict(x)


def crossfit_nuisances(data: LabeledDataset, folds=2, seed=0, mu_source="train",
                       degrees=(1, 2, 3), phi=None):
    """Fit mu (sieve) and the selection model (logistic) out-of-fold and return
    row-indexed nuisance callables usable by the value estimators.

    Folds are stratified by site. `phi` supplies a known propensity; when
    None a logistic model is fit per site out-of-fold as well. With
    folds <= 1 the fits use the full sample (no cross-fitting)."""
    from .model import NuisanceSet

    n = data.n
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=int)
    for sval in (0, 1):
        idx = np.flatnonzero(data.site == sval)
        fold_of[idx] = rng.permutation(idx.size) % max(folds, 1)

    mu_mat = {a: np.empty(n) for a in (-1, 1)}
    sel_arr = np.empty(n)
    wst_arr = np.empty(n)
    phi_fit = {}
    p1 = float((data.site == 1).mean())
    for k in range(max(folds, 1)):
        mask = fold_of == k if folds > 1 else np.ones(n, dtype=bool)
        fit_rows = data.rows(~mask) if folds > 1 else data
        mu_k = _fit_mu(fit_rows, mu_source, degrees, seed)
        for a in (-1, 1):
            mu_mat[a][mask] = np.asarray(mu_k(a, data.covariates[mask])).reshape(int(mask.sum()))
        if len(np.unique(fit_rows.site)) >= 2:
            sel_k = fit_logistic(fit_rows.covariates, fit_rows.site)
            ps1 = sel_k.predict(data.covariates[mask])
            sel_arr[mask] = ps1
            wst_arr[mask] = np.clip(p1 * (1 - ps1) / ((1 - p1) * ps1), *W_STAR_CLIP)
        else:
            sel_arr[mask] = 1.0
            wst_arr[mask] = 1.0
        if phi is None:
            for sval in (0, 1):
                rows = fit_rows.rows((fit_rows.site == sval) & fit_rows.observed)
                if rows.n:
                    phi_fit[(k, sval)] = fit_logistic(rows.covariates, (rows.actions == 1))

    index = {np.ascontiguousarray(row).tobytes(): i for i, row in enumerate(data.covariates)}

    def _row_indices(x):
        x = as_matrix(x)
        try:
            return np.array([index[np.ascontiguousarray(row).tobytes()] for row in x])
        except KeyError:
            raise ValueError("cross-fitted nuisances are defined on the sample rows only")

    def _row_lookup(x, arr):
        return arr[_row_indices(x)]

    def mu(a, x):
        return _row_lookup(x, mu_mat[a])

    if phi is not None:
        phi_fn = phi
    else:
        def phi_fn(a, x, s=1):
            s = 1 if s is None else s
            x = as_matrix(x)
            idx = _row_indices(x)
            out = np.empty(x.shape[0])
            for k in range(max(folds, 1)):
                m = (fold_of[idx] == k) if folds > 1 else np.ones(x.shape[0], dtype=bool)
                if m.any():
                    p_treat = phi_fit[(k, s)].predict(x[m])
                    out[m] = p_treat if a == 1 else 1.0 - p_treat
            return out

    return NuisanceSet(
        mu=mu,
        phi=phi_fn,
        sel=lambda x: _row_lookup(x, sel_arr),
        w_star=lambda x: _row_lookup(x, wst_arr),
        cate=lambda x: mu(1, x) - mu(-1, x),
    )


def evaluate_value(data: LabeledDataset, pi: Policy, estimator: str, crossfit=2,
                   seed=0, mu_source="train", degrees=(1, 2, 3), phi=None,
                   cate_hat=None) -> ValueEstimate:
    """One-call pipeline: fit (cross-fitted) nuisances, then apply the named
    estimator. `phi` supplies a known propensity (a, x, s) -> prob."""
    if estimator == "plugin":
        if cate_hat is None:
            if phi is None:
                raise ConfigurationError("plugin needs either cate_hat or a known propensity")
            cate_hat = fit_cate_signal(data, phi).predict
        calib = data.rows(data.site == 0)
        return centered_value_plugin(pi, calib.covariates, cate_hat)
    nuis = crossfit_nuisances(data, folds=crossfit, seed=seed, mu_source=mu_source,
                              degrees=degrees, phi=phi)
    if estimator == "ipw":
        return value_ipw(pi, data, nuis.phi_at)
    if estimator == "aipw":
        return value_aipw(pi, data, nuis.phi_at, nuis.mu)
    if estimator == "eff":
        return value_eff(pi, data, nuis)
    if estimator == "onlyx":
        return value_onlyx(pi, data, nuis)
    raise ConfigurationError(f"unknown estimator: {estimator}")
