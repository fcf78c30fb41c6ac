"""Simulation studies at desk scale: scenario data-generating processes,
replication runners for the weight-comparison table and the estimator-MSE
table, and CSV/Markdown emission.

Desk-scale defaults trade replication budget for minutes-scale runtime:
the weight table runs n_train=500 with 200 replications and 20k test draws;
the estimator table runs 200 replications.
"""

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import norm

from .estimators import (
    centered_value_plugin,
    crossfit_nuisances,
    fit_boosted_stumps,
    fit_cate_signal,
    value_aipw,
    value_eff,
    value_ipw,
    value_onlyx,
)
from .model import LabeledDataset, NuisanceSet, Policy, as_matrix
from .policylearn import crossfit_learn, regret_eval

SCENARIOS = ("threshold1", "threshold2", "threshold3", "threshold4", "gauss_noshift", "gauss_shift")
STUMP_SETTINGS = dict(trees=500, depth=2, shrinkage=0.05, min_leaf=20)
GAUSS_SHIFT = (0.734, 1.469)
THETA_SHARP = {"threshold1": 0.5, "threshold2": 0.5, "threshold3": 0.0, "threshold4": 0.3}


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    n_train: int = 500
    n_calib: int = 0
    n_test: int = 20000
    replications: int = 200
    seed: int = 0
    nuisance_mode: str = "fitted"  # or "true"

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise ValueError(f"unknown scenario: {self.name}")
        if self.replications < 1:
            raise ValueError("need at least one replication")
        if self.nuisance_mode not in ("true", "fitted"):
            raise ValueError("nuisance_mode must be 'true' or 'fitted'")
        if self.nuisance_mode == "fitted" and self.n_train < 100:
            raise ValueError("fitted mode needs n_train >= 100")


# ---------------------------------------------------------------------------
# scenario formulas (immutable)


def _threshold_funcs(name):
    if name in ("threshold1", "threshold2"):
        f1 = lambda x: x + (x - 0.5) * (x > 0)
    elif name == "threshold3":
        f1 = lambda x: 2.0 * x
    else:
        f1 = lambda x: x + (x - 0.3) * (x > -0.4)
    f_1 = lambda x: x
    if name == "threshold1":
        sig2 = lambda x: np.ones_like(x)
        phi = lambda x: np.where(x <= 0, 0.5, norm.cdf(3.5 * x))
    elif name == "threshold2":
        sig2 = lambda x: np.where(x <= 0, 0.01, 1.0)
        phi = lambda x: np.full_like(x, 0.5)
    elif name == "threshold3":
        sig2 = lambda x: np.ones_like(x)
        phi = lambda x: norm.cdf(3.5 * x)
    else:
        sig2 = lambda x: np.ones_like(x)
        phi = lambda x: np.where(x <= -0.4, 0.5, norm.cdf(2.5 * x))
    return f1, f_1, sig2, phi


def true_nuisances(name) -> NuisanceSet:
    f1, f_1, sig2, phi = _threshold_funcs(name)
    return NuisanceSet(
        mu=lambda a, x: f1(as_matrix(x)[:, 0]) if a == 1 else f_1(as_matrix(x)[:, 0]),
        phi=lambda a, x, s=None: (phi(as_matrix(x)[:, 0]) if a == 1
                                  else 1.0 - phi(as_matrix(x)[:, 0])),
        sigma2=lambda a, x: sig2(as_matrix(x)[:, 0]),
        cate=lambda x: f1(as_matrix(x)[:, 0]) - f_1(as_matrix(x)[:, 0]),
    )


def fit_nuisances_stumps(rows: LabeledDataset, phi_clip=0.02, **settings) -> NuisanceSet:
    """Boosted-stump nuisance fits for the scalar-covariate scenarios."""
    params = {**STUMP_SETTINGS, **settings}
    X = rows.covariates
    fits = {a: fit_boosted_stumps(X[rows.actions == a], rows.outcomes[rows.actions == a],
                                  **params) for a in (-1, 1)}
    phi_fit = fit_boosted_stumps(X, (rows.actions == 1).astype(float), **params)

    def mu(a, x):
        return fits[a].predict(x)

    # difference-based variance targets: within each arm, order by the first
    # covariate and use squared successive differences / 2, which are
    # unbiased for sigma^2 regardless of how well mu fits
    dx, dt = [], []
    for a in (-1, 1):
        m = rows.actions == a
        order = np.argsort(X[m, 0], kind="stable")
        xs, ys = X[m][order], rows.outcomes[m][order]
        if xs.shape[0] >= 2:
            dx.append(0.5 * (xs[1:] + xs[:-1]))
            dt.append(0.5 * (ys[1:] - ys[:-1]) ** 2)
    sig_fit = fit_boosted_stumps(np.vstack(dx), np.concatenate(dt), **params)
    return NuisanceSet(
        mu=mu,
        phi=lambda a, x, s=None: (np.clip(phi_fit.predict(x), phi_clip, 1 - phi_clip) if a == 1
                                  else 1.0 - np.clip(phi_fit.predict(x), phi_clip, 1 - phi_clip)),
        sigma2=lambda a, x: np.clip(sig_fit.predict(x), 1e-6, None),
        cate=lambda x: mu(1, x) - mu(-1, x),
    )


def gauss_cate(X):
    X = as_matrix(X)
    return X[:, 1] - (X[:, 0] ** 3 - 2.0 * X[:, 0])


def gauss_m0(X):
    X = as_matrix(X)
    return 1.0 + X.mean(axis=1)


def gauss_mu(a, X):
    return gauss_m0(X) + 0.5 * a * gauss_cate(X)


def gauss_policy() -> Policy:
    def prob(a, x):
        treat = (gauss_cate(x) > 0).astype(float)
        return treat if a == 1 else 1.0 - treat
    return Policy(prob)


def gauss_phi(a, x, s=None):
    # binary action assigned uniformly at random in both sites
    return np.full(as_matrix(x).shape[0], 0.5)


def _rng(spec: ScenarioSpec, replication, stream=0):
    return np.random.default_rng([spec.seed, replication, stream])


def generate(spec: ScenarioSpec, replication):
    """Draw one replication. Returns (dataset, test_covariates); the test
    sample is empty unless n_test > 0 and the scenario is a threshold one."""
    rng = _rng(spec, replication)
    if spec.name.startswith("threshold"):
        f1, f_1, sig2, phi = _threshold_funcs(spec.name)
        x = rng.uniform(-1, 1, spec.n_train)
        a = np.where(rng.uniform(size=spec.n_train) < phi(x), 1, -1)
        fa = np.where(a == 1, f1(x), f_1(x))
        y = fa + rng.normal(size=spec.n_train) * np.sqrt(sig2(x))
        data = LabeledDataset(x.reshape(-1, 1), a, y)
        test = _rng(spec, replication, stream=1).uniform(-1, 1, spec.n_test).reshape(-1, 1)
        return data, test
    # Shift-evaluation process: 10-dimensional Gaussian covariates, uniform binary action
    p = 10
    n1, n0 = spec.n_train, spec.n_calib
    gamma = np.zeros(p)
    if spec.name == "gauss_shift":
        gamma[:2] = GAUSS_SHIFT
    X1 = rng.standard_normal((n1, p))
    X0 = rng.standard_normal((n0, p)) + gamma
    X = np.vstack([X1, X0])
    a = np.where(rng.uniform(size=n1 + n0) < 0.5, 1, -1)
    y = np.where(a == 1, gauss_mu(1, X), gauss_mu(-1, X)) + rng.standard_normal(n1 + n0)
    site = np.concatenate([np.ones(n1, dtype=int), np.zeros(n0, dtype=int)])
    data = LabeledDataset(X, a, y, site)
    return data, np.empty((0, p))


def gauss_truth(shift, n_draws=10**6, seed=12345, centered=False):
    """Monte Carlo testing value of the sign-of-effect policy under the
    Gaussian evaluation process, from the closed-form outcome regression."""
    rng = np.random.default_rng(seed)
    p = 10
    gamma = np.zeros(p)
    if shift:
        gamma[:2] = GAUSS_SHIFT
    X = rng.standard_normal((n_draws, p)) + gamma
    if centered:
        return float(np.abs(gauss_cate(X)).mean())
    return float((gauss_m0(X) + 0.5 * np.abs(gauss_cate(X))).mean())


# ---------------------------------------------------------------------------
# table runners

TABLE1_RECIPES = ("retarget", "uniform", "local_oracle", "local_cf", "global_cf")


def _theta_sharp(name):
    return THETA_SHARP[name]


def run_table1(specs, recipes=TABLE1_RECIPES, out_path=None):
    """Weight-recipe comparison: per scenario and recipe, the mean and SD of
    the threshold error and of the testing regret, plus interpolation-t
    selections for the local-curvature recipes."""
    results = {}
    for spec in specs:
        name = spec.name
        if not name.startswith("threshold"):
            raise ValueError("table 1 scenarios are the threshold ones")
        theta_sharp = _theta_sharp(name)
        density = lambda x: np.full(x.shape[0], 0.5)
        if spec.nuisance_mode == "true":
            fitter_raw = lambda rows, _n=name: true_nuisances(_n)
        else:
            fitter_raw = fit_nuisances_stumps
        per_recipe = {r: {"bias": [], "regret": [], "t": [], "failed": 0} for r in recipes}
        eval_grid = np.linspace(-1, 1, 401)
        for rep in range(spec.replications):
            data, test_x = generate(spec, rep)
            # all recipes see the same folds, so nuisance fits are shared
            cache = {}

            def fitter(rows, _cache=cache, _fit=fitter_raw):
                key = rows.covariates.tobytes()
                if key not in _cache:
                    _cache[key] = _fit(rows)
                return _cache[key]

            for recipe in recipes:
                kwargs = dict(seed=spec.seed + rep, density=density)
                try:
                    if recipe == "local_oracle":
                        res = crossfit_learn(data, "local_curvature", fitter,
                                             oracle_theta=theta_sharp, **kwargs)
                    elif recipe == "local_cf":
                        res = crossfit_learn(data, "local_curvature", fitter, **kwargs)
                    elif recipe == "global_cf":
                        res = crossfit_learn(data, "global_curvature", fitter, **kwargs)
                    else:
                        res = crossfit_learn(data, recipe, fitter, **kwargs)
                except Exception:
                    per_recipe[recipe]["failed"] += 1
                    continue
                cell = per_recipe[recipe]
                cell["bias"].append(res.policy.theta - theta_sharp)
                cell["regret"].append(regret_eval(res.policy, test_x,
                                                  true_nuisances(name).mu,
                                                  theta_grid=eval_grid))
                if res.t_selected:
                    cell["t"].extend(v for v in res.t_selected.values() if v is not None)
        results[name] = {
            recipe: {
                "bias_mean": float(np.mean(cell["bias"])) if cell["bias"] else float("nan"),
                "bias_sd": float(np.std(cell["bias"])) if cell["bias"] else float("nan"),
                "regret_mean": float(np.mean(cell["regret"])) if cell["regret"] else float("nan"),
                "regret_sd": float(np.std(cell["regret"])) if cell["regret"] else float("nan"),
                "t_frac_0": _t_frac(cell["t"], 0.0),
                "t_frac_1": _t_frac(cell["t"], 1.0),
                "failed": cell["failed"],
            }
            for recipe, cell in per_recipe.items()
        }
    if out_path:
        _emit_table1(results, out_path)
    return results


def _t_frac(ts, target):
    if not ts:
        return float("nan")
    return float(np.mean([abs(t - target) < 1e-9 for t in ts]))


def run_table2(n_calib_list, shift, estimators=("ipw", "aipw", "onlyx", "eff",
                                                "forest", "onlyx_centered"),
               replications=200, n_train=1000, seed=0, out_path=None,
               sieve_degrees=(1, 2, 3)):
    """Estimator MSE comparison on the Gaussian evaluation process, against
    Monte Carlo truth.
    The true propensity (0.5) is used throughout; mu comes from cross-fitted
    sieve fits and the selection model from logistic regression."""
    pi = gauss_policy()
    truth_v = gauss_truth(shift)
    truth_r = gauss_truth(shift, centered=True)
    name = "gauss_shift" if shift else "gauss_noshift"
    results = {}
    for n_calib in n_calib_list:
        spec = ScenarioSpec(name, n_train=n_train, n_calib=n_calib,
                            replications=replications, seed=seed)
        errs = {tag: [] for tag in estimators}
        for rep in range(replications):
            data, _ = generate(spec, rep)
            nuis = crossfit_nuisances(data, folds=2, seed=spec.seed + rep,
                                      degrees=sieve_degrees, phi=gauss_phi)
            calib = data.rows(data.site == 0)
            for tag in estimators:
                if tag == "ipw":
                    est = value_ipw(pi, data, gauss_phi).point - truth_v
                elif tag == "aipw":
                    est = value_aipw(pi, data, gauss_phi, nuis.mu).point - truth_v
                elif tag == "eff":
                    est = value_eff(pi, data, nuis).point - truth_v
                elif tag == "onlyx":
                    est = value_onlyx(pi, data, nuis).point - truth_v
                elif tag == "forest":
                    cate_hat = fit_cate_signal(data, gauss_phi, **STUMP_SETTINGS)
                    est = centered_value_plugin(pi, calib.covariates,
                                                cate_hat.predict).point - truth_r
                elif tag == "onlyx_centered":
                    est = value_onlyx(pi, data, nuis, centered=True).point - truth_r
                else:
                    raise ValueError(f"unknown estimator tag: {tag}")
                errs[tag].append(est)
        results[n_calib] = {
            tag: {
                "mse": float(np.mean(np.square(e))),
                "bias_sq": float(np.mean(e) ** 2),
                "errors": [float(x) for x in e],
            }
            for tag, e in errs.items()
        }
    if out_path:
        _emit_table2(results, shift, out_path)
    return results


# ---------------------------------------------------------------------------
# output


def _emit_table1(results, path):
    lines_csv = ["scenario,recipe,bias_mean,bias_sd,regret_mean,regret_sd,t_frac_0,t_frac_1,failed"]
    md = ["| scenario | recipe | bias (sd) | regret (sd) |", "| --- | --- | --- | --- |"]
    for name in sorted(results):
        for recipe, cell in results[name].items():
            lines_csv.append(
                f"{name},{recipe},{cell['bias_mean']:.6f},{cell['bias_sd']:.6f},"
                f"{cell['regret_mean']:.6f},{cell['regret_sd']:.6f},"
                f"{cell['t_frac_0']},{cell['t_frac_1']},{cell['failed']}")
            md.append(f"| {name} | {recipe} | {cell['bias_mean']:.3f} ({cell['bias_sd']:.3f}) "
                      f"| {cell['regret_mean']:.3f} ({cell['regret_sd']:.3f}) |")
    with open(path, "w") as fh:
        fh.write("\n".join(lines_csv) + "\n")
    with open(str(path) + ".md", "w") as fh:
        fh.write("\n".join(md) + "\n")


def _emit_table2(results, shift, path):
    tags = list(next(iter(results.values())).keys())
    lines_csv = ["n_calib," + ",".join(tags)]
    md = ["| n_calib | " + " | ".join(tags) + " |",
          "| --- |" + " --- |" * len(tags)]
    for n_calib in sorted(results):
        row = results[n_calib]
        lines_csv.append(f"{n_calib}," + ",".join(f"{row[t]['mse']:.6f}" for t in tags))
        md.append(f"| {n_calib} | " + " | ".join(f"{row[t]['mse']:.3f}" for t in tags) + " |")
    with open(path, "w") as fh:
        fh.write("\n".join(lines_csv) + "\n")
    with open(str(path) + ".md", "w") as fh:
        fh.write("\n".join(md) + "\n")


def load_config(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
