"""Command-line interface: weights, evaluate, dro, learn, simulate."""

import argparse
import json
import sys

import numpy as np

from . import dro, estimators, harness, policylearn, retarget
from .model import (
    DiscretizedDistribution,
    ThresholdPolicy,
    dataset_from_csv,
    empirical_distribution,
    uniform_weight,
)


def _load_policy(spec):
    if spec.startswith("theta="):
        return ThresholdPolicy(float(spec.split("=", 1)[1]))
    with open(spec) as fh:
        return ThresholdPolicy(json.load(fh)["theta"])


def _fitted_nuisances(data):
    rows = data.rows((data.site == 1) & data.observed)
    return harness.fit_nuisances_stumps(rows)


def _cmd_weights(args):
    data = dataset_from_csv(args.data)
    rows = data.rows((data.site == 1) & data.observed)
    nuis = _fitted_nuisances(data)
    X = rows.covariates
    x1 = X[:, 0]
    density = lambda x: np.full(x.shape[0], 1.0 / max(np.ptp(x1), 1e-12))
    if args.nu == "uniform":
        uniq = empirical_distribution(X).support
        nu = DiscretizedDistribution(uniq, np.full(uniq.shape[0], 1.0 / uniq.shape[0]))
    elif args.nu == "train":
        nu = None
    else:
        nu_data = dataset_from_csv(args.nu)
        nu = empirical_distribution(nu_data.covariates)
    if args.constraint == "l1":
        pop = empirical_distribution(X) if nu is not None else X
        w = retarget.weight_l1(nu, pop, nuis)
    elif args.constraint == "global":
        w = retarget.weight_global_curvature(X, nuis)
    else:
        if args.theta_sharp == "estimate":
            theta = policylearn.learn_threshold(uniform_weight(), rows, nuis).theta
        else:
            theta = float(args.theta_sharp)
        t_grid = np.linspace(0, 1, args.t_grid)
        w, t = retarget.weight_local_curvature(theta, X, nuis, t_grid=t_grid,
                                               density=density,
                                               support_range=float(np.ptp(x1)))
        print(f"# selected t = {t}", file=sys.stderr)
    out = args.out or sys.stdout
    wv = w(X)
    lines = ["x,w"] + [f"{float(x1[i])!r},{float(wv[i])!r}" for i in range(len(x1))]
    _write(out, "\n".join(lines) + "\n")


def _cmd_evaluate(args):
    data = dataset_from_csv(args.data)
    pi = _load_policy(args.policy)
    est = estimators.evaluate_value(data, pi, args.estimator, crossfit=args.crossfit,
                                    seed=args.seed, mu_source=args.mu_source)
    print(json.dumps({
        "point": est.point,
        "if_variance": est.if_variance,
        "n_used": est.n_used,
        "clipped_fraction": est.clipped_fraction,
    }))


def _cmd_dro(args):
    data = dataset_from_csv(args.data)
    k = float("inf") if args.k == "inf" else float(args.k)
    c_list = [float(c) for c in args.c.split(",")]
    source = data.rows(data.site == (1 if args.center == "train" else 0))
    train = data.rows((data.site == 1) & data.observed)
    phi = harness.fit_nuisances_stumps(train).phi_at
    cate_hat = estimators.fit_cate_signal(data, phi).predict
    x1 = source.covariates[:, 0]
    theta_grid = np.linspace(x1.min() - 1e-9, x1.max(), args.theta_grid)
    lines = ["c,theta_hat,worst_case_value"]
    for c in c_list:
        pol = dro.dro_learn_threshold(theta_grid, cate_hat, source.covariates, k, c)
        val, _ = dro.worst_case_centered_value(pol, cate_hat, source.covariates, k, c)
        lines.append(f"{c},{float(pol.theta)!r},{float(val)!r}")
    _write(args.out or sys.stdout, "\n".join(lines) + "\n")
    if args.emit_set:
        center = empirical_distribution(source.covariates)
        if center.support.shape[0] != 3:
            raise SystemExit("--emit-set needs a 3-point covariate support")
        rows = ["q1,q2,q3"]
        for q in uncertainty_set_boundary(center, k, max(c_list)):
            rows.append(",".join(repr(float(v)) for v in q))
        with open(args.emit_set, "w") as fh:
            fh.write("\n".join(rows) + "\n")


def uncertainty_set_boundary(center, k, c, n=360):
    """Points on the boundary of the L^k ball around a 3-point center,
    traced radially in the simplex plane."""
    p = center.mass
    # orthonormal basis of the simplex plane
    b1 = np.array([1.0, -1.0, 0.0]) / np.sqrt(2)
    b2 = np.array([1.0, 1.0, -2.0]) / np.sqrt(6)
    out = []
    for ang in np.linspace(0, 2 * np.pi, n, endpoint=False):
        d = np.cos(ang) * b1 + np.sin(ang) * b2

        def norm_at(r):
            q = p + r * d
            if (q < 0).any():
                return np.inf
            qd = DiscretizedDistribution(center.support, q / q.sum())
            return dro.lk_norm(qd, center, k)

        lo, hi = 0.0, 1.0
        while norm_at(hi) < c and hi < 10:
            hi *= 2
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if norm_at(mid) <= c:
                lo = mid
            else:
                hi = mid
        out.append(p + lo * d)
    return out


def _cmd_learn(args):
    if args.scenario:
        spec = harness.ScenarioSpec(args.scenario, seed=args.seed, replications=1)
        data, test_x = harness.generate(spec, 0)
        fitter = harness.fit_nuisances_stumps
        density = lambda x: np.full(x.shape[0], 0.5)
    else:
        data = dataset_from_csv(args.data)
        test_x = None
        fitter = harness.fit_nuisances_stumps
        x1 = data.covariates[:, 0]
        density = lambda x: np.full(x.shape[0], 1.0 / max(np.ptp(x1), 1e-12))
    recipe = {"retarget": "retarget", "uniform": "uniform",
              "local": "local_curvature", "global": "global_curvature"}[args.weight]
    res = policylearn.crossfit_learn(
        data, recipe, fitter, seed=args.seed, density=density,
        oracle_theta=args.oracle_theta)
    payload = {"theta_hat": res.policy.theta, "t_selected": res.t_selected}
    if args.scenario:
        payload["regret"] = policylearn.regret_eval(
            res.policy, test_x, harness.true_nuisances(args.scenario).mu,
            theta_grid=np.linspace(-1, 1, 401))
    print(json.dumps(payload))


def _cmd_simulate(args):
    cfg = harness.load_config(args.config) if args.config else {}
    reps = cfg.get("reps", args.reps)
    seed = cfg.get("seed", args.seed)
    if args.table == 1:
        names = [args.scenario] if args.scenario else [f"threshold{i}" for i in (1, 2, 3, 4)]
        n_train = 2000 if args.full_scale else cfg.get("n_train", 500)
        n_test = 10**5 if args.full_scale else cfg.get("n_test", 20000)
        reps = 5000 if args.full_scale else reps
        specs = [harness.ScenarioSpec(n, n_train=n_train, n_test=n_test,
                                      replications=reps, seed=seed) for n in names]
        harness.run_table1(specs, out_path=args.out)
    else:
        reps = 1000 if args.full_scale else reps
        shift = args.scenario == "gauss_shift"
        n_calib = cfg.get("n_calib", [50, 100, 200, 500, 1000] if args.full_scale
                          else [50, 200, 1000])
        harness.run_table2(n_calib, shift, replications=reps, seed=seed,
                           out_path=args.out)
    print(f"wrote {args.out} and {args.out}.md")


def _write(target, text):
    if hasattr(target, "write"):
        target.write(text)
    else:
        with open(target, "w") as fh:
            fh.write(text)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="policyshift")
    sub = parser.add_subparsers(dest="command", required=True)

    w = sub.add_parser("weights", help="compute retargeting/curvature weights")
    w.add_argument("--data", required=True)
    w.add_argument("--constraint", choices=["l1", "global", "local"], default="l1")
    w.add_argument("--nu", default="train", help="train, uniform, or a CSV path")
    w.add_argument("--t-grid", type=int, default=101)
    w.add_argument("--theta-sharp", default="estimate")
    w.add_argument("--out")
    w.set_defaults(func=_cmd_weights)

    e = sub.add_parser("evaluate", help="estimate a policy's testing value")
    e.add_argument("--data", required=True)
    e.add_argument("--estimator", choices=["ipw", "aipw", "eff", "onlyx", "plugin"],
                   required=True)
    e.add_argument("--policy", required=True, help="theta=VAL or a JSON file")
    e.add_argument("--crossfit", type=int, default=2)
    e.add_argument("--mu-source", choices=["train", "calib", "pooled"], default="train")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=_cmd_evaluate)

    d = sub.add_parser("dro", help="robust threshold learning over L^k balls")
    d.add_argument("--data", required=True)
    d.add_argument("--k", default="2", help="2 or inf")
    d.add_argument("--c", default="1,1.2,1.5,2,3,5")
    d.add_argument("--center", choices=["train", "calib"], default="train")
    d.add_argument("--theta-grid", type=int, default=101)
    d.add_argument("--emit-set", help="path for the 3-point boundary CSV")
    d.add_argument("--out")
    d.set_defaults(func=_cmd_dro)

    l = sub.add_parser("learn", help="cross-fitted threshold learning")
    l.add_argument("--data")
    l.add_argument("--scenario", choices=list(harness.SCENARIOS))
    l.add_argument("--weight", choices=["retarget", "uniform", "local", "global"],
                   default="retarget")
    l.add_argument("--crossfit", action="store_true", default=True)
    l.add_argument("--oracle-theta", type=float)
    l.add_argument("--seed", type=int, default=0)
    l.set_defaults(func=_cmd_learn)

    s = sub.add_parser("simulate", help="run the simulation tables")
    s.add_argument("--table", type=int, choices=[1, 2], required=True)
    s.add_argument("--scenario")
    s.add_argument("--reps", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--full-scale", action="store_true")
    s.add_argument("--config", help="JSON config file")
    s.set_defaults(func=_cmd_simulate)

    args = parser.parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
