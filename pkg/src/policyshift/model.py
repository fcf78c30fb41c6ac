"""Core domain types: datasets, discrete distributions, policies, nuisance
bundles, and weight functions.

Covariates are real row vectors; threshold policies act on the first
coordinate. Missing (action, outcome) pairs are encoded with an explicit
mask so that "missing" is distinguishable from any real value. All types
are immutable after construction and safe to share across workers.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

ACTIONS = (-1, 1)


class ConfigurationError(ValueError):
    pass


class DegenerateWeightError(ValueError):
    pass


def as_matrix(x):
    """Coerce covariates to a 2-d float array (n rows, p columns)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1)
    return x


@dataclass(frozen=True)
class LabeledDataset:
    """Sample of (X, A, Y) rows with an optional site flag and (A, Y) mask.

    site == 1 marks training rows, site == 0 calibration rows. Missingness
    is joint on (A, Y): a row either has both or neither.
    """

    covariates: np.ndarray
    actions: np.ndarray
    outcomes: np.ndarray
    site: np.ndarray = None
    observed: np.ndarray = None  # True where (A, Y) present

    def __post_init__(self):
        X = as_matrix(self.covariates)
        n = X.shape[0]
        if n < 1:
            raise ValueError("dataset needs at least one row")
        a = np.asarray(self.actions, dtype=float).reshape(n)
        y = np.asarray(self.outcomes, dtype=float).reshape(n)
        site = self.site
        site = np.ones(n, dtype=int) if site is None else np.asarray(site, dtype=int).reshape(n)
        obs = self.observed
        if obs is None:
            obs = ~(np.isnan(a) | np.isnan(y))
        obs = np.asarray(obs, dtype=bool).reshape(n)
        if np.any(np.isnan(a) != np.isnan(y)):
            raise ValueError("actions and outcomes must be jointly missing")
        if np.any(site == 1) and not obs[site == 1].all():
            raise ValueError("training rows must have observed (A, Y)")
        present = a[obs]
        if not np.isin(present, ACTIONS).all():
            raise ValueError(f"actions must lie in {ACTIONS}")
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "site", site)
        object.__setattr__(self, "observed", obs)
        for name in ("covariates", "actions", "outcomes", "site", "observed"):
            getattr(self, name).setflags(write=False)

    @property
    def n(self):
        return self.covariates.shape[0]

    @property
    def p(self):
        return self.covariates.shape[1]

    def rows(self, mask):
        return LabeledDataset(
            self.covariates[mask],
            self.actions[mask],
            self.outcomes[mask],
            self.site[mask],
            self.observed[mask],
        )

    def training(self):
        return self.rows(self.site == 1)

    def calibration(self):
        return self.rows(self.site == 0)


@dataclass(frozen=True)
class DiscretizedDistribution:
    """Finite covariate support with probability masses."""

    support: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        sup = as_matrix(self.support)
        mass = np.asarray(self.mass, dtype=float).reshape(sup.shape[0])
        if (mass < 0).any():
            raise ValueError("masses must be nonnegative")
        if abs(mass.sum() - 1.0) > 1e-12:
            raise ValueError("masses must sum to 1")
        if len({tuple(row) for row in sup}) != sup.shape[0]:
            raise ValueError("support points must be distinct")
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "mass", mass)
        sup.setflags(write=False)
        mass.setflags(write=False)

    def expect(self, values):
        return float(np.dot(self.mass, np.asarray(values, dtype=float)))


def empirical_distribution(X):
    """Uniform masses on a sample; the discrete center for continuous data."""
    X = as_matrix(X)
    # collapse duplicate rows so support points stay distinct
    uniq, counts = np.unique(X, axis=0, return_counts=True)
    return DiscretizedDistribution(uniq, counts / counts.sum())


class Policy:
    """Stochastic map from covariates to a distribution over actions."""

    action_set = ACTIONS

    def __init__(self, prob_fn: Callable[[int, np.ndarray], np.ndarray]):
        self._prob_fn = prob_fn

    def prob(self, a, x):
        x = as_matrix(x)
        return np.clip(np.asarray(self._prob_fn(a, x), dtype=float).reshape(x.shape[0]), 0.0, 1.0)

    def prob_of(self, actions, x):
        """Probability assigned to each row's own action."""
        x = as_matrix(x)
        actions = np.asarray(actions)
        out = np.zeros(x.shape[0])
        for a in self.action_set:
            m = actions == a
            if m.any():
                out[m] = self.prob(a, x[m])
        return out

    def complement(self):
        return Policy(lambda a, x: 1.0 - self.prob(a, x))


class ThresholdPolicy(Policy):
    """Deterministic rule: treat (a=1) iff the first covariate exceeds theta."""

    def __init__(self, theta: float):
        self.theta = float(theta)
        super().__init__(self._prob)

    def _prob(self, a, x):
        treat = (x[:, 0] > self.theta).astype(float)
        return treat if a == 1 else 1.0 - treat

    def __repr__(self):
        return f"ThresholdPolicy(theta={self.theta})"


@dataclass(frozen=True)
class NuisanceSet:
    """Bundle of fitted regression surfaces used by weights and estimators.

    Every member is a callable over row matrices: mu(a, X), phi(a, X, s),
    sigma2(a, X), sel(X), w_star(X), cate(X). Unpopulated members are None.
    """

    mu: Optional[Callable] = None
    phi: Optional[Callable] = None
    sigma2: Optional[Callable] = None
    sel: Optional[Callable] = None
    w_star: Optional[Callable] = None
    cate: Optional[Callable] = None
    action_set: Sequence[int] = ACTIONS
    clip_counts: dict = field(default_factory=dict)

    def require(self, *names):
        for name in names:
            if getattr(self, name) is None:
                raise ConfigurationError(f"nuisance '{name}' is not populated")

    def phi_at(self, a, x, s=None):
        fn = self.phi
        try:
            return np.asarray(fn(a, x, s), dtype=float)
        except TypeError:
            return np.asarray(fn(a, x), dtype=float)


def derive_M(nuisances: NuisanceSet, x):
    """Spread of arm means max_a mu(a,x) - min_a mu(a,x), vectorized over rows."""
    nuisances.require("mu")
    x = as_matrix(x)
    vals = np.stack([np.asarray(nuisances.mu(a, x), dtype=float).reshape(x.shape[0])
                     for a in nuisances.action_set])
    return vals.max(axis=0) - vals.min(axis=0)


class WeightFn:
    """Nonnegative weight function of the covariates with a normalization tag.

    normalization is "train", "unnormalized", or a DiscretizedDistribution
    used as the custom dominating measure.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], normalization="unnormalized"):
        self._fn = fn
        self.normalization = normalization

    def __call__(self, x):
        x = as_matrix(x)
        w = np.asarray(self._fn(x), dtype=float)
        w = np.broadcast_to(w, (x.shape[0],)).astype(float)
        if (w < 0).any():
            raise ValueError("weight function produced negative values")
        return w


def uniform_weight():
    return WeightFn(lambda x: np.ones(x.shape[0]), normalization="train")


def expectation_under(nu, w: WeightFn):
    """E_nu[w(X)] for a DiscretizedDistribution or a covariate sample."""
    if isinstance(nu, DiscretizedDistribution):
        return nu.expect(w(nu.support))
    X = as_matrix(nu)
    return float(w(X).mean())


def normalize_weight(w: WeightFn, nu) -> WeightFn:
    """Rescale w so it integrates to 1 under nu (pointwise proportional)."""
    total = expectation_under(nu, w)
    if total <= 0:
        raise DegenerateWeightError("weight integrates to 0 under the given measure")
    tag = "train" if not isinstance(nu, DiscretizedDistribution) else nu
    return WeightFn(lambda x, _w=w, _t=total: _w(x) / _t, normalization=tag)


def dataset_to_csv(data: LabeledDataset, path):
    """Write the CSV format: header x1,...,xp,a,y,s; empty a/y cells = missing."""
    p = data.p
    header = ",".join([f"x{j + 1}" for j in range(p)] + ["a", "y", "s"])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for i in range(data.n):
            cells = [repr(float(v)) for v in data.covariates[i]]
            if data.observed[i]:
                cells += [repr(int(data.actions[i])), repr(float(data.outcomes[i]))]
            else:
                cells += ["", ""]
            cells.append(str(int(data.site[i])))
            fh.write(",".join(cells) + "\n")


def dataset_from_csv(path) -> LabeledDataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        p = sum(1 for h in header if h.startswith("x"))
        if header != [f"x{j + 1}" for j in range(p)] + ["a", "y", "s"]:
            raise ValueError(f"unexpected CSV header: {header}")
        X, a, y, s = [], [], [], []
        for line in fh:
            cells = line.rstrip("\n").split(",")
            if len(cells) != p + 3:
                raise ValueError(f"row has {len(cells)} cells, expected {p + 3}")
            X.append([float(c) for c in cells[:p]])
            a.append(float(cells[p]) if cells[p] != "" else np.nan)
            y.append(float(cells[p + 1]) if cells[p + 1] != "" else np.nan)
            s.append(int(cells[p + 2]))
    return LabeledDataset(np.array(X), np.array(a), np.array(y), np.array(s))
