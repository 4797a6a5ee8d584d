"""Benchmark models with synthetic data generators and exact oracles."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .distributions import (
    Bernoulli,
    Categorical,
    HalfCauchy,
    Normal,
    NormalMixture,
    StudentT,
)
from .graph import Address, Model, addr, random_variable


@dataclass
class ZooModel:
    name: str
    model: Model
    observations: dict
    oracle: Callable | None = None
    heldout: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)  # dataset table, first row is the header


def _normal_pdf(x, mean, sd):
    return math.exp(-0.5 * ((x - mean) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))


# ---------------------------------------------------------------------------
# conjugate normal


class ConjNormal(Model):
    name = "conj-normal"

    def __init__(self, sigma_x=2.0, sigma_y=0.1, observations=None):
        super().__init__(observations, queries=[addr("x")])
        self.sigma_x = sigma_x
        self.sigma_y = sigma_y

    @random_variable
    def x(self, read):
        return Normal(0.0, self.sigma_x)

    @random_variable
    def y(self, read):
        return Normal(read("x"), self.sigma_y)

    def posterior(self, y: float) -> tuple[float, float]:
        """Closed-form posterior mean and sd of x given y."""
        px, py = self.sigma_x**-2, self.sigma_y**-2
        return py / (px + py) * y, math.sqrt(1.0 / (px + py))


def conj_normal(sigma_x=2.0, sigma_y=0.1, y=0.25) -> ZooModel:
    if not (sigma_x > 0 and sigma_y > 0):
        raise ValueError("scales must be positive")
    obs = {addr("y"): float(y)}
    m = ConjNormal(sigma_x, sigma_y, obs)
    return ZooModel(
        "conj-normal", m, obs, oracle=m.posterior,
        manifest={"sigma_x": sigma_x, "sigma_y": sigma_y, "y": y},
        rows=[["y"], [y]],
    )


# ---------------------------------------------------------------------------
# two-mode mixture


GMM_WEIGHTS = (0.4, 0.6)
GMM_X_MEANS = (0.0, 10.0)
GMM_Y_MEANS = (0.0, 0.5)
GMM_SD = 0.5


def _component_posterior(x: float) -> tuple[float, ...]:
    logs = [math.log(w) - 0.5 * ((x - m) / GMM_SD) ** 2 for w, m in zip(GMM_WEIGHTS, GMM_X_MEANS)]
    top = max(logs)
    e = [math.exp(v - top) for v in logs]
    s = sum(e)
    return tuple(v / s for v in e)


class Gmm2d(Model):
    """Two-component mixture over (x, y) with the component summed out.

    Component c=1 has prior weight 0.6, x-mean 10 and y-mean 0.5; c=0 has
    x-mean 0 and y-mean 0; all sds 0.5.
    """

    name = "gmm2d"

    def __init__(self, observations=None):
        super().__init__(observations, queries=[addr("x")])

    @random_variable
    def x(self, read):
        return NormalMixture(GMM_WEIGHTS, GMM_X_MEANS, (GMM_SD, GMM_SD))

    @random_variable
    def y(self, read):
        w = _component_posterior(read("x"))
        w = (w[0], 1.0 - w[0])
        return NormalMixture(w, GMM_Y_MEANS, (GMM_SD, GMM_SD))

    def component_posterior(self, y: float) -> tuple[float, float]:
        like = [w * _normal_pdf(y, m, GMM_SD) for w, m in zip(GMM_WEIGHTS, GMM_Y_MEANS)]
        s = sum(like)
        return like[0] / s, like[1] / s

    def posterior_density(self, x: float, y: float) -> float:
        w = self.component_posterior(y)
        return sum(wc * _normal_pdf(x, m, GMM_SD) for wc, m in zip(w, GMM_X_MEANS))


class Gmm2dIndicator(Model):
    """The same mixture with an explicit Bernoulli component indicator ``c``."""

    name = "gmm2d-indicator"

    def __init__(self, observations=None):
        super().__init__(observations, queries=[addr("c"), addr("x")])

    @random_variable
    def c(self, read):
        return Bernoulli(GMM_WEIGHTS[1])

    @random_variable
    def x(self, read):
        return Normal(GMM_X_MEANS[int(read("c"))], GMM_SD)

    @random_variable
    def y(self, read):
        return Normal(GMM_Y_MEANS[int(read("c"))], GMM_SD)


def gmm2d(y=0.25, indicator: bool = False) -> ZooModel:
    obs = {addr("y"): float(y)}
    m = (Gmm2dIndicator if indicator else Gmm2d)(obs)
    oracle = Gmm2d().component_posterior
    return ZooModel("gmm2d", m, obs, oracle=oracle, manifest={"y": y, "indicator": indicator}, rows=[["y"], [y]])


# ---------------------------------------------------------------------------
# nuisance variables


class NuisanceModel(Model):
    name = "nuisance"

    def __init__(self, n_nuisance=100, observations=None):
        if n_nuisance < 0:
            raise ValueError("n_nuisance must be >= 0")
        queries = [addr("x"), addr("y")] + [addr("nuisance", i) for i in range(n_nuisance)]
        super().__init__(observations, queries=queries)
        self.n_nuisance = n_nuisance

    @random_variable
    def x(self, read):
        return Normal(0.0, 10.0)

    @random_variable
    def nuisance(self, read, i):
        return Normal(0.0, 10.0)

    @random_variable
    def y(self, read):
        return Normal(0.0, 10.0)

    @random_variable
    def noisy_sq_length(self, read):
        return Normal(read("x") ** 2 + read("y") ** 2, 0.1)


def nuisance_model(n_nuisance=100, obs=5.0) -> ZooModel:
    observations = {addr("noisy_sq_length"): float(obs) ** 2}
    m = NuisanceModel(n_nuisance, observations)
    return ZooModel("nuisance", m, observations, manifest={"n_nuisance": n_nuisance, "obs": obs},
                    rows=[["noisy_sq_length"], [float(obs) ** 2]])


# ---------------------------------------------------------------------------
# Bayesian logistic regression


def sigmoid(t: float) -> float:
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


class LogisticRegression(Model):
    """One family per coefficient (``beta_0`` is the intercept); labels carry their covariates."""

    name = "blr"

    def __init__(self, X_train, X_test, prior_sds, observations=None):
        self.X_train = np.asarray(X_train, dtype=np.float64)
        self.X_test = np.asarray(X_test, dtype=np.float64)
        self.prior_sds = tuple(float(s) for s in prior_sds)
        self.d = self.X_train.shape[1]
        self.coef_families = tuple(f"beta_{k}" for k in range(self.d + 1))
        self._rows = {"y": [tuple(r) for r in self.X_train.tolist()],
                      "y_test": [tuple(r) for r in self.X_test.tolist()]}
        super().__init__(observations, queries=[Address(f) for f in self.coef_families])

    def distribution(self, address, read):
        fam = address.family
        if fam in ("y", "y_test"):
            x = self._rows[fam][address.args[0]]
            t = read(self.coef_families[0])
            for k, xk in enumerate(x):
                t += read(self.coef_families[k + 1]) * xk
            return Bernoulli.from_logit(t)
        if fam.startswith("beta_"):
            return Normal(0.0, self.prior_sds[int(fam[5:])])
        return super().distribution(address, read)

    def context(self, address):
        rows = self._rows.get(address.family)
        return rows[address.args[0]] if rows is not None else ()


def blr(n_rows=2000, n_features=10, seed=0, prior_scale="variance", test_fraction=0.2) -> ZooModel:
    """Synthetic logistic regression; ``prior_scale`` says whether 10 and 2.5 are variances or sds."""
    if n_rows < 2 or n_features < 1:
        raise ValueError("need at least 2 rows and 1 feature")
    if prior_scale not in ("variance", "sd"):
        raise ValueError("prior_scale must be 'variance' or 'sd'")
    rng = np.random.default_rng(seed)
    scales = [10.0] + [2.5] * n_features
    sds = [math.sqrt(s) for s in scales] if prior_scale == "variance" else scales
    beta = np.array([rng.normal(0.0, s) for s in sds])
    X = rng.standard_normal((n_rows, n_features))
    logits = beta[0] + X @ beta[1:]
    labels = [bool(rng.random() < sigmoid(float(t))) for t in logits]
    n_test = int(round(n_rows * test_fraction))
    n_train = n_rows - n_test
    obs = {addr("y", i): labels[i] for i in range(n_train)}
    heldout = {addr("y_test", i): labels[n_train + i] for i in range(n_test)}
    m = LogisticRegression(X[:n_train], X[n_train:], sds, obs)
    header = ["split"] + [f"x{k}" for k in range(1, n_features + 1)] + ["y"]
    rows = [header] + [
        ["train" if i < n_train else "test", *map(float, X[i]), int(labels[i])] for i in range(n_rows)
    ]
    manifest = {
        "n_rows": n_rows, "n_features": n_features, "seed": seed, "prior_scale": prior_scale,
        "n_train": n_train, "n_test": n_test, "true_beta": [float(b) for b in beta],
    }
    return ZooModel("blr", m, obs, heldout=heldout, manifest=manifest, rows=rows)


# ---------------------------------------------------------------------------
# n-schools

LEVELS = ("district", "state", "type")


class NSchools(Model):
    name = "nschools"

    def __init__(self, counts: dict, assignments: dict, sigmas, test_assignments=None, test_sigmas=(),
                 tau_scale=1.0, observations=None):
        self.counts = dict(counts)
        self.assignments = {k: tuple(v) for k, v in assignments.items()}
        self.sigmas = tuple(float(s) for s in sigmas)
        self.test_assignments = {k: tuple(v) for k, v in (test_assignments or {}).items()}
        self.test_sigmas = tuple(float(s) for s in test_sigmas)
        self.tau_scale = float(tau_scale)
        queries = [addr("beta0")]
        for lvl in LEVELS:
            if self.counts.get(lvl, 0):
                queries.append(addr(f"tau_{lvl}"))
                queries += [addr(f"beta_{lvl}", j) for j in range(self.counts[lvl])]
        super().__init__(observations, queries=queries)

    def distribution(self, address, read):
        fam = address.family
        if fam == "beta0":
            return StudentT(3.0, 0.0, 10.0)
        if fam.startswith("tau_"):
            return HalfCauchy(self.tau_scale)
        if fam.startswith("beta_"):
            return Normal(0.0, read(f"tau_{fam[5:]}"))
        if fam in ("y", "y_test"):
            k = address.args[0]
            assign, sig = (self.assignments, self.sigmas) if fam == "y" else (self.test_assignments, self.test_sigmas)
            mean = read("beta0")
            for lvl in LEVELS:
                if self.counts.get(lvl, 0):
                    mean += read(f"beta_{lvl}", assign[lvl][k])
            return Normal(mean, sig[k])
        return super().distribution(address, read)

    def context(self, address):
        if address.family == "y":
            return (self.sigmas[address.args[0]],)
        if address.family == "y_test":
            return (self.test_sigmas[address.args[0]],)
        return ()


def nschools(n_schools=50, n_states=8, n_districts=5, n_types=5, seed=0, tau_scale=1.0,
             sigma_range=(0.5, 1.5), heldout_fraction=0.2) -> ZooModel:
    """Hierarchical school-effects model with random group assignments."""
    if n_schools < 1 or min(n_states, n_districts, n_types) < 0:
        raise ValueError("invalid n-schools sizes")
    rng = np.random.default_rng(seed)
    counts = {"district": n_districts, "state": n_states, "type": n_types}
    n_test = int(round(n_schools * heldout_fraction))
    total = n_schools + n_test
    assign = {lvl: [int(j) for j in rng.integers(0, counts[lvl], total)] if counts[lvl] else [] for lvl in LEVELS}
    sig = [float(s) for s in rng.uniform(sigma_range[0], sigma_range[1], total)]
    beta0 = float(StudentT(3.0, 0.0, 10.0).sample(rng))
    truth = {"beta0": beta0}
    effects = {}
    for lvl in LEVELS:
        if counts[lvl]:
            tau = HalfCauchy(tau_scale).sample(rng)
            truth[f"tau_{lvl}"] = tau
            effects[lvl] = [float(rng.normal(0.0, tau)) for _ in range(counts[lvl])]
            truth[f"beta_{lvl}"] = effects[lvl]
    ys = []
    for k in range(total):
        mean = beta0 + sum(effects[l][assign[l][k]] for l in effects)
        ys.append(float(rng.normal(mean, sig[k])))
    obs = {addr("y", k): ys[k] for k in range(n_schools)}
    heldout = {addr("y_test", k): ys[n_schools + k] for k in range(n_test)}
    m = NSchools(
        counts, {l: assign[l][:n_schools] for l in LEVELS}, sig[:n_schools],
        {l: assign[l][n_schools:] for l in LEVELS}, sig[n_schools:], tau_scale, obs,
    )
    rows = [["split", "district", "state", "type", "sigma", "y"]] + [
        ["train" if k < n_schools else "test",
         *(assign[l][k] if counts[l] else -1 for l in LEVELS), sig[k], ys[k]]
        for k in range(total)
    ]
    manifest = {"n_schools": n_schools, "counts": counts, "seed": seed, "tau_scale": tau_scale,
                "n_heldout": n_test, "truth": truth}
    return ZooModel("nschools", m, obs, heldout=heldout, manifest=manifest, rows=rows)


# ---------------------------------------------------------------------------
# small discrete network (exactly enumerable)


class DiscreteNet(Model):
    """Three latent discrete nodes (12 joint states) and two observed children."""

    name = "discrete"

    B_GIVEN_A = ((0.2, 0.3, 0.5), (0.5, 0.3, 0.2))
    D_GIVEN_B = (0.2, 0.5, 0.8)
    O2_GIVEN_B = ((0.6, 0.3, 0.1), (0.3, 0.4, 0.3), (0.1, 0.3, 0.6))

    def __init__(self, observations=None):
        super().__init__(observations, queries=[addr("a"), addr("b"), addr("d")])

    @random_variable
    def a(self, read):
        return Bernoulli(0.4)

    @random_variable
    def b(self, read):
        return Categorical(self.B_GIVEN_A[int(read("a"))])

    @random_variable
    def d(self, read):
        return Bernoulli(self.D_GIVEN_B[read("b")])

    @random_variable
    def o1(self, read):
        return Bernoulli(0.15 + 0.35 * int(read("a")) + 0.35 * int(read("d")))

    @random_variable
    def o2(self, read):
        return Categorical(self.O2_GIVEN_B[read("b")])

    def joint(self, a: bool, b: int, d: bool, o1: bool, o2: int) -> float:
        vals = {addr("a"): a, addr("b"): b, addr("d"): d, addr("o1"): o1, addr("o2"): o2}
        lp = 0.0
        for address, v in vals.items():
            dist = self.distribution(address, lambda f, *args: vals[Address(f, tuple(args))])
            lp += dist.log_prob(v)
        return math.exp(lp)

    def enumerate_posterior(self, o1: bool, o2: int) -> dict:
        """Exact posterior over (a, b, d) by summing the joint."""
        table = {(a, b, d): self.joint(a, b, d, o1, o2)
                 for a, b, d in itertools.product((False, True), range(3), (False, True))}
        z = sum(table.values())
        return {k: v / z for k, v in table.items()}

    def conditional(self, name: str, state: dict, o1: bool, o2: int) -> dict:
        """Exact single-site conditional of one latent given the others and the data."""
        support = range(3) if name == "b" else (False, True)
        weights = {}
        for v in support:
            s = dict(state, **{name: v})
            weights[v] = self.joint(s["a"], s["b"], s["d"], o1, o2)
        z = sum(weights.values())
        return {k: w / z for k, w in weights.items()}


def discrete_net(o1=True, o2=2) -> ZooModel:
    obs = {addr("o1"): bool(o1), addr("o2"): int(o2)}
    m = DiscreteNet(obs)
    return ZooModel("discrete", m, obs, oracle=lambda: m.enumerate_posterior(bool(o1), int(o2)),
                    manifest={"o1": bool(o1), "o2": int(o2)})


BUILDERS = {
    "conj-normal": conj_normal,
    "gmm2d": gmm2d,
    "nuisance": nuisance_model,
    "blr": blr,
    "nschools": nschools,
    "discrete": discrete_net,
}


def build(name: str, **params) -> ZooModel:
    try:
        builder = BUILDERS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(BUILDERS)}") from None
    return builder(**params)
