"""Scalar densities, supports and unconstrained-space transforms.

Values are plain Python scalars: ``float`` for continuous distributions,
``bool`` for :class:`Bernoulli` and ``int`` for :class:`Categorical`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
_LOG_PI = math.log(math.pi)
_LOG_2 = math.log(2.0)


class DistributionError(ValueError):
    pass


def _check_real(v):
    if isinstance(v, (bool, np.bool_)) or not isinstance(v, (float, int, np.floating, np.integer)):
        raise TypeError(f"expected a real value, got {type(v).__name__}")
    return float(v)


# ---------------------------------------------------------------------------
# Supports


@dataclass(frozen=True)
class RealLine:
    discrete = False

    def contains(self, v) -> bool:
        return math.isfinite(v)


@dataclass(frozen=True)
class Positive:
    discrete = False

    def contains(self, v) -> bool:
        return v > 0.0 and math.isfinite(v)


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    discrete = False

    def __post_init__(self):
        if not self.lo < self.hi:
            raise DistributionError(f"empty interval ({self.lo}, {self.hi})")

    def contains(self, v) -> bool:
        return self.lo < v < self.hi


@dataclass(frozen=True)
class Binary:
    discrete = True
    size = 2

    def contains(self, v) -> bool:
        return isinstance(v, (bool, np.bool_))


@dataclass(frozen=True)
class Finite:
    n: int
    discrete = True

    def __post_init__(self):
        if self.n < 1:
            raise DistributionError("finite support needs n >= 1")

    @property
    def size(self) -> int:
        return self.n

    def contains(self, v) -> bool:
        return not isinstance(v, (bool, np.bool_)) and 0 <= v < self.n


Support = RealLine | Positive | Interval | Binary | Finite


# ---------------------------------------------------------------------------
# Transforms. ``to_unconstrained`` maps x -> z; ``log_abs_det_jacobian`` is
# log |dx/dz| evaluated at z, i.e. the correction for the inverse map.


@dataclass(frozen=True)
class Identity:
    def to_unconstrained(self, x: float) -> float:
        return x

    def from_unconstrained(self, z: float) -> float:
        return z

    def log_abs_det_jacobian(self, z: float) -> float:
        return 0.0


@dataclass(frozen=True)
class LogPositive:
    def to_unconstrained(self, x: float) -> float:
        return math.log(x)

    def from_unconstrained(self, z: float) -> float:
        return math.exp(z)

    def log_abs_det_jacobian(self, z: float) -> float:
        return z


@dataclass(frozen=True)
class LogitInterval:
    lo: float
    hi: float

    def to_unconstrained(self, x: float) -> float:
        u = (x - self.lo) / (self.hi - self.lo)
        return math.log(u) - math.log1p(-u)

    def from_unconstrained(self, z: float) -> float:
        if z >= 0:
            u = 1.0 / (1.0 + math.exp(-z))
        else:
            e = math.exp(z)
            u = e / (1.0 + e)
        return self.lo + (self.hi - self.lo) * u

    def log_abs_det_jacobian(self, z: float) -> float:
        # log((hi - lo) * sigmoid(z) * sigmoid(-z))
        return math.log(self.hi - self.lo) - _softplus(z) - _softplus(-z)


Transform = Identity | LogPositive | LogitInterval


def _softplus(x: float) -> float:
    if x > 30.0:
        return x
    return math.log1p(math.exp(x))


def transform_for(support) -> Transform:
    """Bijection from a continuous support onto the real line."""
    if isinstance(support, RealLine):
        return Identity()
    if isinstance(support, Positive):
        return LogPositive()
    if isinstance(support, Interval):
        return LogitInterval(support.lo, support.hi)
    raise DistributionError(f"no unconstrained transform for discrete support {support!r}")


def transform_to_json(t: Transform) -> dict:
    if isinstance(t, LogitInterval):
        return {"kind": "logit_interval", "lo": t.lo, "hi": t.hi}
    return {"kind": "identity" if isinstance(t, Identity) else "log_positive"}


def transform_from_json(d: dict) -> Transform:
    kind = d["kind"]
    if kind == "identity":
        return Identity()
    if kind == "log_positive":
        return LogPositive()
    if kind == "logit_interval":
        return LogitInterval(float(d["lo"]), float(d["hi"]))
    raise DistributionError(f"unknown transform kind {kind!r}")


# ---------------------------------------------------------------------------
# Distributions


@dataclass(frozen=True)
class Normal:
    mean: float
    sd: float

    def __post_init__(self):
        if not (self.sd > 0 and math.isfinite(self.sd) and math.isfinite(self.mean)):
            raise DistributionError(f"invalid Normal({self.mean}, {self.sd})")

    def log_prob(self, v) -> float:
        z = (_check_real(v) - self.mean) / self.sd
        return -0.5 * z * z - math.log(self.sd) - 0.5 * LOG_2PI

    def sample(self, rng: np.random.Generator) -> float:
        return float(self.mean + self.sd * rng.standard_normal())

    def support(self):
        return RealLine()

    def cdf(self, v: float) -> float:
        return 0.5 * math.erfc(-(v - self.mean) / (self.sd * math.sqrt(2.0)))


@dataclass(frozen=True)
class StudentT:
    dof: float
    loc: float
    scale: float

    def __post_init__(self):
        if not (self.dof > 0 and self.scale > 0 and math.isfinite(self.loc)):
            raise DistributionError(f"invalid StudentT({self.dof}, {self.loc}, {self.scale})")

    def log_prob(self, v) -> float:
        z = (_check_real(v) - self.loc) / self.scale
        nu = self.dof
        return (
            math.lgamma(0.5 * (nu + 1.0))
            - math.lgamma(0.5 * nu)
            - 0.5 * math.log(nu * math.pi)
            - math.log(self.scale)
            - 0.5 * (nu + 1.0) * math.log1p(z * z / nu)
        )

    def sample(self, rng: np.random.Generator) -> float:
        return float(self.loc + self.scale * rng.standard_t(self.dof))

    def support(self):
        return RealLine()


@dataclass(frozen=True)
class HalfCauchy:
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise DistributionError(f"invalid HalfCauchy({self.scale})")

    def log_prob(self, v) -> float:
        x = _check_real(v)
        if x < 0.0:
            return -math.inf
        z = x / self.scale
        return _LOG_2 - _LOG_PI - math.log(self.scale) - math.log1p(z * z)

    def sample(self, rng: np.random.Generator) -> float:
        while True:
            x = abs(float(self.scale * rng.standard_cauchy()))
            if 0.0 < x < math.inf:
                return x

    def support(self):
        return Positive()


@dataclass(frozen=True)
class Bernoulli:
    """Bernoulli over {False, True}; ``logit`` (if given) is used for stable log-mass."""

    prob: float
    logit: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise DistributionError(f"invalid Bernoulli({self.prob})")

    @classmethod
    def from_logit(cls, logit: float) -> "Bernoulli":
        if logit >= 0:
            p = 1.0 / (1.0 + math.exp(-logit))
        else:
            e = math.exp(logit)
            p = e / (1.0 + e)
        return cls(p, float(logit))

    def log_prob(self, v) -> float:
        if not isinstance(v, (bool, np.bool_)):
            raise TypeError(f"Bernoulli expects a bool, got {type(v).__name__}")
        if self.logit is not None:
            return -_softplus(-self.logit) if v else -_softplus(self.logit)
        p = self.prob if v else 1.0 - self.prob
        return math.log(p) if p > 0 else -math.inf

    def sample(self, rng: np.random.Generator) -> bool:
        return bool(rng.random() < self.prob)

    def support(self):
        return Binary()


@dataclass(frozen=True)
class Categorical:
    probs: tuple[float, ...]

    def __post_init__(self):
        p = tuple(float(x) for x in self.probs)
        if not p or any(x < 0 for x in p) or abs(math.fsum(p) - 1.0) > 1e-12:
            raise DistributionError(f"invalid Categorical probabilities {p}")
        object.__setattr__(self, "probs", p)

    @classmethod
    def normalized(cls, weights) -> "Categorical":
        w = [float(x) for x in weights]
        total = math.fsum(w)
        p = [x / total for x in w]
        # absorb rounding so the fsum check holds exactly
        p[-1] = max(0.0, 1.0 - math.fsum(p[:-1]))
        return cls(tuple(p))

    def log_prob(self, v) -> float:
        if isinstance(v, (bool, np.bool_)) or not isinstance(v, (int, np.integer)):
            raise TypeError(f"Categorical expects an int, got {type(v).__name__}")
        if not 0 <= v < len(self.probs):
            return -math.inf
        p = self.probs[v]
        return math.log(p) if p > 0 else -math.inf

    def sample(self, rng: np.random.Generator) -> int:
        u = rng.random()
        acc = 0.0
        last = 0
        for i, p in enumerate(self.probs):
            if p > 0:
                last = i
            acc += p
            if u < acc:
                return i
        return last

    def support(self):
        return Finite(len(self.probs))


@dataclass(frozen=True)
class NormalMixture:
    """Finite mixture of univariate normals; used where a discrete component is marginalized."""

    weights: tuple[float, ...]
    means: tuple[float, ...]
    sds: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if (
            not w
            or len(w) != len(self.means)
            or len(w) != len(self.sds)
            or any(x < 0 for x in w)
            or abs(math.fsum(w) - 1.0) > 1e-9
            or any(not s > 0 for s in self.sds)
        ):
            raise DistributionError("invalid NormalMixture parameters")
        object.__setattr__(self, "weights", w)

    def log_prob(self, v) -> float:
        x = _check_real(v)
        terms = [
            math.log(w) - 0.5 * ((x - m) / s) ** 2 - math.log(s) - 0.5 * LOG_2PI
            for w, m, s in zip(self.weights, self.means, self.sds)
            if w > 0
        ]
        top = max(terms)
        return top + math.log(math.fsum(math.exp(t - top) for t in terms))

    def sample(self, rng: np.random.Generator) -> float:
        k = Categorical.normalized(self.weights).sample(rng)
        return float(self.means[k] + self.sds[k] * rng.standard_normal())

    def support(self):
        return RealLine()


Distribution = Normal | StudentT | HalfCauchy | Bernoulli | Categorical | NormalMixture


def log_prob(dist, v) -> float:
    """Natural-log density (or mass) of ``v``; ``-inf`` outside the support."""
    return dist.log_prob(v)


def sample(dist, rng: np.random.Generator):
    return dist.sample(rng)


def support_of(dist):
    return dist.support()
