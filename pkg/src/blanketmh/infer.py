"""Single-site Metropolis-Hastings with pluggable proposers."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .distributions import transform_for
from .graph import Address, SupportError, World, ancestral_sample, revert, set_value, value_to_json
from .nn import MissingArtifact, compute_phi

log = logging.getLogger(__name__)


class ChainError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# proposers


class PriorProposer:
    """Independence proposals from the node's parent-conditional prior."""

    name = "prior"

    def for_chain(self):
        return self


class LicProposer:
    """Proposals from trained blanket networks, falling back to the prior.

    ``defensive`` mixes that much of the node's prior into every network
    proposal. An independence proposal with lighter tails than the target
    cannot leave a far-tail starting point; the prior component restores
    escape while keeping the chain exactly reversible. Zero gives pure
    network proposals.
    """

    name = "lic"

    def __init__(self, store, defensive: float = 0.05):
        if not 0.0 <= defensive < 1.0:
            raise ValueError("defensive weight must be in [0, 1)")
        self.store = store
        self.defensive = defensive

    def for_chain(self):
        return self


class FunctionProposer:
    """Proposals from an arbitrary ``fn(world, address) -> proposal distribution``."""

    name = "function"

    def __init__(self, fn):
        self.fn = fn

    def for_chain(self):
        return self


def adapt_rwmh(log_step: float, accepted: bool, iteration: int, target: float = 0.44,
               gain: float = 1.0) -> float:
    """Robbins-Monro update of a log step size towards a target acceptance rate."""
    return log_step + gain * ((1.0 if accepted else 0.0) - target) / max(1.0, iteration / 50.0)


class AdaptiveRwmh:
    """Gaussian random walk in unconstrained space with per-address step sizes.

    Discrete nodes are proposed from their prior.
    """

    name = "rwmh"

    def __init__(self, init_log_step: float = 0.0, target: float = 0.44, gain: float = 1.0,
                 adapt: bool = True):
        if not math.isfinite(init_log_step):
            raise ValueError("initial log step must be finite")
        self.init_log_step = init_log_step
        self.target = target
        self.gain = gain
        self.adapt = adapt
        self.log_steps: dict[Address, float] = {}

    def for_chain(self):
        return copy.deepcopy(self)

    def step_size(self, address: Address) -> float:
        return math.exp(self.log_steps.get(address, self.init_log_step))

    def update(self, address: Address, accepted: bool, iteration: int) -> None:
        if self.adapt:
            cur = self.log_steps.get(address, self.init_log_step)
            self.log_steps[address] = adapt_rwmh(cur, accepted, iteration, self.target, self.gain)


def make_proposer(kind: str, store=None, **kw):
    if kind == "prior":
        return PriorProposer()
    if kind == "rwmh":
        return AdaptiveRwmh(**kw)
    if kind == "lic":
        if store is None:
            raise ValueError("the lic proposer needs a trained artifact")
        return LicProposer(store, **kw)
    raise ValueError(f"unknown proposer {kind!r}")


# ---------------------------------------------------------------------------
# one step


@dataclass
class Proposal:
    diff: object
    log_alpha: float
    new_value: object
    used: str


def _gaussian_logpdf(x: float, mean: float, sd: float) -> float:
    u = (x - mean) / sd
    return -0.5 * u * u - math.log(sd) - 0.5 * math.log(2.0 * math.pi)


def _mix_log_prob(phi, prior, eps: float, x) -> float:
    """Log density of ``(1 - eps) * phi + eps * prior`` at ``x``."""
    if eps <= 0.0:
        return phi.log_prob(x)
    a = math.log1p(-eps) + phi.log_prob(x)
    b = math.log(eps) + prior.log_prob(x)
    if math.isnan(a) or math.isnan(b):
        return math.nan
    top = max(a, b)
    if top == -math.inf:
        return -math.inf
    return top + math.log(math.exp(a - top) + math.exp(b - top))


def propose(world: World, model, address: Address, prop, rng: np.random.Generator) -> Proposal:
    """Apply a proposed move to ``world`` and return it with its log acceptance ratio.

    The caller decides acceptance; on rejection the diff must be reverted. A
    proposal outside the support returns ``diff=None`` and ``-inf``.
    """
    node = world.nodes[address]
    x = node.value
    dist = node.dist
    kind = prop.name
    phi = None
    if kind == "lic":
        try:
            phi = compute_phi(prop.store, world, address)
        except MissingArtifact:
            kind = "prior"
    elif kind == "function":
        phi = prop.fn(world, address)
    support = dist.support()
    if kind == "rwmh" and support.discrete:
        kind = "prior"

    if kind == "prior":
        x_new = dist.sample(rng)
        log_fwd = dist.log_prob(x_new)
    elif kind == "rwmh":
        t = transform_for(support)
        z = t.to_unconstrained(float(x))
        sd = prop.step_size(address)
        z_new = z + sd * float(rng.standard_normal())
        x_new = t.from_unconstrained(z_new)
        log_fwd = _gaussian_logpdf(z_new, z, sd) - t.log_abs_det_jacobian(z_new)
        log_rev_rw = _gaussian_logpdf(z, z_new, sd) - t.log_abs_det_jacobian(z)
    else:
        eps = getattr(prop, "defensive", 0.0)
        x_new = dist.sample(rng) if eps > 0.0 and rng.random() < eps else phi.sample(rng)
        log_fwd = _mix_log_prob(phi, dist, eps, x_new)

    if math.isnan(log_fwd):
        raise ChainError(f"proposal density is NaN at {address} (proposer {kind}, value {x_new!r})")
    if not log_fwd > -math.inf or not dist.log_prob(x_new) > -math.inf:
        return Proposal(None, -math.inf, x_new, kind)
    try:
        diff = set_value(world, model, address, x_new)
    except SupportError:
        return Proposal(None, -math.inf, x_new, kind)

    if kind == "prior":
        log_rev = world.nodes[address].dist.log_prob(x)
    elif kind == "rwmh":
        log_rev = log_rev_rw
    else:
        # the reverse density conditions on the post-move blanket; when the
        # move left structure untouched the blanket (and so phi) is unchanged
        if diff.structural:
            if kind == "lic":
                try:
                    phi = compute_phi(prop.store, world, address)
                except MissingArtifact:
                    phi = None
            else:
                phi = prop.fn(world, address)
        own = world.nodes[address].dist
        log_rev = _mix_log_prob(phi, own, getattr(prop, "defensive", 0.0), x) if phi is not None else own.log_prob(x)

    log_alpha = (diff.delta_log_joint - diff.fresh_log_prob + diff.stale_log_prob) + (log_rev - log_fwd)
    return Proposal(diff, log_alpha, x_new, kind)


def mh_step(world: World, model, address: Address, prop, rng: np.random.Generator) -> bool:
    """One Metropolis-Hastings update of ``address``; returns whether it was accepted."""
    p = propose(world, model, address, prop, rng)
    if p.diff is None:
        return False
    la = p.log_alpha
    if math.isnan(la):
        revert(world, p.diff)
        raise ChainError(f"non-finite acceptance ratio at {address} (proposer {p.used}, value {p.new_value!r})")
    if la >= 0.0 or math.log(rng.random()) < la:
        world.commit()
        return True
    revert(world, p.diff)
    return False


# ---------------------------------------------------------------------------
# chains


@dataclass
class ChainConfig:
    num_samples: int = 100
    burn_in: int = 1000
    seed: int = 0
    thinning: int = 1

    def __post_init__(self):
        if self.num_samples < 0 or self.burn_in < 0 or self.thinning < 1 or self.seed < 0:
            raise ValueError("chain settings must be non-negative (thinning >= 1)")


@dataclass
class ChainOutput:
    chain: int
    seed: int
    samples: dict = field(default_factory=dict)  # address -> list of values (None when absent)
    accepted: dict = field(default_factory=dict)
    proposed: dict = field(default_factory=dict)
    compile_seconds: float = 0.0
    infer_seconds: float = 0.0
    num_samples: int = 0
    error: str | None = None

    def acceptance_rate(self, address: Address) -> float:
        n = self.proposed.get(address, 0)
        return self.accepted.get(address, 0) / n if n else float("nan")

    @property
    def addresses(self) -> list[Address]:
        return sorted(self.samples)


def run_chain(model, observations, prop, cfg: ChainConfig, init=None, chain: int = 0) -> ChainOutput:
    """Run one chain: ancestral initialization, then systematic-scan sweeps."""
    t0 = time.perf_counter()
    m = model.conditioned(observations) if observations is not None else model
    rng = np.random.default_rng(cfg.seed)
    world = ancestral_sample(m, rng)
    for a, v in sorted((init or {}).items()):
        set_value(world, m, a, v)
        world.commit()
    prop = prop.for_chain()
    adaptive = isinstance(prop, AdaptiveRwmh)
    out = ChainOutput(chain=chain, seed=cfg.seed)
    samples = out.samples
    n_rec = 0
    total = cfg.burn_in + cfg.num_samples * cfg.thinning
    for sweep in range(total):
        burning = sweep < cfg.burn_in
        for a in world.latent_addresses():
            if a not in world.nodes:
                continue
            acc = mh_step(world, m, a, prop, rng)
            out.proposed[a] = out.proposed.get(a, 0) + 1
            out.accepted[a] = out.accepted.get(a, 0) + int(acc)
            if adaptive and burning:
                prop.update(a, acc, sweep)
        if not burning and (sweep - cfg.burn_in) % cfg.thinning == 0:
            present = world.latent_addresses()
            for a in present:
                if a not in samples:
                    samples[a] = [None] * n_rec
            for a, seq in samples.items():
                node = world.nodes.get(a)
                seq.append(node.value if node is not None and not node.observed else None)
            n_rec += 1
    out.num_samples = n_rec
    out.infer_seconds = time.perf_counter() - t0
    return out


def run_chains(model, observations, prop, cfg: ChainConfig, n_chains: int, init=None,
               workers: int = 1) -> list[ChainOutput]:
    """Independent chains seeded ``cfg.seed + i``, returned in chain order."""
    if n_chains < 1:
        raise ValueError("n_chains must be >= 1")

    def one(i):
        c = ChainConfig(cfg.num_samples, cfg.burn_in, cfg.seed + i, cfg.thinning)
        try:
            return run_chain(model, observations, prop, c, init=init, chain=i)
        except Exception as exc:  # reported per chain
            log.error("chain %d failed: %s", i, exc)
            return ChainOutput(chain=i, seed=c.seed, error=f"{type(exc).__name__}: {exc}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, range(n_chains)))
    return [one(i) for i in range(n_chains)]


# ---------------------------------------------------------------------------
# output


def _format_value(v) -> str:
    v = value_to_json(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def write_samples_csv(outputs: list[ChainOutput], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "iteration", "family", "args", "value"])
        for out in outputs:
            for it in range(out.num_samples):
                for a in out.addresses:
                    v = out.samples[a][it]
                    if v is None:
                        continue
                    w.writerow([out.chain, it, a.family, ";".join(str(x) for x in a.args), _format_value(v)])


def read_samples_csv(path) -> dict[Address, np.ndarray]:
    """Sample matrices (chains x draws) keyed by address; absent values are NaN."""
    rows: dict[Address, dict[tuple[int, int], float]] = {}
    chains, iters = set(), set()
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            a = Address(r["family"], tuple(int(x) for x in r["args"].split(";")) if r["args"] else ())
            raw = r["value"]
            v = 1.0 if raw == "true" else 0.0 if raw == "false" else float(raw)
            c, i = int(r["chain"]), int(r["iteration"])
            chains.add(c)
            iters.add(i)
            rows.setdefault(a, {})[(c, i)] = v
    n_c = max(chains) + 1 if chains else 0
    n_i = max(iters) + 1 if iters else 0
    out = {}
    for a, vals in rows.items():
        m = np.full((n_c, n_i), np.nan)
        for (c, i), v in vals.items():
            m[c, i] = v
        out[a] = m
    return out


def chain_summary(outputs: list[ChainOutput]) -> dict:
    """Timings and acceptance rates for the JSON sidecar."""
    rates = {}
    for a in sorted({a for o in outputs for a in o.proposed}):
        acc = sum(o.accepted.get(a, 0) for o in outputs)
        n = sum(o.proposed.get(a, 0) for o in outputs)
        rates[str(a)] = acc / n if n else None
    return {
        "acceptance_rate": rates,
        "infer_seconds": [o.infer_seconds for o in outputs],
        "errors": {str(o.chain): o.error for o in outputs if o.error},
    }


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
