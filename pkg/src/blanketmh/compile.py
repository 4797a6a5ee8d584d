"""Training ("compiling") proposal networks on forward samples of a model."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .distributions import HalfCauchy, Normal, StudentT
from .graph import World, ancestral_sample

log = logging.getLogger(__name__)

FORMAT_VERSION = "1"


class VersionError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    num_worlds: int = 10_000
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    # when set, the step size decays geometrically from ``lr`` at the first epoch to this at the last
    lr_final: float | None = None
    components: int = 10
    seed: int = 0
    log_sd_min: float = -7.0
    log_sd_max: float = 4.0
    embed_dim: int = 4
    hidden_dim: int = 8
    layers: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # multiplies the scale of parentless continuous nodes while sampling training data
    prior_inflation: float = 1.0

    def __post_init__(self):
        if self.num_worlds < 1:
            raise ValueError("num_worlds must be >= 1")
        if self.components < 1:
            raise ValueError("components must be >= 1")
        bad_final = self.lr_final is not None and not self.lr_final > 0
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0 or bad_final:
            raise ValueError("invalid optimizer settings")
        if not self.log_sd_min < self.log_sd_max:
            raise ValueError("log_sd_min must be below log_sd_max")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ArtifactStore:
    specs: dict[str, nn.FamilySpec]
    params: dict[str, np.ndarray]
    config: dict
    model: str = ""
    provenance: dict = field(default_factory=dict)
    version: str = FORMAT_VERSION

    def __post_init__(self):
        self._tensors = None
        self.train_seconds = 0.0

    @property
    def family_list(self) -> list[str]:
        return sorted(self.specs)

    @property
    def layers(self) -> int:
        return int(self.config["layers"])

    @property
    def embed_dim(self) -> int:
        return int(self.config["embed_dim"])

    @property
    def components(self) -> int:
        return int(self.config["components"])

    @property
    def log_sd_min(self) -> float:
        return float(self.config["log_sd_min"])

    @property
    def log_sd_max(self) -> float:
        return float(self.config["log_sd_max"])

    def tensors(self) -> dict[str, ad.Tensor]:
        """Tape-less views of the parameters for evaluation."""
        if self._tensors is None:
            self._tensors = {k: ad.Tensor(v) for k, v in self.params.items()}
        return self._tensors

    def has_proposer(self, family: str) -> bool:
        spec = self.specs.get(family)
        return spec is not None and spec.latent

    def param_count(self, families=None) -> int:
        wanted = set(self.specs) if families is None else set(families)
        return int(sum(v.size for k, v in self.params.items() if k.split(".", 1)[0] in wanted))

    def without(self, family: str) -> "ArtifactStore":
        """Copy of the store with one family's proposal networks removed.

        The family's embedding stays so its nodes still inform their
        neighbours' proposals; only its own nodes fall back to the prior.
        """
        if family not in self.specs:
            raise KeyError(family)
        specs = dict(self.specs)
        specs[family] = replace(self.specs[family], latent=False)
        params = {k: v for k, v in self.params.items()
                  if k.split(".", 1)[0] != family or k.split(".")[1] == "embed"}
        return ArtifactStore(specs, params, dict(self.config), self.model, dict(self.provenance), self.version)

    def to_json(self) -> dict:
        fams = {}
        for fam in self.family_list:
            spec = self.specs[fam]
            parts = {"embed": {}, "agg": {}, "head": {}}
            for name in nn.param_names(fam, spec, self.layers):
                _, part, key = name.split(".")
                arr = self.params[name]
                parts[part][key] = {"shape": list(arr.shape), "data": [float(x) for x in arr.reshape(-1)]}
            fams[fam] = {**parts, "support": spec.to_json()}
        return {
            "version": self.version,
            "model": self.model,
            "config": self.config,
            "provenance": self.provenance,
            "families": fams,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ArtifactStore":
        if not isinstance(doc, dict) or "version" not in doc:
            raise ValueError("malformed artifact: missing version")
        if doc["version"] != FORMAT_VERSION:
            raise VersionError(f"unsupported artifact version {doc['version']!r}")
        try:
            config = dict(doc["config"])
            specs, params = {}, {}
            for fam, body in doc["families"].items():
                specs[fam] = nn.FamilySpec.from_json(body["support"])
                for part in ("embed", "agg", "head"):
                    for key, t in body.get(part, {}).items():
                        params[f"{fam}.{part}.{key}"] = np.asarray(t["data"], dtype=np.float64).reshape(t["shape"])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed artifact: {exc}") from exc
        return cls(specs, params, config, doc.get("model", ""), doc.get("provenance", {}), doc["version"])


def save(store: ArtifactStore, path) -> None:
    with open(path, "w") as fh:
        json.dump(store.to_json(), fh, sort_keys=True)


def load(path) -> ArtifactStore:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed artifact file {path}: {exc}") from exc
    return ArtifactStore.from_json(doc)


# ---------------------------------------------------------------------------
# data


class _Inflated:
    """Model proxy widening parentless continuous priors."""

    def __init__(self, model, factor: float):
        self._model = model
        self._factor = factor

    def __getattr__(self, name):
        return getattr(self._model, name)

    def distribution(self, address, read):
        n_reads = 0

        def counting(*a):
            nonlocal n_reads
            n_reads += 1
            return read(*a)

        d = self._model.distribution(address, counting)
        if n_reads or address in self._model.observations:
            return d
        f = self._factor
        if isinstance(d, Normal):
            return Normal(d.mean, d.sd * f)
        if isinstance(d, StudentT):
            return StudentT(d.dof, d.loc, d.scale * f)
        if isinstance(d, HalfCauchy):
            return HalfCauchy(d.scale * f)
        return d


def iter_dataset(model, n: int, seed, prior_inflation: float = 1.0):
    """Yield ``n`` joint samples with nothing clamped (observed nodes are sampled too).

    Each world has its own stream, so the sequence can be regenerated
    world by world and adding unrelated families leaves other values unchanged.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    source = model if prior_inflation == 1.0 else _Inflated(model, prior_inflation)
    for child in seq.spawn(n):
        w = ancestral_sample(source, np.random.default_rng(child), observe={})
        w.model = model
        yield w


def generate_dataset(model, n: int, seed, prior_inflation: float = 1.0) -> list[World]:
    return list(iter_dataset(model, n, seed, prior_inflation))


def latent_role(model, address) -> bool:
    return address not in model.observations


def family_specs(model, worlds) -> dict[str, nn.FamilySpec]:
    """Support metadata and feature standardization from a dataset."""
    specs: dict[str, nn.FamilySpec] = {}
    values: dict[str, list] = {}
    latent_values: dict[str, list] = {}
    contexts: dict[str, list] = {}
    for w in worlds:
        for a, node in w.nodes.items():
            ctx = model.context(a)
            spec = nn.spec_for_node(node, len(ctx))
            lat = latent_role(model, a)
            cur = specs.get(a.family)
            if cur is None:
                spec.latent = lat
                specs[a.family] = spec
            else:
                if cur.kind != spec.kind or cur.context_dim != spec.context_dim or (
                    cur.kind == "continuous" and cur.transform != spec.transform
                ):
                    raise ValueError(f"family {a.family!r} mixes incompatible supports")
                cur.n = max(cur.n, spec.n)
                cur.latent = cur.latent or lat
            if spec.kind == "continuous":
                z = spec.transform.to_unconstrained(float(node.value))
                values.setdefault(a.family, []).append(z)
                if lat:
                    latent_values.setdefault(a.family, []).append(z)
            if ctx:
                contexts.setdefault(a.family, []).append(ctx)
    for fam, spec in specs.items():
        shift = np.zeros(spec.feature_dim)
        scale = np.ones(spec.feature_dim)
        if spec.kind == "continuous":
            shift[0], scale[0] = _moments(values[fam])
            if fam in latent_values:
                spec.out_shift, spec.out_scale = _moments(latent_values[fam])
        if spec.context_dim:
            c = np.asarray(contexts[fam], dtype=np.float64)
            mu = c.mean(axis=0)
            sd = c.std(axis=0)
            sd[sd < 1e-8] = 1.0
            shift[spec.value_dim + 1:] = mu
            scale[spec.value_dim + 1:] = sd
        spec.feat_shift, spec.feat_scale = shift, scale
    return specs


def _moments(xs) -> tuple[float, float]:
    a = np.asarray(xs, dtype=np.float64)
    sd = float(a.std())
    return float(a.mean()), (sd if sd > 1e-8 else 1.0)


def world_record(store_or_specs, world: World, model) -> nn.Record:
    specs = store_or_specs.specs if isinstance(store_or_specs, ArtifactStore) else store_or_specs
    families = sorted(specs)
    targets = [a for a in sorted(world.nodes) if latent_role(model, a)]

    def check(family, role):
        if family not in specs or (role == "target" and not specs[family].latent):
            raise nn.MissingArtifact(family)

    return nn.make_record(families, specs, world, targets, with_values=True, check=check)


# ---------------------------------------------------------------------------
# objective


def batch_loss(params, specs, families, batch: nn.Batch, n_worlds: int, cfg: dict):
    """Sum over target nodes of -log q(value), divided by the number of worlds."""
    out = nn.forward(params, families, specs, batch, int(cfg["layers"]), int(cfg["embed_dim"]))
    terms = []
    for f in sorted(out):
        phi, g = out[f]
        spec = specs[families[f]]
        if spec.kind == "discrete":
            lp = nn.discrete_log_prob(phi, g.idx)
        else:
            log_w, means, log_sd = nn.decode_gmm(phi, spec, int(cfg["components"]),
                                                 float(cfg["log_sd_min"]), float(cfg["log_sd_max"]))
            lp = nn.gmm_log_prob(log_w, means, log_sd, g.z, g.ladj)
        terms.append(ad.sum(lp))
    if not terms:
        return ad.Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, -1.0 / n_worlds)


def loss(store: ArtifactStore, world: World, tape: ad.Tape | None = None, model=None):
    """Traced negative log proposal density of one world's latent values."""
    model = model if model is not None else world.model
    tape = tape if tape is not None else ad.Tape()
    params = {k: tape.param(v) for k, v in store.params.items()}
    rec = world_record(store, world, model)
    batch = nn.collate([rec], len(store.specs))
    return batch_loss(params, store.specs, store.family_list, batch, 1, store.config)


def _config_dict(cfg: TrainingConfig) -> dict:
    return asdict(cfg)


def epoch_lr(cfg: TrainingConfig, epoch: int) -> float:
    """Adam step size used throughout ``epoch``."""
    if cfg.lr_final is None or cfg.epochs < 2:
        return cfg.lr
    return cfg.lr * (cfg.lr_final / cfg.lr) ** (epoch / (cfg.epochs - 1))


def train(model, cfg: TrainingConfig | None = None, worlds: list[World] | None = None) -> ArtifactStore:
    """Fit every family's networks to forward samples of ``model``."""
    cfg = cfg or TrainingConfig()
    t0 = time.perf_counter()
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    if worlds is None:
        # two streaming passes (statistics, then records) keep only one world alive at a time
        def source():
            fresh = np.random.SeedSequence(seeds[0].entropy, spawn_key=seeds[0].spawn_key)
            return iter_dataset(model, cfg.num_worlds, fresh, cfg.prior_inflation)
    else:
        def source():
            return iter(worlds)
    specs = family_specs(model, source())
    families = sorted(specs)
    params = nn.init_params(specs, seeds[1], cfg.embed_dim, cfg.hidden_dim, cfg.layers, cfg.components)
    config = _config_dict(cfg)
    records = [world_record(specs, w, model) for w in source()]

    order_rng = np.random.default_rng(seeds[2])
    state = ad.AdamState()
    history = []
    n = len(records)
    for epoch in range(cfg.epochs):
        lr = epoch_lr(cfg, epoch)
        perm = order_rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            batch = nn.collate([records[i] for i in idx], len(families))
            tape = ad.Tape()
            leaves = {k: tape.param(v) for k, v in params.items()}
            value = batch_loss(leaves, specs, families, batch, len(idx), config)
            if value.tape is None:
                continue
            if not np.isfinite(value.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {lo}")
            grads = ad.backward(tape, value)
            params, state = ad.adam_step(
                params, {k: grads[leaves[k]] for k in params}, state, lr, cfg.beta1, cfg.beta2, cfg.eps
            )
            total += float(value.data) * len(idx)
            count += len(idx)
        mean = total / max(count, 1)
        history.append(mean)
        log.debug("epoch %d loss %.6f", epoch, mean)
    provenance = {
        "model": getattr(model, "name", ""),
        "final_loss": history[-1] if history else None,
        "loss_history": history,
        "num_worlds": n,
    }
    store = ArtifactStore(specs, params, config, getattr(model, "name", ""), provenance)
    store.train_seconds = time.perf_counter() - t0  # kept out of the file so reruns are byte-identical
    return store
