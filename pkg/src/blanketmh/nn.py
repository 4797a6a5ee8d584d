"""Markov-blanket proposal networks.

Per family there is a node embedding net (one tanh layer), a blanket
aggregator (a graph-convolution layer over the blanket followed by further
tanh layers on the summary, all bias-free) and a linear proposal head over
``concat(self embedding, blanket summary)``. The node's own value is always
masked, so the proposal depends only on its blanket and identity.

Everything is computed over *records*: the feature rows of the blanket
members of one or more target nodes, grouped by family, so a minibatch of
many targets over many worlds is a handful of matrix products.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .distributions import (
    LOG_2PI,
    Binary,
    Identity,
    transform_for,
    transform_from_json,
    transform_to_json,
)
from .graph import Address, NodeState, World, _blanket


class MissingArtifact(LookupError):
    def __init__(self, family: str, why: str = "no trained artifact"):
        super().__init__(f"{why} for family {family!r}")
        self.family = family


class FeatureError(MissingArtifact):
    pass


# ---------------------------------------------------------------------------
# family metadata


@dataclass
class FamilySpec:
    """Support metadata and fixed input/output standardization for one family."""

    kind: str  # "continuous" | "discrete"
    transform: object = None
    n: int = 0
    binary: bool = False
    context_dim: int = 0
    latent: bool = True
    feat_shift: np.ndarray | None = None
    feat_scale: np.ndarray | None = None
    out_shift: float = 0.0
    out_scale: float = 1.0

    @property
    def value_dim(self) -> int:
        return self.n if self.kind == "discrete" else 1

    @property
    def feature_dim(self) -> int:
        return self.value_dim + 1 + self.context_dim

    def __post_init__(self):
        if self.feat_shift is None:
            self.feat_shift = np.zeros(self.feature_dim)
        if self.feat_scale is None:
            self.feat_scale = np.ones(self.feature_dim)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "transform": transform_to_json(self.transform) if self.transform is not None else None,
            "n": self.n,
            "binary": self.binary,
            "context_dim": self.context_dim,
            "latent": self.latent,
            "feat_shift": [float(x) for x in self.feat_shift],
            "feat_scale": [float(x) for x in self.feat_scale],
            "out_shift": float(self.out_shift),
            "out_scale": float(self.out_scale),
        }

    @classmethod
    def from_json(cls, d: dict) -> "FamilySpec":
        t = d.get("transform")
        return cls(
            kind=d["kind"],
            transform=transform_from_json(t) if t is not None else None,
            n=int(d["n"]),
            binary=bool(d["binary"]),
            context_dim=int(d["context_dim"]),
            latent=bool(d["latent"]),
            feat_shift=np.asarray(d["feat_shift"], dtype=np.float64),
            feat_scale=np.asarray(d["feat_scale"], dtype=np.float64),
            out_shift=float(d["out_shift"]),
            out_scale=float(d["out_scale"]),
        )


def spec_for_node(node: NodeState, context_dim: int = 0) -> FamilySpec:
    support = node.dist.support()
    if support.discrete:
        return FamilySpec("discrete", None, support.size, isinstance(support, Binary), context_dim)
    return FamilySpec("continuous", transform_for(support), 0, False, context_dim)


# ---------------------------------------------------------------------------
# features


def _value_part(node: NodeState, mask_self: bool, n: int, transform) -> list[float]:
    support = node.dist.support()
    if support.discrete:
        width = n or support.size
        idx = int(node.value)
        if idx >= width:
            raise FeatureError(node.address.family, f"index {idx} exceeds max support {width}")
        vals = [0.0] * width
        if not mask_self:
            vals[idx] = 1.0
        return vals
    if mask_self:
        return [0.0]
    t = transform if transform is not None else transform_for(support)
    return [t.to_unconstrained(float(node.value))]


def featurize(node: NodeState, mask_self: bool = False, max_support: int | None = None,
              context=(), transform=None) -> np.ndarray:
    """Value encoding, presence flag, then the node's fixed context features."""
    row = _value_part(node, mask_self, max_support or 0, transform)
    row.append(1.0)
    row.extend(float(c) for c in context)
    return np.asarray(row, dtype=np.float64)


# ---------------------------------------------------------------------------
# parameters


def param_names(family: str, spec: FamilySpec, layers: int) -> list[str]:
    names = [f"{family}.embed.W", f"{family}.embed.b"]
    if spec.latent:
        names += [f"{family}.agg.W{l}" for l in range(layers)]
        names += [f"{family}.head.W", f"{family}.head.b"]
    return names


def head_width(spec: FamilySpec, components: int) -> int:
    return spec.n if spec.kind == "discrete" else 3 * components


def family_seed(seed: np.random.SeedSequence, family: str) -> np.random.SeedSequence:
    """Substream of ``seed`` named by ``family``."""
    return np.random.SeedSequence(seed.entropy, spawn_key=(*seed.spawn_key, zlib.crc32(family.encode())))


def init_params(specs: dict[str, FamilySpec], seed, embed_dim: int,
                hidden_dim: int, layers: int, components: int) -> dict[str, np.ndarray]:
    """Random initial weights; each family draws from its own named substream of ``seed``."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    params: dict[str, np.ndarray] = {}
    for fam in sorted(specs):
        spec = specs[fam]
        rng = np.random.default_rng(family_seed(seed, fam))
        F = spec.feature_dim
        params[f"{fam}.embed.W"] = rng.normal(0.0, 1.0 / math.sqrt(F), (embed_dim, F))
        params[f"{fam}.embed.b"] = np.zeros(embed_dim)
        if not spec.latent:
            continue
        fan = embed_dim
        for l in range(layers):
            params[f"{fam}.agg.W{l}"] = rng.normal(0.0, 1.0 / math.sqrt(fan), (hidden_dim, fan))
            fan = hidden_dim
        P = head_width(spec, components)
        params[f"{fam}.head.W"] = rng.normal(0.0, 0.1 / math.sqrt(embed_dim + hidden_dim), (P, embed_dim + hidden_dim))
        b = np.zeros(P)
        if spec.kind == "continuous" and components > 1:
            # spread initial component means over the standardized range
            b[components:2 * components] = np.linspace(-1.5, 1.5, components)
        params[f"{fam}.head.b"] = b
    return params


# ---------------------------------------------------------------------------
# records


@dataclass
class TargetGroup:
    self_feats: np.ndarray  # (T, F) masked self features
    rows: np.ndarray  # (nnz,) target row of each blanket edge
    fam_ids: np.ndarray  # (nnz,) member family id
    fam_rows: np.ndarray  # (nnz,) member row within its family block
    coefs: np.ndarray  # (nnz,)
    z: np.ndarray | None = None  # continuous targets: unconstrained value
    ladj: np.ndarray | None = None  # log|dx/dz| at z
    idx: np.ndarray | None = None  # discrete targets: value index
    addresses: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.self_feats.shape[0]


@dataclass
class Record:
    feats: dict[int, np.ndarray]  # family id -> (n_f, F_f) raw feature rows
    groups: dict[int, TargetGroup]  # target family id -> group


def make_record(families: list[str], specs: dict[str, FamilySpec], world: World,
                targets, with_values: bool = False, check=None) -> Record:
    """Feature rows and blanket structure for ``targets`` in ``world``.

    ``check(family, role)`` may raise when an artifact is missing; role is
    "target" or "member".
    """
    fid = {f: i for i, f in enumerate(families)}
    nodes = world.nodes
    model = getattr(world, "model", None)
    feat_lists: dict[int, list] = {}
    row_of: dict[Address, tuple[int, int]] = {}
    per_target = []
    for t in targets:
        fam = t.family
        if check is not None:
            check(fam, "target")
        members = _blanket(world, t)
        n_i = len(members)
        m_fids, m_rows, m_coefs = [], [], []
        for j in members:
            loc = row_of.get(j)
            if loc is None:
                jf = j.family
                if check is not None:
                    check(jf, "member")
                spec = specs[jf]
                ctx = model.context(j) if model is not None else ()
                row = _value_part(nodes[j], False, spec.n, spec.transform)
                row.append(1.0)
                row.extend(ctx)
                lst = feat_lists.setdefault(fid[jf], [])
                loc = (fid[jf], len(lst))
                lst.append(row)
                row_of[j] = loc
            m_fids.append(loc[0])
            m_rows.append(loc[1])
            m_coefs.append(1.0 / math.sqrt(n_i * len(_blanket(world, j))))
        per_target.append((t, m_fids, m_rows, m_coefs))

    groups: dict[int, dict] = {}
    for t, m_fids, m_rows, m_coefs in per_target:
        fam = t.family
        spec = specs[fam]
        g = groups.setdefault(fid[fam], {"self": [], "rows": [], "fids": [], "frows": [], "coefs": [],
                                         "z": [], "ladj": [], "idx": [], "addr": []})
        r = len(g["self"])
        ctx = model.context(t) if model is not None else ()
        srow = _value_part(nodes[t], True, spec.n, spec.transform)
        srow.append(1.0)
        srow.extend(ctx)
        g["self"].append(srow)
        g["rows"].extend([r] * len(m_fids))
        g["fids"].extend(m_fids)
        g["frows"].extend(m_rows)
        g["coefs"].extend(m_coefs)
        g["addr"].append(t)
        if with_values:
            v = nodes[t].value
            if spec.kind == "discrete":
                g["idx"].append(int(v))
            else:
                z = spec.transform.to_unconstrained(float(v))
                g["z"].append(z)
                g["ladj"].append(spec.transform.log_abs_det_jacobian(z))

    feats = {f: np.asarray(rows, dtype=np.float64) for f, rows in feat_lists.items()}
    out = {}
    for f, g in groups.items():
        spec = specs[families[f]]
        out[f] = TargetGroup(
            self_feats=np.asarray(g["self"], dtype=np.float64).reshape(len(g["self"]), spec.feature_dim),
            rows=np.asarray(g["rows"], dtype=np.int64),
            fam_ids=np.asarray(g["fids"], dtype=np.int64),
            fam_rows=np.asarray(g["frows"], dtype=np.int64),
            coefs=np.asarray(g["coefs"], dtype=np.float64),
            z=np.asarray(g["z"]) if with_values and spec.kind == "continuous" else None,
            ladj=np.asarray(g["ladj"]) if with_values and spec.kind == "continuous" else None,
            idx=np.asarray(g["idx"], dtype=np.int64) if with_values and spec.kind == "discrete" else None,
            addresses=g["addr"],
        )
    return Record(feats, out)


@dataclass
class Batch:
    feats: list[tuple[int, np.ndarray]]  # (family id, stacked rows) in family order
    total: int
    groups: dict[int, tuple[object, TargetGroup]]  # family id -> (S, merged group)


def collate(records: list[Record], n_families: int) -> Batch:
    counts = np.zeros((len(records), n_families), dtype=np.int64)
    for r, rec in enumerate(records):
        for f, x in rec.feats.items():
            counts[r, f] = x.shape[0]
    fam_sizes = counts.sum(axis=0)
    fam_offset = np.concatenate([[0], np.cumsum(fam_sizes)[:-1]])
    # start[r, f]: first global row of record r's block for family f
    start = fam_offset[None, :] + np.cumsum(counts, axis=0) - counts
    feats = []
    for f in range(n_families):
        if fam_sizes[f]:
            feats.append((f, np.concatenate([rec.feats[f] for rec in records if f in rec.feats], axis=0)))
    total = int(fam_sizes.sum())

    groups = {}
    target_fams = sorted({f for rec in records for f in rec.groups})
    for f in target_fams:
        parts = [(r, rec.groups[f]) for r, rec in enumerate(records) if f in rec.groups]
        row_base = 0
        rows, cols, vals = [], [], []
        for r, g in parts:
            rows.append(g.rows + row_base)
            cols.append(start[r, g.fam_ids] + g.fam_rows)
            vals.append(g.coefs)
            row_base += g.size
        merged = TargetGroup(
            self_feats=np.concatenate([g.self_feats for _, g in parts], axis=0),
            rows=np.concatenate(rows),
            fam_ids=np.empty(0, dtype=np.int64),
            fam_rows=np.empty(0, dtype=np.int64),
            coefs=np.concatenate(vals),
            z=None if parts[0][1].z is None else np.concatenate([g.z for _, g in parts]),
            ladj=None if parts[0][1].ladj is None else np.concatenate([g.ladj for _, g in parts]),
            idx=None if parts[0][1].idx is None else np.concatenate([g.idx for _, g in parts]),
            addresses=[a for _, g in parts for a in g.addresses],
        )
        S = sp.csr_matrix((merged.coefs, (merged.rows, np.concatenate(cols))), shape=(row_base, total))
        groups[f] = (S, merged)
    return Batch(feats, total, groups)


# ---------------------------------------------------------------------------
# forward pass


def embed(W, b, x: np.ndarray, spec: FamilySpec):
    """Node embedding net on raw feature rows."""
    xn = (x - spec.feat_shift) / spec.feat_scale
    return ad.tanh(ad.affine(W, xn, b))


def aggregate_layers(Ws, s0):
    """Apply the aggregator's layers to the normalized blanket sum ``s0``."""
    h = s0
    for W in Ws:
        h = ad.tanh(ad.affine(W, h))
    return h


def aggregate_mb(Ws, self_emb, mb_embs) -> np.ndarray:
    """Blanket summary of one node.

    ``mb_embs`` holds ``(embedding, blanket size of that member)`` pairs in
    address order; each contributes with weight 1/sqrt(|MB(i)| |MB(j)|).
    An empty blanket sums to zero.
    """
    Ws = [ad.as_tensor(W) for W in Ws]
    d_in = Ws[0].shape[1]
    n_i = len(mb_embs)
    s0 = np.zeros(d_in)
    for e, n_j in mb_embs:
        e = np.asarray(getattr(e, "data", e), dtype=np.float64)
        if e.shape != (d_in,):
            raise ValueError(f"embedding of shape {e.shape}, expected ({d_in},)")
        s0 = s0 + e / math.sqrt(n_i * n_j)
    return aggregate_layers(Ws, s0).data


def forward(params: dict, families: list[str], specs: dict[str, FamilySpec], batch: Batch,
            layers: int, embed_dim: int):
    """Head outputs per target family id: ``{fid: (raw phi Tensor, group)}``."""
    blocks = []
    for f, x in batch.feats:
        fam = families[f]
        blocks.append(embed(params[f"{fam}.embed.W"], params[f"{fam}.embed.b"], x, specs[fam]))
    H = ad.concat(blocks, axis=0) if blocks else None
    out = {}
    for f, (S, g) in batch.groups.items():
        fam = families[f]
        spec = specs[fam]
        if H is None:
            s0 = ad.Tensor(np.zeros((g.size, embed_dim)))
        else:
            s0 = ad.mix(S, H)
        summary = aggregate_layers([params[f"{fam}.agg.W{l}"] for l in range(layers)], s0)
        self_e = embed(params[f"{fam}.embed.W"], params[f"{fam}.embed.b"], g.self_feats, spec)
        phi = ad.affine(params[f"{fam}.head.W"], ad.concat([self_e, summary], axis=-1), params[f"{fam}.head.b"])
        out[f] = (phi, g)
    return out


def decode_gmm(phi, spec: FamilySpec, components: int, log_sd_min: float, log_sd_max: float):
    """Split raw head output into (log-weights, means, log-sds) over unconstrained space."""
    K = components
    log_w = ad.log_softmax(ad.columns(phi, 0, K))
    means = ad.add(ad.scale(ad.columns(phi, K, 2 * K), spec.out_scale), spec.out_shift)
    log_sd = ad.clamp(ad.add(ad.columns(phi, 2 * K, 3 * K), math.log(spec.out_scale)), log_sd_min, log_sd_max)
    return log_w, means, log_sd


def gmm_log_prob(log_w, means, log_sd, z: np.ndarray, ladj: np.ndarray):
    """Per-row log density of x under the transformed mixture."""
    zc = ad.Tensor(np.asarray(z, dtype=np.float64)[:, None])
    u = ad.mul(ad.sub(zc, means), ad.exp(ad.scale(log_sd, -1.0)))
    comp = ad.sub(ad.sub(log_w, ad.scale(ad.square(u), 0.5)), ad.add(log_sd, 0.5 * LOG_2PI))
    return ad.sub(ad.logsumexp(comp), ad.Tensor(np.asarray(ladj, dtype=np.float64)))


def discrete_log_prob(logits, idx: np.ndarray):
    return ad.pick(ad.log_softmax(logits), idx)


# ---------------------------------------------------------------------------
# proposal distributions


@dataclass(frozen=True)
class GmmProposal:
    weights: np.ndarray
    means: np.ndarray
    sds: np.ndarray
    transform: object = Identity()

    def log_prob(self, v) -> float:
        return proposal_log_prob(self, v)

    def sample(self, rng: np.random.Generator):
        return proposal_sample(self, rng)


@dataclass(frozen=True)
class DiscreteProposal:
    logits: np.ndarray
    binary: bool = False

    @property
    def probs(self) -> np.ndarray:
        return ad._softmax(np.asarray(self.logits, dtype=np.float64))

    def log_prob(self, v) -> float:
        return proposal_log_prob(self, v)

    def sample(self, rng: np.random.Generator):
        return proposal_sample(self, rng)


ProposalDistribution = GmmProposal | DiscreteProposal


def proposal_log_prob(p, v) -> float:
    if isinstance(p, DiscreteProposal):
        logits = np.asarray(p.logits, dtype=np.float64)
        i = int(v)
        if not 0 <= i < logits.shape[0]:
            return -math.inf
        m = logits.max()
        return float(logits[i] - m - math.log(np.exp(logits - m).sum()))
    x = float(v)
    try:
        z = p.transform.to_unconstrained(x)
    except (ValueError, ZeroDivisionError):
        return -math.inf
    if not math.isfinite(z):
        return -math.inf
    w = np.asarray(p.weights, dtype=np.float64)
    mu = np.asarray(p.means, dtype=np.float64)
    sd = np.asarray(p.sds, dtype=np.float64)
    with np.errstate(divide="ignore"):
        comp = np.log(w) - 0.5 * ((z - mu) / sd) ** 2 - np.log(sd) - 0.5 * LOG_2PI
    m = comp.max()
    if not math.isfinite(m):
        return -math.inf
    return float(m + math.log(np.exp(comp - m).sum()) - p.transform.log_abs_det_jacobian(z))


def proposal_sample(p, rng: np.random.Generator):
    if isinstance(p, DiscreteProposal):
        probs = p.probs
        i = int(min(np.searchsorted(np.cumsum(probs), rng.random(), side="right"), probs.shape[0] - 1))
        return bool(i) if p.binary else i
    w = np.asarray(p.weights, dtype=np.float64)
    k = int(min(np.searchsorted(np.cumsum(w), rng.random(), side="right"), w.shape[0] - 1))
    z = float(p.means[k] + p.sds[k] * rng.standard_normal())
    x = p.transform.from_unconstrained(z)
    return float(x)


def _embed_np(params, fam: str, spec: FamilySpec, x: np.ndarray) -> np.ndarray:
    xn = (x - spec.feat_shift) / spec.feat_scale
    return np.tanh(xn @ params[f"{fam}.embed.W"].T + params[f"{fam}.embed.b"])


def compute_phi(store, world: World, address: Address):
    """Proposal distribution for ``address`` given its current blanket.

    Raises :class:`MissingArtifact` when the node's family, or the family of
    any blanket member, has no trained network. This is the plain-numpy twin
    of :func:`forward` for a single target.
    """
    specs = store.specs
    params = store.params
    fam = address.family
    spec = specs.get(fam)
    if spec is None or not spec.latent:
        raise MissingArtifact(fam)
    nodes = world.nodes
    model = world.model
    members = _blanket(world, address)
    n_i = len(members)
    by_fam: dict[str, tuple[list, list]] = {}
    for j in members:
        jspec = specs.get(j.family)
        if jspec is None:
            raise MissingArtifact(j.family)
        row = _value_part(nodes[j], False, jspec.n, jspec.transform)
        row.append(1.0)
        row.extend(model.context(j))
        rows, coefs = by_fam.setdefault(j.family, ([], []))
        rows.append(row)
        coefs.append(1.0 / math.sqrt(n_i * len(_blanket(world, j))))
    s0 = np.zeros(store.embed_dim)
    for jf in sorted(by_fam):
        rows, coefs = by_fam[jf]
        s0 += np.asarray(coefs) @ _embed_np(params, jf, specs[jf], np.asarray(rows, dtype=np.float64))
    h = s0
    for l in range(store.layers):
        h = np.tanh(params[f"{fam}.agg.W{l}"] @ h)
    srow = _value_part(nodes[address], True, spec.n, spec.transform)
    srow.append(1.0)
    srow.extend(model.context(address))
    self_e = _embed_np(params, fam, spec, np.asarray(srow, dtype=np.float64))
    phi = params[f"{fam}.head.W"] @ np.concatenate([self_e, h]) + params[f"{fam}.head.b"]
    if spec.kind == "discrete":
        m = nodes[address].dist.support().size
        return DiscreteProposal(phi[:m].copy(), spec.binary)
    K = store.components
    logits = phi[:K]
    w = np.exp(logits - logits.max())
    w /= w.sum()
    means = phi[K:2 * K] * spec.out_scale + spec.out_shift
    log_sd = np.clip(phi[2 * K:3 * K] + math.log(spec.out_scale), store.log_sd_min, store.log_sd_max)
    node_transform = transform_for(nodes[address].dist.support())
    return GmmProposal(w, means, np.exp(log_sd), node_transform)


def compute_phi_batched(store, world: World, address: Address):
    """Reference path through the training code (records, collation, tape ops)."""
    specs = store.specs
    families = store.family_list

    def check(family, role):
        spec = specs.get(family)
        if spec is None or (role == "target" and not spec.latent):
            raise MissingArtifact(family)

    rec = make_record(families, specs, world, [address], check=check)
    batch = collate([rec], len(families))
    out = forward(store.tensors(), families, specs, batch, store.layers, store.embed_dim)
    f = families.index(address.family)
    phi, _ = out[f]
    spec = specs[address.family]
    if spec.kind == "discrete":
        m = world.nodes[address].dist.support().size
        return DiscreteProposal(phi.data[0, :m].copy(), spec.binary)
    log_w, means, log_sd = decode_gmm(phi, spec, store.components, store.log_sd_min, store.log_sd_max)
    node_transform = transform_for(world.nodes[address].dist.support())
    return GmmProposal(np.exp(log_w.data[0]), means.data[0].copy(), np.exp(log_sd.data[0]), node_transform)
