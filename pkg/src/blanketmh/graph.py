"""Open-universe Bayesian networks instantiated from declarative models.

A :class:`Model` maps an :class:`Address` to a distribution, reading other
nodes through a tracked accessor; the reads become the node's parent edges.
A :class:`World` holds one instantiation of the network and supports
single-site mutation (:func:`set_value`) with exact rollback (:func:`revert`).
"""

from __future__ import annotations

import copy
import itertools
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple

import numpy as np


class Address(NamedTuple):
    family: str
    args: tuple[int, ...] = ()

    def __str__(self) -> str:
        if not self.args:
            return self.family
        return f"{self.family}({','.join(str(a) for a in self.args)})"

    @classmethod
    def parse(cls, text: str) -> "Address":
        m = re.fullmatch(r"\s*([A-Za-z_][\w\-]*)\s*(?:\(([^)]*)\))?\s*", text)
        if m is None:
            raise ValueError(f"cannot parse address {text!r}")
        raw = m.group(2)
        args = tuple(int(a) for a in raw.split(",")) if raw and raw.strip() else ()
        return cls(m.group(1), args)


def addr(family: str, *args: int) -> Address:
    return Address(family, tuple(int(a) for a in args))


class ModelError(Exception):
    pass


class CycleError(ModelError):
    pass


class SupportError(ModelError, ValueError):
    pass


class UnknownAddressError(KeyError):
    pass


class ObservedMutationError(ModelError):
    pass


class StaleDiffError(RuntimeError):
    pass


def random_variable(fn):
    """Mark a model method as the distribution of the family named after it."""
    fn._random_variable = True
    return fn


class Model:
    """Declarative generative model.

    Subclasses define one method per family, decorated with
    :func:`random_variable`, taking ``(read, *args)`` and returning a
    distribution. ``read(family, *args)`` returns another node's value and
    records the dependency. Models with computed family names can override
    :meth:`distribution` directly.
    """

    name = "model"
    _family_fns: dict[str, Callable] = {}

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        fns = {}
        for klass in reversed(cls.__mro__):
            for key, val in vars(klass).items():
                if getattr(val, "_random_variable", False):
                    fns[key] = val
        cls._family_fns = fns

    def __init__(self, observations=None, queries: Iterable[Address] = ()):
        self.observations: dict[Address, object] = dict(observations or {})
        self.queries: tuple[Address, ...] = tuple(queries)

    def distribution(self, address: Address, read):
        fn = self._family_fns.get(address.family)
        if fn is None:
            raise ModelError(f"model {self.name!r} has no family {address.family!r}")
        return fn(self, read, *address.args)

    def context(self, address: Address) -> tuple[float, ...]:
        """Fixed side information attached to a node (covariates); empty by default."""
        return ()

    def conditioned(self, observations) -> "Model":
        other = copy.copy(self)
        other.observations = dict(observations)
        return other

    @property
    def roots(self) -> tuple[Address, ...]:
        return tuple(sorted(set(self.queries) | set(self.observations)))


@dataclass(slots=True)
class NodeState:
    address: Address
    dist: object
    value: object
    observed: bool
    parents: frozenset
    children: frozenset
    log_prob: float


_diff_ids = itertools.count(1)


@dataclass
class WorldDiff:
    """Old versions of everything a mutation touched."""

    id: int
    old_log_joint: float
    changed: dict = field(default_factory=dict)
    created: dict = field(default_factory=dict)
    destroyed: dict = field(default_factory=dict)
    delta_log_joint: float = 0.0
    structural: bool = False
    fresh_log_prob: float = 0.0
    stale_log_prob: float = 0.0

    @property
    def empty(self) -> bool:
        return not (self.changed or self.created or self.destroyed)


class World:
    def __init__(self, model: Model, rng: np.random.Generator | None = None, observed=None):
        self.model = model
        self.observed_values = dict(model.observations if observed is None else observed)
        self.roots = frozenset(model.queries) | frozenset(model.observations) | frozenset(self.observed_values)
        self.rng = rng if rng is not None else np.random.default_rng()
        self.nodes: dict[Address, NodeState] = {}
        self.log_joint = 0.0
        self._applied: list[int] = []
        self._mb_cache: dict[Address, tuple[Address, ...]] = {}
        self._pending_children: dict[Address, list] | None = None

    def __contains__(self, a) -> bool:
        return a in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def value(self, a: Address):
        return self.nodes[a].value

    def latent_addresses(self) -> list[Address]:
        return sorted(a for a, n in self.nodes.items() if not n.observed)

    def commit(self) -> None:
        """Forget pending diffs; they can no longer be reverted."""
        self._applied.clear()

    def recompute_log_joint(self) -> float:
        return math.fsum(n.log_prob for n in self.nodes.values())

    def to_json(self) -> dict:
        return {
            "nodes": [
                {
                    "family": a.family,
                    "args": list(a.args),
                    "value": value_to_json(n.value),
                    "observed": n.observed,
                    "log_prob": n.log_prob,
                    "parents": [[p.family, list(p.args)] for p in sorted(n.parents)],
                }
                for a, n in sorted(self.nodes.items())
            ],
            "log_joint": self.log_joint,
        }


def value_to_json(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    return float(v)


# ---------------------------------------------------------------------------
# instantiation


def _save(world: World, diff: WorldDiff | None, a: Address) -> None:
    if diff is None or a in diff.created or a in diff.changed:
        return
    diff.changed[a] = world.nodes[a]


def _link(world: World, diff, parent: Address, child: Address, add: bool) -> None:
    _save(world, diff, parent)
    p = world.nodes[parent]
    kids = p.children | {child} if add else p.children - {child}
    world.nodes[parent] = NodeState(p.address, p.dist, p.value, p.observed, p.parents, kids, p.log_prob)


def _evaluate(world: World, model: Model, address: Address, stack: list, diff):
    reads: dict[Address, None] = {}
    nodes = world.nodes

    def read(family, *args):
        a = family if isinstance(family, tuple) else Address(family, args)
        if a == address:
            raise CycleError(f"{address} reads itself")
        node = nodes.get(a)
        if node is None:
            node = _instantiate(world, model, a, stack, diff)
        reads[a] = None
        return node.value

    dist = model.distribution(address, read)
    return dist, frozenset(reads)


def _instantiate(world: World, model: Model, address: Address, stack: list, diff) -> NodeState:
    if address in stack:
        cycle = " -> ".join(str(a) for a in stack[stack.index(address):] + [address])
        raise CycleError(f"dependency cycle: {cycle}")
    stack.append(address)
    try:
        dist, parents = _evaluate(world, model, address, stack, diff)
    finally:
        stack.pop()
    if address in world.observed_values:
        value = world.observed_values[address]
        observed = True
        lp = dist.log_prob(value)
        if not lp > -math.inf:
            raise SupportError(f"observed value {value!r} of {address} has zero density")
    else:
        value = dist.sample(world.rng)
        observed = False
        lp = dist.log_prob(value)
    node = NodeState(address, dist, value, observed, parents, frozenset(), lp)
    world.nodes[address] = node
    pending = world._pending_children
    if pending is not None and diff is None:
        for p in parents:
            pending.setdefault(p, []).append(address)
    else:
        for p in parents:
            _link(world, diff, p, address, add=True)
    world.log_joint += lp
    if diff is not None:
        diff.created[address] = None
        diff.delta_log_joint += lp
        diff.structural = True
        if not observed:
            diff.fresh_log_prob += lp
    world._mb_cache.clear()
    return world.nodes[address]


def instantiate_node(world: World, model: Model, address: Address) -> NodeState:
    """Add ``address`` (and any missing ancestors) to the world."""
    if address in world.nodes:
        raise ModelError(f"{address} already instantiated")
    return _instantiate(world, model, address, [], None)


def ancestral_sample(model: Model, rng: np.random.Generator, observe=None) -> World:
    """Instantiate every node reachable from the model's roots.

    ``observe=None`` clamps the model's declared observations; pass a mapping
    (possibly empty) to clamp exactly those values instead.
    """
    world = World(model, rng, observed=observe)
    # children are linked in one go at the end; growing frozensets one child
    # at a time is quadratic in the fan-out
    world._pending_children = {}
    try:
        for r in sorted(world.roots):
            if r not in world.nodes:
                _instantiate(world, model, r, [], None)
    finally:
        pending, world._pending_children = world._pending_children, None
        for a, kids in pending.items():
            n = world.nodes[a]
            world.nodes[a] = NodeState(n.address, n.dist, n.value, n.observed, n.parents,
                                       n.children | frozenset(kids), n.log_prob)
    return world


# ---------------------------------------------------------------------------
# queries


def _blanket(world: World, address: Address) -> tuple[Address, ...]:
    cached = world._mb_cache.get(address)
    if cached is not None:
        return cached
    nodes = world.nodes
    node = nodes.get(address)
    if node is None:
        raise UnknownAddressError(address)
    members = set(node.parents)
    members.update(node.children)
    for c in node.children:
        members.update(nodes[c].parents)
    members.discard(address)
    out = tuple(sorted(members))
    world._mb_cache[address] = out
    return out


def markov_blanket(world: World, address: Address) -> list[Address]:
    """Parents, children and co-parents of ``address`` in address order."""
    return list(_blanket(world, address))


def mb_log_prob(world: World, address: Address) -> float:
    """log p(x | parents) + sum over children of log p(child | its parents)."""
    node = world.nodes.get(address)
    if node is None:
        raise UnknownAddressError(address)
    return node.log_prob + sum(world.nodes[c].log_prob for c in sorted(node.children))


def _is_ancestor(world: World, candidate: Address, of: Address) -> bool:
    seen = set()
    todo = [of]
    while todo:
        a = todo.pop()
        if a == candidate:
            return True
        if a in seen:
            continue
        seen.add(a)
        todo.extend(world.nodes[a].parents)
    return False


# ---------------------------------------------------------------------------
# mutation


def set_value(world: World, model: Model, address: Address, new_value) -> WorldDiff:
    """Replace one latent value and propagate to its children."""
    node = world.nodes.get(address)
    if node is None:
        raise UnknownAddressError(address)
    if node.observed:
        raise ObservedMutationError(f"{address} is observed")
    lp = node.dist.log_prob(new_value)
    if not lp > -math.inf:
        raise SupportError(f"{new_value!r} is outside the support of {address}")

    diff = WorldDiff(next(_diff_ids), world.log_joint)
    world._applied.append(diff.id)
    if type(new_value) is type(node.value) and new_value == node.value:
        return diff

    try:
        _propagate(world, model, node, new_value, lp, diff)
    except BaseException:
        _restore(world, diff)
        world._applied.pop()
        raise
    return diff


def _propagate(world, model, node, new_value, lp, diff) -> None:
    nodes = world.nodes
    address = node.address
    _save(world, diff, address)
    nodes[address] = NodeState(address, node.dist, new_value, False, node.parents, node.children, lp)
    delta = lp - node.log_prob
    stack: list = []
    edges_removed = False
    for child in sorted(node.children):
        old = nodes.get(child)
        if old is None:
            continue
        dist, parents = _evaluate(world, model, child, stack, diff)
        clp = dist.log_prob(old.value)
        if parents != old.parents:
            diff.structural = True
            for p in parents - old.parents:
                if _is_ancestor(world, child, p):
                    raise CycleError(f"{child} would become an ancestor of itself via {p}")
                _link(world, diff, p, child, add=True)
            for p in old.parents - parents:
                _link(world, diff, p, child, add=False)
                edges_removed = True
        cur = nodes[child]
        _save(world, diff, child)
        nodes[child] = NodeState(child, dist, old.value, old.observed, parents, cur.children, clp)
        delta += clp - old.log_prob
    # created nodes were already added to world.log_joint by _instantiate
    delta_created = diff.delta_log_joint
    if edges_removed:
        delta -= _collect_garbage(world, diff)
    diff.delta_log_joint = delta + delta_created
    world.log_joint = diff.old_log_joint + diff.delta_log_joint
    if diff.structural:
        world._mb_cache.clear()


def _collect_garbage(world: World, diff: WorldDiff) -> float:
    nodes = world.nodes
    alive = set()
    todo = [r for r in world.roots if r in nodes]
    while todo:
        a = todo.pop()
        if a in alive:
            continue
        alive.add(a)
        todo.extend(nodes[a].parents)
    dead = sorted(a for a in nodes if a not in alive)
    removed = 0.0
    dead_set = set(dead)
    for a in dead:
        n = nodes[a]
        for p in n.parents:
            if p not in dead_set:
                _link(world, diff, p, a, add=False)
    for a in dead:
        n = nodes.pop(a)
        removed += n.log_prob
        if a in diff.created:
            del diff.created[a]
            if not n.observed:
                diff.fresh_log_prob -= n.log_prob
        else:
            original = diff.changed.pop(a, n)
            diff.destroyed[a] = original
            if not original.observed:
                diff.stale_log_prob += original.log_prob
    return removed


def _restore(world: World, diff: WorldDiff) -> None:
    nodes = world.nodes
    for a in diff.created:
        nodes.pop(a, None)
    for a, s in diff.changed.items():
        nodes[a] = s
    for a, s in diff.destroyed.items():
        nodes[a] = s
    world.log_joint = diff.old_log_joint
    if diff.structural or diff.created or diff.destroyed:
        world._mb_cache.clear()


def revert(world: World, diff: WorldDiff) -> None:
    """Undo the most recent unreverted :func:`set_value`."""
    if not world._applied or world._applied[-1] != diff.id:
        raise StaleDiffError("diff is not the most recent unreverted mutation")
    world._applied.pop()
    _restore(world, diff)


def validate(world: World, tol: float = 1e-9) -> None:
    """Assert cache coherence, edge mirroring, acyclicity and the log-joint sum."""
    nodes = world.nodes
    for a, n in nodes.items():
        assert n.address == a
        lp = n.dist.log_prob(n.value)
        assert lp == n.log_prob or (math.isnan(lp) and math.isnan(n.log_prob)), f"stale log_prob at {a}"
        for p in n.parents:
            assert a in nodes[p].children, f"edge {p}->{a} not mirrored"
        for c in n.children:
            assert a in nodes[c].parents, f"edge {a}->{c} not mirrored"
        if not n.observed and isinstance(n.value, float):
            assert math.isfinite(n.value)
    total = world.recompute_log_joint()
    if math.isfinite(total):
        assert abs(total - world.log_joint) <= tol, (total, world.log_joint)
    order = {}
    for a in nodes:
        _topo_visit(world, a, order, set())


def _topo_visit(world, a, done, active):
    if a in done:
        return
    if a in active:
        raise CycleError(f"cycle through {a}")
    active.add(a)
    for p in world.nodes[a].parents:
        _topo_visit(world, p, done, active)
    active.discard(a)
    done[a] = True
