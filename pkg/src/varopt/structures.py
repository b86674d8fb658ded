"""Structure-aware pair selection for ordered, hierarchical, and partitioned keys.

The guarantees come from where probability mass is allowed to move:

* disjoint ranges -- aggregate inside a range while possible, only then across
  ranges; every range ends up with the floor or ceiling of its mass (max
  discrepancy below 1).
* hierarchy -- aggregate the pair whose lowest common ancestor is deepest,
  implemented bottom-up by merging at most one leftover key per child; every
  subtree ends up with the floor or ceiling of its mass.
* order -- a left-to-right scan keeping a single active key; every prefix gets
  the floor or ceiling of its prefix sum, hence every interval has
  discrepancy below 2.

The module also provides the deterministic interval construction and
systematic sampling, both with discrepancy below 1 on all intervals (the
latter is a proper random sample but with correlated inclusions, so it keeps
the marginals and the fixed size without the full product bounds).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import EPS_NUM, SummaryState, Sample, compute_threshold, ipps_probabilities, make_sample
from .aggregate import as_rng, pair_aggregate, _snap_leftover

__all__ = [
    "HierarchyDomain",
    "OrderDomain",
    "DisjointRangeDomain",
    "summarize_hierarchy",
    "summarize_order",
    "summarize_disjoint",
    "hierarchy_policy",
    "order_policy",
    "disjoint_policy",
    "deterministic_order_set",
    "systematic_sample",
    "batch_summarize_order",
    "sample_hierarchy",
    "sample_order",
    "sample_disjoint",
    "snapped_cumsum",
]


class HierarchyDomain:
    """Rooted tree with keys attached to leaves.

    Built from a nested spec: an int is a leaf holding that key index, a list
    is an internal node whose children keep the given order.  The child order
    fixes the deterministic aggregation order (and tie-breaking).  A leaf may
    hold several keys only via duplicate ints at the same position; normally
    every key sits in its own leaf.
    """

    def __init__(self, parent: list[int], children: list[list[int]],
                 leaf_keys: list[list[int]], root: int, n_keys: int):
        self.parent = parent
        self.children = children
        self.leaf_keys = leaf_keys
        self.root = root
        self.n_keys = n_keys
        self.n_nodes = len(parent)
        self._post_order: list[int] | None = None
        self.leaf_of = [-1] * n_keys
        for v, keys in enumerate(leaf_keys):
            for k in keys:
                if self.leaf_of[k] != -1:
                    raise ValueError(f"key {k} assigned to two leaves")
                self.leaf_of[k] = v
        if any(v == -1 for v in self.leaf_of):
            raise ValueError("every key must map to exactly one leaf")

    @classmethod
    def from_nested(cls, spec) -> "HierarchyDomain":
        parent: list[int] = []
        children: list[list[int]] = []
        leaf_keys: list[list[int]] = []
        max_key = -1

        def new_node(par: int) -> int:
            parent.append(par)
            children.append([])
            leaf_keys.append([])
            return len(parent) - 1

        root = new_node(-1)
        stack = [(spec, root)]
        while stack:
            node_spec, node = stack.pop()
            if isinstance(node_spec, int):
                leaf_keys[node].append(node_spec)
                max_key = max(max_key, node_spec)
                continue
            if not node_spec:
                raise ValueError("internal node with no children")
            kids = [new_node(node) for _ in node_spec]
            children[node].extend(kids)
            # reversed so the stack pops children in spec order
            for child_spec, kid in reversed(list(zip(node_spec, kids))):
                stack.append((child_spec, kid))
        return cls(parent, children, leaf_keys, root, max_key + 1)

    @classmethod
    def path(cls, n: int) -> "HierarchyDomain":
        """Prefix hierarchy: a path with one leaf under each internal node.

        The internal node at height m covers keys 0..m, so the ranges are
        exactly the prefixes of the key order.
        """
        if n < 1:
            raise ValueError("need at least one key")
        spec: object = 0
        for k in range(1, n):
            spec = [spec, k]
        return cls.from_nested(spec)

    @classmethod
    def flat(cls, range_of: Sequence[int]) -> "HierarchyDomain":
        """Two-level hierarchy whose internal nodes are the disjoint ranges."""
        groups: dict[int, list[int]] = {}
        for key, rid in enumerate(range_of):
            groups.setdefault(rid, []).append(key)
        return cls.from_nested([[k for k in groups[rid]] for rid in sorted(groups)])

    def post_order(self) -> list[int]:
        if self._post_order is None:
            order = []
            stack = [(self.root, False)]
            while stack:
                v, expanded = stack.pop()
                if expanded:
                    order.append(v)
                    continue
                stack.append((v, True))
                for c in reversed(self.children[v]):
                    stack.append((c, False))
            self._post_order = order
        return self._post_order

    def node_sums(self, per_key_values) -> list:
        """Per-node sums of a per-key vector (mass, membership, ...)."""
        sums = [0] * self.n_nodes
        for v in self.post_order():
            acc = 0
            for k in self.leaf_keys[v]:
                acc += per_key_values[k]
            for c in self.children[v]:
                acc += sums[c]
            sums[v] = acc
        return sums

    def keys_under(self, node: int) -> list[int]:
        out = []
        stack = [node]
        while stack:
            v = stack.pop()
            out.extend(self.leaf_keys[v])
            stack.extend(self.children[v])
        return out

    def depths(self) -> list[int]:
        depth = [0] * self.n_nodes
        for v in reversed(self.post_order()):
            for c in self.children[v]:
                depth[c] = depth[v] + 1
        return depth

    def linear_order(self) -> list[int]:
        """Keys in depth-first order; any hierarchy range is contiguous in it."""
        out = []
        stack = [self.root]
        while stack:
            v = stack.pop()
            out.extend(self.leaf_keys[v])
            stack.extend(reversed(self.children[v]))
        return out


@dataclass(frozen=True)
class OrderDomain:
    """Keys under a linear order; ranges are the contiguous intervals."""

    order: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.order))):
            raise ValueError("order must be a permutation of all key indices")

    @classmethod
    def identity(cls, n: int) -> "OrderDomain":
        return cls(tuple(range(n)))

    @classmethod
    def from_keys(cls, keys, axis: int = 0) -> "OrderDomain":
        ranked = sorted(range(len(keys)), key=lambda i: (keys[i].coords[axis], i))
        return cls(tuple(ranked))


@dataclass(frozen=True)
class DisjointRangeDomain:
    """A partition of the keys; ranges are the parts."""

    range_of: tuple[int, ...]

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "DisjointRangeDomain":
        return cls(tuple(labels))

    def range_ids(self) -> list[int]:
        return sorted(set(self.range_of))

    def members(self, rid: int) -> list[int]:
        return [k for k, r in enumerate(self.range_of) if r == rid]


def _scan_aggregate(state: SummaryState, keys: Sequence[int], rng,
                    trace: list | None, active: int = -1) -> int:
    """Aggregate ``keys`` left to right against a running active key.

    Returns the index of the surviving unset key, or -1.
    """
    mask = state.set_mask
    for k in keys:
        if mask[k]:
            continue
        if active < 0:
            active = k
            continue
        if trace is not None:
            trace.append((active, k))
        pair_aggregate(state, active, k, rng.random())
        if mask[active]:
            active = k if not mask[k] else -1
    return active


def summarize_order(state: SummaryState, dom: OrderDomain, rng,
                    trace: list | None = None) -> set[int]:
    """Left-to-right scan; every prefix count is the floor or ceiling of its
    prefix sum, so every interval has discrepancy below 2."""
    rng = as_rng(rng)
    leftover = _scan_aggregate(state, dom.order, rng, trace)
    if leftover >= 0:
        _snap_leftover(state)
    return state.sample_indices()


def summarize_disjoint(state: SummaryState, dom: DisjointRangeDomain, rng,
                       trace: list | None = None) -> set[int]:
    """Aggregate within each range until at most one unset key remains there,
    then aggregate the per-range leftovers across ranges."""
    rng = as_rng(rng)
    leftovers = []
    for rid in dom.range_ids():
        res = _scan_aggregate(state, dom.members(rid), rng, trace)
        if res >= 0:
            leftovers.append(res)
    final = _scan_aggregate(state, leftovers, rng, trace)
    if final >= 0:
        _snap_leftover(state)
    return state.sample_indices()


def summarize_hierarchy(state: SummaryState, dom: HierarchyDomain, rng,
                        trace: list | None = None) -> set[int]:
    """Bottom-up aggregation: each node merges the at most one leftover key
    from each child, in child order, leaving at most one leftover itself.

    Equivalent to always aggregating a pair with deepest lowest common
    ancestor, without the quadratic pair search; every node's final count is
    the floor or ceiling of its probability mass.
    """
    rng = as_rng(rng)
    mask = state.set_mask
    leftover = [-1] * dom.n_nodes
    for v in dom.post_order():
        current = -1
        for k in dom.leaf_keys[v]:
            if not mask[k]:
                current = _merge(state, current, k, rng, trace)
        for c in dom.children[v]:
            if leftover[c] >= 0:
                current = _merge(state, current, leftover[c], rng, trace)
        leftover[v] = current
    if leftover[dom.root] >= 0:
        _snap_leftover(state)
    return state.sample_indices()


def _merge(state: SummaryState, current: int, k: int, rng, trace) -> int:
    if current < 0:
        return k
    if trace is not None:
        trace.append((current, k))
    pair_aggregate(state, current, k, rng.random())
    if not state.set_mask[current]:
        return current
    if not state.set_mask[k]:
        return k
    return -1


def order_policy(dom: OrderDomain):
    """Pair-selection equivalent of the order scan: first two unset keys."""

    def select(state: SummaryState) -> tuple[int, int]:
        found = -1
        for k in dom.order:
            if state.set_mask[k]:
                continue
            if found < 0:
                found = k
            else:
                return found, k
        raise ValueError("fewer than two unset entries")

    return select


def disjoint_policy(dom: DisjointRangeDomain):
    """Within-range pairs first (lowest range id), then cross-range leftovers."""

    range_ids = dom.range_ids()

    def select(state: SummaryState) -> tuple[int, int]:
        leftovers = []
        for rid in range_ids:
            unset = [k for k in dom.members(rid) if not state.set_mask[k]]
            if len(unset) >= 2:
                return unset[0], unset[1]
            if unset:
                leftovers.append(unset[0])
        if len(leftovers) >= 2:
            return leftovers[0], leftovers[1]
        raise ValueError("fewer than two unset entries")

    return select


def hierarchy_policy(dom: HierarchyDomain):
    """Pair with the deepest lowest common ancestor, ties resolved by the
    post-order position of the ancestor and then by child order.

    Matches the pair sequence of ``summarize_hierarchy`` exactly.
    """

    def select(state: SummaryState) -> tuple[int, int]:
        count = [0] * dom.n_nodes
        first = [-1] * dom.n_nodes
        for v in dom.post_order():
            candidates = [k for k in dom.leaf_keys[v] if not state.set_mask[k]]
            # children precede v in post order, so each holds at most one
            candidates.extend(first[c] for c in dom.children[v] if count[c])
            if len(candidates) >= 2:
                return candidates[0], candidates[1]
            count[v] = len(candidates)
            first[v] = candidates[0] if candidates else -1
        raise ValueError("fewer than two unset entries")

    return select


def snapped_cumsum(values):
    """Running sums with near-integer results snapped to the integer.

    Keeps the half-open interval construction exact in float mode; exact
    rationals pass through untouched.
    """
    out = []
    acc = 0
    for v in values:
        acc = acc + v
        if isinstance(acc, float):
            nearest = round(acc)
            if abs(acc - nearest) <= EPS_NUM * max(1.0, abs(acc)):
                acc = float(nearest)
        out.append(acc)
    return out


def deterministic_order_set(probs, order: Sequence[int] | None = None) -> set[int]:
    """Deterministic set with interval discrepancy below 1.

    Key ``i`` owns the interval ``(c_{i-1}, c_i]`` of the cumulative
    probability axis and is included iff that interval contains an integer.
    Requires an integral probability sum; returns exactly that many keys.
    """
    order = list(order) if order is not None else list(range(len(probs)))
    cums = snapped_cumsum(probs[k] for k in order)
    chosen = set()
    prev = 0
    for pos, k in enumerate(order):
        cur = cums[pos]
        if math.floor(cur) > prev:
            chosen.add(k)
        prev = cur
    return chosen


def systematic_sample(probs, alpha: float, order: Sequence[int] | None = None) -> set[int]:
    """Systematic sample: keys whose cumulative interval contains ``h + alpha``.

    Satisfies the marginals and the fixed sample size of a VarOpt scheme and
    has interval discrepancy below 1, but inclusions are correlated, so the
    product bounds on joint inclusion do not hold in general.
    """
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    order = list(order) if order is not None else list(range(len(probs)))
    cums = snapped_cumsum(probs[k] for k in order)
    chosen = set()
    prev = 0
    for pos, k in enumerate(order):
        cur = cums[pos]
        # an h with prev < h + alpha <= cur exists iff floor(cur - alpha) > prev - alpha
        if math.floor(cur - alpha) > prev - alpha:
            chosen.add(k)
        prev = cur
    return chosen


def batch_summarize_order(probs, ndraws: int, rng) -> np.ndarray:
    """Vectorized order-scan sampler: ``ndraws`` independent draws at once.

    Returns a boolean membership matrix of shape (ndraws, n).  Entries with
    probability 1 are included in every draw; the scan state (active key and
    its probability) is carried per draw.  Used by the statistical test
    batteries, where scalar draws would be too slow.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("probs must be one-dimensional")
    total = float(p.sum())
    if abs(total - round(total)) > EPS_NUM * max(1.0, total):
        raise ValueError("probability sum must be integral")
    n = p.shape[0]
    members = np.zeros((ndraws, n), dtype=bool)
    rows = np.arange(ndraws)
    active_idx = np.full(ndraws, -1, dtype=np.int64)
    active_p = np.zeros(ndraws, dtype=np.float64)
    for i in range(n):
        pi = p[i]
        if pi >= 1.0:
            members[:, i] = True
            continue
        if pi <= 0.0:
            raise ValueError("probabilities must be positive")
        # draws with an empty slot adopt key i directly, the rest aggregate
        fresh = active_p == 0.0
        agg = ~fresh
        tot = active_p + pi
        u = rng.random(ndraws)
        high = agg & (tot >= 1.0 - EPS_NUM)
        low = agg & ~high
        # low branch: active keeps the mass or key i takes over
        keep = low & (u * tot < active_p)
        hand = low & ~keep
        active_p[keep] = tot[keep]
        active_idx[hand] = i
        active_p[hand] = tot[hand]
        # high branch: one of the two is promoted to the sample
        leftover = np.maximum(tot - 1.0, 0.0)
        promote_active = high & (u * (2.0 - tot) < 1.0 - pi)
        promote_new = high & ~promote_active
        if promote_active.any():
            members[rows[promote_active], active_idx[promote_active]] = True
            active_idx[promote_active] = i
            active_p[promote_active] = leftover[promote_active]
        if promote_new.any():
            members[promote_new, i] = True
            active_p[promote_new] = leftover[promote_new]
        active_idx[fresh] = i
        active_p[fresh] = pi
    final = active_p > 0.5
    settled = np.abs(active_p - np.round(active_p)) <= 1e-6
    if not settled.all():
        raise AssertionError("nonintegral leftover after the scan")
    members[rows[final], active_idx[final]] = True
    return members


def _prepare(keys, s: int, rng):
    threshold = compute_threshold(keys, s)
    state = ipps_probabilities(keys, threshold)
    return threshold, state, as_rng(rng)


def sample_order(keys, s: int, rng, dom: OrderDomain | None = None) -> Sample:
    """Threshold + probabilities + order scan, packaged into a Sample."""
    threshold, state, rng = _prepare(keys, s, rng)
    dom = dom if dom is not None else OrderDomain.from_keys(keys)
    picked = summarize_order(state, dom, rng)
    return make_sample(keys, picked, threshold)


def sample_hierarchy(keys, s: int, dom: HierarchyDomain, rng) -> Sample:
    threshold, state, rng = _prepare(keys, s, rng)
    picked = summarize_hierarchy(state, dom, rng)
    return make_sample(keys, picked, threshold)


def sample_disjoint(keys, s: int, dom: DisjointRangeDomain, rng) -> Sample:
    threshold, state, rng = _prepare(keys, s, rng)
    picked = summarize_disjoint(state, dom, rng)
    return make_sample(keys, picked, threshold)
