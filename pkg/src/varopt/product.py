"""KD-tree hierarchies over d-dimensional keys and box-query analysis.

For product domains (each axis ordered or hierarchical, queries are axis
parallel boxes) the sampler builds a binary tree by cutting axes in
round-robin order at the weighted median of the inclusion probabilities, then
aggregates bottom-up through that tree.  Cells whose probability mass has
dropped to at most 1 ("unit cells") hold at most one sampled key each, and an
axis-parallel hyperplane can only cut ``O(s^((d-1)/d))`` of them, which is
what bounds the discrepancy of box queries.

Hierarchical axes are flattened once per build: children are linearized
depth-first in decreasing subtree-mass order, so every hierarchy node spans a
contiguous ordinal interval and cuts between consecutive ordinals always fall
on a subtree boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .core import SummaryState, Sample, compute_threshold, ipps_probabilities, make_sample
from .aggregate import as_rng, _snap_leftover
from .structures import HierarchyDomain, _merge

__all__ = [
    "ProductDomain",
    "KdNode",
    "KdTree",
    "BoxQuery",
    "build_kd_tree",
    "summarize_product",
    "boundary_cells",
    "interior_cover",
    "to_hierarchy_domain",
    "validate_kd_tree",
    "unit_cell_depth_limit",
]

INSIDE, OUTSIDE, PARTIAL = 1, -1, 0

# float slack when comparing probability masses against integers
MASS_TOL = 1e-9


def _mass_sum(probs, ids):
    vals = [probs[i] for i in ids]
    if any(isinstance(v, float) for v in vals):
        return math.fsum(vals)
    return sum(vals)


@dataclass(frozen=True)
class ProductDomain:
    """Axis descriptors: ``"ordered"`` or a HierarchyDomain per axis.

    On ordered axes the key coordinate is its position; on hierarchy axes the
    coordinate is the id of a leaf of that axis' tree.
    """

    axes: tuple

    def __post_init__(self):
        if not self.axes:
            raise ValueError("need at least one axis")
        for a in self.axes:
            if a != "ordered" and not isinstance(a, HierarchyDomain):
                raise ValueError(f"unsupported axis spec {a!r}")

    @property
    def dim(self) -> int:
        return len(self.axes)

    @classmethod
    def ordered(cls, d: int) -> "ProductDomain":
        return cls(("ordered",) * d)


class _AxisLayout:
    """Key -> position on one axis, plus ordinal spans of hierarchy nodes."""

    def __init__(self, axis_spec, keys, probs, subset, axis_index):
        self.axis_index = axis_index
        self.hierarchy = axis_spec if isinstance(axis_spec, HierarchyDomain) else None
        if self.hierarchy is None:
            self.ordinal = None
            self.node_span = None
            return
        dom = self.hierarchy
        slot_mass = [0] * dom.n_keys
        for i in subset:
            slot_mass[keys[i].coords[axis_index]] += probs[i]
        node_mass = dom.node_sums(slot_mass)
        # depth-first, children by decreasing subtree mass (node id breaks ties)
        ordinal = [0] * dom.n_keys
        span_lo = [0] * dom.n_nodes
        span_hi = [0] * dom.n_nodes
        counter = 0
        stack = [(dom.root, False)]
        while stack:
            v, expanded = stack.pop()
            if expanded:
                span_hi[v] = counter - 1
                continue
            span_lo[v] = counter
            for slot in dom.leaf_keys[v]:
                ordinal[slot] = counter
                counter += 1
            stack.append((v, True))
            kids = sorted(dom.children[v], key=lambda c: (-node_mass[c], c))
            stack.extend(reversed(kids))
        # span_lo of internal nodes must cover their subtrees
        for v in reversed(dom.post_order()):
            for c in dom.children[v]:
                span_lo[v] = min(span_lo[v], span_lo[c])
        self.ordinal = ordinal
        self.node_span = list(zip(span_lo, span_hi))

    def position(self, key) -> int:
        c = key.coords[self.axis_index]
        if self.ordinal is None:
            return c
        return self.ordinal[c]


@dataclass
class KdNode:
    depth: int
    mass: float
    lo: tuple
    hi: tuple
    axis: int | None = None       # None for leaves and index splits
    split: int | None = None      # cut position: left gets positions <= split
    left: "KdNode | None" = None
    right: "KdNode | None" = None
    key: int | None = None        # singleton leaf payload
    is_unit_cell: bool = False

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class KdTree:
    root: KdNode
    layouts: list
    domain: ProductDomain
    target_size: int
    unit_cells: list = field(default_factory=list)

    def position(self, key, axis: int) -> int:
        return self.layouts[axis].position(key)

    def locate(self, key) -> KdNode:
        """Descend to the leaf whose region contains the key's position."""
        node = self.root
        while not node.is_leaf:
            if node.axis is None:
                node = node.left  # degenerate index split: one side by convention
            elif self.position(key, node.axis) <= node.split:
                node = node.left
            else:
                node = node.right
        return node

    def leaves(self) -> list[KdNode]:
        out = []
        stack = [self.root]
        while stack:
            v = stack.pop()
            if v.is_leaf:
                out.append(v)
            else:
                stack.extend((v.right, v.left))
        return out

    def box(self, per_axis) -> "BoxQuery":
        """Build a box query from per-axis (lo, hi) coordinate pairs or, on
        hierarchy axes, a node id of that axis' tree."""
        intervals = []
        for ax, spec in enumerate(per_axis):
            layout = self.layouts[ax]
            if layout.hierarchy is None:
                lo, hi = spec
            elif isinstance(spec, tuple):
                lo, hi = spec  # explicit ordinal interval
            else:
                lo, hi = layout.node_span[spec]
            intervals.append((int(lo), int(hi)))
        return BoxQuery(tuple(intervals))

    def box_members(self, keys, box: "BoxQuery", subset=None) -> list[int]:
        idx = range(len(keys)) if subset is None else subset
        out = []
        for i in idx:
            k = keys[i]
            if all(a <= self.position(k, ax) <= b
                   for ax, (a, b) in enumerate(box.intervals)):
                out.append(i)
        return out


@dataclass(frozen=True)
class BoxQuery:
    """Axis-parallel box: inclusive per-axis position intervals."""

    intervals: tuple


def unit_cell_depth_limit(s: int) -> int:
    """Depth by which every root-to-leaf path has reached unit mass."""
    return 2 + math.ceil(math.log2(max(2, s)))


def build_kd_tree(keys, probs, domain: ProductDomain, subset=None,
                  target_size: int | None = None) -> KdTree:
    """Recursive weighted-median construction down to singleton key sets.

    ``probs`` must be in (0, 1) for every key in ``subset`` (callers set keys
    with probability 1 aside first).  Ordered axes cut at the position
    minimizing the mass imbalance without separating equal coordinates;
    hierarchy axes cut between consecutive ordinals of the canonical
    linearization.  If every axis is constant on a key set, the set is split
    in index halves so construction always terminates.
    """
    if subset is None:
        subset = [i for i, p in enumerate(probs) if p > 0]
    subset = list(subset)
    if not subset:
        raise ValueError("empty key set")
    d = domain.dim
    layouts = [_AxisLayout(domain.axes[a], keys, probs, subset, a) for a in range(d)]
    pos = [[layouts[a].position(keys[i]) for i in subset] for a in range(d)]
    pos_of = [dict(zip(subset, pos[a])) for a in range(d)]
    if target_size is None:
        target_size = max(1, round(_mass_sum(probs, subset)))

    lo0 = tuple(min(pos[a]) - 1 for a in range(d))
    hi0 = tuple(max(pos[a]) for a in range(d))

    def recurse(key_ids: list[int], depth: int, lo: tuple, hi: tuple) -> KdNode:
        mass = _mass_sum(probs, key_ids)
        if len(key_ids) == 1:
            return KdNode(depth, mass, lo, hi, key=key_ids[0])
        node = KdNode(depth, mass, lo, hi)
        for step in range(d):
            axis = (depth + step) % d
            ranked = sorted(key_ids, key=lambda i: pos_of[axis][i])
            cut = _best_cut(ranked, pos_of[axis], probs)
            if cut is None:
                continue
            split_pos, at = cut
            node.axis, node.split = axis, split_pos
            left_lo, left_hi = lo, list(hi)
            right_lo = list(lo)
            left_hi[axis] = split_pos
            right_lo[axis] = split_pos
            node.left = recurse(ranked[:at], depth + 1, lo, tuple(left_hi))
            node.right = recurse(ranked[at:], depth + 1, tuple(right_lo), hi)
            return node
        # all axes constant on this key set: split by index halves
        half = len(key_ids) // 2
        node.left = recurse(key_ids[:half], depth + 1, lo, hi)
        node.right = recurse(key_ids[half:], depth + 1, lo, hi)
        return node

    root = recurse(sorted(subset), 0, lo0, hi0)
    tree = KdTree(root, layouts, domain, target_size)
    _mark_unit_cells(tree)
    return tree


def _best_cut(ranked: list[int], position: dict, probs):
    """Cut minimizing |left mass - right mass| over distinct-position gaps.

    Returns (split position, index of first right key), or None when all
    positions coincide.  The smallest qualifying position wins ties, and keys
    with equal positions always stay together.
    """
    total = _mass_sum(probs, ranked)
    best = None
    prefix = 0
    for at in range(1, len(ranked)):
        prefix = prefix + probs[ranked[at - 1]]
        left_pos = position[ranked[at - 1]]
        if position[ranked[at]] == left_pos:
            continue
        imbalance = abs(total - 2 * prefix)
        if best is None or imbalance < best[0] - 1e-15:
            best = (imbalance, left_pos, at)
    if best is None:
        return None
    return best[1], best[2]


def _mark_unit_cells(tree: KdTree) -> None:
    cells = []
    stack = [tree.root]
    while stack:
        v = stack.pop()
        if v.mass <= 1.0 + MASS_TOL:
            v.is_unit_cell = True
            cells.append(v)
        elif not v.is_leaf:
            stack.extend((v.right, v.left))
    tree.unit_cells = cells


def _aggregate_tree(state: SummaryState, tree: KdTree, rng, trace=None) -> int:
    """Bottom-up leftover aggregation through the kd tree (post-order)."""
    leftover_of: dict[int, int] = {}
    stack = [(tree.root, False)]
    while stack:
        node, expanded = stack.pop()
        if not expanded:
            stack.append((node, True))
            if not node.is_leaf:
                stack.append((node.right, False))
                stack.append((node.left, False))
            continue
        if node.is_leaf:
            k = node.key
            leftover_of[id(node)] = -1 if state.set_mask[k] else k
            continue
        current = leftover_of.pop(id(node.left))
        rl = leftover_of.pop(id(node.right))
        if rl >= 0:
            current = _merge(state, current, rl, rng, trace) if current >= 0 else rl
        leftover_of[id(node)] = current
    return leftover_of[id(tree.root)]


def summarize_product(keys, s: int, domain: ProductDomain, rng,
                      trace: list | None = None) -> Sample:
    """Full product-domain pipeline: threshold, set p=1 keys aside, build the
    kd tree over the rest, aggregate bottom-up through it."""
    threshold = compute_threshold(keys, s)
    state = ipps_probabilities(keys, threshold)
    rng = as_rng(rng)
    light = [i for i in range(len(keys)) if not state.set_mask[i]]
    if light:
        tree = build_kd_tree(keys, state.probs, domain, subset=light, target_size=s)
        leftover = _aggregate_tree(state, tree, rng, trace)
        if leftover >= 0:
            _snap_leftover(state)
    return make_sample(keys, state.sample_indices(), threshold)


def _classify(node: KdNode, box: BoxQuery) -> int:
    inside = True
    for ax, (a, b) in enumerate(box.intervals):
        lo, hi = node.lo[ax], node.hi[ax]
        if hi <= a - 1 or lo >= b:
            return OUTSIDE
        if not (lo >= a - 1 and hi <= b):
            inside = False
    return INSIDE if inside else PARTIAL


def boundary_cells(tree: KdTree, box: BoxQuery) -> list[KdNode]:
    """Unit cells straddling the box boundary (neither inside nor outside)."""
    out = []
    stack = [tree.root]
    while stack:
        v = stack.pop()
        if _classify(v, box) != PARTIAL:
            continue
        if v.is_unit_cell or v.is_leaf:
            out.append(v)
        else:
            stack.extend((v.right, v.left))
    return out


def interior_cover(tree: KdTree, box: BoxQuery) -> list[KdNode]:
    """Maximal nodes lying entirely inside or entirely outside the box.

    Together with the boundary cells these cover the whole tree, and no
    returned node contains a boundary cell.  Their count is at most the
    number of boundary cells times the tree depth.
    """
    out = []
    stack = [tree.root]
    while stack:
        v = stack.pop()
        side = _classify(v, box)
        if side != PARTIAL:
            out.append(v)
            continue
        if v.is_unit_cell or v.is_leaf:
            continue  # boundary cell
        stack.extend((v.right, v.left))
    return out


def to_hierarchy_domain(tree: KdTree) -> HierarchyDomain:
    """View the kd tree as a key hierarchy (children ordered left, right).

    Requires every key to appear in the tree, i.e. no keys were set aside;
    used to drive the exact enumeration oracle over the product policy.
    """
    parent: list[int] = []
    children: list[list[int]] = []
    leaf_keys: list[list[int]] = []

    def new_node(par: int) -> int:
        parent.append(par)
        children.append([])
        leaf_keys.append([])
        return len(parent) - 1

    root = new_node(-1)
    stack = [(tree.root, root)]
    n_keys = 0
    while stack:
        node, nid = stack.pop()
        if node.is_leaf:
            leaf_keys[nid].append(node.key)
            n_keys += 1
            continue
        left = new_node(nid)
        right = new_node(nid)
        children[nid].extend((left, right))
        stack.append((node.right, right))
        stack.append((node.left, left))
    return HierarchyDomain(parent, children, leaf_keys, root, n_keys)


def validate_kd_tree(tree: KdTree, s: int | None = None) -> None:
    """Assert the structural bounds used by the analysis.

    Every node at depth t has mass at most ``s/2^t + 2``; every unit cell
    sits at depth at most ``2 + ceil(log2 s)``; the singleton leaves
    partition the key set.
    """
    s = s if s is not None else tree.target_size
    depth_cap = unit_cell_depth_limit(s)
    seen = []
    stack = [tree.root]
    while stack:
        v = stack.pop()
        limit = s / (2 ** v.depth) + 2
        if v.mass > limit + MASS_TOL:
            raise AssertionError(
                f"mass bound violated at depth {v.depth}: {v.mass} > {limit}")
        if v.is_unit_cell and v.depth > depth_cap:
            raise AssertionError(
                f"unit cell at depth {v.depth} exceeds cap {depth_cap}")
        if v.is_leaf:
            seen.append(v.key)
        else:
            stack.extend((v.right, v.left))
    if len(seen) != len(set(seen)):
        raise AssertionError("leaves do not partition the key set")
