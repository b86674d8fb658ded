"""Weighted keys, IPPS thresholds, and Horvitz-Thompson estimation.

A sample drawn with inclusion probability proportional to size (IPPS) keeps
key ``i`` with probability ``p_i = min(1, w_i / tau)``.  The threshold ``tau``
is the unique scale at which these probabilities add up to the requested
sample size ``s``.  Keys at least as heavy as ``tau`` are always kept and
contribute their exact weight to estimates; lighter sampled keys are counted
with adjusted weight ``tau``.  Subset-sum estimates built this way are
unbiased, and the number of sampled keys falling in any fixed subset obeys
Chernoff-style tail bounds.

All numeric routines are generic over ``float`` and ``fractions.Fraction``:
the float path is the production mode, the rational path feeds the exact
distribution oracles used by the test suite.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

__all__ = [
    "EPS_NUM",
    "WeightedKey",
    "Threshold",
    "SummaryState",
    "Sample",
    "TailBoundQuery",
    "ThresholdTracker",
    "compute_threshold",
    "solve_threshold",
    "ipps_probabilities",
    "ht_estimate",
    "tail_bound",
    "make_sample",
]

# Relative tolerance for float residuals (sums of probabilities, thresholds).
EPS_NUM = 1e-9


@dataclass(frozen=True)
class WeightedKey:
    """One record: an opaque id, integer coordinates (one per axis), a weight.

    Weights must be strictly positive; zero-weight records are rejected at
    ingestion.  Ids are unique within a dataset.  Library helpers that take a
    parallel ``probs`` vector assume it is indexed like the key list, and the
    default ingestion path assigns ``id == position``.
    """

    id: int
    coords: tuple[int, ...]
    weight: float

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError(f"negative weight {self.weight!r} for key {self.id!r}")


@dataclass(frozen=True)
class Threshold:
    """IPPS threshold ``tau`` for a target sample size ``s``.

    Satisfies ``sum_i min(1, w_i/tau) == s`` (within EPS_NUM in float mode).
    """

    tau: float
    target_size: int


class SummaryState:
    """Vector of per-key inclusion probabilities mid-aggregation.

    ``probs[i]`` lives in [0, 1]; ``set_mask[i]`` marks entries that have been
    fixed at 0 or 1 and may never change again.  The sum of the vector is
    invariant under every aggregation step.
    """

    __slots__ = ("probs", "set_mask", "threshold")

    def __init__(self, probs, set_mask=None, threshold: Threshold | None = None):
        self.probs = list(probs)
        if set_mask is None:
            set_mask = [p == 0 or p == 1 for p in self.probs]
        self.set_mask = list(set_mask)
        if len(self.set_mask) != len(self.probs):
            raise ValueError("set_mask length must match probs")
        self.threshold = threshold

    def __len__(self):
        return len(self.probs)

    def copy(self) -> "SummaryState":
        return SummaryState(self.probs, self.set_mask, self.threshold)

    def total(self):
        return _vec_sum(self.probs)

    def unset_indices(self) -> list[int]:
        return [i for i, done in enumerate(self.set_mask) if not done]

    def sample_indices(self) -> set[int]:
        """Indices fixed at 1."""
        return {i for i, p in enumerate(self.probs) if self.set_mask[i] and p == 1}


@dataclass
class Sample:
    """A fixed-size sample: member key ids, the threshold, exact heavy weights.

    Every key with ``w >= tau`` is a member and is stored with its exact
    weight in ``heavy``; light members are estimated with adjusted weight
    ``tau``.
    """

    members: frozenset
    threshold: Threshold
    heavy: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class TailBoundQuery:
    """Inputs for a Chernoff tail bound on the sample count of a subset.

    ``mu`` is the expected number of samples in the subset, ``a`` the
    deviation point, ``s`` the sample size.  Requires ``0 <= a <= s`` and
    ``mu <= s``.
    """

    mu: float
    a: float
    s: int

    def __post_init__(self):
        if not (0 <= self.a <= self.s):
            raise ValueError("deviation point a must satisfy 0 <= a <= s")
        if not (0 <= self.mu <= self.s):
            raise ValueError("mu must satisfy 0 <= mu <= s")


def _vec_sum(values):
    """Sum that is exact for rationals and compensated for floats."""
    if any(isinstance(v, float) for v in values):
        return math.fsum(values)
    return sum(values)


def _weight(item):
    return item.weight if isinstance(item, WeightedKey) else item


class ThresholdTracker:
    """One-pass IPPS threshold computation with a bounded heap.

    Processes weights one at a time; keeps at most ``s`` heavy candidates in a
    min-heap ``H`` and the total weight ``L`` of everything else, maintaining
    ``tau = L / (s - |H|)``.  A new weight below the running ``tau`` is folded
    into ``L`` directly; otherwise it enters the heap, and the heap is drained
    while it is full or its minimum drops below the updated ``tau``.
    """

    __slots__ = ("s", "heap", "light_sum", "tau", "count")

    def __init__(self, s: int):
        if s <= 0:
            raise ValueError("target size must be positive")
        self.s = s
        self.heap: list = []
        self.light_sum = 0
        self.tau = 0
        self.count = 0

    def add(self, w) -> None:
        if w <= 0:
            raise ValueError("weights must be positive")
        self.count += 1
        if w < self.tau:
            self.light_sum += w
        else:
            heapq.heappush(self.heap, w)
        self._settle()

    def _settle(self) -> None:
        s, heap = self.s, self.heap
        while True:
            if len(heap) < s:
                self.tau = self.light_sum / (s - len(heap))
            if heap and (len(heap) == s or heap[0] < self.tau):
                self.light_sum += heapq.heappop(heap)
            else:
                break

    def heavy_count(self) -> int:
        return len(self.heap)

    def value(self):
        if self.count < self.s:
            raise ValueError("sample size exceeds population")
        return self.tau


def compute_threshold(keys: Sequence, s: int) -> Threshold:
    """Threshold for sample size ``s``, computed in one pass over the keys.

    Accepts WeightedKey objects or bare weights.  Raises if ``s`` exceeds the
    population; ``s == len(keys)`` returns the degenerate threshold equal to
    the minimum weight (all probabilities 1).
    """
    tracker = ThresholdTracker(s)
    for item in keys:
        tracker.add(_weight(item))
    return Threshold(tau=tracker.value(), target_size=s)


def solve_threshold(weights: Sequence, s: int):
    """Exact threshold by scanning breakpoints of the sorted weight profile.

    Reference implementation: with the ``k`` heaviest keys saturated at
    probability 1, the candidate is ``tau_k = (sum of the rest) / (s - k)``;
    the first consistent ``k`` wins.  Works unchanged on Fractions, which is
    how the exact-arithmetic tests derive their expected values.
    """
    n = len(weights)
    if s > n:
        raise ValueError("sample size exceeds population")
    if s <= 0:
        raise ValueError("target size must be positive")
    if any(w <= 0 for w in weights):
        raise ValueError("weights must be positive")
    ws = sorted(weights, reverse=True)
    if s == n:
        return ws[-1]
    rest = sum(ws)
    for k in range(s):
        tau = rest / (s - k)
        if (k == 0 or ws[k - 1] >= tau) and ws[k] <= tau:
            return tau
        rest -= ws[k]
    raise AssertionError("no consistent threshold breakpoint")  # pragma: no cover


def ipps_probabilities(keys: Sequence, threshold: Threshold) -> SummaryState:
    """Per-key inclusion probabilities ``min(1, w/tau)`` for the given threshold.

    Entries equal to 1 are marked set.  In float mode the residual between the
    probability sum and the integer target is absorbed by nudging the largest
    unset entry, so the vector sums to the target exactly; pair aggregation
    relies on the sum being integral.
    """
    tau = threshold.tau
    s = threshold.target_size
    probs = []
    for item in keys:
        w = _weight(item)
        p = w / tau
        probs.append(1 if p >= 1 else p)
    state = SummaryState(probs, [p == 1 for p in probs], threshold)
    if any(isinstance(p, float) for p in probs):
        _snap_total(state, s)
    else:
        if sum(probs) != s:
            raise ValueError("threshold does not match target size")
    return state


def _snap_total(state: SummaryState, s: int) -> None:
    """Force the float probability vector to sum to exactly ``s``."""
    for _ in range(4):
        delta = s - math.fsum(state.probs)
        if delta == 0.0:
            return
        if abs(delta) > EPS_NUM * max(1.0, s):
            raise ValueError("threshold does not match target size")
        candidates = [i for i, done in enumerate(state.set_mask) if not done]
        if not candidates:
            if abs(delta) > EPS_NUM * max(1.0, s):
                raise ValueError("probability residual with no unset entry")
            return
        i = max(candidates, key=lambda j: state.probs[j])
        adjusted = state.probs[i] + delta
        if not 0 < adjusted < 1:
            raise ValueError("probability residual too large to absorb")
        state.probs[i] = adjusted


def make_sample(keys: Sequence[WeightedKey], member_indices: Iterable[int],
                threshold: Threshold) -> Sample:
    """Package sampled key indices into a Sample with exact heavy weights."""
    members = set()
    heavy = {}
    tau = threshold.tau
    for i in member_indices:
        k = keys[i]
        members.add(k.id)
        if k.weight >= tau:
            heavy[k.id] = k.weight
    return Sample(members=frozenset(members), threshold=threshold, heavy=heavy)


def ht_estimate(sample: Sample, subset, keys: Sequence[WeightedKey]):
    """Horvitz-Thompson estimate of the total weight of ``subset``.

    ``subset`` is a predicate over WeightedKey or a set of key ids.  Heavy
    members contribute their exact weight, light members the adjusted weight
    ``tau``; the expectation over the sampling randomness equals the true
    subset weight.
    """
    if callable(subset):
        pred = subset
    else:
        ids = set(subset)
        pred = lambda k: k.id in ids
    tau = sample.threshold.tau
    members = sample.members
    heavy = sample.heavy
    total = 0
    for k in keys:
        if not pred(k):
            continue
        if k.id in heavy:
            total += heavy[k.id]
        elif k.id in members:
            total += tau
    return total


def tail_bound(query: TailBoundQuery, direction: str = "above") -> float:
    """Chernoff bound ``e^(a-mu) * (mu/a)^a``, clamped to [0, 1].

    ``direction="above"`` bounds P[count >= a] for ``a >= mu``;
    ``direction="below"`` bounds P[count <= a] for ``a <= mu`` and returns the
    limit value ``e^(-mu)`` at ``a == 0``.
    """
    mu, a = query.mu, query.a
    if direction == "above":
        if a < mu:
            raise ValueError("upper tail requires a >= mu")
    elif direction == "below":
        if a > mu:
            raise ValueError("lower tail requires a <= mu")
    else:
        raise ValueError(f"unknown direction {direction!r}")
    if a == mu:
        return 1.0
    if a == 0:
        return math.exp(-mu)
    if mu == 0:
        return 0.0
    log_bound = (a - mu) + a * math.log(mu / a)
    return min(1.0, math.exp(log_bound))
