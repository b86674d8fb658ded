"""Pair aggregation: the primitive behind every sampler in this package.

A pair aggregation takes two unset entries of a probability vector and
redistributes their mass so that at least one of them lands on 0 or 1, while
preserving the expectation of each entry, the sum of the vector, and the
product bounds on higher-order inclusion/exclusion probabilities.  Repeating
the step until no two unset entries remain turns any probability vector with
integral sum into a fixed-size variance-optimal (VarOpt) sample, and the pair
*selection* order is completely free; structure-aware samplers exploit that
freedom.

``enumerate_distribution`` expands both branches of every aggregation with
exact rational probabilities, yielding the full output distribution of a
deterministic pair-selection policy on small inputs.  ``verify_varopt`` checks
such a distribution against the defining conditions with zero tolerance.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

from .core import EPS_NUM, SummaryState

__all__ = [
    "pair_aggregate",
    "run_policy",
    "first_pair_policy",
    "switch_policy",
    "enumerate_distribution",
    "OutcomeDistribution",
    "verify_varopt",
    "as_rng",
]

# A policy maps the current state to the next unset pair to aggregate.
PairPolicy = Callable[[SummaryState], tuple[int, int]]

ENUMERATION_LIMIT = 12


def as_rng(seed_or_rng) -> random.Random:
    """Normalize an int seed / Random instance into a Random instance."""
    if isinstance(seed_or_rng, random.Random):
        return seed_or_rng
    return random.Random(seed_or_rng)


def pair_aggregate(state: SummaryState, i: int, j: int, rand: float) -> SummaryState:
    """One aggregation step on entries ``i`` and ``j`` (mutates ``state``).

    With ``t = p_i + p_j``:

    * ``t < 1``:  with probability ``p_i/t`` set ``(p_i, p_j) <- (t, 0)``,
      otherwise ``(0, t)``.
    * ``t >= 1``: with probability ``(1-p_j)/(2-t)`` set ``(p_i, p_j) <-
      (1, t-1)``, otherwise ``(t-1, 1)``.

    ``rand`` is a uniform draw from [0, 1).  In float mode a ``t`` within
    EPS_NUM of 1 is treated as the ``>= 1`` branch and the leftover snapped to
    exactly 0, so both entries end up set.
    """
    if i == j:
        raise ValueError("pair must consist of two distinct entries")
    if state.set_mask[i] or state.set_mask[j]:
        raise ValueError("entry already set")
    probs = state.probs
    pi, pj = probs[i], probs[j]
    total = pi + pj
    zero = total * 0
    one = zero + 1
    float_mode = isinstance(total, float)
    near_one = float_mode and abs(total - 1.0) <= EPS_NUM
    if total < 1 and not near_one:
        if rand < pi / total:
            probs[i], probs[j] = total, zero
            state.set_mask[j] = True
        else:
            probs[i], probs[j] = zero, total
            state.set_mask[i] = True
    else:
        leftover = total - one
        if float_mode and abs(leftover) <= EPS_NUM:
            leftover = zero
        if rand < (one - pj) / (2 - total):
            probs[i], probs[j] = one, leftover
            state.set_mask[i] = True
            state.set_mask[j] = leftover == zero
        else:
            probs[i], probs[j] = leftover, one
            state.set_mask[j] = True
            state.set_mask[i] = leftover == zero
    return state


def run_policy(state: SummaryState, policy: PairPolicy, rng,
               trace: list | None = None) -> set[int]:
    """Aggregate under ``policy`` until done; return the sampled indices.

    The probability sum must be integral (within EPS_NUM in float mode): the
    sampled set then has exactly that many members.  ``trace``, if given,
    collects the aggregated pairs in order.
    """
    rng = as_rng(rng)
    remaining = len(state) - sum(state.set_mask)
    while remaining >= 2:
        i, j = policy(state)
        if state.set_mask[i] or state.set_mask[j]:
            raise ValueError("policy returned an already-set index")
        if trace is not None:
            trace.append((i, j))
        pair_aggregate(state, i, j, rng.random())
        remaining -= state.set_mask[i] + state.set_mask[j]
    if remaining == 1:
        _snap_leftover(state)
    return state.sample_indices()


def _snap_leftover(state: SummaryState) -> None:
    """Fix the single unset entry left by float residue to 0 or 1."""
    idx = next(i for i, done in enumerate(state.set_mask) if not done)
    p = state.probs[idx]
    zero = p * 0
    one = zero + 1
    if isinstance(p, float):
        if abs(p - 1.0) <= EPS_NUM:
            p = one
        elif abs(p) <= EPS_NUM:
            p = zero
    if p != zero and p != one:
        raise ValueError(f"probability sum is not integral (leftover {p!r})")
    state.probs[idx] = p
    state.set_mask[idx] = True


def first_pair_policy(state: SummaryState) -> tuple[int, int]:
    """Structure-blind deterministic policy: the two lowest unset indices."""
    first = -1
    for i, done in enumerate(state.set_mask):
        if done:
            continue
        if first < 0:
            first = i
        else:
            return first, i
    raise ValueError("fewer than two unset entries")


def switch_policy(first: PairPolicy, second: PairPolicy, after_set: int) -> PairPolicy:
    """Compose two policies: use ``first`` until ``after_set`` entries are set.

    The switch is a function of the state (number of set entries), so the
    composite stays a pure function of the state and can be enumerated.
    """

    def select(state: SummaryState) -> tuple[int, int]:
        if sum(state.set_mask) < after_set:
            return first(state)
        return second(state)

    return select


@dataclass
class OutcomeDistribution:
    """Exact distribution over final sample sets: frozenset -> Fraction."""

    outcomes: dict

    def total_probability(self) -> Fraction:
        return sum(self.outcomes.values(), Fraction(0))

    def marginal(self, i: int) -> Fraction:
        return sum((p for s, p in self.outcomes.items() if i in s), Fraction(0))

    def support(self):
        return set(self.outcomes)


def enumerate_distribution(probs: Sequence, policy: PairPolicy) -> OutcomeDistribution:
    """Exact output distribution of ``policy`` by expanding every branch.

    ``probs`` must be exact rationals (Fraction or int) with integral sum;
    floats are rejected because their binary values rarely mean what the
    literal suggests.  The branch tree is exponential, so the input is capped
    at ENUMERATION_LIMIT entries.
    """
    if len(probs) > ENUMERATION_LIMIT:
        raise ValueError("enumeration limit")
    if any(isinstance(p, float) for p in probs):
        raise ValueError("exact rationals required (use Fraction, not float)")
    fracs = [Fraction(p) for p in probs]
    if any(not 0 <= p <= 1 for p in fracs):
        raise ValueError("probabilities must lie in [0, 1]")
    total = sum(fracs)
    if total.denominator != 1:
        raise ValueError("probability sum must be integral")
    outcomes: dict = {}

    def expand(state: SummaryState, weight: Fraction) -> None:
        while True:
            unset = state.unset_indices()
            if len(unset) < 2:
                if unset:
                    raise AssertionError("nonintegral leftover in exact mode")
                key = frozenset(state.sample_indices())
                outcomes[key] = outcomes.get(key, Fraction(0)) + weight
                return
            i, j = policy(state)
            pi, pj = state.probs[i], state.probs[j]
            t = pi + pj
            first = pi / t if t < 1 else (1 - pj) / (2 - t)
            branch = state.copy()
            pair_aggregate(branch, i, j, rand=-1.0)  # forces the first branch
            expand(branch, weight * first)
            pair_aggregate(state, i, j, rand=2.0)  # second branch, in place
            weight = weight * (1 - first)

    expand(SummaryState(fracs), Fraction(1))
    return OutcomeDistribution(outcomes)


def verify_varopt(dist: OutcomeDistribution, probs: Sequence) -> list[str]:
    """Check a distribution against the VarOpt conditions, exactly.

    Verifies (i) per-key marginals equal ``probs``, (ii) every outcome has
    exactly ``sum(probs)`` members, and (iii) for every subset J the inclusion
    probability is at most ``prod p_i`` and the exclusion probability at most
    ``prod (1 - p_i)``.  Returns a list of violation descriptions; empty means
    the distribution is VarOpt.
    """
    fracs = [Fraction(p) for p in probs]
    n = len(fracs)
    violations = []
    total = dist.total_probability()
    if total != 1:
        violations.append(f"outcome probabilities sum to {total}, not 1")
    size = sum(fracs)
    if size.denominator != 1:
        violations.append(f"probability sum {size} is not integral")
    size = int(size)
    masked = []
    for outcome, p in dist.outcomes.items():
        if len(outcome) != size:
            violations.append(f"outcome {sorted(outcome)} has size {len(outcome)} != {size}")
        mask = 0
        for i in outcome:
            mask |= 1 << i
        masked.append((mask, p))
    for i in range(n):
        got = dist.marginal(i)
        if got != fracs[i]:
            violations.append(f"marginal of key {i} is {got}, expected {fracs[i]}")
    # Subset products via DP over bitmasks, then exact comparisons.
    prod_in = [Fraction(1)] * (1 << n)
    prod_ex = [Fraction(1)] * (1 << n)
    for mask in range(1, 1 << n):
        low = (mask & -mask).bit_length() - 1
        rest = mask & (mask - 1)
        prod_in[mask] = prod_in[rest] * fracs[low]
        prod_ex[mask] = prod_ex[rest] * (1 - fracs[low])
    for subset in range(1, 1 << n):
        inc = Fraction(0)
        exc = Fraction(0)
        for mask, p in masked:
            if mask & subset == subset:
                inc += p
            if mask & subset == 0:
                exc += p
        if inc > prod_in[subset]:
            keys = [i for i in range(n) if subset >> i & 1]
            violations.append(f"inclusion bound violated for subset {keys}: "
                              f"{inc} > {prod_in[subset]}")
        if exc > prod_ex[subset]:
            keys = [i for i in range(n) if subset >> i & 1]
            violations.append(f"exclusion bound violated for subset {keys}: "
                              f"{exc} > {prod_ex[subset]}")
    return violations
