"""Order-independent queues and the redundancy-with-abandonment model.

The microstate of an order-independent queue is the word of customer classes
in arrival order (oldest first).  The total departure rate in a state depends
only on the count vector through a componentwise non-decreasing rate function
mu; the customer in position p departs at the increment of mu along the
prefix ending at p.  These queues admit an explicit product-form stationary
measure and satisfy the per-class partial balance property.

Classes are 0-based throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

from .qrcore import FerrersSet, Macrostate, QueueSystem, add_unit

Word = tuple[int, ...]


def word_counts(w: Word, n: int) -> Macrostate:
    counts = [0] * n
    for c in w:
        counts[c] += 1
    return tuple(counts)


@dataclass(frozen=True)
class OISpec:
    """Arrival rates, rate function, and admissible macrostates of an OI queue."""

    n: int
    nu: tuple[float, ...]
    mu: Callable[[Macrostate], float]
    admissible: Callable[[Macrostate], bool] = lambda x: True

    def __post_init__(self):
        if len(self.nu) != self.n:
            raise ValueError("need one arrival rate per class")
        if any(v <= 0 for v in self.nu):
            raise ValueError("arrival rates must be positive")


def _check_mu(spec: OISpec, truncation: FerrersSet) -> None:
    origin = (0,) * spec.n
    if abs(spec.mu(origin)) > 1e-15:
        raise ValueError("the rate function must vanish at the empty state")
    for x in truncation:
        if not spec.admissible(x):
            raise ValueError(f"truncation state {x} is not admissible")
        m = spec.mu(x)
        if x != origin and m <= 0:
            raise ValueError(f"rate function must be positive at nonempty state {x}")
        for i in range(spec.n):
            y = add_unit(x, i)
            if y in truncation and spec.mu(y) < m - 1e-12:
                raise ValueError(f"rate function decreases from {x} to {y}")


def enumerate_words(n: int, truncation: FerrersSet) -> list[Word]:
    """All words whose count vector lies in the truncation, shortest first."""
    words: list[Word] = [()]
    frontier: list[Word] = [()]
    while frontier:
        nxt = []
        for w in frontier:
            counts = word_counts(w, n)
            for i in range(n):
                if add_unit(counts, i) in truncation:
                    nxt.append(w + (i,))
        nxt.sort()
        words.extend(nxt)
        frontier = nxt
    return words


def build_oi_system(spec: OISpec, truncation: FerrersSet) -> QueueSystem:
    """OI queue on all words with counts inside the truncation.

    Arrivals whose target count vector would leave the truncation are
    dropped, which keeps the product-form measure exact on the retained
    states because it is defined prefix-wise.  Departures from positions of a
    same-class run collapse onto the same target word, so their rates add.
    """
    _check_mu(spec, truncation)
    words = enumerate_words(spec.n, truncation)
    rates: dict[tuple[Word, Word], float] = {}
    for w in words:
        counts = word_counts(w, spec.n)
        for i in range(spec.n):
            if add_unit(counts, i) in truncation:
                rates[(w, w + (i,))] = spec.nu[i]
        prev = 0.0
        prefix = [0] * spec.n
        for p, c in enumerate(w):
            prefix[c] += 1
            cur = spec.mu(tuple(prefix))
            delta = cur - prev
            prev = cur
            if delta <= 0.0:
                continue
            t = w[:p] + w[p + 1 :]
            rates[(w, t)] = rates.get((w, t), 0.0) + delta
    return QueueSystem(
        spec.n,
        words,
        lambda w: word_counts(w, spec.n),
        rates,
        sort_key=lambda w: (len(w), w),
    )


def oi_product_form(spec: OISpec, w: Word) -> float:
    """Unnormalized stationary weight of a word: prod_p nu_{w_p} / mu(prefix_p)."""
    out = 1.0
    prefix = [0] * spec.n
    for c in w:
        prefix[c] += 1
        m = spec.mu(tuple(prefix))
        if m <= 0.0:
            raise ValueError(f"rate function vanishes on prefix with counts {tuple(prefix)}")
        out *= spec.nu[c] / m
    return out


@dataclass(frozen=True)
class RedundancySpec:
    """Redundancy system with cancel-on-complete service and abandonment.

    ``B[i][j] = 1`` when class i can be served by server j.  Every customer
    is replicated on each compatible server not already busy with an earlier
    customer; replicas are cancelled on first completion.  Each waiting or
    in-service customer abandons at its class rate.
    """

    n: int
    m: int
    B: tuple[tuple[int, ...], ...]
    nu: tuple[float, ...]
    zeta: tuple[float, ...]
    mu_srv: tuple[float, ...]
    r: tuple[float, ...]

    def __post_init__(self):
        if len(self.B) != self.n or any(len(row) != self.m for row in self.B):
            raise ValueError("compatibility matrix must be n x m")
        if any(v not in (0, 1) for row in self.B for v in row):
            raise ValueError("compatibility entries must be 0 or 1")
        if any(sum(row) == 0 for row in self.B):
            raise ValueError("every class needs at least one compatible server")
        for name, vec, size in (
            ("nu", self.nu, self.n),
            ("zeta", self.zeta, self.n),
            ("mu", self.mu_srv, self.m),
            ("r", self.r, self.n),
        ):
            if len(vec) != size:
                raise ValueError(f"{name} must have length {size}")
            if any(v <= 0 for v in vec):
                raise ValueError(f"{name} entries must be positive")

    def server_mask(self, i: int) -> int:
        return sum(1 << j for j in range(self.m) if self.B[i][j])


def redundancy_to_oi(spec: RedundancySpec) -> OISpec:
    """Rate function of the redundancy system: active server speeds plus
    per-customer abandonment."""
    masks = [spec.server_mask(i) for i in range(spec.n)]
    mu_srv = spec.mu_srv
    zeta = spec.zeta

    def mu(x: Macrostate) -> float:
        active = 0
        for i, v in enumerate(x):
            if v:
                active |= masks[i]
        total = sum(mu_srv[j] for j in range(spec.m) if active >> j & 1)
        total += sum(z * v for z, v in zip(zeta, x))
        return total

    return OISpec(n=spec.n, nu=spec.nu, mu=mu)


def serving_sets(spec: RedundancySpec, w: Word) -> list[int]:
    """Bitmask of servers working on each position of the word.

    Server j serves the oldest compatible customer, so masks are assigned
    front to back, each position taking the compatible servers still free.
    """
    taken = 0
    out = []
    for c in w:
        mask = spec.server_mask(c) & ~taken
        out.append(mask)
        taken |= mask
    return out


def redundancy_departure_reward(spec: RedundancySpec, w: Word, pos: int) -> tuple[float, float]:
    """Reward and completion probability for removing the customer at ``pos``.

    ``pos`` (0-based) must hold the oldest customer of its class; the
    transition that removes one customer of that class from the leading run
    is a service completion with probability (rate of the servers on that
    customer) / (same + abandonment rate of the whole run).
    """
    if not 0 <= pos < len(w):
        raise ValueError("position out of range")
    cls = w[pos]
    if cls in w[:pos]:
        raise ValueError(f"position {pos} is not the oldest class-{cls} customer")
    mask = serving_sets(spec, w)[pos]
    speed = sum(spec.mu_srv[j] for j in range(spec.m) if mask >> j & 1)
    d = pos
    while d + 1 < len(w) and w[d + 1] == cls:
        d += 1
    run = d - pos + 1
    denom = speed + spec.zeta[cls] * run
    prob = speed / denom if denom > 0 else 0.0
    return spec.r[cls] * prob, prob


def redundancy_reward_spec(spec: RedundancySpec):
    """(rcont, rdisc) pair for the admission problem on word states.

    Occupation rewards are zero; a transition that removes one customer from
    the oldest same-class run pays the class reward times the completion
    probability.  Removals of later same-class customers are pure
    abandonments and pay nothing.
    """

    def rcont(_s: Word) -> float:
        return 0.0

    def rdisc(s: Word, t: Word) -> float:
        if len(t) != len(s) - 1:
            return 0.0
        # position of the removal: first index where the words differ
        p = next((k for k in range(len(t)) if s[k] != t[k]), len(t))
        cls = s[p]
        first = s.index(cls)
        if first != p and s[first:p] != (cls,) * (p - first):
            # not the oldest run of this class: zero-probability completion
            return 0.0
        reward, _prob = redundancy_departure_reward(spec, s, first)
        return reward

    return rcont, rdisc
