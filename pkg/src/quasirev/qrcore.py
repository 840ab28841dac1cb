"""Core machinery for finite multi-class queueing systems.

A queueing system couples an indexed set of microstates with a counting map
(microstate -> vector of per-class customer counts) and a sparse transition
kernel in which every edge moves the count vector by at most one unit in one
coordinate: arrivals add a customer of one class, departures remove one, and
internal transitions leave the counts unchanged.

All objects are immutable after construction and all operations are pure, so
instances can be shared freely across threads or processes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

Macrostate = tuple[int, ...]

ARRIVAL = "arrival"
DEPARTURE = "departure"
INTERNAL = "internal"

DEFAULT_TOL = 1e-9


class StructuralError(ValueError):
    """Malformed system definition: negative rate, misclassified edge, ..."""


class SolverError(RuntimeError):
    """Stationary solve failed beyond tolerance (unichain assumption suspect)."""


class AggregationError(RuntimeError):
    """Macro aggregation hit a reachable macrostate with zero mass."""


def add_unit(x: Macrostate, i: int) -> Macrostate:
    return x[:i] + (x[i] + 1,) + x[i + 1 :]


def sub_unit(x: Macrostate, i: int) -> Macrostate:
    return x[:i] + (x[i] - 1,) + x[i + 1 :]


def dominates(x: Macrostate, y: Macrostate) -> bool:
    """True when ``x >= y`` coordinatewise."""
    return all(a >= b for a, b in zip(x, y))


class FerrersSet:
    """Finite coordinate-convex subset of N^n containing the origin.

    Coordinate convexity: if ``x`` is a member then so is every ``y <= x``.
    Members iterate in a canonical order (by total, then lexicographically).
    """

    __slots__ = ("n", "members", "_sorted")

    def __init__(self, n: int, members: Iterable[Macrostate]):
        mem = frozenset(tuple(int(v) for v in x) for x in members)
        if not mem:
            raise ValueError("a Ferrers set cannot be empty")
        for x in mem:
            if len(x) != n:
                raise ValueError(f"member {x} does not have dimension {n}")
            if any(v < 0 for v in x):
                raise ValueError(f"member {x} has a negative coordinate")
        origin = (0,) * n
        if origin not in mem:
            raise ValueError("a Ferrers set must contain the origin")
        for x in mem:
            for i in range(n):
                if x[i] > 0 and sub_unit(x, i) not in mem:
                    raise ValueError(
                        f"not coordinate-convex: {x} present, {sub_unit(x, i)} missing"
                    )
        self.n = n
        self.members = mem
        self._sorted = tuple(sorted(mem, key=lambda x: (sum(x), x)))

    @classmethod
    def box(cls, bounds: Iterable[int]) -> "FerrersSet":
        """Full box [0, b_1] x ... x [0, b_n]."""
        bounds = tuple(int(b) for b in bounds)
        members = [()]
        for b in bounds:
            members = [x + (v,) for x in members for v in range(b + 1)]
        return cls(len(bounds), members)

    @classmethod
    def total_cap(cls, n: int, cap: int) -> "FerrersSet":
        """All count vectors with total population at most ``cap``."""
        members = [(0,) * n]
        frontier = members
        for _ in range(cap):
            nxt = {add_unit(x, i) for x in frontier for i in range(n)}
            members.extend(sorted(nxt))
            frontier = nxt
        return cls(n, members)

    @staticmethod
    def is_ferrers(n: int, members: Iterable[Macrostate]) -> bool:
        try:
            FerrersSet(n, members)
            return True
        except ValueError:
            return False

    def __contains__(self, x) -> bool:
        return tuple(x) in self.members

    def __iter__(self):
        return iter(self._sorted)

    def __len__(self) -> int:
        return len(self.members)

    def __eq__(self, other) -> bool:
        return isinstance(other, FerrersSet) and self.members == other.members

    def __hash__(self) -> int:
        return hash((self.n, self.members))

    def __repr__(self) -> str:
        return f"FerrersSet(n={self.n}, size={len(self.members)})"


@dataclass(frozen=True)
class Transition:
    source: int
    target: int
    rate: float
    kind: str
    cls: int  # class index for arrival/departure, -1 for internal


class QueueSystem:
    """Finite queueing system: indexed microstates, counting map, sparse kernel.

    ``states`` may be any hashable, mutually comparable objects (count tuples,
    words, label matrices).  States are reordered canonically (total count,
    then count vector, then the state encoding itself) unless ``sort_key``
    overrides the ordering, so solves and reports are reproducible.

    Edges with zero rate and self-loops are dropped; a self-loop does not
    change the law of the jump process.  Every retained edge is classified
    from the count difference between its endpoints; any other difference is
    a structural error.
    """

    def __init__(
        self,
        n: int,
        states: Iterable,
        counting: Callable[[object], Macrostate],
        rates: Mapping[tuple, float] | Iterable[tuple],
        sort_key: Callable[[object], tuple] | None = None,
    ):
        self.n = int(n)
        counts_of = {}
        for s in states:
            c = tuple(int(v) for v in counting(s))
            if len(c) != self.n or any(v < 0 for v in c):
                raise StructuralError(f"invalid count vector {c} for state {s!r}")
            counts_of[s] = c
        if sort_key is None:
            sort_key = lambda s: (sum(counts_of[s]), counts_of[s], s)
        self.states = tuple(sorted(counts_of, key=sort_key))
        self.index = {s: k for k, s in enumerate(self.states)}
        self.counts = tuple(counts_of[s] for s in self.states)

        empties = [k for k, c in enumerate(self.counts) if sum(c) == 0]
        if len(empties) != 1:
            raise StructuralError(f"expected exactly one empty state, found {len(empties)}")
        self.empty_index = empties[0]

        # Image of the counting map must itself be coordinate-convex.
        try:
            self.macro_space = FerrersSet(self.n, set(self.counts))
        except ValueError as exc:
            raise StructuralError(f"macrostate image is not a Ferrers set: {exc}") from exc

        if isinstance(rates, Mapping):
            items = [(s, t, r) for (s, t), r in rates.items()]
        else:
            items = [(s, t, r) for s, t, r in rates]
        edges = []
        for s, t, r in items:
            r = float(r)
            if r < 0:
                raise StructuralError(f"negative rate {r} on edge {s!r} -> {t!r}")
            if r == 0.0 or s == t:
                continue
            si, ti = self.index[s], self.index[t]
            kind, cls = self._classify(si, ti)
            edges.append(Transition(si, ti, r, kind, cls))
        edges.sort(key=lambda e: (e.source, e.target))
        # merge duplicate (source, target) pairs
        merged: list[Transition] = []
        for e in edges:
            if merged and merged[-1].source == e.source and merged[-1].target == e.target:
                last = merged[-1]
                merged[-1] = Transition(e.source, e.target, last.rate + e.rate, e.kind, e.cls)
            else:
                merged.append(e)
        self.edges = tuple(merged)

        self.out_edges: tuple[tuple[Transition, ...], ...] = tuple(
            tuple(e for e in self.edges if e.source == k) for k in range(len(self.states))
        )
        self.in_edges: tuple[tuple[Transition, ...], ...] = tuple(
            tuple(e for e in self.edges if e.target == k) for k in range(len(self.states))
        )

    def _classify(self, si: int, ti: int) -> tuple[str, int]:
        cs, ct = self.counts[si], self.counts[ti]
        diff = [a - b for a, b in zip(ct, cs)]
        nonzero = [(i, d) for i, d in enumerate(diff) if d != 0]
        if not nonzero:
            return INTERNAL, -1
        if len(nonzero) == 1 and nonzero[0][1] == 1:
            return ARRIVAL, nonzero[0][0]
        if len(nonzero) == 1 and nonzero[0][1] == -1:
            return DEPARTURE, nonzero[0][0]
        raise StructuralError(
            f"edge {self.states[si]!r} -> {self.states[ti]!r} changes counts by {diff}"
        )

    def __len__(self) -> int:
        return len(self.states)

    def rate(self, s, t) -> float:
        si, ti = self.index[s], self.index[t]
        for e in self.out_edges[si]:
            if e.target == ti:
                return e.rate
        return 0.0

    def total_outflow(self, k: int) -> float:
        return sum(e.rate for e in self.out_edges[k])

    def dump_edges(self, fh) -> None:
        """Debug dump of the kernel as a sparse edge list CSV."""
        writer = csv.writer(fh)
        writer.writerow(["s_index", "t_index", "rate", "kind"])
        for e in self.edges:
            kind = e.kind if e.cls < 0 else f"{e.kind}:{e.cls}"
            writer.writerow([e.source, e.target, repr(e.rate), kind])


@dataclass(frozen=True)
class ValidationReport:
    passes: bool
    recurrent_set: frozenset
    violations: tuple[tuple[int, object], ...]


def validate_assumption1(sys: QueueSystem) -> ValidationReport:
    """Check the structural reachability assumptions of a queueing system.

    The candidate recurrent class is the closure of the empty state under
    count-non-decreasing transitions (arrivals and internal moves).  The
    report then verifies that no state outside this class is reachable at
    all (item 2), that every state can drain to the empty state along
    count-non-increasing transitions (item 3), and that the macro image of
    the recurrent class is a Ferrers set (item 4).  The first witness per
    failed item is reported.
    """
    nstates = len(sys.states)
    empty = sys.empty_index

    def closure(start: int, admit: Callable[[Transition], bool]) -> set[int]:
        seen = {start}
        stack = [start]
        while stack:
            k = stack.pop()
            for e in sys.out_edges[k]:
                if admit(e) and e.target not in seen:
                    seen.add(e.target)
                    stack.append(e.target)
        return seen

    rec = closure(empty, lambda e: e.kind in (ARRIVAL, INTERNAL))
    reachable = closure(empty, lambda e: True)

    violations: list[tuple[int, object]] = []

    bad2 = sorted(reachable - rec)
    if bad2:
        violations.append((2, sys.states[bad2[0]]))

    # backward closure of the empty state along departures/internal moves
    back = {empty}
    stack = [empty]
    while stack:
        k = stack.pop()
        for e in sys.in_edges[k]:
            if e.kind in (DEPARTURE, INTERNAL) and e.source not in back:
                back.add(e.source)
                stack.append(e.source)
    bad3 = sorted(set(range(nstates)) - back)
    if bad3:
        violations.append((3, sys.states[bad3[0]]))

    rec_macros = {sys.counts[k] for k in rec}
    for x in sorted(rec_macros, key=lambda x: (sum(x), x)):
        for i in range(sys.n):
            if x[i] > 0 and sub_unit(x, i) not in rec_macros:
                violations.append((4, x))
                break
        else:
            continue
        break

    return ValidationReport(
        passes=not violations,
        recurrent_set=frozenset(sys.states[k] for k in rec),
        violations=tuple(violations),
    )


@dataclass(frozen=True)
class StationaryMeasure:
    """Stationary measure aligned with the owning system's state order."""

    values: np.ndarray
    normalized: bool

    def as_dict(self, sys: QueueSystem) -> dict:
        return {s: float(self.values[k]) for k, s in enumerate(sys.states)}


def solve_stationary(
    sys: QueueSystem, tol: float = DEFAULT_TOL, require_assumption1: bool = True
) -> StationaryMeasure:
    """Solve the global balance equations on the recurrent class.

    Dense LU on the transposed rate matrix with the last balance row replaced
    by the normalization row; falls back to least squares if the direct solve
    leaves a residual above tolerance.  States outside the recurrent class
    get probability zero.

    With ``require_assumption1`` the structural validation must pass and the
    recurrent class is the monotone closure of the empty state.  Without it,
    only the unichain property is needed (e.g. for systems under an
    unbalanced admission policy, where some states are reachable only
    through departures): the recurrent class is taken as the full closure of
    the empty state, which is correct whenever every state drains back to it.
    """
    if require_assumption1:
        report = validate_assumption1(sys)
        if not report.passes:
            raise SolverError(f"system fails structural validation: {report.violations}")
        rec = sorted(sys.index[s] for s in report.recurrent_set)
    else:
        seen = {sys.empty_index}
        stack = [sys.empty_index]
        while stack:
            k = stack.pop()
            for e in sys.out_edges[k]:
                if e.target not in seen:
                    seen.add(e.target)
                    stack.append(e.target)
        rec = sorted(seen)
    pos = {k: j for j, k in enumerate(rec)}
    r = len(rec)

    gen = np.zeros((r, r))
    for k in rec:
        j = pos[k]
        for e in sys.out_edges[k]:
            # validation guarantees the recurrent class is closed
            gen[j, pos[e.target]] += e.rate
            gen[j, j] -= e.rate

    mat = gen.T.copy()
    mat[r - 1, :] = 1.0
    rhs = np.zeros(r)
    rhs[r - 1] = 1.0
    try:
        pi = np.linalg.solve(mat, rhs)
    except np.linalg.LinAlgError:
        pi = None
    if pi is None or _balance_residual(gen, pi) > max(tol, 1e-10):
        stacked = np.vstack([gen.T, np.ones(r)])
        target = np.zeros(r + 1)
        target[r] = 1.0
        pi, *_ = np.linalg.lstsq(stacked, target, rcond=None)
        if _balance_residual(gen, pi) > max(tol, 1e-8):
            raise SolverError("stationary solve residual above tolerance")
    if pi.min() < -1e-9:
        raise SolverError(f"stationary solve produced negative mass {pi.min():.3e}")
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()

    values = np.zeros(len(sys.states))
    for k in rec:
        values[k] = pi[pos[k]]
    values.flags.writeable = False
    return StationaryMeasure(values=values, normalized=True)


def _balance_residual(gen: np.ndarray, pi: np.ndarray) -> float:
    return float(np.abs(pi @ gen).max())


def global_balance_residual(sys: QueueSystem, pi: StationaryMeasure) -> float:
    """Max absolute violation of the global balance equations."""
    v = pi.values
    res = np.zeros(len(sys.states))
    for e in sys.edges:
        res[e.source] -= v[e.source] * e.rate
        res[e.target] += v[e.source] * e.rate
    return float(np.abs(res).max())


@dataclass(frozen=True)
class QRReport:
    quasi_reversible: bool
    max_residual: float
    worst: tuple  # (state, class index)
    tol: float


def check_quasi_reversibility(
    sys: QueueSystem, pi: StationaryMeasure, tol: float = DEFAULT_TOL
) -> QRReport:
    """Check the per-class arrival/departure partial balance equations.

    For every state ``s`` and class ``i``, the probability flow out of ``s``
    due to class-``i`` arrivals must match the flow into ``s`` due to
    class-``i`` departures.  Returns the worst residual and its witness.
    """
    v = pi.values
    nstates = len(sys.states)
    res = np.zeros((nstates, sys.n))
    for e in sys.edges:
        if e.kind == ARRIVAL:
            res[e.source, e.cls] += v[e.source] * e.rate
        elif e.kind == DEPARTURE:
            # a class-i departure t -> s is an inflow into s from level |s|+e_i
            res[e.target, e.cls] -= v[e.source] * e.rate
    flat = int(np.abs(res).argmax())
    k, i = divmod(flat, sys.n)
    worst_val = float(np.abs(res).max())
    return QRReport(
        quasi_reversible=worst_val <= tol,
        max_residual=worst_val,
        worst=(sys.states[k], i),
        tol=tol,
    )


def partial_balance2_residual(sys: QueueSystem, pi: StationaryMeasure) -> float:
    """Residual of the complementary (departure + internal) partial balance.

    For stationary ``pi``, this residual is bounded by the sum of the global
    balance residual and the arrival partial balance residuals, since the
    three balance families are linearly dependent.
    """
    v = pi.values
    res = np.zeros(len(sys.states))
    for e in sys.edges:
        if e.kind != ARRIVAL:
            res[e.source] -= v[e.source] * e.rate  # departures + internal out
        if e.kind != DEPARTURE:
            res[e.target] += v[e.source] * e.rate  # inflow from below + same level
    return float(np.abs(res).max())


@dataclass(frozen=True)
class MacroAggregate:
    distribution: dict  # macrostate -> probability
    kernel: dict  # (macrostate, macrostate) -> rate


def aggregate_macro_kernel(sys: QueueSystem, pi: StationaryMeasure) -> MacroAggregate:
    """Aggregate a quasi-reversible system into its macrostate birth-death law.

    The macro distribution sums the stationary mass per count vector; the
    macro kernel averages edge rates weighted by the conditional stationary
    mass of the source (upward) or target (downward) level.  On a
    quasi-reversible input the returned pair satisfies detailed balance.
    """
    v = pi.values
    dist: dict[Macrostate, float] = {}
    for k, x in enumerate(sys.counts):
        dist[x] = dist.get(x, 0.0) + float(v[k])

    up: dict[tuple[Macrostate, Macrostate], float] = {}
    down: dict[tuple[Macrostate, Macrostate], float] = {}
    for e in sys.edges:
        xs, xt = sys.counts[e.source], sys.counts[e.target]
        if e.kind == ARRIVAL:
            up[(xs, xt)] = up.get((xs, xt), 0.0) + v[e.source] * e.rate
        elif e.kind == DEPARTURE:
            down[(xs, xt)] = down.get((xs, xt), 0.0) + v[e.source] * e.rate

    kernel: dict[tuple[Macrostate, Macrostate], float] = {}
    for (xs, xt), flow in list(up.items()) + list(down.items()):
        mass = dist.get(xs, 0.0)
        if flow > 0.0 and mass <= 0.0:
            raise AggregationError(f"positive flow out of macrostate {xs} with zero mass")
        if mass > 0.0:
            kernel[(xs, xt)] = flow / mass
    return MacroAggregate(distribution=dist, kernel=kernel)


def macro_detailed_balance_residual(agg: MacroAggregate) -> float:
    """Max |pi*(x) q*(x,y) - pi*(y) q*(y,x)| over macro edges."""
    worst = 0.0
    for (x, y), q in agg.kernel.items():
        back = agg.kernel.get((y, x), 0.0)
        worst = max(worst, abs(agg.distribution[x] * q - agg.distribution.get(y, 0.0) * back))
    return worst


def scale_arrivals(
    sys: QueueSystem, factor: Callable[[object, int], float]
) -> QueueSystem:
    """New system with every arrival edge scaled by ``factor(state, class)``.

    Departure and internal rates are untouched.  Factors must lie in [0, 1];
    zero factors remove the edge.
    """
    rates = []
    for e in sys.edges:
        r = e.rate
        if e.kind == ARRIVAL:
            f = float(factor(sys.states[e.source], e.cls))
            if not -1e-12 <= f <= 1.0 + 1e-12:
                raise ValueError(f"admission factor {f} outside [0, 1]")
            r *= min(max(f, 0.0), 1.0)
        if r > 0.0:
            rates.append((sys.states[e.source], sys.states[e.target], r))
    counting = dict(zip(sys.states, sys.counts))
    return QueueSystem(sys.n, sys.states, counting.__getitem__, rates)
