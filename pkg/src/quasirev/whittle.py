"""Multi-class Whittle networks with class-preserving internal routing.

States are n x m nonnegative integer label matrices; entry (i, k) counts the
class-i customers currently holding label k.  A routing matrix P over the
outside node 0 and the nm labels drives arrivals (rate P[0,ik] phi0),
class-preserving internal moves (rate P[ik,il] phi_ik(s)), and departures
(rate P[ik,0] phi_ik(s)).  When the service rates are balanced by a positive
function Phi, the stationary measure is Phi(s) times a geometric product of
the traffic solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import balance as _balance
from .qrcore import (
    ARRIVAL,
    DEFAULT_TOL,
    FerrersSet,
    QueueSystem,
    scale_arrivals,
    solve_stationary,
)

LabelMatrix = tuple[tuple[int, ...], ...]


def label_index(n: int, m: int) -> dict:
    """Row-major map (class, site) -> index in the (1 + nm) routing matrix."""
    return {(i, k): 1 + i * m + k for i in range(n) for k in range(m)}


def matrix_add(s: LabelMatrix, i: int, k: int, delta: int) -> LabelMatrix:
    row = s[i]
    row = row[:k] + (row[k] + delta,) + row[k + 1 :]
    return s[:i] + (row,) + s[i + 1 :]


def flatten(s: LabelMatrix) -> tuple[int, ...]:
    return tuple(v for row in s for v in row)


def unflatten(x: tuple[int, ...], n: int, m: int) -> LabelMatrix:
    return tuple(tuple(x[i * m : (i + 1) * m]) for i in range(n))


@dataclass(frozen=True)
class WhittleSpec:
    n: int
    m: int
    P: np.ndarray
    phi0: float
    phi: Callable[[int, int, LabelMatrix], float]
    Phi: Callable[[LabelMatrix], float] | None = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        size = 1 + self.n * self.m
        if P.shape != (size, size):
            raise ValueError(f"routing matrix must be {size} x {size}")
        if (P < -1e-15).any():
            raise ValueError("routing probabilities must be nonnegative")
        if np.abs(P.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("routing matrix rows must sum to 1")
        lab = label_index(self.n, self.m)
        for (i, k), a in lab.items():
            for (j, l), b in lab.items():
                if i != j and P[a, b] != 0.0:
                    raise ValueError(f"internal move changes class: {(i, k)} -> {(j, l)}")
        if self.phi0 <= 0:
            raise ValueError("phi0 must be positive")
        object.__setattr__(self, "P", P)
        _check_irreducible(self.n, self.m, P)


def _check_irreducible(n: int, m: int, P: np.ndarray) -> None:
    # every label must lie on a positive path 0 -> ... -> 0
    lab = label_index(n, m)
    fwd = {a for (i, k), a in lab.items() if P[0, a] > 0}
    changed = True
    while changed:
        changed = False
        for (i, k), a in lab.items():
            if a in fwd:
                continue
            if any(P[b, a] > 0 and b in fwd for b in lab.values()):
                fwd.add(a)
                changed = True
    bwd = {a for a in lab.values() if P[a, 0] > 0}
    changed = True
    while changed:
        changed = False
        for a in lab.values():
            if a in bwd:
                continue
            if any(P[a, b] > 0 and b in bwd for b in lab.values()):
                bwd.add(a)
                changed = True
    for (i, k), a in lab.items():
        if a not in fwd or a not in bwd:
            raise ValueError(f"label {(i, k)} is unreachable in the routing graph")


def solve_traffic(spec_or_P, n: int | None = None, m: int | None = None) -> dict:
    """Per-label throughput multipliers lambda solving the traffic equations.

    Solves, class by class, lambda_ik = P[0,ik] + sum_l lambda_il P[il,ik],
    then asserts the aggregate site identity sum_i P[0,ik] = sum_i
    lambda_ik P[ik,0] to within 1e-12.
    """
    if isinstance(spec_or_P, WhittleSpec):
        P, n, m = spec_or_P.P, spec_or_P.n, spec_or_P.m
    else:
        P = np.asarray(spec_or_P, dtype=float)
        if n is None or m is None:
            raise ValueError("n and m are required when passing a raw matrix")
    lab = label_index(n, m)
    lam: dict[tuple[int, int], float] = {}
    for i in range(n):
        rows = [lab[(i, k)] for k in range(m)]
        M = np.array([[P[a, b] for b in rows] for a in rows])
        b = np.array([P[0, a] for a in rows])
        sol = np.linalg.solve(np.eye(m) - M.T, b)
        for k in range(m):
            lam[(i, k)] = float(sol[k])
    res = _traffic_identity_residual(P, n, m, lam)
    if res > 1e-12:
        raise ArithmeticError(f"aggregate traffic identity violated: residual {res}")
    return lam


def _traffic_identity_residual(P: np.ndarray, n: int, m: int, lam: dict) -> float:
    # Per class, the outside inflow matches the weighted outflow after the
    # internal flows cancel through row-stochasticity.  (Summing instead over
    # classes for a fixed site does not cancel the internal flows: a tandem
    # feeds its second site internally only, so the per-site form fails.)
    lab = label_index(n, m)
    worst = 0.0
    for i in range(n):
        lhs = sum(P[0, lab[(i, k)]] for k in range(m))
        rhs = sum(lam[(i, k)] * P[lab[(i, k)], 0] for k in range(m))
        worst = max(worst, abs(lhs - rhs))
    total_lhs = sum(P[0, a] for a in lab.values())
    total_rhs = sum(lam[(i, k)] * P[lab[(i, k)], 0] for (i, k) in lab)
    return max(worst, abs(total_lhs - total_rhs))


def traffic_identity_residual(spec: WhittleSpec, lam: dict) -> float:
    return _traffic_identity_residual(spec.P, spec.n, spec.m, lam)


def check_phi_balance(
    spec: WhittleSpec, truncation: Iterable[LabelMatrix], tol: float = DEFAULT_TOL
) -> tuple[bool, tuple | None]:
    """Check Phi(s) phi0 = Phi(s + e_il) phi_il(s + e_il) on the truncation."""
    if spec.Phi is None:
        raise ValueError("no balance function Phi supplied")
    states = set(truncation)
    for s in states:
        base = spec.Phi(s) * spec.phi0
        for i in range(spec.n):
            for l in range(spec.m):
                t = matrix_add(s, i, l, +1)
                if t not in states:
                    continue
                other = spec.Phi(t) * spec.phi(i, l, t)
                if abs(base - other) > tol * max(1.0, abs(base), abs(other)):
                    return False, (s, (i, l))
    return True, None


def whittle_product_form(spec: WhittleSpec, s: LabelMatrix, lam: dict | None = None) -> float:
    """Unnormalized stationary weight Phi(s) prod lambda_ik^{s_ik}."""
    if spec.Phi is None:
        raise ValueError("no balance function Phi supplied")
    if lam is None:
        lam = solve_traffic(spec)
    out = spec.Phi(s)
    for i in range(spec.n):
        for k in range(spec.m):
            if s[i][k]:
                out *= lam[(i, k)] ** s[i][k]
    return out


def entry_cap_set(n: int, m: int, cap: int) -> set[LabelMatrix]:
    """All label matrices with every entry at most ``cap``."""
    cells = [()]
    for _ in range(n * m):
        cells = [x + (v,) for x in cells for v in range(cap + 1)]
    return {unflatten(x, n, m) for x in cells}


def class_sum_cap_set(n: int, m: int, caps: Iterable[int]) -> set[LabelMatrix]:
    """Label matrices with per-class totals bounded by ``caps``.

    Closed under internal moves, so truncating to such a set never cuts an
    internal or departure transition.
    """
    caps = tuple(caps)
    rows_per_class = []
    for i in range(n):
        rows = [()]
        for _ in range(m):
            rows = [r + (v,) for r in rows for v in range(caps[i] + 1)]
        rows_per_class.append([r for r in rows if sum(r) <= caps[i]])
    out = [()]
    for rows in rows_per_class:
        out = [s + (r,) for s in out for r in rows]
    return set(out)


def build_whittle_system(spec: WhittleSpec, truncation: Iterable[LabelMatrix]) -> QueueSystem:
    """Whittle network restricted to a coordinate-convex set of label matrices.

    Arrivals leaving the truncation are dropped.  Internal moves must stay
    inside; a truncation that cuts an internal move (possible under entrywise
    caps) breaks partial balance and is rejected.
    """
    states = set(truncation)
    zero = unflatten((0,) * (spec.n * spec.m), spec.n, spec.m)
    if zero not in states:
        raise ValueError("truncation must contain the empty matrix")
    for s in states:
        for i in range(spec.n):
            for k in range(spec.m):
                if s[i][k] > 0 and matrix_add(s, i, k, -1) not in states:
                    raise ValueError(f"truncation is not coordinate-convex at {s}")
    lab = label_index(spec.n, spec.m)
    rates: dict[tuple[LabelMatrix, LabelMatrix], float] = {}

    def bump(s, t, r):
        if r > 0.0:
            rates[(s, t)] = rates.get((s, t), 0.0) + r

    for s in states:
        for i in range(spec.n):
            for l in range(spec.m):
                t = matrix_add(s, i, l, +1)
                if t in states:
                    bump(s, t, spec.P[0, lab[(i, l)]] * spec.phi0)
            for k in range(spec.m):
                if s[i][k] == 0:
                    continue
                service = spec.phi(i, k, s)
                if spec.P[lab[(i, k)], 0] > 0:
                    bump(s, matrix_add(s, i, k, -1), spec.P[lab[(i, k)], 0] * service)
                for l in range(spec.m):
                    if l == k:
                        continue
                    p = spec.P[lab[(i, k)], lab[(i, l)]]
                    if p > 0:
                        t = matrix_add(matrix_add(s, i, k, -1), i, l, +1)
                        if t not in states:
                            raise ValueError(
                                f"internal move {s} -> {t} leaves the truncation; "
                                "use a class-sum truncation"
                            )
                        bump(s, t, p * service)

    def counting(s: LabelMatrix):
        return tuple(sum(row) for row in s)

    return QueueSystem(spec.n, states, counting, rates)


def constant_phi(rate: float):
    """Service rate ``rate`` for every label; balanced by Phi(s) = (phi0/rate)^|s|."""

    def phi(_i, _k, _s):
        return rate

    return phi


def constant_phi_balance(rate: float, phi0: float):
    def Phi(s: LabelMatrix) -> float:
        total = sum(v for row in s for v in row)
        return (phi0 / rate) ** total

    return Phi


def per_label_linear_phi(coeff: float):
    """Service rate ``coeff * s_ik``; balanced by a factorial-product Phi."""

    def phi(i, k, s):
        return coeff * s[i][k]

    return phi


def per_label_linear_phi_balance(coeff: float, phi0: float):
    def Phi(s: LabelMatrix) -> float:
        out = 1.0
        for row in s:
            for v in row:
                out *= (phi0 / coeff) ** v / math.factorial(v)
        return out

    return Phi


@dataclass(frozen=True)
class EquivalenceReport:
    ok: bool
    l1: float


def matched_oi_spec(spec: WhittleSpec, lam: dict | None = None):
    """OI queue over the nm labels matching the Whittle network in law.

    The arrival rate of label (i, k) is lambda_ik phi0, where lambda solves
    the traffic equations; this is the label's total inflow rate, counting
    customers routed to it internally.  The rate function is the total
    service rate, written through the balance-function ratios over occupied
    labels.  (Feeding a label only internally leaves its direct outside
    arrival rate at zero, so using P[0,ik] phi0 here would starve the label
    and break the macroscopic equality; the traffic solution restores it and
    reduces to P[0,ik] phi0 when there is no internal routing.)
    """
    from .oiqueue import OISpec

    if spec.Phi is None:
        raise ValueError("no balance function Phi supplied")
    if lam is None:
        lam = solve_traffic(spec)
    nu = tuple(lam[(i, k)] * spec.phi0 for i in range(spec.n) for k in range(spec.m))

    def mu(x):
        s = unflatten(x, spec.n, spec.m)
        phis = spec.Phi(s)
        total = 0.0
        for i in range(spec.n):
            for k in range(spec.m):
                if s[i][k] > 0:
                    total += spec.Phi(matrix_add(s, i, k, -1)) / phis
        return spec.phi0 * total

    return OISpec(n=spec.n * spec.m, nu=nu, mu=mu)


def check_equivalence(
    spec: WhittleSpec,
    gamma_fn: _balance.BalanceFunction,
    truncation: Iterable[LabelMatrix],
    tol: float = DEFAULT_TOL,
) -> EquivalenceReport:
    """Macroscopic equality of the controlled Whittle network and matched OI queue.

    Both systems receive the same balanced admission control, expressed on
    the nm-dimensional label counts.  The aggregated OI distribution is
    compared in L1 against the Whittle microstate distribution.
    """
    from .oiqueue import build_oi_system

    states = set(truncation)
    ok, witness = check_phi_balance(spec, states, tol)
    if not ok:
        raise ValueError(f"service rates are not balanced, witness {witness}")

    # With internal routing, the Whittle network shuffles customers across
    # labels of a class without admission control, while the matched OI queue
    # reaches each label through controlled arrivals; the two laws agree only
    # when the control cannot tell the labels of a class apart.
    lab = label_index(spec.n, spec.m)
    has_internal = any(
        spec.P[lab[(i, k)], lab[(i, l)]] > 0
        for i in range(spec.n)
        for k in range(spec.m)
        for l in range(spec.m)
        if k != l
    )
    if has_internal:
        by_totals: dict[tuple[int, ...], float] = {}
        for s in states:
            totals = tuple(sum(row) for row in s)
            val = gamma_fn(flatten(s))
            if abs(by_totals.setdefault(totals, val) - val) > 1e-12:
                raise ValueError(
                    "with internal routing the balance function must depend on the "
                    "class totals only"
                )

    wsys = build_whittle_system(spec, states)

    # Control the Whittle network at the label level: scale the arrival edge
    # s -> s + e_il by Gamma(s + e_il) / Gamma(s).
    def label_factor(sys: QueueSystem) -> QueueSystem:
        rates = []
        for e in sys.edges:
            r = e.rate
            if e.kind == ARRIVAL:
                src = flatten(sys.states[e.source])
                dst = flatten(sys.states[e.target])
                g_src = gamma_fn(src)
                r = r * (gamma_fn(dst) / g_src) if g_src > 0 else 0.0
            if r > 0:
                rates.append((sys.states[e.source], sys.states[e.target], r))
        counting = dict(zip(sys.states, sys.counts))
        return QueueSystem(sys.n, sys.states, counting.__getitem__, rates)

    wsys_controlled = label_factor(wsys)
    pi_w = solve_stationary(wsys_controlled)

    oi = matched_oi_spec(spec)
    flat_domain = FerrersSet(spec.n * spec.m, {flatten(s) for s in states})
    osys = build_oi_system(oi, flat_domain)
    policy = _balance.policy_from_balance(gamma_fn)
    osys_controlled = _balance.apply_control(osys, policy)
    pi_oi = solve_stationary(osys_controlled)

    macro_mass: dict[tuple[int, ...], float] = {x: 0.0 for x in flat_domain}
    for k, w in enumerate(osys_controlled.states):
        macro_mass[osys_controlled.counts[k]] += float(pi_oi.values[k])

    l1 = 0.0
    for k, s in enumerate(wsys_controlled.states):
        l1 += abs(float(pi_w.values[k]) - macro_mass[flatten(s)])
    return EquivalenceReport(ok=l1 <= tol, l1=l1)
