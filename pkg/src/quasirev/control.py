"""Admission-control problems: gain evaluation and exact policy optimization.

An admission problem pairs a quasi-reversible system with an occupation
reward rate and a per-transition reward.  The gain of a policy is the
long-run average reward of the controlled chain.  The unconstrained optimum
is computed by uniformizing into an average-reward MDP and running policy
iteration; the optimum over balanced policies reduces, through the linearity
of the gain in the balance function, to a search over indicator functions of
Ferrers masks, enumerated exactly in two dimensions.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .balance import BalancedPolicy, _policy_lookup
from .qrcore import (
    ARRIVAL,
    DEFAULT_TOL,
    FerrersSet,
    Macrostate,
    QueueSystem,
    StationaryMeasure,
    add_unit,
    check_quasi_reversibility,
    scale_arrivals,
    solve_stationary,
    sub_unit,
    validate_assumption1,
)


@dataclass(frozen=True)
class RewardSpec:
    """Occupation reward rate per microstate and reward per kernel edge."""

    rcont: Callable[[object], float]
    rdisc: Callable[[object, object], float]

    def negated(self) -> "RewardSpec":
        rc, rd = self.rcont, self.rdisc
        return RewardSpec(rcont=lambda s: -rc(s), rdisc=lambda s, t: -rd(s, t))


class AdmissionProblem:
    """Quasi-reversible system plus rewards; validated on construction."""

    def __init__(self, sys: QueueSystem, rewards: RewardSpec, tol: float = DEFAULT_TOL):
        report = validate_assumption1(sys)
        if not report.passes:
            raise ValueError(f"system fails structural validation: {report.violations}")
        self.sys = sys
        self.rewards = rewards
        self.pi = solve_stationary(sys)
        qr = check_quasi_reversibility(sys, self.pi, tol)
        if not qr.quasi_reversible:
            raise ValueError(
                f"system is not quasi-reversible: residual {qr.max_residual:.3e} at {qr.worst}"
            )

    def negated(self) -> "AdmissionProblem":
        return AdmissionProblem(self.sys, self.rewards.negated())


def _micro_factor(sys: QueueSystem, policy) -> Callable[[object, int], float]:
    """Admission factor lookup accepting macro policies, tables, or callables."""
    if isinstance(policy, PolicyTable) and policy.by == "micro":
        return lambda s, i: policy.probs.get((s, i), 0.0)
    lookup = _policy_lookup(policy)
    counting = dict(zip(sys.states, sys.counts))
    return lambda s, i: lookup(counting[s], i)


def gain(problem: AdmissionProblem, policy) -> float:
    """Long-run average reward of the controlled system.

    The base system's drain paths are uncontrolled, so any admission policy
    leaves the controlled chain unichain; balance is not required here.
    """
    sys = problem.sys
    controlled = scale_arrivals(sys, _micro_factor(sys, policy))
    pi = solve_stationary(controlled, require_assumption1=False)
    return _gain_of(controlled, pi, problem.rewards)


def _gain_of(sys: QueueSystem, pi: StationaryMeasure, rewards: RewardSpec) -> float:
    total = sum(
        pi.values[k] * rewards.rcont(s) for k, s in enumerate(sys.states) if pi.values[k]
    )
    for e in sys.edges:
        mass = pi.values[e.source]
        if mass:
            total += mass * e.rate * rewards.rdisc(sys.states[e.source], sys.states[e.target])
    return float(total)


@dataclass(frozen=True)
class PolicyTable:
    """Admission probabilities keyed by microstate or macrostate and class."""

    probs: dict
    by: str  # "micro" | "macro"
    deterministic: bool


@dataclass(frozen=True)
class MdpSolution:
    policy: PolicyTable
    gain: float
    bias: np.ndarray
    bellman_residual: float
    iterations: int


def optimal_policy(problem: AdmissionProblem, max_iter: int = 200) -> tuple[PolicyTable, float]:
    sol = solve_optimal(problem, max_iter=max_iter)
    return sol.policy, sol.gain


def solve_optimal(problem: AdmissionProblem, max_iter: int = 200) -> MdpSolution:
    """Average-reward optimum by uniformization and Howard policy iteration.

    The action in each state is one admission bit per class; departures and
    internal moves are uncontrolled.  Policy evaluation anchors the bias at
    the empty state; iteration stops when the policy is stable.  The returned
    Bellman residual is measured on the uniformized chain.
    """
    sys = problem.sys
    n, N = sys.n, len(sys.states)
    rewards = problem.rewards

    arr_flow = [[[] for _ in range(n)] for _ in range(N)]  # (target, rate)
    arr_reward = np.zeros((N, n))
    base_flow = [[] for _ in range(N)]
    base_reward = np.array([rewards.rcont(s) for s in sys.states], dtype=float)
    for e in sys.edges:
        rd = rewards.rdisc(sys.states[e.source], sys.states[e.target])
        if e.kind == ARRIVAL:
            arr_flow[e.source][e.cls].append((e.target, e.rate))
            arr_reward[e.source, e.cls] += e.rate * rd
        else:
            base_flow[e.source].append((e.target, e.rate))
            base_reward[e.source] += e.rate * rd

    outflow_full = np.array(
        [
            sum(r for _, r in base_flow[k])
            + sum(r for i in range(n) for _, r in arr_flow[k][i])
            for k in range(N)
        ]
    )
    unif = 1.05 * float(outflow_full.max())
    if unif <= 0:
        raise ValueError("system has no transitions")

    actions = list(itertools.product((0, 1), repeat=n))
    anchor = sys.empty_index

    def transition_row(k: int, a: tuple[int, ...]) -> tuple[np.ndarray, float]:
        row = np.zeros(N)
        for t, r in base_flow[k]:
            row[t] += r / unif
        reward = base_reward[k]
        for i in range(n):
            if a[i]:
                for t, r in arr_flow[k][i]:
                    row[t] += r / unif
                reward += arr_reward[k, i]
        row[k] += 1.0 - row.sum()
        return row, reward / unif

    policy = [actions[-1]] * N  # start from admit-all
    h = np.zeros(N)
    g = 0.0
    for iteration in range(1, max_iter + 1):
        # evaluation: h = r - g 1 + P h with h[anchor] = 0
        P = np.zeros((N, N))
        r_vec = np.zeros(N)
        for k in range(N):
            P[k], r_vec[k] = transition_row(k, policy[k])
        A = np.zeros((N + 1, N + 1))
        A[:N, :N] = np.eye(N) - P
        A[:N, N] = 1.0
        A[N, anchor] = 1.0
        b = np.zeros(N + 1)
        b[:N] = r_vec
        sol, *_ = np.linalg.lstsq(A, b, rcond=None)
        h, g = sol[:N], float(sol[N])

        improved = False
        for k in range(N):
            cur = policy[k]
            row, rew = transition_row(k, cur)
            best_a, best_q = cur, rew + row @ h
            for a in actions:
                if a == cur:
                    continue
                row, rew = transition_row(k, a)
                q = rew + row @ h
                # switch only on strict improvement to avoid cycling on ties
                if q > best_q + 1e-12:
                    best_a, best_q = a, q
            if best_a != cur:
                policy[k] = best_a
                improved = True
        if not improved:
            break
    else:
        raise RuntimeError("policy iteration did not converge")

    residual = 0.0
    for k in range(N):
        best = max(transition_row(k, a)[1] + transition_row(k, a)[0] @ h for a in actions)
        residual = max(residual, abs(best - h[k] - g))

    probs = {
        (sys.states[k], i): float(policy[k][i]) for k in range(N) for i in range(n)
    }
    table = PolicyTable(probs=probs, by="micro", deterministic=True)
    return MdpSolution(
        policy=table,
        gain=g * unif,
        bias=h,
        bellman_residual=residual,
        iterations=iteration,
    )


def _macro_weights(problem: AdmissionProblem):
    """Per-macrostate mass and gain coefficient of the indicator objective.

    For a mask A with balance function 1{x in A} / sum_{y in A} mass(y), the
    gain is sum_{y in A} w(y) / sum_{y in A} mass(y): occupation rewards and
    non-arrival transition rewards attach to the source level, and each
    arrival's reward attaches to its target level since the admission factor
    is the indicator of the target.
    """
    sys = problem.sys
    pi = problem.pi.values
    mass: dict[Macrostate, float] = {x: 0.0 for x in sys.macro_space}
    w: dict[Macrostate, float] = {x: 0.0 for x in sys.macro_space}
    for k, s in enumerate(sys.states):
        x = sys.counts[k]
        mass[x] += float(pi[k])
        w[x] += float(pi[k]) * problem.rewards.rcont(s)
    for e in sys.edges:
        flow = float(pi[e.source]) * e.rate
        if flow == 0.0:
            continue
        rd = problem.rewards.rdisc(sys.states[e.source], sys.states[e.target])
        if rd == 0.0:
            continue
        if e.kind == ARRIVAL:
            w[sys.counts[e.target]] += flow * rd
        else:
            w[sys.counts[e.source]] += flow * rd
    return mass, w


def enumerate_ferrers_masks(domain: FerrersSet, cap: int = 10**6):
    """All Ferrers subsets of a two-dimensional Ferrers domain.

    Masks are column-height profiles: h(a) customers of class 2 allowed at
    class-1 level a, non-increasing in a.  Raises when the count exceeds the
    cap.
    """
    if domain.n != 2:
        raise ValueError("mask enumeration is implemented for two classes only")
    width = max(x[0] for x in domain) + 1
    height = [0] * width
    for x in domain:
        height[x[0]] = max(height[x[0]], x[1] + 1)

    masks: list[tuple[int, ...]] = []

    def rec(col: int, prev: int, profile: list[int]):
        if len(masks) > cap:
            raise ValueError(f"more than {cap} masks to enumerate")
        if col == width:
            masks.append(tuple(profile))
            return
        lo = 0 if col > 0 else 1  # the mask must contain the origin
        for h in range(min(prev, height[col]), lo - 1, -1):
            profile.append(h)
            rec(col + 1, h, profile)
            profile.pop()

    rec(0, max(height), [])
    for profile in masks:
        members = [(a, b) for a in range(width) for b in range(profile[a])]
        if members:
            yield members


def best_balanced(problem: AdmissionProblem, cap: int = 10**6) -> tuple[FerrersSet, float]:
    """Best deterministic balanced policy by exact mask enumeration (n = 2).

    Evaluates the gain of every Ferrers mask in closed form from the base
    stationary measure, without re-solving the chain per mask.  Larger class
    counts go through the exported linear program instead.
    """
    if problem.sys.n != 2:
        raise ValueError("exact enumeration needs n = 2; use export_lp for larger systems")
    mass, w = _macro_weights(problem)
    best_members, best_gain = None, None
    for members in enumerate_ferrers_masks(problem.sys.macro_space, cap):
        num = sum(w[x] for x in members)
        den = sum(mass[x] for x in members)
        if den <= 0:
            continue
        g = num / den
        if best_gain is None or g > best_gain + 1e-15:
            best_members, best_gain = members, g
    return FerrersSet(2, best_members), float(best_gain)


def balanced_gain_closed_form(problem: AdmissionProblem, mask: FerrersSet) -> float:
    """Gain of the deterministic balanced policy with the given mask."""
    mass, w = _macro_weights(problem)
    num = sum(w[x] for x in mask)
    den = sum(mass[x] for x in mask)
    return num / den


@dataclass(frozen=True)
class LossReport:
    g_opt: float
    g_balanced: float
    g_worst: float
    loss_pct: float | None
    mask: FerrersSet
    optimal: PolicyTable


def loss(problem: AdmissionProblem) -> LossReport:
    """Relative suboptimality of the best balanced policy.

    The worst policy is computed by maximizing the negated rewards, not
    assumed to be reject-all.  The percentage is undefined when the optimal
    and worst gains coincide.
    """
    sol = solve_optimal(problem)
    mask, g_bal = best_balanced(problem)
    worst = solve_optimal(problem.negated())
    g_worst = -worst.gain
    denom = sol.gain - g_worst
    pct = 100.0 * (sol.gain - g_bal) / denom if denom > 1e-12 else None
    return LossReport(
        g_opt=sol.gain,
        g_balanced=g_bal,
        g_worst=g_worst,
        loss_pct=pct,
        mask=mask,
        optimal=sol.policy,
    )


# --- toy processor-sharing examples -------------------------------------

TOY_PATH = (
    (0, 0), (1, 0), (2, 0), (2, 1), (3, 1), (3, 2),
    (3, 3), (3, 4), (4, 4), (4, 5), (5, 5),
)


def toy_system(nu1: float, nu2: float, cap: int = 5) -> QueueSystem:
    """Two-class processor-sharing queue on a square grid, identity counting."""
    states = [(a, b) for a in range(cap + 1) for b in range(cap + 1)]
    rates = {}
    for s in states:
        for i, nu in enumerate((nu1, nu2)):
            t = add_unit(s, i)
            if t[i] <= cap:
                rates[(s, t)] = nu
        total = s[0] + s[1]
        if total:
            for i in range(2):
                if s[i]:
                    rates[(s, sub_unit(s, i))] = s[i] / total
    return QueueSystem(2, states, lambda s: s, rates)


def toy_example(kind: str, nu1: float, nu2: float) -> AdmissionProblem:
    """The three reference reward structures on the processor-sharing queue.

    ``path_reward`` pays 1 per admission along a fixed staircase of states;
    ``corner_reward`` pays the occupancy of the full-of-class-1 corner state;
    ``realistic`` combines linear holding costs with per-class admission
    rewards of 3 and 6.
    """
    if nu1 <= 0 or nu2 <= 0:
        raise ValueError("arrival rates must be positive")
    sys = toy_system(nu1, nu2)
    if kind == "path_reward":
        path = set(TOY_PATH)

        def rdisc(s, t):
            return 1.0 if s in path and t in path and all(a <= b for a, b in zip(s, t)) else 0.0

        rewards = RewardSpec(rcont=lambda s: 0.0, rdisc=rdisc)
    elif kind == "corner_reward":
        rewards = RewardSpec(
            rcont=lambda s: 1.0 if s == (5, 0) else 0.0, rdisc=lambda s, t: 0.0
        )
    elif kind == "realistic":
        rewards = RewardSpec(
            rcont=lambda s: -float(s[0] + s[1]),
            rdisc=lambda s, t: 3.0 * (t == add_unit(s, 0)) + 6.0 * (t == add_unit(s, 1)),
        )
    else:
        raise ValueError(f"unknown toy example {kind!r}")
    return AdmissionProblem(sys, rewards)


TOY_KINDS = ("path_reward", "corner_reward", "realistic")


# --- LP export -----------------------------------------------------------


def _vname(prefix: str, *states) -> str:
    return prefix + "__".join("_".join(str(v) for v in s) for s in states)


def export_lp(problem: AdmissionProblem, variant: str, fh) -> None:
    """Write the admission problem as a fixed-format LP text file.

    ``general`` emits the occupancy/flow formulation with one flow variable
    per kernel edge, flow conservation per state, arrival flows bounded by
    their capacity, and all other flows tied to the occupancy.  It requires
    at most one arrival target per (state, class), since a shared admission
    probability cannot be expressed edge by edge otherwise.
    ``reversible_local`` additionally replaces flow conservation with edge
    symmetry and requires identity counting.  ``balanced`` emits the
    balance-function formulation: one variable per macrostate, componentwise
    monotonicity rows, and a single normalization row weighted by the base
    stationary measure.
    """
    sys = problem.sys
    if variant == "balanced":
        _export_lp_balanced(problem, fh)
        return
    if variant not in ("general", "reversible_local"):
        raise ValueError(f"unknown LP variant {variant!r}")
    if variant == "reversible_local":
        for k, s in enumerate(sys.states):
            if tuple(s) != sys.counts[k]:
                raise ValueError("reversible_local export needs identity counting")
    seen: dict[tuple[int, int], int] = {}
    for e in sys.edges:
        if e.kind == ARRIVAL:
            key = (e.source, e.cls)
            seen[key] = seen.get(key, 0) + 1
            if seen[key] > 1:
                raise ValueError(
                    "general export needs at most one arrival target per state and class"
                )

    def pi(k):
        return _vname("Pi_", sys.counts[k]) if tuple(sys.states[k]) == sys.counts[k] else f"Pi_s{k}"

    def eta(e):
        return f"eta_s{e.source}__s{e.target}"

    obj_terms = []
    for k, s in enumerate(sys.states):
        c = problem.rewards.rcont(s)
        if c:
            obj_terms.append(f"{c:+.12g} {pi(k)}")
    for e in sys.edges:
        rd = problem.rewards.rdisc(sys.states[e.source], sys.states[e.target])
        if rd:
            obj_terms.append(f"{rd:+.12g} {eta(e)}")
    if not obj_terms:
        obj_terms.append(f"+0 {pi(sys.empty_index)}")

    lines = ["\\ admission-control linear program", f"\\ variant: {variant}", "Maximize"]
    lines.append(" obj: " + " ".join(obj_terms))
    lines.append("Subject To")
    cid = 0
    if variant == "general":
        for k in range(len(sys.states)):
            terms = []
            for e in sys.edges:
                if e.source == k:
                    terms.append(f"+1 {eta(e)}")
                if e.target == k:
                    terms.append(f"-1 {eta(e)}")
            if terms:
                cid += 1
                lines.append(f" flow{cid}: " + " ".join(terms) + " = 0")
    else:
        pairs = {(min(e.source, e.target), max(e.source, e.target)) for e in sys.edges}
        for a, b in sorted(pairs):
            fwd = next((e for e in sys.edges if (e.source, e.target) == (a, b)), None)
            bwd = next((e for e in sys.edges if (e.source, e.target) == (b, a)), None)
            cid += 1
            left = f"+1 {eta(fwd)}" if fwd else "+0 " + pi(a)
            right = f"-1 {eta(bwd)}" if bwd else ""
            lines.append(f" sym{cid}: {left} {right} = 0".rstrip())
    norm = " ".join(f"+1 {pi(k)}" for k in range(len(sys.states)))
    lines.append(f" norm: {norm} = 1")
    for e in sys.edges:
        cid += 1
        if e.kind == ARRIVAL:
            lines.append(f" capa{cid}: +1 {eta(e)} {-e.rate:+.12g} {pi(e.source)} <= 0")
        else:
            lines.append(f" tie{cid}: +1 {eta(e)} {-e.rate:+.12g} {pi(e.source)} = 0")
    lines.append("Bounds")
    for k in range(len(sys.states)):
        lines.append(f" 0 <= {pi(k)} <= 1")
    for e in sys.edges:
        lines.append(f" 0 <= {eta(e)}")
    lines.append("End")
    fh.write("\n".join(lines) + "\n")


def _export_lp_balanced(problem: AdmissionProblem, fh) -> None:
    sys = problem.sys
    mass, w = _macro_weights(problem)
    order = list(sys.macro_space)

    def g(x):
        return _vname("Gam_", x)

    lines = [
        "\\ admission-control linear program",
        "\\ variant: balanced",
        "Maximize",
        " obj: " + " ".join(f"{w[x]:+.12g} {g(x)}" for x in order),
        "Subject To",
    ]
    cid = 0
    for x in order:
        for i in range(sys.n):
            y = add_unit(x, i)
            if y in sys.macro_space:
                cid += 1
                lines.append(f" mono{cid}: +1 {g(x)} -1 {g(y)} >= 0")
    lines.append(" norm: " + " ".join(f"{mass[x]:+.12g} {g(x)}" for x in order) + " = 1")
    lines.append("Bounds")
    for x in order:
        lines.append(f" 0 <= {g(x)}")
    lines.append("End")
    fh.write("\n".join(lines) + "\n")
