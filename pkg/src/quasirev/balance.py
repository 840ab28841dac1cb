"""Balance functions and balanced arrival-control policies.

A balance function is a nonnegative map on a Ferrers macrostate space with
value 1 at the origin and coordinate-convex support.  It induces admission
probabilities gamma_i(x) = Gamma(x + e_i) / Gamma(x); conversely a policy is
balanced exactly when the product of its admission probabilities along an
increasing path from the origin does not depend on the path.

Applying a balanced policy to a quasi-reversible system multiplies the
stationary measure pointwise by the balance function; ``verify_theorem1``
checks that identity numerically.  ``decompose_vertex`` writes any balance
function on a finite domain as a convex combination of indicators of nested
Ferrers sets by greedily peeling minimal-value maximal points.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .qrcore import (
    DEFAULT_TOL,
    FerrersSet,
    Macrostate,
    QueueSystem,
    StationaryMeasure,
    add_unit,
    check_quasi_reversibility,
    dominates,
    scale_arrivals,
    solve_stationary,
    sub_unit,
)


class NotBalanceFunctionError(ValueError):
    """Candidate values violate the balance-function requirements."""


class BalanceFunction:
    """Nonnegative macrostate map with value 1 at the origin, Ferrers support."""

    __slots__ = ("domain", "values", "support")

    def __init__(self, domain: FerrersSet, values: dict):
        vals = {tuple(x): float(v) for x, v in values.items()}
        if set(vals) != domain.members:
            raise NotBalanceFunctionError("values must be defined exactly on the domain")
        origin = (0,) * domain.n
        if abs(vals[origin] - 1.0) > 1e-12:
            raise NotBalanceFunctionError(f"value at the origin is {vals[origin]}, not 1")
        for x, v in vals.items():
            if v < 0:
                raise NotBalanceFunctionError(f"negative value {v} at {x}")
        support = frozenset(x for x, v in vals.items() if v > 0.0)
        for x in support:
            for i in range(domain.n):
                if x[i] > 0 and sub_unit(x, i) not in support:
                    raise NotBalanceFunctionError(f"support is not a Ferrers set at {x}")
        self.domain = domain
        self.values = vals
        self.support = support

    def __call__(self, x: Macrostate) -> float:
        return self.values[tuple(x)]

    def to_json(self) -> str:
        order = list(self.domain)
        return json.dumps(
            {"domain": [list(x) for x in order], "values": [self.values[x] for x in order]}
        )

    @classmethod
    def from_json(cls, text: str) -> "BalanceFunction":
        data = json.loads(text)
        domain = FerrersSet(len(data["domain"][0]), [tuple(x) for x in data["domain"]])
        values = {tuple(x): v for x, v in zip(data["domain"], data["values"])}
        return cls(domain, values)


@dataclass(frozen=True)
class BalancedPolicy:
    """Admission probabilities generated by a balance function.

    Probabilities are stored on the support of the source function; outside
    the support they are 0 by convention.
    """

    domain: FerrersSet
    probs: dict
    source: BalanceFunction

    def prob(self, x: Macrostate, i: int) -> float:
        return self.probs.get((tuple(x), i), 0.0)


def policy_from_balance(gamma_fn: BalanceFunction) -> BalancedPolicy:
    """Admission probabilities Gamma(x + e_i) / Gamma(x) on the support."""
    probs = {}
    domain = gamma_fn.domain
    for x in gamma_fn.support:
        gx = gamma_fn(x)
        for i in range(domain.n):
            y = add_unit(x, i)
            if y not in domain:
                continue
            ratio = gamma_fn(y) / gx
            if ratio > 1.0 + 1e-9:
                raise NotBalanceFunctionError(
                    f"function increases along axis {i} at {x}: ratio {ratio}"
                )
            probs[(x, i)] = min(ratio, 1.0)
    return BalancedPolicy(domain=domain, probs=probs, source=gamma_fn)


def _policy_lookup(policy) -> Callable[[Macrostate, int], float]:
    if isinstance(policy, BalancedPolicy):
        return policy.prob
    if isinstance(policy, dict):
        return lambda x, i: policy.get((tuple(x), i), 0.0)
    if callable(policy):
        return policy
    raise TypeError(f"unsupported policy object {policy!r}")


@dataclass(frozen=True)
class BalanceCheck:
    balanced: bool
    witness: tuple | None  # (x, i, j) at the base of the failed condition
    balance_function: BalanceFunction | None


def check_balance_condition(policy, domain: FerrersSet, tol: float = DEFAULT_TOL) -> BalanceCheck:
    """Test path-product consistency of a raw policy and reconstruct Gamma.

    Gamma is rebuilt level by level from admission-probability products; two
    predecessors of the same macrostate that disagree beyond tolerance yield
    a witness (x, i, j) for the failed pairwise condition
    gamma_i(x) gamma_j(x + e_i) = gamma_i(x + e_j) gamma_j(x).
    """
    lookup = _policy_lookup(policy)
    values: dict[Macrostate, float] = {}
    for x in domain:  # canonical order: level by level
        if sum(x) == 0:
            values[x] = 1.0
            continue
        candidates = []
        for i in range(domain.n):
            if x[i] > 0:
                p = sub_unit(x, i)
                candidates.append((i, values[p] * lookup(p, i)))
        val = candidates[0][1]
        for j, other in candidates[1:]:
            if abs(other - val) > tol:
                i = candidates[0][0]
                base = sub_unit(sub_unit(x, i), j)
                return BalanceCheck(balanced=False, witness=(base, i, j), balance_function=None)
        values[x] = val
    try:
        fn = BalanceFunction(domain, values)
    except NotBalanceFunctionError:
        return BalanceCheck(balanced=False, witness=None, balance_function=None)
    return BalanceCheck(balanced=True, witness=None, balance_function=fn)


def make_family(kind: str, params, domain: FerrersSet) -> BalanceFunction:
    """Construct the classic balanced families on a finite Ferrers domain.

    Kinds: ``static`` (per-class constants), ``decentralized`` (per-class
    functions of the own-class count), ``size_based`` (function of the total
    count), ``deterministic`` (indicator of a Ferrers mask), ``cum_prod``
    (product of a state map over the lower set of each point).  For
    ``cum_prod`` the origin's stored value is 1 regardless of the factor at
    the origin, which only rescales the function.
    """
    n = domain.n
    values: dict[Macrostate, float] = {}
    if kind == "static":
        alpha = tuple(float(a) for a in params)
        if len(alpha) != n or not all(0.0 <= a <= 1.0 for a in alpha):
            raise ValueError("static family needs per-class constants in [0, 1]")
        for x in domain:
            values[x] = math.prod(a**v for a, v in zip(alpha, x))
    elif kind == "decentralized":
        psis = list(params)
        if len(psis) != n:
            raise ValueError("decentralized family needs one function per class")
        for x in domain:
            values[x] = math.prod(
                psis[i](l) for i in range(n) for l in range(x[i])
            )
    elif kind == "size_based":
        psi = params
        for x in domain:
            values[x] = math.prod(psi(l) for l in range(sum(x)))
    elif kind == "deterministic":
        mask = params if isinstance(params, FerrersSet) else FerrersSet(n, params)
        if not mask.members <= domain.members:
            raise ValueError("mask must be a subset of the domain")
        for x in domain:
            values[x] = 1.0 if x in mask else 0.0
    elif kind == "cum_prod":
        psi = params
        for x in domain:
            if sum(x) == 0:
                values[x] = 1.0
            else:
                values[x] = math.prod(psi(y) for y in domain if dominates(x, y))
    else:
        raise ValueError(f"unknown family kind {kind!r}")
    return BalanceFunction(domain, values)


def apply_control(sys: QueueSystem, policy) -> QueueSystem:
    """System under an admission policy: arrival rates scaled by gamma_i(|s|)."""
    if isinstance(policy, BalancedPolicy) and policy.domain != sys.macro_space:
        raise ValueError("policy domain does not match the system's macrostate space")
    lookup = _policy_lookup(policy)
    counting = dict(zip(sys.states, sys.counts))
    return scale_arrivals(sys, lambda s, i: lookup(counting[s], i))


@dataclass(frozen=True)
class Theorem1Report:
    ok: bool
    linf: float
    controlled_qr_residual: float


def verify_theorem1(
    sys: QueueSystem, gamma_fn: BalanceFunction, tol: float = DEFAULT_TOL
) -> Theorem1Report:
    """Numerical check that balanced control modulates the stationary law.

    Compares the normalized pointwise product Pi(s) Gamma(|s|) against the
    stationary distribution of the controlled system, and re-checks partial
    balance on the controlled system.
    """
    pi = solve_stationary(sys)
    weighted = np.array(
        [pi.values[k] * gamma_fn(sys.counts[k]) for k in range(len(sys.states))]
    )
    total = weighted.sum()
    if total <= 0:
        raise ValueError("balance function annihilates the stationary measure")
    weighted /= total

    controlled = apply_control(sys, policy_from_balance(gamma_fn))
    pi_c = solve_stationary(controlled)
    aligned = np.array([pi_c.values[controlled.index[s]] for s in sys.states])
    linf = float(np.abs(weighted - aligned).max())
    qr = check_quasi_reversibility(controlled, pi_c, tol)
    return Theorem1Report(
        ok=linf <= tol and qr.quasi_reversible,
        linf=linf,
        controlled_qr_residual=qr.max_residual,
    )


@dataclass(frozen=True)
class DecompositionResult:
    masks: tuple[FerrersSet, ...]
    coefficients: tuple[float, ...]
    visit_order: tuple[Macrostate, ...]


def decompose_vertex(gamma_fn: BalanceFunction) -> DecompositionResult:
    """Write a balance function as a convex combination of Ferrers indicators.

    Greedy peeling: repeatedly remove, among the maximal points of the
    remaining set, one of minimal value (lexicographically smallest on ties).
    The k-th coefficient is the value increment between consecutively peeled
    points, so coefficients are nonnegative and telescope to Gamma(0) = 1.
    """
    domain = gamma_fn.domain
    remaining = set(domain.members)
    masks: list[FerrersSet] = []
    coefficients: list[float] = []
    visit: list[Macrostate] = []
    prev_value = None
    while remaining:
        maximal = [
            x
            for x in remaining
            if not any(y != x and dominates(y, x) for y in remaining)
        ]
        y = min(maximal, key=lambda x: (gamma_fn(x), x))
        masks.append(FerrersSet(domain.n, remaining))
        coefficients.append(
            gamma_fn(y) if prev_value is None else gamma_fn(y) - prev_value
        )
        visit.append(y)
        prev_value = gamma_fn(y)
        remaining.remove(y)
    return DecompositionResult(
        masks=tuple(masks), coefficients=tuple(coefficients), visit_order=tuple(visit)
    )


@dataclass(frozen=True)
class MonotonicityReport:
    ok: bool
    counterexample: tuple | None  # (x, i, j, delta_i, delta_j)


def check_monotonicity(policy, domain: FerrersSet | None = None) -> MonotonicityReport:
    """Check the paired-monotonicity consequence of the balance condition.

    For every base state and class pair, the direction in which gamma_i moves
    when a class-j customer is added must match the direction in which
    gamma_j moves when a class-i customer is added.  Balanced policies always
    pass; the raw-policy overload serves as a negative control.
    """
    if isinstance(policy, BalancedPolicy):
        domain = policy.domain
        allowed = policy.source.support
    else:
        if domain is None:
            raise ValueError("raw policies need an explicit domain")
        allowed = domain.members
    lookup = _policy_lookup(policy)
    n = domain.n
    for x in domain:
        for i in range(n):
            xi = add_unit(x, i)
            if xi not in allowed:
                continue
            for j in range(i + 1, n):
                xj = add_unit(x, j)
                if xj not in allowed or add_unit(xi, j) not in domain:
                    continue
                di = lookup(xj, i) - lookup(x, i)
                dj = lookup(xi, j) - lookup(x, j)
                si = 0 if abs(di) <= 1e-12 else (1 if di > 0 else -1)
                sj = 0 if abs(dj) <= 1e-12 else (1 if dj > 0 else -1)
                if si != sj:
                    return MonotonicityReport(ok=False, counterexample=(x, i, j, di, dj))
    return MonotonicityReport(ok=True, counterexample=None)


def _sigma(t: float) -> float:
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


def _log_sigma(t: float) -> float:
    # log(sigma(t)) computed stably
    if t >= 0:
        return -math.log1p(math.exp(-t))
    return t - math.log1p(math.exp(t))


STATIC = "static"
SEMISTATIC = "semistatic"
DYNAMIC = "dynamic"
IMBALANCED = "imbalanced"

FAMILIES = (STATIC, SEMISTATIC, DYNAMIC, IMBALANCED)


class ThetaParameterization:
    """Differentiable parameterized balance-function families.

    ``static`` uses one logit per class, ``semistatic`` adds one logit per
    ordered class pair (quadratic exponents, diagonal included), ``dynamic``
    keeps one logit per macrostate away from the origin, materialized with a
    default value on first touch.  ``imbalanced`` parameterizes raw admission
    probabilities per (microstate key, class) and admits no balance function.

    Parameter growth for the dynamic and imbalanced families happens on
    access and is meant to be driven by a single-owner training loop.
    """

    def __init__(
        self,
        family: str,
        n: int,
        theta0: float = 0.0,
        theta_init: float = 3.0,
    ):
        if family not in FAMILIES:
            raise ValueError(f"unknown family {family!r}")
        self.family = family
        self.n = int(n)
        self.theta_init = float(theta_init)
        if family == STATIC:
            self._theta = {("class", i): float(theta0) for i in range(n)}
        elif family == SEMISTATIC:
            self._theta = {("class", i): float(theta0) for i in range(n)}
            self._theta.update(
                {("pair", i, j): float(theta0) for i in range(n) for j in range(n)}
            )
        elif family == DYNAMIC:
            self._theta = {}
        else:
            self._theta = {}

    @property
    def is_balanced(self) -> bool:
        return self.family != IMBALANCED

    def keys(self) -> tuple:
        return tuple(self._theta)

    def vector(self) -> np.ndarray:
        return np.array([self._theta[k] for k in self._theta], dtype=float)

    def update(self, delta: np.ndarray) -> None:
        keys = list(self._theta)
        if len(delta) != len(keys):
            raise ValueError("update dimension does not match the parameter dimension")
        for k, d in zip(keys, delta):
            self._theta[k] += float(d)

    def _get(self, key) -> float:
        if key not in self._theta:
            if self.family == DYNAMIC:
                self._theta[key] = self.theta_init
            elif self.family == IMBALANCED:
                self._theta[key] = 0.0
            else:
                raise KeyError(key)
        return self._theta[key]

    def _dynamic_sites(self, x: Macrostate):
        # lattice points 0 != y <= x; the origin carries no parameter because
        # its factor cancels in every admission ratio
        sites = [()]
        for v in x:
            sites = [y + (w,) for y in sites for w in range(v + 1)]
        return [y for y in sites if any(y)]

    def log_gamma(self, x: Macrostate) -> float:
        """log Gamma_theta(x); zero at the origin for every balanced family."""
        x = tuple(x)
        if self.family == STATIC:
            return sum(x[i] * _log_sigma(self._theta[("class", i)]) for i in range(self.n))
        if self.family == SEMISTATIC:
            out = sum(x[i] * _log_sigma(self._theta[("class", i)]) for i in range(self.n))
            for i in range(self.n):
                for j in range(self.n):
                    out += x[i] * x[j] * _log_sigma(self._theta[("pair", i, j)])
            return out
        if self.family == DYNAMIC:
            return sum(_log_sigma(self._get(("site", y))) for y in self._dynamic_sites(x))
        raise ValueError("the imbalanced family has no balance function")

    def grad_log_gamma(self, x: Macrostate) -> np.ndarray:
        """Gradient of log Gamma_theta at x, aligned with ``keys()``."""
        x = tuple(x)
        if self.family == IMBALANCED:
            raise ValueError("the imbalanced family has no balance function")
        if self.family == DYNAMIC:
            for y in self._dynamic_sites(x):
                self._get(("site", y))
        grad = np.zeros(len(self._theta))
        for pos, key in enumerate(self._theta):
            if key[0] == "class":
                i = key[1]
                if x[i]:
                    grad[pos] = x[i] * (1.0 - _sigma(self._theta[key]))
            elif key[0] == "pair":
                _, i, j = key
                if x[i] and x[j]:
                    grad[pos] = x[i] * x[j] * (1.0 - _sigma(self._theta[key]))
            else:  # ("site", y)
                y = key[1]
                if dominates(x, y):
                    grad[pos] = 1.0 - _sigma(self._theta[key])
        return grad

    def admit_prob(self, x: Macrostate, i: int, micro_key=None) -> float:
        """Admission probability for class i; always in (0, 1) for finite theta."""
        if self.family == IMBALANCED:
            if micro_key is None:
                raise ValueError("imbalanced admission probabilities are keyed by microstate")
            return _sigma(self._get(("micro", micro_key, i)))
        x = tuple(x)
        return math.exp(self.log_gamma(add_unit(x, i)) - self.log_gamma(x))

    def grad_log_policy(self, x: Macrostate, i: int, action: int, micro_key=None) -> np.ndarray:
        """Gradient of log pi_theta(s, i, a) for a binary admit/reject action."""
        if self.family == IMBALANCED:
            key = ("micro", micro_key, i)
            sig = _sigma(self._get(key))
            grad = np.zeros(len(self._theta))
            pos = list(self._theta).index(key)
            grad[pos] = (1.0 - sig) if action == 1 else -sig
            return grad
        x = tuple(x)
        y = add_unit(x, i)
        if self.family == DYNAMIC:
            for z in self._dynamic_sites(y):
                self._get(("site", z))
        delta = self.grad_log_gamma(y) - self.grad_log_gamma(x)
        if action == 1:
            return delta
        gamma = self.admit_prob(x, i)
        return -(gamma / (1.0 - gamma)) * delta

    def to_balance_function(self, domain: FerrersSet) -> BalanceFunction:
        values = {x: math.exp(self.log_gamma(x)) for x in domain}
        return BalanceFunction(domain, values)


def grad_log_gamma(param: ThetaParameterization, x: Macrostate) -> np.ndarray:
    """Closed-form gradient of log Gamma_theta(x) for the balanced families."""
    return param.grad_log_gamma(x)
