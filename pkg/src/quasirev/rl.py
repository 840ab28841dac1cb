"""Learning algorithms on the arrival-embedded redundancy environment.

Three optimizers over admission policies: a score-aware batch gradient
ascent that exploits the product form of the stationary distribution through
the covariance of rewards with the balance-function score, a per-step
actor-critic with a differential value table, and differential Q-learning
with an epsilon-greedy table policy.

``ExactModel`` supports the gradient identities on a truncated instance:
the stationary law factorizes over words, per-level masses follow a lattice
recursion, and one-step expected rewards solve an absorbing race, so gains
and their gradients are computable without simulation.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .balance import IMBALANCED, ThetaParameterization
from .oiqueue import (
    OISpec,
    RedundancySpec,
    Word,
    enumerate_words,
    oi_product_form,
    redundancy_to_oi,
    serving_sets,
    word_counts,
)
from .qrcore import FerrersSet, Macrostate, add_unit
from .simenv import EnvState, RedundancyEnv, StepOutcome, _UniformStream


def policy_probs(param: ThetaParameterization, state: EnvState) -> float:
    """Admission probability of the incoming customer in the given state."""
    if param.family == IMBALANCED:
        return param.admit_prob(None, state.incoming_class, micro_key=state.word)
    x = word_counts(state.word, param.n)
    return param.admit_prob(x, state.incoming_class)


def _grad_log_policy(param: ThetaParameterization, state: EnvState, action: int) -> np.ndarray:
    if param.family == IMBALANCED:
        return param.grad_log_policy(None, state.incoming_class, action, micro_key=state.word)
    x = word_counts(state.word, param.n)
    return param.grad_log_policy(x, state.incoming_class, action)


def sage_gradient_estimate(
    batch: Iterable[tuple[EnvState, int, float]], param: ThetaParameterization
) -> np.ndarray:
    """Score-aware gradient estimate from one batch of (state, action, reward).

    Sum of the centered covariance term (reward deviations times the
    balance-function score at the pre-decision state) and the policy score
    term (rewards times the log-policy gradient at the taken action).
    """
    if not param.is_balanced:
        raise ValueError("the score-aware estimator needs a balanced family")
    batch = list(batch)
    N = len(batch)
    if N < 2:
        raise ValueError("batch must contain at least two steps")
    # materialize any new parameters before sizing the gradient arrays
    for state, action, _r in batch:
        policy_probs(param, state)
    rbar = sum(r for _s, _a, r in batch) / N
    dim = len(param.keys())
    cbar = np.zeros(dim)
    ebar = np.zeros(dim)
    for state, action, r in batch:
        x = word_counts(state.word, param.n)
        g = param.grad_log_gamma(x)
        cbar[: len(g)] += (r - rbar) * g
        gp = _grad_log_policy(param, state, action)
        ebar[: len(gp)] += r * gp
    return cbar / (N - 1) + ebar / N


# --- exact computations on a truncated instance ---------------------------


class TruncationMassError(ValueError):
    """The truncation does not capture enough stationary mass."""


class ExactModel:
    """Exact stationary quantities of a truncated redundancy instance.

    Enumerates all words with total population up to ``cap`` and their
    unnormalized product-form weights.  Per-macrostate masses follow the
    recursion M(x) = sum_i M(x - e_i) nu_i / mu(x) on the count lattice,
    which also yields the mass of a doubled cap cheaply; the truncation is
    accepted for a given parameterization only if the estimated tail stays
    below ``tail_tol``.
    """

    def __init__(self, spec: RedundancySpec, cap: int = 8, tail_tol: float = 1e-8):
        self.spec = spec
        self.cap = cap
        self.tail_tol = tail_tol
        self.oi: OISpec = redundancy_to_oi(spec)
        self.trunc = FerrersSet.total_cap(spec.n, cap)
        self.words: list[Word] = enumerate_words(spec.n, self.trunc)
        self.weights = np.array([oi_product_form(self.oi, w) for w in self.words])
        self.word_counts = [word_counts(w, spec.n) for w in self.words]
        self._macro_mass_cache: dict[int, dict[Macrostate, float]] = {}
        self._step_reward_memo: dict[Word, float] = {}
        self._word_index = {w: k for k, w in enumerate(self.words)}
        self._arrival_rate = sum(spec.nu)

    def macro_masses(self, cap: int) -> dict[Macrostate, float]:
        """Unnormalized stationary mass per count vector up to ``cap``."""
        if cap not in self._macro_mass_cache:
            lattice = FerrersSet.total_cap(self.spec.n, cap)
            mass: dict[Macrostate, float] = {}
            for x in lattice:  # level order
                if sum(x) == 0:
                    mass[x] = 1.0
                    continue
                mu = self.oi.mu(x)
                mass[x] = sum(
                    mass[x[:i] + (x[i] - 1,) + x[i + 1 :]] * self.oi.nu[i] / mu
                    for i in range(self.spec.n)
                    if x[i] > 0
                )
            self._macro_mass_cache[cap] = mass
        return self._macro_mass_cache[cap]

    def _gamma_values(self, param: ThetaParameterization, cap: int) -> dict[Macrostate, float]:
        return {x: math.exp(param.log_gamma(x)) for x in self.macro_masses(cap)}

    def _materialize(self, param: ThetaParameterization) -> None:
        # touch every admission ratio once so growable families reach their
        # final dimension before any gradient array is sized
        for x in self.macro_masses(self.cap):
            for i in range(self.spec.n):
                param.admit_prob(x, i)

    def check_truncation_mass(self, param: ThetaParameterization) -> float:
        """Estimated tail mass outside the truncation; raises above tolerance."""
        small = self.macro_masses(self.cap)
        large = self.macro_masses(2 * self.cap)
        gsmall = self._gamma_values(param, self.cap)
        z_small = sum(m * gsmall[x] for x, m in small.items())
        glarge = self._gamma_values(param, 2 * self.cap)
        z_large = sum(m * glarge[x] for x, m in large.items())
        tail = 1.0 - z_small / z_large
        if tail > self.tail_tol:
            raise TruncationMassError(
                f"truncation keeps only 1 - {tail:.2e} of the mass; increase the cap"
            )
        return tail

    def stationary_word_probs(self, param: ThetaParameterization) -> np.ndarray:
        gamma = np.array([math.exp(param.log_gamma(x)) for x in self.word_counts])
        probs = self.weights * gamma
        return probs / probs.sum()

    def expected_step_reward(self, word: Word) -> float:
        """Expected completion reward accrued from ``word`` until the next arrival."""
        if word in self._step_reward_memo:
            return self._step_reward_memo[word]
        if not word:
            value = 0.0
        else:
            spec = self.spec
            masks = serving_sets(spec, word)
            total = self._arrival_rate
            contrib = []
            for p, c in enumerate(word):
                speed = sum(spec.mu_srv[j] for j in range(spec.m) if masks[p] >> j & 1)
                total += speed + spec.zeta[c]
                contrib.append((p, c, speed))
            value = 0.0
            for p, c, speed in contrib:
                rest = word[:p] + word[p + 1 :]
                downstream = self.expected_step_reward(rest)
                value += speed * (spec.r[c] + downstream)
                value += spec.zeta[c] * downstream
            value /= total
        self._step_reward_memo[word] = value
        return value

    def score_expectation(self, param: ThetaParameterization) -> np.ndarray:
        """Stationary expectation of the balance-function score on the truncation."""
        self._materialize(param)
        self.check_truncation_mass(param)
        masses = self.macro_masses(self.cap)
        gammas = self._gamma_values(param, self.cap)
        dim = len(param.keys())
        top = np.zeros(dim)
        z = 0.0
        for x, m in masses.items():
            wgt = m * gammas[x]
            z += wgt
            top += wgt * param.grad_log_gamma(x)
        return top / z

    def log_pi_gradient(self, param: ThetaParameterization, word: Word) -> np.ndarray:
        """Gradient of the log stationary probability of a word.

        Equals the balance-function score at the word's count vector minus
        its stationary expectation; the base measure does not depend on the
        parameter, and the normalizing constant contributes the mean score.
        """
        x = word_counts(word, param.n)
        return param.grad_log_gamma(x) - self.score_expectation(param)

    def log_pi(self, param: ThetaParameterization, word: Word) -> float:
        """Log stationary probability of a word on the truncation."""
        masses = self.macro_masses(self.cap)
        gammas = self._gamma_values(param, self.cap)
        z = sum(m * gammas[x] for x, m in masses.items())
        k = self._word_index[word]
        x = self.word_counts[k]
        return math.log(self.weights[k]) + param.log_gamma(x) - math.log(z)

    def _joint(self, param: ThetaParameterization):
        """Iterate (weight, word, class, action, expected reward) over the joint law."""
        probs = self.stationary_word_probs(param)
        nu = self.spec.nu
        for k, word in enumerate(self.words):
            pw = float(probs[k])
            if pw == 0.0:
                continue
            for i in range(self.spec.n):
                pi_cls = nu[i] / self._arrival_rate
                admit = policy_probs(param, EnvState(word=word, incoming_class=i))
                for action, pa in ((1, admit), (0, 1.0 - admit)):
                    if pa == 0.0:
                        continue
                    post = word + (i,) if action else word
                    yield pw * pi_cls * pa, word, i, action, self.expected_step_reward(post)

    def gain(self, param: ThetaParameterization) -> float:
        """Exact expected one-step reward under the stationary embedded law."""
        self._materialize(param)
        self.check_truncation_mass(param)
        return sum(w * r for w, _word, _i, _a, r in self._joint(param))

    def gain_gradient(self, param: ThetaParameterization) -> np.ndarray:
        """Exact gradient of the gain: reward-score covariance plus policy term."""
        self._materialize(param)
        self.check_truncation_mass(param)
        dim = len(param.keys())
        e_r = 0.0
        e_rg = np.zeros(dim)
        e_g = np.zeros(dim)
        e_rpol = np.zeros(dim)
        for w, word, i, a, r in self._joint(param):
            x = word_counts(word, param.n)
            g = param.grad_log_gamma(x)
            e_r += w * r
            e_rg += w * r * g
            e_g += w * g
            e_rpol += w * r * param.grad_log_policy(x, i, a)
        return e_rg - e_r * e_g + e_rpol


def exact_log_pi_gradient(
    param: ThetaParameterization, model: ExactModel, word: Word
) -> np.ndarray:
    return model.log_pi_gradient(param, word)


def exact_gain_gradient(param: ThetaParameterization, model: ExactModel) -> np.ndarray:
    return model.gain_gradient(param)


# --- runners ---------------------------------------------------------------


@dataclass(frozen=True)
class SageConfig:
    batch: int = 100
    step: float = 0.1
    theta0: float = 0.0

    def __post_init__(self):
        if self.batch < 2:
            raise ValueError("batches need at least two steps for the covariance")
        if not 0.0 < self.step < 1.0:
            raise ValueError("step size must lie in (0, 1)")


@dataclass(frozen=True)
class AcConfig:
    step_theta: float = 1e-3
    step_rbar: float = 1e-2
    step_v: float = 1e-2
    theta0: float = 0.0

    def __post_init__(self):
        for v in (self.step_theta, self.step_rbar, self.step_v):
            if not 0.0 < v < 1.0:
                raise ValueError("step sizes must lie in (0, 1)")


@dataclass(frozen=True)
class QConfig:
    batch: int = 100
    step_rbar: float = 1e-2
    step_q: float = 1e-2
    eps0: float = 0.1
    eps_decrement: float = 2e-5
    eps_floor: float = 1e-4

    def __post_init__(self):
        if self.eps_decrement < 0 or self.eps_floor > self.eps0:
            raise ValueError("exploration schedule must be non-increasing with a floor")


@dataclass(frozen=True)
class RunRecord:
    step: int
    mean_reward: float
    admit_rates: tuple[float, ...]
    theta_digest: str


@dataclass(frozen=True)
class RunLog:
    algorithm: str
    family: str
    seed: int
    steps: int
    records: tuple[RunRecord, ...]
    final_mean_reward: float
    final_theta_digest: str

    def to_csv(self, fh) -> None:
        writer = csv.writer(fh)
        n = len(self.records[0].admit_rates) if self.records else 0
        writer.writerow(
            ["step", "mean_reward"] + [f"admit_rate_class_{i + 1}" for i in range(n)]
        )
        for rec in self.records:
            writer.writerow(
                [rec.step, f"{rec.mean_reward:.10g}"]
                + [f"{a:.10g}" for a in rec.admit_rates]
            )

    def summary(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "family": self.family,
            "seed": self.seed,
            "steps": self.steps,
            "final_mean_reward": self.final_mean_reward,
            "final_theta_digest": self.final_theta_digest,
        }


def log_thinned_steps(total: int) -> list[int]:
    """Record steps densely up to 1000, then at a stride of a hundredth of
    the current decade."""
    steps = []
    t = 1
    while t <= total:
        steps.append(t)
        if t < 1000:
            t += 1
        else:
            t += 10 ** (len(str(t)) - 3)
    return steps


def _record_steps(total: int, stride: int) -> list[int]:
    if stride == 0:
        return log_thinned_steps(total)
    return list(range(stride, total + 1, stride))


def _digest(param: ThetaParameterization) -> str:
    payload = json.dumps(
        [[repr(k), round(v, 12)] for k, v in zip(param.keys(), param.vector())]
    )
    return hashlib.sha1(payload.encode()).hexdigest()[:16]


class _RunTracker:
    def __init__(self, n: int, total: int, stride: int):
        self.n = n
        self.reward_sum = 0.0
        self.steps_done = 0
        self.arrivals = [0] * n
        self.admits = [0] * n
        self.records: list[RunRecord] = []
        self._record_at = set(_record_steps(total, stride))

    def observe(self, state: EnvState, action: int, reward: float, param) -> None:
        self.steps_done += 1
        self.reward_sum += reward
        self.arrivals[state.incoming_class] += 1
        self.admits[state.incoming_class] += int(action)
        if self.steps_done in self._record_at:
            self.records.append(
                RunRecord(
                    step=self.steps_done,
                    mean_reward=self.reward_sum / self.steps_done,
                    admit_rates=tuple(
                        self.admits[i] / self.arrivals[i] if self.arrivals[i] else 0.0
                        for i in range(self.n)
                    ),
                    theta_digest=_digest(param) if param is not None else "",
                )
            )

    def finish(self, algorithm: str, family: str, seed: int, param) -> RunLog:
        return RunLog(
            algorithm=algorithm,
            family=family,
            seed=seed,
            steps=self.steps_done,
            records=tuple(self.records),
            final_mean_reward=self.reward_sum / self.steps_done if self.steps_done else 0.0,
            final_theta_digest=_digest(param) if param is not None else "",
        )


def _make_param(spec: RedundancySpec, family: str, theta0: float) -> ThetaParameterization:
    return ThetaParameterization(family, spec.n, theta0=theta0)


def run_sage(
    spec: RedundancySpec,
    family: str,
    cfg: SageConfig,
    total_steps: int,
    seed: int,
    record_stride: int = 0,
) -> RunLog:
    """Batched stochastic gradient ascent with the score-aware estimator."""
    param = _make_param(spec, family, cfg.theta0)
    if not param.is_balanced:
        raise ValueError("the score-aware algorithm needs a balanced family")
    env = RedundancyEnv(spec, seed)
    state = env.reset()
    tracker = _RunTracker(spec.n, total_steps, record_stride)
    rng = _UniformStream(seed, stream=1)
    done = 0
    while done < total_steps:
        batch = []
        for _ in range(min(cfg.batch, total_steps - done)):
            admit = policy_probs(param, state)
            action = 1 if rng.next() < admit else 0
            outcome = env.step(action)
            batch.append((state, action, outcome.reward))
            tracker.observe(state, action, outcome.reward, param)
            state = outcome.next
            done += 1
        if len(batch) >= 2:
            grad = sage_gradient_estimate(batch, param)
            param.update(cfg.step * grad)
    return tracker.finish("sage", family, seed, param)


def run_ac(
    spec: RedundancySpec,
    family: str,
    cfg: AcConfig,
    total_steps: int,
    seed: int,
    record_stride: int = 0,
) -> RunLog:
    """Actor-critic with a differential state-value table grown on demand."""
    param = _make_param(spec, family, cfg.theta0)
    env = RedundancyEnv(spec, seed)
    state = env.reset()
    tracker = _RunTracker(spec.n, total_steps, record_stride)
    rng = _UniformStream(seed, stream=1)
    v: dict[tuple, float] = {}
    rbar = 0.0
    for _ in range(total_steps):
        admit = policy_probs(param, state)
        action = 1 if rng.next() < admit else 0
        outcome = env.step(action)
        cur = (state.word, state.incoming_class)
        nxt = (outcome.next.word, outcome.next.incoming_class)
        delta = outcome.reward - rbar + v.get(nxt, 0.0) - v.get(cur, 0.0)
        rbar += cfg.step_rbar * delta
        v[cur] = v.get(cur, 0.0) + cfg.step_v * delta
        if nxt not in v:
            v[nxt] = 0.0
        param.update(cfg.step_theta * delta * _grad_log_policy(param, state, action))
        tracker.observe(state, action, outcome.reward, param)
        state = outcome.next
    return tracker.finish("ac", family, seed, param)


def run_q(
    spec: RedundancySpec,
    cfg: QConfig,
    total_steps: int,
    seed: int,
    record_stride: int = 0,
) -> RunLog:
    """Differential Q-learning with an epsilon-greedy table policy.

    The temporal difference bootstraps from the best action value at the
    next decision state; argmax ties break uniformly at random.
    """
    env = RedundancyEnv(spec, seed)
    state = env.reset()
    tracker = _RunTracker(spec.n, total_steps, record_stride)
    rng = _UniformStream(seed, stream=1)
    q: dict[tuple, list[float]] = {}
    rbar = 0.0
    eps = cfg.eps0
    done = 0

    def qvals(key):
        if key not in q:
            q[key] = [0.0, 0.0]
        return q[key]

    while done < total_steps:
        for _ in range(min(cfg.batch, total_steps - done)):
            cur = (state.word, state.incoming_class)
            vals = qvals(cur)
            if rng.next() < eps:
                action = 1 if rng.next() < 0.5 else 0
            elif abs(vals[0] - vals[1]) <= 1e-15:
                action = 1 if rng.next() < 0.5 else 0
            else:
                action = int(vals[1] > vals[0])
            outcome = env.step(action)
            nxt = (outcome.next.word, outcome.next.incoming_class)
            delta = outcome.reward - rbar + max(qvals(nxt)) - vals[action]
            rbar += cfg.step_rbar * delta
            vals[action] += cfg.step_q * delta
            tracker.observe(state, action, outcome.reward, None)
            state = outcome.next
            done += 1
        eps = max(cfg.eps_floor, eps - cfg.eps_decrement)
    return tracker.finish("q", "tabular", seed, None)
