"""Exact jump-chain simulation and the arrival-embedded decision environment.

``simulate_ctmc`` runs the embedded jump chain of any finite system:
exponential holding times at the total outflow rate, categorical jumps by
rate proportions.  ``RedundancyEnv`` is the untruncated redundancy system
seen at arrival epochs: a step admits or rejects the incoming customer, then
races completions and abandonments against the next arrival, accruing one
class reward per completion strictly before that arrival.

Randomness comes from counter-based Philox streams keyed by (seed, stream),
so independent runs are reproducible and non-overlapping.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .oiqueue import RedundancySpec, Word
from .qrcore import QueueSystem


@dataclass(frozen=True)
class SimConfig:
    seed: int
    horizon_events: int
    record_stride: int = 1

    def __post_init__(self):
        if self.horizon_events < 1:
            raise ValueError("horizon must cover at least one event")


class _UniformStream:
    """Buffered uniform variates from a Philox stream."""

    def __init__(self, seed: int, stream: int = 0, block: int = 8192):
        self._gen = np.random.Generator(np.random.Philox(key=[seed, stream]))
        self._block = block
        self._buf = self._gen.random(block)
        self._pos = 0

    def next(self) -> float:
        if self._pos == self._block:
            self._buf = self._gen.random(self._block)
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return float(u)


@dataclass(frozen=True)
class SimEvent:
    time: float
    source: int
    target: int
    kind: str
    cls: int


@dataclass(frozen=True)
class Trajectory:
    events: tuple[SimEvent, ...]
    final_state: int
    absorbed: bool  # halted in a state with zero outflow


def simulate_ctmc(sys: QueueSystem, cfg: SimConfig, start=None) -> Trajectory:
    """Statistically exact embedded jump simulation of the microstate chain."""
    rng = _UniformStream(cfg.seed, stream=0)
    k = sys.empty_index if start is None else sys.index[start]
    t = 0.0
    events = []
    for _ in range(cfg.horizon_events):
        out = sys.out_edges[k]
        total = sum(e.rate for e in out)
        if total <= 0.0:
            return Trajectory(events=tuple(events), final_state=k, absorbed=True)
        # exponential holding time, then a categorical jump
        u = rng.next()
        t += -np.log1p(-u) / total
        pick = rng.next() * total
        acc = 0.0
        chosen = out[-1]
        for e in out:
            acc += e.rate
            if pick < acc:
                chosen = e
                break
        events.append(SimEvent(time=t, source=k, target=chosen.target, kind=chosen.kind, cls=chosen.cls))
        k = chosen.target
    return Trajectory(events=tuple(events), final_state=k, absorbed=False)


def occupancy(sys: QueueSystem, traj: Trajectory) -> np.ndarray:
    """Time-weighted empirical state distribution of a trajectory."""
    weights = np.zeros(len(sys.states))
    prev_t = 0.0
    prev_k = traj.events[0].source if traj.events else traj.final_state
    for ev in traj.events:
        weights[prev_k] += ev.time - prev_t
        prev_t, prev_k = ev.time, ev.target
    if weights.sum() > 0:
        weights /= weights.sum()
    return weights


@dataclass(frozen=True)
class EnvState:
    word: Word
    incoming_class: int


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    next: EnvState


class RedundancyEnv:
    """Redundancy system observed at arrival epochs, with admit/reject actions.

    The word grows without truncation.  Between decisions, each in-service
    customer completes at the total speed of its assigned servers, every
    customer abandons at its class rate, and the next arrival comes at the
    total arrival rate; completions pay the class reward, abandonments and
    rejections pay nothing.
    """

    def __init__(self, spec: RedundancySpec, seed: int, stream: int = 0):
        self.spec = spec
        self._rng = _UniformStream(seed, stream=stream)
        self._masks = [spec.server_mask(i) for i in range(spec.n)]
        self._mask_speed = [
            sum(spec.mu_srv[j] for j in range(spec.m) if mask >> j & 1)
            for mask in range(1 << spec.m)
        ]
        self._arrival_rate = sum(spec.nu)
        self._nu_cum = np.cumsum(spec.nu)
        self.state: EnvState | None = None

    def _sample_class(self) -> int:
        u = self._rng.next() * self._arrival_rate
        return int(np.searchsorted(self._nu_cum, u, side="right"))

    def reset(self) -> EnvState:
        self.state = EnvState(word=(), incoming_class=self._sample_class())
        return self.state

    def _race(self, word: list[int]) -> tuple[float, list[int], int]:
        """Run completions/abandonments until the next arrival.

        Returns (accrued reward, word at the arrival, arriving class).
        """
        spec = self.spec
        reward = 0.0
        while True:
            taken = 0
            rates = []
            total = self._arrival_rate
            for c in word:
                free = self._masks[c] & ~taken
                taken |= free
                speed = self._mask_speed[free]
                rates.append(speed)
                total += speed + spec.zeta[c]
            u = self._rng.next() * total
            if u < self._arrival_rate:
                cls = int(np.searchsorted(self._nu_cum, u, side="right"))
                return reward, word, cls
            acc = self._arrival_rate
            for p, c in enumerate(word):
                acc += rates[p]
                if u < acc:
                    reward += spec.r[c]
                    word.pop(p)
                    break
                acc += spec.zeta[c]
                if u < acc:
                    word.pop(p)
                    break

    def step(self, action: int) -> StepOutcome:
        if self.state is None:
            raise RuntimeError("environment must be reset before stepping")
        word = list(self.state.word)
        if action:
            word.append(self.state.incoming_class)
        reward, word, cls = self._race(word)
        self.state = EnvState(word=tuple(word), incoming_class=cls)
        return StepOutcome(reward=reward, next=self.state)


def sample_step_reward(spec: RedundancySpec, word: Word, rng: _UniformStream) -> float:
    """Reward accrued from a post-decision word until the next arrival.

    Used for drawing one-step rewards at exact-stationary states without
    advancing an environment.
    """
    env = RedundancyEnv.__new__(RedundancyEnv)
    env.spec = spec
    env._rng = rng
    env._masks = [spec.server_mask(i) for i in range(spec.n)]
    env._mask_speed = [
        sum(spec.mu_srv[j] for j in range(spec.m) if mask >> j & 1)
        for mask in range(1 << spec.m)
    ]
    env._arrival_rate = sum(spec.nu)
    env._nu_cum = np.cumsum(spec.nu)
    reward, _word, _cls = env._race(list(word))
    return reward


def dump_trajectory(sys: QueueSystem, traj: Trajectory, fh) -> None:
    """Trajectory CSV: time, event kind, class, population of the target state."""
    writer = csv.writer(fh)
    writer.writerow(["t", "kind", "class", "population"])
    for ev in traj.events:
        writer.writerow(
            [f"{ev.time:.9f}", ev.kind, ev.cls if ev.cls >= 0 else "", sum(sys.counts[ev.target])]
        )
