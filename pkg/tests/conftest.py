import numpy as np
import pytest

from quasirev.oiqueue import RedundancySpec
from quasirev.qrcore import QueueSystem


def birth_death(up, down):
    """Single-class chain on 0..len(up) with the given per-level rates."""
    levels = len(up)
    states = [(k,) for k in range(levels + 1)]
    rates = {}
    for k in range(levels):
        if up[k] > 0:
            rates[((k,), (k + 1,))] = up[k]
        if down[k] > 0:
            rates[((k + 1,), (k,))] = down[k]
    return QueueSystem(1, states, lambda s: s, rates)


def power_iteration_stationary(sys, tol=1e-14, max_iter=2_000_000):
    """Independent oracle: power iteration on the uniformized jump matrix."""
    n = len(sys.states)
    unif = 1.05 * max(sys.total_outflow(k) for k in range(n))
    P = np.zeros((n, n))
    for e in sys.edges:
        P[e.source, e.target] += e.rate / unif
    P[np.arange(n), np.arange(n)] += 1.0 - P.sum(axis=1)
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = pi @ P
        if np.abs(nxt - pi).max() < tol:
            return nxt / nxt.sum()
        pi = nxt
    raise RuntimeError("power iteration did not converge")


FIG_GRAPH = ((1, 1, 0), (0, 1, 1), (0, 0, 1))


@pytest.fixture(scope="session")
def adversarial_spec():
    return RedundancySpec(
        n=3, m=3, B=FIG_GRAPH,
        nu=(0.5, 0.5, 0.5), zeta=(0.1, 0.2, 0.5), mu_srv=(0.5, 0.5, 0.5),
        r=(1.0, 2.0, 16.0),
    )


@pytest.fixture(scope="session")
def nonadversarial_spec():
    return RedundancySpec(
        n=3, m=3, B=FIG_GRAPH,
        nu=(0.5, 0.5, 0.5), zeta=(0.5, 0.2, 0.1), mu_srv=(0.5, 0.5, 0.5),
        r=(1.0, 2.0, 16.0),
    )


@pytest.fixture(scope="session")
def exact_check_spec():
    # abandonment strong enough that an 8-customer truncation keeps
    # all but ~1e-13 of the stationary mass
    return RedundancySpec(
        n=3, m=3, B=FIG_GRAPH,
        nu=(0.2, 0.2, 0.2), zeta=(2.0, 2.0, 2.0), mu_srv=(0.5, 0.5, 0.5),
        r=(1.0, 2.0, 16.0),
    )


@pytest.fixture(scope="session")
def exact_model(exact_check_spec):
    from quasirev.rl import ExactModel

    return ExactModel(exact_check_spec, cap=8, tail_tol=1e-8)
