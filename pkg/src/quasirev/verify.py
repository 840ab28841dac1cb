"""Randomized property suites over a reproducible instance corpus.

Each suite runs the cross-cutting invariants of one layer and reports the
worst observed residual: ``core`` checks stationarity, partial balance, and
macro aggregation on mixed instances; ``balance`` checks policy round trips,
the vertex decomposition, and the control-modulation identity; ``models``
checks both product forms, the traffic identity, and the network/queue
equivalence; ``gradients`` checks the score identities against finite
differences.

The corpus is seeded, so suite output is stable run to run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import balance as bal
from . import oiqueue as oi
from . import rl
from . import whittle as wt
from .balance import ThetaParameterization
from .qrcore import (
    FerrersSet,
    QueueSystem,
    aggregate_macro_kernel,
    check_quasi_reversibility,
    global_balance_residual,
    macro_detailed_balance_residual,
    partial_balance2_residual,
    solve_stationary,
)


@dataclass(frozen=True)
class SuiteResult:
    name: str
    ok: bool
    metrics: dict

    def print_report(self) -> None:
        status = "pass" if self.ok else "FAIL"
        print(f"[{status}] suite {self.name}")
        for key, value in self.metrics.items():
            print(f"    {key}: {value:.3e}" if isinstance(value, float) else f"    {key}: {value}")


def _random_oi_instance(rng: np.random.Generator, max_states: int = 500):
    """Random order-independent queue with a random monotone rate function."""
    n = int(rng.integers(1, 4))
    nu = tuple(float(v) for v in rng.uniform(0.2, 1.5, size=n))
    slope = float(rng.uniform(0.1, 1.0))
    per_class = tuple(float(v) for v in rng.uniform(0.1, 1.0, size=n))
    base = float(rng.uniform(0.2, 1.0))

    def mu(x):
        total = sum(x)
        if total == 0:
            return 0.0
        return base + slope * total + sum(p * v for p, v in zip(per_class, x))

    cap = {1: 7, 2: 5, 3: 4}[n]
    trunc = FerrersSet.total_cap(n, cap)
    while len(oi.enumerate_words(n, trunc)) > max_states:
        cap -= 1
        trunc = FerrersSet.total_cap(n, cap)
    spec = oi.OISpec(n=n, nu=nu, mu=mu)
    return spec, trunc


def _random_whittle_instance(rng: np.random.Generator):
    """Random class-preserving routing over a small label set, balanced rates."""
    n = int(rng.integers(1, 3))
    m = int(rng.integers(1, 3))
    size = 1 + n * m
    P = np.zeros((size, size))
    lab = wt.label_index(n, m)
    # arrivals: every class enters at site 0 at least
    for i in range(n):
        w = rng.uniform(0.2, 1.0, size=m)
        if rng.random() < 0.5 and m > 1:
            w[rng.integers(1, m)] = 0.0  # some labels fed internally only
        w /= w.sum()
        for k in range(m):
            P[0, lab[(i, k)]] = w[k] / n
    P[0, 0] = 1.0 - P[0].sum()
    for i in range(n):
        for k in range(m):
            a = lab[(i, k)]
            exit_p = float(rng.uniform(0.3, 1.0))
            P[a, 0] = exit_p
            if m > 1:
                others = [lab[(i, l)] for l in range(m) if l != k]
                w = rng.uniform(0.0, 1.0, size=len(others))
                total = w.sum()
                if total > 0:
                    w *= (1.0 - exit_p) / total
                    for b, ww in zip(others, w):
                        P[a, b] = ww
                else:
                    P[a, 0] = 1.0
            else:
                P[a, 0] = 1.0
    if rng.random() < 0.5:
        phi = wt.constant_phi(1.0)
        Phi = wt.constant_phi_balance(1.0, 1.0)
    else:
        coeff = float(rng.uniform(0.5, 1.5))
        phi = wt.per_label_linear_phi(coeff)
        Phi = wt.per_label_linear_phi_balance(coeff, 1.0)
    try:
        spec = wt.WhittleSpec(n=n, m=m, P=P, phi0=1.0, phi=phi, Phi=Phi)
    except ValueError:
        return _random_whittle_instance(rng)
    caps = tuple(int(rng.integers(2, 4)) for _ in range(n))
    trunc = wt.class_sum_cap_set(n, m, caps)
    return spec, trunc


def _family_instances(rng: np.random.Generator, domain: FerrersSet):
    """A static, a size-based threshold, and a cum-prod balance function."""
    n = domain.n
    out = []
    out.append(bal.make_family("static", tuple(rng.uniform(0.3, 1.0, size=n)), domain))
    max_total = max(sum(x) for x in domain)
    thresh = int(rng.integers(1, max_total + 1))
    out.append(
        bal.make_family("size_based", lambda l, t=thresh: 1.0 if l < t else 0.0, domain)
    )
    values = {x: float(rng.uniform(0.6, 1.0)) for x in domain}
    out.append(bal.make_family("cum_prod", lambda y: values[y], domain))
    return out


def corpus(seed: int = 20240, oi_count: int = 12, whittle_count: int = 10):
    """Mixed list of (name, QueueSystem, product-form weights) instances."""
    rng = np.random.default_rng(seed)
    out = []
    for j in range(oi_count):
        spec, trunc = _random_oi_instance(rng)
        sys = oi.build_oi_system(spec, trunc)
        weights = np.array([oi.oi_product_form(spec, w) for w in sys.states])
        out.append((f"oi{j}", sys, weights))
    for j in range(whittle_count):
        spec, trunc = _random_whittle_instance(rng)
        sys = wt.build_whittle_system(spec, trunc)
        lam = wt.solve_traffic(spec)
        weights = np.array([wt.whittle_product_form(spec, s, lam) for s in sys.states])
        out.append((f"whittle{j}", sys, weights))
    return out


def suite_core(seed: int = 20240) -> SuiteResult:
    worst_balance = worst_qr = worst_pb2_slack = worst_macro = 0.0
    for _name, sys, _w in corpus(seed):
        pi = solve_stationary(sys)
        gb = global_balance_residual(sys, pi)
        qr = check_quasi_reversibility(sys, pi)
        pb2 = partial_balance2_residual(sys, pi)
        agg = aggregate_macro_kernel(sys, pi)
        worst_balance = max(worst_balance, gb)
        worst_qr = max(worst_qr, qr.max_residual)
        # the complementary balance residual is controlled by the other two
        worst_pb2_slack = max(worst_pb2_slack, pb2 - (gb + sys.n * qr.max_residual))
        worst_macro = max(worst_macro, macro_detailed_balance_residual(agg))
    ok = worst_balance < 1e-10 and worst_qr < 1e-9 and worst_macro < 1e-9
    return SuiteResult(
        "core",
        ok,
        {
            "max_global_balance_residual": worst_balance,
            "max_partial_balance_residual": worst_qr,
            "max_complementary_balance_slack": worst_pb2_slack,
            "max_macro_detailed_balance_residual": worst_macro,
        },
    )


def suite_balance(seed: int = 20240) -> SuiteResult:
    rng = np.random.default_rng(seed + 1)
    worst_roundtrip = worst_decomp = worst_thm1 = worst_thm1_qr = 0.0
    monotone_ok = True
    # round trips and decompositions on random monotone functions
    for _ in range(100):
        n = int(rng.integers(1, 4))
        bounds = tuple(int(b) for b in rng.integers(1, 4, size=n))
        domain = FerrersSet.box(bounds)
        while len(domain) > 64:
            bounds = tuple(max(1, b - 1) for b in bounds)
            domain = FerrersSet.box(bounds)
        values = {x: float(rng.uniform(0.5, 1.0)) for x in domain}
        gamma = bal.make_family("cum_prod", lambda y: values[y], domain)
        policy = bal.policy_from_balance(gamma)
        chk = bal.check_balance_condition(policy, domain, tol=1e-9)
        if not chk.balanced:
            monotone_ok = False
            continue
        worst_roundtrip = max(
            worst_roundtrip,
            max(abs(chk.balance_function(x) - gamma(x)) for x in domain),
        )
        dec = bal.decompose_vertex(gamma)
        recon = {
            x: sum(c for c, mask in zip(dec.coefficients, dec.masks) if x in mask)
            for x in domain
        }
        worst_decomp = max(
            worst_decomp,
            abs(sum(dec.coefficients) - 1.0),
            max(abs(recon[x] - gamma(x)) for x in domain),
            max(0.0, -min(dec.coefficients)),
        )
        if not bal.check_monotonicity(policy).ok:
            monotone_ok = False
    # control-modulation identity across the corpus
    for _name, sys, _w in corpus(seed, oi_count=5, whittle_count=4):
        for gamma in _family_instances(rng, sys.macro_space):
            rep = bal.verify_theorem1(sys, gamma)
            worst_thm1 = max(worst_thm1, rep.linf)
            worst_thm1_qr = max(worst_thm1_qr, rep.controlled_qr_residual)
    ok = (
        monotone_ok
        and worst_roundtrip < 1e-12
        and worst_decomp < 1e-12
        and worst_thm1 < 1e-9
        and worst_thm1_qr < 1e-9
    )
    return SuiteResult(
        "balance",
        ok,
        {
            "max_roundtrip_error": worst_roundtrip,
            "max_decomposition_error": worst_decomp,
            "max_control_modulation_linf": worst_thm1,
            "max_controlled_partial_balance_residual": worst_thm1_qr,
            "monotonicity_ok": monotone_ok,
        },
    )


def suite_models(seed: int = 20240) -> SuiteResult:
    rng = np.random.default_rng(seed + 2)
    worst_pf = worst_qr = worst_traffic = worst_equiv = 0.0
    for _name, sys, weights in corpus(seed):
        pi = solve_stationary(sys)
        w = weights / weights.sum()
        worst_pf = max(worst_pf, float(np.abs(w - pi.values).max()))
        worst_qr = max(worst_qr, check_quasi_reversibility(sys, pi).max_residual)
    for _ in range(5):
        spec, trunc = _random_whittle_instance(rng)
        lam = wt.solve_traffic(spec)
        worst_traffic = max(worst_traffic, wt.traffic_identity_residual(spec, lam))
        flat = FerrersSet(spec.n * spec.m, {wt.flatten(s) for s in trunc})
        max_total = max(sum(x) for x in flat)
        gamma = bal.make_family(
            "size_based",
            lambda l, t=int(rng.integers(1, max_total + 1)): 0.85 if l < t else 0.0,
            flat,
        )
        rep = wt.check_equivalence(spec, gamma, trunc)
        worst_equiv = max(worst_equiv, rep.l1)
    ok = worst_pf < 1e-9 and worst_qr < 1e-9 and worst_traffic < 1e-12 and worst_equiv < 1e-9
    return SuiteResult(
        "models",
        ok,
        {
            "max_product_form_linf": worst_pf,
            "max_partial_balance_residual": worst_qr,
            "max_traffic_identity_residual": worst_traffic,
            "max_equivalence_l1": worst_equiv,
        },
    )


def _exact_test_instance():
    spec = oi.RedundancySpec(
        n=3,
        m=3,
        B=((1, 1, 0), (0, 1, 1), (0, 0, 1)),
        nu=(0.2, 0.2, 0.2),
        zeta=(2.0, 2.0, 2.0),
        mu_srv=(0.5, 0.5, 0.5),
        r=(1.0, 2.0, 16.0),
    )
    return rl.ExactModel(spec, cap=8, tail_tol=1e-8)


def suite_gradients(seed: int = 20240) -> SuiteResult:
    rng = np.random.default_rng(seed + 3)
    model = _exact_test_instance()
    n = model.spec.n
    worst_fd_gamma = worst_fd_logpi = worst_fd_gain = worst_score_mean = 0.0
    h = 1e-5

    def fd(make, evaluate, dim):
        grads = np.zeros(dim)
        for j in range(dim):
            pp, pm = make(), make()
            dp = np.zeros(dim)
            dp[j] = h
            pp.update(dp)
            pm.update(-dp)
            grads[j] = (evaluate(pp) - evaluate(pm)) / (2 * h)
        return grads

    for family in ("static", "semistatic"):
        theta0 = float(rng.uniform(-0.5, 0.5))
        make = lambda fam=family, t=theta0: ThetaParameterization(fam, n, theta0=t)
        param = make()
        dim = len(param.keys())
        x = tuple(int(v) for v in rng.integers(0, 4, size=n))
        g = param.grad_log_gamma(x)
        g_fd = fd(make, lambda p: p.log_gamma(x), dim)
        scale = max(1e-9, float(np.abs(g_fd).max()))
        worst_fd_gamma = max(worst_fd_gamma, float(np.abs(g - g_fd).max()) / scale)

        word = model.words[int(rng.integers(1, len(model.words)))]
        g = model.log_pi_gradient(param, word)
        g_fd = fd(make, lambda p: model.log_pi(p, word), dim)
        scale = max(1e-9, float(np.abs(g_fd).max()))
        worst_fd_logpi = max(worst_fd_logpi, float(np.abs(g - g_fd).max()) / scale)

        g = model.gain_gradient(param)
        g_fd = fd(make, lambda p: model.gain(p), dim)
        scale = max(1e-9, float(np.abs(g_fd).max()))
        worst_fd_gain = max(worst_fd_gain, float(np.abs(g - g_fd).max()) / scale)

        probs = model.stationary_word_probs(param)
        esc = model.score_expectation(param)
        mean = np.zeros(dim)
        for k, w in enumerate(model.words):
            xw = oi.word_counts(w, n)
            mean += probs[k] * (param.grad_log_gamma(xw) - esc)
        worst_score_mean = max(worst_score_mean, float(np.abs(mean).max()))

    ok = (
        worst_fd_gamma < 1e-6
        and worst_fd_logpi < 1e-5
        and worst_fd_gain < 1e-4
        and worst_score_mean < 1e-10
    )
    return SuiteResult(
        "gradients",
        ok,
        {
            "max_fd_relative_error_log_gamma": worst_fd_gamma,
            "max_fd_relative_error_log_pi": worst_fd_logpi,
            "max_fd_relative_error_gain": worst_fd_gain,
            "max_score_mean": worst_score_mean,
        },
    )


SUITES = {
    "core": suite_core,
    "balance": suite_balance,
    "models": suite_models,
    "gradients": suite_gradients,
}


def run_suites(names) -> bool:
    ok = True
    for name in names:
        result = SUITES[name]()
        result.print_report()
        ok = ok and result.ok
    return ok
