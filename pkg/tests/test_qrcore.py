import io

import numpy as np
import pytest

from quasirev import control
from quasirev.qrcore import (
    FerrersSet,
    QueueSystem,
    StructuralError,
    aggregate_macro_kernel,
    check_quasi_reversibility,
    global_balance_residual,
    macro_detailed_balance_residual,
    partial_balance2_residual,
    solve_stationary,
    validate_assumption1,
)
from conftest import birth_death, power_iteration_stationary


class TestFerrersSet:
    def test_box_and_total_cap(self):
        box = FerrersSet.box((2, 1))
        assert len(box) == 6
        cap = FerrersSet.total_cap(2, 2)
        assert set(cap) == {(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)}

    def test_rejects_missing_origin(self):
        with pytest.raises(ValueError):
            FerrersSet(2, [(1, 0)])

    def test_rejects_non_convex(self):
        with pytest.raises(ValueError):
            FerrersSet(2, [(0, 0), (1, 1)])


class TestQueueSystemStructure:
    def test_negative_rate_rejected(self):
        with pytest.raises(StructuralError):
            QueueSystem(1, [(0,), (1,)], lambda s: s, {((0,), (1,)): -1.0})

    def test_misclassified_edge_rejected(self):
        states = [(0, 0), (1, 0), (0, 1)]
        with pytest.raises(StructuralError):
            QueueSystem(2, states, lambda s: s, {((1, 0), (0, 1)): 1.0, ((0, 0), (1, 0)): 1.0})

    def test_two_empty_states_rejected(self):
        with pytest.raises(StructuralError):
            QueueSystem(1, ["a", "b"], lambda s: (0,), {})

    def test_non_ferrers_image_rejected(self):
        with pytest.raises(StructuralError):
            QueueSystem(2, [(0, 0), (1, 1)], lambda s: s, {})

    def test_edge_dump_csv(self):
        sys = birth_death([1.0], [2.0])
        buf = io.StringIO()
        sys.dump_edges(buf)
        lines = buf.getvalue().strip().splitlines()
        assert lines[0] == "s_index,t_index,rate,kind"
        assert len(lines) == 3
        assert any("arrival:0" in line for line in lines)
        assert any("departure:0" in line for line in lines)


class TestValidateAssumption1:
    def test_irreducible_birth_death_passes(self):
        sys = birth_death([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])
        rep = validate_assumption1(sys)
        assert rep.passes
        assert rep.recurrent_set == frozenset(sys.states)

    def test_blocked_level_is_transient_but_consistent(self):
        # arrival out of level 2 removed: state 3 has no inbound path at all,
        # so it is a plain transient state and the assumption still holds
        sys = birth_death([1.0, 1.0, 0.0], [1.0, 1.0, 1.0])
        rep = validate_assumption1(sys)
        assert rep.passes
        assert rep.recurrent_set == frozenset({(0,), (1,), (2,)})

    def test_state_reachable_only_downward_violates_item2(self):
        # c sits at level 1 but can only be entered from level 2
        states = ["empty", "a", "b", "c"]
        counts = {"empty": (0,), "a": (1,), "b": (2,), "c": (1,)}
        rates = {
            ("empty", "a"): 1.0,
            ("a", "b"): 1.0,
            ("a", "empty"): 1.0,
            ("b", "a"): 0.5,
            ("b", "c"): 0.5,
            ("c", "empty"): 1.0,
        }
        sys = QueueSystem(1, states, counts.__getitem__, rates)
        rep = validate_assumption1(sys)
        assert not rep.passes
        assert (2, "c") in rep.violations

    def test_missing_drain_violates_item3(self):
        sys = birth_death([1.0, 1.0], [1.0, 0.0])
        rep = validate_assumption1(sys)
        assert not rep.passes
        assert any(item == 3 for item, _ in rep.violations)

    def test_truncated_whittle_tandem_passes(self):
        import numpy as np

        from quasirev import whittle as wt

        P = np.zeros((3, 3))
        P[0, 1] = 1.0
        P[1, 2] = 1.0
        P[2, 0] = 1.0
        spec = wt.WhittleSpec(
            n=1, m=2, P=P, phi0=1.0,
            phi=wt.constant_phi(1.0), Phi=wt.constant_phi_balance(1.0, 1.0),
        )
        sys = wt.build_whittle_system(spec, wt.class_sum_cap_set(1, 2, (4,)))
        rep = validate_assumption1(sys)
        assert rep.passes
        assert len(rep.recurrent_set) == len(sys.states) <= 20


class TestSolveStationary:
    def test_mm1_2(self):
        sys = birth_death([1.0, 1.0], [2.0, 2.0])
        pi = solve_stationary(sys)
        assert np.allclose(pi.values, [4 / 7, 2 / 7, 1 / 7], atol=1e-14)

    def test_no_arrivals_point_mass(self):
        sys = birth_death([0.0, 0.0], [1.0, 1.0])
        pi = solve_stationary(sys)
        assert pi.values[sys.empty_index] == 1.0
        assert pi.values.sum() == 1.0

    def test_toy_ps_matches_power_iteration(self):
        sys = control.toy_system(0.1, 0.1)
        pi = solve_stationary(sys)
        oracle = power_iteration_stationary(sys)
        assert np.abs(pi.values - oracle).max() < 1e-10

    def test_balance_residual_and_normalization(self):
        sys = control.toy_system(0.3, 0.7)
        pi = solve_stationary(sys)
        assert global_balance_residual(sys, pi) < 1e-10
        assert abs(pi.values.sum() - 1.0) < 1e-12


class TestQuasiReversibility:
    def test_reversible_chain_zero_residual(self):
        sys = birth_death([1.0, 1.0], [2.0, 2.0])
        pi = solve_stationary(sys)
        rep = check_quasi_reversibility(sys, pi)
        assert rep.quasi_reversible
        assert rep.max_residual < 1e-15

    def test_perturbed_oi_departure_breaks_partial_balance(self, adversarial_spec):
        from quasirev.oiqueue import build_oi_system, redundancy_to_oi

        spec = redundancy_to_oi(adversarial_spec)
        trunc = FerrersSet.total_cap(3, 3)
        base = build_oi_system(spec, trunc)
        rates = {}
        for e in base.edges:
            r = e.rate
            if e.kind == "departure" and e.source == base.index[(0, 2)]:
                r *= 1.1
            rates[(base.states[e.source], base.states[e.target])] = r
        counting = dict(zip(base.states, base.counts))
        perturbed = QueueSystem(3, base.states, counting.__getitem__, rates)
        pi = solve_stationary(perturbed)
        rep = check_quasi_reversibility(perturbed, pi, tol=1e-9)
        assert not rep.quasi_reversible
        assert rep.max_residual > 1e-9

    def test_complementary_balance_bounded(self):
        sys = control.toy_system(0.4, 0.2)
        pi = solve_stationary(sys)
        qr = check_quasi_reversibility(sys, pi)
        bound = global_balance_residual(sys, pi) + sys.n * qr.max_residual
        assert partial_balance2_residual(sys, pi) <= bound + 1e-15


class TestAggregation:
    def test_identity_counting_is_identity(self):
        sys = birth_death([1.0, 0.5], [2.0, 2.0])
        pi = solve_stationary(sys)
        agg = aggregate_macro_kernel(sys, pi)
        for e in sys.edges:
            xs, xt = sys.counts[e.source], sys.counts[e.target]
            assert agg.kernel[(xs, xt)] == pytest.approx(e.rate)
        for k, s in enumerate(sys.states):
            assert agg.distribution[sys.counts[k]] == pytest.approx(pi.values[k])

    def test_single_class_oi_aggregates_to_geometric(self):
        from quasirev.oiqueue import OISpec, build_oi_system

        spec = OISpec(n=1, nu=(1.0,), mu=lambda x: 2.0 if sum(x) else 0.0)
        sys = build_oi_system(spec, FerrersSet.total_cap(1, 5))
        pi = solve_stationary(sys)
        agg = aggregate_macro_kernel(sys, pi)
        masses = [agg.distribution[(k,)] for k in range(6)]
        for k in range(5):
            assert masses[k + 1] / masses[k] == pytest.approx(0.5, abs=1e-12)
        assert macro_detailed_balance_residual(agg) < 1e-15

    def test_macro_detailed_balance_on_redundancy(self, adversarial_spec):
        from quasirev.oiqueue import build_oi_system, redundancy_to_oi

        sys = build_oi_system(redundancy_to_oi(adversarial_spec), FerrersSet.total_cap(3, 3))
        pi = solve_stationary(sys)
        agg = aggregate_macro_kernel(sys, pi)
        assert macro_detailed_balance_residual(agg) < 1e-12
