from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adsgd_lab.algorithms import (ADSGD, ASBCD, AgentState, DivergenceError, MemEffADSGD,
                                  MemEffState, SyncRunner, adsgd_update, asbcd_update,
                                  double_step_direct, double_step_update, make_protocol,
                                  memeff_update, ring_allreduce, ring_allreduce_round,
                                  sync_dsgd_round)
from adsgd_lab.config import preset_delay_model
from adsgd_lab.engine import DelayModel, Simulator, constant_delay
from adsgd_lab.graph import build_topology, double_step_transform, metropolis_weights
from adsgd_lab.problems import PenalizedProblem, QuadraticBlockProblem, make_quadratic

from schedules import fraction_mixing, fraction_quadratics, to_fraction_array

F = Fraction


# -- single updates ----------------------------------------------------------------


def test_adsgd_update_by_hand():
    s = AgentState(0, np.array([1.0]), {1: np.array([3.0])}, alpha=0.1)
    out = adsgd_update(s, np.array([0.5, 0.5]), np.array([2.0]))
    assert out == pytest.approx([1.8])


def test_adsgd_update_uses_self_weight_and_buffered_copies():
    w_row = np.array([F(1, 2), F(1, 4), F(1, 4)], dtype=object)
    s = AgentState(0, np.array([F(2)], dtype=object),
                   {1: np.array([F(4)], dtype=object), 2: np.array([F(-8)], dtype=object)},
                   alpha=F(1, 10))
    out = adsgd_update(s, w_row, np.array([F(5)], dtype=object))
    assert out[0] == F(1) + F(1) - F(2) - F(1, 2)


@pytest.mark.parametrize("value", [np.nan, np.inf, 1e13])
def test_divergence_is_reported(value):
    s = AgentState(3, np.array([value]), {}, alpha=0.5)
    with pytest.raises(DivergenceError) as err:
        adsgd_update(s, np.array([0, 0, 0, 1.0]), np.array([0.0]))
    assert err.value.agent == 3 and err.value.step == 0.5
    with pytest.raises(DivergenceError):
        asbcd_update(np.array([value]), np.array([0.0]), 0.1)


def test_memeff_update_by_hand():
    s = MemEffState(0, x=np.array([2.0]), y=np.array([1.0]), z=np.zeros(1), alpha=0.5)
    z, new = memeff_update(s, 0.25, np.array([1.0]))
    assert z == pytest.approx([-0.75 * 2.0 + 1.0 - 0.5])
    assert new == pytest.approx([2.0 + z[0]])


def test_double_step_forms_agree_exactly():
    rng = np.random.default_rng(0)
    topo = build_topology("grid", 4)
    mixing = fraction_mixing(metropolis_weights(topo))
    alpha, beta = F(1, 3), F(1, 7)
    w_tilde = double_step_transform(mixing, alpha, beta).w
    for i in range(4):
        x = to_fraction_array(rng.integers(-5, 5, 2))
        buf = {j: to_fraction_array(rng.integers(-5, 5, 2)) for j in topo.neighbors(i)}
        g = to_fraction_array(rng.integers(-5, 5, 2))
        s = AgentState(i, x, buf, alpha, beta=beta)
        a = double_step_update(s, w_tilde[i], g)
        b = double_step_direct(s, mixing.w[i], g)
        assert list(a) == list(b)
        # beta = alpha gives back the plain update
        s.beta = alpha
        assert list(double_step_direct(s, mixing.w[i], g)) == list(adsgd_update(s, mixing.w[i], g))


def test_double_step_needs_beta():
    s = AgentState(0, np.zeros(1), {}, alpha=0.1)
    with pytest.raises(ValueError):
        double_step_update(s, np.ones(1), np.zeros(1))


# -- protocols on the engine --------------------------------------------------------


def _exact_setup(n=4, d=2, seed=0):
    topo = build_topology("grid", n)
    problems = fraction_quadratics(make_quadratic(n, d, seed=seed))
    mixing = fraction_mixing(metropolis_weights(topo))
    x0 = to_fraction_array(np.arange(d) + 1)
    return topo, problems, mixing, x0


def test_memeff_matches_adsgd_exactly():
    topo, problems, mixing, x0 = _exact_setup()
    delays = preset_delay_model("comm_straggler", 4, topo)
    runs = {}
    for cls in (ADSGD, MemEffADSGD):
        proto = cls(problems, mixing, F(1, 20), x0, topo, seed=1)
        # coalescing in the memory-efficient variant must keep the neighbor
        # sum equal to what a full buffer of latest models would give
        Simulator(topo, delays, proto, seed=1, port_policy="coalesce").run(max_updates=120)
        runs[cls] = proto
    for i in range(4):
        assert list(runs[ADSGD].value(i)) == list(runs[MemEffADSGD].value(i))
        shadow = sum(mixing.w[i, j] * runs[ADSGD].states[i].buffer[j] for j in topo.neighbors(i))
        assert list(runs[MemEffADSGD].states[i].y) == list(shadow)


def test_memeff_float_run_tracks_adsgd():
    topo = build_topology("grid", 9)
    problems = make_quadratic(9, 3, seed=2, noise_var=0.5)
    mixing = metropolis_weights(topo)
    delays = preset_delay_model("combined_straggler", 9, topo)
    protos = [cls(problems, mixing, 0.05, np.ones(3), topo, seed=4) for cls in (ADSGD, MemEffADSGD)]
    for p in protos:
        Simulator(topo, delays, p, seed=4, port_policy="queue").run(max_updates=2000)
    for i in range(9):
        np.testing.assert_allclose(protos[0].value(i), protos[1].value(i), rtol=1e-9, atol=1e-9)


def test_asbcd_commit_snapshot_equals_adsgd_exactly():
    topo, problems, mixing, x0 = _exact_setup(seed=3)
    alpha = F(1, 20)
    delays = preset_delay_model("slow_comm", 4, topo)
    adsgd = ADSGD(problems, mixing, alpha, x0, topo, seed=0)
    Simulator(topo, delays, adsgd, seed=5).run(max_updates=80)
    pen = PenalizedProblem(problems, mixing.w, alpha, lambda_min=mixing.lambda_min)
    asbcd = ASBCD(pen, alpha, [x0] * 4, topo, seed=0, snapshot="commit")
    Simulator(topo, delays, asbcd, seed=5).run(max_updates=80)
    for i in range(4):
        assert list(adsgd.value(i)) == list(asbcd.value(i))


def test_asbcd_single_block_is_plain_gradient_descent():
    p = make_quadratic(1, 3, seed=1)[0]
    H = p.A.T @ p.A
    block = QuadraticBlockProblem(H, p.A.T @ p.b, (3,))
    topo = build_topology("custom", n=1, edges=[])
    proto = ASBCD(block, 0.05, np.ones(3), topo)
    delays = DelayModel([constant_delay(1.0)], {})
    values = [r.value for r in Simulator(topo, delays, proto).run(max_updates=25).updates()]
    x = np.ones(3)
    for v in values:
        x = x - 0.05 * (H @ x - p.A.T @ p.b)
        np.testing.assert_allclose(v, x, rtol=1e-13, atol=1e-13)


def test_asbcd_cyclic_order_is_gauss_seidel():
    rng = np.random.default_rng(7)
    M = rng.standard_normal((6, 6))
    H = M @ M.T + np.eye(6)
    c = rng.standard_normal(6)
    problem = QuadraticBlockProblem(H, c, (2, 2, 2))
    topo = build_topology("complete", 3)
    alpha = 0.5 / np.linalg.eigvalsh(H)[-1]
    proto = ASBCD(problem, alpha, np.zeros(6), topo, snapshot="start")
    x = np.zeros(6)
    for sweep in range(30):
        for i in range(3):
            # instant delivery: compute, commit, broadcast
            proto.begin_compute(i)
            _, new = proto.commit(i)
            for j in topo.neighbors(i):
                proto.receive(j, i, sweep + 1, new)
            sl = slice(2 * i, 2 * i + 2)
            x[sl] = x[sl] - alpha * (H[sl] @ x - c[sl])
    np.testing.assert_allclose(np.concatenate(proto.models()), x, rtol=1e-12, atol=1e-12)


def test_asbcd_rejects_unreachable_blocks():
    problem = QuadraticBlockProblem(np.eye(3) + 0.1, np.zeros(3), (1, 1, 1))
    with pytest.raises(ValueError, match="cannot receive"):
        ASBCD(problem, 0.1, np.zeros(3), build_topology("custom", n=3, edges=[(0, 1), (1, 2)]))
    with pytest.raises(ValueError, match="snapshot"):
        ASBCD(problem, 0.1, np.zeros(3), build_topology("complete", 3), snapshot="later")


def test_make_protocol_dispatch_and_errors():
    topo = build_topology("ring", 4)
    problems = make_quadratic(4, 2)
    mixing = metropolis_weights(topo)
    assert isinstance(make_protocol("adsgd_memeff", problems, mixing, 0.1, np.zeros(2), topo),
                      MemEffADSGD)
    asbcd = make_protocol("asbcd", problems, mixing, 0.1, np.zeros(2), topo)
    assert [b.shape for b in asbcd.models()] == [(2,)] * 4
    with pytest.raises(ValueError, match="beta"):
        make_protocol("adsgd_doublestep", problems, mixing, 0.1, np.zeros(2), topo)
    with pytest.raises(ValueError, match="event-driven"):
        make_protocol("sync_dsgd", problems, mixing, 0.1, np.zeros(2), topo)
    with pytest.raises(ValueError):
        make_protocol("gossip", problems, mixing, 0.1, np.zeros(2), topo)
    with pytest.raises(ValueError, match="one initial model"):
        ADSGD(problems, mixing, 0.1, [np.zeros(2)] * 3, topo)


# -- synchronous baselines ----------------------------------------------------------


def test_sync_dsgd_round_is_dense_recursion():
    topo, problems, mixing, _ = _exact_setup(n=9, d=2)
    rng = np.random.default_rng(3)
    X = [to_fraction_array(rng.integers(-4, 4, 2)) for _ in range(9)]
    G = [to_fraction_array(rng.integers(-4, 4, 2)) for _ in range(9)]
    alpha = F(1, 8)
    out = sync_dsgd_round(X, mixing.w, G, alpha)
    dense = mixing.w @ np.stack(X) - alpha * np.stack(G)
    assert [list(r) for r in out] == [list(r) for r in dense]
    # zero gradients: a doubly stochastic mix keeps the average fixed
    zero = [0 * g for g in G]
    mixed = sync_dsgd_round(X, mixing.w, zero, alpha)
    assert list(sum(mixed)) == list(sum(X))


def test_sync_dsgd_with_identity_is_independent_sgd():
    X = [np.array([1.0, 2.0]), np.array([-1.0, 0.5])]
    G = [np.array([0.5, 0.5]), np.array([1.0, -1.0])]
    out = sync_dsgd_round(X, np.eye(2), G, 0.2)
    for x, g, o in zip(X, G, out):
        np.testing.assert_array_equal(o, x - 0.2 * g)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 8), d=st.integers(1, 12), seed=st.integers(0, 10_000))
def test_ring_allreduce_sums_exactly(n, d, seed):
    rng = np.random.default_rng(seed)
    vectors = [rng.integers(-1000, 1000, d).astype(float) for _ in range(n)]
    out = ring_allreduce(vectors)
    total = np.sum(vectors, axis=0)
    assert len(out) == n
    for v in out:
        np.testing.assert_array_equal(v, total)
        np.testing.assert_array_equal(v, out[0])


def test_ring_allreduce_replicas_identical_with_rounding():
    rng = np.random.default_rng(0)
    out = ring_allreduce([rng.standard_normal(7) for _ in range(5)])
    assert all(np.array_equal(v, out[0]) for v in out)


def test_two_agent_allreduce_step_is_centralized():
    x = np.array([1.0, -2.0])
    g0, g1 = np.array([0.5, 1.0]), np.array([1.5, -3.0])
    out = ring_allreduce_round([x, x.copy()], [g0, g1], 0.4)
    for v in out:
        np.testing.assert_allclose(v, x - 0.2 * (g0 + g1), rtol=0, atol=1e-15)


@pytest.mark.parametrize("kind", ["sync_dsgd", "parallel_sgd"])
def test_sync_runner_rounds(kind):
    topo = build_topology("grid", 4)
    delays = preset_delay_model("comp_straggler", 4, topo)
    runner = SyncRunner(kind, make_quadratic(4, 2, noise_var=0.1), metropolis_weights(topo), 0.05,
                        np.zeros(2), topo, delays, seed=1)
    rounds = runner.run(max_rounds=50)
    assert len(rounds) == 50 and runner.update_count == 200
    for r in rounds:
        assert r.duration >= max(r.compute)
    times = [r.time for r in rounds]
    assert times == sorted(times) and runner.now == times[-1]
    if kind == "parallel_sgd":
        assert all(np.array_equal(m, runner.models()[0]) for m in runner.models())
    with pytest.raises(ValueError):
        runner.run()
    with pytest.raises(ValueError, match="synchronous"):
        SyncRunner("adsgd", make_quadratic(4, 2), metropolis_weights(topo), 0.05, np.zeros(2),
                   topo, delays)


def test_sync_runner_stops_on_observer():
    topo = build_topology("ring", 4)
    delays = preset_delay_model("base", 4, topo)
    runner = SyncRunner("sync_dsgd", make_quadratic(4, 2), metropolis_weights(topo), 0.05,
                        np.zeros(2), topo, delays)
    runner.run(max_time=1e9, observer=lambda r: len(r.rounds) == 7)
    assert len(runner.rounds) == 7


# -- further degenerate cases -------------------------------------------------------


class _HalfSquare:
    """``f(x) = x^2 / 2`` in one dimension."""

    dim = 1
    smoothness = 1.0

    def full_gradient(self, x):
        return x

    def stochastic_gradient(self, x, rng):
        return x


def test_single_agent_one_step_by_hand():
    topo = build_topology("custom", n=1, edges=[])
    proto = ADSGD([_HalfSquare()], np.ones((1, 1)), 0.1, np.array([1.0]), topo)
    proto.begin_compute(0)
    _, x = proto.commit(0)
    assert x == pytest.approx([0.9], abs=1e-15)


def test_zero_step_with_identity_is_a_fixed_point():
    s = AgentState(1, np.array([3.0, -1.0]), {0: np.array([7.0, 7.0])}, alpha=0.0)
    out = adsgd_update(s, np.array([0.0, 1.0]), np.array([100.0, 100.0]))
    np.testing.assert_array_equal(out, s.x)


def test_memeff_single_step_matches_buffered_update():
    topo, problems, mixing, x0 = _exact_setup(seed=4)
    rng = np.random.default_rng(5)
    models = [to_fraction_array(rng.integers(-3, 3, 2)) for _ in range(4)]
    full = ADSGD(problems, mixing, F(1, 10), models, topo)
    lean = MemEffADSGD(problems, mixing, F(1, 10), models, topo)
    for i in range(4):
        full.begin_compute(i)
        lean.begin_compute(i)
        assert list(full.commit(i)[1]) == list(lean.commit(i)[1])
        full.states[i].x = models[i]
        lean.states[i].x = models[i]


def test_memeff_increment_vanishes_at_stationary_consensus():
    s = MemEffState(0, x=np.array([2.0, -1.0]), y=0.75 * np.array([2.0, -1.0]), z=np.zeros(2),
                    alpha=0.3)
    z, new = memeff_update(s, 0.25, np.zeros(2))
    np.testing.assert_array_equal(z, np.zeros(2))
    np.testing.assert_array_equal(new, s.x)


def test_sync_runner_fifty_rounds_match_dense_recursion():
    topo, problems, mixing, x0 = _exact_setup(n=4, d=2, seed=6)
    alpha = F(1, 30)
    runner = SyncRunner("sync_dsgd", problems, mixing, alpha, x0, topo,
                        preset_delay_model("base", 4, build_topology("grid", 4)))
    runner.run(max_rounds=50)
    X = np.stack([x0] * 4)
    for _ in range(50):
        G = np.stack([p.full_gradient(X[i]) for i, p in enumerate(problems)])
        X = mixing.w.dot(X) - alpha * G
    assert [list(m) for m in runner.models()] == [list(r) for r in X]


def test_allreduce_against_serial_sum():
    rng = np.random.default_rng(9)
    vectors = [rng.standard_normal(11) for _ in range(6)]
    serial = np.zeros(11)
    for v in vectors:
        serial = serial + v
    for out in ring_allreduce(vectors):
        np.testing.assert_allclose(out, serial, rtol=0, atol=1e-12)


def test_gossip_conserves_mass_in_lockstep():
    topo, _, mixing, _ = _exact_setup(n=4, d=2)

    class Flat:
        dim = 2

        def stochastic_gradient(self, x, rng):
            return 0 * x

    rng = np.random.default_rng(1)
    x0 = [to_fraction_array(rng.integers(-9, 9, 2)) for _ in range(4)]
    proto = ADSGD([Flat()] * 4, mixing, F(1, 10), x0, topo)
    delays = DelayModel.uniform(topo, constant_delay(1.0), constant_delay(0.0))
    trace = Simulator(topo, delays, proto).run(max_updates=4 * 15)
    assert all(r.time == float(k // 4 + 1) for k, r in enumerate(trace.updates()))
    assert list(sum(proto.models())) == list(sum(x0))
