import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lowmem_mtl import checkpoint as ck
from lowmem_mtl import gradcheck as gc
from lowmem_mtl import network as nw
from lowmem_mtl.data import Sample
from lowmem_mtl.ops import ParameterError


def uniform_spec(L_C, L_T, T, skips=None, width=3):
    tasks = [nw.TaskSpec(f"t{i}", "softmax", 2, head_depth=L_T) for i in range(T)]
    return nw.NetworkSpec(2, [width] * L_C, skips or [L_C], tasks, head_width=width)


def run(strategy, net, sample):
    ledger = ck.MemoryLedger(trace=True)
    g = ck.Executor(strategy, ledger)(net, sample)
    return g, ledger


# planner -----------------------------------------------------------------


def test_square_chain_anchors():
    s = ck.plan_schedule(9, 0, 0, "SqrtChain")
    assert s.segment_length == 3 and s.anchor_layers == (3, 6, 9)


def test_vanilla_figure_instance():
    assert ck.plan_schedule(6, 3, 2, "Vanilla").predicted_peak_slots == 24
    assert ck.plan_schedule(9, 0, 0, "Vanilla").predicted_peak_slots == 18


def test_multitask_working_set_independent_of_T():
    peaks = set()
    for T in (1, 2, 4, 8):
        s = ck.plan_schedule(6, 3, T, "MultiTaskSqrt")
        assert 2 * s.segment_length == 2 * math.ceil(math.sqrt(9)) == 6
        peaks.add(s.predicted_peak_slots)
    # 6 working slots + anchors {3, 6, 9} + one branch-point accumulator
    assert peaks == {10}


def simulate_sqrt_chain(L):
    """Event-level trace of sqrt(L) checkpointing on a plain chain; returns the peak."""
    seg = math.ceil(math.sqrt(L))
    anchors = set(range(seg, L + 1, seg)) | {L}
    live, peak = set(), 0

    def alloc(x):
        nonlocal peak
        live.add(x)
        peak = max(peak, len(live))

    for i in range(1, L + 1):
        alloc(("a", i))
        if i - 1 >= 1 and (i - 1) not in anchors:
            live.discard(("a", i - 1))
    hi = L
    while hi > 0:
        lo = max(0, hi - seg)
        for i in range(lo + 1, hi):
            alloc(("a", i))
        for i in range(hi, lo, -1):
            alloc(("g", i))
        alloc(("g", lo))  # gradient handed to the segment below
        for i in range(lo + 1, hi + 1):
            live.discard(("g", i))
            if i not in anchors or i == hi:
                live.discard(("a", i))
        hi = lo
    return peak


def test_sqrt_chain_trace_oracle():
    assert simulate_sqrt_chain(9) == 9
    assert ck.plan_schedule(9, 0, 0, "SqrtChain").predicted_peak_slots == 9


def test_ceil_for_non_square():
    s = ck.plan_schedule(10, 0, 0, "SqrtChain")
    assert s.segment_length == 4 and s.anchor_layers == (4, 8, 10)


def test_skip_layers_become_anchors():
    s = ck.plan_schedule(6, 3, 2, "MultiTaskSqrt", skip_set=[2, 6])
    assert {2, 6} <= set(s.anchor_layers)


@pytest.mark.parametrize("args", [(6, 3, 2, "Fancy"), (0, 3, 2, "Vanilla"), (6, -1, 2, "SqrtChain")])
def test_planner_errors(args):
    with pytest.raises(ParameterError):
        ck.plan_schedule(*args)


def test_incompatible_schedule(rng):
    spec = uniform_spec(4, 2, 2)
    net = nw.build_network(spec, rng)
    s = gc.random_sample(spec, rng)
    with pytest.raises(ParameterError):
        ck.backprop_checkpointed(net, s, ck.plan_schedule(5, 2, 2, "SqrtChain"), ck.MemoryLedger())


# equivalence and ledger --------------------------------------------------


def test_checkpointed_equals_vanilla_random_specs():
    for i in range(15):
        r = np.random.default_rng([31, i])
        spec = gc.random_spec(r, L_C=int(r.integers(1, 9)), T=int(r.integers(1, 4)))
        net = nw.build_network(spec, r)
        sample = gc.random_sample(spec, r, hw=(4, 3), density=0.7)
        ref, _ = run("Vanilla", net, sample)
        for strategy in ("SqrtChain", "MultiTaskSqrt"):
            g, led = run(strategy, net, sample)
            assert g.flat().tobytes() == ref.flat().tobytes()
            assert g.total == ref.total
            assert led.live_slots == 0
            assert led.peak_slots <= ck.plan_for(net, strategy).predicted_peak_slots


@pytest.mark.parametrize("L_C,L_T,T", [(6, 3, 2), (3, 1, 1), (5, 2, 4), (9, 0 + 1, 3)])
def test_vanilla_peak_matches_prediction(L_C, L_T, T, rng):
    spec = uniform_spec(L_C, L_T, T)
    net = nw.build_network(spec, rng)
    _, led = run("Vanilla", net, gc.random_sample(spec, rng))
    assert led.peak_slots == ck.plan_for(net, "Vanilla").predicted_peak_slots == 2 * (L_C + T * L_T)


def test_multitask_measured_peak_independent_of_T(rng):
    peaks = []
    for T in (1, 2, 4, 8):
        spec = uniform_spec(6, 3, T)
        net = nw.build_network(spec, rng)
        _, led = run("MultiTaskSqrt", net, gc.random_sample(spec, rng))
        peaks.append(led.peak_slots)
    assert len(set(peaks)) == 1


def test_ledger_soundness(rng):
    spec = uniform_spec(7, 2, 3, skips=[3, 7])
    net = nw.build_network(spec, rng)
    for strategy in ck.STRATEGIES:
        _, led = run(strategy, net, gc.random_sample(spec, rng))
        assert min(led.history) >= 0
        assert led.peak_slots == max(led.history)
        assert led.live_slots == 0


def test_recompute_counts(rng):
    spec = uniform_spec(9, 3, 2)
    net = nw.build_network(spec, rng)
    s = gc.random_sample(spec, rng)
    assert run("SqrtChain", net, s)[1].recompute_count > 0
    assert run("Vanilla", net, s)[1].recompute_count == 0


def test_monotonicity(rng):
    for L_C, L_T, T in [(6, 3, 2), (8, 2, 4), (4, 4, 3)]:
        spec = uniform_spec(L_C, L_T, T)
        net = nw.build_network(spec, rng)
        s = gc.random_sample(spec, rng)
        mt = ck.plan_for(net, "MultiTaskSqrt")
        if L_C + T * L_T > mt.predicted_peak_slots:
            assert run("Vanilla", net, s)[1].peak_slots > run("MultiTaskSqrt", net, s)[1].peak_slots


def test_no_active_task_is_noop(rng):
    spec = uniform_spec(4, 2, 2)
    net = nw.build_network(spec, rng)
    s = Sample(rng.standard_normal((4, 4, 2)), {}, {"t0": 0, "t1": 0})
    for strategy in ck.STRATEGIES:
        g, led = run(strategy, net, s)
        assert not g.flat().any() and sum(led.branch_executions.values()) == 0
        # vanilla still runs the trunk forward; the checkpointed executors return at once
        assert led.peak_slots == (2 * 4 if strategy == "Vanilla" else 0)


def test_trunk_gradient_additive_over_tasks(rng):
    spec = gc.random_spec(rng, L_C=3, T=2)
    net = nw.build_network(spec, rng)
    s = gc.random_sample(spec, rng, hw=(4, 4))
    both = ck.backprop_vanilla(net, s).groups[0].flat
    parts = []
    for keep in ("t0", "t1"):
        single = Sample(s.input, {keep: s.truths[keep]}, {"t0": int(keep == "t0"), "t1": int(keep == "t1")})
        parts.append(ck.backprop_vanilla(net, single).groups[0].flat)
    np.testing.assert_allclose(both, parts[0] + parts[1], rtol=0, atol=1e-12 * (1 + np.abs(both).max()))


# lazy evaluation ---------------------------------------------------------


def test_lazy_filter_examples():
    tasks = [nw.TaskSpec(f"t{i}", "softmax", 2) for i in (1, 2, 3)]
    y = np.zeros((2, 2), dtype=int)
    s = Sample(None, {"t1": y, "t3": y}, {"t1": 1, "t2": 0, "t3": 1})
    assert ck.lazy_branch_filter(s, tasks) == ["t1", "t3"]
    s = Sample(None, {"t1": y, "t2": y, "t3": y}, {"t1": 1, "t2": 1, "t3": 1})
    assert ck.lazy_branch_filter(s, tasks) == ["t1", "t2", "t3"]


@given(st.lists(st.tuples(st.booleans(), st.booleans(), st.booleans()), min_size=1, max_size=25))
def test_branch_executions_count_annotations(flags):
    spec = gc.random_spec(np.random.default_rng(3), L_C=2, T=3, L_T=2)
    net = nw.build_network(spec, np.random.default_rng(4))
    r = np.random.default_rng(5)
    led = ck.MemoryLedger()
    ex = ck.Executor("MultiTaskSqrt", led)
    for f in flags:
        truths = {t.id: gc.random_truth(t, (3, 3), r) for t, on in zip(spec.tasks, f) if on}
        ex(net, Sample(r.standard_normal((3, 3, spec.in_channels)), truths, {t.id: int(on) for t, on in zip(spec.tasks, f)}))
    for i, t in enumerate(spec.tasks):
        assert led.branch_executions[t.id] == sum(f[i] for f in flags)
