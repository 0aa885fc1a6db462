"""Vanilla and memory-bounded backpropagation with slot accounting.

Accounting contract
-------------------
A *slot* is one layer's activation buffer or one layer's gradient buffer,
covering every pyramid scale of that layer. Only buffers held across layer
operations are slots. Scratch inside a single op (batch-norm outputs, the
fused/loss maps of a loss node, a per-tap gradient that is immediately
added into an existing buffer) is not.

The network is viewed as a chain of positions: trunk layers ``1..L_C``,
then task branch layers. ``Vanilla`` keeps every activation and gradient.
``SqrtChain`` lays all branches end to end after the trunk (one chain of
length ``L_C + T*L_T``), keeps anchors every ``ceil(sqrt(L))`` positions
and recomputes segments during the backward pass. ``MultiTaskSqrt`` uses
the chain ``trunk + one branch`` of length ``L_C + L_T``; each branch runs
forward and backward to completion and frees everything it allocated before
the next branch starts, so only one branch is ever resident.

In both checkpointed strategies the skip layers are promoted to anchors,
and each skip layer has one gradient accumulator that collects the
contributions of all tasks (the branch point is the top trunk layer, so with
a single skip layer this is exactly one extra slot). Predicted peaks::

    Vanilla        2 * (L_C + T * L_T)
    SqrtChain      2 * ceil(sqrt(L_C + T * L_T)) + |anchors| + |K|
    MultiTaskSqrt  2 * ceil(sqrt(L_C + L_T))     + |anchors| + |K|

with the ``|K|`` accumulator term dropped when ``T == 0``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import network as nw
from .ops import ParameterError

STRATEGIES = ("Vanilla", "SqrtChain", "MultiTaskSqrt")


@dataclass(frozen=True)
class CheckpointSchedule:
    strategy: str
    L_C: int
    L_T: int
    T: int
    skip_set: tuple[int, ...]
    anchor_layers: tuple[int, ...]
    segment_length: int
    predicted_peak_slots: int


def _chain_length(L_C: int, L_T: int, T: int, strategy: str) -> int:
    if strategy == "MultiTaskSqrt":
        return L_C + (L_T if T > 0 else 0)
    return L_C + T * L_T


def predicted_peak(schedule: CheckpointSchedule) -> int:
    s = schedule
    if s.strategy == "Vanilla":
        return 2 * (s.L_C + s.T * s.L_T)
    acc = len(s.skip_set) if s.T > 0 else 0
    return 2 * s.segment_length + len(s.anchor_layers) + acc


def plan_schedule(L_C: int, L_T: int, T: int, strategy: str, skip_set=None) -> CheckpointSchedule:
    if strategy not in STRATEGIES:
        raise ParameterError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if L_C < 1 or L_T < 0 or T < 0:
        raise ParameterError(f"invalid depths L_C={L_C}, L_T={L_T}, T={T}")
    skips = tuple(sorted(set(skip_set))) if skip_set else (L_C,)
    if any(k < 1 or k > L_C for k in skips):
        raise ParameterError(f"skip_set {skips} outside 1..{L_C}")
    L = _chain_length(L_C, L_T, T, strategy)
    if strategy == "Vanilla":
        seg = 1
        anchors = tuple(range(1, L_C + T * L_T + 1))
    else:
        seg = math.isqrt(L - 1) + 1 if L > 0 else 1  # ceil(sqrt(L))
        anchors = tuple(sorted({p for p in range(seg, L + 1, seg)} | set(skips)))
    sched = CheckpointSchedule(strategy, L_C, L_T, T, skips, anchors, seg, 0)
    return CheckpointSchedule(**{**sched.__dict__, "predicted_peak_slots": predicted_peak(sched)})


def plan_for(net: nw.Network, strategy: str) -> CheckpointSchedule:
    spec = net.spec
    return plan_schedule(spec.trunk_depth, spec.max_head_depth, len(spec.tasks), strategy, spec.skips)


# --------------------------------------------------------------------------
# memory ledger


@dataclass
class MemoryLedger:
    """Live/peak slot counter. Persists across samples; peaks are run-wide."""

    live_slots: int = 0
    peak_slots: int = 0
    branch_executions: Counter = field(default_factory=Counter)
    recompute_count: int = 0
    slot_unit: str = "one layer's activation or gradient buffer"
    _held: set = field(default_factory=set, repr=False)
    history: list = field(default_factory=list, repr=False)
    trace: bool = False

    def allocate(self, key) -> None:
        if key in self._held:
            raise RuntimeError(f"slot {key!r} allocated twice")
        self._held.add(key)
        self.live_slots += 1
        self.peak_slots = max(self.peak_slots, self.live_slots)
        if self.trace:
            self.history.append(self.live_slots)

    def release(self, key) -> None:
        self._held.remove(key)
        self.live_slots -= 1
        if self.trace:
            self.history.append(self.live_slots)

    def reset_peak(self) -> None:
        self.peak_slots = self.live_slots


class _Slots:
    """Buffers held by an executor; every put/pop goes through the ledger."""

    def __init__(self, ledger: MemoryLedger):
        self.ledger = ledger
        self.bufs: dict = {}

    def put(self, key, value) -> None:
        self.ledger.allocate(key)
        self.bufs[key] = value

    def get(self, key):
        return self.bufs[key]

    def has(self, key) -> bool:
        return key in self.bufs

    def pop(self, key):
        self.ledger.release(key)
        return self.bufs.pop(key)

    def clear(self) -> None:
        for key in list(self.bufs):
            self.pop(key)


def lazy_branch_filter(sample, tasks) -> list[str]:
    """Ids of the tasks annotated in ``sample`` (spec order). Others are never evaluated."""
    out = []
    for t in tasks:
        tid = t if isinstance(t, str) else t.id
        if sample.delta.get(tid, 0):
            if sample.truths.get(tid) is None:
                raise nw.DataError(f"task {tid!r} flagged as annotated but has no ground truth")
            out.append(tid)
    return out


def _record(grads: nw.GradientSet, spec, ti: int, out: nw.TaskOutput) -> None:
    grads.task_losses[spec.tasks[ti].id] = out.fused_loss
    grads.total += out.weighted


def _zeros_like(bufs):
    return [np.zeros_like(b) for b in bufs]


# --------------------------------------------------------------------------
# executors


def backprop_vanilla(net: nw.Network, sample, ledger: MemoryLedger | None = None) -> nw.GradientSet:
    """Keep every activation and gradient buffer for the whole pass."""
    ledger = ledger if ledger is not None else MemoryLedger()
    spec = net.spec
    L = spec.trunk_depth
    grads = nw.GradientSet(net)
    active = nw.active_tasks(net, sample)
    slots = _Slots(ledger)
    pyr = nw.pyramid(sample.input, spec.scales)
    hw = pyr[0].shape[:2]

    cur = pyr
    for k in range(1, L + 1):
        cur = nw.trunk_layer_forward(net, k, cur)
        slots.put(("a", k), cur)
        slots.put(("g", k), _zeros_like(cur))
    for ti in active:
        ledger.branch_executions[spec.tasks[ti].id] += 1
        h = {k: slots.get(("a", k)) for k in spec.skips}
        for j in range(1, spec.tasks[ti].head_depth + 1):
            h = nw.branch_layer_forward(net, ti, j, h)
            slots.put(("b", ti, j), h)
            slots.put(("h", ti, j), None)

    def sink(k, s, g):
        slots.get(("g", k))[s] += g

    for ti in active:
        task = spec.tasks[ti]
        d = task.head_depth
        out, gtop = nw.loss_node(net, ti, slots.get(("b", ti, d)), sample.truths[task.id], hw, grads)
        _record(grads, spec, ti, out)
        slots.bufs[("h", ti, d)] = gtop
        for j in range(d, 0, -1):
            if j > 1:
                gin = nw.branch_layer_backward(
                    net, ti, j, slots.get(("b", ti, j - 1)), slots.get(("b", ti, j)), slots.get(("h", ti, j)), grads
                )
                slots.bufs[("h", ti, j - 1)] = gin
            else:
                taps = {k: slots.get(("a", k)) for k in spec.skips}
                nw.branch_layer_backward(net, ti, 1, taps, slots.get(("b", ti, 1)), slots.get(("h", ti, 1)), grads, sink)

    if active:
        for k in range(L, 0, -1):
            inp = pyr if k == 1 else slots.get(("a", k - 1))
            gin = nw.trunk_layer_backward(net, k, inp, slots.get(("a", k)), slots.get(("g", k)), grads, k > 1)
            if k > 1:
                below = slots.get(("g", k - 1))
                for s in range(len(below)):
                    below[s] += gin[s]
    slots.clear()
    return grads


def _check_compatible(net: nw.Network, schedule: CheckpointSchedule) -> None:
    spec = net.spec
    if (
        schedule.L_C != spec.trunk_depth
        or schedule.T != len(spec.tasks)
        or schedule.L_T < spec.max_head_depth
        or (schedule.strategy != "Vanilla" and set(schedule.skip_set) != set(spec.skips))
    ):
        raise ParameterError(
            f"schedule (L_C={schedule.L_C}, L_T={schedule.L_T}, T={schedule.T}, K={schedule.skip_set}) "
            f"does not fit network (L_C={spec.trunk_depth}, L_T={spec.max_head_depth}, "
            f"T={len(spec.tasks)}, K={tuple(spec.skips)})"
        )


def backprop_checkpointed(
    net: nw.Network, sample, schedule: CheckpointSchedule, ledger: MemoryLedger | None = None
) -> nw.GradientSet:
    """Anchor-and-recompute backpropagation.

    Gradients are bitwise identical to ``backprop_vanilla``: both executors
    call the same layer functions, visit tasks in spec order, and fold
    gradient contributions into accumulators in the same order.
    """
    _check_compatible(net, schedule)
    if schedule.strategy == "Vanilla":
        return backprop_vanilla(net, sample, ledger)
    ledger = ledger if ledger is not None else MemoryLedger()
    spec = net.spec
    L = spec.trunk_depth
    grads = nw.GradientSet(net)
    active = nw.active_tasks(net, sample)
    if not active:
        return grads
    anchors = set(schedule.anchor_layers)
    chained = schedule.strategy == "SqrtChain"
    slots = _Slots(ledger)
    pyr = nw.pyramid(sample.input, spec.scales)
    hw = pyr[0].shape[:2]

    def pos(ti, j):
        return L + (ti * schedule.L_T if chained else 0) + j

    # trunk forward: keep anchors only
    cur = pyr
    for k in range(1, L + 1):
        cur = nw.trunk_layer_forward(net, k, cur)
        slots.put(("a", k), cur)
        if k > 1 and (k - 1) not in anchors:
            slots.pop(("a", k - 1))

    def taps():
        return {k: slots.get(("a", k)) for k in spec.skips}

    # branch-point accumulators live for the whole branch phase
    for k in spec.skips:
        slots.put(("g", k), _zeros_like(slots.get(("a", k))))

    def sink(k, s, g):
        slots.get(("g", k))[s] += g

    def branch_anchor_js(ti):
        return [j for j in range(1, spec.tasks[ti].head_depth + 1) if pos(ti, j) in anchors]

    def branch_forward(ti):
        ledger.branch_executions[spec.tasks[ti].id] += 1
        js = branch_anchor_js(ti)
        if not js:
            return
        h = taps()
        for j in range(1, js[-1] + 1):
            h = nw.branch_layer_forward(net, ti, j, h)
            slots.put(("b", ti, j), h)
            if j > 1 and (j - 1) not in js:
                slots.pop(("b", ti, j - 1))

    def branch_backward(ti):
        task = spec.tasks[ti]
        d = task.head_depth
        js = branch_anchor_js(ti)
        computed = js[-1] if js else 0
        hi = d
        while hi > 0:
            lo = max([0] + [j for j in js if j < hi])
            h = taps() if lo == 0 else slots.get(("b", ti, lo))
            for j in range(lo + 1, hi + 1):
                if slots.has(("b", ti, j)):
                    h = slots.get(("b", ti, j))
                    continue
                h = nw.branch_layer_forward(net, ti, j, h)
                slots.put(("b", ti, j), h)
                if j <= computed:
                    ledger.recompute_count += 1
            if hi == d:
                out, gtop = nw.loss_node(net, ti, slots.get(("b", ti, d)), sample.truths[task.id], hw, grads)
                _record(grads, spec, ti, out)
                slots.put(("h", ti, d), gtop)
            for j in range(hi, lo, -1):
                if j > 1:
                    gin = nw.branch_layer_backward(
                        net, ti, j, slots.get(("b", ti, j - 1)), slots.get(("b", ti, j)), slots.get(("h", ti, j)), grads
                    )
                    slots.put(("h", ti, j - 1), gin)
                else:
                    nw.branch_layer_backward(net, ti, 1, taps(), slots.get(("b", ti, 1)), slots.get(("h", ti, 1)), grads, sink)
                slots.pop(("h", ti, j))
                slots.pop(("b", ti, j))
            hi = lo

    if chained:
        for ti in active:
            branch_forward(ti)
        for ti in active:
            branch_backward(ti)
    else:
        for ti in active:
            branch_forward(ti)
            branch_backward(ti)

    # trunk backward, segment by segment from the top
    trunk_anchors = sorted(k for k in anchors if k <= L)
    hi = L
    while hi > 0:
        lo = max([0] + [k for k in trunk_anchors if k < hi])
        h = pyr if lo == 0 else slots.get(("a", lo))
        for k in range(lo + 1, hi):
            h = nw.trunk_layer_forward(net, k, h)
            slots.put(("a", k), h)
            ledger.recompute_count += 1
        for k in range(hi, lo, -1):
            inp = pyr if k == 1 else slots.get(("a", k - 1))
            gin = nw.trunk_layer_backward(net, k, inp, slots.get(("a", k)), slots.get(("g", k)), grads, k > 1)
            if k > 1:
                if slots.has(("g", k - 1)):
                    below = slots.get(("g", k - 1))
                    for s in range(len(below)):
                        below[s] += gin[s]
                else:
                    slots.put(("g", k - 1), gin)
            slots.pop(("g", k))
            slots.pop(("a", k))
        hi = lo
    if slots.bufs:
        raise RuntimeError(f"executor leaked slots: {sorted(map(str, slots.bufs))}")
    return grads


class Executor:
    """Callable ``(net, sample) -> GradientSet`` bound to one strategy and ledger."""

    def __init__(self, strategy: str = "Vanilla", ledger: MemoryLedger | None = None):
        if strategy not in STRATEGIES:
            raise ParameterError(f"unknown strategy {strategy!r}")
        self.strategy = strategy
        self.ledger = ledger if ledger is not None else MemoryLedger()
        self._schedule = None

    def schedule(self, net: nw.Network) -> CheckpointSchedule:
        if self._schedule is None or self._schedule.L_C != net.spec.trunk_depth:
            self._schedule = plan_for(net, self.strategy)
        return self._schedule

    def __call__(self, net: nw.Network, sample) -> nw.GradientSet:
        if self.strategy == "Vanilla":
            return backprop_vanilla(net, sample, self.ledger)
        return backprop_checkpointed(net, sample, self.schedule(net), self.ledger)
