"""Synchronous and asynchronous SGD over parameter groups.

Group 0 is the shared trunk, group ``t + 1`` belongs to task ``t``. In the
synchronous scheme every group is updated after each minibatch of ``B``
samples. In the asynchronous scheme each group keeps its own counter and
gradient accumulator, and is updated as soon as it has observed
``B_p`` relevant samples: the trunk counts every sample, a task counts only
samples annotated for it.
"""

from __future__ import annotations

import collections
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import network as nw
from .checkpoint import Executor
from .ops import NoAnnotationError, ParameterError


@dataclass
class OptimizerConfig:
    base_lr: float = 0.001
    decay_factor: float = 0.1
    decay_at_iter: int = 3000
    total_iters: int = 500
    weight_decay: float = 0.0005
    momentum: float = 0.9
    trunk_batch: int = 30
    sync_batch: int = 10

    def validate(self) -> None:
        if not self.base_lr > 0:
            raise ParameterError("base_lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ParameterError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ParameterError("weight_decay must be >= 0")
        if self.trunk_batch < 1 or self.sync_batch < 1:
            raise ParameterError("batch sizes must be >= 1")
        if self.total_iters < 0 or self.decay_at_iter < 0:
            raise ParameterError("iteration counts must be >= 0")


def lr_at(it: int, cfg: OptimizerConfig) -> float:
    return cfg.base_lr if it < cfg.decay_at_iter else cfg.base_lr * cfg.decay_factor


@dataclass
class ParamGroup:
    id: int
    weights: np.ndarray  # aliases the network's flat storage
    batch_effective: int
    accum: np.ndarray = None
    momentum_buffer: np.ndarray = None
    counter: int = 0
    updates: int = 0

    def __post_init__(self):
        if self.accum is None:
            self.accum = np.zeros_like(self.weights)
        if self.momentum_buffer is None:
            self.momentum_buffer = np.zeros_like(self.weights)


def apply_update(group: ParamGroup, lr: float, weight_decay: float, momentum: float) -> None:
    """Heavy-ball step on ``weight_decay * w + dw / B_p``, then reset the accumulator."""
    step = weight_decay * group.weights + group.accum / group.batch_effective
    group.momentum_buffer *= momentum
    group.momentum_buffer += step
    group.weights -= lr * group.momentum_buffer
    group.accum[...] = 0.0
    group.counter = 0
    group.updates += 1


def make_groups(net: nw.Network, cfg: OptimizerConfig, uniform_batch: int | None = None) -> list[ParamGroup]:
    sizes = [cfg.trunk_batch] + [t.batch_effective for t in net.spec.tasks]
    if uniform_batch is not None:
        sizes = [uniform_batch] * len(sizes)
    return [ParamGroup(p, net.groups[p].flat, b) for p, b in enumerate(sizes)]


@dataclass
class Trajectory:
    task_ids: list[str]
    rows: list[dict] = field(default_factory=list)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    update_counts: list[int] = field(default_factory=list)
    samples_seen: int = 0
    annotated_seen: dict[str, int] = field(default_factory=dict)
    empty_task_updates: dict[str, int] = field(default_factory=dict)
    groups: list[ParamGroup] = field(default_factory=list, repr=False)

    def columns(self) -> list[str]:
        n = len(self.task_ids)
        return (
            ["iter", "group", "event", "lr", "loss_total"]
            + [f"loss_{t}" for t in self.task_ids]
            + [f"c_{p}" for p in range(n + 1)]
        )


def _row(traj, m, group, event, lr, g: nw.GradientSet | None, groups):
    row = {"iter": m, "group": group, "event": event, "lr": lr}
    row["loss_total"] = g.total if g is not None else ""
    for t in traj.task_ids:
        row[f"loss_{t}"] = g.task_losses.get(t, "") if g is not None else ""
    for p, grp in enumerate(groups):
        row[f"c_{p}"] = grp.counter
    return row


def _first(stream: Iterable):
    it = iter(stream)
    try:
        first = next(it)
    except StopIteration:
        raise ParameterError("empty sample stream") from None
    return first, it


Exec = Callable[[nw.Network, object], nw.GradientSet]


def async_sgd_run(
    net: nw.Network,
    stream: Iterable,
    cfg: OptimizerConfig,
    executor: Exec | None = None,
    record_snapshots: bool = False,
    log_rows: bool = True,
    groups: list[ParamGroup] | None = None,
) -> Trajectory:
    """Streaming SGD; each group updates once it has seen ``B_p`` relevant samples.

    Accumulations left over when the stream or iteration budget ends are
    discarded.
    """
    cfg.validate()
    executor = executor or Executor("Vanilla")
    groups = groups if groups is not None else make_groups(net, cfg)
    tids = [t.id for t in net.spec.tasks]
    traj = Trajectory(tids, groups=groups, annotated_seen={t: 0 for t in tids})
    sample, it = _first(stream)
    m = 0
    while m < cfg.total_iters:
        lr = lr_at(m, cfg)
        g = executor(net, sample)
        # trunk: always observed
        groups[0].counter += 1
        groups[0].accum += g.groups[0].flat
        for ti, tid in enumerate(tids):
            if sample.delta.get(tid, 0):
                traj.annotated_seen[tid] += 1
                groups[ti + 1].counter += 1
                groups[ti + 1].accum += g.groups[ti + 1].flat
        if log_rows:
            traj.rows.append(_row(traj, m, "*", "observe", lr, g, groups))
        fired = False
        for grp in groups:
            if grp.counter == grp.batch_effective:
                apply_update(grp, lr, cfg.weight_decay, cfg.momentum)
                fired = True
                if log_rows:
                    traj.rows.append(_row(traj, m, grp.id, "update", lr, None, groups))
        if fired and record_snapshots:
            traj.snapshots[m] = net.flat()
        m += 1
        traj.samples_seen = m
        if m < cfg.total_iters:
            try:
                sample = next(it)
            except StopIteration:
                break
    traj.update_counts = [grp.updates for grp in groups]
    return traj


def sync_sgd_run(
    net: nw.Network,
    stream: Iterable,
    cfg: OptimizerConfig,
    executor: Exec | None = None,
    record_snapshots: bool = False,
    log_rows: bool = True,
) -> Trajectory:
    """Minibatch SGD: every group updates after each ``cfg.sync_batch`` samples.

    Runs ``total_iters // B`` minibatches drawn consecutively from the stream.
    The learning rate of minibatch ``j`` is ``lr_at((j + 1) * B - 1)``, the
    index of its last sample, matching the asynchronous scheme's clock.
    """
    cfg.validate()
    executor = executor or Executor("Vanilla")
    B = cfg.sync_batch
    groups = make_groups(net, cfg, uniform_batch=B)
    tids = [t.id for t in net.spec.tasks]
    traj = Trajectory(tids, groups=groups, annotated_seen={t: 0 for t in tids}, empty_task_updates={t: 0 for t in tids})
    first, it = _first(stream)
    it = itertools.chain([first], it)
    m = 0
    for _ in range(cfg.total_iters // B):
        batch = list(itertools.islice(it, B))
        if len(batch) < B:
            break
        seen_in_batch = {t: 0 for t in tids}
        for sample in batch:
            lr = lr_at(m, cfg)
            g = executor(net, sample)
            groups[0].counter += 1
            groups[0].accum += g.groups[0].flat
            for ti, tid in enumerate(tids):
                groups[ti + 1].counter += 1
                if sample.delta.get(tid, 0):
                    seen_in_batch[tid] += 1
                    traj.annotated_seen[tid] += 1
                    groups[ti + 1].accum += g.groups[ti + 1].flat
            if log_rows:
                traj.rows.append(_row(traj, m, "*", "observe", lr, g, groups))
            m += 1
        traj.samples_seen = m
        for t in tids:
            if seen_in_batch[t] == 0:
                traj.empty_task_updates[t] += 1
        for grp in groups:
            apply_update(grp, lr, cfg.weight_decay, cfg.momentum)
            if log_rows:
                traj.rows.append(_row(traj, m - 1, grp.id, "update", lr, None, groups))
        if record_snapshots:
            traj.snapshots[m - 1] = net.flat()
    traj.update_counts = [grp.updates for grp in groups]
    return traj


def gradient_magnitude_probe(
    net: nw.Network,
    stream: Iterable,
    task_id: str,
    B: int,
    B_p: int,
    trials: int,
    executor: Exec | None = None,
    max_scan: int = 100_000,
) -> tuple[float, float]:
    """Mean norms of the synchronous and asynchronous gradient estimates for one task.

    Parameters are never updated. Trial ``i`` starts at stream position
    ``i * B``: the synchronous estimate sums the task gradient over the next
    ``B`` samples and divides by ``B``; the asynchronous one sums it over the
    first ``B_p`` annotated samples from the same start and divides by
    ``B_p``. Per-sample gradients are computed once per distinct sample and
    shared by both estimators.
    """
    executor = executor or Executor("Vanilla")
    ti = net.spec.task_index(task_id)
    cache: dict[int, np.ndarray | None] = {}
    it = iter(stream)
    buf: collections.deque = collections.deque()
    zero = np.zeros(len(net.groups[ti + 1]))

    def grad_of(s):
        key = id(s)
        if key not in cache:
            cache[key] = executor(net, s).groups[ti + 1].flat.copy() if s.delta.get(task_id, 0) else None
        return cache[key]

    def at(i):
        while len(buf) <= i:
            try:
                buf.append(next(it))
            except StopIteration:
                raise ParameterError("stream exhausted during probe") from None
        return buf[i]

    sync_norms, async_norms = [], []
    for _ in range(trials):
        gs = zero.copy()
        for i in range(B):
            g = grad_of(at(i))
            if g is not None:
                gs += g
        ga = zero.copy()
        found, i, since = 0, 0, 0
        while found < B_p:
            g = grad_of(at(i))
            i += 1
            since += 1
            if g is not None:
                ga += g
                found += 1
                since = 0
            elif since > max_scan:
                raise NoAnnotationError(f"no samples annotated for {task_id!r} within {max_scan} draws")
        sync_norms.append(np.linalg.norm(gs / B))
        async_norms.append(np.linalg.norm(ga / B_p))
        for _ in range(B):
            buf.popleft()
    return float(np.mean(sync_norms)), float(np.mean(async_norms))
