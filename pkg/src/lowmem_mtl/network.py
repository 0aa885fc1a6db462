"""Shared-trunk multi-task network over an image pyramid.

The trunk is a stack of position-wise linear+ReLU layers applied with tied
weights to every pyramid level. Each task taps a set of trunk layers
(skip layers), normalizes them, and accumulates per-layer linear scores into
one buffer; deeper head layers follow, and a fusion layer combines the
per-scale score maps. Losses are attached to the fused map and to every
per-scale map.

Layer-level forward/backward functions operate on *lists over scales* so the
backprop executors can treat one layer (all scales) as one memory slot.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import ops

LOSS_KINDS = ("softmax", "weighted_xent", "smooth_l1_on_unit_normals", "smooth_l1")


class SpecError(ValueError):
    """Invalid network or task description."""


class DataError(ValueError):
    """A sample is inconsistent with its annotation flags."""


@dataclass
class TaskSpec:
    id: str
    loss_kind: str
    out_channels: int
    gamma: float = 1.0
    batch_effective: int = 10
    head_depth: int = 1
    output_stride: int = 1
    w_pos: float = 0.9
    w_neg: float = 0.1

    def validate(self) -> None:
        if self.loss_kind not in LOSS_KINDS:
            raise SpecError(f"task {self.id!r}: unknown loss_kind {self.loss_kind!r}")
        if not self.gamma > 0:
            raise SpecError(f"task {self.id!r}: gamma must be > 0")
        if self.batch_effective < 1:
            raise SpecError(f"task {self.id!r}: batch_effective must be >= 1")
        if self.head_depth < 1:
            raise SpecError(f"task {self.id!r}: head_depth must be >= 1")
        if self.out_channels < 1:
            raise SpecError(f"task {self.id!r}: out_channels must be >= 1")
        if self.output_stride not in (1, 8):
            raise SpecError(f"task {self.id!r}: output_stride must be 1 or 8")
        if self.loss_kind == "smooth_l1_on_unit_normals" and self.out_channels != 3:
            raise SpecError(f"task {self.id!r}: unit normals need out_channels == 3")
        if self.loss_kind == "weighted_xent" and self.out_channels != 1:
            raise SpecError(f"task {self.id!r}: weighted_xent needs out_channels == 1")
        if self.loss_kind == "softmax" and self.out_channels < 2:
            raise SpecError(f"task {self.id!r}: softmax needs at least 2 classes")


@dataclass
class NetworkSpec:
    in_channels: int
    trunk_widths: list[int]
    skip_set: list[int]
    tasks: list[TaskSpec]
    scales: int = 1
    dsn_weight: float = 1.0
    head_width: int = 8
    last_skip_no_norm: bool = False

    @property
    def trunk_depth(self) -> int:
        return len(self.trunk_widths)

    @property
    def skips(self) -> list[int]:
        return sorted(set(self.skip_set))

    @property
    def max_head_depth(self) -> int:
        return max((t.head_depth for t in self.tasks), default=0)

    def width(self, k: int) -> int:
        return self.in_channels if k == 0 else self.trunk_widths[k - 1]

    def normalized(self, k: int) -> bool:
        """Whether skip layer ``k`` passes through batch normalization."""
        return not (self.last_skip_no_norm and k == self.skips[-1])

    def task_index(self, task_id: str) -> int:
        for i, t in enumerate(self.tasks):
            if t.id == task_id:
                return i
        raise KeyError(task_id)

    def validate(self) -> None:
        L = self.trunk_depth
        if L < 1:
            raise SpecError("trunk needs at least one layer")
        if self.in_channels < 1 or any(w < 1 for w in self.trunk_widths):
            raise SpecError("channel widths must be positive")
        if not self.skip_set:
            raise SpecError("skip_set must be non-empty")
        if any(k < 1 or k > L for k in self.skip_set):
            raise SpecError(f"skip_set {self.skip_set} not within 1..{L}")
        if L not in self.skip_set:
            # the branch point is the top of the trunk
            raise SpecError(f"skip_set must contain the top trunk layer {L}")
        if self.scales < 1:
            raise SpecError("scales must be >= 1")
        if self.dsn_weight < 0:
            raise SpecError("dsn_weight must be >= 0")
        if self.head_width < 1:
            raise SpecError("head_width must be >= 1")
        ids = [t.id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise SpecError(f"duplicate task ids in {ids}")
        for t in self.tasks:
            t.validate()


# --------------------------------------------------------------------------
# parameter storage


def _task_shapes(spec: NetworkSpec, task: TaskSpec) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every tensor of one task, in draw order."""
    d1 = task.out_channels if task.head_depth == 1 else spec.head_width
    skip_fan = sum(spec.width(k) for k in spec.skips)
    out = [(f"skip{k}.W", (d1, spec.width(k)), skip_fan) for k in spec.skips]
    out.append(("skip.b", (d1,), 0))
    for j in range(2, task.head_depth + 1):
        dout = task.out_channels if j == task.head_depth else spec.head_width
        out.append((f"head{j}.W", (dout, spec.head_width), spec.head_width))
        out.append((f"head{j}.b", (dout,), 0))
    S, C = spec.scales, task.out_channels
    out.append(("fuse.W", (C, S * C), S * C))
    out.append(("fuse.b", (C,), 0))
    return out


def _trunk_shapes(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...], int]]:
    out = []
    for k in range(1, spec.trunk_depth + 1):
        out.append((f"W{k}", (spec.width(k), spec.width(k - 1)), spec.width(k - 1)))
        out.append((f"b{k}", (spec.width(k),), 0))
    for k in spec.skips:
        if spec.normalized(k):
            out.append((f"bn{k}.gamma", (spec.width(k),), -1))
            out.append((f"bn{k}.beta", (spec.width(k),), 0))
    return out


def group_shapes(spec: NetworkSpec) -> list[list[tuple[str, tuple[int, ...], int]]]:
    return [_trunk_shapes(spec)] + [_task_shapes(spec, t) for t in spec.tasks]


class ParamVector:
    """Flat float64 storage for one parameter group with named views.

    Views alias the flat buffer, so in-place updates through ``flat`` are
    seen by every layer.
    """

    def __init__(self, shapes):
        self.layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        off = 0
        for name, shape, _ in shapes:
            self.layout[name] = (off, shape)
            off += int(np.prod(shape))
        self.flat = np.zeros(off)
        self._views = {n: self.flat[o : o + int(np.prod(s))].reshape(s) for n, (o, s) in self.layout.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def names(self):
        return list(self.layout)

    def __len__(self) -> int:
        return self.flat.size

    def copy(self) -> "ParamVector":
        new = copy.copy(self)
        new.flat = self.flat.copy()
        new._views = {n: new.flat[o : o + int(np.prod(s))].reshape(s) for n, (o, s) in self.layout.items()}
        return new


class Network:
    """Parameters of one network, partitioned into groups.

    Group 0 holds the trunk (linear layers and skip normalization); group
    ``i + 1`` holds everything specific to ``spec.tasks[i]``.
    """

    def __init__(self, spec: NetworkSpec):
        spec.validate()
        self.spec = spec
        self.groups = [ParamVector(s) for s in group_shapes(spec)]

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def trunk(self, name: str) -> np.ndarray:
        return self.groups[0][name]

    def task(self, ti: int, name: str) -> np.ndarray:
        return self.groups[ti + 1][name]

    def num_params(self) -> int:
        return sum(len(g) for g in self.groups)

    def flat(self) -> np.ndarray:
        return np.concatenate([g.flat for g in self.groups])

    def clone(self) -> "Network":
        new = copy.copy(self)
        new.groups = [g.copy() for g in self.groups]
        return new


def build_network(spec: NetworkSpec, rng: np.random.Generator) -> Network:
    """Weights ~ U(-1, 1) * sqrt(3 / fan_in); biases and BN beta 0; BN gamma 1."""
    net = Network(spec)
    for group, shapes in zip(net.groups, group_shapes(spec)):
        for name, shape, fan_in in shapes:
            if fan_in > 0:
                group[name][...] = rng.uniform(-1.0, 1.0, size=shape) * np.sqrt(3.0 / fan_in)
            elif fan_in < 0:
                group[name][...] = 1.0
    return net


def param_count(spec: NetworkSpec) -> int:
    return sum(int(np.prod(s)) for g in group_shapes(spec) for _, s, _ in g)


class GradientSet:
    """Per-group gradient accumulators congruent with a Network."""

    def __init__(self, net: Network):
        self.groups = [ParamVector(s) for s in group_shapes(net.spec)]
        self.task_losses: dict[str, float] = {}
        self.total = 0.0

    def trunk(self, name):
        return self.groups[0][name]

    def task(self, ti, name):
        return self.groups[ti + 1][name]

    def flat(self) -> np.ndarray:
        return np.concatenate([g.flat for g in self.groups])


# --------------------------------------------------------------------------
# pyramid and trunk


def pyramid(x, scales: int) -> list[np.ndarray]:
    levels = [ops.as_tensor(x)]
    for _ in range(scales - 1):
        levels.append(ops.avgpool_down2(levels[-1]))
    return levels


def trunk_layer_forward(net: Network, k: int, inp: list[np.ndarray]) -> list[np.ndarray]:
    W, b = net.trunk(f"W{k}"), net.trunk(f"b{k}")
    return [ops.relu_forward(ops.linear_forward(x, W, b)) for x in inp]


def trunk_layer_backward(net, k, inp, out, grad_out, grads: GradientSet, need_input_grad=True):
    W = net.trunk(f"W{k}")
    gin = []
    for x, y, g in zip(inp, out, grad_out):
        # relu output is positive exactly where its pre-activation was
        gpre = ops.relu_backward(y, g)
        gx, gW, gb = ops.linear_backward(x, W, gpre)
        grads.trunk(f"W{k}")[...] += gW
        grads.trunk(f"b{k}")[...] += gb
        gin.append(gx)
    return gin if need_input_grad else None


def trunk_forward(net: Network, x, scale_index: int = 0) -> list[np.ndarray]:
    """Activations f_1..f_L of one pyramid level (``x`` already at that level)."""
    del scale_index  # weights are tied across levels
    acts = []
    cur = [ops.as_tensor(x)]
    for k in range(1, net.spec.trunk_depth + 1):
        cur = trunk_layer_forward(net, k, cur)
        acts.append(cur[0])
    return acts


# --------------------------------------------------------------------------
# skip scores, head layers, fusion


def _skip_features(net: Network, k: int, f: np.ndarray):
    if not net.spec.normalized(k):
        return f, None
    y, mean, var = ops.batchnorm_forward(f, net.trunk(f"bn{k}.gamma"), net.trunk(f"bn{k}.beta"))
    return y, (mean, var)


def skip_score(net: Network, ti: int, activations) -> np.ndarray:
    """Accumulate per-layer partial scores into one buffer.

    ``activations`` maps trunk layer index to its activation at one scale (a
    full ``[f_1..f_L]`` list is accepted too).
    """
    if isinstance(activations, (list, tuple)):
        activations = {k: activations[k - 1] for k in net.spec.skips}
    s = None
    for k in net.spec.skips:
        y, _ = _skip_features(net, k, activations[k])
        part = y @ net.task(ti, f"skip{k}.W").T
        s = part if s is None else s + part
    return s + net.task(ti, "skip.b")


def branch_layer_forward(net, ti: int, j: int, inp) -> list[np.ndarray]:
    """Branch layer ``j`` of task ``ti``. For j == 1 ``inp`` maps tap -> list over scales."""
    depth = net.spec.tasks[ti].head_depth
    if j == 1:
        out = [skip_score(net, ti, {k: inp[k][s] for k in inp}) for s in range(net.spec.scales)]
    else:
        W, b = net.task(ti, f"head{j}.W"), net.task(ti, f"head{j}.b")
        out = [ops.linear_forward(x, W, b) for x in inp]
    if j < depth:
        out = [ops.relu_forward(o) for o in out]
    return out


def branch_layer_backward(net, ti, j, inp, out, grad_out, grads: GradientSet, tap_sink=None):
    """Backward of branch layer ``j``.

    For j > 1 returns the gradient w.r.t. the layer input. For j == 1 the
    per-tap gradients are streamed to ``tap_sink(k, scale, grad)`` one at a
    time (in scale-major, tap-ascending order) and nothing is returned.
    """
    spec = net.spec
    depth = spec.tasks[ti].head_depth
    if j < depth:
        grad_out = [ops.relu_backward(y, g) for y, g in zip(out, grad_out)]
    if j > 1:
        W = net.task(ti, f"head{j}.W")
        gin = []
        for x, g in zip(inp, grad_out):
            gx, gW, gb = ops.linear_backward(x, W, g)
            grads.task(ti, f"head{j}.W")[...] += gW
            grads.task(ti, f"head{j}.b")[...] += gb
            gin.append(gx)
        return gin
    for s, g in enumerate(grad_out):
        grads.task(ti, "skip.b")[...] += g.reshape(-1, g.shape[-1]).sum(axis=0)
        for k in spec.skips:
            f = inp[k][s]
            y, stats = _skip_features(net, k, f)
            W = net.task(ti, f"skip{k}.W")
            gy, gW, _ = ops.linear_backward(y, W, g)
            grads.task(ti, f"skip{k}.W")[...] += gW
            if stats is not None:
                gf, ggam, gbet = ops.batchnorm_backward(f, net.trunk(f"bn{k}.gamma"), stats[0], stats[1], ops.BN_EPS, gy)
                grads.trunk(f"bn{k}.gamma")[...] += ggam
                grads.trunk(f"bn{k}.beta")[...] += gbet
            else:
                gf = gy
            if tap_sink is not None:
                tap_sink(k, s, gf)
    return None


def _align(x: np.ndarray, s: int, hw: tuple[int, int]) -> np.ndarray:
    up = ops.nearest_up(x, 2**s)
    if up.shape[0] < hw[0] or up.shape[1] < hw[1]:
        raise ops.DimensionError(f"scale {s} map {up.shape[:2]} smaller than target {hw}")
    return up[: hw[0], : hw[1]]


def scale_fuse(net: Network, ti: int, per_scale_scores: list[np.ndarray]) -> np.ndarray:
    """Linear map over the channel-concatenation of already aligned score maps."""
    shapes = {m.shape for m in per_scale_scores}
    if len(shapes) != 1:
        raise ops.DimensionError(f"per-scale maps disagree in shape: {sorted(shapes)}")
    cat = np.concatenate(per_scale_scores, axis=-1)
    return ops.linear_forward(cat, net.task(ti, "fuse.W"), net.task(ti, "fuse.b"))


@dataclass
class TaskOutput:
    scale_maps: list[np.ndarray]
    fused_map: np.ndarray
    scale_losses: list[float]
    fused_loss: float
    total: float = 0.0  # fused + dsn-weighted per-scale, before gamma
    weighted: float = 0.0  # gamma * total
    extra: dict = field(default_factory=dict)


def _map_loss(task: TaskSpec, m: np.ndarray, truth):
    kind = task.loss_kind
    if kind == "softmax":
        return ops.softmax_xent_loss(m, truth)
    if kind == "weighted_xent":
        return ops.weighted_xent_loss(m, truth, task.w_pos, task.w_neg)
    if kind == "smooth_l1":
        return ops.smooth_l1_loss(m, truth)
    u, valid = ops.l2_normalize_forward(m)
    if not valid.any():
        # every predicted normal is degenerate: nothing to penalize
        return 0.0, np.zeros_like(m)
    loss, gu = ops.smooth_l1_loss(u, truth, mask=valid[..., None])
    return loss, ops.l2_normalize_backward(m, gu)


def loss_node(net: Network, ti: int, top: list[np.ndarray], truth, hw, want_grad=True):
    """Fusion, stride subsampling and all losses of one task, evaluated atomically.

    Returns ``(TaskOutput, grad_top)``; gradients already carry gamma and
    the deep-supervision weight. ``grad_top`` is None unless ``want_grad``.
    Fusion parameter gradients are written into ``want_grad`` when it is a
    GradientSet.
    """
    spec = net.spec
    task = spec.tasks[ti]
    st = task.output_stride
    aligned = [_align(x, s, hw) for s, x in enumerate(top)]
    fused = scale_fuse(net, ti, aligned)
    maps = [a[::st, ::st] for a in aligned]
    fmap = fused[::st, ::st]
    f_loss, f_grad = _map_loss(task, fmap, truth)
    s_losses, s_grads = [], []
    for m in maps:
        l, g = _map_loss(task, m, truth)
        s_losses.append(l)
        s_grads.append(g)
    total = f_loss + spec.dsn_weight * sum(s_losses)
    out = TaskOutput(maps, fmap, s_losses, f_loss, total, task.gamma * total)
    if not want_grad:
        return out, None
    grads = want_grad if isinstance(want_grad, GradientSet) else None
    C = task.out_channels
    gfused = np.zeros_like(fused)
    gfused[::st, ::st] = task.gamma * f_grad
    gcat, gW, gb = ops.linear_backward(np.concatenate(aligned, axis=-1), net.task(ti, "fuse.W"), gfused)
    if grads is not None:
        grads.task(ti, "fuse.W")[...] += gW
        grads.task(ti, "fuse.b")[...] += gb
    gtop = []
    for s, (x, g) in enumerate(zip(top, s_grads)):
        ga = gcat[..., s * C : (s + 1) * C].copy()
        ga[::st, ::st] += (task.gamma * spec.dsn_weight) * g
        gtop.append(ops.nearest_up_backward(ga, 2**s, x.shape))
    return out, gtop


# --------------------------------------------------------------------------
# whole-network evaluation (no memory accounting)


def active_tasks(net: Network, sample) -> list[int]:
    """Indices of tasks whose annotation flag is set, in spec order."""
    out = []
    for i, t in enumerate(net.spec.tasks):
        if sample.delta.get(t.id, 0):
            if sample.truths.get(t.id) is None:
                raise DataError(f"task {t.id!r} flagged as annotated but has no ground truth")
            out.append(i)
    return out


def network_loss(net: Network, sample) -> tuple[float, dict[str, TaskOutput]]:
    """Gamma-weighted sum of per-task losses; unannotated heads are not run."""
    spec = net.spec
    tasks = active_tasks(net, sample)
    if not tasks:
        return 0.0, {}
    pyr = pyramid(sample.input, spec.scales)
    hw = pyr[0].shape[:2]
    acts = {}
    cur = pyr
    for k in range(1, spec.trunk_depth + 1):
        cur = trunk_layer_forward(net, k, cur)
        if k in spec.skip_set:
            acts[k] = cur
    total = 0.0
    per_task = {}
    for ti in tasks:
        t = spec.tasks[ti]
        h = acts
        for j in range(1, t.head_depth + 1):
            h = branch_layer_forward(net, ti, j, h)
        out, _ = loss_node(net, ti, h, sample.truths[t.id], hw, want_grad=False)
        per_task[t.id] = out
        total += out.weighted
    return total, per_task
