"""Central finite-difference verification of every backward rule.

Each primitive is checked on random instances: the scalar probe
``sum(forward(x) * r)`` is differentiated numerically and compared with the
backward op fed ``grad_y = r``. The whole network is spot-checked on random
parameters against ``network_loss``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ck
from . import network as nw
from . import ops
from .data import Sample

STEP = 1e-5
PRIMITIVE_TOL = 1e-6
NETWORK_TOL = 1e-5

# backward rules under test; tests may swap an entry to inject a fault
BACKWARD = {
    "linear": ops.linear_backward,
    "relu": ops.relu_backward,
    "batchnorm": ops.batchnorm_backward,
    "nearest_up": ops.nearest_up_backward,
    "softmax_xent": lambda logits, labels: ops.softmax_xent_loss(logits, labels)[1],
    "weighted_xent": lambda z, t: ops.weighted_xent_loss(z, t, 0.9, 0.1)[1],
    "smooth_l1": lambda p, t: ops.smooth_l1_loss(p, t)[1],
    "l2_normalize": ops.l2_normalize_backward,
}


def numeric_grad(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def _away(rng, shape, points=(0.0,), margin=1e-3):
    """Random normals kept at least ``margin`` away from the kinks in ``points``."""
    x = rng.standard_normal(shape)
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin) * 2
    return x


def check_linear(rng):
    n, cin, cout = rng.integers(1, 5), rng.integers(1, 6), rng.integers(1, 6)
    x, W, b = rng.standard_normal((n, cin)), rng.standard_normal((cout, cin)), rng.standard_normal(cout)
    r = rng.standard_normal((n, cout))
    f = lambda: float((ops.linear_forward(x, W, b) * r).sum())
    gx, gW, gb = BACKWARD["linear"](x, W, r)
    return max(rel_err(numeric_grad(f, x), gx), rel_err(numeric_grad(f, W), gW), rel_err(numeric_grad(f, b), gb))


def check_relu(rng):
    x = _away(rng, (rng.integers(1, 5), rng.integers(1, 5)))
    r = rng.standard_normal(x.shape)
    f = lambda: float((ops.relu_forward(x) * r).sum())
    return rel_err(numeric_grad(f, x), BACKWARD["relu"](x, r))


def check_batchnorm(rng):
    # two positions saturate the normalized output and leave an x-gradient
    # of order eps, which central differences cannot resolve
    x = rng.standard_normal((rng.integers(2, 5), rng.integers(2, 4), rng.integers(1, 4)))
    gamma, beta = rng.standard_normal(x.shape[-1]), rng.standard_normal(x.shape[-1])
    r = rng.standard_normal(x.shape)
    f = lambda: float((ops.batchnorm_forward(x, gamma, beta)[0] * r).sum())
    _, mean, var = ops.batchnorm_forward(x, gamma, beta)
    gx, gg, gb = BACKWARD["batchnorm"](x, gamma, mean, var, ops.BN_EPS, r)
    return max(rel_err(numeric_grad(f, x), gx), rel_err(numeric_grad(f, gamma), gg), rel_err(numeric_grad(f, beta), gb))


def check_nearest_up(rng):
    x = rng.standard_normal((rng.integers(1, 4), rng.integers(1, 4), 2))
    factor = int(rng.integers(1, 4))
    # crop to an arbitrary extent, as the fusion alignment does
    H, W = x.shape[0] * factor - int(rng.integers(0, factor)), x.shape[1] * factor - int(rng.integers(0, factor))
    r = rng.standard_normal((H, W, 2))
    f = lambda: float((ops.nearest_up(x, factor)[:H, :W] * r).sum())
    return rel_err(numeric_grad(f, x), BACKWARD["nearest_up"](r, factor, x.shape))


def check_softmax_xent(rng):
    K = int(rng.integers(2, 5))
    z = rng.standard_normal((rng.integers(1, 4), rng.integers(1, 4), K))
    labels = rng.integers(0, K, z.shape[:-1])
    f = lambda: ops.softmax_xent_loss(z, labels)[0]
    return rel_err(numeric_grad(f, z), BACKWARD["softmax_xent"](z, labels))


def check_weighted_xent(rng):
    z = 2 * rng.standard_normal((rng.integers(1, 4), rng.integers(1, 4), 1))
    t = (rng.random(z.shape) < 0.3).astype(float)
    f = lambda: ops.weighted_xent_loss(z, t, 0.9, 0.1)[0]
    return rel_err(numeric_grad(f, z), BACKWARD["weighted_xent"](z, t))


def check_smooth_l1(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    d = _away(rng, shape, points=(-1.0, 1.0)) * 1.5
    t = rng.standard_normal(shape)
    p = t + d
    f = lambda: ops.smooth_l1_loss(p, t)[0]
    return rel_err(numeric_grad(f, p), BACKWARD["smooth_l1"](p, t))


def check_l2_normalize(rng):
    v = rng.standard_normal((rng.integers(1, 4), 3)) + 0.1
    r = rng.standard_normal(v.shape)
    f = lambda: float((ops.l2_normalize_forward(v)[0] * r).sum())
    return rel_err(numeric_grad(f, v), BACKWARD["l2_normalize"](v, r))


PRIMITIVES = {
    "linear": check_linear,
    "relu": check_relu,
    "batchnorm": check_batchnorm,
    "nearest_up": check_nearest_up,
    "softmax_xent": check_softmax_xent,
    "weighted_xent": check_weighted_xent,
    "smooth_l1": check_smooth_l1,
    "l2_normalize": check_l2_normalize,
}


# --------------------------------------------------------------------------
# whole network


def random_spec(rng, L_C=None, L_T=None, T=None, scales=None, width=4) -> nw.NetworkSpec:
    """Small random network touching every loss family."""
    L_C = L_C or int(rng.integers(1, 5))
    T = T if T is not None else int(rng.integers(1, 4))
    scales = scales or int(rng.integers(1, 3))
    kinds = [
        ("softmax", 3), ("weighted_xent", 1), ("smooth_l1_on_unit_normals", 3), ("smooth_l1", 2),
    ]
    tasks = []
    for i in range(T):
        kind, oc = kinds[(i + int(rng.integers(0, 4))) % 4]
        depth = L_T or int(rng.integers(1, 4))
        tasks.append(nw.TaskSpec(f"t{i}", kind, oc, gamma=float(rng.uniform(0.5, 2.0)), head_depth=depth))
    skips = sorted({L_C} | {int(k) for k in rng.integers(1, L_C + 1, size=int(rng.integers(0, 3)))})
    return nw.NetworkSpec(
        int(rng.integers(1, 4)), [width] * L_C, skips, tasks, scales=scales, head_width=width,
        last_skip_no_norm=bool(rng.integers(0, 2)),
    )


def random_truth(task: nw.TaskSpec, hw, rng):
    h, w = -(-hw[0] // task.output_stride), -(-hw[1] // task.output_stride)
    if task.loss_kind == "softmax":
        return rng.integers(0, task.out_channels, (h, w))
    if task.loss_kind == "weighted_xent":
        return (rng.random((h, w, 1)) < 0.3).astype(float)
    if task.loss_kind == "smooth_l1":
        return rng.standard_normal((h, w, task.out_channels))
    v = rng.standard_normal((h, w, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_sample(spec: nw.NetworkSpec, rng, hw=(4, 4), density: float = 1.0) -> Sample:
    x = rng.standard_normal(hw + (spec.in_channels,))
    truths, delta = {}, {}
    for t in spec.tasks:
        on = rng.random() < density
        delta[t.id] = int(on)
        if on:
            truths[t.id] = random_truth(t, hw, rng)
    return Sample(x, truths, delta)


def network_spot_check(net: nw.Network, sample, n_params: int, rng, strategy="Vanilla") -> float:
    """Relative error of executor gradients vs central differences on random parameters.

    The error is taken over the vector of sampled entries: several parameters
    (a bias feeding only a normalization, say) have exact gradient zero, and
    a per-entry ratio would just measure roundoff in the loss.
    """
    g = ck.Executor(strategy)(net, sample)
    nums, ans = [], []
    sizes = [len(p) for p in net.groups]
    for _ in range(n_params):
        grp = int(rng.choice(len(sizes), p=np.array(sizes) / sum(sizes)))
        i = int(rng.integers(0, sizes[grp]))
        w = net.groups[grp].flat
        old = w[i]
        w[i] = old + STEP
        fp = nw.network_loss(net, sample)[0]
        w[i] = old - STEP
        fm = nw.network_loss(net, sample)[0]
        w[i] = old
        nums.append((fp - fm) / (2 * STEP))
        ans.append(g.groups[grp].flat[i])
    nums, ans = np.array(nums), np.array(ans)
    return float(np.linalg.norm(nums - ans) / max(np.linalg.norm(nums), np.linalg.norm(ans), 1e-12))


@dataclass
class GradcheckReport:
    worst: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    worst_seed: dict[str, int] = field(default_factory=dict)
    tolerance: dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.worst.items() if not v < self.tolerance[k]]

    @property
    def ok(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = [f"{'check':<16}{'instances':>10}{'worst rel err':>16}{'tol':>10}  status"]
        for k in self.worst:
            status = "PASS" if self.worst[k] < self.tolerance[k] else f"FAIL (instance seed {self.worst_seed[k]})"
            out.append(f"{k:<16}{self.counts[k]:>10}{self.worst[k]:>16.3e}{self.tolerance[k]:>10.0e}  {status}")
        return out


def run_gradcheck(seed: int = 0, trials: int = 100, net_params: int = 20, net_instances: int = 3) -> GradcheckReport:
    rep = GradcheckReport()
    for name, check in PRIMITIVES.items():
        worst, worst_seed = 0.0, -1
        for i in range(trials):
            e = check(np.random.default_rng([seed, i, len(name)]))
            if not e <= worst:
                worst, worst_seed = e, i
        rep.worst[name], rep.counts[name], rep.worst_seed[name] = worst, trials, worst_seed
        rep.tolerance[name] = PRIMITIVE_TOL
    worst, worst_seed, count = 0.0, -1, 0
    for i in range(net_instances):
        rng = np.random.default_rng([seed, 10_000 + i])
        spec = random_spec(rng)
        net = nw.build_network(spec, rng)
        # zero-initialised biases put dead positions exactly on a relu kink
        for grp in net.groups:
            grp.flat += 0.1 * rng.standard_normal(grp.flat.shape)
        sample = random_sample(spec, rng, hw=(5, 4))
        for strategy in ("Vanilla", "MultiTaskSqrt"):
            e = network_spot_check(net, sample, net_params, rng, strategy)
            count += net_params
            if not e <= worst:
                worst, worst_seed = e, 10_000 + i
    rep.worst["network"], rep.counts["network"], rep.worst_seed["network"] = worst, count, worst_seed
    rep.tolerance["network"] = NETWORK_TOL
    return rep
