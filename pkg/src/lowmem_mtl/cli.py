"""Command-line entry point: ``lowmem-mtl {train,gradcheck,memplan,compare}``.

Exit codes: 0 ok, 1 a check or internal assertion failed, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import config as cf
from . import data as dt
from . import gradcheck as gc
from . import network as nw
from . import optim as op

SEED_ENV = "LOWMEM_MTL_SEED"
CSV_SCHEMA_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
EQUIVALENCE_TOL = 1e-12


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def resolve_seed(cli_seed: int | None, config_seed: int) -> int:
    """``--seed`` beats the environment variable, which beats the config file."""
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    return config_seed


def load_run_config(path, cli_seed=None) -> cf.ExperimentConfig:
    cfg = cf.load_config(path)
    seed = resolve_seed(cli_seed, cfg.seed)
    if seed != cfg.seed:
        cfg = cf.parse_config({**cfg.model_dump(mode="json"), "seed": seed})
    return cfg


def write_csv(path: Path, columns: list[str], rows: list[dict], digest: str) -> None:
    buf = io.StringIO()
    buf.write(f"# schema_version={CSV_SCHEMA_VERSION} config_sha256={digest}\n")
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    path.write_bytes(buf.getvalue().encode())


def read_csv(path) -> tuple[str, list[dict]]:
    """Header comment and rows of a CSV written by :func:`write_csv`."""
    lines = Path(path).read_text().splitlines()
    return lines[0], list(csv.DictReader(lines[1:]))


def build_run(cfg: cf.ExperimentConfig, base_dir: Path | None = None):
    spec = cfg.network.spec()
    net = nw.build_network(spec, cf.rng_for(cfg.seed, cf.NET_RNG))
    union = dt.union_build(cf.build_manifests(cfg, base_dir))
    missing = set(union.tasks) - {t.id for t in spec.tasks}
    if missing:
        raise dt.SchemaError(f"manifests annotate tasks missing from the network: {sorted(missing)}")
    return net, union


def stream_for(cfg: cf.ExperimentConfig, union: dt.UnionDataset):
    return dt.epoch_stream(union, cf.rng_for(cfg.seed, cf.STREAM_RNG))


def evaluate(net: nw.Network, evals: dict[str, list[dt.Sample]]) -> dict[str, float]:
    """Mean fused loss per task over its held-out samples (gamma not applied)."""
    return {t: float(np.mean([nw.network_loss(net, s)[1][t].fused_loss for s in ss])) for t, ss in evals.items()}


def save_params(net: nw.Network, path: Path) -> None:
    arrays = {}
    for name in net.groups[0].names():
        arrays[f"trunk/{name}"] = net.trunk(name)
    for ti, t in enumerate(net.spec.tasks):
        for name in net.groups[ti + 1].names():
            arrays[f"{t.id}/{name}"] = net.task(ti, name)
    np.savez(path, **arrays)


def format_table(columns: list[str], rows: list[list]) -> str:
    cells = [columns] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    out = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    out.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(out)


# --------------------------------------------------------------------------
# train


def run_train(cfg: cf.ExperimentConfig, out: Path, base_dir: Path | None = None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    net, union = build_run(cfg, base_dir)
    evals = cf.eval_sets(cfg)
    before = evaluate(net, evals)
    ledger = ck.MemoryLedger()
    executor = ck.Executor(cfg.executor, ledger)
    traj = op.async_sgd_run(net, stream_for(cfg, union), cfg.optimizer.build(), executor)
    after = evaluate(net, evals)

    write_csv(out / "trajectory.csv", traj.columns(), traj.rows, cfg.digest())
    save_params(net, out / "params.npz")
    sched = executor.schedule(net)
    summary = {
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "executor": cfg.executor,
        "samples_seen": traj.samples_seen,
        "update_counts": dict(zip(["trunk"] + traj.task_ids, traj.update_counts)),
        "annotated_seen": traj.annotated_seen,
        "tasks": {
            t: {"initial_fused_loss": before[t], "final_fused_loss": after[t], "ratio": after[t] / before[t]}
            for t in traj.task_ids
        },
        "ledger": {
            "peak_slots": ledger.peak_slots,
            "predicted_peak_slots": sched.predicted_peak_slots,
            "recompute_count": ledger.recompute_count,
            "branch_executions": {t: ledger.branch_executions.get(t, 0) for t in traj.task_ids},
        },
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    out = Path(args.out or cfg.output_dir)
    s = run_train(cfg, out, Path(args.config).parent)
    rows = [[t, f"{v['initial_fused_loss']:.4f}", f"{v['final_fused_loss']:.4f}", f"{v['ratio']:.3f}"] for t, v in s["tasks"].items()]
    print(format_table(["task", "initial", "final", "ratio"], rows))
    led = s["ledger"]
    print(f"peak slots {led['peak_slots']} (predicted {led['predicted_peak_slots']}), artifacts in {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    rep = gc.run_gradcheck(seed=args.seed if args.seed is not None else resolve_seed(None, 0), trials=args.trials, net_params=args.net_params)
    print("\n".join(rep.lines()))
    if not rep.ok:
        for k in rep.failures:
            print(
                f"FAIL {k}: instance seed {rep.worst_seed[k]}, rel err {rep.worst[k]:.3e} >= {rep.tolerance[k]:.0e}",
                file=sys.stderr,
            )
        return EXIT_FAIL
    return EXIT_OK


# --------------------------------------------------------------------------
# memplan


def memplan_spec(L_C: int, L_T: int, T: int, width: int = 4, skips=None) -> nw.NetworkSpec:
    tasks = [nw.TaskSpec(f"t{i}", "softmax", 3, head_depth=L_T) for i in range(T)]
    return nw.NetworkSpec(2, [width] * L_C, list(skips or [L_C]), tasks, head_width=width)


def measure_peak(L_C: int, L_T: int, T: int, strategy: str, seed: int = 0, skips=None) -> tuple[int, int]:
    """(predicted, measured) peak slots for one fully annotated sample on a random net."""
    rng = np.random.default_rng([seed, L_C, L_T, T])
    spec = memplan_spec(L_C, L_T, T, skips=skips)
    net = nw.build_network(spec, rng)
    sample = gc.random_sample(spec, rng, hw=(4, 4))
    ledger = ck.MemoryLedger()
    ex = ck.Executor(strategy, ledger)
    ex(net, sample)
    return ex.schedule(net).predicted_peak_slots, ledger.peak_slots


def run_memplan(L_C: int, L_T: int, Ts, strategies, seed: int = 0, skips=None) -> list[dict]:
    rows = []
    for strategy in strategies:
        for T in Ts:
            pred, meas = measure_peak(L_C, L_T, T, strategy, seed, skips)
            ok = meas == pred if strategy == "Vanilla" else meas <= pred
            rows.append({"strategy": strategy, "L_C": L_C, "L_T": L_T, "T": T, "predicted": pred, "measured": meas, "ok": ok})
    return rows


def cmd_memplan(args) -> int:
    if args.Lc < 1 or args.Lt < 1 or any(t < 1 for t in args.T):
        raise UsageError("depths and task counts must be positive")
    bad = [s for s in args.strategies if s not in ck.STRATEGIES]
    if bad:
        raise UsageError(f"unknown strategies {bad}; choose from {list(ck.STRATEGIES)}")
    seed = resolve_seed(args.seed, 0)
    rows = run_memplan(args.Lc, args.Lt, args.T, args.strategies, seed, args.skips)
    cols = ["strategy", "L_C", "L_T", "T", "predicted", "measured", "ok"]
    print(format_table(cols, [[r[c] for c in cols] for r in rows]))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        digest = json.dumps({"Lc": args.Lc, "Lt": args.Lt, "T": args.T, "strategies": args.strategies, "seed": seed})
        write_csv(out / "memplan.csv", cols, rows, hashlib.sha256(digest.encode()).hexdigest())
    return EXIT_OK if all(r["ok"] for r in rows) else EXIT_FAIL


# --------------------------------------------------------------------------
# compare


def equivalence_preconditions(cfg: cf.ExperimentConfig, union: dt.UnionDataset) -> list[str]:
    """Reasons the sync and async trajectories are not expected to coincide (empty: they are)."""
    why = []
    o = cfg.optimizer
    counts = union.annotated_counts()
    partial = [t for t, c in counts.items() if c != len(union)]
    if partial:
        why.append(f"tasks not annotated on every sample: {partial}")
    sizes = {o.trunk_batch, o.sync_batch} | {t.batch_effective for t in cfg.network.tasks}
    if len(sizes) != 1:
        why.append(f"batch sizes differ: trunk {o.trunk_batch}, sync {o.sync_batch}, tasks {[t.batch_effective for t in cfg.network.tasks]}")
    if o.total_iters % o.sync_batch:
        why.append("total_iters is not a multiple of sync_batch")
    return why


def _curves(traj: op.Trajectory, bins: int = 10) -> dict[str, list[float]]:
    obs = [r for r in traj.rows if r["event"] == "observe"]
    out = {}
    for t in traj.task_ids:
        vals = [(r["iter"], r[f"loss_{t}"]) for r in obs if r[f"loss_{t}"] != ""]
        if not vals:
            out[t] = []
            continue
        edges = np.linspace(0, len(obs), bins + 1)
        out[t] = [
            float(np.mean(seg)) if (seg := [v for m, v in vals if lo <= m < hi]) else float("nan")
            for lo, hi in zip(edges[:-1], edges[1:])
        ]
    return out


def run_compare(cfg: cf.ExperimentConfig, out: Path | None = None, base_dir: Path | None = None) -> dict:
    net, union = build_run(cfg, base_dir)
    ocfg = cfg.optimizer.build()
    stream = list(itertools.islice(stream_for(cfg, union), ocfg.total_iters))
    why = equivalence_preconditions(cfg, union)
    sync_net, async_net = net.clone(), net.clone()
    ex = ck.Executor(cfg.executor)
    ts = op.sync_sgd_run(sync_net, stream, ocfg, ex, record_snapshots=True)
    ta = op.async_sgd_run(async_net, stream, ocfg, ex, record_snapshots=True)
    report: dict = {"config_sha256": cfg.digest(), "equivalence_mode": not why, "preconditions_failed": why}
    if not why:
        keys = sorted(ts.snapshots)
        if keys != sorted(ta.snapshots):
            report["max_deviation"] = float("inf")
        else:
            report["max_deviation"] = max(float(np.abs(ts.snapshots[k] - ta.snapshots[k]).max()) for k in keys)
        report["updates_compared"] = len(keys)
        report["pass"] = report["max_deviation"] < EQUIVALENCE_TOL
    else:
        density = {t: c / len(union) for t, c in union.annotated_counts().items()}
        probe = {}
        for t in ts.task_ids:
            if density.get(t, 0) == 0:
                continue
            gs, ga = op.gradient_magnitude_probe(
                net, stream_for(cfg, union), t, cfg.probe.window, cfg.probe.window, cfg.probe.trials, ex,
            )
            probe[t] = {"density": density[t], "g_sync": gs, "g_async": ga, "ratio": gs / ga if ga else float("nan")}
        report.update(
            {
                "sync_curves": _curves(ts),
                "async_curves": _curves(ta),
                "probe": probe,
                "sync_empty_task_updates": ts.empty_task_updates,
                "sync_updates": ts.update_counts,
                "async_updates": dict(zip(["trunk"] + ta.task_ids, ta.update_counts)),
            }
        )
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        write_csv(out / "sync_trajectory.csv", ts.columns(), ts.rows, cfg.digest())
        write_csv(out / "async_trajectory.csv", ta.columns(), ta.rows, cfg.digest())
    return report


def cmd_compare(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    out = Path(args.out) if args.out else Path(cfg.output_dir)
    r = run_compare(cfg, out, Path(args.config).parent)
    if r["equivalence_mode"]:
        status = "PASS" if r["pass"] else "FAIL"
        print(f"{status} sync/async equivalence: max deviation {r['max_deviation']:.3e} over {r['updates_compared']} updates")
        return EXIT_OK if r["pass"] else EXIT_FAIL
    print("equivalence preconditions not met: " + "; ".join(r["preconditions_failed"]))
    rows = [
        [t, f"{p['density']:.3f}", f"{p['ratio']:.3f}", r["sync_empty_task_updates"][t]]
        for t, p in r["probe"].items()
    ]
    print(format_table(["task", "density", "|g_s|/|g_a|", "empty sync updates"], rows))
    for t in r["sync_curves"]:
        fmt = lambda xs: " ".join(f"{x:.3f}" for x in xs)
        print(f"{t:>10} sync : {fmt(r['sync_curves'][t])}")
        print(f"{t:>10} async: {fmt(r['async_curves'][t])}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lowmem-mtl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="experiment JSON file")
        sp.add_argument("--seed", type=int, default=None, help=f"overrides the config seed and ${SEED_ENV}")
        sp.add_argument("--out", default=None, help="output directory")

    common(sub.add_parser("train", help="asynchronous training run"))
    g = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    common(g, config=False)
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--net-params", type=int, default=20)
    m = sub.add_parser("memplan", help="predicted vs measured peak activation slots")
    common(m, config=False)
    m.add_argument("--Lc", type=int, default=6)
    m.add_argument("--Lt", type=int, default=3)
    m.add_argument("--T", type=int, nargs="+", default=[1, 2, 4, 8])
    m.add_argument("--strategies", nargs="+", default=list(ck.STRATEGIES))
    m.add_argument("--skips", type=int, nargs="+", default=None, help="tapped trunk layers (default: last)")
    common(sub.add_parser("compare", help="synchronous vs asynchronous SGD on one stream"))
    return p


COMMANDS = {"train": cmd_train, "gradcheck": cmd_gradcheck, "memplan": cmd_memplan, "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, cf.ConfigError, dt.SchemaError, dt.ManifestParseError, nw.SpecError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except AssertionError as e:
        print(f"assertion failed: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
