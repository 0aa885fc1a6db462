import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from lowmem_mtl import data as dt
from lowmem_mtl import network as nw
from lowmem_mtl import optim as op
from lowmem_mtl.ops import ParameterError


def single(name, task, n, rng, kind="dense_labels", replication=1):
    return dt.synth_generate(kind, n, (4, 4), 2, rng, task_id=task, name=name, replication=replication)


# union -------------------------------------------------------------------


def test_replication_size(rng):
    u = dt.union_build([single("a", "seg", 5, rng, replication=2)])
    assert len(u) == 10


def test_disjoint_manifests_one_bit_each(rng):
    u = dt.union_build([single("a", "seg", 4, rng), single("b", "nrm", 3, rng, kind="unit_normals")])
    assert all(sum(s.delta.values()) == 1 for s in u.items)
    assert set(u.items[0].delta) == {"seg", "nrm"}


def test_conflicting_kinds(rng):
    with pytest.raises(dt.SchemaError):
        dt.union_build([single("a", "x", 2, rng), single("b", "x", 2, rng, kind="unit_normals")])


# full-scale image counts per source dataset, and per task where annotated
DATASET_TABLE = {
    "voc07": (5011, {"det": 5011, "seg": 422}),
    "voc12_train": (5717, {"det": 5717, "seg": 4998, "sbd": 4998, "parts": 1716, "bnd": 4998}),
    "voc12_val": (5823, {"det": 5823, "seg": 5105, "sbd": 5105, "parts": 1817, "bnd": 5105}),
    "nyu": (23024, {"normals": 23024}),
    "msra": (10000, {"sal": 10000}),
    "bsd": (5100, {"bnd": 5100}),
}
KIND = {"det": "unit_normals", "seg": "dense_labels", "sbd": "thin_structure", "parts": "dense_labels",
        "normals": "unit_normals", "sal": "binary_region", "bnd": "thin_structure"}


def test_scaled_dataset_mix_replica():
    rng = np.random.default_rng(0)
    fields = {t: dt.TaskField.draw(k, 2, rng, classes=3) for t, k in KIND.items()}
    manifests = []
    for name, (n, ann) in DATASET_TABLE.items():
        scaled = {t: math.ceil(c / 1000) for t, c in ann.items()}
        rep = 2 if name.startswith("voc") else 1
        manifests.append(
            dt.synth_multi(name, math.ceil(n / 1000), (4, 4), 2, {t: fields[t] for t in ann}, scaled, rng, rep)
        )
    u = dt.union_build(manifests)
    # hand sums: VOC-related datasets counted twice
    assert u.annotated_counts() == {
        "det": 2 * (6 + 6 + 6), "seg": 2 * (1 + 5 + 6), "sbd": 2 * (5 + 6), "parts": 2 * (2 + 2),
        "bnd": 2 * (5 + 6) + 6, "normals": 24, "sal": 10,
    }
    assert len(u) == 2 * 18 + 24 + 10 + 6


# epochs ------------------------------------------------------------------


def test_epoch_exactness(rng):
    u = dt.union_build([single("a", "seg", 5, rng, replication=3), single("b", "seg", 4, rng)])
    E = 4
    seen = Counter(id(s) for s in dt.epoch_stream(u, np.random.default_rng(1), epochs=E))
    for s in u.items:
        rep = 3 if s.dataset == "a" else 1
        assert seen[id(s)] == E * rep
    one = list(dt.epoch_stream(u, np.random.default_rng(1), epochs=1))
    assert sorted(map(id, one)) == sorted(map(id, u.items))


def test_epoch_same_seed(rng):
    u = dt.union_build([single("a", "seg", 7, rng)])
    a = [s.uid for s in dt.epoch_stream(u, np.random.default_rng(9), epochs=2)]
    b = [s.uid for s in dt.epoch_stream(u, np.random.default_rng(9), epochs=2)]
    assert a == b


def test_shuffle_uniformity_chi_square():
    items = [dt.Sample(None, {}, {}, "d", i) for i in range(8)]
    u = dt.UnionDataset({}, items)
    first = Counter(next(iter(dt.epoch_stream(u, np.random.default_rng([3, k]), epochs=1))).uid for k in range(10_000))
    assert stats.chisquare([first[i] for i in range(8)]).pvalue > 1e-3


def test_empty_stream_error():
    with pytest.raises(ParameterError):
        next(dt.epoch_stream(dt.UnionDataset({}, []), np.random.default_rng(0)))


# generators --------------------------------------------------------------


@given(st.integers(0, 2**32 - 1))
def test_generator_contracts(seed):
    r = np.random.default_rng(seed)
    thin = dt.synth_generate("thin_structure", 3, (10, 12), 3, r)
    for s in thin.samples:
        y = s.truths["thin_structure"]
        assert set(np.unique(y)) <= {0.0, 1.0}
        assert 0.02 <= y.mean() <= 0.10
    nrm = dt.synth_generate("unit_normals", 3, (5, 5), 3, r)
    for s in nrm.samples:
        np.testing.assert_allclose(np.linalg.norm(s.truths["unit_normals"], axis=-1), 1, atol=1e-9)
    reg = dt.synth_generate("binary_region", 2, (5, 5), 3, r)
    assert all(set(np.unique(s.truths["binary_region"])) <= {0, 1} for s in reg.samples)


def test_generator_deterministic_and_unknown_kind():
    a = dt.synth_generate("dense_labels", 3, (4, 4), 2, np.random.default_rng(5))
    b = dt.synth_generate("dense_labels", 3, (4, 4), 2, np.random.default_rng(5))
    assert all(np.array_equal(x.input, y.input) and np.array_equal(x.truths["dense_labels"], y.truths["dense_labels"])
               for x, y in zip(a.samples, b.samples))
    with pytest.raises(ParameterError):
        dt.synth_generate("edges", 1, (4, 4), 2, np.random.default_rng(0))


def test_strided_truth_shape():
    fld = dt.TaskField.draw("unit_normals", 2, np.random.default_rng(0), stride=8)
    assert fld.truth(np.ones((17, 9, 2))).shape == (3, 2, 3)


def test_dense_labels_learnable():
    r = np.random.default_rng([0, 0])
    fld = dt.TaskField.draw("dense_labels", 4, r, classes=4)
    train = dt.synth_generate("dense_labels", 40, (8, 8), 4, r, task_id="seg", fld=fld)
    held = dt.synth_generate("dense_labels", 16, (8, 8), 4, r, task_id="seg", fld=fld).samples
    spec = nw.NetworkSpec(4, [16, 16], [1, 2], [nw.TaskSpec("seg", "softmax", 4, gamma=10.0, batch_effective=2)])
    net = nw.build_network(spec, r)
    loss = lambda: np.mean([nw.network_loss(net, s)[1]["seg"].fused_loss for s in held])
    before = loss()
    cfg = op.OptimizerConfig(total_iters=500, decay_at_iter=400, trunk_batch=10)
    op.async_sgd_run(net, dt.epoch_stream(dt.union_build([train]), r), cfg, log_rows=False)
    assert loss() <= 0.5 * before


# manifests ---------------------------------------------------------------


def same_manifest(a, b):
    assert (a.name, a.tasks, a.replication, len(a)) == (b.name, b.tasks, b.replication, len(b))
    for x, y in zip(a.samples, b.samples):
        assert x.delta == y.delta and x.uid == y.uid and x.dataset == y.dataset
        assert np.array_equal(x.input, y.input)
        assert x.truths.keys() == y.truths.keys()
        for t in x.truths:
            assert np.array_equal(x.truths[t], y.truths[t]) and x.truths[t].dtype.kind == y.truths[t].dtype.kind


def test_manifest_round_trip(tmp_path):
    r = np.random.default_rng(0)
    fields = {"seg": dt.TaskField.draw("dense_labels", 2, r), "nrm": dt.TaskField.draw("unit_normals", 2, r)}
    m = dt.synth_multi("mix", 6, (3, 4), 2, fields, {"seg": 4, "nrm": 2}, r, replication=2)
    dt.save_manifest(m, tmp_path / "m.jsonl")
    same_manifest(m, dt.load_manifest(tmp_path / "m.jsonl"))


def write_lines(path, lines):
    path.write_text("\n".join(json.dumps(x) if not isinstance(x, str) else x for x in lines) + "\n")


HEADER = {"schema_version": 1, "name": "d", "tasks": {"seg": "dense_labels"}}
REC = {"delta": {"seg": 1}, "input": {"shape": [1, 1, 1], "data": [0.5]}, "truths": {"seg": {"shape": [1, 1], "dtype": "int", "data": [0]}}}


def test_replication_defaults_to_one(tmp_path):
    write_lines(tmp_path / "m.jsonl", [HEADER, REC])
    assert dt.load_manifest(tmp_path / "m.jsonl").replication == 1


def test_delta_inconsistency_is_schema_error(tmp_path):
    write_lines(tmp_path / "m.jsonl", [HEADER, {**REC, "delta": {"seg": 0}}])
    with pytest.raises(dt.SchemaError):
        dt.load_manifest(tmp_path / "m.jsonl")


@pytest.mark.parametrize(
    "lines,line,field",
    [
        ([HEADER, "{not json"], 2, "record"),
        ([HEADER, {"delta": {"seg": 1}}], 2, "input"),
        ([HEADER, REC, {**REC, "input": {"shape": [2, 2, 1], "data": [1.0]}}], 3, "input"),
        ([{**HEADER, "schema_version": 9}], 1, "schema_version"),
    ],
)
def test_malformed_manifest(tmp_path, lines, line, field):
    write_lines(tmp_path / "m.jsonl", lines)
    with pytest.raises(dt.ManifestParseError) as e:
        dt.load_manifest(tmp_path / "m.jsonl")
    assert e.value.line == line and e.value.field == field


def test_npy_input_reference(tmp_path):
    x = np.arange(6.0).reshape(1, 2, 3)
    np.save(tmp_path / "x.npy", x)
    write_lines(tmp_path / "m.jsonl", [HEADER, {**REC, "input": {"path": "x.npy"}, "truths": {"seg": {"shape": [1, 2], "dtype": "int", "data": [0, 1]}}}])
    assert np.array_equal(dt.load_manifest(tmp_path / "m.jsonl").samples[0].input, x)


@given(st.dictionaries(st.sampled_from("abc"), st.booleans(), min_size=1))
def test_delta_truth_consistency(flags):
    truths = {t: np.zeros(1) for t, on in flags.items() if on}
    dt.Sample(None, truths, {t: int(on) for t, on in flags.items()}).check()
    if any(not on for on in flags.values()):
        t = next(t for t, on in flags.items() if not on)
        with pytest.raises(dt.SchemaError):
            dt.Sample(None, {**truths, t: np.zeros(1)}, {t: int(on) for t, on in flags.items()}).check()
