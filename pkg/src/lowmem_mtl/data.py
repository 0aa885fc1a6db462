"""Diversely annotated training data.

A ``DatasetManifest`` is one source dataset: a list of samples, the tasks
it can carry ground truth for, and a replication factor. ``union_build``
concatenates manifests (repeating each ``replication`` times) and
``epoch_stream`` shuffles the union without replacement, epoch by epoch.

Synthetic generators stand in for real datasets. Ground truth is a fixed
function of a hidden random linear field over each input position, so a
position-wise network can learn it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .ops import ParameterError

SCHEMA_VERSION = 1
SYNTH_KINDS = ("dense_labels", "unit_normals", "thin_structure", "binary_region")
THIN_POSITIVE_RATE = 0.06


class SchemaError(ValueError):
    """Manifests or samples disagree about which tasks exist or are annotated."""


class ManifestParseError(ValueError):
    def __init__(self, path, line: int, field_name: str, msg: str):
        super().__init__(f"{path}:{line}: field {field_name!r}: {msg}")
        self.line = line
        self.field = field_name


@dataclass
class Sample:
    input: np.ndarray
    truths: dict[str, np.ndarray]
    delta: dict[str, int]
    dataset: str = ""
    uid: int = -1

    def check(self) -> None:
        for t, d in self.delta.items():
            has = self.truths.get(t) is not None
            if bool(d) != has:
                raise SchemaError(f"sample {self.uid} of {self.dataset!r}: delta[{t}]={d} but truth present={has}")
        for t in self.truths:
            if t not in self.delta:
                raise SchemaError(f"sample {self.uid}: truth for undeclared task {t!r}")


@dataclass
class DatasetManifest:
    name: str
    tasks: dict[str, str]  # task id -> ground-truth kind
    samples: list[Sample] = field(default_factory=list)
    replication: int = 1

    @property
    def flags(self) -> dict[str, bool]:
        return {t: any(s.delta.get(t, 0) for s in self.samples) for t in self.tasks}

    def validate(self) -> None:
        if self.replication < 1:
            raise SchemaError(f"{self.name}: replication must be >= 1")
        for s in self.samples:
            s.check()
            extra = set(s.delta) - set(self.tasks)
            if extra:
                raise SchemaError(f"{self.name}: sample {s.uid} flags undeclared tasks {sorted(extra)}")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class UnionDataset:
    tasks: dict[str, str]
    items: list[Sample]

    def __len__(self) -> int:
        return len(self.items)

    def annotated_counts(self) -> dict[str, int]:
        return {t: sum(1 for s in self.items if s.delta.get(t, 0)) for t in self.tasks}


def union_build(manifests: list[DatasetManifest]) -> UnionDataset:
    tasks: dict[str, str] = {}
    for m in manifests:
        m.validate()
        for t, kind in m.tasks.items():
            if tasks.setdefault(t, kind) != kind:
                raise SchemaError(f"task {t!r} is {tasks[t]!r} elsewhere but {kind!r} in {m.name!r}")
    items = []
    uid = 0
    for m in manifests:
        for s in m.samples:
            # widen every sample's flags to the union's task list
            full = Sample(s.input, dict(s.truths), {t: int(s.delta.get(t, 0)) for t in tasks}, m.name, uid)
            uid += 1
            items.extend([full] * m.replication)
    return UnionDataset(tasks, items)


def epoch_stream(dataset: UnionDataset, rng: np.random.Generator, epochs: int | None = None) -> Iterator[Sample]:
    """Uniform permutation of the whole union per epoch; infinite if ``epochs`` is None."""
    n = len(dataset)
    if n == 0:
        raise ParameterError("cannot stream an empty dataset")
    e = 0
    while epochs is None or e < epochs:
        for i in rng.permutation(n):
            yield dataset.items[i]
        e += 1


# --------------------------------------------------------------------------
# synthetic ground truth


@dataclass
class TaskField:
    """Hidden linear map from input channels to the generator's latent field."""

    kind: str
    matrix: np.ndarray  # [channels, latent]
    stride: int = 1

    @classmethod
    def draw(cls, kind: str, channels: int, rng: np.random.Generator, classes: int = 4, stride: int = 1):
        if kind not in SYNTH_KINDS:
            raise ParameterError(f"unknown generator kind {kind!r}")
        latent = {"dense_labels": classes, "unit_normals": 3}.get(kind, 1)
        return cls(kind, rng.standard_normal((channels, latent)), stride)

    def truth(self, x: np.ndarray) -> np.ndarray:
        z = x[:: self.stride, :: self.stride] @ self.matrix
        if self.kind == "dense_labels":
            return np.argmax(z, axis=-1).astype(np.int64)
        if self.kind == "binary_region":
            return (z[..., 0] > 0).astype(np.int64)
        if self.kind == "unit_normals":
            n = np.sqrt((z * z).sum(axis=-1, keepdims=True))
            return z / np.maximum(n, 1e-300)
        # thin_structure: the highest few percent of the field per sample
        flat = z[..., 0].ravel()
        if flat.size < 10:
            raise ParameterError("thin_structure needs at least 10 output positions")
        k = max(1, int(round(THIN_POSITIVE_RATE * flat.size)))
        out = np.zeros(flat.size)
        out[np.argsort(-flat, kind="stable")[:k]] = 1.0
        return out.reshape(z.shape)


def synth_generate(
    kind: str,
    n: int,
    grid: tuple[int, int],
    channels: int,
    rng: np.random.Generator,
    task_id: str | None = None,
    name: str | None = None,
    classes: int = 4,
    stride: int = 1,
    fld: TaskField | None = None,
    replication: int = 1,
) -> DatasetManifest:
    """Single-task synthetic dataset. Pass ``fld`` to share a hidden field across datasets."""
    if kind not in SYNTH_KINDS:
        raise ParameterError(f"unknown generator kind {kind!r}")
    task_id = task_id or kind
    if fld is None:
        fld = TaskField.draw(kind, channels, rng, classes, stride)
    H, W = grid
    samples = []
    for i in range(n):
        x = rng.standard_normal((H, W, channels))
        samples.append(Sample(x, {task_id: fld.truth(x)}, {task_id: 1}, name or task_id, i))
    return DatasetManifest(name or task_id, {task_id: kind}, samples, replication)


def synth_multi(
    name: str,
    n: int,
    grid: tuple[int, int],
    channels: int,
    fields: dict[str, TaskField],
    counts: dict[str, int],
    rng: np.random.Generator,
    replication: int = 1,
) -> DatasetManifest:
    """Dataset whose first ``counts[t]`` samples carry ground truth for task ``t``."""
    H, W = grid
    samples = []
    for i in range(n):
        x = rng.standard_normal((H, W, channels))
        truths, delta = {}, {}
        for t, fld in fields.items():
            on = i < counts.get(t, 0)
            delta[t] = int(on)
            if on:
                truths[t] = fld.truth(x)
        samples.append(Sample(x, truths, delta, name, i))
    return DatasetManifest(name, {t: f.kind for t, f in fields.items()}, samples, replication)


# --------------------------------------------------------------------------
# JSON-lines manifest files


def _enc(a: np.ndarray) -> dict:
    a = np.asarray(a)
    dtype = "int" if np.issubdtype(a.dtype, np.integer) else "float"
    return {"shape": list(a.shape), "dtype": dtype, "data": a.ravel().tolist()}


def _dec(obj, path, line, fname, base: Path) -> np.ndarray:
    if not isinstance(obj, dict):
        raise ManifestParseError(path, line, fname, "expected an object")
    if "path" in obj:
        try:
            return np.load(base / obj["path"])
        except OSError as e:
            raise ManifestParseError(path, line, fname, f"cannot read {obj['path']}: {e}") from None
    try:
        shape = [int(d) for d in obj["shape"]]
        dtype = np.int64 if obj.get("dtype", "float") == "int" else np.float64
        arr = np.asarray(obj["data"], dtype=dtype)
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestParseError(path, line, fname, f"bad tensor record ({e})") from None
    if arr.size != int(np.prod(shape)):
        raise ManifestParseError(path, line, fname, f"data length {arr.size} != prod(shape {shape})")
    return arr.reshape(shape)


def save_manifest(m: DatasetManifest, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        header = {"schema_version": SCHEMA_VERSION, "name": m.name, "tasks": m.tasks, "replication": m.replication}
        fh.write(json.dumps(header) + "\n")
        for s in m.samples:
            rec = {
                "dataset": s.dataset,
                "uid": s.uid,
                "delta": {t: int(s.delta.get(t, 0)) for t in m.tasks},
                "input": _enc(s.input),
                "truths": {t: _enc(v) for t, v in s.truths.items() if v is not None},
            }
            fh.write(json.dumps(rec) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ManifestParseError(path, 1, "schema_version", "empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ManifestParseError(path, 1, "header", str(e)) from None
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ManifestParseError(path, 1, "schema_version", f"unsupported {header.get('schema_version')!r}")
    for key in ("name", "tasks"):
        if key not in header:
            raise ManifestParseError(path, 1, key, "missing")
    tasks = dict(header["tasks"])
    m = DatasetManifest(header["name"], tasks, [], int(header.get("replication", 1)))
    for ln, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as e:
            raise ManifestParseError(path, ln, "record", str(e)) from None
        for key in ("input", "delta"):
            if key not in rec:
                raise ManifestParseError(path, ln, key, "missing")
        x = _dec(rec["input"], path, ln, "input", path.parent)
        truths = {t: _dec(v, path, ln, f"truths.{t}", path.parent) for t, v in rec.get("truths", {}).items()}
        delta = {t: int(v) for t, v in rec["delta"].items()}
        s = Sample(x, truths, delta, rec.get("dataset", m.name), int(rec.get("uid", ln - 2)))
        try:
            s.check()
        except SchemaError as e:
            raise SchemaError(f"{path}:{ln}: {e}") from None
        m.samples.append(s)
    m.validate()
    return m
