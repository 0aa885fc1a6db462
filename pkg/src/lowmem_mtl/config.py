"""Experiment configuration: one strict JSON document per run.

Unknown keys are rejected so a misspelled hyperparameter fails loudly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import data as dt
from . import network as nw
from .optim import OptimizerConfig

DEFAULT_GENERATOR = {
    "softmax": "dense_labels",
    "weighted_xent": "thin_structure",
    "smooth_l1_on_unit_normals": "unit_normals",
    "smooth_l1": "unit_normals",
}


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TaskCfg(_Strict):
    id: str
    loss_kind: Literal["softmax", "weighted_xent", "smooth_l1_on_unit_normals", "smooth_l1"]
    out_channels: int = Field(ge=1)
    gamma: float = Field(1.0, gt=0)
    batch_effective: int = Field(10, ge=1)
    head_depth: int = Field(1, ge=1)
    output_stride: Literal[1, 8] = 1
    w_pos: float = Field(0.9, ge=0, le=1)
    w_neg: float = Field(0.1, ge=0, le=1)
    generator: Optional[Literal["dense_labels", "unit_normals", "thin_structure", "binary_region"]] = None

    def spec(self) -> nw.TaskSpec:
        return nw.TaskSpec(
            self.id, self.loss_kind, self.out_channels, self.gamma, self.batch_effective,
            self.head_depth, self.output_stride, self.w_pos, self.w_neg,
        )

    @property
    def generator_kind(self) -> str:
        return self.generator or DEFAULT_GENERATOR[self.loss_kind]


class NetworkCfg(_Strict):
    in_channels: int = Field(ge=1)
    trunk_widths: list[int] = Field(min_length=1)
    skip_set: list[int] = Field(min_length=1)
    scales: int = Field(1, ge=1)
    dsn_weight: float = Field(1.0, ge=0)
    head_width: int = Field(8, ge=1)
    last_skip_no_norm: bool = False
    tasks: list[TaskCfg] = Field(min_length=1)

    def spec(self) -> nw.NetworkSpec:
        s = nw.NetworkSpec(
            self.in_channels, list(self.trunk_widths), list(self.skip_set), [t.spec() for t in self.tasks],
            self.scales, self.dsn_weight, self.head_width, self.last_skip_no_norm,
        )
        try:
            s.validate()
        except nw.SpecError as e:
            raise ConfigError(f"network: {e}") from None
        return s


class OptimCfg(_Strict):
    base_lr: float = Field(0.001, gt=0)
    decay_factor: float = Field(0.1, gt=0)
    decay_at_iter: int = Field(3000, ge=0)
    total_iters: int = Field(500, ge=1)
    weight_decay: float = Field(0.0005, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    trunk_batch: int = Field(30, ge=1)
    sync_batch: int = Field(10, ge=1)

    def build(self) -> OptimizerConfig:
        return OptimizerConfig(**self.model_dump())


class DatasetCfg(_Strict):
    name: str
    n: Optional[int] = Field(None, ge=1)
    path: Optional[str] = None
    replication: int = Field(1, ge=1)
    # task id -> number of annotated samples; null means all n
    tasks: dict[str, Optional[int]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _source(self):
        if (self.n is None) == (self.path is None):
            raise ValueError("exactly one of 'n' (synthetic) or 'path' (manifest file) is required")
        if self.n is not None and not self.tasks:
            raise ValueError("synthetic datasets must list the tasks they annotate")
        return self


class DataCfg(_Strict):
    grid: tuple[int, int] = (16, 16)
    datasets: list[DatasetCfg] = Field(min_length=1)
    eval_samples: int = Field(16, ge=1)


class ProbeCfg(_Strict):
    trials: int = Field(500, ge=1)
    window: int = Field(40, ge=1)


class ExperimentConfig(_Strict):
    seed: int = 0
    network: NetworkCfg
    optimizer: OptimCfg = OptimCfg()
    data: DataCfg
    executor: Literal["Vanilla", "SqrtChain", "MultiTaskSqrt"] = "MultiTaskSqrt"
    output_dir: str = "runs/default"
    probe: ProbeCfg = ProbeCfg()

    @model_validator(mode="after")
    def _tasks_known(self):
        ids = {t.id for t in self.network.tasks}
        for d in self.data.datasets:
            unknown = set(d.tasks) - ids
            if unknown:
                raise ValueError(f"dataset {d.name!r} annotates unknown tasks {sorted(unknown)}")
        return self

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from None
    return parse_config(raw)


def parse_config(raw: dict) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        lines = []
        for err in e.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            lines.append(f"{loc}: {err['msg']}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines)) from None
    cfg.network.spec()
    return cfg


# --------------------------------------------------------------------------
# materialization. Each consumer draws from its own seeded stream.


def rng_for(seed: int, purpose: int, *more: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, *more])


NET_RNG, FIELD_RNG, DATA_RNG, STREAM_RNG, EVAL_RNG, PROBE_RNG = range(6)


def task_fields(cfg: ExperimentConfig) -> dict[str, dt.TaskField]:
    out = {}
    for i, t in enumerate(cfg.network.tasks):
        out[t.id] = dt.TaskField.draw(
            t.generator_kind, cfg.network.in_channels, rng_for(cfg.seed, FIELD_RNG, i),
            classes=t.out_channels, stride=t.output_stride,
        )
    return out


def build_manifests(cfg: ExperimentConfig, base_dir: Path | None = None) -> list[dt.DatasetManifest]:
    fields = task_fields(cfg)
    out = []
    for i, d in enumerate(cfg.data.datasets):
        if d.path is not None:
            p = Path(d.path)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            m = dt.load_manifest(p)
            m.replication = d.replication
        else:
            counts = {t: (d.n if c is None else c) for t, c in d.tasks.items()}
            m = dt.synth_multi(
                d.name, d.n, tuple(cfg.data.grid), cfg.network.in_channels,
                {t: fields[t] for t in d.tasks}, counts, rng_for(cfg.seed, DATA_RNG, i), d.replication,
            )
        out.append(m)
    return out


def eval_sets(cfg: ExperimentConfig) -> dict[str, list[dt.Sample]]:
    """Fresh single-task samples per task, drawn from the same hidden fields."""
    fields = task_fields(cfg)
    out = {}
    for i, t in enumerate(cfg.network.tasks):
        r = rng_for(cfg.seed, EVAL_RNG, i)
        xs = [r.standard_normal(tuple(cfg.data.grid) + (cfg.network.in_channels,)) for _ in range(cfg.data.eval_samples)]
        out[t.id] = [dt.Sample(x, {t.id: fields[t.id].truth(x)}, {t.id: 1}, "eval", j) for j, x in enumerate(xs)]
    return out
