"""Experiment manifests: one JSON file that fully determines a run.

Every field has a default mirroring the full-scale recipe (9x9 boards,
D=512 4-layer 8-head core, batch 768, 16 cycles, record cycles
2,4,...,14,15); desk-scale runs override through the file or --set
key=value flags. Re-running the same manifest reproduces outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

from .model import AirModel, ModelConfig
from .recurrence import DEFAULT_RECORD_CYCLES, RecurrenceConfig
from .tasks import generate_dataset, vocab_size
from .training import TrainConfig


@dataclass
class TaskConfig:
    kind: str = "sudoku"
    side: int = 9
    givens: int = 17      # sudoku clue count (full-scale dataset value)
    count: int = 1000
    seed: int = 0
    augment: int = 1

    def __post_init__(self):
        if self.kind not in ("sudoku", "maze"):
            raise ValueError(f"unknown task kind {self.kind!r}")


@dataclass
class AnalysisConfig:
    cycles: tuple = DEFAULT_RECORD_CYCLES  # attention capture cycles
    n_puzzles: int = 16                    # puzzles per freeze/attn run
    seeds: tuple = (0, 1, 2, 3, 4)         # directional comparison seeds
    compare: tuple = ((1, 0), (1, 1))      # injection variants compared

    def __post_init__(self):
        self.cycles = tuple(int(c) for c in self.cycles)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.compare = tuple((int(a), int(b)) for a, b in self.compare)


@dataclass
class ExperimentManifest:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    recurrence: RecurrenceConfig = field(default_factory=RecurrenceConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    out_dir: str | None = None

    def to_dict(self) -> dict:
        d = {
            "task": asdict(self.task),
            "model": dict(self.model),
            "recurrence": self.recurrence.to_dict(),
            "train": asdict(self.train),
            "analysis": asdict(self.analysis),
            "out_dir": self.out_dir,
        }
        d["analysis"]["cycles"] = list(self.analysis.cycles)
        d["analysis"]["seeds"] = list(self.analysis.seeds)
        d["analysis"]["compare"] = [list(p) for p in self.analysis.compare]
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def build_model(self, seed: int | None = None) -> AirModel:
        cfg = self.model_config()
        return AirModel(cfg, seed=self.train.seed if seed is None else seed)

    def model_config(self) -> ModelConfig:
        r = self.recurrence
        overrides = dict(self.model)
        overrides.setdefault("vocab_size", vocab_size(self.task.kind, self.task.side))
        overrides.setdefault("level_tokens", r.level_token_mode != "none")
        overrides.setdefault("operator_gate", r.operator_form in ("linear", "nonlinear"))
        overrides.setdefault("untied", not r.tied)
        return ModelConfig(**overrides)

    def dataset(self, count: int | None = None) -> list:
        t = self.task
        return generate_dataset(t.kind, t.side, count or t.count, t.seed,
                                givens=t.givens if t.kind == "sudoku" else None,
                                augment=t.augment)


def _merge_section(cls, defaults: dict, data: dict):
    merged = dict(defaults)
    merged.update(data or {})
    return cls(**merged)


def manifest_from_dict(data: dict) -> ExperimentManifest:
    data = dict(data or {})
    known = {"task", "model", "recurrence", "train", "analysis", "out_dir"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown manifest sections: {sorted(unknown)}")
    rec = dict(data.get("recurrence") or {})
    if "record_cycles" not in rec and data.get("analysis", {}).get("cycles"):
        rec["record_cycles"] = data["analysis"]["cycles"]
    analysis = dict(data.get("analysis") or {})
    if "compare" in analysis:
        analysis["compare"] = tuple(tuple(p) for p in analysis["compare"])
    return ExperimentManifest(
        task=_merge_section(TaskConfig, {}, data.get("task")),
        model=dict(data.get("model") or {}),
        recurrence=_merge_section(RecurrenceConfig, {}, rec),
        train=_merge_section(TrainConfig, {}, data.get("train")),
        analysis=_merge_section(AnalysisConfig, {}, analysis),
        out_dir=data.get("out_dir"),
    )


def load_manifest(path: str | None, overrides: list | None = None) -> ExperimentManifest:
    """Read a manifest file (or start from defaults) and apply --set
    key=value overrides given as dotted paths, e.g. train.steps=500."""
    data = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    for item in overrides or []:
        key, _, raw = item.partition("=")
        if not _:
            raise ValueError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return manifest_from_dict(data)
