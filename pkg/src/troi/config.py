"""Run configuration: one nested JSON document covering every phase."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .loss import LossConfig
from .nn import ModelDims
from .synth import Ellipsoid, SyntheticSubjectSpec
from .trainer import Schedule, Stage1Config, TrainConfig

PHASES = ("gen", "pretrain", "stage1", "stage2", "eval")

# ROI centre offsets for the default subjects, in units of grid/20 voxels
_ROI_OFFSETS = ((0, 0, 0), (1, -1, 0), (-1, 1, 1), (1, 1, -1), (-1, -1, 0))


def default_subjects(count: int = 5, dims=(20, 20, 20), seed: int = 0, **kw) -> list[SyntheticSubjectSpec]:
    """``count`` subjects with one ellipsoidal ROI each, scaled to ``dims``.

    On a 20^3 grid each ROI holds about 500 voxels; other grids scale the
    centre and radii per axis.
    """
    scale = [d / 20.0 for d in dims]
    out = []
    for i in range(count):
        off = _ROI_OFFSETS[i % len(_ROI_OFFSETS)]
        center = tuple(s * (10.0 + o) for s, o in zip(scale, off))
        radii = tuple(s * r for s, r in zip(scale, (5.2, 5.0, 4.5)))
        out.append(SyntheticSubjectSpec(dims=tuple(dims), roi_spec=(Ellipsoid(center, radii),),
                                        seed=100 * seed + i, **kw))
    return out


@dataclass
class PhaseConfig:
    schedule: Schedule = field(default_factory=Schedule)
    batch_size: int = 24
    train_backbone: bool = True


@dataclass
class EvalConfig:
    split: str = "test"
    max_candidates: int = 300
    n_passes: int = 10


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    phases: list[str] = field(default_factory=lambda: list(PHASES))
    subjects: list[SyntheticSubjectSpec] = field(default_factory=default_subjects)
    # index into ``subjects`` of the held-out subject; all others are pretrained on
    target: int = -1
    model: ModelDims = field(default_factory=ModelDims)
    loss: LossConfig = field(default_factory=LossConfig)
    mix_alpha: float = 0.2
    mix_beta: float = 0.2
    pretrain: PhaseConfig = field(default_factory=PhaseConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: PhaseConfig = field(default_factory=PhaseConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        bad = [p for p in self.phases if p not in PHASES]
        if bad:
            raise ValueError(f"unknown phases {bad}; choose from {list(PHASES)}")
        if not self.subjects:
            raise ValueError("config lists no subjects")
        if not -len(self.subjects) <= self.target < len(self.subjects):
            raise ValueError(f"target index {self.target} out of range for {len(self.subjects)} subjects")

    @property
    def target_index(self) -> int:
        return self.target % len(self.subjects)

    @property
    def pretrain_indices(self) -> list[int]:
        return [i for i in range(len(self.subjects)) if i != self.target_index]

    def with_seed(self, seed: int) -> "RunConfig":
        """Re-key the run and every subject generator from one seed."""
        subjects = [dataclasses.replace(s, seed=100 * seed + i) for i, s in enumerate(self.subjects)]
        return dataclasses.replace(self, seed=seed, subjects=subjects)

    def with_layout(self, count: int | None = None, dims=None) -> "RunConfig":
        """Rebuild the default subject layout with another count or grid.

        Sample counts, snr and embedding size are taken from the first subject;
        the last subject becomes the target.
        """
        s0 = self.subjects[0]
        subjects = default_subjects(count or len(self.subjects), dims or s0.dims, self.seed,
                                    embed_dim=s0.embed_dim, snr=s0.snr, n_samples=s0.n_samples, n_test=s0.n_test)
        return dataclasses.replace(self, subjects=subjects, target=-1)

    def train_config(self, phase: str) -> TrainConfig:
        pc = getattr(self, phase)
        return TrainConfig(schedule=pc.schedule, loss=self.loss, batch_size=pc.batch_size, mix_alpha=self.mix_alpha,
                           mix_beta=self.mix_beta, seed=self.seed, dims=self.model,
                           train_backbone=pc.train_backbone)

    def to_dict(self) -> dict:
        return _encode(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return _decode(cls, doc)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ValueError(f"config is not valid JSON: {e}") from None
        return cls.from_dict(doc)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())


def _encode(obj):
    if isinstance(obj, SyntheticSubjectSpec):
        return obj.to_dict()
    if dataclasses.is_dataclass(obj):
        return {f.name: _encode(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    return obj


def _decode(tp, value):
    origin = typing.get_origin(tp)
    if tp is SyntheticSubjectSpec:
        return SyntheticSubjectSpec.from_dict(value)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ValueError(f"section {tp.__name__} must be an object, got {value!r}")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = set(value) - names
        if unknown:
            raise ValueError(f"unknown keys in {tp.__name__}: {sorted(unknown)}")
        return tp(**{k: _decode(hints[k], v) for k, v in value.items()})
    if origin in (list, tuple):
        (inner, *_) = typing.get_args(tp) or (typing.Any,)
        items = [_decode(inner, v) for v in value]
        return items if origin is list else tuple(items)
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        return value
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


__all__ = ["RunConfig", "PhaseConfig", "EvalConfig", "default_subjects", "PHASES"]
