"""Pipeline configuration stored as ``section.key = value`` lines.

``#`` starts a comment. Every field has a default, unknown keys are
rejected, and :meth:`PipelineConfig.to_text` output parses back to an equal
object.
"""

import dataclasses
from dataclasses import dataclass, field
from typing import get_type_hints

from .errors import ParameterError
from .training import TrainConfig


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 140  # per source
    height: int = 128
    width: int = 128
    classes: int = 4
    dark_fraction: float = 0.3
    color_jitter: float = 0.05
    t_low: float = 0.02
    t_high: float = 0.8
    u_airlight: tuple = (0.05, 0.75, 0.9)
    f_airlight: tuple = (0.3, 0.3, 0.3)
    airlight_jitter: float = 0.03
    murky_fraction: float = 0.15  # detector-friendly candidates rendered with underwater airlight


@dataclass(frozen=True)
class ImagingConfig:
    window: int = 15
    omega: float = 0.95


@dataclass(frozen=True)
class PartitionConfig:
    threshold: float = 0.5
    patch_size: int = 64
    stride: int = 64
    aggregate: str = "mean"
    gate_threshold: float = 60.0
    use_gate: bool = True
    max_hd: int = 200


@dataclass(frozen=True)
class ExtractorSection:
    c0: int = 16
    c1: int = 32
    pretrain_iters: int = 300
    pretrain_batch: int = 16
    pretrain_lr: float = 0.05


@dataclass(frozen=True)
class RftmSection:
    cmid: int = 0  # 0 means "same as c1"
    kernel: int = 3
    layers: int = 3
    init: str = "zero-residual"


@dataclass(frozen=True)
class AnalysisConfig:
    perplexity: float = 20.0
    tsne_iters: int = 500
    permutations: int = 200


@dataclass(frozen=True)
class SweepConfig:
    thresholds: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    imaging: ImagingConfig = field(default_factory=ImagingConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    rftm: RftmSection = field(default_factory=RftmSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def with_seed(self, seed):
        return dataclasses.replace(self, seed=seed,
                                   train=dataclasses.replace(self.train, seed=seed))

    def to_text(self):
        lines = []
        for key, value in _flatten(self):
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        overrides = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ParameterError(f"config line {n}: expected 'key = value', got {raw!r}")
            overrides[key.strip()] = value.strip()
        return cls.from_dict(overrides)

    @classmethod
    def from_dict(cls, overrides):
        """Build from flat ``section.key`` strings; ``seed`` also seeds training."""
        sections = {f.name for f in dataclasses.fields(cls) if f.name != "seed"}
        grouped = {}
        seed = 0
        for key, value in overrides.items():
            head, dot, rest = key.partition(".")
            if key == "seed":
                seed = _coerce(int, value, key)
            elif dot and head in sections:
                grouped.setdefault(head, {})[rest] = value
            else:
                raise ParameterError(f"unknown config key {key!r}")
        grouped.setdefault("train", {}).setdefault("seed", str(seed))
        built = {name: _build(type(getattr(cls(), name)), grouped.get(name, {}), name)
                 for name in sections}
        return cls(seed=seed, **built)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())


def _flatten(cfg, prefix=""):
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            yield from _flatten(v, f"{prefix}{f.name}.")
        else:
            yield f"{prefix}{f.name}", v


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    return str(v)


def _coerce(tp, raw, key):
    try:
        if tp is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if tp is tuple:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return tp(raw)
    except ValueError:
        raise ParameterError(f"config key {key!r}: cannot parse {raw!r} as {tp.__name__}") from None


def _build(section_cls, values, prefix):
    hints = get_type_hints(section_cls)
    known = {f.name for f in dataclasses.fields(section_cls)}
    unknown = set(values) - known
    if unknown:
        raise ParameterError(f"unknown config key(s): {', '.join(sorted(f'{prefix}.{k}' for k in unknown))}")
    kwargs = {k: _coerce(hints[k], v, f"{prefix}.{k}") for k, v in values.items()}
    return section_cls(**kwargs)
