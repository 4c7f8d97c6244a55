"""
Run configuration - one YAML document resolving every stage's settings.

    backend: toy
    layer_split: 1
    seed: 0
    datasets:
      source: {preset: cityscapes, root: data/cityscapes, split: train}
    mining: {iterations: 100, learning_rate: 1.0}
    adapt: {iterations: 2000, style_mix: false}

Unknown keys are rejected at every level. The command line's --seed always
wins over the file and is pushed into every sub-config.
"""

import random
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
import yaml

from adaptation import AdaptConfig, SourceTrainConfig
from concept_opt import ConceptConfig
from encoder_backends import BACKEND_CHOICES, TEMPLATE_SETS
from errors import ValidationError
from pipeline_io import DatasetSpec, preset_spec
from style_mining import MiningConfig

RESOLVED_CONFIG_FILE = "resolved_config.yaml"
_SECTIONS = {
    "mining": MiningConfig,
    "concept": ConceptConfig,
    "source_train": SourceTrainConfig,
    "adapt": AdaptConfig,
}


@dataclass
class RunConfig:
    backend: str = "toy"
    layer_split: int = 1
    template_set: str = "imagenet"
    seed: int = 0
    output_dir: str = "runs"
    workers: int = 1
    head_width: int = 64
    trainable_stages: List[str] = field(default_factory=list)
    datasets: Dict[str, DatasetSpec] = field(default_factory=dict)
    mining: MiningConfig = field(default_factory=MiningConfig)
    concept: ConceptConfig = field(default_factory=ConceptConfig)
    source_train: SourceTrainConfig = field(default_factory=SourceTrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)

    def validate(self) -> "RunConfig":
        if self.backend not in BACKEND_CHOICES:
            raise ValidationError(f"backend must be one of {BACKEND_CHOICES}, got '{self.backend}'")
        if self.template_set not in TEMPLATE_SETS:
            raise ValidationError(f"template_set must be one of {sorted(TEMPLATE_SETS)}, got '{self.template_set}'")
        if self.workers < 1:
            raise ValidationError(f"workers must be >= 1, got {self.workers}")
        self.mining.validate()
        self.concept.validate()
        self.source_train.validate()
        self.adapt.validate()
        return self

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        if seed is None:
            return self
        return replace(
            self,
            seed=seed,
            mining=replace(self.mining, seed=seed),
            concept=replace(self.concept, seed=seed),
            source_train=replace(self.source_train, seed=seed),
            adapt=replace(self.adapt, seed=seed),
        )

    def dataset(self, name: str) -> DatasetSpec:
        if name not in self.datasets:
            raise ValidationError(f"dataset '{name}' is not configured (have: {sorted(self.datasets)})")
        return self.datasets[name]

    def validate_paths(self, names: Optional[List[str]] = None) -> None:
        for name in names if names is not None else list(self.datasets):
            root = Path(self.dataset(name).root)
            if not root.is_dir():
                raise ValidationError(f"dataset '{name}' root does not exist: {root}")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["datasets"] = {name: asdict(spec) for name, spec in self.datasets.items()}
        return data

    @classmethod
    def from_dict(cls, data: Optional[Dict]) -> "RunConfig":
        data = dict(data or {})
        _reject_unknown(data, {f.name for f in fields(cls)}, "run config")
        values = {}
        for key, value in data.items():
            if key in _SECTIONS:
                section = _SECTIONS[key]
                _reject_unknown(value or {}, {f.name for f in fields(section)}, key)
                values[key] = section(**(value or {}))
            elif key == "datasets":
                values[key] = {name: _dataset_from_dict(name, spec) for name, spec in (value or {}).items()}
            else:
                values[key] = value
        return cls(**values)

    @classmethod
    def reference(cls) -> "RunConfig":
        return cls(
            backend="clip-RN50",
            datasets={
                "source": preset_spec("cityscapes", "data/cityscapes", "train"),
                "target": preset_spec("acdc-night", "data/acdc", "val"),
            },
        )

    @classmethod
    def toy(cls) -> "RunConfig":
        return cls(
            backend="toy",
            template_set="single",
            head_width=32,
            mining=MiningConfig.toy(),
            concept=ConceptConfig(epochs=50, batch_size=8, learning_rate=0.05),
            source_train=SourceTrainConfig.toy(),
            adapt=AdaptConfig.toy(),
        )


def _reject_unknown(data: Dict, allowed: set, where: str) -> None:
    if not isinstance(data, dict):
        raise ValidationError(f"{where} must be a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ValidationError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _dataset_from_dict(name: str, spec: Dict) -> DatasetSpec:
    spec = dict(spec or {})
    preset = spec.pop("preset", None)
    _reject_unknown(spec, {f.name for f in fields(DatasetSpec)}, f"datasets.{name}")
    if "root" not in spec:
        raise ValidationError(f"datasets.{name} needs a root")
    if preset:
        root, split = spec.pop("root"), spec.pop("split", "train")
        return preset_spec(preset, root, split, **spec)
    return DatasetSpec(**spec)


def load_run_config(path=None, seed: Optional[int] = None, base: Optional[RunConfig] = None) -> RunConfig:
    """Read a YAML run config (or start from `base`), then apply the seed override"""
    if path is None:
        config = base or RunConfig()
    else:
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = yaml.safe_load(f)
        except FileNotFoundError as error:
            raise ValidationError(f"config file not found: {path}") from error
        except yaml.YAMLError as error:
            raise ValidationError(f"config file {path} is not valid YAML: {error}") from error
        config = RunConfig.from_dict(payload)
    return config.with_seed(seed).validate()


def save_resolved_config(config: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG_FILE
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)
    return path


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
