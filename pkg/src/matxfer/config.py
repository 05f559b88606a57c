"""Experiment configuration: an INI-style key-value file with one section per
stage, a canonical dump, and a fingerprint that reports embed so runs are
traceable to their exact settings."""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import asdict, dataclass, field, fields

from .errors import ValidationError


@dataclass
class LibraryConfig:
    n_per_category: int = 6
    patch_size: int = 8
    radius: float = 45.0
    spread: float = 14.0
    noise_amplitude: float = 1.0
    min_pair_distance: float = 0.0


@dataclass
class SynthConfig:
    n_shapes: int = 24
    part_min: int = 2
    part_max: int = 5
    vocabulary_size: int = 8
    n_views: int = 3
    image_size: int = 64
    assignments_per_shape: int = 2
    shading_amplitude: float = 2.0
    min_support: float = 0.5


@dataclass
class MetricConfig:
    alpha1: float = 1.0
    alpha2: float = 1.0
    margin: float = 0.3
    optimizer: str = "sgd-momentum"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 24
    steps: int = 400
    triplet_count: int = 64


@dataclass
class ClassifierConfig:
    alpha3: float = 0.5
    alpha4: float = 1.0
    alpha5: float = 10.0
    optimizer: str = "adam"
    learning_rate: float = 5e-4
    batch_size: int = 32
    steps: int = 600
    encoder_lr_scale: float = 0.1


@dataclass
class TranslationConfig:
    psi1: float = 1.0
    psi2: float = 0.01
    psi3: float = 10.0
    psi4: float = 10.0
    psi5: float = 100.0
    psi6: float = 2.0
    psi7: float = 1.0
    psi8: float = 1.0
    optimizer: str = "adam"
    learning_rate: float = 2e-4
    d_learning_rate: float = 1e-4
    batch_size: int = 3
    steps: int = 600
    temperature: float = 0.1
    quadruple_count: int = 200


@dataclass
class FineTuneConfig:
    learning_rate: float = 2e-4
    batch_size: int = 16
    steps: int = 120
    consistency_weight: float = 1.0
    granularity: int = 12
    n_pairs: int = 24
    encoder_lr_scale: float = 0.1


@dataclass
class EvalConfig:
    n_eval_pairs: int = 12
    n_transfer_fixtures: int = 20


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float64"


@dataclass
class MatxferConfig:
    library: LibraryConfig = field(default_factory=LibraryConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    translation: TranslationConfig = field(default_factory=TranslationConfig)
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def dump(self) -> str:
        """Canonical textual form: sections and keys in declaration order."""
        out = io.StringIO()
        for section_field in fields(self):
            section = getattr(self, section_field.name)
            out.write(f"[{section_field.name}]\n")
            for k, v in asdict(section).items():
                out.write(f"{k} = {v}\n")
            out.write("\n")
        return out.getvalue()

    def fingerprint(self) -> str:
        return hashlib.sha256(self.dump().encode("utf-8")).hexdigest()[:16]

    def torch_dtype(self):
        import torch

        if self.run.precision == "float64":
            return torch.float64
        if self.run.precision == "float32":
            return torch.float32
        raise ValidationError(f"unknown precision {self.run.precision!r}")


def load_config(path=None, overrides: list[str] | None = None) -> MatxferConfig:
    """Parse an INI config file; missing keys keep their defaults.

    `overrides` are "section.key=value" strings applied after the file.
    """
    cfg = MatxferConfig()
    parser = configparser.ConfigParser()
    if path is not None:
        read = parser.read(path)
        if not read:
            raise ValidationError(f"config file not found: {path}")
        for section_name in parser.sections():
            if not hasattr(cfg, section_name):
                raise ValidationError(f"unknown config section [{section_name}]")
            section = getattr(cfg, section_name)
            for key, raw in parser.items(section_name):
                _apply(section, section_name, key, raw)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValidationError(f"override must look like section.key=value: {item!r}")
        dotted, raw = item.split("=", 1)
        section_name, key = dotted.split(".", 1)
        if not hasattr(cfg, section_name):
            raise ValidationError(f"unknown config section [{section_name}]")
        _apply(getattr(cfg, section_name), section_name, key.strip(), raw.strip())
    return cfg


def _apply(section, section_name: str, key: str, raw: str) -> None:
    matching = [f for f in fields(section) if f.name == key]
    if not matching:
        raise ValidationError(f"unknown config key {section_name}.{key}")
    f = matching[0]
    try:
        if f.type in ("int", int):
            value = int(raw)
        elif f.type in ("float", float):
            value = float(raw)
        else:
            value = raw
    except ValueError as exc:
        raise ValidationError(f"bad value for {section_name}.{key}: {raw!r}") from exc
    setattr(section, key, value)
