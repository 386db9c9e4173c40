"""Experiment configuration: flat sectioned key = value files.

Every knob has a default; an empty file is a valid experiment. The config
hash that names run directories covers only result-affecting fields, so the
same experiment resolves to the same artifacts wherever it is run.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field

from .errors import ValidationError


@dataclass
class LabSection:
    n_domains: int = 3
    feature_dim: int = 13
    shared_dims: int = 4
    examples_per_domain: int = 600
    general_examples: int = 600
    benchmark_examples: int = 256
    noise_std: float = 0.05
    own_std: float = 0.45
    foreign_std: float = 0.0
    shared_target_std: float = 0.6
    own_target_std: float = 1.2
    family: str = "linear_regression"
    hidden_units: int = 8


@dataclass
class TrainingSection:
    beta: float = 0.5
    steps: int = 100
    base_steps: int = 100
    step_size: float = 0.2
    batch_size: int = 64
    full_batch: bool = False


@dataclass
class ReferencesSection:
    enabled: bool = True
    count: int = 24


@dataclass
class SearchSection:
    plan: list[int] = field(default_factory=lambda: [64, 32, 16])
    pool: int = 100_000
    top_k: int = 128
    merge_method: str = "linear"
    merge_seed: int | None = None
    gbdt_learning_rate: float = 0.02
    gbdt_rounds: int = 300
    gbdt_max_depth: int = 3
    gbdt_min_samples_leaf: int = 2


@dataclass
class DedupSection:
    enabled: bool = False
    input: str = ""
    mode: str = "both"
    ngram: int = 24


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    run_root: str = "runs"
    lab: LabSection = field(default_factory=LabSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    references: ReferencesSection = field(default_factory=ReferencesSection)
    search: SearchSection = field(default_factory=SearchSection)
    dedup: DedupSection = field(default_factory=DedupSection)

    def resolved(self) -> dict:
        return {
            "experiment": {"name": self.name, "seed": self.seed, "run_root": self.run_root},
            "lab": asdict(self.lab),
            "training": asdict(self.training),
            "references": asdict(self.references),
            "search": asdict(self.search),
            "dedup": asdict(self.dedup),
        }

    def content_hash(self) -> str:
        """Hash over result-affecting fields only (name and run_root excluded)."""
        doc = self.resolved()
        doc["experiment"] = {"seed": self.seed}
        blob = json.dumps(doc, sort_keys=True).encode("utf-8")
        return hashlib.blake2b(blob, digest_size=8).hexdigest()


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"config: cannot parse boolean {text!r}")


def _parse_plan(text: str) -> list[int]:
    try:
        counts = [int(part) for part in text.replace(" ", "").split(",") if part]
    except ValueError as exc:
        raise ValidationError(f"config: bad plan {text!r}") from exc
    if not counts:
        raise ValidationError("config: empty plan")
    return counts


def _apply(section_obj, parser: configparser.ConfigParser, section: str) -> None:
    if not parser.has_section(section):
        return
    for key, raw in parser.items(section):
        if not hasattr(section_obj, key):
            raise ValidationError(f"config: unknown key {key!r} in [{section}]")
        current = getattr(section_obj, key)
        raw = raw.strip()
        if key == "plan":
            value = _parse_plan(raw)
        elif key == "merge_seed":
            value = int(raw) if raw else None
        elif isinstance(current, bool):
            value = _parse_bool(raw)
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        else:
            value = raw
        setattr(section_obj, key, value)


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise ValidationError(f"config: cannot read {path!r}")
    config = ExperimentConfig()
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key == "name":
                config.name = raw.strip()
            elif key == "seed":
                config.seed = int(raw)
            elif key == "run_root":
                config.run_root = raw.strip()
            else:
                raise ValidationError(f"config: unknown key {key!r} in [experiment]")
    _apply(config.lab, parser, "lab")
    _apply(config.training, parser, "training")
    _apply(config.references, parser, "references")
    _apply(config.search, parser, "search")
    _apply(config.dedup, parser, "dedup")
    _validate(config)
    return config


def _validate(config: ExperimentConfig) -> None:
    if config.lab.n_domains < 2 or config.lab.feature_dim < 2:
        raise ValidationError("config: lab needs n_domains >= 2 and feature_dim >= 2")
    if not 0.0 <= config.training.beta <= 1.0:
        raise ValidationError("config: training.beta must lie in [0, 1]")
    if any(c <= 0 for c in config.search.plan):
        raise ValidationError("config: search.plan counts must be positive")
    if config.search.top_k > config.search.pool:
        raise ValidationError("config: search.top_k exceeds search.pool")
    if config.references.enabled and config.references.count < 2:
        raise ValidationError("config: references.count must be at least 2")
    if config.dedup.enabled and not config.dedup.input:
        raise ValidationError("config: dedup.enabled requires dedup.input")
