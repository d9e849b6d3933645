"""Pipeline configuration: a flat key=value file plus command-line overrides.

Precedence (low to high): dataclass defaults, dataset-family presets, config
file entries, ``--set key=value`` overrides. One global seed fans out to
per-stage seeds, so a single line controls full-run determinism.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Union

from .artifacts import config_hash, derive_seed
from .errors import ValidationError

# dataset-family presets (hop bounds and estimator epochs)
FAMILY_DEFAULTS: dict[str, dict] = {
    "webqsp": {"max_hop": 2, "estimator_epochs": 600},
    "cwq": {"max_hop": 3, "estimator_epochs": 200},
    "metaqa-1hop": {"max_hop": 1},
    "metaqa-2hop": {"max_hop": 2},
    "metaqa-3hop": {"max_hop": 3},
}

ARTIFACT_FILES = {
    "ingest": "store.bin",
    "enumerate": "candidates.jsonl",
    "build-bags": "bags.jsonl",
    "train-estimator": "estimator.ckpt",
    "score": "path_scores.jsonl",
    "select-supervision": "supervision.jsonl",
    "train-generator": "generator.ckpt",
    "emit-finetune": "finetune.jsonl",
    "generate": "generated.jsonl",
    "ground": "evidence.jsonl",
    "reason": "predictions.jsonl",
    "evaluate": "metrics.json",
    "supervision-eval": "supervision_eval.json",
}


@dataclass
class PipelineConfig:
    """Everything the pipeline stages need, in one flat namespace."""

    kg: str = ""
    questions: str = ""
    test_questions: str = ""  # defaults to `questions` when empty
    reference_paths: str = ""  # optional gold paths for supervision-eval
    out_dir: str = "pathqa-artifacts"
    provider: str = "builtin:256"
    family: str = ""
    max_hop: int = 2
    max_candidates: int = 0  # per-question enumeration cap; 0 = unlimited
    seed: int = 0
    # MIL estimator
    estimator_dim: int = 128
    estimator_layers: int = 2
    estimator_heads: int = 4
    estimator_ffn_factor: int = 4
    estimator_lr: float = 1e-4
    estimator_weight_decay: float = 0.01
    estimator_epochs: int = 600
    estimator_clip: float = 1.0
    # negative sampling
    negative_budget: int = 1000
    rho_truncated: float = 0.1
    rho_extended: float = 0.4
    rho_deviated: float = 0.3
    rho_other: float = 0.2
    # supervision selection
    top_t: int = 1
    # path generator
    generator_mode: str = "builtin"  # builtin | llm
    generator_hidden: int = 64
    generator_lr: float = 5e-5
    generator_epochs: int = 5
    generator_clip: float = 1.0
    beam_size: int = 5
    # reasoner
    reasoner: str = "mock:union"  # mock:union | http
    reasoner_endpoint: str = ""
    reasoner_model: str = ""
    reasoner_timeout: float = 30.0
    reasoner_retries: int = 3
    reasoner_concurrency: int = 4
    force: bool = False

    # -- construction -----------------------------------------------------------

    @classmethod
    def from_sources(cls, config_file: Union[str, Path, None] = None,
                     overrides: list[str] | None = None) -> "PipelineConfig":
        raw: dict[str, str] = {}
        if config_file:
            raw.update(_parse_config_file(config_file))
        for item in overrides or ():
            key, sep, value = item.partition("=")
            if not sep:
                raise ValidationError(f"override {item!r} is not of the form key=value")
            raw[key.strip()] = value.strip()

        merged: dict[str, str] = {}
        family = raw.get("family", "")
        if family:
            if family not in FAMILY_DEFAULTS:
                raise ValidationError(
                    f"unknown dataset family {family!r}; known: {sorted(FAMILY_DEFAULTS)}"
                )
            merged.update({k: str(v) for k, v in FAMILY_DEFAULTS[family].items()})
        merged.update(raw)

        known = {f.name: f for f in fields(cls)}
        config = cls()
        for key, value in merged.items():
            if key not in known:
                raise ValidationError(f"unknown configuration key {key!r}")
            setattr(config, key, _coerce(known[key].type, key, value))
        config.validate()
        return config

    def validate(self) -> None:
        if self.max_hop < 1:
            raise ValidationError("max_hop must be >= 1")
        if self.max_candidates < 0:
            raise ValidationError("max_candidates must be >= 0 (0 disables the cap)")
        if self.top_t < 1:
            raise ValidationError("top_t must be >= 1")
        if self.beam_size < 1:
            raise ValidationError("beam_size must be >= 1")
        rho_sum = self.rho_truncated + self.rho_extended + self.rho_deviated + self.rho_other
        if abs(rho_sum - 1.0) > 1e-9:
            raise ValidationError(f"negative-class proportions must sum to 1, got {rho_sum}")
        if self.generator_mode not in ("builtin", "llm"):
            raise ValidationError("generator_mode must be 'builtin' or 'llm'")
        if self.reasoner not in ("mock:union", "http"):
            raise ValidationError("reasoner must be 'mock:union' or 'http'")
        if self.reasoner == "http" and not self.reasoner_endpoint:
            raise ValidationError("reasoner=http requires reasoner_endpoint")
        if self.generator_mode == "llm" and not self.reasoner_endpoint:
            raise ValidationError("generator_mode=llm requires reasoner_endpoint")

    # -- derived values -----------------------------------------------------------

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data.pop("force")    # validation toggle, not run identity
        data.pop("out_dir")  # artifact location does not change artifact content
        return data

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    def artifact_path(self, stage: str) -> Path:
        return Path(self.out_dir) / ARTIFACT_FILES[stage]

    @property
    def test_questions_path(self) -> str:
        return self.test_questions or self.questions


def _coerce(field_type, key: str, value: str):
    text = str(value)
    if field_type in (int, "int"):
        try:
            return int(text)
        except ValueError:
            raise ValidationError(f"key {key!r} expects an integer, got {text!r}") from None
    if field_type in (float, "float"):
        try:
            return float(text)
        except ValueError:
            raise ValidationError(f"key {key!r} expects a number, got {text!r}") from None
    if field_type in (bool, "bool"):
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"key {key!r} expects a boolean, got {text!r}")
    return text


def _parse_config_file(path: Union[str, Path]) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file {path} does not exist")
    entries: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ValidationError(f"{path}: line {lineno}: expected 'key = value'")
        entries[key.strip()] = value.strip()
    return entries
