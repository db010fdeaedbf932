"""Run configuration: flat key-value files with typed validation.

The config file format is one ``key = value`` pair per line (``#`` starts a
comment).  Every key must name a RunConfig field; unknown keys are
rejected, as are values that fail the field's type or range checks.  All
keys can be overridden from the command line.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .serialize import canonical_json, sha256_hex

STAGES = ("prompt", "uic", "refine", "caption", "evaluate")
THRESHOLD_MODES = ("absolute", "percentile")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Single source of run determinism: stage, paths, dims, seeds, rates."""

    stage: str = ""
    # dataset paths
    images: str = ""
    sentences: str = ""
    concepts: str | None = None
    holdout_images: str | None = None
    eval_set: str | None = None
    output_dir: str = "runs/out"
    seed: int = 0
    # backbone spec
    feature_dim: int = 512
    token_embed_dim: int = 512
    similarity_scale: float = 100.0
    backbone_seed: int = 0
    # corpus
    min_count: int = 4
    max_len: int = 20
    # stage I (semantic prompt)
    prompt_length: int = 8
    stage1_steps: int = 200
    stage1_batch: int = 16
    lr_stage1: float = 0.001
    # stage II (adversarial captioner)
    stage2_steps: int = 300
    stage2_batch: int = 16
    lr_stage2: float = 0.001
    lambda_concept: float = 1.0
    baseline_decay: float = 0.9
    hidden_size: int = 512
    embed_dim: int = 512
    use_prompt: bool = True
    lm_warmup_steps: int = 0
    lm_warmup_lr: float = 0.003
    # stage III (metric-gated refining)
    threshold: float = 30.0
    threshold_mode: str = "absolute"
    iterations: int = 3
    lr_stage3: float = 0.00001
    stage3_epochs: int = 3
    stage3_batch: int = 16
    # explicit checkpoint locations (default: discovered under output_dir)
    prompt_checkpoint: str | None = None
    uic_checkpoint: str | None = None
    refine_checkpoint: str | None = None

    def validate(self) -> None:
        if self.stage and self.stage not in STAGES:
            raise ConfigError(f"invalid value for 'stage': {self.stage!r} (choose from {STAGES})")
        for name in ("lr_stage1", "lr_stage2", "lr_stage3", "lm_warmup_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"invalid value for {name!r}: learning rates must be > 0")
        for name in ("feature_dim", "token_embed_dim", "prompt_length", "hidden_size",
                     "embed_dim", "max_len", "min_count", "stage1_batch", "stage2_batch",
                     "stage3_batch", "stage3_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"invalid value for {name!r}: must be >= 1")
        for name in ("stage1_steps", "stage2_steps", "lm_warmup_steps", "iterations"):
            if getattr(self, name) < 0:
                raise ConfigError(f"invalid value for {name!r}: must be >= 0")
        if not self.similarity_scale > 0:
            raise ConfigError("invalid value for 'similarity_scale': must be > 0")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ConfigError(
                f"invalid value for 'threshold_mode': {self.threshold_mode!r} (choose from {THRESHOLD_MODES})"
            )
        if self.threshold_mode == "percentile" and not 0.0 <= self.threshold <= 100.0:
            raise ConfigError("invalid value for 'threshold': percentile must lie in [0, 100]")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ConfigError("invalid value for 'baseline_decay': must lie in [0, 1)")

    def manifest_dict(self) -> dict:
        # output_dir does not influence artifact content, so it stays out of
        # the manifest and the config hash (two runs into different
        # directories must produce identical manifests).
        data = dataclasses.asdict(self)
        data.pop("output_dir")
        return data

    def config_hash(self) -> str:
        return sha256_hex(canonical_json(self.manifest_dict()))


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_OPTIONAL_STR_FIELDS = {
    name for name, tp in _FIELD_TYPES.items() if tp == "str | None"
}
_BOOL_FIELDS = {name for name, tp in _FIELD_TYPES.items() if tp == "bool"}
_INT_FIELDS = {name for name, tp in _FIELD_TYPES.items() if tp == "int"}
_FLOAT_FIELDS = {name for name, tp in _FIELD_TYPES.items() if tp == "float"}


def _coerce(name: str, raw: str):
    raw = raw.strip()
    if name in _OPTIONAL_STR_FIELDS:
        return None if raw.lower() in ("", "none") else raw
    if name in _BOOL_FIELDS:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"invalid value for {name!r}: {raw!r} is not a boolean")
    try:
        if name in _INT_FIELDS:
            return int(raw)
        if name in _FLOAT_FIELDS:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"invalid value for {name!r}: {raw!r} ({exc})") from exc
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def load_run_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Build a validated RunConfig from a file plus command-line overrides."""
    pairs: dict[str, str] = {}
    if path is not None:
        pairs.update(parse_config_text(Path(path).read_text(encoding="utf-8"), source=str(path)))
    if overrides:
        pairs.update({k: str(v) for k, v in overrides.items() if v is not None})
    config = RunConfig()
    for key, raw in pairs.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key: {key!r}")
        setattr(config, key, _coerce(key, raw))
    config.validate()
    return config
