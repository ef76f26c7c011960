"""Run configuration: TOML-style config files plus flag overrides.

The dialect is the flat subset of TOML that the documented keys need:
``[section]`` headers and ``key = value`` lines with string, number,
boolean and flat-list values.  ``a2s train --set section.key=value``
overrides individual entries.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .corruption import CorruptionSpec, Stage
from .errors import ContractViolation, DataError, UsageError


def _parse_scalar(token: str):
    token = token.strip()
    if token.startswith('"') and token.endswith('"') and len(token) >= 2:
        return token[1:-1]
    if token.startswith("'") and token.endswith("'") and len(token) >= 2:
        return token[1:-1]
    low = token.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        pass
    return token


def _strip_comment(line: str) -> str:
    out = []
    quote = None
    for ch in line:
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            break
        out.append(ch)
    return "".join(out)


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, dict]:
    data: dict[str, dict] = {}
    section = data.setdefault("", {})
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = data.setdefault(line[1:-1].strip(), {})
            continue
        if "=" not in line:
            raise DataError(f"{origin}:{lineno}: expected `key = value`")
        key, value = line.split("=", 1)
        value = value.strip()
        if value.startswith("[") and value.endswith("]"):
            inner = value[1:-1].strip()
            section[key.strip()] = [_parse_scalar(v) for v in inner.split(",")] if inner else []
        else:
            section[key.strip()] = _parse_scalar(value)
    return data


def load_config_file(path) -> dict[str, dict]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {path}")
    return parse_config_text(p.read_text(encoding="utf-8"), origin=str(path))


@dataclass
class ModelConfig:
    z_chd: int = 128
    z_aud: int = 192
    z_sym: int = 192
    chord_enc_hidden: int = 256
    chord_dec_hidden: int = 256
    conv_channels: int = 32
    conv_kernel: tuple[int, int] = (4, 12)
    conv_stride: tuple[int, int] = (4, 12)
    enc_gru_hidden: int = 512
    feat_hidden: int = 256
    dec_time_hidden: int = 512
    dec_note_hidden: int = 256
    pitch_emb: int = 64
    dur_emb: int = 16
    feat_emb: int = 64
    z_inject: int = 64
    max_notes_per_step: int = 16
    variant: str = "full"  # full | audio_only_vae | audio_only_ae | chord_only

    def __post_init__(self):
        if self.variant not in ("full", "audio_only_vae", "audio_only_ae", "chord_only"):
            raise ContractViolation(f"unknown model variant {self.variant!r}")

    @property
    def z_total(self) -> int:
        return self.z_chd + self.z_aud + self.z_sym


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr_start: float = 4e-4
    lr_end: float = 6e-4
    lr_schedule: str = "linear"  # linear ramp up, or "constant" (= lr_start)
    grad_clip: float = 10.0
    seed: int = 0
    log_every: int = 20
    weight_arrangement: float = 1.0
    weight_chord: float = 1.0
    weight_features: float = 1.0


@dataclass
class CurriculumConfig:
    stage_epochs: tuple[int, int, int] = (5, 15, 10)
    stage_steps: tuple[int, int, int] | None = None  # direct step counts override epochs
    finetune_mode: str = "prior"  # prior | autoregressive
    beta_low: float = 0.01
    beta_high: float = 0.5

    def __post_init__(self):
        if self.finetune_mode not in ("prior", "autoregressive"):
            raise ContractViolation(f"unknown finetune mode {self.finetune_mode!r}")
        if not 0.0 <= self.beta_low <= self.beta_high <= 0.5:
            raise ContractViolation("beta values must satisfy 0 <= low <= high <= 0.5")
        for counts in (self.stage_epochs, self.stage_steps):
            if counts is not None and any(c <= 0 for c in counts):
                raise ContractViolation("stage lengths must be positive")


@dataclass
class DatasetConfig:
    precompute_embeddings: bool = True
    transpose_audio: bool = False
    pitch_shift_cmd: str = ""


@dataclass
class TranscriberConfig:
    backend: str = "stub"  # stub | pretrained
    weights: str = ""
    freeze: bool = True


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    transcriber: TranscriberConfig = field(default_factory=TranscriberConfig)

    def to_dict(self) -> dict:
        out = {}
        for sec_field in fields(self):
            sec = getattr(self, sec_field.name)
            entries = {}
            for f in fields(sec):
                v = getattr(sec, f.name)
                if isinstance(v, tuple):
                    v = list(v)
                elif isinstance(v, Stage):
                    v = v.value
                entries[f.name] = v
            out[sec_field.name] = entries
        return out


_TUPLE_KEYS = {"conv_kernel", "conv_stride", "stage_epochs", "stage_steps",
               "p_base_range", "prob_clamp"}


def _coerce(section_obj, key: str, value):
    if key in _TUPLE_KEYS and isinstance(value, list):
        return tuple(value)
    if key == "stage" and isinstance(value, str):
        return Stage(value)
    return value


def build_run_config(raw: dict[str, dict]) -> RunConfig:
    cfg = RunConfig()
    for section, entries in raw.items():
        if not section:
            if entries:
                raise DataError(f"top-level keys are not allowed: {sorted(entries)}")
            continue
        if not hasattr(cfg, section):
            raise DataError(f"unknown config section [{section}]")
        obj = getattr(cfg, section)
        valid = {f.name for f in fields(obj)}
        updates = {}
        for key, value in entries.items():
            if key not in valid:
                raise DataError(f"unknown key {section}.{key}")
            updates[key] = _coerce(obj, key, value)
        setattr(cfg, section, replace(obj, **updates))
    return cfg


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply `section.key=value` strings on top of a RunConfig."""
    raw: dict[str, dict] = {}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if value.startswith("[") and value.endswith("]"):
            inner = value[1:-1].strip()
            parsed = [_parse_scalar(v) for v in inner.split(",")] if inner else []
        else:
            parsed = _parse_scalar(value)
        raw.setdefault(section.strip(), {})[key.strip()] = parsed
    merged = {sec: dict(entries) for sec, entries in cfg.to_dict().items()}
    for sec, entries in raw.items():
        merged.setdefault(sec, {}).update(entries)
    return build_run_config(merged)


def load_run_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    cfg = build_run_config(load_config_file(path)) if path else RunConfig()
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg
