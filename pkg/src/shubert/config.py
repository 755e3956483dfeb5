"""Dataclass configuration for every stage, with TOML loading and overrides.

Precedence is defaults < file < explicit overrides. Unknown sections or keys
raise :class:`ConfigError`.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class MixConfig:
    sample_rate: int = 16000
    n_speakers: int = 16
    n_phones: int = 12
    min_phones: int = 8
    max_phones: int = 16
    phone_dur_min: float = 0.06
    phone_dur_max: float = 0.12
    n_harmonics: int = 20
    f0_min: float = 100.0
    f0_spacing: float = 12.0
    level_rms: float = 0.05
    snr_min_db: float = -5.0
    snr_max_db: float = 5.0
    speech_level_min_db: float = -5.0
    speech_level_max_db: float = 5.0
    enroll_dur: float = 1.0
    # probability that a phone is followed by its preferred successor
    phone_bigram_strength: float = 0.7
    n_train: int = 1200
    n_eval: int = 200
    speaker_seed: int = 0


@dataclass
class FrontendConfig:
    dim: int = 64
    # first kernel spans 4 ms, enough to resolve low harmonics; total hop 320
    kernels: tuple[int, ...] = (64, 8, 5, 3)
    strides: tuple[int, ...] = (8, 4, 5, 2)
    # fixed input scale; keeps the random-init GELUs in their curved (energy
    # detecting) range for mixsim's 0.05-RMS speech
    input_gain: float = 5.0


@dataclass
class MaskConfig:
    p_start: float = 0.08
    span_length: int = 10
    shared: bool = True


@dataclass
class SpkEmbConfig:
    dim: int = 32
    mode: str = "learned"  # "learned" | "oracle"
    oracle_seed: int = 0


@dataclass
class EncoderConfig:
    n_layers: int = 4
    satl_index: int = 0
    n_heads: int = 4
    ffn_dim: int = 256
    ln_eps: float = 1e-5
    # condition both normalizations of the SATL, or only the pre-attention one
    cond_both_norms: bool = True
    pos_scale: float = 1.0


@dataclass
class QuantizerConfig:
    k: int = 32
    layer_index: int = 2
    max_iters: int = 100
    max_frames: int = 20000
    seed: int = 0
    # random-init features are dominated by the positional code; drop it for labeling
    label_positions: bool = False


@dataclass
class ObjectiveConfig:
    head_dim: int = 32
    temperature: float = 0.1
    cosine_head: bool = True
    lpb_dim: int = 32
    cc_frames: int = 64
    cc_lambda: float = 5e-3
    cc_center: bool = True


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 5e-4
    warmup_steps: int = 200
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    one_path: bool = False
    checkpoint_every: int = 500


@dataclass
class ProbeConfig:
    mask_seed: int = 1234
    p_start: float = 0.08
    span_length: int = 10


@dataclass
class RunConfig:
    mix: MixConfig = field(default_factory=MixConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    spkemb: SpkEmbConfig = field(default_factory=SpkEmbConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    seed: int | None = None

    @property
    def d_model(self) -> int:
        return self.frontend.dim

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_toml(self) -> str:
        lines = []
        if self.seed is not None:
            lines.append(f"seed = {self.seed}")
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            if not dataclasses.is_dataclass(section):
                continue
            lines.append(f"\n[{f.name}]")
            for k, v in dataclasses.asdict(section).items():
                lines.append(f"{k} = {_toml_value(v)}")
        return "\n".join(lines) + "\n"


def tiny_config() -> RunConfig:
    """2-layer, D=16, K=8 model on short utterances (unit tests, gradient checks)."""
    cfg = RunConfig()
    cfg.frontend.dim = 16
    cfg.spkemb.dim = 8
    cfg.encoder.n_layers = 2
    cfg.encoder.n_heads = 2
    cfg.encoder.ffn_dim = 32
    cfg.quantizer.k = 8
    cfg.quantizer.layer_index = 1
    cfg.objective.head_dim = 8
    cfg.objective.lpb_dim = 8
    cfg.objective.cc_frames = 16
    cfg.mix.n_speakers = 4
    cfg.mix.min_phones = 4
    cfg.mix.max_phones = 6
    cfg.mix.enroll_dur = 0.25
    return cfg


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def _coerce(section: Any, key: str, value: Any) -> Any:
    current = getattr(section, key)
    if isinstance(current, tuple):
        return tuple(int(x) for x in value)
    if isinstance(current, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes")
        return bool(value)
    if isinstance(current, int) and not isinstance(current, bool):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def apply_dict(cfg: RunConfig, data: dict[str, Any]) -> RunConfig:
    sections = {f.name for f in dataclasses.fields(cfg)} - {"seed"}
    for name, body in data.items():
        if name == "seed":
            cfg.seed = None if body is None else int(body)
            continue
        if name not in sections:
            raise ConfigError(f"unknown config section [{name}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{name}] must be a table")
        section = getattr(cfg, name)
        known = {f.name for f in dataclasses.fields(section)}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"unknown config key {name}.{key}")
            setattr(section, key, _coerce(section, key, value))
    return cfg


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings."""
    data: dict[str, Any] = {}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        path, raw = item.split("=", 1)
        section, key = path.split(".", 1)
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        data.setdefault(section, {})[key] = value
    return apply_dict(cfg, data)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        apply_dict(cfg, tomllib.loads(p.read_text()))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg
