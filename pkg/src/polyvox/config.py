"""Run configuration: one JSON file drives every pipeline stage.

Paths are resolved relative to the config file location; the fully resolved
config is persisted next to each stage's outputs and echoed into reports.
`POLYVOX_SEED` overrides the file's seed.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .converter import ConverterConfig
from .evaluate import EvalConfig
from .pitch import PitchEncoderConfig, PitchTrainConfig
from .synthgen import SynthConfig


class ConfigError(ValueError):
    """Configuration problem with a field (or line) diagnostic."""


@dataclass
class RunConfig:
    seed: int
    data_dir: Path
    checkpoint_dir: Path
    report_dir: Path
    synth: SynthConfig
    pitch: PitchTrainConfig
    converter: ConverterConfig
    eval: EvalConfig
    resolved: dict = field(default_factory=dict, repr=False)

    @property
    def manifest_path(self) -> Path:
        return self.data_dir / "manifest.jsonl"

    @property
    def pitch_ckpt(self) -> Path:
        return self.checkpoint_dir / "pitch.pvck"

    @property
    def svc_ckpt(self) -> Path:
        return self.checkpoint_dir / "svc.pvck"


def _build_section(cls, data: dict, section: str, **extra):
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"field '{section}.{key}': unknown key (known: {sorted(known)})")
    merged = {**data, **extra}
    for key in ("dur_range", "note_dur_range", "lead_range", "mask_span"):
        if key in merged and isinstance(merged[key], list):
            merged[key] = tuple(merged[key])
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field '{section}': {exc}") from exc


def load_config(path, seed_override: int | None = None) -> RunConfig:
    """Parse and validate a run config; raises ConfigError with a line or
    field diagnostic on any problem."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")

    env_seed = os.environ.get("POLYVOX_SEED")
    if seed_override is not None:
        seed = seed_override
    elif env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"POLYVOX_SEED={env_seed!r} is not an integer") from exc
    elif "seed" in data:
        if not isinstance(data["seed"], int):
            raise ConfigError(f"field 'seed': must be an integer, got {data['seed']!r}")
        seed = data["seed"]
    else:
        raise ConfigError("field 'seed': required (or set POLYVOX_SEED)")

    paths = data.get("paths", {})
    base = path.parent

    def respath(key, default):
        value = paths.get(key, default)
        if not isinstance(value, str):
            raise ConfigError(f"field 'paths.{key}': must be a string")
        return (base / value).resolve()

    pitch_raw = dict(data.get("pitch", {}))
    encoder_keys = {f.name for f in dataclasses.fields(PitchEncoderConfig)}
    encoder_raw = {k: pitch_raw.pop(k) for k in list(pitch_raw) if k in encoder_keys}
    encoder = _build_section(PitchEncoderConfig, encoder_raw, "pitch")
    pitch = _build_section(PitchTrainConfig, pitch_raw, "pitch", encoder=encoder)

    cfg = RunConfig(
        seed=seed,
        data_dir=respath("data_dir", "data"),
        checkpoint_dir=respath("checkpoint_dir", "checkpoints"),
        report_dir=respath("report_dir", "reports"),
        synth=_build_section(SynthConfig, data.get("synth", {}), "synth"),
        pitch=pitch,
        converter=_build_section(ConverterConfig, data.get("converter", {}), "converter"),
        eval=_build_section(EvalConfig, data.get("eval", {}), "eval"),
    )
    cfg.resolved = resolve_echo(cfg)
    return cfg


def resolve_echo(cfg: RunConfig) -> dict:
    """JSON-serializable dump of the exact configuration in effect."""

    def plain(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {k: plain(v) for k, v in dataclasses.asdict(obj).items()}
        if isinstance(obj, (tuple, list)):
            return [plain(v) for v in obj]
        if isinstance(obj, Path):
            return str(obj)
        return obj

    echo = {
        "seed": cfg.seed,
        "paths": {
            "data_dir": str(cfg.data_dir),
            "checkpoint_dir": str(cfg.checkpoint_dir),
            "report_dir": str(cfg.report_dir),
        },
        "synth": plain(cfg.synth),
        "pitch": plain(cfg.pitch),
        "converter": plain(cfg.converter),
        "eval": plain(cfg.eval),
    }
    # preset objects are part of the code, not the file format
    echo["synth"]["presets"] = [p["id"] for p in echo["synth"]["presets"]]
    return echo


def persist_config(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "resolved_config.json"
    target.write_text(json.dumps(cfg.resolved, indent=2, sort_keys=True))
    return target
