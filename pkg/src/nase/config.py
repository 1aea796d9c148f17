"""One TOML file configures every command; ``section.key=value`` overrides win.

Defaults are not restated here: each section is read back into the dataclass
that owns it, so an absent key keeps that module's default.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .attack import AttackSpec
from .audio_io import SynthSpec
from .defense import DetectorConfig
from .dsp import StftParams
from .errors import ConfigError, IoError
from .pipeline import TARGET_SNR_DB, PipelineConfig
from .snn import LifParams, TrainHyper

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class NetShape:
    hidden: tuple[int, ...] = (128,)
    init_seed: int = 0


@dataclass(frozen=True)
class CorpusSeed:
    seed: int = 0


@dataclass(frozen=True)
class RunSettings:
    fraction: float = 0.5
    attack_kinds: tuple[str, ...] = ()
    calibrate_target_db: float = TARGET_SNR_DB
    calibrate_clips: int = 4


@dataclass(frozen=True)
class PipelineSettings:
    denoiser: str = "spectral_subtract"
    checkpoint: str | None = None
    delay_frames: int = 1
    batch_size: int = 32
    key_file: str | None = None
    seed: int = 0
    encrypt_at_ingest: bool = False


SECTIONS = {
    "corpus": CorpusSeed,
    "synth": SynthSpec,
    "stft": StftParams,
    "snn": NetShape,
    "lif": LifParams,
    "train": TrainHyper,
    "attack": AttackSpec,
    "detector": DetectorConfig,
    "pipeline": PipelineSettings,
    "run": RunSettings,
}


@dataclass(frozen=True)
class CliConfig:
    corpus: CorpusSeed = field(default_factory=CorpusSeed)
    synth: SynthSpec = field(default_factory=SynthSpec)
    stft: StftParams = field(default_factory=StftParams)
    snn: NetShape = field(default_factory=NetShape)
    lif: LifParams = field(default_factory=LifParams)
    train: TrainHyper = field(default_factory=TrainHyper)
    attack: AttackSpec = field(default_factory=lambda: AttackSpec(kind="fgsm"))
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    run: RunSettings = field(default_factory=RunSettings)
    # attack.epsilon = "auto" defers the budget to calibration
    epsilon_auto: bool = False

    def pipeline_config(self) -> PipelineConfig:
        p = self.pipeline
        return PipelineConfig(stft=self.stft, denoiser=p.denoiser, checkpoint=p.checkpoint, attack=self.attack,
                              detector=self.detector, delay_frames=p.delay_frames, batch_size=p.batch_size,
                              key_file=p.key_file, seed=p.seed, encrypt_at_ingest=p.encrypt_at_ingest)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        out["attack"]["alpha"] = self.attack.alpha
        if self.epsilon_auto:
            out["attack"]["epsilon_auto"] = True
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _coerce(key: str, value, current):
    """Convert TOML/CLI values to the type the dataclass field expects."""
    if isinstance(current, tuple) or key in ("hidden", "attack_kinds", "tone_band_hz"):
        if isinstance(value, str):
            value = [_parse_scalar(v) for v in value.split(",") if v.strip()]
        if isinstance(value, (int, float)):
            value = [value]
        return tuple(value)
    if isinstance(value, str) and not isinstance(current, str) and current is not None:
        return _parse_scalar(value)
    return value


def _parse_scalar(text: str):
    low = text.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _check_types(section: str, obj) -> None:
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, bool) or v is None:
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        if isinstance(default, (int, float)) and not isinstance(default, bool) and not isinstance(v, (int, float)):
            raise ConfigError(f"{section}.{f.name} must be a number, got {v!r}")


def build(doc: dict) -> CliConfig:
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    cfg = CliConfig()
    auto = False
    for name, cls in SECTIONS.items():
        values = dict(doc.get(name, {}))
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a table")
        base = getattr(cfg, name)
        names = {f.name for f in dataclasses.fields(cls)}
        bad = set(values) - names
        if bad:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(bad))}")
        if name == "attack" and isinstance(values.get("epsilon"), str) and values["epsilon"].lower() == "auto":
            auto = True
            values.pop("epsilon")
        kwargs = {k: _coerce(k, v, getattr(base, k)) for k, v in values.items()}
        try:
            obj = replace(base, **kwargs)
        except TypeError as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc
        _check_types(name, obj)
        cfg = replace(cfg, **{name: obj})
    if cfg.attack.kind == "none" and cfg.run.attack_kinds:
        raise ConfigError("run.attack_kinds given but attack.kind is none")
    return replace(cfg, epsilon_auto=auto)


def parse_overrides(pairs) -> dict:
    """``["attack.kind=pgd", ...]`` as a nested dict."""
    doc: dict = {}
    for item in pairs or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        doc.setdefault(section, {})[key.strip()] = _parse_scalar(value)
    return doc


def merge(base: dict, extra: dict) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for section, values in extra.items():
        if isinstance(values, dict):
            out.setdefault(section, {}).update(values)
        else:
            out[section] = values
    return out


def read_toml(path) -> dict:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load(path=None, overrides=None) -> CliConfig:
    doc = read_toml(path) if path else {}
    return build(merge(doc, overrides or {}))
