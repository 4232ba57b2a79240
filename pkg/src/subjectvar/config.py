"""Declarative run configuration.

One INI-style file with sections (data, tokenizer, model, train, sample,
eval); values are Python literals. Every field has a default, explicit
values override, unknown keys are rejected, and the resolved configuration
is hashed and embedded in every checkpoint and report.
"""

from __future__ import annotations

import ast
import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    n: int = 768
    seed: int = 0
    split: tuple = (0.9, 0.1)
    test_identity_frac: float = 0.15


@dataclass
class TokenizerSection:
    image_size: int = 64
    downsample: int = 4
    d_latent: int = 16
    hidden: tuple = (32, 64, 96, 128)
    steps: int = 1500
    batch_size: int = 16
    lr: float = 2e-3
    holdout_frac: float = 0.1
    mse_target: float = 0.01
    seed: int = 0
    gain_shrink: float = 0.5
    calib_images: int = 256


@dataclass
class SampleSection:
    gamma_t: float = 3.0
    gamma_i: float = 2.0
    temperature: float = 1.0
    argmax: bool = False
    num_images: int = 1
    seed: int = 0


@dataclass
class EvalSection:
    n_subjects: int = 10
    prompts_per_subject: int = 10
    images_per_pair: int = 4
    seed: int = 0
    ablation: str = "none"
    gamma_t: float = 3.0
    gamma_i: float = 2.0
    temperature: float = 1.0


SECTIONS = {
    "data": DataSection,
    "tokenizer": TokenizerSection,
    "model": ModelConfig,
    "train": TrainConfig,
    "sample": SampleSection,
    "eval": EvalSection,
}


@dataclass
class Config:
    data: DataSection = field(default_factory=DataSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def resolved(self):
        out = {}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            out[name] = {
                k: list(v) if isinstance(v, tuple) else v for k, v in d.items()
            }
        # tuples-of-tuples (schedule) need full conversion for canonical JSON
        out["model"]["schedule"] = [list(s) for s in self.model.schedule]
        return out

    def hash(self):
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(raw, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, str):
        return raw.strip()
    try:
        val = ast.literal_eval(raw.strip())
    except (ValueError, SyntaxError) as e:
        raise ConfigError(f"cannot parse value {raw!r}: {e}") from e
    if isinstance(default, tuple) and isinstance(val, list):
        val = tuple(val)
    if isinstance(default, float) and isinstance(val, int):
        val = float(val)
    return val


def _apply(cfg, section, key, raw):
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    target = getattr(cfg, section)
    names = {f.name for f in fields(target)}
    if key not in names:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    default = getattr(target, key)
    value = _coerce(raw, default)
    if isinstance(value, list):
        value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    setattr(target, key, value)


def load_config(path=None, overrides=()):
    """Defaults, then the file, then --set overrides; later wins."""
    cfg = Config()
    if path:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw)
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {ov!r}")
        dotted, raw = ov.split("=", 1)
        section, key = dotted.split(".", 1)
        _apply(cfg, section, key, raw)
    # re-run validation that dataclasses perform in __post_init__
    cfg.train.__post_init__()
    cfg.model.__post_init__()
    return cfg


def ae_config(cfg):
    from .tokenizer import AutoencoderConfig

    t = cfg.tokenizer
    return AutoencoderConfig(
        image_size=t.image_size, downsample=t.downsample, d_latent=t.d_latent,
        hidden=tuple(t.hidden), steps=t.steps, batch_size=t.batch_size, lr=t.lr,
        holdout_frac=t.holdout_frac, mse_target=t.mse_target, seed=t.seed,
    )
