"""Experiment configuration and the corpus -> base -> memorized pipeline."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .corpus import CorpusSplits, encode_lines, read_lines, split_lines, synthesize_lines
from .erasers import EraseRunConfig, induce_memorization, train_lm
from .model import ModelConfig, TinyGPT, init_model
from .seeding import derive_seed


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    corpus: str | None = None  # None: synthetic records
    synthetic_lines: int = 3000
    n_forget: int = 50
    n_retain: int = 2000
    n_val: int = 200
    n_prompts: int = 32
    prefix_ratio: float = 0.5
    min_tokens: int = 8
    prompt_len: int = 12
    base_epochs: int = 6
    base_lr: float = 3e-3
    base_batch: int = 32
    target_ma: float = 0.95
    memo_lr: float = 3e-3
    memo_batch: int = 10
    memo_mix_batch: int = 16
    memo_max_epochs: int = 400
    el_n: list[int] = field(default_factory=lambda: [3])
    gen_len: int = 20
    seed: int = 0
    out_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    erase: EraseRunConfig = field(default_factory=lambda: EraseRunConfig(gen_len=20))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["erase"] = self.erase.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        cfg = cls()
        for k, v in d.items():
            cfg.set(k, v)
        return cfg

    def set(self, key: str, value: Any) -> None:
        """Set ``key`` (dotted for nested sections) from a parsed or string value."""
        if key in ("model", "erase") and isinstance(value, dict):
            for k, v in value.items():
                self.set(f"{key}.{k}", v)
            return
        target, name = self, key
        if "." in key:
            section, name = key.split(".", 1)
            if section not in ("model", "erase"):
                raise ConfigError(f"unknown config section {section!r}")
            target = getattr(self, section)
        known = {f.name: f for f in fields(target)}
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(target, name)
        value = _coerce(value, current, key)
        if target is self.erase and name == "method":
            # a new method starts from its own default strength
            self.erase.method, self.erase.gamma = value, None
            self.erase.__post_init__()
            return
        setattr(target, name, value)

    def validate(self) -> "ExperimentConfig":
        if self.corpus is not None and not Path(self.corpus).is_file():
            raise ConfigError(f"corpus file not found: {self.corpus}")
        for name in ("n_forget", "n_val", "base_batch", "memo_batch", "gen_len", "prompt_len", "min_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("n_retain", "n_prompts", "base_epochs", "memo_mix_batch", "memo_max_epochs", "synthetic_lines"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 < self.prefix_ratio < 1:
            raise ConfigError("prefix_ratio must be in (0, 1)")
        if not 0 <= self.target_ma <= 1:
            raise ConfigError("target_ma must be in [0, 1]")
        if self.base_lr <= 0 or self.memo_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not self.el_n or min(self.el_n) < 1:
            raise ConfigError("el_n needs at least one n >= 1")
        try:
            self.model.validate()
            self.erase.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def seeds(self) -> dict[str, int]:
        return {name: derive_seed(self.seed, name) for name in ("split", "init", "train", "memorize")} | {
            "erase": self.erase.seed
        }


def _coerce(value: Any, current: Any, key: str) -> Any:
    if not isinstance(value, str):
        return value
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(current, str) or (current is None and key in ("corpus",)):
        return value
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        if current is None:
            return value
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    if isinstance(current, float) and isinstance(parsed, int):
        parsed = float(parsed)
    if current is not None and not isinstance(parsed, type(current)) and not (
        isinstance(current, float) and isinstance(parsed, float)
    ):
        raise ConfigError(f"{key}: expected {type(current).__name__}, got {value!r}")
    return parsed


def load_config(path: str | Path | None = None, overrides: list[str] | tuple = ()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: {e}") from None
        cfg = ExperimentConfig.from_dict(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    return cfg


def corpus_lines(cfg: ExperimentConfig) -> list[bytes]:
    if cfg.corpus is not None:
        return read_lines(cfg.corpus)
    return encode_lines(synthesize_lines(cfg.synthetic_lines, derive_seed(cfg.seed, "corpus")))


def input_hash(cfg: ExperimentConfig) -> str:
    h = hashlib.sha256()
    for line in corpus_lines(cfg):
        h.update(line + b"\n")
    return h.hexdigest()


def make_splits(cfg: ExperimentConfig) -> CorpusSplits:
    return split_lines(
        corpus_lines(cfg),
        cfg.n_forget,
        cfg.n_retain,
        cfg.n_val,
        n_prompts=cfg.n_prompts,
        seed=cfg.seeds()["split"],
        prefix_ratio=cfg.prefix_ratio,
        min_tokens=cfg.min_tokens,
        max_tokens=cfg.model.context_length,
        prompt_len=cfg.prompt_len,
    )


def train_base(cfg: ExperimentConfig, splits: CorpusSplits) -> TinyGPT:
    seeds = cfg.seeds()
    model = init_model(cfg.model, seeds["init"])
    return train_lm(model, splits.retain, cfg.base_epochs, cfg.base_lr, cfg.base_batch, seeds["train"])


def memorize(cfg: ExperimentConfig, base: TinyGPT, splits: CorpusSplits, forget=None) -> TinyGPT:
    """theta_o: the base model with the forget set memorized to ``target_ma``."""
    return induce_memorization(
        base,
        splits.forget if forget is None else forget,
        cfg.target_ma,
        lr=cfg.memo_lr,
        batch_size=cfg.memo_batch,
        max_epochs=cfg.memo_max_epochs,
        seed=cfg.seeds()["memorize"],
        mix=splits.retain,
        mix_batch=cfg.memo_mix_batch,
    )


@dataclass
class Pipeline:
    config: ExperimentConfig
    splits: CorpusSplits
    base: TinyGPT
    original: TinyGPT


def build_pipeline(cfg: ExperimentConfig) -> Pipeline:
    cfg = copy.deepcopy(cfg).validate()
    splits = make_splits(cfg)
    base = train_base(cfg, splits)
    return Pipeline(cfg, splits, base, memorize(cfg, base, splits))
