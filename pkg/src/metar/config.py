"""Flat ``key = value`` run configuration with command-line overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .episode import SamplerConfig
from .grad import GradMode
from .kg import BackgroundMode, SynthConfig
from .model import Hyperparams
from .train import ABLATIONS, TrainConfig

PRESETS = {
    "nell": {"batch_tasks": 64, "dim": 100, "hidden_sizes": (500, 200)},
    "wiki": {"batch_tasks": 128, "dim": 50, "hidden_sizes": (250, 100)},
    "synthetic": {
        "batch_tasks": 16,
        "dim": 16,
        "hidden_sizes": (64, 32),
        "lr": 0.01,
        "n_query_pos": 10,
        "n_neg_per_pos": 5,
        "eval_every": 500,
        "patience": 10,
        "max_iters": 8000,
        "pretrain_dim": 16,
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    preset: str = "nell"
    seed: int = 0
    workers: int = 1
    data_dir: str = field(default_factory=lambda: os.environ.get("METAR_DATA_DIR", ""))
    out_dir: str = "runs"
    background: str = "intrain"
    # sampler
    k: int = 1
    n_query_pos: int = 3
    n_neg_per_pos: int = 1
    # model
    dim: int = 100
    gamma: float = 1.0
    beta: float = 1.0
    leaky_slope: float = 0.01
    hidden_sizes: tuple[int, ...] = (500, 200)
    # training
    batch_tasks: int = 64
    lr: float = 0.001
    eval_every: int = 1000
    patience: int = 30
    max_iters: int = 100_000
    grad_mode: str = "full"
    ablation: str = "standard"
    normalize_embeddings: bool = False
    init: str = "random"
    pretrained: str = ""
    checkpoint: str = ""
    # evaluation
    eval_split: str = "test"
    report: str = ""
    report_format: str = "text"
    # TransE pretraining
    pretrain_dim: int = 0
    pretrain_epochs: int = 200
    pretrain_lr: float = 0.01
    pretrain_margin: float = 1.0
    pretrain_batch: int = 256
    # synthetic data
    n_entities: int = 200
    synth_dim: int = 16
    n_train_rel: int = 20
    n_dev_rel: int = 3
    n_test_rel: int = 5
    triples_per_rel: int = 30
    noise_sigma: float = 0.0
    candidate_pool: int = 50

    # ------------------------------------------------------------------
    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_sources(cls, file_values: dict[str, str] | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
        """Apply preset defaults, then config-file values, then overrides."""
        merged = {**(file_values or {}), **(overrides or {})}
        unknown = sorted(set(merged) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        cfg = cls()
        preset = merged.get("preset", cfg.preset)
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        for key, value in PRESETS[preset].items():
            setattr(cfg, key, value)
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in merged.items():
            setattr(cfg, key, _coerce(key, types[key], raw))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.sampler().validate()
            self.hyperparams().validate()
            self.train_config().validate()
            self.synth_config().validate()
            BackgroundMode.parse(self.background)
            GradMode.parse(self.grad_mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if self.init not in ("random", "from_pretrained"):
            raise ConfigError("init must be 'random' or 'from_pretrained'")
        if self.init == "from_pretrained" and not self.pretrained:
            raise ConfigError("init=from_pretrained needs a 'pretrained' path")
        if self.eval_split not in ("dev", "test"):
            raise ConfigError("eval_split must be 'dev' or 'test'")
        if self.report_format not in ("text", "json"):
            raise ConfigError("report_format must be 'text' or 'json'")
        for key in ("pretrain_epochs", "pretrain_batch"):
            if getattr(self, key) < (0 if key == "pretrain_epochs" else 1):
                raise ConfigError(f"{key} out of range")
        if self.pretrain_dim < 0 or self.pretrain_lr <= 0 or self.pretrain_margin < 0:
            raise ConfigError("pretrain_dim, pretrain_lr and pretrain_margin out of range")

    # ------------------------------------------------------------------
    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.k, self.n_query_pos, self.n_neg_per_pos, self.seed)

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(self.dim, self.gamma, self.beta, self.leaky_slope, tuple(self.hidden_sizes))

    def train_config(self, ablation: str | None = None) -> TrainConfig:
        return TrainConfig(
            self.batch_tasks, self.lr, self.eval_every, self.patience, self.max_iters,
            self.grad_mode, ablation or self.ablation, self.seed, self.normalize_embeddings, self.workers,
        )

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            self.n_entities, self.synth_dim, self.n_train_rel, self.n_dev_rel, self.n_test_rel,
            self.triples_per_rel, self.noise_sigma, self.candidate_pool, self.seed,
        )

    @property
    def transe_dim(self) -> int:
        return self.pretrain_dim or self.dim

    def dumps(self) -> str:
        lines = []
        for key, value in dataclasses.asdict(self).items():
            if isinstance(value, (tuple, list)):
                value = ",".join(map(str, value))
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(key: str, typ, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if str(typ).startswith("tuple"):
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None
    return raw


def parse_config_file(path: str | os.PathLike) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values
