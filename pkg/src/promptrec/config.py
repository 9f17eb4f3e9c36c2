"""Run configuration: every tunable in one flat, serializable record.

The on-disk form is plain `key = value` text so a run directory is
self-describing; parsing and serialization round-trip losslessly.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

VARIANTS = ("full", "soft", "dec", "con", "fuse_mlp", "fuse_concat", "backbone_only")


class ConfigError(Exception):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    lr_lora: float = 1e-3
    tau: float = 0.07
    theta: float = 0.45
    codebook_size: int = 64
    shared_prompts: int = 2
    alpha: float = 0.2
    beta: float = 0.15
    gamma: float = 0.25
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    t_max: int = 50
    t_text: int = 10
    d_rs: int = 128
    backbone_blocks: int = 2
    backbone_heads: int = 4
    d_llm: int = 64
    lm_layers: int = 2
    lm_heads: int = 2
    l_max: int = 128
    lm_warmup_steps: int = 0
    lm_warmup_lr: float = 0.3
    user_wobble: float = 0.25
    patience: int = 5
    grad_clip: float = 5.0
    variant: str = "full"
    eval_ks: str = "5"
    eval_batch: int = 256
    min_interactions: int = 5

    def validate(self) -> "TrainConfig":
        if self.lr <= 0 or self.lm_warmup_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lr_lora < 0:
            raise ConfigError("lr_lora must be non-negative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not -1.0 < self.theta < 1.0:
            raise ConfigError(f"theta must lie in (-1, 1), got {self.theta}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.codebook_size < 1 or self.shared_prompts < 1:
            raise ConfigError("codebook_size and shared_prompts must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        self.ks()
        return self

    def ks(self) -> list[int]:
        try:
            ks = [int(k) for k in self.eval_ks.split(",") if k.strip()]
        except ValueError:
            raise ConfigError(f"eval_ks must be comma-separated integers: {self.eval_ks!r}")
        if not ks or min(ks) < 1:
            raise ConfigError("eval_ks needs at least one positive K")
        return ks

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {v!r}" if isinstance(v, str) else f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(fields)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, raw in data.items():
            ftype = fields[key].type
            try:
                if ftype == "int" or ftype is int:
                    kwargs[key] = int(raw)
                elif ftype == "float" or ftype is float:
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = str(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return cls(**kwargs).validate()

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        data: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key = value")
            key, _, value = line.partition("=")
            value = value.strip()
            if value.startswith("'") and value.endswith("'") and len(value) >= 2:
                value = value[1:-1]
            data[key.strip()] = value
        return cls.from_dict(data)

    @classmethod
    def from_file(cls, path: str) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())
