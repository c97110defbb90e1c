"""Flat run configuration.

A config file is a single JSON object whose keys are the fields of
:class:`RunConfig`; unknown keys are rejected. Field reference:

data
    ``train_corpus``, ``dev_corpus`` (JSONL paths, relative to the config
    file), ``vocab`` (optional existing vocab file), ``vocab_size`` (BPE
    target when training a vocab), ``max_ctx``, ``max_resp``, ``max_turns``,
    ``out_dir``.
model
    ``d_model``, ``n_heads``, ``d_ff``, ``enc_layers``, ``dec_layers``,
    ``use_latent`` (false = no-latent ablation), ``latent_norm``,
    ``tie_embeddings``.
denoiser / schedule
    ``den_layers``, ``time_dim``, ``T``, ``schedule_s``.
training
    ``steps``, ``batch_size``, ``lr`` (peak), ``init_lr``, ``warmup_steps``
    (null = 10% of steps), ``weight_decay``, ``grad_clip``, ``eval_every``,
    ``seed``, ``w_nll``, ``w_bow``, ``w_ld``, ``dtype``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields

from .diffusion import DenoiserConfig
from .model import ModelConfig


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


@dataclass
class RunConfig:
    train_corpus: str = ""
    dev_corpus: str = ""
    vocab: str | None = None
    vocab_size: int = 512
    max_ctx: int = 256
    max_resp: int = 128
    max_turns: int = 16
    out_dir: str = "runs/default"

    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    enc_layers: int = 2
    dec_layers: int = 2
    use_latent: bool = True
    latent_norm: bool = True
    tie_embeddings: bool = True

    den_layers: int = 2
    time_dim: int = 128
    T: int = 2000
    schedule_s: float = 1e-4

    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    init_lr: float = 1e-7
    warmup_steps: int | None = None
    weight_decay: float = 0.01
    grad_clip: float | None = 1.0
    eval_every: int = 100
    seed: int = 0
    w_nll: float = 1.0
    w_bow: float = 1.0
    w_ld: float = 1.0
    dropout: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self):
        p = []

        def positive_int(name):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                p.append(f"{name}: must be a positive integer (got {v!r})")

        for name in ("vocab_size", "max_ctx", "max_resp", "max_turns", "d_model", "n_heads", "d_ff",
                     "enc_layers", "dec_layers", "den_layers", "time_dim", "T", "steps", "batch_size",
                     "eval_every"):
            positive_int(name)
        if isinstance(self.d_model, int) and isinstance(self.n_heads, int) and self.n_heads > 0 \
                and self.d_model % self.n_heads:
            p.append(f"d_model: {self.d_model} is not divisible by n_heads={self.n_heads}")
        if not isinstance(self.schedule_s, (int, float)) or not 0 < self.schedule_s < 1:
            p.append(f"schedule_s: must lie in (0, 1) (got {self.schedule_s!r})")
        for name in ("lr", "init_lr"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or v <= 0:
                p.append(f"{name}: must be positive (got {v!r})")
        if isinstance(self.lr, (int, float)) and isinstance(self.init_lr, (int, float)) and self.init_lr > self.lr:
            p.append("init_lr: must not exceed lr")
        if self.warmup_steps is not None:
            if not isinstance(self.warmup_steps, int) or self.warmup_steps < 0:
                p.append(f"warmup_steps: must be a non-negative integer or null (got {self.warmup_steps!r})")
            elif isinstance(self.steps, int) and self.warmup_steps >= self.steps:
                p.append("warmup_steps: must be smaller than steps")
        if not isinstance(self.weight_decay, (int, float)) or self.weight_decay < 0:
            p.append(f"weight_decay: must be non-negative (got {self.weight_decay!r})")
        if self.grad_clip is not None and (not isinstance(self.grad_clip, (int, float)) or self.grad_clip <= 0):
            p.append(f"grad_clip: must be positive or null (got {self.grad_clip!r})")
        for name in ("w_nll", "w_bow", "w_ld"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or v < 0:
                p.append(f"{name}: must be non-negative (got {v!r})")
        if not isinstance(self.dropout, (int, float)) or not 0 <= self.dropout < 1:
            p.append(f"dropout: must lie in [0, 1) (got {self.dropout!r})")
        if self.dtype not in ("float32", "float64"):
            p.append(f"dtype: must be 'float32' or 'float64' (got {self.dtype!r})")
        if not isinstance(self.seed, int):
            p.append(f"seed: must be an integer (got {self.seed!r})")
        return p

    @property
    def warmup(self):
        return self.steps // 10 if self.warmup_steps is None else self.warmup_steps

    def model_config(self, vocab_size):
        return ModelConfig(
            vocab_size=vocab_size, d_model=self.d_model, n_heads=self.n_heads, d_ff=self.d_ff,
            enc_layers=self.enc_layers, dec_layers=self.dec_layers, max_turns=self.max_turns,
            max_ctx=self.max_ctx, max_resp=self.max_resp, use_latent=self.use_latent,
            latent_norm=self.latent_norm, tie_embeddings=self.tie_embeddings, dropout=self.dropout, dtype=self.dtype,
        )

    def denoiser_config(self):
        return DenoiserConfig(d_model=self.d_model, n_heads=self.n_heads, d_ff=self.d_ff,
                              layers=self.den_layers, time_dim=self.time_dim, dropout=self.dropout, dtype=self.dtype)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data, base_dir=None):
        if not isinstance(data, dict):
            raise ConfigError(["config must be a JSON object"])
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        problems = [f"{k}: unknown field" for k in unknown]
        kwargs = {k: v for k, v in data.items() if k in known}
        if base_dir:
            for key in ("train_corpus", "dev_corpus", "vocab", "out_dir"):
                v = kwargs.get(key)
                if v and not os.path.isabs(v):
                    kwargs[key] = os.path.normpath(os.path.join(base_dir, v))
        try:
            cfg = cls(**kwargs)
        except ConfigError as exc:
            problems.extend(exc.problems)
            raise ConfigError(problems) from None
        except TypeError as exc:
            problems.append(str(exc))
            raise ConfigError(problems) from None
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError([f"{path}: not valid JSON ({exc.msg})"]) from None
        return cls.from_dict(data, os.path.dirname(os.path.abspath(path)))

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)
