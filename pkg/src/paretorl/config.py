"""Flat ``key=value`` run configuration.

Every key maps to one field of :class:`RunConfig`.  Values are parsed with
the field's type, unknown keys are rejected, and :meth:`RunConfig.validate`
builds every sub-configuration so module invariants fail before any compute.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .encoders import EncoderConfig, ScorerConfig
from .policy import ModelConfig
from .rewards import RewardConfig
from .tasks import PretrainConfig, TaskConfig
from .trainer import PPOConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    mode: str = "pareto"
    # task
    n_prompts: int = 8
    codebook_size: int = 32
    min_len: int = 12
    task_max_len: int = 20
    noise: float = 0.1
    smooth_weight: float = 0.25
    length_weight: float = 0.05
    data_size: int = 512
    n_pref_pairs: int = 2000
    # policy
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_len: int = 24
    ff_mult: int = 4
    # encoders and scorer
    enc_dim: int = 32
    enc_hidden: int = 32
    margin: float = 1.0
    tau_init: float = 0.07
    enc_steps: int = 300
    enc_lr: float = 3e-3
    d_g: int = 48
    scorer_hidden: int = 32
    scorer_steps: int = 600
    scorer_lr: float = 3e-3
    # pretraining
    pretrain_steps: int = 400
    pretrain_batch: int = 64
    pretrain_lr: float = 3e-3
    w_align: float = 0.1
    # rewards
    lambda_contrastive: float = 1.0
    lambda_infonce: float = 1.0
    warmup_rollouts: int = 512
    # PPO
    clip_eps: float = 0.2
    beta: float = 0.1
    ppo_epochs: int = 2
    minibatch: int = 32
    lr: float = 5e-6
    critic_lr: float = 1e-4
    weight_decay: float = 0.0
    gamma: float = 1.0
    k: int = 3
    n_per_group: int = 8
    iterations: int = 300
    temperature: float = 1.5
    value_coef: float = 0.5
    alpha_start: float = 0.5
    alpha_end: float = 1.0
    token_lr_mult: float = 1.0
    # harness
    checkpoint_every: int = 50
    eval_samples: int = 32

    # -- sub-configurations ------------------------------------------------

    def task_config(self) -> TaskConfig:
        return TaskConfig(seed=self.seed, n_prompts=self.n_prompts, codebook_size=self.codebook_size,
                          min_len=self.min_len, max_len=self.task_max_len, noise=self.noise,
                          smooth_weight=self.smooth_weight, length_weight=self.length_weight)

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_prompts=self.n_prompts, codebook_size=self.codebook_size, d_model=self.d_model,
                           n_heads=self.n_heads, n_layers=self.n_layers, max_len=self.max_len,
                           n_reward_tokens=self.k, ff_mult=self.ff_mult)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(d_hidden=self.enc_hidden, d_embed=self.enc_dim, margin=self.margin,
                             tau_init=self.tau_init, lr=self.enc_lr, steps=self.enc_steps)

    def scorer_config(self) -> ScorerConfig:
        return ScorerConfig(d_g=self.d_g, d_hidden=self.scorer_hidden, lr=self.scorer_lr, steps=self.scorer_steps)

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(steps=self.pretrain_steps, batch_size=self.pretrain_batch, lr=self.pretrain_lr,
                              w_align=self.w_align)

    def reward_config(self) -> RewardConfig:
        return RewardConfig(lambdas=(self.lambda_contrastive, self.lambda_infonce), k=self.k)

    def ppo_config(self) -> PPOConfig:
        return PPOConfig(clip_eps=self.clip_eps, beta=self.beta, ppo_epochs=self.ppo_epochs,
                         minibatch=self.minibatch, lr=self.lr, critic_lr=self.critic_lr,
                         weight_decay=self.weight_decay, gamma=self.gamma, k=self.k, n_per_group=self.n_per_group,
                         iterations=self.iterations, temperature=self.temperature, value_coef=self.value_coef,
                         alpha_start=self.alpha_start, alpha_end=self.alpha_end,
                         token_lr_mult=self.token_lr_mult, mode=self.mode)

    def validate(self) -> "RunConfig":
        builders = (self.task_config, self.model_config, self.encoder_config, self.scorer_config,
                    self.pretrain_config, self.reward_config, self.ppo_config)
        for build in builders:
            try:
                build()
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        if self.task_max_len + 1 > self.max_len:
            raise ConfigError(f"task_max_len + 1 ({self.task_max_len + 1}) must fit in max_len ({self.max_len})")
        if self.data_size < self.n_prompts:
            raise ConfigError("data_size must be >= n_prompts")
        for key in ("enc_steps", "scorer_steps", "pretrain_steps", "warmup_rollouts", "checkpoint_every",
                    "eval_samples", "n_pref_pairs"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")
        if self.warmup_rollouts < 2:
            raise ConfigError("warmup_rollouts must be >= 2")
        return self

    # -- hashing -----------------------------------------------------------

    def config_hash(self, exclude=("out_dir", "iterations", "checkpoint_every", "eval_samples")) -> str:
        """Hash of every setting that changes what a run computes."""
        items = {k: v for k, v in asdict(self).items() if k not in exclude}
        return hashlib.sha256(dump_text(items).encode()).hexdigest()[:16]

    def stage_hash(self, *keys) -> str:
        items = {k: getattr(self, k) for k in sorted(keys)}
        return hashlib.sha256(dump_text(items).encode()).hexdigest()[:16]


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(key: str, text: str):
    f = _FIELDS.get(key)
    if f is None:
        raise ConfigError(f"unknown config key {key!r}")
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return text
    except ValueError:
        raise ConfigError(f"config key {key!r} expects {kind}, got {text!r}") from None


def parse_pairs(lines, source: str = "<config>") -> dict:
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        key = key.strip()
        out[key] = _parse_value(key, value)
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file (if any), then ``key=value`` overrides; validated."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_pairs(p.read_text().splitlines(), str(p)))
    values.update(parse_pairs(overrides, "--set"))
    return replace(RunConfig(), **values).validate()


def dump_text(values: dict) -> str:
    return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in values.items())


def dump_config(cfg: RunConfig, path=None) -> str:
    text = dump_text(asdict(cfg))
    if path is not None:
        Path(path).write_text(text)
    return text


def reference_text() -> str:
    """Every key with its type and default, one per line."""
    d = RunConfig()
    lines = []
    for f in fields(RunConfig):
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        lines.append(f"{f.name} ({kind}) = {getattr(d, f.name)}")
    return "\n".join(lines) + "\n"
