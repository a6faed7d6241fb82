"""Run orchestration: each stage in memory, plus file-backed wrappers for the CLI.

Layout of an output directory::

    config.txt            the resolved configuration
    data/                 paired.txt, preferences.txt, corpus.txt
    encoders.ckpt         both encoder families
    scorer.ckpt           preference scorer
    actor_pretrained.ckpt
    normalizer.ckpt
    rl_state.ckpt         actor, critic and optimiser state (resumable)
    actor.ckpt            final actor
    metrics.csv
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .config import RunConfig, dump_config
from .encoders import Encoders, FeatureTransform, PreferenceScorer, train_encoders, train_preference_scorer
from .policy import SequenceModel, clone_frozen, critic_from_actor, embed_prompts, sample_batch
from .rewards import CHANNELS, NormalizerState, RewardContext, fit_normalizer
from .rng import stream
from .tasks import Dataset, SyntheticTask, generate_dataset, oracle_eval, pretrain_actor, read_dataset, write_dataset
from .trainer import MetricsWriter, Trainer

log = logging.getLogger(__name__)

ENCODER_KEYS = ("seed", "n_prompts", "codebook_size", "min_len", "task_max_len", "noise", "data_size", "max_len",
                "enc_dim", "enc_hidden", "margin", "tau_init", "enc_steps", "enc_lr")
SCORER_KEYS = ("seed", "n_prompts", "codebook_size", "min_len", "task_max_len", "smooth_weight", "length_weight",
               "n_pref_pairs", "max_len", "d_g", "scorer_hidden", "scorer_steps", "scorer_lr")
# everything the warmup rollouts depend on; RL-only settings can change without refitting
NORMALIZER_KEYS = tuple(sorted(set(ENCODER_KEYS + SCORER_KEYS + (
    "d_model", "n_heads", "n_layers", "ff_mult", "k", "pretrain_steps", "pretrain_batch", "pretrain_lr", "w_align",
    "lambda_contrastive", "lambda_infonce", "warmup_rollouts", "temperature", "alpha_start"))))


@dataclass
class Artifacts:
    cfg: RunConfig
    task: SyntheticTask
    data: Dataset | None = None
    encoders: Encoders | None = None
    scorer: PreferenceScorer | None = None
    actor: SequenceModel | None = None  # pretrained
    normalizer: NormalizerState | None = None

    def reward_context(self) -> RewardContext:
        ctx = RewardContext(self.encoders, self.scorer, self.task.canonical_batch, self.cfg.reward_config())
        return ctx if self.normalizer is None else ctx.with_normalizer(self.normalizer)


# ---------------------------------------------------------------------------
# in-memory stages
# ---------------------------------------------------------------------------


def make_task(cfg: RunConfig) -> SyntheticTask:
    return SyntheticTask(cfg.task_config())


def gen_data(cfg: RunConfig, task: SyntheticTask) -> Dataset:
    return generate_dataset(task, cfg.data_size, stream(cfg.seed, "data"), n_pairs=cfg.n_pref_pairs)


def fit_encoders(cfg: RunConfig, task: SyntheticTask, data: Dataset) -> Encoders:
    return train_encoders(data.paired, task.n_prompts, task.vocab, cfg.max_len, cfg.encoder_config(),
                          stream(cfg.seed, "encoders"))


def features(cfg: RunConfig, task: SyntheticTask) -> FeatureTransform:
    return FeatureTransform(task.vocab, cfg.max_len, cfg.d_g, seed=cfg.seed)


def fit_scorer(cfg: RunConfig, task: SyntheticTask, data: Dataset) -> PreferenceScorer:
    return train_preference_scorer(data.preferences, features(cfg, task), cfg.scorer_config(),
                                   stream(cfg.seed, "scorer"))


def pretrain(cfg: RunConfig, data: Dataset, encoders: Encoders | None):
    actor = SequenceModel.create(cfg.model_config(), stream(cfg.seed, "init"))
    return pretrain_actor(actor, data.corpus, encoders, cfg.pretrain_config(), stream(cfg.seed, "pretrain"))


def warmup_rewards(cfg: RunConfig, actor: SequenceModel, ctx: RewardContext) -> np.ndarray:
    """Raw reward matrix of ``warmup_rollouts`` samples from the pretrained actor."""
    rng = stream(cfg.seed, "warmup")
    n = cfg.warmup_rollouts
    pids = rng.integers(0, cfg.n_prompts, n)
    groups = np.arange(n) % cfg.k
    with nx.no_grad():
        vecs = embed_prompts(actor, pids, groups, cfg.alpha_start).data
    rows = []
    for s in range(0, n, 128):
        tokens, lengths, _ = sample_batch(actor, vecs[s:s + 128], cfg.temperature, rng)
        rows.append(ctx.raw_batch(pids[s:s + 128], tokens, lengths))
    return np.concatenate(rows)


def fit_reward_normalizer(cfg: RunConfig, actor: SequenceModel, ctx: RewardContext) -> NormalizerState:
    return fit_normalizer(warmup_rewards(cfg, actor, ctx))


def build(cfg: RunConfig, upto: str = "normalizer") -> Artifacts:
    """Run every pre-RL stage in memory."""
    order = ("data", "encoders", "scorer", "pretrain", "normalizer")
    stop = order.index(upto)
    art = Artifacts(cfg, make_task(cfg))
    art.data = gen_data(cfg, art.task)
    if stop >= 1:
        art.encoders = fit_encoders(cfg, art.task, art.data)
    if stop >= 2:
        art.scorer = fit_scorer(cfg, art.task, art.data)
    if stop >= 3:
        art.actor, _ = pretrain(cfg, art.data, art.encoders)
    if stop >= 4:
        art.normalizer = fit_reward_normalizer(cfg, art.actor, art.reward_context())
    return art


def make_trainer(art: Artifacts, cfg: RunConfig | None = None) -> Trainer:
    """Fresh RL state: actor copied from the pretrained one, frozen reference, critic from the backbone."""
    cfg = cfg or art.cfg
    actor = SequenceModel(art.actor.config, art.actor.params.copy(requires_grad=True))
    ref = clone_frozen(art.actor)
    critic = critic_from_actor(art.actor)
    return Trainer.create(actor, critic, ref, art.reward_context(), cfg.ppo_config(), cfg.seed)


def evaluate_tokens(art: Artifacts, actor: SequenceModel, n_samples: int, alpha: float = 1.0,
                    temperature: float = 1.0, tokens=(None, 0, 1, 2)) -> dict:
    """oracle_eval under each conditioning; keys are None (no token) or channel index."""
    out = {}
    ctx = art.reward_context()
    for k in tokens:
        rng = stream(art.cfg.seed, "eval", -1 if k is None else k)
        out[k] = oracle_eval(actor, art.task, n_samples, rng, reward_token=k, alpha=alpha,
                             temperature=temperature, reward_ctx=ctx)
    return out


# ---------------------------------------------------------------------------
# file-backed stages
# ---------------------------------------------------------------------------


class RunDir:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out_dir)

    def path(self, name) -> Path:
        return self.root / name

    def require(self, name) -> Path:
        p = self.path(name)
        if not p.exists():
            raise CheckpointError(f"missing artifact {p}; run the stage that produces it first")
        return p

    @property
    def encoder_hash(self) -> str:
        return self.cfg.stage_hash(*ENCODER_KEYS)

    @property
    def scorer_hash(self) -> str:
        return self.cfg.stage_hash(*SCORER_KEYS)

    @property
    def normalizer_hash(self) -> str:
        return self.cfg.stage_hash(*NORMALIZER_KEYS)

    def save_config(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        dump_config(self.cfg, self.path("config.txt"))

    def load_data(self) -> Dataset:
        self.require("data")
        return read_dataset(self.path("data"))

    def load_encoders(self) -> Encoders:
        return Encoders.load(self.require("encoders.ckpt"), self.encoder_hash)

    def load_scorer(self) -> PreferenceScorer:
        return PreferenceScorer.load(self.require("scorer.ckpt"), self.scorer_hash,
                                     features(self.cfg, make_task(self.cfg)))

    def load_actor(self, name="actor_pretrained.ckpt") -> SequenceModel:
        return SequenceModel.load(self.require(name), self.cfg.model_config())

    def load_normalizer(self) -> NormalizerState:
        _, sec = read_checkpoint(self.require("normalizer.ckpt"), expected_hash=self.normalizer_hash)
        return NormalizerState.from_array(sec["bounds"])

    def artifacts(self, normalizer: bool = True) -> Artifacts:
        art = Artifacts(self.cfg, make_task(self.cfg), encoders=self.load_encoders(), scorer=self.load_scorer(),
                        actor=self.load_actor())
        if normalizer:
            art.normalizer = self.load_normalizer()
        return art


def stage_gen_data(cfg: RunConfig) -> Path:
    rd = RunDir(cfg)
    rd.save_config()
    ds = gen_data(cfg, make_task(cfg))
    write_dataset(ds, rd.path("data"))
    log.info("wrote %d paired, %d preference, %d corpus examples", len(ds.paired), len(ds.preferences),
             len(ds.corpus))
    return rd.path("data")


def stage_train_encoders(cfg: RunConfig) -> Path:
    rd = RunDir(cfg)
    enc = fit_encoders(cfg, make_task(cfg), rd.load_data())
    enc.save(rd.path("encoders.ckpt"), rd.encoder_hash)
    return rd.path("encoders.ckpt")


def stage_train_scorer(cfg: RunConfig) -> Path:
    rd = RunDir(cfg)
    scorer = fit_scorer(cfg, make_task(cfg), rd.load_data())
    scorer.save(rd.path("scorer.ckpt"), rd.scorer_hash)
    return rd.path("scorer.ckpt")


def stage_pretrain(cfg: RunConfig) -> Path:
    rd = RunDir(cfg)
    enc = rd.load_encoders() if cfg.w_align else None
    actor, history = pretrain(cfg, rd.load_data(), enc)
    actor.save(rd.path("actor_pretrained.ckpt"))
    if history:
        log.info("pretrain held-out loss %.4f, next-token accuracy %.3f", history[-1][2], history[-1][3])
    return rd.path("actor_pretrained.ckpt")


def stage_fit_normalizer(cfg: RunConfig) -> NormalizerState:
    rd = RunDir(cfg)
    art = rd.artifacts(normalizer=False)
    state = fit_reward_normalizer(cfg, art.actor, art.reward_context())
    write_checkpoint(rd.path("normalizer.ckpt"), {"bounds": state.as_array()}, rd.normalizer_hash)
    return state


def metrics_header(cfg: RunConfig, state: NormalizerState) -> dict:
    return {"config_hash": cfg.config_hash(), "mode": cfg.mode,
            "normalizer_min": " ".join(repr(v) for v in state.min_val),
            "normalizer_max": " ".join(repr(v) for v in state.max_val),
            "channels": " ".join(CHANNELS[:cfg.k])}


def stage_train_rl(cfg: RunConfig, resume: bool = False) -> Path:
    rd = RunDir(cfg)
    rd.save_config()
    art = rd.artifacts()
    trainer = make_trainer(art)
    state_path = rd.path("rl_state.ckpt")
    if resume and state_path.exists():
        trainer.load(state_path, cfg.config_hash())
        log.info("resumed from iteration %d", trainer.state.iteration)
    metrics = MetricsWriter(rd.path("metrics.csv"), cfg.k, metrics_header(cfg, art.normalizer),
                            resume=resume and state_path.exists())
    if resume:
        metrics.truncate_after(trainer.state.iteration)
    trainer.run(metrics=metrics, checkpoint_path=state_path, checkpoint_every=cfg.checkpoint_every,
                config_hash=cfg.config_hash())
    trainer.save(state_path, cfg.config_hash())
    trainer.state.actor.save(rd.path("actor.ckpt"))
    return rd.path("metrics.csv")


def stage_evaluate(cfg: RunConfig, name: str = "actor.ckpt") -> dict:
    rd = RunDir(cfg)
    art = rd.artifacts()
    actor = rd.load_actor(name)
    rng = stream(cfg.seed, "eval", 99)
    return oracle_eval(actor, art.task, cfg.eval_samples, rng, reward_ctx=art.reward_context())


def stage_ablate_tokens(cfg: RunConfig, name: str = "actor.ckpt") -> dict:
    rd = RunDir(cfg)
    art = rd.artifacts()
    return evaluate_tokens(art, rd.load_actor(name), cfg.eval_samples, alpha=cfg.alpha_end,
                           tokens=(None,) + tuple(range(cfg.k)))
