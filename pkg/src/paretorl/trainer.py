"""PPO fine-tuning with a Pareto-filtered multi-reward objective.

One iteration draws a prompt, samples K groups of N sequences (group k
conditioned on reward token k), scores every sample on all K channels,
keeps each group's non-dominated set for the actor objective, and runs a few
epochs of clipped-surrogate PPO.  The critic regresses returns on every
sample.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from ._kernels import discounted_tail_sums
from .checkpoint import read_checkpoint, write_checkpoint
from .pareto import non_dominated_set
from .policy import SequenceModel, embed_prompts, sample_batch, step_mask
from .rewards import CHANNELS, NormalizerState, RewardContext
from .rng import stream

log = logging.getLogger(__name__)

PARETO = "pareto"
WEIGHTED_SUM = "weighted-sum"
MODES = (PARETO, WEIGHTED_SUM)


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class PPOConfig:
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
    mode: str = PARETO

    def __post_init__(self):
        checks = [
            (0 < self.clip_eps < 1, "clip_eps must be in (0, 1)"),
            (self.beta >= 0, "beta must be >= 0"),
            (0 < self.gamma <= 1, "gamma must be in (0, 1]"),
            (self.n_per_group >= 2, "n_per_group must be >= 2"),
            (self.k >= 2, "k must be >= 2"),
            (self.ppo_epochs >= 1, "ppo_epochs must be >= 1"),
            (self.minibatch >= 1, "minibatch must be >= 1"),
            (self.lr > 0 and self.critic_lr > 0, "learning rates must be > 0"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
            (self.iterations >= 0, "iterations must be >= 0"),
            (self.temperature > 0, "temperature must be > 0"),
            (self.value_coef > 0, "value_coef must be > 0"),
            (self.token_lr_mult > 0, "token_lr_mult must be > 0"),
            (0 <= self.alpha_start <= 1 and 0 <= self.alpha_end <= 1, "alpha schedule must lie in [0, 1]"),
            (self.mode in MODES, f"mode must be one of {MODES}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def alpha(self, iteration: int) -> float:
        """Linear blend schedule from alpha_start at iteration 0 to alpha_end at the last."""
        span = max(self.iterations - 1, 1)
        frac = min(max(iteration / span, 0.0), 1.0)
        return self.alpha_start + (self.alpha_end - self.alpha_start) * frac


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------


@dataclass
class RolloutBatch:
    prompt_ids: np.ndarray  # (B,)
    groups: np.ndarray  # (B,) reward token of each sample
    alpha: float
    tokens: np.ndarray  # (B, T)
    lengths: np.ndarray  # (B,)
    logp_old: np.ndarray  # (B, T) at the sampling temperature, zero past the end
    logp_ref: np.ndarray
    values: np.ndarray
    raw: np.ndarray  # (B, K)
    norm: np.ndarray
    pareto: np.ndarray  # (B,) bool
    terminal: np.ndarray  # (B,)
    temperature: float = 1.0  # sampling temperature; log-probs are scored under it
    returns: np.ndarray | None = None
    adv: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return step_mask(self.lengths, self.tokens.shape[1])

    def group_sizes(self, k: int) -> np.ndarray:
        return np.array([int(self.pareto[self.groups == g].sum()) for g in range(k)])


def _masked_logp(model, vecs, tokens, lengths, temperature=1.0):
    with nx.no_grad():
        lp = model.step_log_probs(vecs, tokens, temperature).data.astype(np.float64)
    return np.where(step_mask(lengths, tokens.shape[1]), lp, 0.0)


def terminal_rewards(norm: np.ndarray, groups: np.ndarray, mode: str) -> np.ndarray:
    """Group k's own channel in Pareto mode; the channel mean in the weighted-sum baseline."""
    if mode == WEIGHTED_SUM:
        return norm.mean(axis=1)
    return norm[np.arange(norm.shape[0]), groups]


def collect_rollouts(actor: SequenceModel, ref: SequenceModel, critic: SequenceModel, reward_ctx: RewardContext,
                     cfg: PPOConfig, rng: np.random.Generator, prompt_id: int, alpha: float) -> RolloutBatch:
    k, n = cfg.k, cfg.n_per_group
    pids = np.full(k * n, prompt_id, dtype=np.int64)
    groups = np.repeat(np.arange(k), n)
    alphas = np.full(k * n, alpha)
    with nx.no_grad():
        vecs = embed_prompts(actor, pids, groups, alphas)
        # log-probs (policy and reference) are taken under the sampling
        # distribution, so the PPO ratio is a true on-policy importance ratio
        tokens, lengths, logp = sample_batch(actor, vecs, cfg.temperature, rng, score_temperature=cfg.temperature)
        logp_ref = _masked_logp(ref, embed_prompts(ref, pids, groups, alphas), tokens, lengths, cfg.temperature)
        cvals = critic.values(embed_prompts(critic, pids, groups, alphas), tokens).data.astype(np.float64)
    mask = step_mask(lengths, tokens.shape[1])
    raw, norm = reward_ctx.batch(pids, tokens, lengths)
    if cfg.mode == PARETO:
        pareto = np.zeros(k * n, dtype=bool)
        for g in range(k):
            rows = np.flatnonzero(groups == g)
            pareto[rows[non_dominated_set(norm[rows]).mask(n)]] = True
    else:
        pareto = np.ones(k * n, dtype=bool)
    return RolloutBatch(pids, groups, float(alpha), tokens, lengths, logp, logp_ref, np.where(mask, cvals, 0.0),
                        raw, norm, pareto, terminal_rewards(norm, groups, cfg.mode), cfg.temperature)


def shaped_returns(batch: RolloutBatch, beta: float, gamma: float) -> np.ndarray:
    """Per-step KL penalty plus the terminal reward at the End step, summed over the tail."""
    mask = batch.mask
    stream_ = np.where(mask, -beta * (batch.logp_old - batch.logp_ref), 0.0)
    stream_[np.arange(batch.size), batch.lengths - 1] += batch.terminal
    return discounted_tail_sums(stream_, batch.lengths, gamma)


def advantages(G: np.ndarray, V: np.ndarray, mask: np.ndarray | None = None, groups: np.ndarray | None = None,
               standardize: bool = True) -> np.ndarray:
    """G - V, then standardised over valid steps.

    With ``groups`` each group is standardised on its own.  Every group then
    has zero mean and unit variance, so the whole batch does too, while
    channels on different scales never shift one another's advantages.
    """
    G, V = np.asarray(G, dtype=np.float64), np.asarray(V, dtype=np.float64)
    if G.shape != V.shape:
        raise nx.ShapeError(f"advantages: returns {G.shape} vs values {V.shape}")
    A = G - V
    if not standardize:
        return A
    m = np.ones(A.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    rows = np.zeros(A.shape[0], dtype=np.int64) if groups is None else np.asarray(groups)
    out = np.zeros_like(A)
    for g in np.unique(rows):
        sel = m & (rows == g)[:, None]
        live = A[sel]
        out[sel] = (live - live.mean()) / (live.std() + 1e-8)
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def clipped_surrogate(logp_new, logp_old, A, eps: float) -> nx.Tensor:
    """Per-step -min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)."""
    logp_new = nx.as_tensor(logp_new)
    dt = logp_new.data.dtype
    ratio = nx.exp(logp_new - np.asarray(logp_old, dtype=dt))
    A = np.asarray(A, dtype=dt)
    return -nx.minimum(ratio * A, nx.clip(ratio, 1.0 - eps, 1.0 + eps) * A)


def actor_loss(logp_new, logp_old, A, eps: float) -> nx.Tensor:
    """Mean clipped-surrogate loss over the steps of one aligned vector."""
    return nx.mean(clipped_surrogate(logp_new, logp_old, A, eps))


def critic_loss(V, G) -> nx.Tensor:
    return nx.mean(nx.squared_error(V, G))


def sample_weights(pareto: np.ndarray, groups: np.ndarray, k: int) -> np.ndarray:
    """1 / n(P_k) for members of group k's set, 0 elsewhere, divided by K.

    With every sample a member and equal group sizes this is the uniform
    1 / (K N), i.e. the plain PPO batch mean.
    """
    w = np.zeros(pareto.shape[0])
    for g in range(k):
        sel = (groups == g) & pareto
        if sel.any():
            w[sel] = 1.0 / (sel.sum() * k)
    return w


def batch_actor_loss(actor: SequenceModel, batch: RolloutBatch, idx: np.ndarray, weights: np.ndarray,
                     eps: float) -> nx.Tensor:
    mask = batch.mask[idx]
    vecs = embed_prompts(actor, batch.prompt_ids[idx], batch.groups[idx], np.full(idx.size, batch.alpha))
    lp = actor.step_log_probs(vecs, batch.tokens[idx], batch.temperature)
    per_step = clipped_surrogate(lp, batch.logp_old[idx], batch.adv[idx], eps)
    dt = lp.data.dtype
    # weight_i / len_i spreads each sample's weight over its steps
    coef = np.where(mask, (weights[idx] / batch.lengths[idx])[:, None], 0.0).astype(dt)
    return nx.sum_(per_step * coef)


def batch_critic_loss(critic: SequenceModel, batch: RolloutBatch, idx: np.ndarray) -> nx.Tensor:
    mask = batch.mask[idx]
    vecs = embed_prompts(critic, batch.prompt_ids[idx], batch.groups[idx], np.full(idx.size, batch.alpha))
    v = critic.values(vecs, batch.tokens[idx])
    dt = v.data.dtype
    coef = (mask / mask.sum()).astype(dt)
    return nx.sum_(nx.squared_error(v, batch.returns[idx].astype(dt)) * coef)


# ---------------------------------------------------------------------------
# update
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    actor: SequenceModel
    critic: SequenceModel
    ref: SequenceModel
    actor_opt: nx.AdamWState
    critic_opt: nx.AdamWState
    iteration: int = 0

    @classmethod
    def start(cls, actor, critic, ref, cfg: PPOConfig) -> "TrainState":
        # reward-token vectors start at zero and are the only parameters RL
        # introduces, so they may get a larger step than the pretrained weights
        scale = None
        if cfg.token_lr_mult != 1.0:
            scale = actor.params.scale_vector({"reward_emb": cfg.token_lr_mult})
        return cls(actor, critic, ref,
                   nx.AdamWState.for_store(actor.params, lr=cfg.lr, weight_decay=cfg.weight_decay, lr_scale=scale),
                   nx.AdamWState.for_store(critic.params, lr=cfg.critic_lr, weight_decay=cfg.weight_decay))

    def snapshot(self):
        return (self.actor.params.flat.copy(), self.critic.params.flat.copy(), self.actor_opt.copy(),
                self.critic_opt.copy())

    def restore(self, snap) -> None:
        a, c, ao, co = snap
        self.actor.params.load_flat(a)
        self.critic.params.load_flat(c)
        self.actor.params.zero_grad()
        self.critic.params.zero_grad()
        self.actor_opt, self.critic_opt = ao, co


def _step(loss: nx.Tensor, tape: nx.Tape, params, opt) -> float:
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingAborted(f"non-finite loss {value}")
    nx.backward(tape, loss)
    try:
        nx.adamw_step(params, opt)
    except nx.NonFiniteGradientError as exc:
        raise TrainingAborted(str(exc)) from exc
    return value


def ppo_update(state: TrainState, batch: RolloutBatch, cfg: PPOConfig, rng: np.random.Generator) -> dict:
    """Clipped PPO on Pareto members (actor) and on every sample (critic).

    On a non-finite loss or gradient the models and optimisers are rolled back
    to their state before the call and ``aborted`` is set in the result.
    """
    snap = state.snapshot()
    weights = sample_weights(batch.pareto, batch.groups, cfg.k)
    a_losses, c_losses = [], []
    try:
        for _ in range(cfg.ppo_epochs):
            order = rng.permutation(batch.size)
            for start in range(0, batch.size, cfg.minibatch):
                idx = np.sort(order[start:start + cfg.minibatch])
                if weights[idx].any():
                    with nx.Tape() as tape:
                        loss = batch_actor_loss(state.actor, batch, idx, weights, cfg.clip_eps)
                    a_losses.append(_step(loss, tape, state.actor.params, state.actor_opt))
                with nx.Tape() as tape:
                    loss = batch_critic_loss(state.critic, batch, idx) * cfg.value_coef
                c_losses.append(_step(loss, tape, state.critic.params, state.critic_opt) / cfg.value_coef)
    except TrainingAborted as exc:
        state.restore(snap)
        log.warning("iteration %d: update rolled back (%s)", state.iteration, exc)
        return {"actor_loss": float("nan"), "critic_loss": float("nan"), "aborted": True}
    return {"actor_loss": float(np.mean(a_losses)) if a_losses else 0.0,
            "critic_loss": float(np.mean(c_losses)), "aborted": False}


def prepare_batch(batch: RolloutBatch, cfg: PPOConfig) -> RolloutBatch:
    batch.returns = shaped_returns(batch, cfg.beta, cfg.gamma)
    batch.adv = advantages(batch.returns, batch.values, batch.mask, batch.groups)
    return batch


def rollout_kl(batch: RolloutBatch) -> float:
    """Mean over samples of the summed per-step log-ratio against the reference."""
    return float(np.where(batch.mask, batch.logp_old - batch.logp_ref, 0.0).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def metric_columns(k: int) -> list:
    cols = ["iteration", "prompt_id", "alpha"]
    cols += [f"raw_{c}" for c in CHANNELS[:k]]
    cols += [f"norm_{c}" for c in CHANNELS[:k]]
    cols += [f"pareto_n_{g}" for g in range(k)]
    cols += ["kl", "actor_loss", "critic_loss", "aborted", "wall_clock_ms"]
    return cols


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class MetricsWriter:
    """Append-only metrics CSV with ``#``-prefixed provenance lines on top."""

    def __init__(self, path, k: int, header: dict, resume: bool = False):
        self.path = Path(path)
        self.columns = metric_columns(k)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if resume and self.path.exists():
            return
        with self.path.open("w", newline="") as fh:
            for key, value in header.items():
                fh.write(f"# {key}={value}\n")
            csv.writer(fh).writerow(self.columns)

    def truncate_after(self, iteration: int) -> None:
        """Drop rows beyond ``iteration`` (used when resuming from a checkpoint)."""
        lines = self.path.read_text().splitlines(keepends=True)
        keep = []
        for line in lines:
            if line.startswith("#") or line.startswith(self.columns[0] + ","):
                keep.append(line)
                continue
            if int(line.split(",", 1)[0]) <= iteration:
                keep.append(line)
        self.path.write_text("".join(keep))

    def write(self, row: dict) -> None:
        buf = io.StringIO()
        csv.writer(buf).writerow([_fmt(row[c]) for c in self.columns])
        with self.path.open("a", newline="") as fh:
            fh.write(buf.getvalue())


def read_metrics(path) -> tuple[dict, list]:
    """(header key/values, list of row dicts with float values)."""
    header, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            header[key] = value
        else:
            body.append(line)
    rows = list(csv.DictReader(body))
    return header, [{k: float(v) for k, v in r.items()} for r in rows]


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


@dataclass
class Trainer:
    """Owns the models, the reward context and the per-iteration bookkeeping."""

    state: TrainState
    reward_ctx: RewardContext
    cfg: PPOConfig
    seed: int
    n_prompts: int
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, actor, critic, ref, reward_ctx, cfg: PPOConfig, seed: int) -> "Trainer":
        if reward_ctx.normalizer is None:
            raise ValueError("reward normalizer must be fitted before RL")
        return cls(TrainState.start(actor, critic, ref, cfg), reward_ctx, cfg, seed, actor.config.n_prompts)

    def iteration(self) -> dict:
        """Run one iteration (rollout, returns, update) and return its metrics row."""
        cfg, st = self.cfg, self.state
        e = st.iteration
        t0 = time.perf_counter()
        rng = stream(self.seed, "rollout", e)
        pid = int(rng.integers(0, self.n_prompts))
        batch = collect_rollouts(st.actor, st.ref, st.critic, self.reward_ctx, cfg, rng, pid, cfg.alpha(e))
        prepare_batch(batch, cfg)
        upd = ppo_update(st, batch, cfg, stream(self.seed, "shuffle", e))
        st.iteration += 1
        row = {"iteration": e + 1, "prompt_id": pid, "alpha": batch.alpha}
        for c, name in enumerate(CHANNELS[:cfg.k]):
            row[f"raw_{name}"] = batch.raw[:, c].mean()
            row[f"norm_{name}"] = batch.norm[:, c].mean()
        for g, size in enumerate(batch.group_sizes(cfg.k)):
            row[f"pareto_n_{g}"] = int(size)
        row.update(kl=rollout_kl(batch), actor_loss=upd["actor_loss"], critic_loss=upd["critic_loss"],
                   aborted=upd["aborted"], wall_clock_ms=(time.perf_counter() - t0) * 1000.0)
        self.history.append(row)
        return row

    def run(self, iterations: int | None = None, metrics: MetricsWriter | None = None, checkpoint_path=None,
            checkpoint_every: int = 0, config_hash: str = "", max_consecutive_aborts: int = 3) -> list:
        """Iterate until ``iterations`` total; raises TrainingAborted after repeated rollbacks."""
        total = self.cfg.iterations if iterations is None else iterations
        streak = 0
        while self.state.iteration < total:
            row = self.iteration()
            if metrics is not None:
                metrics.write(row)
            if row["aborted"]:
                streak += 1
                log.warning("iteration %d aborted; continuing from rolled-back state", row["iteration"])
                if streak >= max_consecutive_aborts:
                    raise TrainingAborted(f"{streak} consecutive iterations rolled back at iteration {row['iteration']}")
            else:
                streak = 0
            if checkpoint_path and checkpoint_every and self.state.iteration % checkpoint_every == 0:
                self.save(checkpoint_path, config_hash)
        return self.history

    # -- checkpoints -------------------------------------------------------

    def save(self, path, config_hash: str) -> None:
        st = self.state
        sec = {"iteration": np.array([st.iteration]), "actor": st.actor.params.flat, "critic": st.critic.params.flat,
               "normalizer": self.reward_ctx.normalizer.as_array()}
        for name, opt in (("actor_opt", st.actor_opt), ("critic_opt", st.critic_opt)):
            sec[f"{name}.m"] = opt.m
            sec[f"{name}.v"] = opt.v
            sec[f"{name}.step"] = np.array([opt.step])
        write_checkpoint(path, sec, config_hash)

    def load(self, path, config_hash: str) -> None:
        """Restore models, optimiser moments and the iteration counter in place."""
        _, sec = read_checkpoint(path, expected_hash=config_hash)
        st = self.state
        st.actor.params.load_flat(sec["actor"].astype(st.actor.params.flat.dtype))
        st.critic.params.load_flat(sec["critic"].astype(st.critic.params.flat.dtype))
        for name, opt in (("actor_opt", st.actor_opt), ("critic_opt", st.critic_opt)):
            opt.m[...] = sec[f"{name}.m"]
            opt.v[...] = sec[f"{name}.v"]
            opt.step = int(sec[f"{name}.step"][0])
        st.iteration = int(sec["iteration"][0])
        self.reward_ctx = self.reward_ctx.with_normalizer(NormalizerState.from_array(sec["normalizer"]))
        self.history = []


def train_loop(actor, critic, ref, reward_ctx, cfg: PPOConfig, seed: int, **run_kwargs):
    """Run ``cfg.iterations`` iterations; returns (actor, metrics history)."""
    trainer = Trainer.create(actor, critic, ref, reward_ctx, cfg, seed)
    history = trainer.run(**run_kwargs)
    return trainer.state.actor, history
