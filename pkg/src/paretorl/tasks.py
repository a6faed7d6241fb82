"""Synthetic multi-objective sequence tasks.

Each prompt owns a canonical token sequence (a bounded random walk over the
codebook) that stands in for the ground-truth motion.  A hidden preference
function, seeded separately, scores sequences by a random per-token affinity
plus a smoothness bonus, so the smoothest sequences it likes are not the
canonical ones and the reward channels pull in different directions.

The module also holds supervised pretraining of the actor and the oracle
evaluation that reads only these hidden quantities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .policy import SequenceModel, TokenSequence, Vocabulary, embed_prompts, pack, sample_batch, step_mask
from .rng import stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaskConfig:
    seed: int = 0
    n_prompts: int = 8
    codebook_size: int = 32
    min_len: int = 12
    max_len: int = 20
    noise: float = 0.1
    max_step: int = 3
    smooth_weight: float = 0.25
    length_weight: float = 0.05
    affinity_scale: float = 0.5


@dataclass(frozen=True)
class PairedExample:
    prompt_id: int
    sequence: TokenSequence
    y: int


@dataclass(frozen=True)
class PreferencePair:
    prompt_id: int
    better: TokenSequence
    worse: TokenSequence


@dataclass
class Dataset:
    paired: list = field(default_factory=list)
    preferences: list = field(default_factory=list)
    corpus: list = field(default_factory=list)  # (prompt_id, TokenSequence)


class SyntheticTask:
    def __init__(self, cfg: TaskConfig = TaskConfig()):
        if cfg.min_len < 1 or cfg.max_len < cfg.min_len:
            raise ValueError("need 1 <= min_len <= max_len")
        self.cfg = cfg
        self.vocab = Vocabulary(cfg.codebook_size)
        rng = stream(cfg.seed, "task")
        v, p = cfg.codebook_size, cfg.n_prompts
        self._canonical = []
        starts = (np.arange(p) * v // p + rng.integers(0, max(v // p, 1), p)) % v
        for pid in range(p):
            n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
            walk = [int(starts[pid])]
            for _ in range(n - 1):
                step = int(rng.integers(1, cfg.max_step + 1)) * (1 if rng.random() < 0.5 else -1)
                nxt = walk[-1] + step
                if nxt < 0 or nxt >= v:
                    nxt = walk[-1] - step
                walk.append(nxt)
            self._canonical.append(TokenSequence.from_codes(walk, self.vocab))
        # the preference oracle gets its own stream: nothing trained ever touches it
        self._affinity = stream(cfg.seed, "preference").normal(0.0, cfg.affinity_scale, v)
        self._target_len = 0.5 * (cfg.min_len + cfg.max_len)

    @property
    def n_prompts(self) -> int:
        return self.cfg.n_prompts

    def canonical(self, prompt_id: int) -> TokenSequence:
        if not 0 <= prompt_id < self.cfg.n_prompts:
            raise KeyError(f"no ground-truth sequence for prompt {prompt_id}")
        return self._canonical[prompt_id]

    def canonical_batch(self, prompt_ids, max_len: int):
        return pack([self.canonical(int(p)) for p in prompt_ids], self.vocab, max_len)

    # -- hidden preference ------------------------------------------------

    def hidden_preference(self, seq: TokenSequence) -> float:
        tokens, lengths = pack([seq], self.vocab, max(len(seq), 1))
        return float(self.hidden_preference_batch(tokens, lengths)[0])

    def hidden_preference_batch(self, tokens: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        """Affinity of the token mix + smoothness bonus - length penalty."""
        cfg = self.cfg
        n_codes = np.asarray(lengths) - 1
        live = step_mask(n_codes, tokens.shape[1])
        codes = np.where(live, tokens, 0)
        aff = np.where(live, self._affinity[codes], 0.0).sum(axis=1) / np.maximum(n_codes, 1)
        diffs = np.abs(np.diff(codes, axis=1)).astype(np.float64)
        dlive = live[:, 1:] & live[:, :-1]
        mean_jump = np.where(dlive, diffs, 0.0).sum(axis=1) / np.maximum(dlive.sum(axis=1), 1)
        return aff - cfg.smooth_weight * mean_jump - cfg.length_weight * np.abs(n_codes - self._target_len)

    # -- sequence generators -----------------------------------------------

    def noisy(self, prompt_id: int, p: float, rng: np.random.Generator) -> TokenSequence:
        codes = np.array(self.canonical(prompt_id).codes)
        flip = rng.random(codes.size) < p
        codes[flip] = rng.integers(0, self.cfg.codebook_size, int(flip.sum()))
        return TokenSequence.from_codes(codes, self.vocab)

    def smooth_walk(self, rng: np.random.Generator, max_step: int = 1) -> TokenSequence:
        v = self.cfg.codebook_size
        n = int(rng.integers(self.cfg.min_len, self.cfg.max_len + 1))
        walk = np.clip(int(rng.integers(0, v)) + np.cumsum(rng.integers(-max_step, max_step + 1, n)), 0, v - 1)
        return TokenSequence.from_codes(walk, self.vocab)


def _preference_candidate(task: SyntheticTask, pid: int, rng: np.random.Generator) -> TokenSequence:
    kind = rng.integers(0, 4)
    if kind == 0:
        return task.noisy(pid, float(rng.choice([0.0, 0.1, 0.3])), rng)
    if kind == 1:
        return task.noisy(pid, float(rng.choice([0.6, 1.0])), rng)
    if kind == 2:
        return task.smooth_walk(rng, max_step=int(rng.integers(0, 3)))
    n = int(rng.integers(task.cfg.min_len, task.cfg.max_len + 1))
    return TokenSequence.from_codes(rng.integers(0, task.cfg.codebook_size, n), task.vocab)


def generate_dataset(task: SyntheticTask, size: int, rng: np.random.Generator,
                     n_pairs: int | None = None) -> Dataset:
    """Matched/unmatched pairs, preference pairs and a pretraining corpus.

    ``size`` positives, ``size`` negatives and ``size`` corpus sequences are
    drawn with prompts cycled; ``n_pairs`` (default ``size``) preference pairs
    are labelled by the hidden preference function, exact ties skipped.
    """
    p = task.n_prompts
    if size < p:
        raise ValueError(f"size {size} must be >= number of prompts {p}")
    n_pairs = size if n_pairs is None else n_pairs
    ds = Dataset()
    positives = {pid: set() for pid in range(p)}
    for i in range(size):
        pid = i % p
        s = task.noisy(pid, task.cfg.noise, rng)
        positives[pid].add(s.tokens)
        ds.paired.append(PairedExample(pid, s, 1))
    n_neg = 0
    while p > 1 and n_neg < size:
        pid = int(rng.integers(0, p))
        other = int((pid + rng.integers(1, p)) % p)
        s = task.noisy(other, task.cfg.noise, rng)
        if s.tokens in positives[pid]:
            continue
        ds.paired.append(PairedExample(pid, s, 0))
        n_neg += 1
    while len(ds.preferences) < n_pairs:
        pid = int(rng.integers(0, p))
        a, b = _preference_candidate(task, pid, rng), _preference_candidate(task, pid, rng)
        sa, sb = task.hidden_preference(a), task.hidden_preference(b)
        if sa == sb:
            continue
        ds.preferences.append(PreferencePair(pid, a, b) if sa > sb else PreferencePair(pid, b, a))
    for i in range(size):
        pid = i % p
        ds.corpus.append((pid, task.noisy(pid, task.cfg.noise, rng)))
    return ds


# ---------------------------------------------------------------------------
# line-oriented text format: "prompt_id<TAB>tok tok ...<TAB>label"
# ---------------------------------------------------------------------------


def _line(pid, seq, label):
    return f"{pid}\t{' '.join(str(t) for t in seq.tokens)}\t{label}\n"


def write_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "paired.txt", "w") as fh:
        fh.writelines(_line(e.prompt_id, e.sequence, e.y) for e in ds.paired)
    with open(d / "preferences.txt", "w") as fh:
        # consecutive lines form one pair: label 1 = better, 0 = worse
        for pr in ds.preferences:
            fh.write(_line(pr.prompt_id, pr.better, 1))
            fh.write(_line(pr.prompt_id, pr.worse, 0))
    with open(d / "corpus.txt", "w") as fh:
        fh.writelines(_line(pid, s, 1) for pid, s in ds.corpus)


def _read_lines(path):
    out = []
    with open(path) as fh:
        for n, raw in enumerate(fh, 1):
            raw = raw.rstrip("\n")
            if not raw:
                continue
            parts = raw.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{n}: expected 3 tab-separated fields")
            out.append((int(parts[0]), TokenSequence(tuple(int(t) for t in parts[1].split())), int(parts[2])))
    return out


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    ds = Dataset()
    ds.paired = [PairedExample(p, s, y) for p, s, y in _read_lines(d / "paired.txt")]
    prefs = _read_lines(d / "preferences.txt")
    if len(prefs) % 2:
        raise ValueError("preferences.txt must hold an even number of lines")
    for (p1, s1, l1), (p2, s2, l2) in zip(prefs[::2], prefs[1::2]):
        if p1 != p2 or (l1, l2) != (1, 0):
            raise ValueError("malformed preference pair in preferences.txt")
        ds.preferences.append(PreferencePair(p1, s1, s2))
    ds.corpus = [(p, s) for p, s, _ in _read_lines(d / "corpus.txt")]
    return ds


# ---------------------------------------------------------------------------
# supervised pretraining
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 400
    batch_size: int = 64
    lr: float = 3e-3
    w_align: float = 0.1
    holdout: float = 0.1
    eval_every: int = 40


def _teacher_forced(actor: SequenceModel, pids, tokens, lengths):
    vecs = embed_prompts(actor, pids)
    logits = actor.forward(vecs, tokens) + actor._pad_mask
    target = np.where(tokens == actor.vocab.pad_id, actor.vocab.end_id, tokens)
    mask = step_mask(lengths, tokens.shape[1]).astype(actor.params.flat.dtype)
    return logits, target, mask


def pretrain_loss(actor: SequenceModel, pids, tokens, lengths, encoders=None, w_align: float = 0.0):
    """Next-token cross-entropy plus ``w_align`` times the alignment term.

    The alignment term is the squared distance between the encoder's prompt
    embedding and the encoder embedding of the actor's teacher-forced soft
    prediction (probability-weighted token mix), which keeps it differentiable.
    """
    logits, target, mask = _teacher_forced(actor, pids, tokens, lengths)
    ce = nx.sum_(nx.cross_entropy_from_logits(logits, target) * mask) / float(mask.sum())
    if not w_align or encoders is None:
        return ce
    fam = encoders.align_family()
    probs = nx.softmax_rows(logits)
    f_m = fam.soft_sequence_embedding(probs, mask)
    f_t = fam.prompt_embedding(pids).data
    align = nx.mean(nx.sum_(nx.squared_error(f_m, f_t), axis=-1))
    return ce + align * w_align


def next_token_accuracy(actor: SequenceModel, pids, tokens, lengths) -> float:
    with nx.no_grad():
        logits, target, mask = _teacher_forced(actor, pids, tokens, lengths)
    hit = (logits.data.argmax(axis=-1) == target) & mask.astype(bool)
    return float(hit.sum() / mask.sum())


def pretrain_actor(actor: SequenceModel, corpus, encoders=None, cfg: PretrainConfig = PretrainConfig(),
                   rng: np.random.Generator | None = None):
    """Teacher-forced training on (prompt_id, sequence) pairs.

    Returns (actor, history) where history rows are
    (step, train loss, held-out loss, held-out next-token accuracy).
    """
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    rng = rng or np.random.default_rng(0)
    vocab, t = actor.vocab, actor.config.max_len
    order = rng.permutation(len(corpus))
    n_hold = int(round(cfg.holdout * len(corpus)))
    hold = [corpus[i] for i in order[:n_hold]]
    train = [corpus[i] for i in order[n_hold:]] or hold
    tr_p = np.array([p for p, _ in train])
    tr_t, tr_l = pack([s for _, s in train], vocab, t)
    if hold:
        ho_p = np.array([p for p, _ in hold])
        ho_t, ho_l = pack([s for _, s in hold], vocab, t)
    opt = nx.AdamWState.for_store(actor.params, lr=cfg.lr)
    history = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(train), min(cfg.batch_size, len(train)))
        with nx.Tape() as tape:
            loss = pretrain_loss(actor, tr_p[idx], tr_t[idx], tr_l[idx], encoders, cfg.w_align)
        nx.backward(tape, loss)
        nx.adamw_step(actor.params, opt)
        if hold and (step % cfg.eval_every == 0 or step == cfg.steps):
            with nx.no_grad():
                hl = float(pretrain_loss(actor, ho_p, ho_t, ho_l).data)
            history.append((step, float(loss.data), hl, next_token_accuracy(actor, ho_p, ho_t, ho_l)))
            log.debug("pretrain step %d loss %.4f heldout %.4f acc %.3f", *history[-1])
    return actor, history


# ---------------------------------------------------------------------------
# oracle evaluation
# ---------------------------------------------------------------------------


def oracle_eval(actor: SequenceModel, task: SyntheticTask, n_samples: int, rng: np.random.Generator,
                reward_token=None, alpha: float = 1.0, temperature: float = 1.0, reward_ctx=None) -> dict:
    """Scores that only the hidden task knows, plus learned rewards if a context is given.

    ``n_samples`` sequences are drawn per prompt under one conditioning
    (``reward_token`` None means no token).  Returned keys:
    match_rate (exact canonical sequence), token_accuracy, preference (hidden
    preference mean) and, with ``reward_ctx``, raw/normalized channel means and
    the per-sample normalized matrix.
    """
    p, t = task.n_prompts, actor.config.max_len
    pids = np.repeat(np.arange(p), n_samples)
    ks = None if reward_token is None else np.full(pids.shape, reward_token)
    with nx.no_grad():
        vecs = embed_prompts(actor, pids, ks, alpha).data
    tokens, lengths, _ = sample_batch(actor, vecs, temperature, rng)
    gt, gl = task.canonical_batch(pids, t)
    exact = np.all(tokens == gt, axis=1)
    live = step_mask(np.maximum(lengths, gl), t)
    tok_acc = float(((tokens == gt) & live).sum() / live.sum())
    out = {
        "match_rate": float(exact.mean()),
        "token_accuracy": tok_acc,
        "preference": float(task.hidden_preference_batch(tokens, lengths).mean()),
        "mean_length": float(lengths.mean()),
    }
    if reward_ctx is not None:
        raw, norm = reward_ctx.batch(pids, tokens, lengths)
        out["raw"] = raw.mean(axis=0)
        out["normalized"] = norm.mean(axis=0)
        out["normalized_samples"] = norm
    return out
