"""Paired prompt/sequence encoders and the pairwise preference scorer.

Two encoder families are trained: one with the margin contrastive loss over
matched/unmatched pairs, one with symmetric InfoNCE over in-batch positives.
The reward module reads both.  The preference scorer is a one-hidden-layer
network over a fixed feature transform of the sequence, fitted with the
Bradley-Terry pairwise loss.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .checkpoint import read_checkpoint, write_checkpoint
from .numerics import ParameterStore, Tensor
from .policy import TokenSequence, Vocabulary, pack, step_mask

log = logging.getLogger(__name__)

CONTRASTIVE = "contrastive"
INFONCE = "infonce"


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def contrastive_loss(f_t, f_m, y, margin: float = 1.0) -> Tensor:
    """Mean over rows of y*d^2 + (1-y)*max(0, margin - d)^2, d the Euclidean distance."""
    if margin <= 0:
        raise ValueError("margin must be > 0")
    f_t, f_m = nx.as_tensor(f_t), nx.as_tensor(f_m)
    if f_t.shape != f_m.shape:
        raise nx.ShapeError(f"contrastive_loss: {f_t.shape} vs {f_m.shape}")
    sq = nx.sum_(nx.squared_error(f_t, f_m), axis=-1)
    y = np.asarray(y, dtype=sq.data.dtype).reshape(sq.shape)
    # the 1e-12 keeps d differentiable at zero; positives never use it
    dist = nx.sqrt(sq + 1e-12)
    hinge = nx.relu(margin - dist)
    per = sq * y + hinge * hinge * (1.0 - y)
    return nx.mean(per)


def l2_normalize(x) -> Tensor:
    x = nx.as_tensor(x)
    return x / nx.sqrt(nx.sum_(x * x, axis=-1, keepdims=True) + 1e-12)


def infonce_loss(f_t, f_m, tau) -> Tensor:
    """Symmetric InfoNCE over a batch of paired rows (rows are L2-normalised first)."""
    f_t, f_m = nx.as_tensor(f_t), nx.as_tensor(f_m)
    if f_t.ndim != 2 or f_t.shape != f_m.shape:
        raise nx.ShapeError(f"infonce_loss: expected equal (B, d) inputs, got {f_t.shape} and {f_m.shape}")
    b = f_t.shape[0]
    if b == 0:
        raise ValueError("infonce_loss: empty batch")
    t, m = l2_normalize(f_t), l2_normalize(f_m)
    sim = nx.matmul(t, nx.transpose(m, (1, 0))) / tau
    diag = np.arange(b)
    fwd = nx.take_last(nx.log_softmax_rows(sim), diag)
    rev = nx.take_last(nx.log_softmax_rows(nx.transpose(sim, (1, 0))), diag)
    return -nx.sum_(fwd + rev) / float(b)


def preference_loss(score_h, score_l) -> Tensor:
    """Mean -log sigmoid(score_h - score_l)."""
    return nx.mean(nx.softplus(nx.sub(score_l, score_h)))


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderConfig:
    d_hidden: int = 32
    d_embed: int = 32
    margin: float = 1.0
    tau_init: float = 0.07
    lr: float = 3e-3
    steps: int = 300
    batch_size: int = 64


class EncoderFamily:
    """Prompt encoder and sequence encoder trained against one objective."""

    def __init__(self, kind: str, params: ParameterStore):
        if kind not in (CONTRASTIVE, INFONCE):
            raise ValueError(f"unknown encoder family {kind!r}")
        self.kind = kind
        self.params = params

    @classmethod
    def create(cls, kind, n_prompts, vocab: Vocabulary, cfg: EncoderConfig, rng) -> "EncoderFamily":
        dh, de = cfg.d_hidden, cfg.d_embed
        arrays = {
            "prompt_emb": rng.normal(0, 1.0, (n_prompts, dh)),
            "prompt_w": rng.normal(0, 1 / np.sqrt(dh), (dh, de)),
            "prompt_b": np.zeros(de),
            "tok_emb": rng.normal(0, 1.0, (vocab.total, dh)),
            "seq_w": rng.normal(0, 1 / np.sqrt(dh), (dh, de)),
            "seq_b": np.zeros(de),
            "log_tau": np.array([np.log(cfg.tau_init)]),
        }
        return cls(kind, ParameterStore(arrays))

    @property
    def normalized(self) -> bool:
        """Whether reward distances use unit-normalised embeddings."""
        return self.kind == INFONCE

    @property
    def tau(self) -> float:
        return float(np.exp(self.params["log_tau"].data[0]))

    def prompt_embedding(self, prompt_ids) -> Tensor:
        P = self.params
        pids = np.asarray(prompt_ids, dtype=np.int64)
        if pids.size and (pids.min() < 0 or pids.max() >= P["prompt_emb"].shape[0]):
            raise ValueError(f"unknown prompt id in {pids.tolist()}")
        return nx.tanh(nx.gather_rows(P["prompt_emb"], pids)) @ P["prompt_w"] + P["prompt_b"]

    def _pooled_to_embedding(self, pooled) -> Tensor:
        return nx.tanh(pooled) @ self.params["seq_w"] + self.params["seq_b"]

    def sequence_embedding(self, tokens: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Mean-pooled token embedding (End included) through one layer."""
        mask = step_mask(lengths, tokens.shape[1]).astype(self.params.flat.dtype)
        emb = nx.gather_rows(self.params["tok_emb"], tokens) * mask[..., None]
        pooled = nx.sum_(emb, axis=1) / mask.sum(axis=1, keepdims=True)
        return self._pooled_to_embedding(pooled)

    def soft_sequence_embedding(self, probs, mask: np.ndarray) -> Tensor:
        """Same encoder applied to per-position token distributions (B, T, total)."""
        emb = nx.matmul(probs, self.params["tok_emb"]) * mask[..., None]
        pooled = nx.sum_(emb, axis=1) / mask.sum(axis=1, keepdims=True)
        return self._pooled_to_embedding(pooled)

    def embed_for_reward(self, emb: np.ndarray) -> np.ndarray:
        if self.normalized:
            return emb / np.sqrt((emb * emb).sum(axis=-1, keepdims=True) + 1e-12)
        return emb

    def frozen(self) -> "EncoderFamily":
        return EncoderFamily(self.kind, self.params.copy(requires_grad=False))


class Encoders:
    def __init__(self, families: list, vocab: Vocabulary, max_len: int):
        self.families = list(families)
        self.vocab = vocab
        self.max_len = max_len

    def __len__(self):
        return len(self.families)

    def kinds(self) -> list:
        return [f.kind for f in self.families]

    def family(self, kind: str) -> EncoderFamily | None:
        for f in self.families:
            if f.kind == kind:
                return f
        return None

    def align_family(self) -> EncoderFamily:
        return self.family(CONTRASTIVE) or self.families[0]

    def save(self, path, config_hash: str) -> None:
        sections = {"kinds": ",".join(self.kinds()).encode(),
                    "shape": np.array([self.vocab.codebook_size, self.max_len])}
        for i, fam in enumerate(self.families):
            for k, v in fam.params.arrays().items():
                sections[f"{i}.{k}"] = v
        write_checkpoint(path, sections, config_hash)

    @classmethod
    def load(cls, path, config_hash: str) -> "Encoders":
        _, sec = read_checkpoint(path, expected_hash=config_hash)
        kinds = sec.pop("kinds").decode().split(",")
        codebook, max_len = (int(x) for x in sec.pop("shape"))
        fams = []
        for i, kind in enumerate(kinds):
            arrays = {k.split(".", 1)[1]: v for k, v in sec.items() if k.startswith(f"{i}.")}
            fams.append(EncoderFamily(kind, ParameterStore(arrays, requires_grad=False)))
        return cls(fams, Vocabulary(codebook), max_len)


def _train_contrastive(fam: EncoderFamily, paired, vocab, max_len, cfg: EncoderConfig, rng):
    pids = np.array([e.prompt_id for e in paired])
    ys = np.array([e.y for e in paired], dtype=np.float32)
    toks, lens = pack([e.sequence for e in paired], vocab, max_len)
    opt = nx.AdamWState.for_store(fam.params, lr=cfg.lr)
    for _ in range(cfg.steps):
        idx = rng.integers(0, len(paired), min(cfg.batch_size, len(paired)))
        with nx.Tape() as tape:
            loss = contrastive_loss(fam.prompt_embedding(pids[idx]), fam.sequence_embedding(toks[idx], lens[idx]),
                                    ys[idx], cfg.margin)
        nx.backward(tape, loss)
        nx.adamw_step(fam.params, opt)
    return float(loss.data)


def _train_infonce(fam: EncoderFamily, paired, vocab, max_len, cfg: EncoderConfig, rng):
    by_prompt = {}
    for e in paired:
        if e.y == 1:
            by_prompt.setdefault(e.prompt_id, []).append(e.sequence)
    prompts = sorted(by_prompt)
    opt = nx.AdamWState.for_store(fam.params, lr=cfg.lr)
    loss = None
    for _ in range(cfg.steps):
        # one positive per distinct prompt, so in-batch negatives are true negatives
        seqs = [by_prompt[p][rng.integers(0, len(by_prompt[p]))] for p in prompts]
        toks, lens = pack(seqs, vocab, max_len)
        with nx.Tape() as tape:
            tau = nx.exp(fam.params["log_tau"])
            loss = infonce_loss(fam.prompt_embedding(prompts), fam.sequence_embedding(toks, lens), tau)
        nx.backward(tape, loss)
        nx.adamw_step(fam.params, opt)
    return float(loss.data) if loss is not None else float("nan")


def train_encoders(paired, n_prompts: int, vocab: Vocabulary, max_len: int,
                   cfg: EncoderConfig = EncoderConfig(), rng: np.random.Generator | None = None) -> Encoders:
    """Fit the contrastive and the InfoNCE family on matched/unmatched pairs.

    A dataset holding a single label cannot train the contrastive family; it
    is skipped with a warning.
    """
    rng = rng or np.random.default_rng(0)
    labels = {e.y for e in paired}
    fams = []
    if labels == {0, 1}:
        fam = EncoderFamily.create(CONTRASTIVE, n_prompts, vocab, cfg, rng)
        loss = _train_contrastive(fam, paired, vocab, max_len, cfg, rng)
        log.info("contrastive encoder final loss %.4f", loss)
        fams.append(fam.frozen())
    else:
        warnings.warn("paired dataset holds a single label; contrastive encoder family skipped")
    if 1 in labels:
        fam = EncoderFamily.create(INFONCE, n_prompts, vocab, cfg, rng)
        loss = _train_infonce(fam, paired, vocab, max_len, cfg, rng)
        log.info("InfoNCE encoder final loss %.4f (tau %.4f)", loss, fam.tau)
        fams.append(fam.frozen())
    if not fams:
        raise ValueError("paired dataset has no usable examples")
    return Encoders(fams, vocab, max_len)


# ---------------------------------------------------------------------------
# preference scorer
# ---------------------------------------------------------------------------


class FeatureTransform:
    """Fixed, untrained map from a token sequence to ``d_g`` reals.

    A seeded random projection of the normalised token histogram, followed by
    eight first-difference and length statistics.
    """

    N_STATS = 8

    def __init__(self, vocab: Vocabulary, max_len: int, d_g: int = 48, seed: int = 0):
        if d_g <= self.N_STATS:
            raise ValueError(f"d_g must exceed {self.N_STATS}")
        self.vocab = vocab
        self.max_len = max_len
        self.d_g = d_g
        from .rng import stream

        self.projection = stream(seed, "features").normal(0, 1 / np.sqrt(vocab.total), (vocab.total, d_g - self.N_STATS))

    def __call__(self, seq: TokenSequence) -> np.ndarray:
        toks, lens = pack([seq], self.vocab, self.max_len)
        return self.batch(toks, lens)[0]

    def batch(self, tokens: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        v = self.vocab
        b, t = tokens.shape
        live = step_mask(lengths, t)
        hist = np.zeros((b, v.total))
        rows = np.repeat(np.arange(b), t)
        np.add.at(hist, (rows[live.reshape(-1)], tokens[live]), 1.0)
        hist /= lengths[:, None]
        codes_n = lengths - 1
        cl = step_mask(codes_n, t)
        codes = np.where(cl, tokens, 0).astype(np.float64)
        d = np.diff(codes, axis=1)
        dl = cl[:, 1:] & cl[:, :-1]
        nd = np.maximum(dl.sum(axis=1), 1)
        ad = np.where(dl, np.abs(d), 0.0)
        mean_jump = ad.sum(axis=1) / nd
        sd = np.sqrt(np.maximum(np.where(dl, d * d, 0.0).sum(axis=1) / nd - (np.where(dl, d, 0.0).sum(axis=1) / nd) ** 2, 0))
        repeats = np.where(dl, ad == 0, False).sum(axis=1) / nd
        max_jump = ad.max(axis=1)
        big = np.where(dl, ad > v.codebook_size / 4, False).sum(axis=1) / nd
        nc = np.maximum(codes_n, 1)
        mean_tok = codes.sum(axis=1) / nc
        sd_tok = np.sqrt(np.maximum((codes * codes).sum(axis=1) / nc - mean_tok ** 2, 0))
        scale = float(v.codebook_size)
        stats = np.stack([mean_jump / 4.0, sd / 4.0, repeats, max_jump / scale, big,
                          codes_n / self.max_len, mean_tok / scale, sd_tok / scale], axis=1)
        return np.concatenate([hist @ self.projection * np.sqrt(v.total), stats], axis=1)


@dataclass(frozen=True)
class ScorerConfig:
    d_g: int = 48
    d_hidden: int = 32
    lr: float = 3e-3
    steps: int = 600
    batch_size: int = 128


class PreferenceScorer:
    def __init__(self, params: ParameterStore, features: FeatureTransform):
        self.params = params
        self.features = features

    @classmethod
    def create(cls, features: FeatureTransform, cfg: ScorerConfig, rng, zero: bool = False) -> "PreferenceScorer":
        dg, dh = features.d_g, cfg.d_hidden
        arrays = {
            "w1": rng.normal(0, 1 / np.sqrt(dg), (dg, dh)),
            "b1": np.zeros(dh),
            "w2": np.zeros((dh, 1)) if zero else rng.normal(0, 1 / np.sqrt(dh), (dh, 1)),
            "b2": np.zeros(1),
        }
        return cls(ParameterStore(arrays), features)

    def score_features(self, g) -> Tensor:
        P = self.params
        out = nx.tanh(nx.as_tensor(g) @ P["w1"] + P["b1"]) @ P["w2"] + P["b2"]
        return nx.reshape(out, out.shape[:-1])

    def score(self, tokens: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        g = self.features.batch(tokens, lengths).astype(self.params.flat.dtype)
        with nx.no_grad():
            return self.score_features(g).data.astype(np.float64)

    def frozen(self) -> "PreferenceScorer":
        return PreferenceScorer(self.params.copy(requires_grad=False), self.features)

    def save(self, path, config_hash: str) -> None:
        write_checkpoint(path, self.params.arrays(), config_hash)

    @classmethod
    def load(cls, path, config_hash: str, features: FeatureTransform) -> "PreferenceScorer":
        _, sec = read_checkpoint(path, expected_hash=config_hash)
        return cls(ParameterStore({k: sec[k] for k in ("w1", "b1", "w2", "b2")}, requires_grad=False), features)


def _pair_features(pairs, features: FeatureTransform):
    th, lh = pack([p.better for p in pairs], features.vocab, features.max_len)
    tl, ll = pack([p.worse for p in pairs], features.vocab, features.max_len)
    return (features.batch(th, lh).astype(np.float32), features.batch(tl, ll).astype(np.float32))


def train_preference_scorer(pairs, features: FeatureTransform, cfg: ScorerConfig = ScorerConfig(),
                            rng: np.random.Generator | None = None) -> PreferenceScorer:
    if not pairs:
        raise ValueError("need at least one preference pair")
    rng = rng or np.random.default_rng(0)
    gh, gl = _pair_features(pairs, features)
    scorer = PreferenceScorer.create(features, cfg, rng)
    opt = nx.AdamWState.for_store(scorer.params, lr=cfg.lr)
    for _ in range(cfg.steps):
        idx = rng.integers(0, len(pairs), min(cfg.batch_size, len(pairs)))
        with nx.Tape() as tape:
            loss = preference_loss(scorer.score_features(gh[idx]), scorer.score_features(gl[idx]))
        nx.backward(tape, loss)
        nx.adamw_step(scorer.params, opt)
    return scorer.frozen()


def pairwise_accuracy(scorer: PreferenceScorer, pairs) -> float:
    gh, gl = _pair_features(pairs, scorer.features)
    with nx.no_grad():
        sh = scorer.score_features(gh).data
        sl = scorer.score_features(gl).data
    return float(np.mean(sh > sl))
