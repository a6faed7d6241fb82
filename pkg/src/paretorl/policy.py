"""Autoregressive token policy, critic and frozen reference.

One decoder-only transformer serves as actor (vocabulary head) and critic
(scalar head).  Position 0 of the context holds the prompt vector; position
``i + 1`` holds token ``i``.  Row ``i`` of the output therefore predicts
token ``i`` from the prompt and the tokens before it.  Every forward pass is
padded to ``max_len`` positions so a row's numbers never depend on how much of
the sequence exists after it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .checkpoint import read_checkpoint, write_checkpoint
from .numerics import ParameterStore, Tensor


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    codebook_size: int

    @property
    def end_id(self) -> int:
        return self.codebook_size

    @property
    def pad_id(self) -> int:
        return self.codebook_size + 1

    @property
    def total(self) -> int:
        return self.codebook_size + 2


@dataclass(frozen=True)
class TokenSequence:
    """Codebook indices followed by exactly one End token."""

    tokens: tuple

    def __len__(self):
        return len(self.tokens)

    @property
    def codes(self) -> tuple:
        return self.tokens[:-1]

    @classmethod
    def from_codes(cls, codes, vocab: Vocabulary) -> "TokenSequence":
        return cls(tuple(int(c) for c in codes) + (vocab.end_id,))

    def validate(self, vocab: Vocabulary, max_len: int) -> "TokenSequence":
        n = len(self.tokens)
        if not 1 <= n <= max_len:
            raise SequenceError(f"sequence length {n} outside [1, {max_len}]")
        if self.tokens[-1] != vocab.end_id:
            raise SequenceError("sequence must end with the End token")
        for t in self.tokens[:-1]:
            if not 0 <= t < vocab.codebook_size:
                raise SequenceError(f"token {t} is not a codebook index (End/pad only allowed last)")
        return self


@dataclass(frozen=True)
class PromptSpec:
    prompt_id: int
    reward_token: int | None = None  # 0-based channel index
    alpha: float = 0.0


@dataclass(frozen=True)
class ModelConfig:
    n_prompts: int
    codebook_size: int = 32
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_len: int = 24
    n_reward_tokens: int = 3
    ff_mult: int = 4
    value_head: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.codebook_size)

    @property
    def out_dim(self) -> int:
        return 1 if self.value_head else self.vocab.total

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    d, v, f = cfg.d_model, cfg.vocab.total, cfg.ff_mult * cfg.d_model
    std = 0.02
    resid = std / np.sqrt(2 * cfg.n_layers)
    p = {
        "prompt_emb": rng.normal(0, std, (cfg.n_prompts, d)),
        "reward_emb": np.zeros((cfg.n_reward_tokens, d)),
        "tok_emb": rng.normal(0, std, (v, d)),
        "pos_emb": rng.normal(0, std, (cfg.max_len, d)),
    }
    for i in range(cfg.n_layers):
        pre = f"h{i}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for w in ("wq", "wk", "wv"):
            p[pre + "attn." + w] = rng.normal(0, std, (d, d))
        p[pre + "attn.wo"] = rng.normal(0, resid, (d, d))
        p[pre + "attn.bo"] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "ff.w1"] = rng.normal(0, std, (d, f))
        p[pre + "ff.b1"] = np.zeros(f)
        p[pre + "ff.w2"] = rng.normal(0, resid, (f, d))
        p[pre + "ff.b2"] = np.zeros(d)
    p["ln_f.g"] = np.ones(d)
    p["ln_f.b"] = np.zeros(d)
    if cfg.value_head:
        p["head.w"] = np.zeros((d, 1))
        p["head.b"] = np.zeros(1)
    else:
        p["head.w"] = rng.normal(0, std, (d, v))
        p["head.b"] = np.zeros(v)
    return p


class SequenceModel:
    """Transformer over (prompt vector, tokens) with either head."""

    def __init__(self, config: ModelConfig, params: ParameterStore, frozen: bool = False):
        self.config = config
        self.params = params
        self.frozen = frozen
        t = config.max_len
        self._causal = np.triu(np.full((t, t), nx.PAD_NEG, dtype=params.flat.dtype), k=1)
        pad_mask = np.zeros(config.vocab.total, dtype=params.flat.dtype)
        pad_mask[config.vocab.pad_id] = nx.PAD_NEG
        self._pad_mask = pad_mask

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator, dtype=None) -> "SequenceModel":
        return cls(config, ParameterStore(init_params(config, rng), dtype=dtype))

    def with_dtype(self, dtype) -> "SequenceModel":
        return SequenceModel(self.config, self.params.copy(dtype=dtype), self.frozen)

    @property
    def vocab(self) -> Vocabulary:
        return self.config.vocab

    # -- forward ---------------------------------------------------------

    def forward(self, prompt_vecs: Tensor, tokens: np.ndarray) -> Tensor:
        """prompt_vecs (B, d), tokens (B, max_len) padded -> (B, max_len, out_dim).

        Only ``tokens[:, :max_len-1]`` are read; the last column would only
        feed a position beyond the context.
        """
        cfg, P = self.config, self.params
        b, t = tokens.shape[0], cfg.max_len
        if tokens.shape[1] != t:
            raise SequenceError(f"token batch must be padded to {t} columns, got {tokens.shape}")
        d, h = cfg.d_model, cfg.n_heads
        hd = d // h
        x = nx.concat([nx.reshape(prompt_vecs, (b, 1, d)), nx.gather_rows(P["tok_emb"], tokens[:, :t - 1])], axis=1)
        x = x + P["pos_emb"]
        scale = 1.0 / np.sqrt(hd)
        for i in range(cfg.n_layers):
            pre = f"h{i}."
            a = nx.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])

            def heads(w):
                return nx.transpose(nx.reshape(a @ P[pre + "attn." + w], (b, t, h, hd)), (0, 2, 1, 3))

            q, k, v = heads("wq"), heads("wk"), heads("wv")
            att = nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))) * scale + self._causal
            att = nx.softmax_rows(att)
            y = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
            x = x + (y @ P[pre + "attn.wo"] + P[pre + "attn.bo"])
            a = nx.layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
            ff = nx.relu(a @ P[pre + "ff.w1"] + P[pre + "ff.b1"]) @ P[pre + "ff.w2"] + P[pre + "ff.b2"]
            x = x + ff
        x = nx.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
        return x @ P["head.w"] + P["head.b"]

    def step_log_probs(self, prompt_vecs: Tensor, tokens: np.ndarray, temperature: float = 1.0) -> Tensor:
        """(B, max_len) log pi_T(tokens[:, i] | prompt, tokens[:, :i]); pad entries are junk.

        ``temperature`` divides the logits, giving the distribution that a
        sampler at that temperature draws from.
        """
        if self.config.value_head:
            raise TypeError("step_log_probs needs a vocabulary head")
        logits = self.forward(prompt_vecs, tokens)
        if temperature != 1.0:
            logits = logits * (1.0 / temperature)
        logits = logits + self._pad_mask
        target = np.where(tokens == self.vocab.pad_id, self.vocab.end_id, tokens)
        return nx.take_last(nx.log_softmax_rows(logits), target)

    def values(self, prompt_vecs: Tensor, tokens: np.ndarray) -> Tensor:
        """(B, max_len) value estimates; entry i is for the state that emits token i."""
        if not self.config.value_head:
            raise TypeError("values needs a scalar head")
        out = self.forward(prompt_vecs, tokens)
        return nx.reshape(out, out.shape[:2])

    def state_dict(self) -> dict:
        return self.params.arrays()

    def save(self, path) -> None:
        write_checkpoint(path, self.state_dict(), self.config.config_hash())

    @classmethod
    def load(cls, path, config: ModelConfig) -> "SequenceModel":
        _, sections = read_checkpoint(path, expected_hash=config.config_hash())
        ref = init_params(config, np.random.default_rng(0))
        missing = set(ref) - set(sections)
        if missing:
            raise SequenceError(f"{path}: checkpoint lacks parameters {sorted(missing)}")
        return cls(config, ParameterStore({k: sections[k] for k in ref}))


# ---------------------------------------------------------------------------
# sequences <-> arrays
# ---------------------------------------------------------------------------


def pack(seqs, vocab: Vocabulary, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack sequences into a (B, max_len) pad-filled array plus lengths."""
    out = np.full((len(seqs), max_len), vocab.pad_id, dtype=np.int64)
    lengths = np.zeros(len(seqs), dtype=np.int64)
    for i, s in enumerate(seqs):
        toks = s.tokens if isinstance(s, TokenSequence) else tuple(s)
        TokenSequence(tuple(toks)).validate(vocab, max_len)
        out[i, :len(toks)] = toks
        lengths[i] = len(toks)
    return out, lengths


def unpack(tokens: np.ndarray, lengths: np.ndarray) -> list:
    return [TokenSequence(tuple(int(t) for t in tokens[i, :lengths[i]])) for i in range(len(lengths))]


def step_mask(lengths, max_len: int) -> np.ndarray:
    return np.arange(max_len)[None, :] < np.asarray(lengths)[:, None]


# ---------------------------------------------------------------------------
# prompt conditioning
# ---------------------------------------------------------------------------


def embed_prompts(model: SequenceModel, prompt_ids, reward_tokens=None, alphas=None) -> Tensor:
    """Blended prompt vectors (1 - a) f_t + a f_tk, one row per sample.

    ``f_tk`` is ``f_t`` plus the learned vector of the reward token.  A
    reward token of -1 (or None) means no token; the blend then returns ``f_t``
    whatever ``alpha`` is.
    """
    cfg = model.config
    pids = np.asarray(prompt_ids, dtype=np.int64).reshape(-1)
    if pids.size and (pids.min() < 0 or pids.max() >= cfg.n_prompts):
        raise ValueError(f"unknown prompt id in {pids.tolist()} (have {cfg.n_prompts})")
    f_t = nx.gather_rows(model.params["prompt_emb"], pids)
    if reward_tokens is None:
        return f_t
    ks = np.asarray([-1 if k is None else k for k in np.atleast_1d(reward_tokens)], dtype=np.int64)
    ks = np.broadcast_to(ks, pids.shape)
    if ks.size and ks.max() >= cfg.n_reward_tokens:
        raise ValueError(f"unknown reward token in {ks.tolist()} (have {cfg.n_reward_tokens})")
    has = (ks >= 0).astype(model.params.flat.dtype)[:, None]
    a = np.broadcast_to(np.asarray(0.0 if alphas is None else alphas, dtype=model.params.flat.dtype).reshape(-1),
                        pids.shape)[:, None]
    f_tk = f_t + nx.gather_rows(model.params["reward_emb"], np.maximum(ks, 0)) * has
    return f_t * (1.0 - a) + f_tk * a


def embed_prompt(model: SequenceModel, spec: PromptSpec) -> Tensor:
    return nx.reshape(embed_prompts(model, [spec.prompt_id], [spec.reward_token], [spec.alpha]),
                      (model.config.d_model,))


def _as_batch_vecs(prompt_emb) -> Tensor:
    t = nx.as_tensor(prompt_emb)
    return t if t.ndim == 2 else nx.reshape(t, (1, t.shape[0]))


# ---------------------------------------------------------------------------
# single-sequence operations
# ---------------------------------------------------------------------------


def _check_prefix(prefix, vocab: Vocabulary, max_len: int) -> tuple:
    toks = tuple(int(t) for t in (prefix.tokens if isinstance(prefix, TokenSequence) else prefix))
    if len(toks) >= max_len:
        raise SequenceError(f"prefix length {len(toks)} must be < max_len {max_len}")
    for t in toks:
        if not 0 <= t < vocab.codebook_size:
            raise SequenceError(f"prefix contains non-codebook token {t}")
    return toks


def actor_logits(actor: SequenceModel, prompt_emb, prefix) -> np.ndarray:
    """(len(prefix) + 1, total) raw logits; row i scores token i."""
    cfg = actor.config
    toks = _check_prefix(prefix, cfg.vocab, cfg.max_len)
    buf = np.full((1, cfg.max_len), cfg.vocab.pad_id, dtype=np.int64)
    buf[0, :len(toks)] = toks
    with nx.no_grad():
        out = actor.forward(_as_batch_vecs(prompt_emb), buf).data
    return out[0, :len(toks) + 1].copy()


def sequence_logprob(model: SequenceModel, prompt_emb, seq: TokenSequence) -> np.ndarray:
    """log pi(s_t | c, S_<t) for every step of ``seq``."""
    seq.validate(model.vocab, model.config.max_len)
    tokens, lengths = pack([seq], model.vocab, model.config.max_len)
    with nx.no_grad():
        lp = model.step_log_probs(_as_batch_vecs(prompt_emb), tokens).data
    return lp[0, :lengths[0]].astype(np.float64)


def critic_values(critic: SequenceModel, prompt_emb, seq: TokenSequence) -> np.ndarray:
    seq.validate(critic.vocab, critic.config.max_len)
    tokens, lengths = pack([seq], critic.vocab, critic.config.max_len)
    with nx.no_grad():
        v = critic.values(_as_batch_vecs(prompt_emb), tokens).data
    return v[0, :lengths[0]].astype(np.float64)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _tempered_probs(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits.astype(np.float64) / temperature
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _ln(x, g, b, eps=1e-5):
    c = x - x.mean(axis=-1, keepdims=True)
    return c / np.sqrt(np.square(c).mean(axis=-1, keepdims=True) + x.dtype.type(eps)) * g + b


class _Decoder:
    """Incremental (key/value cached) forward used only to draw tokens."""

    def __init__(self, model: SequenceModel, vecs: np.ndarray):
        cfg = model.config
        self.model = model
        self.P = {k: model.params[k].data for k in model.params.names}
        b, t, h = vecs.shape[0], cfg.max_len, cfg.n_heads
        hd = cfg.d_model // h
        dt = model.params.flat.dtype
        self.keys = [np.zeros((b, h, t, hd), dtype=dt) for _ in range(cfg.n_layers)]
        self.vals = [np.zeros((b, h, t, hd), dtype=dt) for _ in range(cfg.n_layers)]
        self.vecs = vecs.astype(dt, copy=False)
        self.scale = dt.type(1.0 / np.sqrt(hd))

    def logits(self, pos: int, prev_tokens: np.ndarray | None) -> np.ndarray:
        cfg, P = self.model.config, self.P
        b, h = self.vecs.shape[0], cfg.n_heads
        hd = cfg.d_model // h
        x = self.vecs if pos == 0 else P["tok_emb"][prev_tokens]
        x = x + P["pos_emb"][pos]
        for i in range(cfg.n_layers):
            pre = f"h{i}."
            a = _ln(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
            q = (a @ P[pre + "attn.wq"]).reshape(b, h, hd)
            self.keys[i][:, :, pos] = (a @ P[pre + "attn.wk"]).reshape(b, h, hd)
            self.vals[i][:, :, pos] = (a @ P[pre + "attn.wv"]).reshape(b, h, hd)
            ks, vs = self.keys[i][:, :, :pos + 1], self.vals[i][:, :, :pos + 1]
            att = np.einsum("bhd,bhtd->bht", q, ks) * self.scale
            att = np.exp(att - att.max(axis=-1, keepdims=True))
            att /= att.sum(axis=-1, keepdims=True)
            y = np.einsum("bht,bhtd->bhd", att, vs).reshape(b, cfg.d_model)
            x = x + (y @ P[pre + "attn.wo"] + P[pre + "attn.bo"])
            a = _ln(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
            x = x + (np.maximum(a @ P[pre + "ff.w1"] + P[pre + "ff.b1"], 0) @ P[pre + "ff.w2"] + P[pre + "ff.b2"])
        x = _ln(x, P["ln_f.g"], P["ln_f.b"])
        return x @ P["head.w"] + P["head.b"] + self.model._pad_mask


def sample_batch(model: SequenceModel, prompt_vecs, temperature: float, rng: np.random.Generator,
                 score_temperature: float = 1.0):
    """Draw one sequence per prompt row.

    Tokens come from softmax(logits / temperature).  The returned log-probs
    are re-scored with the full forward pass at ``score_temperature``, so they
    match :meth:`SequenceModel.step_log_probs` bit for bit.  End is forced at
    the last position.

    Returns (tokens (B, max_len), lengths (B,), logp (B, max_len), zero past the end).
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    cfg, vocab = model.config, model.vocab
    vecs = _as_batch_vecs(prompt_vecs)
    b, t = vecs.shape[0], cfg.max_len
    tokens = np.full((b, t), vocab.pad_id, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    lengths = np.full(b, t, dtype=np.int64)
    dec = _Decoder(model, vecs.data)
    for pos in range(t):
        if pos == t - 1:
            nxt = np.full(b, vocab.end_id)
        else:
            logits = dec.logits(pos, tokens[:, pos - 1] if pos else None)
            probs = _tempered_probs(logits, temperature)
            u = rng.random(b)
            cdf = np.cumsum(probs, axis=1)
            nxt = np.minimum((cdf < u[:, None] * cdf[:, -1:]).sum(axis=1), vocab.end_id)
        nxt = np.where(done, vocab.pad_id, nxt)
        tokens[:, pos] = nxt
        ended = (~done) & (nxt == vocab.end_id)
        lengths[ended] = pos + 1
        done |= ended
        if done.all():
            break
    with nx.no_grad():
        logp = model.step_log_probs(vecs, tokens, score_temperature).data.astype(np.float64)
    logp = np.where(step_mask(lengths, t), logp, 0.0)
    return tokens, lengths, logp


def sample_sequence(actor: SequenceModel, prompt_emb, temperature: float, rng: np.random.Generator):
    tokens, lengths, logp = sample_batch(actor, prompt_emb, temperature, rng)
    return unpack(tokens, lengths)[0], logp[0, :lengths[0]]


def clone_frozen(model: SequenceModel) -> SequenceModel:
    """Deep copy with gradients disabled."""
    if not np.all(np.isfinite(model.params.flat)):
        raise ValueError("cannot freeze a model with non-finite parameters")
    return SequenceModel(model.config, model.params.copy(requires_grad=False), frozen=True)


def critic_from_actor(actor: SequenceModel) -> SequenceModel:
    """Critic sharing the actor's architecture, backbone copied, value head zeroed."""
    cfg = ModelConfig(**{**asdict(actor.config), "value_head": True})
    arrays = actor.params.arrays()
    arrays["head.w"] = np.zeros((cfg.d_model, 1))
    arrays["head.b"] = np.zeros(1)
    return SequenceModel(cfg, ParameterStore(arrays, dtype=actor.params.flat.dtype))
