"""The three reward channels and their per-channel normalisation.

Channel order is fixed: 0 adherence (prompt/sequence embedding distance),
1 quality (distance to the ground-truth sequence), 2 preference (learned
scorer).  The two distance channels are negated weighted sums over encoder
families, so their raw values are never positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoders import CONTRASTIVE, INFONCE, Encoders, PreferenceScorer
from .policy import TokenSequence, pack

CHANNELS = ("adherence", "quality", "preference")
FAMILY_ORDER = (CONTRASTIVE, INFONCE)


class RewardError(ValueError):
    pass


@dataclass(frozen=True)
class RewardConfig:
    """``lambdas`` weights the encoder families in FAMILY_ORDER."""

    lambdas: tuple = (1.0, 1.0)
    k: int = 3

    def __post_init__(self):
        if self.k < 2:
            raise RewardError(f"need at least 2 reward channels, got {self.k}")
        if self.k != len(CHANNELS):
            raise RewardError(f"this engine computes exactly {len(CHANNELS)} channels, got k={self.k}")
        if len(self.lambdas) != len(FAMILY_ORDER):
            raise RewardError(f"expected {len(FAMILY_ORDER)} lambda weights, got {len(self.lambdas)}")
        if any(w < 0 for w in self.lambdas):
            raise RewardError("lambda weights must be >= 0")
        if not any(w > 0 for w in self.lambdas):
            raise RewardError("at least one lambda weight must be > 0")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalizerState:
    min_val: tuple
    max_val: tuple

    def __post_init__(self):
        lo, hi = np.asarray(self.min_val, float), np.asarray(self.max_val, float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise RewardError("normalizer bounds must be equal-length vectors")
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise RewardError("normalizer bounds must be finite")
        bad = np.flatnonzero(~(lo < hi))
        if bad.size:
            k = int(bad[0])
            raise RewardError(f"channel {k}: min {lo[k]} is not below max {hi[k]}")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.min_val, dtype=np.float64)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.max_val, dtype=np.float64)

    def as_array(self) -> np.ndarray:
        return np.stack([self.lo, self.hi])

    @classmethod
    def from_array(cls, arr) -> "NormalizerState":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(tuple(arr[0].tolist()), tuple(arr[1].tolist()))


def normalize(r, k: int, state: NormalizerState):
    """Affine map sending min_val_k to 0 and max_val_k to 1, extended linearly outside."""
    lo, hi = state.lo[k], state.hi[k]
    return (np.asarray(r, dtype=np.float64) - lo) / (hi - lo)


def normalize_piecewise(r: float, lo: float, hi: float) -> float:
    """The three-case extended min-max form; algebraically identical to :func:`normalize`."""
    if lo <= r <= hi:
        return (r - lo) / (hi - lo)
    if r < lo:
        return (r - lo) / (hi - lo)
    return (r - hi) / (hi - lo) + 1.0


def normalize_matrix(raw: np.ndarray, state: NormalizerState) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    return (raw - state.lo) / (state.hi - state.lo)


def fit_normalizer(samples, lo_pct: float = 5.0, hi_pct: float = 95.0) -> NormalizerState:
    """Per-channel percentile bounds from an (n, K) matrix of raw rewards.

    Percentiles are taken with the nearest-rank rule so bounds are always
    observed values.  If they coincide on a channel that is not constant the
    bounds widen to that channel's full range.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise RewardError(f"need an (n >= 2, K) sample matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise RewardError("normalizer samples contain non-finite values")
    lo = np.percentile(x, lo_pct, axis=0, method="nearest")
    hi = np.percentile(x, hi_pct, axis=0, method="nearest")
    for k in range(x.shape[1]):
        if lo[k] < hi[k]:
            continue
        cmin, cmax = x[:, k].min(), x[:, k].max()
        if cmin == cmax:
            name = CHANNELS[k] if k < len(CHANNELS) else str(k)
            raise RewardError(f"channel {k} ({name}) is constant at {cmin} over {x.shape[0]} warmup samples")
        lo[k], hi[k] = cmin, cmax
    return NormalizerState(tuple(lo.tolist()), tuple(hi.tolist()))


# ---------------------------------------------------------------------------
# channels
# ---------------------------------------------------------------------------


def _weighted_families(encoders: Encoders, lambdas) -> list:
    out = []
    for kind, w in zip(FAMILY_ORDER, lambdas):
        if w == 0:
            continue
        fam = encoders.family(kind)
        if fam is None:
            raise RewardError(f"lambda for the {kind} encoder family is {w} but that family was not trained")
        out.append((fam, float(w)))
    return out


def _seq_embed(fam, tokens, lengths) -> np.ndarray:
    with nx.no_grad():
        e = fam.sequence_embedding(tokens, lengths).data
    return fam.embed_for_reward(e.astype(np.float64))


def _prompt_embed(fam, pids) -> np.ndarray:
    with nx.no_grad():
        e = fam.prompt_embedding(pids).data
    return fam.embed_for_reward(e.astype(np.float64))


def _sq(a, b) -> np.ndarray:
    return ((a - b) ** 2).sum(axis=-1)


def reward_adherence(prompt_id: int, seq: TokenSequence, encoders: Encoders, lambdas) -> float:
    toks, lens = pack([seq], encoders.vocab, encoders.max_len)
    total = 0.0
    for fam, w in _weighted_families(encoders, lambdas):
        total += w * float(_sq(_prompt_embed(fam, [prompt_id]), _seq_embed(fam, toks, lens))[0])
    return -total


def reward_quality(gt_seq: TokenSequence | None, pred_seq: TokenSequence, encoders: Encoders, lambdas) -> float:
    if gt_seq is None:
        raise RewardError("no ground-truth sequence for this prompt")
    toks, lens = pack([gt_seq, pred_seq], encoders.vocab, encoders.max_len)
    total = 0.0
    for fam, w in _weighted_families(encoders, lambdas):
        e = _seq_embed(fam, toks, lens)
        total += w * float(_sq(e[0], e[1]))
    return -total


def reward_preference(seq: TokenSequence, scorer: PreferenceScorer) -> float:
    toks, lens = pack([seq], scorer.features.vocab, scorer.features.max_len)
    return float(scorer.score(toks, lens)[0])


@dataclass(frozen=True)
class RewardVector:
    raw: tuple
    normalized: tuple | None

    @property
    def is_normalized(self) -> bool:
        return self.normalized is not None


class RewardContext:
    """Frozen reward models plus ground truth; evaluates all channels for a batch.

    ``ground_truth(prompt_ids, max_len)`` must return packed (tokens, lengths)
    of each prompt's reference sequence.
    """

    def __init__(self, encoders: Encoders, scorer: PreferenceScorer, ground_truth, cfg: RewardConfig = RewardConfig(),
                 normalizer: NormalizerState | None = None):
        self.encoders = encoders
        self.scorer = scorer
        self.ground_truth = ground_truth
        self.cfg = cfg
        self.normalizer = normalizer
        self.families = _weighted_families(encoders, cfg.lambdas)
        self._cache = {}

    def with_normalizer(self, state: NormalizerState) -> "RewardContext":
        ctx = RewardContext(self.encoders, self.scorer, self.ground_truth, self.cfg, state)
        ctx._cache = self._cache
        return ctx

    def _reference(self, pids):
        # prompt and ground-truth embeddings are fixed, so cache them per prompt
        out = []
        for fam_i, (fam, _) in enumerate(self.families):
            missing = sorted({int(p) for p in pids} - {k[1] for k in self._cache if k[0] == fam_i})
            if missing:
                gt_t, gt_l = self.ground_truth(missing, self.encoders.max_len)
                pe, ge = _prompt_embed(fam, missing), _seq_embed(fam, gt_t, gt_l)
                for j, p in enumerate(missing):
                    self._cache[(fam_i, p)] = (pe[j], ge[j])
            pairs = [self._cache[(fam_i, int(p))] for p in pids]
            out.append((np.stack([a for a, _ in pairs]), np.stack([b for _, b in pairs])))
        return out

    def raw_batch(self, pids, tokens: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        pids = np.asarray(pids)
        raw = np.zeros((pids.size, len(CHANNELS)))
        for (fam, w), (pe, ge) in zip(self.families, self._reference(pids)):
            se = _seq_embed(fam, tokens, lengths)
            raw[:, 0] -= w * _sq(pe, se)
            raw[:, 1] -= w * _sq(ge, se)
        raw[:, 2] = self.scorer.score(tokens, lengths)
        return raw

    def batch(self, pids, tokens: np.ndarray, lengths: np.ndarray):
        """(raw, normalized) reward matrices, one row per sequence."""
        if self.normalizer is None:
            raise RewardError("reward normalizer has not been fitted")
        raw = self.raw_batch(pids, tokens, lengths)
        return raw, normalize_matrix(raw, self.normalizer)

    def compute_reward_vector(self, prompt_id: int, seq: TokenSequence) -> RewardVector:
        toks, lens = pack([seq], self.encoders.vocab, self.encoders.max_len)
        raw = self.raw_batch([prompt_id], toks, lens)[0]
        norm = None if self.normalizer is None else normalize_matrix(raw, self.normalizer)
        return RewardVector(tuple(raw.tolist()), None if norm is None else tuple(norm.tolist()))


def compute_reward_vector(prompt_id: int, seq: TokenSequence, context: RewardContext) -> RewardVector:
    return context.compute_reward_vector(prompt_id, seq)
