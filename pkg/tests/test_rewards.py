import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paretorl.encoders import CONTRASTIVE, INFONCE, EncoderFamily, Encoders, FeatureTransform, PreferenceScorer, \
    ScorerConfig
from paretorl.numerics import ParameterStore
from paretorl.policy import TokenSequence, Vocabulary, pack
from paretorl.rewards import NormalizerState, RewardConfig, RewardContext, RewardError, compute_reward_vector, \
    fit_normalizer, normalize, normalize_matrix, normalize_piecewise, reward_adherence, reward_preference, \
    reward_quality

VOCAB = Vocabulary(6)


def make_family(kind, prompt_vec, seq_bias, tok_emb=None, seq_w=None, d_h=2):
    """A family whose embeddings are set by hand: prompts map to ``prompt_vec``."""
    de = len(prompt_vec)
    arrays = {
        "prompt_emb": np.zeros((3, d_h)),
        "prompt_w": np.zeros((d_h, de)),
        "prompt_b": np.asarray(prompt_vec, float),
        "tok_emb": np.zeros((VOCAB.total, d_h)) if tok_emb is None else tok_emb,
        "seq_w": np.zeros((d_h, de)) if seq_w is None else seq_w,
        "seq_b": np.asarray(seq_bias, float),
        "log_tau": np.zeros(1),
    }
    return EncoderFamily(kind, ParameterStore(arrays, dtype=np.float64, requires_grad=False))


def seq(*codes):
    return TokenSequence.from_codes(codes, VOCAB)


def test_adherence_hand_evaluated():
    # contrastive distance 0.5, infonce (unit vectors) distance 0.3
    c = make_family(CONTRASTIVE, [0.0, 0.0], [0.3, 0.4])
    theta = 2 * np.arcsin(0.3 / 2)
    i = make_family(INFONCE, [1.0, 0.0], [np.cos(theta), np.sin(theta)])
    enc = Encoders([c, i], VOCAB, 8)
    assert reward_adherence(0, seq(1, 2), enc, (1.0, 1.0)) == pytest.approx(-0.34, abs=1e-9)
    assert reward_adherence(0, seq(1, 2), enc, (2.0, 0.0)) == pytest.approx(-0.5, abs=1e-9)


def test_adherence_zero_at_matched_embedding():
    enc = Encoders([make_family(CONTRASTIVE, [0.2, -0.1], [0.2, -0.1])], VOCAB, 8)
    assert reward_adherence(1, seq(3), enc, (1.0, 0.0)) == 0.0


def _quality_encoders():
    tok = np.zeros((VOCAB.total, 1))
    tok[1, 0] = 1.0
    gt, pred = seq(1, 1, 2), seq(1, 2, 2)
    # pooled means include End: gt has two 1-tokens of 4 positions, pred one
    d = abs(np.tanh(2 / 4) - np.tanh(1 / 4))
    w = np.array([[0.2 / d]])
    fam = make_family(CONTRASTIVE, [0.0], [0.0], tok_emb=tok, seq_w=w, d_h=1)
    return Encoders([fam], VOCAB, 8), gt, pred


def test_quality_hand_evaluated_and_symmetric():
    enc, gt, pred = _quality_encoders()
    assert reward_quality(gt, pred, enc, (1.0, 0.0)) == pytest.approx(-0.04, abs=1e-9)
    assert reward_quality(pred, gt, enc, (1.0, 0.0)) == reward_quality(gt, pred, enc, (1.0, 0.0))
    assert reward_quality(gt, gt, enc, (1.0, 0.0)) == 0.0


def test_missing_family_or_ground_truth_rejected():
    enc, gt, pred = _quality_encoders()
    with pytest.raises(RewardError, match="infonce"):
        reward_quality(gt, pred, enc, (1.0, 1.0))
    with pytest.raises(RewardError):
        reward_quality(None, pred, enc, (1.0, 0.0))


def test_config_invariants():
    with pytest.raises(RewardError):
        RewardConfig(lambdas=(0.0, 0.0))
    with pytest.raises(RewardError):
        RewardConfig(k=1)
    with pytest.raises(RewardError):
        RewardConfig(lambdas=(-1.0, 1.0))


def test_zero_scorer_gives_zero_preference():
    scorer = PreferenceScorer.create(FeatureTransform(VOCAB, 8, 12), ScorerConfig(d_g=12), np.random.default_rng(0),
                                     zero=True)
    assert reward_preference(seq(1, 2, 3), scorer) == 0.0
    s = PreferenceScorer.create(FeatureTransform(VOCAB, 8, 12), ScorerConfig(d_g=12), np.random.default_rng(0))
    assert reward_preference(seq(4, 1), s) == reward_preference(seq(4, 1), s)


def test_normalize_examples():
    st_ = NormalizerState((0.0, -3.0), (10.0, 1.0))
    assert normalize(0.0, 0, st_) == 0.0
    assert normalize(10.0, 0, st_) == 1.0
    assert normalize(5.0, 0, st_) == 0.5
    assert normalize(3.0, 1, st_) == 1.5  # linear beyond the range


@settings(max_examples=300, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(1e-3, 1e3), st.floats(-3e3, 3e3))
def test_piecewise_form_equals_affine_map(lo, width, r):
    hi = lo + width
    st_ = NormalizerState((lo,), (hi,))
    assert abs(normalize_piecewise(r, lo, hi) - normalize(r, 0, st_)) <= 1e-12 * max(1.0, abs(r - lo) / width)


def test_normalizer_state_invariant():
    with pytest.raises(RewardError):
        NormalizerState((1.0,), (1.0,))
    with pytest.raises(RewardError):
        NormalizerState((0.0, np.nan), (1.0, 2.0))


def test_fit_normalizer_examples():
    grid = np.arange(101.0)[:, None]
    st_ = fit_normalizer(grid)
    assert st_.min_val[0] == pytest.approx(5.0) and st_.max_val[0] == pytest.approx(95.0)
    st_ = fit_normalizer(np.array([[0.0], [1.0]]))
    assert (st_.min_val[0], st_.max_val[0]) == (0.0, 1.0)


def test_fit_normalizer_widens_coincident_percentiles():
    x = np.concatenate([np.zeros(98), [-1.0, 2.0]])[:, None]
    st_ = fit_normalizer(x)
    assert (st_.min_val[0], st_.max_val[0]) == (-1.0, 2.0)


def test_fit_normalizer_rejects_constant_channel():
    x = np.column_stack([np.arange(10.0), np.full(10, 3.0)])
    with pytest.raises(RewardError, match="channel 1"):
        fit_normalizer(x)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2 ** 31 - 1))
def test_normalization_preserves_per_channel_argmax(n, seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(n, 3)) * rng.uniform(0.1, 10, 3)
    st_ = NormalizerState(tuple(rng.normal(size=3) - 5), tuple(rng.normal(size=3) + 5))
    norm = normalize_matrix(raw, st_)
    assert np.array_equal(raw.argmax(0), norm.argmax(0))
    assert np.array_equal(np.argsort(raw, 0, kind="stable"), np.argsort(norm, 0, kind="stable"))


def test_context_batch_matches_single_sample_functions(tiny_art):
    ctx = tiny_art.reward_context()
    enc, scorer, task = tiny_art.encoders, tiny_art.scorer, tiny_art.task
    lambdas = ctx.cfg.lambdas
    rng = np.random.default_rng(0)
    seqs = [task.noisy(p, 0.3, rng) for p in (0, 1, 2, 3, 1)]
    pids = np.array([0, 1, 2, 3, 2])
    toks, lens = pack(seqs, enc.vocab, enc.max_len)
    raw, norm = ctx.batch(pids, toks, lens)
    for i, (p, s) in enumerate(zip(pids, seqs)):
        expect = (reward_adherence(p, s, enc, lambdas), reward_quality(task.canonical(p), s, enc, lambdas),
                  reward_preference(s, scorer))
        np.testing.assert_allclose(raw[i], expect, rtol=1e-5, atol=1e-6)
        rv = compute_reward_vector(int(p), s, ctx)
        assert len(rv.raw) == 3 and rv.is_normalized
        np.testing.assert_allclose(rv.normalized, norm[i], rtol=1e-5, atol=1e-6)
    assert np.all(raw[:, :2] <= 0)


def test_context_requires_normalizer(tiny_art):
    ctx = RewardContext(tiny_art.encoders, tiny_art.scorer, tiny_art.task.canonical_batch)
    toks, lens = pack([tiny_art.task.canonical(0)], tiny_art.encoders.vocab, tiny_art.encoders.max_len)
    with pytest.raises(RewardError, match="normalizer"):
        ctx.batch([0], toks, lens)
    assert not ctx.compute_reward_vector(0, tiny_art.task.canonical(0)).is_normalized


def test_ground_truth_sample_dominates_on_toy_context():
    tok = np.zeros((VOCAB.total, 1))
    tok[1, 0] = 1.0
    gt = seq(1, 1, 2)
    w = np.array([[1.5]])
    fam = make_family(CONTRASTIVE, [np.tanh(2 / 4) * 1.5], [0.0], tok_emb=tok, seq_w=w, d_h=1)
    enc = Encoders([fam], VOCAB, 8)
    scorer = PreferenceScorer.create(FeatureTransform(VOCAB, 8, 12), ScorerConfig(d_g=12), np.random.default_rng(0),
                                     zero=True)
    ctx = RewardContext(enc, scorer, lambda pids, t: pack([gt] * len(pids), VOCAB, t), RewardConfig((1.0, 0.0)),
                        NormalizerState((-1.0, -1.0, -1.0), (0.0, 0.0, 1.0)))
    others = [seq(1, 2, 2), seq(3), seq(1, 1, 1, 1, 1), seq(2, 4, 5, 1)]
    best = np.array(compute_reward_vector(0, gt, ctx).normalized)
    for s in others:
        assert np.all(best >= np.array(compute_reward_vector(0, s, ctx).normalized))
