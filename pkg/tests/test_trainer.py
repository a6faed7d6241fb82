import dataclasses

import numpy as np
import pytest

from paretorl import numerics as nx
from paretorl import pipeline
from paretorl.policy import ModelConfig, SequenceModel, actor_logits, clone_frozen, critic_from_actor, \
    embed_prompts, step_mask
from paretorl.rewards import NormalizerState
from paretorl.trainer import PARETO, WEIGHTED_SUM, MetricsWriter, PPOConfig, RolloutBatch, Trainer, TrainingAborted, \
    actor_loss, advantages, clipped_surrogate, collect_rollouts, critic_loss, metric_columns, ppo_update, \
    prepare_batch, read_metrics, sample_weights, shaped_returns, terminal_rewards


def val(t):
    return float(np.asarray(t.data))


# -- closed forms ---------------------------------------------------------------


def test_surrogate_clips_large_ratio():
    assert val(actor_loss([np.log(1.5)], [0.0], [1.0], 0.2)) == pytest.approx(-1.2)
    assert val(actor_loss([np.log(0.5)], [0.0], [1.0], 0.2)) == pytest.approx(-0.5)
    assert val(actor_loss([np.log(0.5)], [0.0], [-1.0], 0.2)) == pytest.approx(0.8)
    assert val(actor_loss([0.0], [0.0], [2.0], 0.2)) == pytest.approx(-2.0)


def _batch(lengths, logp_old, logp_ref, terminal, t=4):
    b = len(lengths)
    z = np.zeros((b, t))
    return RolloutBatch(np.zeros(b, int), np.zeros(b, int), 1.0, np.zeros((b, t), int), np.asarray(lengths),
                        np.asarray(logp_old, float), np.asarray(logp_ref, float), z, np.zeros((b, 3)),
                        np.zeros((b, 3)), np.ones(b, bool), np.asarray(terminal, float))


def test_shaped_returns_example():
    # three steps, log-ratio 1 each, beta 0.1, terminal reward 1
    b = _batch([3], [[1.0, 1.0, 1.0, 0.0]], [[0.0] * 4], [1.0])
    np.testing.assert_allclose(shaped_returns(b, 0.1, 1.0)[0, :3], [0.7, 0.8, 0.9])
    assert shaped_returns(b, 0.1, 1.0)[0, 3] == 0.0


def test_shaped_returns_discounting_and_zero_beta():
    b = _batch([2], [[3.0, -2.0, 0, 0]], [[0.0] * 4], [2.0])
    np.testing.assert_allclose(shaped_returns(b, 0.0, 0.5)[0, :2], [1.0, 2.0])


def test_advantage_examples():
    assert advantages([[1.0]], [[0.3]], standardize=False)[0, 0] == pytest.approx(0.7)
    A = advantages(np.array([[1.0, 3.0], [5.0, 7.0]]), np.zeros((2, 2)))
    assert A.mean() == pytest.approx(0.0, abs=1e-12) and A.std() == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(nx.ShapeError):
        advantages(np.zeros((2, 2)), np.zeros((2, 3)))


def test_advantages_standardised_per_group():
    rng = np.random.default_rng(0)
    G = np.concatenate([rng.normal(0, 1, (4, 3)), rng.normal(50, 20, (4, 3))])
    mask = np.ones_like(G, bool)
    mask[1, 2] = False
    groups = np.repeat([0, 1], 4)
    A = advantages(G, np.zeros_like(G), mask, groups)
    for g in (0, 1):
        live = A[mask & (groups == g)[:, None]]
        assert live.mean() == pytest.approx(0.0, abs=1e-9) and live.std() == pytest.approx(1.0, abs=1e-6)
    assert A[1, 2] == 0.0


def test_critic_loss_example_and_symmetry():
    assert val(critic_loss(nx.Tensor([3.0]), nx.Tensor([1.0]))) == 4.0
    assert val(critic_loss(nx.Tensor([1.0]), nx.Tensor([3.0]))) == 4.0


def test_terminal_rewards_by_mode():
    norm = np.array([[0.1, 0.5, 0.9], [0.3, 0.6, 0.0]])
    groups = np.array([2, 0])
    np.testing.assert_allclose(terminal_rewards(norm, groups, PARETO), [0.9, 0.3])
    np.testing.assert_allclose(terminal_rewards(norm, groups, WEIGHTED_SUM), [0.5, 0.3])


# -- surrogate gradients ---------------------------------------------------------------


def _surrogate_grad(logp_new, A, eps=0.2):
    x = nx.Tensor(np.array([logp_new]), requires_grad=True)
    with nx.Tape() as tape:
        loss = nx.sum_(clipped_surrogate(x, [0.0], [A], eps))
    nx.backward(tape, loss)
    return float(x.grad[0])


def test_surrogate_gradient_is_minus_advantage_at_ratio_one():
    assert _surrogate_grad(0.0, 0.8) == pytest.approx(-0.8)
    assert _surrogate_grad(0.0, -1.3) == pytest.approx(1.3)


def test_surrogate_gradient_vanishes_when_clipped():
    assert _surrogate_grad(np.log(1.5), 1.0) == 0.0
    assert _surrogate_grad(np.log(0.5), -1.0) == 0.0
    # the unclipped side still pushes
    assert _surrogate_grad(np.log(0.5), 1.0) == pytest.approx(-0.5)


def test_clipped_surrogate_gradient_check():
    rng = np.random.default_rng(1)
    p = nx.ParameterStore({"lp": rng.normal(0, 0.1, 8)}, dtype=np.float64)
    old, A = rng.normal(0, 0.1, 8), rng.normal(size=8)
    assert nx.grad_check(lambda: actor_loss(p["lp"], old, A, 0.2), p) < 1e-3


# -- batch weighting ---------------------------------------------------------------


def test_sample_weights_example():
    w = sample_weights(np.array([True, True, False, True]), np.array([0, 0, 0, 1]), 2)
    np.testing.assert_allclose(w, [0.25, 0.25, 0.0, 0.5])


def test_all_members_gives_uniform_weights():
    k, n = 3, 5
    w = sample_weights(np.ones(k * n, bool), np.repeat(np.arange(k), n), k)
    np.testing.assert_allclose(w, 1 / (k * n))


def test_empty_group_gets_no_weight():
    w = sample_weights(np.array([False, False, True]), np.array([0, 0, 1]), 2)
    np.testing.assert_allclose(w, [0, 0, 0.5])


# -- config ---------------------------------------------------------------------


def test_default_hyperparameters_match_published_values():
    c = PPOConfig()
    assert (c.lr, c.minibatch, c.ppo_epochs, c.temperature, c.clip_eps) == (5e-6, 32, 2, 1.5, 0.2)
    assert (nx.AdamWState(size=1).beta1, nx.AdamWState(size=1).beta2) == (0.9, 0.99)


@pytest.mark.parametrize("bad", [dict(clip_eps=1.5), dict(clip_eps=0.0), dict(beta=-1), dict(n_per_group=1),
                                 dict(k=1), dict(mode="sum"), dict(alpha_end=1.5), dict(gamma=0.0)])
def test_config_rejects_invalid(bad):
    with pytest.raises(ValueError):
        PPOConfig(**bad)


def test_alpha_schedule_endpoints():
    c = PPOConfig(iterations=11, alpha_start=0.5, alpha_end=1.0)
    assert c.alpha(0) == 0.5 and c.alpha(10) == 1.0 and c.alpha(5) == pytest.approx(0.75)
    assert PPOConfig(iterations=1).alpha(0) == 0.5


# -- toy environments ----------------------------------------------------------------


class FirstTokenReward:
    """Channel c pays 1 when the first token equals c; a stand-in reward context."""

    normalizer = NormalizerState((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))

    def __init__(self, nan=False):
        self.nan = nan

    def batch(self, pids, tokens, lengths):
        r = (tokens[:, :1] == np.arange(3)[None]).astype(float)
        if self.nan:
            r[:] = np.nan
        return r, r.copy()


TOY = ModelConfig(n_prompts=2, codebook_size=4, d_model=8, n_heads=2, n_layers=1, max_len=4)


def toy_trainer(seed=0, ctx=None, **ppo):
    actor = SequenceModel.create(TOY, np.random.default_rng(seed))
    cfg = PPOConfig(**{**dict(lr=1e-2, critic_lr=1e-2, n_per_group=8, minibatch=8, iterations=20), **ppo})
    return Trainer.create(actor, critic_from_actor(actor), clone_frozen(actor), ctx or FirstTokenReward(), cfg, seed)


def first_token_probs(actor, token):
    with nx.no_grad():
        vecs = embed_prompts(actor, [0, 1], [token, token], [1.0, 1.0]).data
    out = []
    for v in vecs:
        z = actor_logits(actor, v, [])[0][:TOY.vocab.pad_id].astype(float)
        p = np.exp(z - z.max())
        out.append(p[token] / p.sum())
    return np.mean(out)


def test_collect_rollouts_shapes_and_groups():
    tr = toy_trainer()
    st, cfg = tr.state, tr.cfg
    b = collect_rollouts(st.actor, st.ref, st.critic, tr.reward_ctx, cfg, np.random.default_rng(0), 1, 0.5)
    assert b.size == cfg.k * cfg.n_per_group
    assert np.array_equal(b.groups, np.repeat(np.arange(3), 8)) and np.all(b.prompt_ids == 1)
    assert np.all(b.group_sizes(3) >= 1)
    # the reference is a frozen copy, so at the start every log-ratio is zero
    assert np.array_equal(b.logp_old, b.logp_ref)
    assert np.all(b.values == 0)
    np.testing.assert_array_equal(b.terminal, b.norm[np.arange(b.size), b.groups])
    b2 = collect_rollouts(st.actor, st.ref, st.critic, tr.reward_ctx, cfg, np.random.default_rng(0), 1, 0.5)
    assert np.array_equal(b.tokens, b2.tokens)


def test_weighted_sum_mode_keeps_every_sample():
    tr = toy_trainer(mode=WEIGHTED_SUM)
    st = tr.state
    b = collect_rollouts(st.actor, st.ref, st.critic, tr.reward_ctx, tr.cfg, np.random.default_rng(0), 0, 0.5)
    assert b.pareto.all()
    np.testing.assert_allclose(b.terminal, b.norm.mean(1))


def test_zero_advantage_leaves_actor_unchanged():
    tr = toy_trainer()
    st, cfg = tr.state, tr.cfg
    b = prepare_batch(collect_rollouts(st.actor, st.ref, st.critic, tr.reward_ctx, cfg,
                                       np.random.default_rng(0), 0, 1.0), cfg)
    b.adv = np.zeros_like(b.adv)
    before = st.actor.params.flat.copy()
    critic_before = st.critic.params.flat.copy()
    upd = ppo_update(st, b, cfg, np.random.default_rng(1))
    assert not upd["aborted"]
    assert np.array_equal(st.actor.params.flat, before)
    assert not np.array_equal(st.critic.params.flat, critic_before)


def test_non_finite_loss_rolls_back():
    tr = toy_trainer()
    st, cfg = tr.state, tr.cfg
    b = prepare_batch(collect_rollouts(st.actor, st.ref, st.critic, tr.reward_ctx, cfg,
                                       np.random.default_rng(0), 0, 1.0), cfg)
    b.adv[0, 0] = np.nan
    a0, c0, step0 = st.actor.params.flat.copy(), st.critic.params.flat.copy(), st.actor_opt.step
    upd = ppo_update(st, b, cfg, np.random.default_rng(1))
    assert upd["aborted"]
    assert np.array_equal(st.actor.params.flat, a0) and np.array_equal(st.critic.params.flat, c0)
    assert st.actor_opt.step == step0


def test_repeated_rollbacks_abort_training():
    tr = toy_trainer(ctx=FirstTokenReward(nan=True), mode=WEIGHTED_SUM)
    with pytest.raises(TrainingAborted, match="3 consecutive"):
        tr.run(10)
    assert len(tr.history) == 3 and all(r["aborted"] for r in tr.history)


def test_bandit_policy_learns_rewarded_first_token():
    tr = toy_trainer(iterations=40)
    before = [first_token_probs(tr.state.actor, k) for k in range(3)]
    tr.run()
    after = [first_token_probs(tr.state.actor, k) for k in range(3)]
    # each group is paid for starting with its own channel's token
    for k in range(3):
        assert after[k] > before[k] + 0.1, (before, after)


def test_zero_iterations_is_a_no_op():
    tr = toy_trainer(iterations=0)
    before = tr.state.actor.params.flat.copy()
    assert tr.run() == []
    assert np.array_equal(tr.state.actor.params.flat, before)


# -- loop on the tiny task ------------------------------------------------------------


def _strip_clock(rows):
    return [{k: v for k, v in r.items() if k != "wall_clock_ms"} for r in rows]


def test_trainer_is_deterministic(tiny_art):
    a = pipeline.make_trainer(tiny_art).run(3)
    b = pipeline.make_trainer(tiny_art).run(3)
    assert _strip_clock(a) == _strip_clock(b)


def test_resume_matches_uninterrupted_run(tiny_art, tmp_path):
    full = pipeline.make_trainer(tiny_art)
    full.run(4)
    part = pipeline.make_trainer(tiny_art)
    part.run(2)
    part.save(tmp_path / "rl.ckpt", "h")
    resumed = pipeline.make_trainer(tiny_art)
    resumed.load(tmp_path / "rl.ckpt", "h")
    assert resumed.state.iteration == 2
    resumed.run(4)
    assert _strip_clock(resumed.history) == _strip_clock(full.history[2:])
    assert np.array_equal(resumed.state.actor.params.flat, full.state.actor.params.flat)


def test_metrics_file_schema(tiny_art, tmp_path):
    cfg = tiny_art.cfg
    tr = pipeline.make_trainer(tiny_art)
    w = MetricsWriter(tmp_path / "m.csv", cfg.k, pipeline.metrics_header(cfg, tiny_art.normalizer))
    tr.run(2, metrics=w)
    header, rows = read_metrics(tmp_path / "m.csv")
    assert header["config_hash"] == cfg.config_hash()
    assert len(header["normalizer_min"].split()) == 3
    assert list(rows[0]) == metric_columns(3)
    assert [r["iteration"] for r in rows] == [1.0, 2.0]
    for r in rows:
        assert 1 <= sum(r[f"pareto_n_{g}"] for g in range(3)) <= 3 * cfg.n_per_group
        assert r["aborted"] == 0.0 and np.isfinite(r["actor_loss"])
    w.truncate_after(1)
    assert len(read_metrics(tmp_path / "m.csv")[1]) == 1


def test_trainer_requires_fitted_normalizer(tiny_art):
    art = dataclasses.replace(tiny_art, normalizer=None)
    with pytest.raises(ValueError, match="normalizer"):
        pipeline.make_trainer(art)


def test_step_mask_matches_batch_mask(tiny_art):
    tr = pipeline.make_trainer(tiny_art)
    st = tr.state
    b = collect_rollouts(st.actor, st.ref, st.critic, tr.reward_ctx, tr.cfg, np.random.default_rng(0), 0, 0.5)
    assert np.array_equal(b.mask, step_mask(b.lengths, b.tokens.shape[1]))
    assert np.all(b.logp_old[~b.mask] == 0)
