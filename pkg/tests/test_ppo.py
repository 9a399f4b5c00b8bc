import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixture_trader.env import EnvConfig
from mixture_trader.errors import ConfigError, ContractError, NumericalAbort, ShapeError
from mixture_trader.ppo import (
    ActorCritic, PpoConfig, RolloutBuffer, batch_targets, clip_loss, collect_rollout, compute_gae,
    discounted_returns, encode, greedy_actions, make_optimizer, ppo_update, sample_action, value_loss,
)
from mixture_trader.tensor import Tensor

from oracles import gae_quadratic, suffix_returns


def test_gae_hand_example():
    assert compute_gae([1.0, 1.0], [0.0, 0.0, 0.0], 1.0, 1.0).tolist() == [2.0, 1.0]
    assert np.all(compute_gae(np.zeros(5), np.zeros(6), 0.9, 0.9) == 0.0)
    with pytest.raises(ContractError):
        compute_gae([1.0], [0.0], 0.9, 0.9)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.floats(0.5, 0.999), st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_gae_matches_quadratic_sum(T, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.standard_normal(T), rng.standard_normal(T + 1)
    assert np.allclose(compute_gae(r, v, gamma, lam), gae_quadratic(r, v, gamma, lam), atol=1e-10, rtol=0)


def test_gae_lambda_one_gamma_one_is_suffix_sum_minus_value(rng):
    r, v = rng.standard_normal(12), rng.standard_normal(13)
    expected = np.cumsum(r[::-1])[::-1] + v[-1] - v[:-1]
    assert np.allclose(compute_gae(r, v, 1.0, 1.0), expected, atol=1e-12)


def test_discounted_returns_match_oracle(rng):
    r = rng.standard_normal(40)
    assert np.allclose(discounted_returns(r, 0.97), suffix_returns(r, 0.97), atol=1e-10, rtol=0)


def test_clip_loss_examples():
    adv = np.array([1.0, -2.0, 0.5])
    lp = np.log(np.array([0.3, 0.6, 0.2]))
    assert clip_loss(Tensor(lp), lp, adv, 0.2).item() == pytest.approx(adv.mean())
    doubled = np.log(2.0) + lp[:1]
    assert clip_loss(Tensor(doubled), lp[:1], np.array([3.0]), 0.2).item() == pytest.approx(1.2 * 3.0)
    assert clip_loss(Tensor(lp), lp - 1.0, np.zeros(3), 0.2).item() == 0.0
    with pytest.raises(ShapeError):
        clip_loss(Tensor(lp), lp[:2], adv, 0.2)


@settings(max_examples=40, deadline=None)
@given(st.floats(1.3, 5.0), st.floats(1.3, 5.0), st.floats(0.1, 3.0))
def test_clip_loss_flat_beyond_boundary_for_positive_advantage(r1, r2, a):
    old = np.zeros(1)
    l1 = clip_loss(Tensor(np.log([r1])), old, np.array([a]), 0.2).item()
    l2 = clip_loss(Tensor(np.log([r2])), old, np.array([a]), 0.2).item()
    assert l1 == pytest.approx(l2)


def test_value_loss():
    assert value_loss(Tensor(np.array([0.0])), np.array([2.0])).item() == 4.0
    assert value_loss(Tensor(np.array([1.0, 2.0])), np.array([1.0, 2.0])).item() == 0.0


def test_sample_action_modes():
    rng = np.random.default_rng(0)
    draws = [sample_action(Tensor(np.array([0.0, 50.0])), "train", rng)[0] for _ in range(10_000)]
    assert np.mean(np.array(draws) == 1) > 0.999
    assert sample_action(np.array([0.0, 0.0]), "eval", rng)[0] == 1
    a, lp = sample_action(np.array([0.3, -0.2]), "train", rng)
    p = np.exp([0.3, -0.2]) / np.exp([0.3, -0.2]).sum()
    assert np.exp(lp) == pytest.approx(p[0 if a == -1 else 1], abs=1e-9)
    with pytest.raises(ConfigError):
        sample_action(np.array([0.0, 0.0]), "explore", rng)
    assert greedy_actions(np.array([[0.5, 0.5], [0.6, 0.4]])).tolist() == [1, -1]


def test_encode_contract(rng):
    nets = ActorCritic(5, 4, seed=0)
    assert encode(nets.actor.encoder, np.zeros((0, 5))) == []
    seq = rng.standard_normal((6, 5))
    full = encode(nets.actor.encoder, seq)
    prefix = encode(nets.actor.encoder, seq[:3])
    assert all(np.array_equal(a, b) for a, b in zip(full, prefix))
    with pytest.raises(ShapeError):
        encode(nets.actor.encoder, np.zeros((2, 4)))


@pytest.mark.parametrize("kw", [{"gamma": 1.0}, {"gae_lambda": 1.5}, {"clip_eps": 0.0}, {"lr": -1},
                                {"batch_size": 100, "n_envs": 16}, {"exploration": "gaussian"},
                                {"reward_clip": 0.0}])
def test_ppo_config_validation(kw):
    with pytest.raises(ConfigError):
        PpoConfig(**kw)


def rollout(market, nets, cfg, seed=0):
    starts = np.arange(cfg.n_envs) * 5 + market.first_valid
    return collect_rollout(nets, market, EnvConfig(), starts, cfg.rollout_len,
                           np.random.default_rng([seed, 0]), np.random.default_rng([seed, 1]))


SMALL = PpoConfig(batch_size=64, n_envs=4, epochs=3, lr=0.01)


def test_rollout_logprobs_reproduce_on_recompute(small_market):
    nets = ActorCritic(small_market.n_features, 6, seed=1)
    buf = rollout(small_market, nets, SMALL)
    assert buf.obs.shape == (16, 4, small_market.n_features)
    assert buf.mask.all()
    bt = batch_targets(buf, SMALL)
    from mixture_trader.ppo import run_sequence
    from mixture_trader.tensor import concat
    outs = run_sequence(nets, buf.obs)
    probs = concat([o.probs for o in outs], axis=0).data[bt.index]
    assert np.array_equal(np.log(probs[np.arange(len(bt.index)), bt.action_idx]), bt.old_log_probs)


def test_ppo_update_zero_lr_leaves_params(small_market):
    nets = ActorCritic(small_market.n_features, 6, seed=1)
    cfg = PpoConfig(batch_size=64, n_envs=4, lr=0.0)
    buf = rollout(small_market, nets, cfg)
    before = nets.state_dict()
    diag = ppo_update(buf, nets, cfg, make_optimizer(nets.parameters(), cfg))
    assert set(diag) >= {"clip_loss", "value_loss", "mean_reward", "grad_norm"}
    for k, v in nets.state_dict().items():
        assert np.array_equal(v, before[k])


def test_ppo_update_small_lr_ascends_objective(small_market):
    nets = ActorCritic(small_market.n_features, 6, seed=2)
    cfg = PpoConfig(batch_size=64, n_envs=4, epochs=1, lr=1e-6, momentum=0.0, max_grad_norm=None,
                    vf_coef=0.0)
    buf = rollout(small_market, nets, cfg)
    ppo_update(buf, nets, cfg, make_optimizer(nets.parameters(), cfg))
    after = PpoConfig(batch_size=64, n_envs=4, epochs=1, lr=0.0, vf_coef=0.0)
    diag = ppo_update(buf, nets, after, make_optimizer(nets.parameters(), after))
    assert diag["clip_loss"] > 0.0  # ratio moved toward the advantage sign


def test_positive_advantages_raise_weighted_log_probability(small_market):
    nets = ActorCritic(small_market.n_features, 6, seed=3)
    cfg = PpoConfig(batch_size=4, n_envs=1, epochs=1, lr=1e-3, momentum=0.0, max_grad_norm=None,
                    normalize_advantages=False, vf_coef=0.0)
    buf = collect_rollout(nets, small_market, EnvConfig(), [60], 4, np.random.default_rng(0))
    buf.rewards[:] = 1.0
    buf.values[:] = 0.0
    from mixture_trader.ppo import run_sequence
    from mixture_trader.tensor import concat
    bt = batch_targets(buf, cfg)
    assert np.all(bt.advantages > 0)

    def weighted():
        probs = concat([o.probs for o in run_sequence(nets, buf.obs)], axis=0).data
        return float(np.sum(bt.advantages * probs[np.arange(4), bt.action_idx]))

    before = weighted()
    ppo_update(buf, nets, cfg, make_optimizer(nets.parameters(), cfg))
    assert weighted() > before


def test_nan_loss_aborts(small_market):
    nets = ActorCritic(small_market.n_features, 6, seed=1)
    buf = rollout(small_market, nets, SMALL)
    buf.rewards[0, 0] = np.nan
    cfg = PpoConfig(batch_size=64, n_envs=4, reward_clip=None)
    with pytest.raises(NumericalAbort) as info:
        ppo_update(buf, nets, cfg, make_optimizer(nets.parameters(), cfg))
    assert "value_loss" in info.value.diagnostics


def test_identical_seeds_identical_parameters(small_market):
    states = []
    for _ in range(2):
        nets = ActorCritic(small_market.n_features, 6, seed=4)
        buf = rollout(small_market, nets, SMALL, seed=9)
        ppo_update(buf, nets, SMALL, make_optimizer(nets.parameters(), SMALL))
        states.append(nets.state_dict())
    for k in states[0]:
        assert np.array_equal(states[0][k], states[1][k])


def test_rollout_buffer_shape_contract():
    z = np.zeros((3, 2))
    with pytest.raises(ContractError):
        RolloutBuffer(np.zeros((3, 2, 1)), z, z, z, z, z, np.zeros((3, 1)), np.zeros((3, 2, 1)),
                      np.zeros((3, 2, 1)), np.zeros((3, 2, 1)), z, np.ones((3, 2, 1)))


def test_demonstration_buffer_is_read_only(small_market):
    from mixture_trader.trainer import fill_demo_buffer
    db = fill_demo_buffer(small_market, EnvConfig())
    with pytest.raises(ValueError):
        db.actions[0] = 1
    with pytest.raises(AttributeError):
        db.start = 3
