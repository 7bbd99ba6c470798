import copy
import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from pushgrid import ppo
from pushgrid.env import TIMEOUT, VecPushEnv
from pushgrid.errors import InvalidInputError, TrainingFault
from pushgrid.nn import core
from pushgrid.nn.policy import ActorCritic, ObsBatch, RecurrentState
from pushgrid.scenarios import SCENARIOS

D = torch.float64


def tiny_config(**kw):
    base = dict(num_envs=2, rollout_length=4, update_epochs=1, num_minibatches=2, checkpoint_every=1,
                max_env_steps=16, seed=3)
    base.update(kw)
    return ppo.TrainConfig(**base)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return ActorCritic("attention")


def short_scenario(max_steps):
    return replace(SCENARIOS["training"], max_steps=max_steps)


# -- rollouts -------------------------------------------------------------------------


def test_rollout_shapes(model):
    env = VecPushEnv("training", 2, seed=1)
    buf, carry = ppo.collect_rollout(model, env, 3, np.random.default_rng(0))
    assert len(buf) == 6
    assert buf.state.shape == (3, 2, 8) and buf.actions.shape == (3, 2, 2)
    assert buf.init_state.tensor.shape == (2, 4, 256)
    assert not buf.init_state.tensor.any()
    assert carry.state.tensor.shape == (2, 4, 256)


def test_state_zeroed_after_done(model):
    env = VecPushEnv(short_scenario(2), 2, seed=1)
    buf, carry = ppo.collect_rollout(model, env, 4, np.random.default_rng(0))
    assert buf.dones[1].all() and buf.dones[3].all()
    assert buf.starts()[2].all() and not buf.starts()[1].any()
    assert not carry.state.tensor.any()


def test_rollout_log_probs_match_recomputation(model):
    env = VecPushEnv(short_scenario(3), 3, seed=2)
    rng = np.random.default_rng(1)
    buf, carry = ppo.collect_rollout(model, env, 5, rng)
    buf2, _ = ppo.collect_rollout(model, env, 5, rng, carry=carry)
    assert torch.equal(buf2.init_state.tensor, carry.state.tensor)
    for b in (buf, buf2):
        envs = np.arange(3)
        with torch.no_grad():
            dist, values = model.evaluate_sequence(b.observations(envs), torch.from_numpy(b.starts()),
                                                   b.init_state, b.length)
            lp = core.log_prob(dist, b.actions).numpy()
        assert np.max(np.abs(lp - b.log_probs)) <= 1e-12
        assert np.max(np.abs(values.numpy() - b.values)) <= 1e-12


def test_timeout_rewards_are_bootstrapped(model):
    spec = short_scenario(2)
    env = VecPushEnv(spec, 2, seed=4)
    rng = np.random.default_rng(2)
    buf, _ = ppo.collect_rollout(model, env, 2, rng, discount=0.9)

    # Replay the same actions in a twin environment to get raw rewards and the
    # terminal value estimate.
    twin = VecPushEnv(spec, 2, seed=4)
    obs = twin.reset()
    state = RecurrentState.zeros(2)
    for t in range(2):
        with torch.no_grad():
            _, _, nxt = model.step(ObsBatch.from_vec(obs), state)
        res = twin.step(buf.actions[t])
        expected = res.reward.copy()
        timeout = res.done & (res.kind == TIMEOUT)
        if timeout.any():
            with torch.no_grad():
                v = model.value_only(ObsBatch.from_vec(res.terminal_observation), nxt).numpy()
            expected[timeout] += 0.9 * v[timeout]
        assert np.allclose(buf.rewards[t], expected, atol=1e-12, rtol=0)
        obs, state = res.observation, nxt.reset(res.done)
    assert (buf.kinds[1] == TIMEOUT).all()


def test_bootstrap_examples():
    assert ppo.bootstrap_timeout(0.1, 10.0, 0.99) == pytest.approx(10.0, abs=1e-12)
    assert ppo.bootstrap_timeout(0.7, 0.0, 0.99) == 0.7


# -- GAE ---------------------------------------------------------------------------------


def brute_force_gae(rewards, values, dones, bootstrap, gamma, lam):
    T = len(rewards)
    nxt = list(values[1:]) + [bootstrap]
    delta = [rewards[t] + gamma * nxt[t] * (1 - dones[t]) - values[t] for t in range(T)]
    adv = []
    for t in range(T):
        total, weight = 0.0, 1.0
        for k in range(t, T):
            total += weight * delta[k]
            if dones[k]:
                break
            weight *= gamma * lam
        adv.append(total)
    return np.array(adv)


def test_gae_examples():
    adv, ret = ppo.compute_gae([[1.0]], [[0.0]], [[True]], [5.0])
    assert adv[0, 0] == 1.0 and ret[0, 0] == 1.0
    r = np.array([[0.5], [0.2], [-1.0]])
    v = np.array([[0.3], [0.1], [0.4]])
    d = np.array([[False], [True], [False]])
    adv, _ = ppo.compute_gae(r, v, d, [0.7], 0.9, 0.0)
    nxt = np.array([0.1, 0.4, 0.7])
    td = r[:, 0] + 0.9 * nxt * (1 - d[:, 0]) - v[:, 0]
    assert np.allclose(adv[:, 0], td, atol=1e-15, rtol=0)


def test_gae_matches_brute_force():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        r, v = rng.normal(size=50), rng.normal(size=50)
        d = rng.random(50) < 0.1
        boot = rng.normal()
        adv, ret = ppo.compute_gae(r[:, None], v[:, None], d[:, None], [boot], 0.99, 0.95)
        ref = brute_force_gae(r, v, d, boot, 0.99, 0.95)
        worst = max(worst, np.max(np.abs(adv[:, 0] - ref)))
        assert np.allclose(ret[:, 0], adv[:, 0] + v, atol=1e-15, rtol=0)
    assert worst < 1e-10


def test_advantage_normalization():
    adv = np.random.default_rng(0).normal(3.0, 7.0, size=(120, 16))
    n = ppo.normalize_advantages(adv)
    assert abs(n.mean()) < 1e-10 and abs(n.std() - 1.0) < 1e-10
    assert not ppo.normalize_advantages(np.full((4, 2), 2.5)).any()


def test_adapt_lr_examples():
    assert ppo.adapt_lr(3e-4, 0.05) == pytest.approx(2e-4, rel=1e-12)
    assert ppo.adapt_lr(3e-4, 0.001) == pytest.approx(4.5e-4, rel=1e-12)
    assert ppo.adapt_lr(3e-4, 0.01) == 3e-4
    assert ppo.adapt_lr(1e-2, 0.0) == 1e-2
    assert ppo.adapt_lr(1e-6, 1.0) == 1e-6


# -- losses and updates ------------------------------------------------------------------


@pytest.fixture(scope="module")
def batch(model):
    env = VecPushEnv(short_scenario(4), 4, seed=5)
    buf, _ = ppo.collect_rollout(model, env, 6, np.random.default_rng(3))
    return buf


def minibatch(buf, adv=None, envs=None):
    a, ret = ppo.compute_gae(buf.rewards, buf.values, buf.dones, buf.last_value)
    a = ppo.normalize_advantages(a) if adv is None else adv
    envs = np.arange(buf.num_envs) if envs is None else envs
    return ppo.make_minibatch(buf, envs, a, ret)


def grads(model, loss):
    model.zero_grad(set_to_none=True)
    loss.backward()
    return {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for n, p in model.named_parameters()}


def test_fresh_batch_has_unit_ratio(model, batch):
    loss, info = ppo.ppo_loss(model, minibatch(batch))
    assert abs(info["approx_kl"]) < 1e-12
    assert info["clip_fraction"] == 0.0
    assert math.isfinite(float(loss.detach()))


def test_zero_advantage_only_value_loss_moves(model, batch):
    zero = np.zeros_like(batch.rewards)
    loss, _ = ppo.ppo_loss(model, minibatch(batch, adv=zero))
    g = grads(model, loss)
    assert all(not v.any() for n, v in g.items() if n.startswith("policy."))
    assert any(v.any() for n, v in g.items() if n.startswith("value."))


def test_zero_entropy_coefficient_never_contributes(model, batch):
    mb = minibatch(batch)
    loss, _ = ppo.ppo_loss(model, mb, entropy_coef=0.0)
    g0 = grads(model, loss)
    dist, values = model.evaluate_sequence(mb.obs, mb.starts, mb.init, mb.T)
    ratio = torch.exp(core.log_prob(dist, mb.actions) - mb.old_log_probs)
    surr = torch.min(ratio * mb.advantages, torch.clamp(ratio, 0.8, 1.2) * mb.advantages)
    manual = -surr.mean() + 0.5 * ((values - mb.returns) ** 2).mean()
    g1 = grads(model, manual)
    assert all(torch.equal(g0[n], g1[n]) for n in g0)
    loss_e, _ = ppo.ppo_loss(model, mb, entropy_coef=0.1)
    g2 = grads(model, loss_e)
    assert any(not torch.equal(g0[n], g2[n]) for n in g0)


def test_infinite_clip_equals_unclipped_step(batch):
    torch.manual_seed(1)
    base = ActorCritic("attention")
    a, b = copy.deepcopy(base), copy.deepcopy(base)
    cfg = tiny_config(num_envs=4, update_epochs=1, num_minibatches=1, clip_epsilon=math.inf, adaptive_lr=False)
    opt_a = torch.optim.Adam(a.parameters(), lr=cfg.lr_init)
    ppo.ppo_update(a, opt_a, batch, cfg, np.random.default_rng(0))

    opt_b = torch.optim.Adam(b.parameters(), lr=cfg.lr_init)
    mb = minibatch(batch)
    dist, values = b.evaluate_sequence(mb.obs, mb.starts, mb.init, mb.T)
    ratio = torch.exp(core.log_prob(dist, mb.actions) - mb.old_log_probs)
    loss = -(ratio * mb.advantages).mean() + 0.5 * ((values - mb.returns) ** 2).mean()
    opt_b.zero_grad()
    loss.backward()
    torch.nn.utils.clip_grad_norm_(list(b.parameters()), 1.0)
    opt_b.step()
    for (n, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.allclose(pa, pb, atol=1e-14, rtol=0), n


def test_update_decreases_loss(batch):
    torch.manual_seed(2)
    m = ActorCritic("attention")
    cfg = tiny_config(num_envs=4, update_epochs=1, num_minibatches=1, adaptive_lr=False, lr_init=1e-4)
    mb = minibatch(batch)
    with torch.no_grad():
        before, _ = ppo.ppo_loss(m, mb)
    ppo.ppo_update(m, torch.optim.Adam(m.parameters(), lr=1e-4), batch, cfg, np.random.default_rng(0))
    with torch.no_grad():
        after, _ = ppo.ppo_loss(m, mb)
    assert float(after) < float(before)


def test_adaptive_lr_moves_within_bounds(batch):
    torch.manual_seed(3)
    m = ActorCritic("attention")
    cfg = tiny_config(num_envs=4, update_epochs=2, num_minibatches=2)
    opt = torch.optim.Adam(m.parameters(), lr=cfg.lr_init)
    stats = ppo.ppo_update(m, opt, batch, cfg, np.random.default_rng(0))
    # The first minibatch has KL 0 < target / 2, so the rate grew before the first step.
    assert stats.learning_rate > cfg.lr_init
    assert cfg.lr_bounds[0] <= stats.learning_rate <= cfg.lr_bounds[1]
    assert all(math.isfinite(v) for k, v in stats.to_dict().items() if k != "success_rate")


# -- config -------------------------------------------------------------------------------


def test_config_defaults_and_validation():
    cfg = ppo.TrainConfig()
    assert (cfg.rollout_length, cfg.update_epochs, cfg.clip_epsilon, cfg.discount, cfg.gae_lambda) == (120, 5, 0.2, 0.99, 0.95)
    assert (cfg.entropy_coef, cfg.value_coef, cfg.kl_target) == (0.0, 0.5, 0.01)
    assert cfg.batch_size == cfg.num_envs * 120
    assert ppo.TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InvalidInputError):
        ppo.TrainConfig.from_dict({"learning_rate": 1.0})
    with pytest.raises(InvalidInputError):
        ppo.TrainConfig(extractor="resnet")
    with pytest.raises(InvalidInputError):
        ppo.TrainConfig(lr_init=1.0)


# -- training loop, checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip_update_equality(tmp_path):
    cfg = tiny_config()
    a = ppo.Trainer(cfg, "training")
    a.iteration()
    a.save(tmp_path / "c.pt")
    rec_a = a.iteration()
    b = ppo.Trainer.from_checkpoint(tmp_path / "c.pt")
    rec_b = b.iteration()
    rec_a.pop("seconds"), rec_b.pop("seconds")
    assert rec_a == rec_b
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    oa, ob = a.optimizer.state_dict()["state"], b.optimizer.state_dict()["state"]
    assert all(torch.equal(oa[k]["exp_avg"], ob[k]["exp_avg"]) for k in oa)


def test_same_seed_same_training(tmp_path):
    recs = []
    for _ in range(2):
        t = ppo.Trainer(tiny_config(), "training")
        r = t.iteration()
        r.pop("seconds")
        recs.append((r, t.model.state_dict()))
    assert recs[0][0] == recs[1][0]
    assert all(torch.equal(recs[0][1][k], recs[1][1][k]) for k in recs[0][1])


def test_train_writes_metrics_and_checkpoints(tmp_path):
    paths = ppo.train(tiny_config(max_env_steps=24), "training", tmp_path)
    rows = [json.loads(l) for l in (tmp_path / "metrics.ndjson").read_text().splitlines()]
    steps = [r["env_steps"] for r in rows]
    assert steps == sorted(set(steps)) and steps[-1] >= 24
    assert all(k in rows[0] for k in ("env_steps", "success_rate", "mean_reward", "kl", "lr"))
    assert paths[-1].name == "final.pt" and all(p.exists() for p in paths)
    assert not list(tmp_path.glob("checkpoints/*.tmp"))
    ckpt = ppo.load_checkpoint(paths[-1])
    assert ckpt["env_steps"] == steps[-1]


def test_fine_tune_resumes_optimizer(tmp_path):
    paths = ppo.train(tiny_config(max_env_steps=8), "training", tmp_path / "base")
    src = ppo.load_checkpoint(paths[-1])
    t = ppo.Trainer.from_checkpoint(paths[-1], scenario="dual")
    assert t.lr == src["lr"]
    state = t.optimizer.state_dict()["state"]
    assert all(torch.equal(state[k]["exp_avg"], src["optimizer"]["state"][k]["exp_avg"]) for k in state)
    assert t.scenario.name == "dual"
    out = ppo.fine_tune(paths[-1], "dual", 8, tmp_path / "ft")
    ft = ppo.load_checkpoint(out)
    assert ft["env_steps"] == src["env_steps"] + 8
    assert ft["scenario"]["name"] == "dual"

    copy0 = ppo.fine_tune(paths[-1], "dual", 0, tmp_path / "ft0")
    assert copy0.read_bytes() == paths[-1].read_bytes()


def test_non_finite_loss_dumps_checkpoint(tmp_path):
    t = ppo.Trainer(tiny_config(), "training")
    with torch.no_grad():
        t.model.value.out.layers[0].bias.fill_(math.nan)
    with pytest.raises(TrainingFault):
        t.run(16, tmp_path / "m.ndjson", tmp_path / "ck")
    assert (tmp_path / "ck" / "fault.pt").exists()


def test_bad_checkpoint_rejected(tmp_path):
    from pushgrid.errors import CheckpointMismatchError
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointMismatchError):
        ppo.load_checkpoint(bad)
    t = ppo.Trainer(tiny_config(), "training")
    t.save(tmp_path / "ok.pt")
    with pytest.raises(CheckpointMismatchError):
        ppo.load_policy(tmp_path / "ok.pt", "cnn")
