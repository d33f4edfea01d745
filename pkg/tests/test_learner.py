import json
import struct

import numpy as np
import pytest
import torch

from dxtk import io
from dxtk.env import OBS_DIM, EpisodeSpec, VecEnv, rollout
from dxtk.learner import (PpoConfig, collect_rollouts, flatten_batch, gae, il_loss,
                                load_policy, make_policy, normalize, ppo_loss, ppo_update,
                                save_policy, scale_vector, train, train_controller)

from oracles import frozen_batch, gradient_check


def test_gae_limit_case_is_reward_to_go_minus_value(rng):
    r = rng.normal(size=(6, 3))
    v = rng.normal(size=(6, 3))
    adv, ret = gae(r, v, np.zeros((6, 3), bool), 1.0, 1.0)
    togo = np.cumsum(r[::-1], axis=0)[::-1]
    np.testing.assert_allclose(adv, togo - v, atol=1e-12)
    np.testing.assert_allclose(ret, togo, atol=1e-12)


def test_gae_zero_case():
    adv, _ = gae(np.zeros(5), np.zeros(5), np.zeros(5, bool), 0.99, 0.95)
    np.testing.assert_array_equal(adv, 0.0)


def test_gae_three_step_hand_recursion():
    r, v = [1.0, 2.0, 3.0], [0.5, 1.0, 1.5]
    adv, ret = gae(r, v, [False] * 3, 0.5, 0.5)
    # delta_2 = 1.5, delta_1 = 2 + 0.75 - 1 = 1.75, delta_0 = 1 + 0.5 - 0.5 = 1
    np.testing.assert_allclose(adv, [1.53125, 2.125, 1.5], atol=1e-15)
    np.testing.assert_allclose(ret, [2.03125, 3.125, 3.0], atol=1e-15)
    adv, _ = gae(r, v, [False, True, False], 0.5, 0.5)
    np.testing.assert_allclose(adv, [1.25, 1.0, 1.5], atol=1e-15)


def test_advantage_normalisation(rng):
    a = normalize(rng.normal(3.0, 2.0, 500))
    assert abs(a.mean()) < 1e-12 and abs(a.std() - 1.0) < 1e-6


def _il_inputs(rng, rows=16):
    policy = make_policy(PpoConfig(), 0).double()
    obs = rng.normal(size=(rows, OBS_DIM))
    base = rng.normal(size=(rows, 7))
    cum = rng.normal(0, 0.1, size=(rows, 7))
    with torch.no_grad():
        mu = policy(torch.as_tensor(obs))[0].numpy()
    return policy, obs, base, cum, mu


def test_il_loss_cases(rng):
    policy, obs, base, cum, mu = _il_inputs(rng)
    expert = base + cum + mu
    assert il_loss(policy, obs, expert, base, cum).item() == pytest.approx(0.0, abs=1e-12)
    offset = expert.copy()
    offset[:, 3] += 0.1
    assert il_loss(policy, obs, offset, base, cum).item() == pytest.approx(0.1, abs=1e-12)
    assert il_loss(policy, obs, expert, base, cum, mask=np.zeros(len(obs), bool)).item() == 0.0
    assert il_loss(policy, obs[:0], expert[:0], base[:0], cum[:0]).item() == 0.0


def test_loss_gradient_matches_finite_differences(rng):
    assert gradient_check(rng) < 1e-3


def test_zero_advantage_update_keeps_actor(rng):
    cfg = PpoConfig(il_coef=0.0, entropy_coef=0.0, epochs=3, minibatches=2, hidden=32)
    policy = make_policy(cfg, 0).double()
    mb = frozen_batch(32, rng, cfg, policy)
    mb["adv"] = torch.zeros(32, dtype=torch.float64)
    before = {k: v.clone() for k, v in policy.state_dict().items()}
    opt = torch.optim.Adam(policy.parameters(), lr=1e-3)
    ppo_update(policy, opt, mb, cfg, np.random.default_rng(0))
    after = policy.state_dict()
    for k in before:
        if k.startswith("actor") or k == "log_std":
            assert torch.max(torch.abs(after[k] - before[k])).item() <= 1e-12
    assert any(torch.any(after[k] != before[k]) for k in before if k.startswith("critic"))


def test_strong_imitation_term_decreases_il_loss(rng):
    # large enough that the imitation gradient dominates the surrogate noise
    cfg = PpoConfig(il_coef=100.0, epochs=1, minibatches=1, hidden=64)
    policy = make_policy(cfg, 0).double()
    mb = frozen_batch(64, rng, cfg, policy)
    opt = torch.optim.Adam(policy.parameters(), lr=3e-4)
    losses = []
    for _ in range(5):
        losses.append(float(ppo_loss(policy, mb, cfg)[1]["il_loss"]))
        ppo_update(policy, opt, mb, cfg, np.random.default_rng(0))
    assert all(b < a + 1e-6 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_imitation_converges_on_a_perfect_demo(rng):
    cfg = PpoConfig(il_coef=10.0, epochs=1, minibatches=1, hidden=64, lr=1e-3)
    policy = make_policy(cfg, 0).double()
    mb = frozen_batch(64, rng, cfg, policy)
    with torch.no_grad():
        mu = policy(mb["obs"])[0]
    scale = torch.as_tensor(scale_vector(cfg))
    # expert reachable by a mean output of moderate size
    mb["expert"] = mb["baselines"] + mb["cum_deltas"] + scale * (mu + 0.5)
    mb["adv"] = torch.zeros(64, dtype=torch.float64)
    opt = torch.optim.Adam(policy.parameters(), lr=1e-3)
    for _ in range(400):
        ppo_update(policy, opt, mb, cfg, np.random.default_rng(0))
    assert ppo_loss(policy, mb, cfg)[1]["il_loss"] < 1e-2


def test_clip_fraction_reported(rng):
    cfg = PpoConfig(hidden=32)
    policy = make_policy(cfg, 0).double()
    mb = frozen_batch(16, rng, cfg, policy)
    mb["logp"] = mb["logp"] - 1.0  # ratio e > 1 + clip
    mb["adv"] = torch.ones(16, dtype=torch.float64)
    _, stats = ppo_loss(policy, mb, cfg)
    assert stats["clip_frac"] > 0


def test_non_finite_loss_aborts_and_keeps_params(rng):
    cfg = PpoConfig(hidden=32)
    policy = make_policy(cfg, 0).double()
    mb = frozen_batch(16, rng, cfg, policy)
    mb["returns"][0] = float("nan")
    before = policy.flat()
    stats = ppo_update(policy, torch.optim.Adam(policy.parameters()), mb, cfg, np.random.default_rng(0))
    assert stats["aborted"]
    np.testing.assert_array_equal(policy.flat(), before)


def test_rollout_batch_shape_and_determinism(slide_task):
    cfg = PpoConfig(envs=4, horizon=32, hidden=32)

    def collect():
        policy = make_policy(cfg, 0)
        env = VecEnv([EpisodeSpec.kinematic(slide_task)], 4, seed=0)
        batch, _ = collect_rollouts(policy, env, 32, np.random.default_rng(0), cfg, deterministic=True)
        return batch

    a, b = collect(), collect()
    assert a.size == 128
    assert np.array_equal(a.obs, b.obs) and np.array_equal(a.rewards, b.rewards)
    data = flatten_batch(a, cfg)
    assert data["obs"].shape == (128, OBS_DIM)


def test_expert_targets_are_time_aligned(slide_task):
    expert = slide_task.hand[:-1] + 0.01
    env = VecEnv([EpisodeSpec.kinematic(slide_task, expert), EpisodeSpec.kinematic(slide_task)], 2)
    cfg = PpoConfig(envs=2, hidden=32)
    batch, _ = collect_rollouts(make_policy(cfg, 0), env, 5, np.random.default_rng(0), cfg)
    np.testing.assert_array_equal(batch.expert_mask[:, 0], True)
    np.testing.assert_array_equal(batch.expert_mask[:, 1], False)
    np.testing.assert_allclose(batch.expert[:, 0], expert[:5])


def test_zero_budget_returns_initial_params(slide_task):
    cfg = PpoConfig(envs=4, hidden=32)
    res = train_controller([slide_task], {}, cfg, 0, seed=5, demo_threshold=0.0)
    np.testing.assert_array_equal(res.policy.flat(), make_policy(cfg, 5).flat())
    assert res.steps == 0
    with pytest.raises(ValueError):
        train_controller([], {}, cfg, 10, 0, 0.0)


def test_training_is_deterministic_and_logs(slide_task):
    cfg = PpoConfig(envs=8, horizon=16, hidden=32, eval_every=2)
    spec = [EpisodeSpec.kinematic(slide_task)]
    a = train(spec, cfg, 1024, seed=2)
    b = train(spec, cfg, 1024, seed=2)
    assert json.dumps(a.log) == json.dumps(b.log)
    assert len(a.log) == 1 + 1024 // (8 * 16)
    np.testing.assert_array_equal(a.policy.flat(), b.policy.flat())


def test_checkpoint_container_layout(tmp_path):
    cfg = PpoConfig(hidden=16)
    policy = make_policy(cfg, 0)
    path = tmp_path / "c.dxtk"
    save_policy(path, policy, cfg, {"steps": 7})
    raw = path.read_bytes()
    assert raw[:4] == b"DXTK"
    version, count = struct.unpack("<IQ", raw[4:16])
    assert version == io.FORMAT_VERSION and count == len(policy.flat())
    assert len(raw) == 16 + 4 * count
    values = np.frombuffer(raw[16:], dtype="<f4")
    np.testing.assert_array_equal(values, policy.flat().astype(np.float32))
    back, back_cfg, meta = load_policy(path)
    assert back_cfg == cfg and meta["steps"] == 7
    np.testing.assert_array_equal(back.flat(), policy.flat())
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(io.CheckpointError):
        load_policy(path)


def test_trained_rollout_records_are_consistent(slide_task):
    cfg = PpoConfig(envs=4, hidden=32)
    demo = rollout([EpisodeSpec.kinematic(slide_task)], lambda o: np.full((len(o), 7), 0.01))[0]
    assert np.max(np.abs(demo.reconstruct_actions() - demo.expert_actions)) <= 1e-9
    assert cfg.il_coef == 1.0
