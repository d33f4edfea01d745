import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dxtk import geometry as geo
from dxtk import synth
from dxtk.env import (CUM_LIMIT, OBS_DIM, EnvError, EnvState, EpisodeSpec, RewardWeights,
                            VecEnv, build_observation, compute_reward, diff_angle, env_step,
                            rollout)
from dxtk.sim import (GeometryBatch, SimBatch, SimParams, forward_kinematics, step_batch)
from dxtk.types import ObjectGeometry, TrackingTask, geometry_descriptor

from oracles import reward_oracle

W = RewardWeights()
R_MAX = 0.9 + 0.33 * math.pi + 1.0


def test_diff_angle_examples():
    assert diff_angle(0.3, 0.3) == 0.0
    assert diff_angle(0.0, math.pi) == pytest.approx(math.pi)
    assert diff_angle(3.0, -3.0) == pytest.approx(2 * math.pi - 6.0, abs=1e-12)


@given(st.floats(-20, 20), st.floats(-20, 20))
def test_diff_angle_range_and_symmetry(a, b):
    d = float(diff_angle(a, b))
    assert 0.0 <= d <= math.pi
    assert d == pytest.approx(float(diff_angle(b, a)), abs=1e-9)


def _touching_setup():
    # zero-pose hand: fingertips at (+-0.04, 0.10) lie on the side edges of this box
    geometry = ObjectGeometry(geo.rectangle(0.08, 0.04))
    hand = np.zeros(7)
    pose = np.array([0.0, 0.10, 0.0])
    return geometry, np.concatenate([hand, pose])


def test_perfect_tracking_reward():
    geometry, s = _touching_setup()
    r, comps = compute_reward(s, s, forward_kinematics(s[:7]), geometry, s[7:])
    assert r == pytest.approx(R_MAX, abs=1e-12)
    assert comps["affinity"] == 0.0 and comps["bonus"] == 1.0
    assert r == pytest.approx(2.9367, abs=1e-4)


def test_translation_error_term():
    geometry, s = _touching_setup()
    goal = s.copy()
    goal[7] += 0.10
    _, comps = compute_reward(s, goal, forward_kinematics(s[:7]), geometry, s[7:])
    assert comps["r_op"] == pytest.approx(0.80, abs=1e-12)
    assert comps["bonus"] == 0.0


def test_antipodal_orientation_term_vanishes():
    geometry, s = _touching_setup()
    goal = s.copy()
    goal[9] = math.pi
    _, comps = compute_reward(s, goal, forward_kinematics(s[:7]), geometry, s[7:])
    assert comps["r_oq"] == pytest.approx(0.0, abs=1e-12)


states = st.lists(st.floats(-1.0, 1.0), min_size=10, max_size=10).map(np.array)


@given(states, states)
def test_reward_matches_oracle_and_respects_upper_bound(s_next, goal):
    geometry = synth.polygon(6, 0.04)
    kp = forward_kinematics(s_next[:7])
    r, _ = compute_reward(s_next, goal, kp, geometry, s_next[7:])
    assert r == pytest.approx(reward_oracle(s_next, goal, kp, geometry, s_next[7:]), abs=1e-9)
    assert r <= R_MAX + 1e-9


@given(states, st.floats(0.01, 100.0))
def test_bonus_indicator_ignores_penalty_scaling(s_next, scale):
    goal = s_next + np.r_[np.zeros(7), 0.02, -0.01, 0.03]
    geometry = synth.square(0.06)
    kp = forward_kinematics(s_next[:7])
    scaled = RewardWeights(w_wrist_trans=0.3 * scale, w_wrist_ornt=0.05 * scale,
                           w_finger=0.05 * scale, w_affinity=0.05 * scale)
    _, a = compute_reward(s_next, goal, kp, geometry, s_next[7:])
    _, b = compute_reward(s_next, goal, kp, geometry, s_next[7:], scaled)
    assert a["bonus"] == b["bonus"]


def _tiny_task():
    ref = np.array([
        [0.00, 0.12, 0.0, 0.1, 0.2, -0.1, -0.2, 0.00, 0.03, 0.0],
        [0.01, 0.13, 0.1, 0.2, 0.3, -0.2, -0.3, 0.02, 0.04, 0.3],
        [0.02, 0.14, 0.2, 0.3, 0.4, -0.3, -0.4, 0.04, 0.05, 3.1],
    ])
    return TrackingTask("tiny", ref, synth.square(0.06))


def test_observation_layout_matches_manual_assembly():
    task = _tiny_task()
    env = EnvState.start(task)
    feat = geometry_descriptor(task.geometry)
    last = np.arange(7) * 0.01
    obs = build_observation(env, feat, last)
    s0, goal = task.ref[0], task.ref[1]
    diff = goal - s0
    diff[2] = math.remainder(diff[2], 2 * math.pi)
    diff[9] = math.remainder(diff[9], 2 * math.pi)
    manual = np.concatenate([s0, np.zeros(10), goal, task.hand[0], last, feat, goal,
                             forward_kinematics(s0[:7]).ravel(), diff])
    assert obs.shape == (OBS_DIM,)
    np.testing.assert_allclose(obs, manual, atol=1e-15)


def test_observation_difference_block_vanishes_on_goal():
    task = _tiny_task()
    ref = np.array(task.ref)
    ref[1] = ref[0]
    env = EnvState.start(task.replace(ref=ref))
    obs = build_observation(env, geometry_descriptor(task.geometry), np.zeros(7))
    np.testing.assert_array_equal(obs[-10:], 0.0)
    np.testing.assert_array_equal(obs, build_observation(env, geometry_descriptor(task.geometry), np.zeros(7)))


def test_observation_at_last_frame_raises():
    task = _tiny_task()
    env = EnvState.start(task)
    env.n = task.n_steps
    with pytest.raises(EnvError):
        build_observation(env, np.zeros(32), np.zeros(7))


def test_zero_deltas_follow_baseline(slide_task):
    env = EnvState.start(slide_task)
    feat = geometry_descriptor(slide_task.geometry)
    for n in range(slide_task.n_steps):
        _, _, done, info = env_step(env, np.zeros(7), feat)
        np.testing.assert_array_equal(info["target"], slide_task.hand[n])
    assert done


def test_delta_and_cumulative_clamps(slide_task):
    env = EnvState.start(slide_task)
    feat = geometry_descriptor(slide_task.geometry)
    delta = np.zeros(7)
    delta[4] = 0.2
    _, _, _, info = env_step(env, delta, feat)
    assert env.cum_delta[4] == pytest.approx(0.05)
    assert info["target"][4] == pytest.approx(slide_task.hand[0, 4] + 0.05)
    for _ in range(20):
        env_step(env, delta, feat)
    assert env.cum_delta[4] == pytest.approx(CUM_LIMIT)


def test_object_far_from_reference_terminates(slide_task):
    ref = np.array(slide_task.ref)
    ref[1:, 7] += 0.3
    task = slide_task.replace(ref=ref)
    env = EnvState.start(task)
    _, _, done, info = env_step(env, np.zeros(7), geometry_descriptor(task.geometry))
    assert done and info["terminated"]
    with pytest.raises(EnvError):
        env_step(env, np.zeros(7), geometry_descriptor(task.geometry))


def test_zero_delta_rollout_is_pure_pd(lift_task):
    demo = rollout([EpisodeSpec.kinematic(lift_task)])[0]
    b = SimBatch.at_rest(lift_task.ref[:1])
    g = GeometryBatch.from_geometries([lift_task.geometry])
    states = [b.full_state()[0].copy()]
    for n in range(lift_task.n_steps):
        step_batch(b, lift_task.hand[n][None], g, SimParams())
        states.append(b.full_state()[0].copy())
    assert np.array_equal(demo.achieved, np.array(states))
    np.testing.assert_array_equal(demo.expert_actions, lift_task.hand[:-1])
    assert np.all(demo.rewards <= R_MAX + 1e-9)


def test_rollout_demonstration_invariants(slide_task, rng):
    def policy(obs):
        return rng.uniform(-0.1, 0.1, size=(len(obs), 7))

    demo = rollout([EpisodeSpec.kinematic(slide_task)], policy)[0]
    np.testing.assert_array_equal(demo.achieved[0], slide_task.ref[0])
    assert np.max(np.abs(demo.reconstruct_actions() - demo.expert_actions)) <= 1e-9
    assert np.all(np.abs(demo.expert_deltas) <= 0.05 + 1e-12)


def test_vec_env_marks_termination_and_resets(slide_task):
    ref = np.array(slide_task.ref)
    ref[10:, 7] += 0.3
    task = slide_task.replace(ref=ref)
    env = VecEnv([EpisodeSpec.kinematic(task)], 2)
    dones = []
    for _ in range(12):
        _, _, done, _ = env.step(np.zeros((2, 7)))
        dones.append(done.copy())
    dones = np.array(dones)
    assert dones[9].all() and not dones[:9].any()
    assert env.n[0] == 2  # restarted after the termination at step index 9


def test_reward_weights_must_be_non_negative():
    with pytest.raises(ValueError):
        RewardWeights(w_op=-1.0)
