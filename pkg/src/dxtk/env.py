"""The tracking MDP: observations, rewards and residual target accumulation.

Everything is written for a batch of environments; the single-environment
helpers (:class:`EnvState`, :func:`env_step`, ...) wrap a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import wrap_angle
from .sim import (GeometryBatch, SimBatch, SimParams, SimState, forward_kinematics, step_batch)
from .types import (ANGLE_IDX, HAND_DIM, STATE_DIM, Demonstration, TaskError, TrackingTask,
                    geometry_descriptor)

OBS_DIM = 108  # 10+10+10+7+7+32+10+12+10
DELTA_LIMIT = 0.05
CUM_LIMIT = 0.5
TERMINATE_DIST = 0.25
AFFINITY_CLAMP = 0.2


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardWeights:
    w_op: float = 1.0
    w_oq: float = 0.33
    w_wrist_trans: float = 0.3
    w_wrist_ornt: float = 0.05
    w_finger: float = 0.05
    w_affinity: float = 0.05
    bonus: float = 1.0
    bonus_rot_deg: float = 5.0
    bonus_trans_m: float = 0.05

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not v >= 0:
                raise ValueError(f"reward weight {k} must be non-negative")

    @property
    def r_max(self) -> float:
        return self.w_op * 0.9 + self.w_oq * np.pi + self.bonus


def diff_angle(a, b):
    """Unsigned wrapped angle difference in ``[0, pi]``."""
    return np.abs(wrap_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


def state_difference(goal, state):
    """``goal - state`` with wrapped angle components (signed)."""
    d = np.asarray(goal, dtype=float) - np.asarray(state, dtype=float)
    d[..., list(ANGLE_IDX)] = wrap_angle(d[..., list(ANGLE_IDX)])
    return d


def boundary_distance(points, pose, verts, valid):
    """Unsigned distance from world points ``(E, P, 2)`` to each env's polygon boundary."""
    c, s = np.cos(pose[:, 2])[:, None], np.sin(pose[:, 2])[:, None]
    rel = points - pose[:, None, :2]
    pb = np.stack([c * rel[..., 0] + s * rel[..., 1], -s * rel[..., 0] + c * rel[..., 1]], axis=-1)
    a = verts[:, None, :, :]
    b = np.roll(verts, -1, axis=1)
    # the padded slots repeat the last vertex, so close the polygon explicitly
    nv = valid.sum(axis=1)
    b[np.arange(len(verts)), nv - 1] = verts[:, 0]
    b = b[:, None]
    ab = b - a
    ap = pb[:, :, None, :] - a
    t = np.clip(np.sum(ap * ab, -1) / np.maximum(np.sum(ab * ab, -1), 1e-300), 0.0, 1.0)
    d = np.linalg.norm(ap - t[..., None] * ab, axis=-1)
    d = np.where(valid[:, None, :], d, np.inf)
    return d.min(axis=-1)


def reward_terms(s_next, goal, tip_dist, w: RewardWeights):
    """Batched reward; ``tip_dist`` is the (E, 2) fingertip-to-surface distance."""
    s_next = np.atleast_2d(s_next)
    goal = np.atleast_2d(goal)
    dp = np.linalg.norm(s_next[:, 7:9] - goal[:, 7:9], axis=1)
    dq = diff_angle(s_next[:, 9], goal[:, 9])
    r_op = 0.9 - dp
    r_oq = np.pi - dq
    wrist_t = np.abs(s_next[:, :2] - goal[:, :2]).sum(axis=1)
    wrist_r = diff_angle(s_next[:, 2], goal[:, 2])
    finger = np.abs(s_next[:, 3:7] - goal[:, 3:7]).sum(axis=1)
    aff = -np.clip(np.mean(tip_dist, axis=1), 0.0, AFFINITY_CLAMP)
    hit = (dq < np.deg2rad(w.bonus_rot_deg)) & (dp < w.bonus_trans_m)
    r = (w.w_op * r_op + w.w_oq * r_oq - (w.w_wrist_trans * wrist_t + w.w_wrist_ornt * wrist_r)
         - w.w_finger * finger + w.w_affinity * aff + w.bonus * hit)
    comps = {"r_op": r_op, "r_oq": r_oq, "wrist_trans": wrist_t, "wrist_ornt": wrist_r,
             "finger": finger, "affinity": aff, "bonus": hit.astype(float)}
    return r, comps


def compute_reward(s_next, goal, hand_keypoints, geometry, obj_pose, w: RewardWeights = RewardWeights()):
    """Reward of one transition landing in ``s_next`` against ``goal``."""
    g = GeometryBatch.from_geometries([geometry])
    kp = np.asarray(hand_keypoints, dtype=float)[None, [2, 5]]
    dist = boundary_distance(kp, np.asarray(obj_pose, dtype=float)[None], g.verts, g.valid)
    r, comps = reward_terms(np.asarray(s_next, dtype=float), np.asarray(goal, dtype=float), dist, w)
    return float(r[0]), {k: float(v[0]) for k, v in comps.items()}


def assemble_observation(state, vel, goal, base, last_target, feat, keypoints):
    """Fixed-order observation vector(s); all inputs carry a leading batch axis."""
    return np.concatenate([
        state, vel, goal, base, last_target, feat,
        goal, keypoints.reshape(len(state), 12), state_difference(goal, state),
    ], axis=1)


@dataclass(frozen=True)
class EpisodeSpec:
    """One task as seen by an environment: reference, baseline and optional expert targets."""

    task: TrackingTask
    baseline: np.ndarray
    expert: np.ndarray | None = None

    def __post_init__(self):
        b = np.asarray(self.baseline, dtype=float)
        if b.shape != (self.task.n_steps + 1, HAND_DIM):
            raise TaskError(f"baseline shape {b.shape} does not match task {self.task.id}")
        object.__setattr__(self, "baseline", b)
        if self.expert is not None:
            e = np.asarray(self.expert, dtype=float)
            if e.shape != (self.task.n_steps, HAND_DIM):
                raise TaskError(f"expert targets shape {e.shape} does not match task {self.task.id}")
            object.__setattr__(self, "expert", e)

    @classmethod
    def kinematic(cls, task: TrackingTask, expert=None) -> "EpisodeSpec":
        return cls(task, task.hand.copy(), expert)


class VecEnv:
    """A batch of tracking environments stepping in lockstep.

    ``assign`` maps environment slots to episode specs on reset: ``"cycle"``
    gives slot ``i`` spec ``i mod S`` forever, ``"uniform"`` draws a spec
    uniformly at every reset.
    """

    def __init__(self, specs, num_envs: int, params: SimParams = SimParams(),
                 weights: RewardWeights = RewardWeights(), seed: int = 0, assign: str = "cycle",
                 auto_reset: bool = True):
        if not specs:
            raise EnvError("no episode specs")
        if assign not in ("cycle", "uniform"):
            raise EnvError(f"unknown assignment {assign!r}")
        self.specs = list(specs)
        self.E = int(num_envs)
        self.params = params
        self.weights = weights
        self.assign = assign
        self.auto_reset = auto_reset
        self.rng = np.random.default_rng(seed)
        S = len(self.specs)
        n_max = max(s.task.n_steps for s in self.specs)
        self.n_steps = np.array([s.task.n_steps for s in self.specs])
        self.ref = np.zeros((S, n_max + 1, STATE_DIM))
        self.base = np.zeros((S, n_max + 1, HAND_DIM))
        self.expert = np.zeros((S, n_max, HAND_DIM))
        self.has_expert = np.zeros(S, dtype=bool)
        for i, s in enumerate(self.specs):
            N = s.task.n_steps
            self.ref[i, : N + 1] = s.task.ref
            self.ref[i, N + 1:] = s.task.ref[-1]
            self.base[i, : N + 1] = s.baseline
            self.base[i, N + 1:] = s.baseline[-1]
            if s.expert is not None:
                self.expert[i, :N] = s.expert
                self.has_expert[i] = True
        self.feat = np.stack([geometry_descriptor(s.task.geometry) for s in self.specs])
        self.geoms_all = GeometryBatch.from_geometries([s.task.geometry for s in self.specs])
        self.spec_idx = np.zeros(self.E, dtype=np.int64)
        self.n = np.zeros(self.E, dtype=np.int64)
        self.cum = np.zeros((self.E, HAND_DIM))
        self.last_target = np.zeros((self.E, HAND_DIM))
        self.done = np.zeros(self.E, dtype=bool)
        self.terminated = np.zeros(self.E, dtype=bool)
        self.episode_return = np.zeros(self.E)
        self.sim = SimBatch.at_rest(np.zeros((self.E, STATE_DIM)))
        self.geoms = self.geoms_all.take(self.spec_idx)
        self.resets = 0
        self.reset()

    # lifecycle

    def _choose(self, idx):
        if self.assign == "cycle":
            return idx % len(self.specs)
        return self.rng.integers(0, len(self.specs), size=len(idx))

    def reset(self, idx=None) -> np.ndarray:
        idx = np.arange(self.E) if idx is None else np.asarray(idx)
        if len(idx):
            sp = self._choose(idx)
            self.spec_idx[idx] = sp
            self.n[idx] = 0
            self.cum[idx] = 0.0
            self.last_target[idx] = self.base[sp, 0]
            self.done[idx] = False
            self.terminated[idx] = False
            self.episode_return[idx] = 0.0
            self.sim.assign(idx, SimBatch.at_rest(self.ref[sp, 0]))
            for f in ("verts", "normals", "offs", "valid", "mass", "inertia", "nverts"):
                getattr(self.geoms, f)[idx] = getattr(self.geoms_all, f)[sp]
            self.resets += len(idx)
        return self.observe()

    def observe(self) -> np.ndarray:
        sp, n = self.spec_idx, self.n
        state = self.sim.full_state()
        goal = self.ref[sp, np.minimum(n + 1, self.n_steps[sp])]
        kp = forward_kinematics(self.sim.hand_q, self.params)
        return assemble_observation(state, self.sim.velocity(), goal, self.base[sp, n],
                                    self.last_target, self.feat[sp], kp)

    def expert_targets(self) -> tuple[np.ndarray, np.ndarray]:
        """Timestep-aligned expert targets ``(E, 7)`` and a mask of envs that have them."""
        sp = self.spec_idx
        n = np.minimum(self.n, self.n_steps[sp] - 1)
        return self.expert[sp, n], self.has_expert[sp]

    def current_baseline(self) -> np.ndarray:
        return self.base[self.spec_idx, self.n]

    def step(self, delta):
        """Apply per-env residual deltas; returns ``(obs, reward, done, info)``.

        ``done`` marks the transition that ended an episode. With
        ``auto_reset`` those envs are reset and ``obs`` is the first
        observation of their new episode.
        """
        if np.any(self.done):
            raise EnvError("step on a finished environment")
        delta = np.clip(np.asarray(delta, dtype=float).reshape(self.E, HAND_DIM), -DELTA_LIMIT, DELTA_LIMIT)
        if not np.all(np.isfinite(delta)):
            raise EnvError("non-finite action")
        sp, n = self.spec_idx, self.n
        self.cum = np.clip(self.cum + delta, -CUM_LIMIT, CUM_LIMIT)
        target = self.base[sp, n] + self.cum
        self.last_target = target
        step_batch(self.sim, target, self.geoms, self.params)
        self.n = n + 1
        s_next = self.sim.full_state()
        goal = self.ref[sp, self.n]
        kp = forward_kinematics(self.sim.hand_q, self.params)
        tip = boundary_distance(kp[:, [2, 5]], self.sim.obj_q, self.geoms.verts, self.geoms.valid)
        reward, _ = reward_terms(s_next, goal, tip, self.weights)
        dev = np.linalg.norm(s_next[:, 7:9] - goal[:, 7:9], axis=1)
        terminated = dev > TERMINATE_DIST
        truncated = self.n >= self.n_steps[sp]
        done = terminated | truncated
        self.episode_return += reward
        info = {"terminated": terminated, "truncated": truncated & ~terminated,
                "episode_return": np.where(done, self.episode_return, np.nan),
                "spec_idx": sp.copy(), "target": target.copy()}
        self.done = done.copy()
        if self.auto_reset and np.any(done):
            obs = self.reset(np.flatnonzero(done))
        else:
            obs = self.observe()
        return obs, reward, done, info


# single-environment interface


@dataclass
class EnvState:
    sim: SimState
    task: TrackingTask
    baseline: np.ndarray
    cum_delta: np.ndarray = field(default_factory=lambda: np.zeros(HAND_DIM))
    n: int = 0
    done: bool = False
    last_target: np.ndarray | None = None
    terminate_dist_m: float = TERMINATE_DIST

    @classmethod
    def start(cls, task: TrackingTask, baseline=None) -> "EnvState":
        base = task.hand.copy() if baseline is None else np.asarray(baseline, dtype=float)
        return cls(SimState.from_full_state(task.ref[0]), task, base, last_target=base[0].copy())


def build_observation(env: EnvState, feat_obj, last_action, params: SimParams = SimParams()) -> np.ndarray:
    if env.n >= env.task.n_steps:
        raise EnvError("no next goal at the final frame")
    s = env.sim
    state = np.concatenate([s.hand, s.obj])[None]
    kp = forward_kinematics(s.hand, params)[None]
    return assemble_observation(state, s.qdot[None], env.task.ref[env.n + 1][None],
                                env.baseline[env.n][None], np.asarray(last_action, dtype=float)[None],
                                np.asarray(feat_obj, dtype=float)[None], kp)[0]


def env_step(env: EnvState, delta, feat_obj, w: RewardWeights = RewardWeights(),
             params: SimParams = SimParams()):
    """Advance ``env`` in place by one control step."""
    if env.done:
        raise EnvError("step on a finished environment")
    delta = np.clip(np.asarray(delta, dtype=float), -DELTA_LIMIT, DELTA_LIMIT)
    env.cum_delta = np.clip(env.cum_delta + delta, -CUM_LIMIT, CUM_LIMIT)
    target = env.baseline[env.n] + env.cum_delta
    b = env.sim.to_batch()
    step_batch(b, target[None], GeometryBatch.from_geometries([env.task.geometry]), params)
    env.sim = SimState.from_batch(b)
    env.last_target = target
    env.n += 1
    s_next = b.full_state()[0]
    goal = env.task.ref[env.n]
    kp = forward_kinematics(env.sim.hand, params)
    reward, comps = compute_reward(s_next, goal, kp, env.task.geometry, env.sim.obj, w)
    dev = float(np.linalg.norm(s_next[7:9] - goal[7:9]))
    terminated = dev > env.terminate_dist_m
    env.done = terminated or env.n >= env.task.n_steps
    obs = None if env.n >= env.task.n_steps else build_observation(env, feat_obj, target, params)
    return obs, reward, env.done, {"terminated": terminated, "components": comps, "target": target}


# deterministic full-length rollouts


def rollout(specs, policy=None, params: SimParams = SimParams(),
            weights: RewardWeights = RewardWeights()) -> list[Demonstration]:
    """Roll every spec out for its full length with ``policy(obs) -> delta``.

    ``policy=None`` applies zero deltas (pure PD on the baseline). Episodes
    keep simulating after early termination so that metrics see N+1
    states, but rewards from the termination step on are zero.
    """
    specs = list(specs)
    env = VecEnv(specs, len(specs), params, weights, assign="cycle", auto_reset=False)
    S = len(specs)
    n_max = int(env.n_steps.max())
    achieved = np.zeros((S, n_max + 1, STATE_DIM))
    achieved[:, 0] = env.sim.full_state()
    deltas = np.zeros((S, n_max, HAND_DIM))
    targets = np.zeros((S, n_max, HAND_DIM))
    rewards = np.zeros((S, n_max))
    alive = np.ones(S, dtype=bool)
    obs = env.observe()
    for t in range(n_max):
        active = t < env.n_steps
        d = np.zeros((S, HAND_DIM)) if policy is None else np.asarray(policy(obs), dtype=float)
        d = np.where(active[:, None], np.clip(d, -DELTA_LIMIT, DELTA_LIMIT), 0.0)
        prev_cum = env.cum.copy()
        env.done[:] = False
        obs, r, done, info = env.step(d)
        # the applied delta is what survives the cumulative clamp
        deltas[:, t] = env.cum - prev_cum
        targets[:, t] = info["target"]
        alive &= ~info["terminated"] | ~active
        rewards[:, t] = np.where(alive & active, r, 0.0)
        achieved[:, t + 1] = env.sim.full_state()
        # finished specs hold their last state
        env.n = np.minimum(env.n, env.n_steps - 1)
    out = []
    for i, s in enumerate(specs):
        N = s.task.n_steps
        out.append(Demonstration(
            task_id=s.task.id, baseline=s.baseline, expert_actions=targets[i, :N],
            expert_deltas=deltas[i, :N], achieved=achieved[i, : N + 1], rewards=rewards[i, :N],
            episode_reward=float(rewards[i, :N].sum())))
    return out
