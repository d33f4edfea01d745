"""PPO with generalised advantage estimation and an action-supervision (IL) term."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import io
from .env import DELTA_LIMIT, OBS_DIM, EpisodeSpec, RewardWeights, VecEnv, rollout
from .sim import SimParams
from .types import HAND_DIM, Demonstration, TrackingTask

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
CHECKPOINT_KIND = "controller"


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    lr: float = 3e-4
    epochs: int = 5
    minibatches: int = 4
    horizon: int = 32
    envs: int = 256
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    il_coef: float = 1.0
    max_grad_norm: float = 1.0
    hidden: int = 256
    log_std_init: float = -1.0
    # policy outputs are multiplied by this before becoming physical deltas (m or rad)
    action_scale: float = 0.05
    wrist_action_scale: float = 0.002
    checkpoint_every: int = 50
    eval_every: int = 10

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.horizon < 1 or self.envs < 1 or self.minibatches < 1 or self.epochs < 0:
            raise ValueError("horizon, envs and minibatches must be positive")


class RunningNorm(nn.Module):
    """Running mean/variance observation normaliser kept as module buffers."""

    def __init__(self, dim: int, clip: float = 10.0):
        super().__init__()
        self.register_buffer("mean", torch.zeros(dim, dtype=torch.float64))
        self.register_buffer("var", torch.ones(dim, dtype=torch.float64))
        self.register_buffer("count", torch.zeros((), dtype=torch.float64))
        self.clip = clip

    @torch.no_grad()
    def update(self, x: np.ndarray) -> None:
        x = torch.as_tensor(x, dtype=torch.float64)
        bm, bv, bc = x.mean(0), x.var(0, unbiased=False), x.shape[0]
        tot = self.count + bc
        delta = bm - self.mean
        self.mean += delta * bc / tot
        self.var = (self.var * self.count + bv * bc + delta ** 2 * self.count * bc / tot) / tot
        self.count = tot

    def forward(self, x):
        m = self.mean.to(x.dtype)
        s = torch.sqrt(self.var.to(x.dtype) + 1e-8)
        return torch.clamp((x - m) / s, -self.clip, self.clip)


class ReturnScaler:
    """Divides rewards by the running std of the discounted return."""

    def __init__(self, gamma: float, num_envs: int):
        self.gamma = gamma
        self.ret = np.zeros(num_envs)
        self.mean = 0.0
        self.var = 1.0
        self.count = 1e-4

    def __call__(self, rewards: np.ndarray, dones: np.ndarray) -> np.ndarray:
        out = np.empty_like(rewards)
        for t in range(len(rewards)):
            self.ret = self.ret * self.gamma + rewards[t]
            self._update(self.ret)
            out[t] = rewards[t] / math.sqrt(self.var + 1e-8)
            self.ret = np.where(dones[t], 0.0, self.ret)
        return out

    def _update(self, x):
        bm, bv, bc = float(x.mean()), float(x.var()), x.size
        tot = self.count + bc
        d = bm - self.mean
        self.mean += d * bc / tot
        self.var = (self.var * self.count + bv * bc + d * d * self.count * bc / tot) / tot
        self.count = tot


def _mlp(sizes, out_gain):
    layers = []
    for i in range(len(sizes) - 1):
        lin = nn.Linear(sizes[i], sizes[i + 1])
        last = i == len(sizes) - 2
        nn.init.orthogonal_(lin.weight, out_gain if last else math.sqrt(2))
        nn.init.zeros_(lin.bias)
        layers.append(lin)
        if not last:
            layers.append(nn.Tanh())
    return nn.Sequential(*layers)


class ActorCritic(nn.Module):
    def __init__(self, obs_dim: int = OBS_DIM, act_dim: int = HAND_DIM, hidden: int = 256,
                 log_std_init: float = -1.0):
        super().__init__()
        self.norm = RunningNorm(obs_dim)
        self.actor = _mlp([obs_dim, hidden, hidden, act_dim], 0.01)
        self.critic = _mlp([obs_dim, hidden, hidden, 1], 1.0)
        self.log_std = nn.Parameter(torch.full((act_dim,), float(log_std_init)))

    def forward(self, obs):
        x = self.norm(obs)
        mu = self.actor(x)
        log_std = torch.clamp(self.log_std, LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std, self.critic(x).squeeze(-1)

    @torch.no_grad()
    def act_mean(self, obs: np.ndarray) -> np.ndarray:
        mu, _, _ = self(torch.as_tensor(obs, dtype=self.log_std.dtype))
        return mu.numpy().astype(float)

    # flat parameter vector (parameters then buffers, in state_dict order)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.detach().reshape(-1).double().numpy() for t in self.state_dict().values()])

    def load_flat(self, vec) -> None:
        vec = np.asarray(vec)
        sd = self.state_dict()
        i = 0
        new = {}
        for k, t in sd.items():
            n = t.numel()
            new[k] = torch.as_tensor(vec[i: i + n], dtype=t.dtype).reshape(t.shape)
            i += n
        if i != len(vec):
            raise io.CheckpointError(f"parameter count mismatch: {len(vec)} != {i}")
        self.load_state_dict(new)


def make_policy(cfg: PpoConfig, seed: int) -> ActorCritic:
    torch.manual_seed(seed)
    return ActorCritic(hidden=cfg.hidden, log_std_init=cfg.log_std_init)


def gaussian_logp(mu, log_std, u):
    return (-0.5 * ((u - mu) / torch.exp(log_std)) ** 2 - log_std - 0.5 * math.log(2 * math.pi)).sum(-1)


def scale_vector(cfg: PpoConfig) -> np.ndarray:
    """Per-DoF factor turning policy outputs into physical deltas (wrist, then fingers)."""
    return np.array([cfg.wrist_action_scale] * 3 + [cfg.action_scale] * 4)


def policy_deltas(mean: np.ndarray, cfg: PpoConfig) -> np.ndarray:
    return np.clip(scale_vector(cfg) * mean, -DELTA_LIMIT, DELTA_LIMIT)


def mean_policy(policy: ActorCritic, cfg: PpoConfig):
    return lambda obs: policy_deltas(policy.act_mean(obs), cfg)


# rollouts and advantages


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray  # raw policy-space samples
    logp: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray
    expert: np.ndarray
    expert_mask: np.ndarray
    baselines: np.ndarray
    cum_deltas: np.ndarray
    episode_returns: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.obs.shape[0] * self.obs.shape[1]


def collect_rollouts(policy: ActorCritic, env: VecEnv, steps: int, rng: np.random.Generator,
                     cfg: PpoConfig, deterministic: bool = False, obs: np.ndarray | None = None):
    """``steps`` x ``env.E`` transitions; returns ``(batch, next_obs)``."""
    E = env.E
    obs = env.observe() if obs is None else obs
    shp = (steps, E)
    b = Batch(np.zeros(shp + (OBS_DIM,)), np.zeros(shp + (HAND_DIM,)), np.zeros(shp), np.zeros(shp),
              np.zeros(shp), np.zeros(shp, dtype=bool), np.zeros(E), np.zeros(shp + (HAND_DIM,)),
              np.zeros(shp, dtype=bool), np.zeros(shp + (HAND_DIM,)), np.zeros(shp + (HAND_DIM,)))
    dtype = policy.log_std.dtype
    for t in range(steps):
        with torch.no_grad():
            mu, log_std, v = policy(torch.as_tensor(obs, dtype=dtype))
        mu = mu.double().numpy()
        std = np.exp(log_std.double().numpy())
        u = mu if deterministic else mu + std * rng.standard_normal(mu.shape)
        b.obs[t] = obs
        b.actions[t] = u
        b.logp[t] = (-0.5 * ((u - mu) / std) ** 2 - np.log(std) - 0.5 * math.log(2 * math.pi)).sum(-1)
        b.values[t] = v.double().numpy()
        b.expert[t], b.expert_mask[t] = env.expert_targets()
        b.baselines[t] = env.current_baseline()
        b.cum_deltas[t] = env.cum
        obs, r, done, info = env.step(policy_deltas(u, cfg))
        b.rewards[t] = r
        b.dones[t] = done
        b.episode_returns.extend(info["episode_return"][done].tolist())
    with torch.no_grad():
        b.last_values = policy(torch.as_tensor(obs, dtype=dtype))[2].double().numpy()
    return b, obs


def gae(rewards, values, dones, gamma: float, lam: float, last_values=None):
    """Generalised advantage estimates and returns along axis 0 (time)."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    T = len(rewards)
    nxt = np.zeros_like(values[0]) if last_values is None else np.asarray(last_values, dtype=float)
    adv = np.zeros_like(values)
    acc = np.zeros_like(values[0])
    for t in reversed(range(T)):
        nonterm = 1.0 - dones[t]
        v_next = values[t + 1] if t + 1 < T else nxt
        delta = rewards[t] + gamma * v_next * nonterm - values[t]
        acc = delta + gamma * lam * nonterm * acc
        adv[t] = acc
    return adv, adv + values


def normalize(adv):
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def il_loss(policy: ActorCritic, obs, expert_targets, baselines, cum_deltas, mask=None,
            action_scale=1.0):
    """Mean Euclidean distance between implied absolute targets and expert targets."""
    obs = torch.as_tensor(obs, dtype=policy.log_std.dtype)
    if mask is not None:
        mask = torch.as_tensor(np.asarray(mask, dtype=bool))
        if not bool(mask.any()):
            return torch.zeros((), dtype=obs.dtype)
    elif obs.shape[0] == 0:
        return torch.zeros((), dtype=obs.dtype)
    mu, _, _ = policy(obs)
    implied = (torch.as_tensor(baselines, dtype=obs.dtype) + torch.as_tensor(cum_deltas, dtype=obs.dtype)
               + torch.as_tensor(np.asarray(action_scale, dtype=float), dtype=obs.dtype) * mu)
    dist = torch.linalg.vector_norm(implied - torch.as_tensor(expert_targets, dtype=obs.dtype), dim=-1)
    if mask is not None:
        dist = dist[mask]
    return dist.mean()


def ppo_loss(policy: ActorCritic, mb: dict, cfg: PpoConfig):
    """Total loss and its parts on one minibatch of flattened tensors."""
    mu, log_std, v = policy(mb["obs"])
    logp = gaussian_logp(mu, log_std, mb["actions"])
    ratio = torch.exp(logp - mb["logp"])
    adv = mb["adv"]
    surr = torch.min(ratio * adv, torch.clamp(ratio, 1 - cfg.clip, 1 + cfg.clip) * adv)
    policy_loss = -surr.mean()
    value_loss = ((v - mb["returns"]) ** 2).mean()
    entropy = (log_std + 0.5 * math.log(2 * math.pi * math.e)).sum()
    il = torch.zeros((), dtype=mu.dtype)
    mask = mb["expert_mask"]
    if cfg.il_coef > 0 and bool(mask.any()):
        scale = torch.as_tensor(scale_vector(cfg), dtype=mu.dtype)
        implied = mb["baselines"] + mb["cum_deltas"] + scale * mu
        dist = torch.linalg.vector_norm(implied - mb["expert"], dim=-1)
        il = dist[mask].mean()
    total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy + cfg.il_coef * il
    with torch.no_grad():
        kl = (mb["logp"] - logp).mean()
        clip_frac = ((ratio - 1).abs() > cfg.clip).double().mean()
    return total, {"policy_loss": float(policy_loss.detach()), "value_loss": float(value_loss.detach()),
                   "il_loss": float(il.detach()), "kl": float(kl), "clip_frac": float(clip_frac)}


def flatten_batch(batch: Batch, cfg: PpoConfig, dtype=torch.float32, rewards=None) -> dict:
    rewards = batch.rewards if rewards is None else rewards
    adv, ret = gae(rewards, batch.values, batch.dones, cfg.gamma, cfg.gae_lambda, batch.last_values)
    adv = normalize(adv)

    def f(a, dt=dtype):
        a = np.asarray(a)
        return torch.as_tensor(a.reshape((-1,) + a.shape[2:]), dtype=dt)

    return {"obs": f(batch.obs), "actions": f(batch.actions), "logp": f(batch.logp), "adv": f(adv),
            "returns": f(ret), "expert": f(batch.expert), "expert_mask": f(batch.expert_mask, torch.bool),
            "baselines": f(batch.baselines), "cum_deltas": f(batch.cum_deltas)}


def ppo_update(policy: ActorCritic, opt: torch.optim.Optimizer, data: dict, cfg: PpoConfig,
               rng: np.random.Generator) -> dict:
    """Clipped-surrogate epochs over shuffled minibatches; aborts on a non-finite loss."""
    n = data["obs"].shape[0]
    size = max(1, n // cfg.minibatches)
    stats = []
    backup = {k: v.clone() for k, v in policy.state_dict().items()}
    opt_backup = {k: v for k, v in opt.state_dict().items()}
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for i in range(cfg.minibatches):
            idx = torch.as_tensor(perm[i * size: (i + 1) * size])
            mb = {k: v[idx] for k, v in data.items()}
            loss, st = ppo_loss(policy, mb, cfg)
            if not torch.isfinite(loss):
                policy.load_state_dict(backup)
                opt.load_state_dict(opt_backup)
                log.warning("non-finite loss; update skipped")
                return {"aborted": True, "policy_loss": float("nan"), "value_loss": float("nan"),
                        "il_loss": float("nan"), "kl": float("nan"), "clip_frac": float("nan")}
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(policy.parameters(), cfg.max_grad_norm)
            opt.step()
            stats.append(st)
    with torch.no_grad():
        policy.log_std.clamp_(LOG_STD_MIN, LOG_STD_MAX)
    if not stats:
        return {"aborted": False, "policy_loss": 0.0, "value_loss": 0.0, "il_loss": 0.0, "kl": 0.0,
                "clip_frac": 0.0}
    out = {k: float(np.mean([s[k] for s in stats])) for k in stats[0]}
    out["aborted"] = False
    return out


# training loops


@dataclass
class TrainResult:
    policy: ActorCritic
    log: list
    best_score: float
    steps: int


def _evaluate(policy, specs, cfg, params, weights):
    from .evalkit import evaluate_rollout, tracking_error

    demos = rollout(specs, mean_policy(policy, cfg), params, weights)
    errs = [tracking_error(d.achieved, s.task.ref) for d, s in zip(demos, specs)]
    succ = [evaluate_rollout(d.achieved, s.task.ref).success_loose for d, s in zip(demos, specs)]
    return demos, float(np.mean(succ)), float(np.mean(errs))


def train(specs, cfg: PpoConfig, budget_steps: int, seed: int, params: SimParams = SimParams(),
          weights: RewardWeights = RewardWeights(), policy: ActorCritic | None = None,
          eval_specs=None, checkpoint_path=None, select_best: bool = True,
          rank: str = "success") -> TrainResult:
    """Generic PPO(+IL) loop over a fixed set of episode specs.

    The returned policy is the best one seen by periodic deterministic
    evaluation on ``eval_specs`` (default: the training specs), ranked by
    loose success rate and then mean tracking error (``rank="success"``),
    or by tracking error alone (``rank="error"``).
    """
    if rank not in ("success", "error"):
        raise ValueError(f"unknown rank {rank!r}")

    def score(succ, err):
        return (succ, -err) if rank == "success" else (-err,)

    rng = np.random.default_rng(seed)
    policy = make_policy(cfg, seed) if policy is None else policy
    eval_specs = specs if eval_specs is None else eval_specs
    history: list = []
    if budget_steps <= 0:
        return TrainResult(policy, history, float("nan"), 0)
    env = VecEnv(specs, cfg.envs, params, weights, seed=int(rng.integers(2 ** 31)),
                 assign="uniform" if len(specs) > cfg.envs else "cycle")
    opt = torch.optim.Adam(policy.parameters(), lr=cfg.lr)
    scaler = ReturnScaler(cfg.gamma, cfg.envs)
    per_update = cfg.horizon * cfg.envs
    updates = max(1, int(math.ceil(budget_steps / per_update)))
    best = None
    best_key = None
    if select_best:
        _, succ, err = _evaluate(policy, eval_specs, cfg, params, weights)
        best_key = score(succ, err)
        best = {k: v.clone() for k, v in policy.state_dict().items()}
        history.append({"update": 0, "steps": 0, "eval_success": succ, "eval_error": err})
    obs = env.observe()
    steps = 0
    for u in range(1, updates + 1):
        batch, obs = collect_rollouts(policy, env, cfg.horizon, rng, cfg, obs=obs)
        steps += batch.size
        policy.norm.update(batch.obs.reshape(-1, OBS_DIM))
        data = flatten_batch(batch, cfg, rewards=scaler(batch.rewards, batch.dones))
        st = ppo_update(policy, opt, data, cfg, rng)
        st.update(update=u, steps=steps, mean_return=float(np.mean(batch.episode_returns))
                  if batch.episode_returns else float("nan"))
        if select_best and (u % cfg.eval_every == 0 or u == updates):
            _, succ, err = _evaluate(policy, eval_specs, cfg, params, weights)
            st.update(eval_success=succ, eval_error=err)
            key = score(succ, err)
            if best_key is None or key > best_key:
                best_key = key
                best = {k: v.clone() for k, v in policy.state_dict().items()}
        history.append(st)
        if checkpoint_path is not None and u % cfg.checkpoint_every == 0:
            save_policy(checkpoint_path, policy, cfg, {"steps": steps, "update": u})
    if best is not None:
        policy.load_state_dict(best)
    return TrainResult(policy, history, best_key[0] if best_key else float("nan"), steps)


def train_controller(tasks, demo_store: dict, cfg: PpoConfig, budget_steps: int, seed: int,
                     demo_threshold: float, params: SimParams = SimParams(),
                     weights: RewardWeights = RewardWeights(), checkpoint_path=None,
                     policy: ActorCritic | None = None) -> TrainResult:
    """Generalisable controller: kinematic baselines, expert targets for curated demos.

    ``policy`` warm-starts training from an existing controller.
    """
    if not tasks:
        raise ValueError("empty task set")
    specs = []
    for t in tasks:
        d = demo_store.get(t.id)
        expert = d.expert_actions if d is not None and d.episode_reward > demo_threshold else None
        specs.append(EpisodeSpec.kinematic(t, expert))
    return train(specs, cfg, budget_steps, seed, params, weights, policy=policy, checkpoint_path=checkpoint_path)


def demo_threshold_for(n_steps: int, weights: RewardWeights = RewardWeights(), fraction: float = 0.35) -> float:
    return fraction * n_steps * weights.r_max


# persistence


def save_policy(path, policy: ActorCritic, cfg: PpoConfig, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta.update(kind=CHECKPOINT_KIND, ppo=asdict(cfg))
    io.save_checkpoint(path, policy.flat(), meta)


def load_policy(path) -> tuple[ActorCritic, PpoConfig, dict]:
    vec, meta = io.load_checkpoint(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise io.CheckpointError(f"{path}: not a controller checkpoint")
    cfg = PpoConfig(**meta["ppo"])
    policy = ActorCritic(hidden=cfg.hidden, log_std_init=cfg.log_std_init)
    policy.load_flat(vec)
    return policy, cfg, meta


def rollout_policy(policy: ActorCritic, cfg: PpoConfig, specs, params: SimParams = SimParams(),
                   weights: RewardWeights = RewardWeights()) -> list[Demonstration]:
    return rollout(specs, mean_policy(policy, cfg), params, weights)


def controller_rollouts(policy, cfg, tasks: list[TrackingTask], params=SimParams(),
                        weights=RewardWeights()) -> list[Demonstration]:
    return rollout_policy(policy, cfg, [EpisodeSpec.kinematic(t) for t in tasks], params, weights)
