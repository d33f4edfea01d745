"""Demonstration mining.

Per-trajectory residual trackers, transfer of the generalisable controller
as a baseline, chained (homotopy) solving through easier neighbouring
tasks, brute-force search for effective parents and curation of the best
results into a demo store.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import io
from .env import EpisodeSpec, RewardWeights, rollout
from .evalkit import resample, task_diff, tracking_error
from .learner import ActorCritic, PpoConfig, controller_rollouts, mean_policy, train
from .parallel import derive_seed, run_jobs
from .sim import SimParams
from .types import Demonstration, TrackingTask

log = logging.getLogger(__name__)

DEFAULT_TRACK_BUDGET = 100_000
INDEX_FILE = "index.json"
DEMO_FILE = "demos.jsonl"


class MiningError(ValueError):
    pass


def tracker_config(**overrides) -> PpoConfig:
    """Single-trajectory tracker: RL only, a small batch of envs, frequent evaluation."""
    kw = dict(envs=32, horizon=32, il_coef=0.0, eval_every=5)
    kw.update(overrides)
    return PpoConfig(**kw)


@dataclass
class TrackResult:
    task_id: str
    baseline_used: np.ndarray
    policy: np.ndarray | None  # flat residual-policy parameters, None for the zero residual
    rollout: Demonstration
    error: float

    def __post_init__(self):
        if not self.error >= 0:
            raise MiningError(f"tracking error must be non-negative, got {self.error}")


@dataclass
class HomotopyPath:
    chain: list  # task ids, farthest ancestor first, the solved task last
    per_hop_error: list
    effective: list

    def __post_init__(self):
        if len(self.per_hop_error) != len(self.chain) or len(self.effective) != len(self.chain) - 1:
            raise MiningError("inconsistent path record")

    def to_dict(self) -> dict:
        return {"chain": list(self.chain), "per_hop_error": [float(e) for e in self.per_hop_error],
                "effective": [None if f is None else bool(f) for f in self.effective]}

    @classmethod
    def from_dict(cls, d: dict) -> "HomotopyPath":
        return cls(list(d["chain"]), [float(e) for e in d["per_hop_error"]],
                   [None if f is None else bool(f) for f in d["effective"]])


def save_paths(path, paths) -> None:
    io.write_jsonl(path, [p.to_dict() for p in paths])


def load_paths(path) -> list[HomotopyPath]:
    return [HomotopyPath.from_dict(d) for d in io.read_jsonl(path)]


# baselines


def baseline_from_targets(targets, n_steps: int | None = None) -> np.ndarray:
    """Turn an (N, 7) absolute-target sequence into an (N+1, 7) baseline.

    Frame ``n`` of the baseline is the target applied at step ``n``, so a
    zero-residual run on the new baseline repeats the source rollout; the
    final frame repeats the last target. Sequences of another length are
    time-normalised first.
    """
    t = np.asarray(targets, dtype=float)
    b = np.concatenate([t, t[-1:]], axis=0)
    if n_steps is not None and n_steps + 1 != len(b):
        b = resample(b, n_steps + 1)
        # keep the wrist angle continuous: targets are never wrapped
        b[:, 2] = np.unwrap(b[:, 2])
    return b


def baseline_from_result(result: TrackResult, task: TrackingTask) -> np.ndarray:
    return baseline_from_targets(result.rollout.expert_actions, task.n_steps)


# single-trajectory tracking


def _result(task, baseline, policy_vec, demo, w) -> TrackResult:
    err = tracking_error(demo.achieved, task.ref)
    return TrackResult(task.id, np.asarray(baseline, dtype=float), policy_vec, replace(demo, error=err), err)


def track_single(task: TrackingTask, baseline, budget_steps: int, seed: int,
                 cfg: PpoConfig | None = None, params: SimParams = SimParams(),
                 weights: RewardWeights = RewardWeights()) -> TrackResult:
    """Fit a residual policy to one task around ``baseline``.

    The zero-residual rollout competes with the trained policy's best
    checkpoint; the lower tracking error wins, ties going to the zero residual.
    """
    cfg = tracker_config() if cfg is None else cfg
    spec = EpisodeSpec(task, baseline)
    best = _result(task, spec.baseline, None, rollout([spec], None, params, weights)[0], weights)
    if budget_steps <= 0:
        return best
    res = train([spec], cfg, budget_steps, seed, params, weights, rank="error")
    demo = rollout([spec], mean_policy(res.policy, cfg), params, weights)[0]
    cand = _result(task, spec.baseline, res.policy.flat(), demo, weights)
    log.debug("track %s: zero-residual %.4f trained %.4f", task.id, best.error, cand.error)
    return cand if cand.error < best.error else best


def track_direct(task, budget_steps, seed, cfg=None, params=SimParams(), weights=RewardWeights()):
    return track_single(task, task.hand, budget_steps, seed, cfg, params, weights)


def transfer_prior(task: TrackingTask, controller: ActorCritic, controller_cfg: PpoConfig,
                   budget_steps: int, seed: int, cfg: PpoConfig | None = None,
                   params: SimParams = SimParams(), weights: RewardWeights = RewardWeights()) -> TrackResult:
    """Track ``task`` around the controller's own target sequence."""
    demo = controller_rollouts(controller, controller_cfg, [task], params, weights)[0]
    return track_single(task, baseline_from_targets(demo.expert_actions), budget_steps, seed, cfg, params, weights)


def hop_seed(seed: int, task_id: str, parent_id: str | None) -> int:
    """Seed of one tracking hop; a hop without a parent uses ``seed`` itself."""
    return int(seed) if parent_id is None else derive_seed(seed, task_id, parent_id)


def solve_homotopy_path(path, budget_per_hop: int, seed: int, cfg: PpoConfig | None = None,
                        params: SimParams = SimParams(), weights: RewardWeights = RewardWeights(),
                        direct_errors: dict | None = None):
    """Solve ``(T_K, ..., T_0)`` in order, each hop starting from the previous hop's targets.

    Returns ``(result for T_0, HomotopyPath log)``. A hop is flagged
    effective when it beats that task's own direct tracking error, looked
    up in ``direct_errors``; tasks missing from it get ``None``.
    """
    path = list(path)
    if not path:
        raise MiningError("empty homotopy path")
    prev = None
    prev_id = None
    results = []
    for task in path:
        baseline = task.hand if prev is None else baseline_from_result(prev, task)
        prev = track_single(task, baseline, budget_per_hop, hop_seed(seed, task.id, prev_id), cfg, params, weights)
        prev_id = task.id
        results.append(prev)
    errs = [r.error for r in results]
    direct_errors = direct_errors or {}
    flags = [None if t.id not in direct_errors else bool(e < direct_errors[t.id])
             for t, e in zip(path[1:], errs[1:])]
    rec = HomotopyPath([t.id for t in path], errs, flags)
    return results[-1], rec


# effective-parent search


@dataclass
class _Node:
    """One accepted tracking result and the node whose targets seeded it."""

    result: TrackResult
    parent: "_Node | None" = None
    error_before: float = float("nan")

    def chain(self):
        out = []
        node = self
        while node is not None:
            out.append(node)
            node = node.parent
        return out[::-1]


@dataclass
class MiningReport:
    parents: dict  # task id -> effective parent ids in discovery order
    paths: list  # HomotopyPath per improved task
    results: dict  # task id -> best TrackResult after mining
    log: list = field(default_factory=list)  # one record per re-track


def neighbours(tasks, k_nei: int) -> dict:
    """``k_nei`` nearest other tasks by task difference, ties broken by library order."""
    out = {}
    for i, t in enumerate(tasks):
        d = [(task_diff(t, u), j) for j, u in enumerate(tasks) if j != i]
        out[t.id] = [tasks[j].id for _, j in sorted(d)[:k_nei]]
    return out


def _retrack(task, parent_result, budget, seed, cfg, params, weights):
    return track_single(task, baseline_from_result(parent_result, task), budget,
                        hop_seed(seed, task.id, parent_result.task_id), cfg, params, weights)


def mine_parents(tasks, results: dict, k_nei: int = 10, k_max: int = 3,
                 budget_steps: int = DEFAULT_TRACK_BUDGET, seed: int = 0,
                 cfg: PpoConfig | None = None, workers: int = 1,
                 params: SimParams = SimParams(), weights: RewardWeights = RewardWeights()) -> MiningReport:
    """Re-track every task from each neighbour's best result for ``k_max`` rounds.

    A neighbour is an effective parent when its targets give a strictly
    lower error than the child's best at the start of the round. Rounds
    are synchronous: all re-tracks of a round read the previous round's
    results, and improvements are committed together afterwards.
    """
    tasks = list(tasks)
    missing = [t.id for t in tasks if t.id not in results]
    if missing:
        raise MiningError(f"no baseline result for {missing}")
    best = {t.id: _Node(results[t.id]) for t in tasks}
    nei = neighbours(tasks, k_nei) if len(tasks) > 1 else {t.id: [] for t in tasks}
    parents: dict = {t.id: [] for t in tasks}
    done_pairs: dict = {}  # (child, parent) -> parent node already tried
    records = []
    for rnd in range(1, k_max + 1):
        jobs, keys = [], []
        for t in tasks:
            for pid in nei[t.id]:
                pnode = best[pid]
                if done_pairs.get((t.id, pid)) is pnode:
                    continue  # same parent result as before: the re-track would repeat
                done_pairs[(t.id, pid)] = pnode
                jobs.append((t, pnode.result, budget_steps, seed, cfg, params, weights))
                keys.append((t.id, pid, pnode))
        if not jobs:
            break
        outs = run_jobs(_retrack, jobs, workers)
        snapshot = {k: v for k, v in best.items()}
        for (tid, pid, pnode), res in zip(keys, outs):
            before = snapshot[tid].result.error
            eff = res.error < before
            records.append({"round": rnd, "child": tid, "parent": pid, "error_before": before,
                            "error": res.error, "effective": bool(eff)})
            if not eff:
                continue
            if pid not in parents[tid]:
                parents[tid].append(pid)
            if res.error < best[tid].result.error:
                best[tid] = _Node(res, pnode, before)
        log.info("mining round %d: %d re-tracks, %d effective", rnd, len(jobs),
                 sum(r["effective"] for r in records if r["round"] == rnd))
    paths = []
    for t in tasks:
        node = best[t.id]
        if node.parent is None:
            continue
        chain = node.chain()
        paths.append(HomotopyPath([n.result.task_id for n in chain], [n.result.error for n in chain],
                                  [True] * (len(chain) - 1)))
    return MiningReport({k: v for k, v in parents.items() if v}, paths,
                        {k: n.result for k, n in best.items()}, records)


def parent_pairs(report: MiningReport) -> list[tuple[str, str]]:
    """(child id, parent id) for every effective link found."""
    return [(c, p) for c, ps in report.parents.items() for p in ps]


# demo store


class DemoStore(dict):
    """Task id -> best Demonstration (with its tracking error)."""

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        ids = sorted(self)
        io.write_jsonl(os.path.join(directory, DEMO_FILE), [self[i].to_dict() for i in ids])
        index = {i: {"file": DEMO_FILE, "line": n, "error": self[i].error,
                     "episode_reward": self[i].episode_reward} for n, i in enumerate(ids)}
        io.write_json(os.path.join(directory, INDEX_FILE), index)

    @classmethod
    def load(cls, directory) -> "DemoStore":
        index = io.read_json(os.path.join(directory, INDEX_FILE))
        cache: dict = {}
        out = cls()
        for tid, ent in index.items():
            if ent["file"] not in cache:
                cache[ent["file"]] = io.read_jsonl(os.path.join(directory, ent["file"]))
            demo = Demonstration.from_dict(cache[ent["file"]][ent["line"]])
            if demo.task_id != tid:
                raise io.CheckpointError(f"demo index mismatch for {tid}")
            out[tid] = demo
        return out


def curate_demos(results, threshold: float, store: DemoStore | None = None) -> DemoStore:
    """Keep the lowest-error result per task among those with episode reward above ``threshold``."""
    out = DemoStore(store or {})
    for r in results:
        if not r.rollout.episode_reward > threshold:
            continue
        cur = out.get(r.task_id)
        if cur is None or r.error < cur.error:
            out[r.task_id] = replace(r.rollout, error=r.error)
    return out
