"""Three-stage loop alternating controller training and demonstration mining."""

from __future__ import annotations

import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import homotopy_gen as hg
from . import io
from .env import RewardWeights
from .evalkit import MetricWeights, eval_row, median_summary, rows_to_csv, evaluate_rollout
from .learner import (ActorCritic, PpoConfig, controller_rollouts, demo_threshold_for, load_policy,
                      make_policy, save_policy, train_controller)
from .miner import (DemoStore, TrackResult, curate_demos, load_paths, mine_parents,
                    save_paths, solve_homotopy_path, track_single, tracker_config, transfer_prior)
from .parallel import derive_seed, run_jobs, stable_hash
from .sim import SimParams
from .types import embed_task

log = logging.getLogger(__name__)

STAGES = (1, 2, 3)
STATE_FILE = "state.json"


class FlywheelError(ValueError):
    pass


@dataclass(frozen=True)
class FlywheelConfig:
    stage_sizes: tuple = (8, 8, 16)
    per_traj_budget: int = 20_000
    controller_budget: int = 100_000
    demo_threshold: float | None = None  # None: a fraction of the best achievable return
    seed: int = 0
    k_nei: int = 2
    k_max: int = 2
    holdout_fraction: float = 0.25
    generator_epochs: int = 200
    generator_finetune_epochs: int = 200
    library_size: int = 48

    def __post_init__(self):
        object.__setattr__(self, "stage_sizes", tuple(int(s) for s in self.stage_sizes))
        if len(self.stage_sizes) != 3 or min(self.stage_sizes) < 1:
            raise FlywheelError("stage_sizes must be three sizes >= 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise FlywheelError("holdout_fraction must lie in [0, 1)")
        if self.k_nei < 1 or self.k_max < 0:
            raise FlywheelError("k_nei must be >= 1 and k_max >= 0")


def desk_preset(**kw) -> FlywheelConfig:
    return FlywheelConfig(**kw)


def full_preset(**kw) -> FlywheelConfig:
    base = dict(stage_sizes=(100, 100, 200), per_traj_budget=100_000, controller_budget=10_000_000,
                k_nei=10, k_max=3, library_size=600)
    base.update(kw)
    return FlywheelConfig(**base)


PRESETS = {"desk": desk_preset, "full": full_preset}


@dataclass
class Pipeline:
    """Everything the stages need besides the flywheel config."""

    controller_cfg: PpoConfig = field(default_factory=PpoConfig)
    tracker_cfg: PpoConfig = field(default_factory=tracker_config)
    params: SimParams = field(default_factory=SimParams)
    weights: RewardWeights = field(default_factory=RewardWeights)
    metric_weights: MetricWeights = field(default_factory=MetricWeights)
    workers: int = 1


@dataclass
class FlywheelState:
    stage: int
    heldout: list  # task ids never labelled
    remaining: list  # task ids still available for sampling
    labelled: list = field(default_factory=list)  # in labelling order
    results: dict = field(default_factory=dict)  # task id -> best TrackResult so far
    demos: DemoStore = field(default_factory=DemoStore)
    controller: ActorCritic | None = None
    generator: hg.GeneratorModel | None = None
    paths: list = field(default_factory=list)
    reports: list = field(default_factory=list)


# splitting and sampling


def holdout_split(library, fraction: float) -> tuple[list, list]:
    """Deterministic held-out split: the tasks whose id hashes lowest."""
    ids = [t.id for t in library]
    n_out = int(round(fraction * len(ids)))
    order = sorted(ids, key=lambda i: (stable_hash(i), i))
    held = set(order[:n_out])
    return [i for i in ids if i not in held], [i for i in ids if i in held]


def controller_errors(controller, cfg, tasks, pipe: Pipeline | None = None) -> np.ndarray:
    """Mean object translation error of the controller's deterministic rollout, per task."""
    pipe = pipe or Pipeline()
    demos = controller_rollouts(controller, cfg, tasks, pipe.params, pipe.weights)
    return np.array([evaluate_rollout(d.achieved, t.ref).T_err for d, t in zip(demos, tasks)])


def weighted_choice(errors, size: int, seed: int) -> np.ndarray:
    """Indices drawn without replacement with probability proportional to ``errors + 1e-6``."""
    e = np.asarray(errors, dtype=float)
    if size > len(e):
        raise FlywheelError(f"cannot sample {size} of {len(e)} tasks")
    w = np.maximum(e, 0.0) + 1e-6
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(len(e), size=size, replace=False, p=w / w.sum()))


def sample_weighted(remaining, controller, size: int, seed: int, cfg: PpoConfig | None = None,
                    pipe: Pipeline | None = None) -> list:
    remaining = list(remaining)
    if size > len(remaining):
        raise FlywheelError(f"cannot sample {size} of {len(remaining)} tasks")
    if controller is None:
        errors = np.ones(len(remaining))
    else:
        errors = controller_errors(controller, cfg or PpoConfig(), remaining, pipe)
    return [remaining[i] for i in weighted_choice(errors, size, seed)]


def sample_uniform(remaining, size: int, seed: int) -> list:
    remaining = list(remaining)
    if size > len(remaining):
        raise FlywheelError(f"cannot sample {size} of {len(remaining)} tasks")
    idx = np.random.default_rng(seed).choice(len(remaining), size=size, replace=False)
    return [remaining[i] for i in np.sort(idx)]


# labelling jobs (module level so they pickle)


def _job_direct(task, budget, seed, cfg, params, weights):
    return track_single(task, task.hand, budget, seed, cfg, params, weights)


def _job_transfer(task, flat, ctrl_cfg, budget, seed, cfg, params, weights):
    policy = ActorCritic(hidden=ctrl_cfg.hidden, log_std_init=ctrl_cfg.log_std_init)
    policy.load_flat(flat)
    return transfer_prior(task, policy, ctrl_cfg, budget, seed, cfg, params, weights)


def _job_path(chain, budget, seed, cfg, params, weights, direct_errors):
    return solve_homotopy_path(chain, budget, seed, cfg, params, weights, direct_errors)


def _better(a: TrackResult | None, b: TrackResult) -> TrackResult:
    return b if a is None or b.error < a.error else a


def _strip(result: TrackResult) -> TrackResult:
    # policies are not needed after labelling; dropping them keeps state small
    return replace(result, policy=None)


# stages


def _threshold(cfg: FlywheelConfig, tasks, weights) -> float:
    if cfg.demo_threshold is not None:
        return float(cfg.demo_threshold)
    return demo_threshold_for(int(np.median([t.n_steps for t in tasks])), weights)


def _train_controller(state, by_id, cfg: FlywheelConfig, pipe: Pipeline, stage: int, threshold: float):
    tasks = [by_id[i] for i in state.labelled]
    seed = derive_seed(cfg.seed, "controller", stage)
    policy = state.controller if state.controller is not None else make_policy(pipe.controller_cfg, seed)
    res = train_controller(tasks, state.demos, pipe.controller_cfg, cfg.controller_budget, seed, threshold,
                           pipe.params, pipe.weights, policy=policy)
    return res.policy


def _evaluate(state, by_id, pipe: Pipeline):
    tasks = [by_id[i] for i in state.heldout]
    if not tasks:
        return [], {"count": 0}
    demos = controller_rollouts(state.controller, pipe.controller_cfg, tasks, pipe.params, pipe.weights)
    rows = [eval_row(t, d.achieved, pipe.metric_weights) for t, d in zip(tasks, demos)]
    return rows, median_summary(rows)


def _label(tasks, state, cfg, pipe, stage, use_prior: bool, use_generator: bool, library):
    """Best result per task over the enabled labelling strategies."""
    b = cfg.per_traj_budget
    tc, p, w = pipe.tracker_cfg, pipe.params, pipe.weights
    jobs = [(t, b, derive_seed(cfg.seed, "track", t.id), tc, p, w) for t in tasks]
    best = {t.id: r for t, r in zip(tasks, run_jobs(_job_direct, jobs, pipe.workers))}
    if use_prior and state.controller is not None:
        flat = state.controller.flat()
        jobs = [(t, flat, pipe.controller_cfg, b, derive_seed(cfg.seed, "prior", t.id), tc, p, w) for t in tasks]
        for t, r in zip(tasks, run_jobs(_job_transfer, jobs, pipe.workers)):
            best[t.id] = _better(best[t.id], r)
    paths = []
    if use_generator and state.generator is not None and state.generator.trained and cfg.k_max > 0:
        jobs = []
        for t in tasks:
            chain, _ = hg.propose_path(state.generator, t, library, cfg.k_max, derive_seed(cfg.seed, "gen", t.id))
            jobs.append((chain, b, derive_seed(cfg.seed, "path", t.id), tc, p, w, {t.id: best[t.id].error}))
        for t, (r, rec) in zip(tasks, run_jobs(_job_path, jobs, pipe.workers)):
            best[t.id] = _better(best[t.id], r)
            paths.append(rec)
    return {k: _strip(v) for k, v in best.items()}, paths


def run_stage(stage: int, state: FlywheelState, library, cfg: FlywheelConfig,
              pipe: Pipeline | None = None, stage_dir=None) -> FlywheelState:
    """Run one stage on ``state`` (modified in place and returned)."""
    pipe = pipe or Pipeline()
    if stage != state.stage + 1:
        raise FlywheelError(f"stage {stage} cannot follow stage {state.stage}")
    by_id = {t.id: t for t in library}
    size = cfg.stage_sizes[stage - 1]
    seed = derive_seed(cfg.seed, "sample", stage)
    remaining = [by_id[i] for i in state.remaining]
    if stage == 1:
        picked = sample_uniform(remaining, size, seed)
    else:
        picked = sample_weighted(remaining, state.controller, size, seed, pipe.controller_cfg, pipe)
    picked_ids = {t.id for t in picked}
    state.remaining = [i for i in state.remaining if i not in picked_ids]
    state.labelled += [t.id for t in picked]
    threshold = _threshold(cfg, library, pipe.weights)
    pool = [by_id[i] for i in state.labelled]

    new, paths = _label(picked, state, cfg, pipe, stage, use_prior=stage >= 2, use_generator=stage == 3,
                        library=pool)
    state.results.update(new)
    mined: list = []
    if stage == 2:
        rep = mine_parents(pool, state.results, cfg.k_nei, cfg.k_max, cfg.per_traj_budget,
                           derive_seed(cfg.seed, "mine"), pipe.tracker_cfg, pipe.workers, pipe.params, pipe.weights)
        state.results = {k: _strip(v) for k, v in rep.results.items()}
        mined = rep.paths
        state.generator = _train_generator(library, state, by_id, rep, cfg)
    state.paths = mined + [p for p in paths if p.effective and p.effective[-1]]
    state.demos = curate_demos(state.results.values(), threshold, state.demos)
    state.controller = _train_controller(state, by_id, cfg, pipe, stage, threshold)
    if stage_dir is not None:
        # the saved float32 controller is what later stages (and resumed runs) see
        save_policy(os.path.join(stage_dir, "controller.dxtk"), state.controller, pipe.controller_cfg,
                    {"stage": stage})
        state.controller = load_policy(os.path.join(stage_dir, "controller.dxtk"))[0]
    rows, summary = _evaluate(state, by_id, pipe)
    summary.update(stage=stage, labelled=len(state.labelled), demos=len(state.demos))
    state.reports.append(summary)
    state.stage = stage
    if stage_dir is not None:
        _write_stage(stage_dir, state, rows)
    log.info("stage %d: %s", stage, summary)
    return state


def _train_generator(library, state, by_id, report, cfg: FlywheelConfig):
    train_ids = [t.id for t in library if t.id not in set(state.heldout)]
    emb = np.stack([embed_task(by_id[i]) for i in train_ids])
    seed = derive_seed(cfg.seed, "generator")
    model = hg.train_unconditional(emb, cfg.generator_epochs, seed)
    pairs = [(embed_task(by_id[c]), embed_task(by_id[p])) for c, ps in report.parents.items() for p in ps]
    if pairs and cfg.generator_finetune_epochs > 0:
        model = hg.finetune_conditional(model, pairs, cfg.generator_finetune_epochs, seed + 1)
    return model


# persistence


def _write_stage(stage_dir, state: FlywheelState, rows) -> None:
    """Write a stage's artifacts to a temp directory, then rename it into place."""
    tmp = str(stage_dir) + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    for name in ("controller.dxtk", "controller.dxtk.json"):
        src = os.path.join(stage_dir, name)
        if os.path.exists(src):
            shutil.copy2(src, os.path.join(tmp, name))
    state.demos.save(os.path.join(tmp, "demos"))
    DemoStore({k: replace(r.rollout, error=r.error) for k, r in state.results.items()}).save(
        os.path.join(tmp, "results"))
    save_paths(os.path.join(tmp, "paths.jsonl"), state.paths)
    if state.generator is not None:
        hg.save_generator(os.path.join(tmp, "generator.dxtk"), state.generator)
    io.atomic_write_text(os.path.join(tmp, "eval.csv"), rows_to_csv(rows))
    io.write_json(os.path.join(tmp, STATE_FILE), {
        "stage": state.stage, "heldout": state.heldout, "remaining": state.remaining,
        "labelled": state.labelled, "reports": state.reports,
    })
    if os.path.exists(stage_dir):
        shutil.rmtree(stage_dir)
    os.replace(tmp, stage_dir)


def load_stage(stage_dir) -> FlywheelState:
    meta = io.read_json(os.path.join(stage_dir, STATE_FILE))
    results = {}
    for k, d in DemoStore.load(os.path.join(stage_dir, "results")).items():
        results[k] = TrackResult(k, d.baseline, None, d, d.error)
    gen_path = os.path.join(stage_dir, "generator.dxtk")
    return FlywheelState(
        stage=int(meta["stage"]), heldout=list(meta["heldout"]), remaining=list(meta["remaining"]),
        labelled=list(meta["labelled"]), results=results,
        demos=DemoStore.load(os.path.join(stage_dir, "demos")),
        controller=load_policy(os.path.join(stage_dir, "controller.dxtk"))[0],
        generator=hg.load_generator(gen_path) if os.path.exists(gen_path) else None,
        paths=load_paths(os.path.join(stage_dir, "paths.jsonl")),
        reports=list(meta["reports"]),
    )


def initial_state(library, cfg: FlywheelConfig) -> FlywheelState:
    ids = [t.id for t in library]
    if len(set(ids)) != len(ids):
        raise FlywheelError("library task ids must be unique")
    train_ids, held = holdout_split(library, cfg.holdout_fraction)
    if len(train_ids) < sum(cfg.stage_sizes):
        raise FlywheelError(f"library has {len(train_ids)} labelable tasks, stages need {sum(cfg.stage_sizes)}")
    return FlywheelState(stage=0, heldout=held, remaining=train_ids)


@dataclass
class FlywheelResult:
    controller: ActorCritic
    reports: list
    state: FlywheelState


def run_flywheel(library, cfg: FlywheelConfig, pipe: Pipeline | None = None, run_dir=None,
                 resume: bool = False) -> FlywheelResult:
    """Stages 1 to 3; with ``resume`` the run continues after the last completed stage in ``run_dir``."""
    library = list(library)
    pipe = pipe or Pipeline()
    state = initial_state(library, cfg)
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        if resume:
            for s in reversed(STAGES):
                d = os.path.join(run_dir, f"stage{s}")
                if os.path.exists(os.path.join(d, STATE_FILE)):
                    state = load_stage(d)
                    break
    for s in STAGES[state.stage:]:
        stage_dir = None if run_dir is None else os.path.join(run_dir, f"stage{s}")
        if stage_dir is not None:
            os.makedirs(stage_dir, exist_ok=True)
        state = run_stage(s, state, library, cfg, pipe, stage_dir)
    return FlywheelResult(state.controller, state.reports, state)


def config_dict(cfg: FlywheelConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))
