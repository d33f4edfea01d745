import shutil

import numpy as np
import pytest

from dxtk import flywheel as fw
from dxtk import synth
from dxtk.learner import PpoConfig, load_policy
from dxtk.miner import DemoStore, load_paths, tracker_config
from dxtk.homotopy_gen import load_generator

# 99th percentile of the chi-square distribution with 9 degrees of freedom
CHI2_9_P99 = 21.666

SMALL_CFG = fw.FlywheelConfig(stage_sizes=(2, 2, 2), per_traj_budget=1024, controller_budget=4096, k_nei=1,
                              k_max=1, generator_epochs=5, generator_finetune_epochs=5, seed=3)


def small_pipe():
    return fw.Pipeline(controller_cfg=PpoConfig(envs=64, horizon=16), tracker_cfg=tracker_config(envs=16, horizon=16))


@pytest.fixture(scope="module")
def library():
    return synth.gen_library(12, 0, synth.default_families(), synth.default_geometries())


@pytest.fixture(scope="module")
def full_run(library, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("fw") / "run"
    res = fw.run_flywheel(library, SMALL_CFG, small_pipe(), str(run_dir))
    return run_dir, res


def test_equal_errors_sample_uniformly():
    counts = np.zeros(10)
    for seed in range(10_000):
        counts[fw.weighted_choice(np.full(10, 0.3), 1, seed)] += 1
    expected = 1000.0
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < CHI2_9_P99


def test_zero_error_task_is_rarely_drawn():
    errors = np.array([0.0, 5.0, 5.0, 5.0])
    hits = sum(0 in fw.weighted_choice(errors, 1, s) for s in range(2000))
    assert hits == 0
    # drawing everything has to include it
    assert list(fw.weighted_choice(errors, 4, 0)) == [0, 1, 2, 3]


def test_sampling_determinism_and_errors(library):
    assert np.array_equal(fw.weighted_choice(np.arange(8.0), 3, 5), fw.weighted_choice(np.arange(8.0), 3, 5))
    assert fw.sample_uniform(library, 4, 2) == fw.sample_uniform(library, 4, 2)
    with pytest.raises(fw.FlywheelError):
        fw.weighted_choice(np.ones(3), 4, 0)
    with pytest.raises(fw.FlywheelError):
        fw.sample_uniform(library[:2], 3, 0)
    with pytest.raises(fw.FlywheelError):
        fw.sample_weighted(library[:2], None, 3, 0)


def test_holdout_split_is_stable(library):
    train, held = fw.holdout_split(library, 0.25)
    assert len(held) == 3 and not set(train) & set(held)
    assert set(train) | set(held) == {t.id for t in library}
    assert set(fw.holdout_split(list(reversed(library)), 0.25)[1]) == set(held)


def test_config_validation():
    with pytest.raises(fw.FlywheelError):
        fw.FlywheelConfig(stage_sizes=(1, 0, 1))
    with pytest.raises(fw.FlywheelError):
        fw.FlywheelConfig(stage_sizes=(1, 1))
    with pytest.raises(fw.FlywheelError):
        fw.FlywheelConfig(holdout_fraction=1.0)
    assert fw.PRESETS["full"]().stage_sizes == (100, 100, 200)
    assert fw.PRESETS["desk"]().stage_sizes == (8, 8, 16)


def test_library_too_small(library):
    with pytest.raises(fw.FlywheelError):
        fw.run_flywheel(library, fw.FlywheelConfig(stage_sizes=(4, 4, 4)), small_pipe())
    with pytest.raises(fw.FlywheelError):
        fw.initial_state(library + library[:1], SMALL_CFG)


def test_out_of_order_stage(library):
    state = fw.initial_state(library, SMALL_CFG)
    with pytest.raises(fw.FlywheelError):
        fw.run_stage(2, state, library, SMALL_CFG, small_pipe())


def test_stage_artifacts_reload(full_run):
    run_dir, res = full_run
    assert [r["stage"] for r in res.reports] == [1, 2, 3]
    for s in (1, 2, 3):
        d = run_dir / f"stage{s}"
        for name in ("controller.dxtk", "paths.jsonl", "eval.csv", "state.json"):
            assert (d / name).exists(), (s, name)
        assert (d / "generator.dxtk").exists() == (s >= 2)
        state = fw.load_stage(str(d))
        assert state.stage == s and len(state.labelled) == 2 * s
        assert len(state.demos) <= len(state.labelled)
        load_policy(str(d / "controller.dxtk"))
        load_paths(d / "paths.jsonl")
        DemoStore.load(d / "demos")
        if s >= 2:
            load_generator(d / "generator.dxtk")
        lines = (d / "eval.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + len(state.heldout)


def test_samples_disjoint_and_demo_errors_monotone(full_run):
    run_dir, res = full_run
    states = [fw.load_stage(str(run_dir / f"stage{s}")) for s in (1, 2, 3)]
    labelled = states[-1].labelled
    assert len(labelled) == len(set(labelled)) == 6
    assert not set(labelled) & set(states[-1].heldout)
    for prev, cur in zip(states, states[1:]):
        assert cur.labelled[: len(prev.labelled)] == prev.labelled
        for k, d in prev.demos.items():
            assert cur.demos[k].error <= d.error
        for k, r in prev.results.items():
            assert cur.results[k].error <= r.error


def test_resume_matches_uninterrupted_run(full_run, library, tmp_path):
    run_dir, res = full_run
    resumed = tmp_path / "resumed"
    resumed.mkdir()
    for s in (1, 2):
        shutil.copytree(run_dir / f"stage{s}", resumed / f"stage{s}")
    again = fw.run_flywheel(library, SMALL_CFG, small_pipe(), str(resumed), resume=True)
    assert (resumed / "stage3" / "eval.csv").read_text() == (run_dir / "stage3" / "eval.csv").read_text()
    assert np.array_equal(again.controller.flat(), res.controller.flat())
    assert again.reports == res.reports


def test_zero_controller_budget_still_reports(library):
    cfg = fw.FlywheelConfig(stage_sizes=(1, 1, 1), per_traj_budget=0, controller_budget=0, k_nei=1, k_max=1,
                            generator_epochs=2, generator_finetune_epochs=2, seed=1)
    res = fw.run_flywheel(library, cfg, small_pipe())
    assert len(res.reports) == 3
    assert all(np.isfinite(r["T_err"]) for r in res.reports)
    assert res.controller is not None
