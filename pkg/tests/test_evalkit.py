import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dxtk import synth
from dxtk.evalkit import (CSV_COLUMNS, EvalError, MetricWeights, difficulty_stats,
                                distribution_gap, eval_row, evaluate_rollout, fmt,
                                generalization_score, median_summary, quality_stats, rows_to_csv,
                                scores, task_diff, tracking_error)
from dxtk.geometry import boundary_samples
from dxtk.types import TrackingTask

from oracles import chamfer_oracle, metrics_oracle


def _static_task(n=20, hand=None, obj=(0.0, 0.03, 0.0), geometry=None, task_id="s"):
    hand = np.array([0.0, 1.0, 0.0, 0, 0, 0, 0]) if hand is None else np.asarray(hand, float)
    ref = np.tile(np.concatenate([hand, obj]), (n + 1, 1))
    return TrackingTask(task_id, ref, geometry or synth.square(0.06))


def test_identity_rollout(lift_task):
    m = evaluate_rollout(lift_task.ref, lift_task.ref)
    assert (m.R_err, m.T_err, m.E_wrist, m.E_finger) == (0.0, 0.0, 0.0, 0.0)
    assert m.success_tight and m.success_loose


def test_constant_offset_passes_tight(lift_task):
    ach = np.array(lift_task.ref)
    ach[:, 7] += 0.04
    m = evaluate_rollout(ach, lift_task.ref)
    assert m.T_err == pytest.approx(0.04, abs=1e-12)
    assert m.success_tight


def test_rotation_error_between_thresholds(lift_task):
    ach = np.array(lift_task.ref)
    ach[:, 9] += math.radians(25)
    m = evaluate_rollout(ach, lift_task.ref)
    assert not m.success_tight and m.success_loose


def test_length_mismatch_raises(lift_task):
    with pytest.raises(EvalError):
        evaluate_rollout(lift_task.ref[:-1], lift_task.ref)


def test_success_flags_match_oracle(rng, lift_task):
    ref = lift_task.ref
    worst = 0.0
    for _ in range(100):
        scale = rng.choice([0.02, 0.1, 0.5])
        ach = ref + rng.normal(0, scale, ref.shape)
        m = evaluate_rollout(ach, ref)
        R, T, W, Fi, tight, loose = metrics_oracle(ach, ref)
        assert (m.success_tight, m.success_loose) == (tight, loose)
        assert not m.success_tight or m.success_loose
        worst = max(worst, abs(m.R_err - R), abs(m.T_err - T), abs(m.E_wrist - W), abs(m.E_finger - Fi))
    assert worst < 1e-9


def test_tracking_error_weights(lift_task):
    ach = np.array(lift_task.ref)
    ach[:, 7] += 0.1
    assert tracking_error(ach, lift_task.ref) == pytest.approx(0.1, abs=1e-12)
    ach = np.array(lift_task.ref)
    ach[:, 9] += 1.0  # R_err 1
    ach[:, 7] += 1.0  # T_err 1
    ach[:, 2] += 1.0  # wrist: 0.5*1 + 0.5*1
    ach[:, 0] += 1.0
    ach[:, 3:7] += 1.0  # E_finger 1
    assert tracking_error(ach, lift_task.ref) == pytest.approx(1.5, abs=1e-9)


def test_task_diff_cases(lift_task):
    assert task_diff(lift_task, lift_task) == 0.0
    ref = np.array(lift_task.ref)
    ref[:, 7] += 0.1
    assert task_diff(lift_task, lift_task.replace(ref=ref)) == pytest.approx(0.1, abs=1e-12)
    other = lift_task.replace(geometry=synth.polygon(8, 0.035))
    expected = 0.5 * chamfer_oracle(boundary_samples(lift_task.geometry.vertices, 64),
                                    boundary_samples(other.geometry.vertices, 64))
    assert task_diff(lift_task, other) == pytest.approx(expected, abs=1e-12)


def test_task_diff_symmetric_and_non_negative(small_library):
    for a in small_library[:4]:
        for b in small_library[:4]:
            d = task_diff(a, b)
            assert d >= 0.0
            assert d == pytest.approx(task_diff(b, a), abs=1e-12)
            assert (d == 0.0) == (a is b or np.array_equal(a.ref, b.ref))


def test_task_diff_resamples_other_length():
    slow = synth.gen_task(synth.MotionFamily("Slide", 0.1, 60), synth.square(0.06), 1)
    fast = synth.gen_task(synth.MotionFamily("Slide", 0.1, 120), synth.square(0.06), 1)
    assert task_diff(slow, fast) < 0.01


def test_difficulty_stats_cases():
    n = 30
    ref = np.tile(np.array([0.0, 1.0, 0.0, 0, 0, 0, 0, 0.0, 0.03, 0.0]), (n + 1, 1))
    ref[:, 7] = np.linspace(0, 0.3, n + 1)
    stats = difficulty_stats(TrackingTask("cv", ref, synth.square(0.06)))
    assert stats["s_smooth_o"] == pytest.approx(0.0, abs=1e-9)
    assert stats["v_contact"] == 0.0
    bar = _static_task(geometry=synth.bar(0.12, 0.012))
    assert difficulty_stats(bar)["s_shape"] == pytest.approx(1 / 0.012, rel=1e-12)
    with pytest.raises(EvalError):
        difficulty_stats(_static_task(n=1))


def test_contact_velocity_counts_map_changes():
    # one fingertip touches on alternate frames; the other keypoints never do
    touch = [-0.04, 0.16 + 0.0, np.pi, 0, 0, 0, 0]
    away = [-0.04, 1.0, np.pi, 0, 0, 0, 0]
    n = 10
    ref = np.array([touch if k % 2 == 0 else away for k in range(n + 1)], dtype=float)
    ref = np.concatenate([ref, np.tile([0.0, 0.03, 0.0], (n + 1, 1))], axis=1)
    task = TrackingTask("blink", ref, synth.square(0.06))
    assert difficulty_stats(task)["v_contact"] == pytest.approx(1 / (6 * task.dt), rel=1e-12)


def test_quality_stats_constant_velocity():
    n = 40
    ref = np.tile(np.array([0.0, 1.0, 0.0, 0, 0, 0, 0, 0.0, 0.03, 0.0]), (n + 1, 1))
    ref[:, 0] = np.linspace(0, 0.2, n + 1)
    ref[:, 7] = np.linspace(0, 0.5, n + 1)
    task = TrackingTask("cv", ref, synth.square(0.06))
    q = quality_stats(task)
    assert q["t_s"] == pytest.approx(0.0, abs=1e-6)
    assert q["t_c"] == pytest.approx((0.5 - 0.2) / n / task.dt, rel=1e-9)
    ref[:, 7] = ref[:, 0]
    assert quality_stats(task.replace(ref=ref))["t_c"] == 0.0


def test_penetration_quality_term():
    n = 120
    inside = [-0.04, 0.15, np.pi, 0, 0, 0, 0]  # tip A 1 cm below the top face
    away = [-0.04, 1.0, np.pi, 0, 0, 0, 0]
    hand = np.array([inside if 40 <= k < 70 else away for k in range(n + 1)], dtype=float)
    ref = np.concatenate([hand, np.tile([0.0, 0.03, 0.0], (n + 1, 1))], axis=1)
    task = TrackingTask("pen", ref, synth.square(0.06))
    assert quality_stats(task)["t_p"] == pytest.approx(0.01 * 30 / 121, abs=1e-12)


def test_scores_and_guards(small_library):
    train = small_library[:3]
    s = scores(train, train, [0.1, 0.2], train, [0.3])
    assert s["d"] == 0.0 and s["s_g"] == 0.0
    assert s["s_r"] == pytest.approx(s["s_quality"] / 0.3)
    assert s["s_ht"] == pytest.approx([10.0, 5.0])
    assert generalization_score(0.5, 1e-9) == pytest.approx(0.5 / 1e-3)
    literal = MetricWeights(literal_guards=True)
    assert generalization_score(0.5, 0.2, literal) == pytest.approx(0.5 / 1e-3)
    with pytest.raises(EvalError):
        scores(train, [], [], train, [0.1])


def test_generalization_score_toy_split():
    a = _static_task(task_id="a")
    b = _static_task(obj=(0.1, 0.03, 0.0), task_id="b")
    c = _static_task(obj=(0.3, 0.03, 0.0), task_id="c")
    # nearest train task to c is b at 0.2 m object offset
    assert distribution_gap([c], [a, b]) == pytest.approx(0.2, abs=1e-12)
    s = scores([a, b], [c], [0.05], [c], [0.05])
    assert s["s_g"] == pytest.approx(0.2 / 0.05, abs=1e-9)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(1e-6, 10), st.floats(1e-6, 10))
def test_generalization_score_monotone(d1, d2, l1, l2):
    lo_d, hi_d = sorted((d1, d2))
    lo_l, hi_l = sorted((l1, l2))
    assert generalization_score(lo_d, lo_l) <= generalization_score(hi_d, lo_l)
    assert generalization_score(lo_d, hi_l) <= generalization_score(lo_d, lo_l)


def test_eval_row_csv_and_medians(lift_task):
    row = eval_row(lift_task, lift_task.ref)
    text = rows_to_csv([row])
    header, line = text.strip().split("\n")
    assert header.split(",") == list(CSV_COLUMNS)
    values = line.split(",")
    assert values[0] == lift_task.id and values[5:7] == ["1", "1"] and values[7] == "0"
    assert fmt(1234567.891) == "1.23457e+06" and fmt(0.1) == "0.1"
    summary = median_summary([row, dict(row, T_err=0.2, success_loose=False)])
    assert summary["T_err"] == pytest.approx(0.1) and summary["success_loose"] == 0.5
