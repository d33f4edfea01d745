"""Tracking metrics, success thresholds, task difference and trajectory statistics."""

from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass, fields

import numpy as np

from .geometry import boundary_samples, chamfer, rot2, wrap_angle
from .sim import SimParams, keypoint_surface_distance, pene_depth_batch
from .types import ANGLE_IDX, TrackingTask, unwrap_angles

CONTACT_THRESHOLD = 0.005
N_BOUNDARY_SAMPLES = 64


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class MetricWeights:
    err_op: float = 1.0
    err_oq: float = 0.3
    err_wrist: float = 0.1
    err_finger: float = 0.1
    diff_h: float = 0.1
    diff_op: float = 1.0
    diff_oq: float = 0.3
    diff_pc: float = 0.5
    eps: float = 1e-3
    # divide by min(x, eps) exactly as the formulas are printed instead of max(x, eps)
    literal_guards: bool = False

    def guard(self, x: float) -> float:
        return min(x, self.eps) if self.literal_guards else max(x, self.eps)


@dataclass(frozen=True)
class Threshold:
    trans_m: float
    rot_deg: float
    hand: float

    def passes(self, t_err, r_err, e_wrist, e_finger) -> bool:
        return bool(t_err < self.trans_m and r_err < np.deg2rad(self.rot_deg)
                    and 0.5 * e_wrist + 0.5 * e_finger < self.hand)


@dataclass(frozen=True)
class SuccessThresholds:
    loose: Threshold = Threshold(0.10, 40.0, 1.2)
    tight: Threshold = Threshold(0.10, 20.0, 0.8)


@dataclass(frozen=True)
class RolloutMetrics:
    R_err: float
    T_err: float
    E_wrist: float
    E_finger: float
    success_tight: bool
    success_loose: bool


def evaluate_rollout(achieved, ref, thresholds: SuccessThresholds = SuccessThresholds()) -> RolloutMetrics:
    """Per-frame averages over frames ``0..N``; angles in radians."""
    a = np.asarray(achieved, dtype=float)
    r = np.asarray(ref, dtype=float)
    if a.shape != r.shape:
        raise EvalError(f"length mismatch: achieved {a.shape} vs reference {r.shape}")
    R = float(np.mean(np.abs(wrap_angle(a[:, 9] - r[:, 9]))))
    T = float(np.mean(np.linalg.norm(a[:, 7:9] - r[:, 7:9], axis=1)))
    W = float(np.mean(0.5 * np.abs(wrap_angle(a[:, 2] - r[:, 2]))
                      + 0.5 * np.linalg.norm(a[:, :2] - r[:, :2], axis=1)))
    F = float(np.mean(np.abs(a[:, 3:7] - r[:, 3:7]).sum(axis=1) / 4.0))
    return RolloutMetrics(R, T, W, F, thresholds.tight.passes(T, R, W, F),
                          thresholds.loose.passes(T, R, W, F))


def combine_error(m: RolloutMetrics, w: MetricWeights = MetricWeights()) -> float:
    return w.err_op * m.T_err + w.err_oq * m.R_err + w.err_wrist * m.E_wrist + w.err_finger * m.E_finger


def tracking_error(achieved, ref, w: MetricWeights = MetricWeights()) -> float:
    return combine_error(evaluate_rollout(achieved, ref), w)


def resample(states, n_frames: int) -> np.ndarray:
    """Time-normalised linear resampling; angle channels interpolate along the shortest arc."""
    s = unwrap_angles(np.asarray(states, dtype=float)) if states.shape[1] == 10 else _unwrap_hand(states)
    src = np.linspace(0.0, 1.0, len(s))
    dst = np.linspace(0.0, 1.0, n_frames)
    out = np.stack([np.interp(dst, src, s[:, j]) for j in range(s.shape[1])], axis=1)
    angles = list(ANGLE_IDX) if s.shape[1] == 10 else [2]
    out[:, angles] = wrap_angle(out[:, angles])
    return out


def _unwrap_hand(h):
    h = np.array(h, dtype=float)
    h[:, 2] = np.unwrap(h[:, 2])
    return h


def _boundary(task: TrackingTask) -> np.ndarray:
    return boundary_samples(task.geometry.vertices, N_BOUNDARY_SAMPLES)


def task_diff(a: TrackingTask, b: TrackingTask, w: MetricWeights = MetricWeights()) -> float:
    """Trajectory-plus-geometry difference, with ``b`` resampled to ``a``'s length."""
    ra = a.ref
    rb = b.ref if b.n_steps == a.n_steps else resample(b.ref, a.n_steps + 1)
    dh = ra[:, :7] - rb[:, :7]
    dh[:, 2] = wrap_angle(dh[:, 2])
    per_frame = (w.diff_h * np.linalg.norm(dh, axis=1)
                 + w.diff_op * np.linalg.norm(ra[:, 7:9] - rb[:, 7:9], axis=1)
                 + w.diff_oq * np.abs(wrap_angle(ra[:, 9] - rb[:, 9])))
    return float(per_frame.mean() + w.diff_pc * chamfer(_boundary(a), _boundary(b)))


def contact_map(task: TrackingTask, params: SimParams = SimParams()) -> np.ndarray:
    """Binary (N+1, 6) map: keypoint within the contact threshold of the object surface."""
    d = keypoint_surface_distance(task.hand, task.geometry, task.obj, params)
    inside = pene_inside(task, params)
    return (d <= CONTACT_THRESHOLD) | inside


def pene_inside(task: TrackingTask, params: SimParams = SimParams()) -> np.ndarray:
    from .geometry import signed_distance
    from .sim import forward_kinematics

    kp = forward_kinematics(task.hand, params)
    out = np.zeros(kp.shape[:2], dtype=bool)
    for n in range(len(kp)):
        R = rot2(task.obj[n, 2])
        pb = (kp[n] - task.obj[n, :2]) @ R
        out[n] = signed_distance(pb, task.geometry.vertices) < 0
    return out


def difficulty_stats(task: TrackingTask, w: MetricWeights = MetricWeights(),
                     params: SimParams = SimParams()) -> dict:
    N = task.n_steps
    if N < 2:
        raise EvalError("N < 2")
    dt = task.dt
    p = task.obj[:, :2]
    acc = (p[2:] - 2.0 * p[1:-1] + p[:-2]) / dt ** 2
    s_smooth = float(np.mean(np.linalg.norm(acc, axis=1)))
    c = contact_map(task, params).astype(int)
    n_points = c.shape[1]
    hamming = np.abs(np.diff(c, axis=0)).sum(axis=1)
    v_contact = float(np.mean(hamming / (n_points * dt)))
    s_shape = 1.0 / w.guard(float(task.geometry.extents.min()))
    return {"s_smooth_o": s_smooth, "v_contact": v_contact, "s_shape": s_shape}


def quality_stats(task: TrackingTask, params: SimParams = SimParams()) -> dict:
    N = task.n_steps
    if N < 2:
        raise EvalError("N < 2")
    dt = task.dt
    s = unwrap_angles(task.ref)
    # weight vector of ones: each term is the summed second difference, in absolute value
    second = (s[2:] - 2.0 * s[1:-1] + s[:-2]).sum(axis=1) / dt ** 2
    t_s = float(np.mean(np.abs(second)))
    v_obj = np.diff(task.obj[:, :2], axis=0) / dt
    v_hand = np.diff(task.hand[:, :2], axis=0) / dt
    t_c = float(np.mean(np.linalg.norm(v_obj - v_hand, axis=1)))
    t_p = float(np.mean(pene_depth_batch(task.hand, task.geometry, task.obj, params)))
    return {"t_s": t_s, "t_c": t_c, "t_p": t_p}


def distribution_gap(test_tasks, train_tasks, w: MetricWeights = MetricWeights()) -> float:
    if not test_tasks or not train_tasks:
        raise EvalError("empty task distribution")
    return float(np.mean([min(task_diff(t, u, w) for u in train_tasks) for t in test_tasks]))


def generalization_score(gap: float, mean_error: float, w: MetricWeights = MetricWeights()) -> float:
    return gap / w.guard(mean_error)


def quality_score(tasks) -> float:
    if not tasks:
        raise EvalError("empty task distribution")
    return float(np.mean([sum(quality_stats(t).values()) / 3.0 for t in tasks]))


def scores(train_tasks, test_tasks, test_errors, perturbed_tasks, perturbed_errors,
           w: MetricWeights = MetricWeights()) -> dict:
    """Generalisation, quality, robustness and per-task hard-to-track scores."""
    if not test_errors or not perturbed_errors:
        raise EvalError("empty error list")
    L = float(np.mean(test_errors))
    L_p = float(np.mean(perturbed_errors))
    d = distribution_gap(test_tasks, train_tasks, w)
    q = quality_score(perturbed_tasks)
    return {
        "d": d,
        "L": L,
        "s_g": generalization_score(d, L, w),
        "s_quality": q,
        "s_r": q / w.guard(L_p),
        "s_ht": [1.0 / w.guard(e) for e in test_errors],
        "literal_guards": w.literal_guards,
    }


# eval.csv

CSV_COLUMNS = ("id", "R_err", "T_err", "E_wrist", "E_finger", "success_tight", "success_loose",
               "tracking_error", "s_smooth_o", "v_contact", "s_shape", "t_s", "t_c", "t_p")


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, str):
        return x
    return f"{float(x):.6g}"


def eval_row(task: TrackingTask, achieved, w: MetricWeights = MetricWeights()) -> dict:
    m = evaluate_rollout(achieved, task.ref)
    row = {"id": task.id}
    row.update({f.name: getattr(m, f.name) for f in fields(m)})
    row["tracking_error"] = combine_error(m, w)
    row.update(difficulty_stats(task, w))
    row.update(quality_stats(task))
    return row


def rows_to_csv(rows) -> str:
    buf = _io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_COLUMNS)
    for r in rows:
        wr.writerow([fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def median_summary(rows) -> dict:
    """Median error metrics and success rates over a set of eval rows."""
    if not rows:
        return {"count": 0}
    out = {"count": len(rows)}
    for k in ("R_err", "T_err", "E_wrist", "E_finger", "tracking_error"):
        out[k] = float(np.median([r[k] for r in rows]))
    for k in ("success_tight", "success_loose"):
        out[k] = float(np.mean([bool(r[k]) for r in rows]))
    return out
