"""Procedural kinematic references and reference-noise injectors.

Every family uses the same wrap configuration: the hand points its fingers
down at the object, fingertips a couple of millimetres outside the surface
on either side, and follows the object's rigid motion. The hand DoF are
obtained by retargeting synthetic keypoints (knuckles above the object,
tips on the surface, elbows bent outward).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import geometry as geo
from .geometry import wrap_angle
from .retarget import retarget_trajectory
from .sim import SimParams, forward_kinematics
from .types import FINGER_LIMIT, ObjectGeometry, TaskError, TrackingTask

SURFACE_GAP = 0.0003  # reference fingertip clearance from the surface
HOLD_FRAMES = 20
LIFT_REORIENT_HEIGHT = 0.15
REACH_FRACTION = 0.9  # knuckle-to-tip distance as a fraction of 2 links
LOW_GRASP_HEIGHT = 0.006


class Family(str, Enum):
    GRASP_LIFT = "GraspLift"
    SLIDE = "Slide"
    ROTATE_IN_PLACE = "RotateInPlace"
    LIFT_REORIENT = "LiftReorient"
    THIN_BAR_LIFT = "ThinBarLift"


@dataclass(frozen=True)
class MotionFamily:
    kind: Family
    amplitude: float
    duration_frames: int = 120

    def __post_init__(self):
        object.__setattr__(self, "kind", Family(self.kind))
        if self.duration_frames < 30:
            raise TaskError("duration_frames must be >= 30")


@dataclass(frozen=True)
class NoiseSpec:
    penetration_offset: float = 0.0
    teleport_frame: int | None = None
    teleport_delta: tuple = (0.0, 0.0, 0.0)
    jitter_std: float = 0.0

    def __post_init__(self):
        if self.penetration_offset < 0 or self.jitter_std < 0:
            raise TaskError("noise magnitudes must be non-negative")


def ease(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def _profile(n_frames: int, start: int, end: int) -> np.ndarray:
    idx = np.arange(n_frames)
    return ease((idx - start) / max(end - start, 1))


def object_trajectory(family: MotionFamily, geometry: ObjectGeometry, x0: float) -> np.ndarray:
    N = family.duration_frames
    F = N + 1
    y_rest = geometry.rest_height(0.0)
    obj = np.zeros((F, 3))
    obj[:, 0] = x0
    obj[:, 1] = y_rest
    k = family.kind
    if k in (Family.GRASP_LIFT, Family.THIN_BAR_LIFT):
        obj[:, 1] += family.amplitude * _profile(F, HOLD_FRAMES, N)
    elif k == Family.SLIDE:
        obj[:, 0] += family.amplitude * _profile(F, HOLD_FRAMES, N)
    elif k == Family.ROTATE_IN_PLACE:
        obj[:, 2] = family.amplitude * _profile(F, HOLD_FRAMES, N)
    elif k == Family.LIFT_REORIENT:
        mid = HOLD_FRAMES + (N - HOLD_FRAMES) // 2
        obj[:, 1] += LIFT_REORIENT_HEIGHT * _profile(F, HOLD_FRAMES, mid)
        obj[:, 2] = family.amplitude * _profile(F, mid, N)
    obj[:, 2] = wrap_angle(obj[:, 2])
    return obj


def horizontal_extent(vertices: np.ndarray, y: float) -> tuple[float, float]:
    """Leftmost and rightmost boundary x of a convex polygon along the line at height ``y``."""
    xs = []
    nxt = np.roll(vertices, -1, axis=0)
    for a, b in zip(vertices, nxt):
        lo, hi = sorted((a[1], b[1]))
        if lo <= y <= hi and hi > lo:
            t = (y - a[1]) / (b[1] - a[1])
            xs.append(a[0] + t * (b[0] - a[0]))
    if not xs:
        raise TaskError(f"grasp height {y} misses the object")
    return min(xs), max(xs)


def grasp_keypoints(family: MotionFamily, geometry: ObjectGeometry,
                    params: SimParams = SimParams()) -> np.ndarray:
    """Body-frame source keypoints of the wrap grasp, shape (6, 2), in FK order."""
    v = geometry.vertices
    bottom = v[:, 1].min()
    if family.kind == Family.THIN_BAR_LIFT:
        y_g = bottom + min(LOW_GRASP_HEIGHT, 0.5 * geometry.extents[1])
    else:
        y_g = 0.0
    left, right = horizontal_extent(v, y_g)
    L, hw = params.link_length, params.finger_base_halfwidth
    reach = REACH_FRACTION * 2.0 * L
    # fingers point down, so finger A sits on the +x side and B on the -x side
    tip_a = np.array([right + SURFACE_GAP, y_g])
    tip_b = np.array([left - SURFACE_GAP, y_g])
    dx = max(abs(tip_a[0] - hw), abs(-hw - tip_b[0]))
    if dx >= reach:
        raise TaskError("object too wide for the finger span")
    base = np.array([0.5 * (tip_a[0] + tip_b[0]), y_g + np.sqrt(reach ** 2 - dx ** 2)])
    knuckle_a = base + np.array([hw, 0.0])
    knuckle_b = base - np.array([hw, 0.0])
    return np.stack([knuckle_a, _elbow(knuckle_a, tip_a, +1.0, L), tip_a,
                     knuckle_b, _elbow(knuckle_b, tip_b, -1.0, L), tip_b])


def _elbow(knuckle, tip, outward, L):
    d = tip - knuckle
    D = np.linalg.norm(d)
    h = np.sqrt(max(L * L - 0.25 * D * D, 0.0))
    perp = np.array([-d[1], d[0]]) / D
    if perp[0] * outward < 0:
        perp = -perp
    return 0.5 * (knuckle + tip) + h * perp


def gen_task(family: MotionFamily, geometry: ObjectGeometry, seed: int,
             task_id: str | None = None, params: SimParams = SimParams()) -> TrackingTask:
    """Deterministic kinematic reference for ``(family, geometry, seed)``."""
    span = 2.0 * params.finger_base_halfwidth
    if geometry.extents[0] > 1.5 * span + 1e-12:
        raise TaskError(f"object width {geometry.extents[0]:.3f} exceeds 1.5x finger span {span:.3f}")
    rng = np.random.default_rng(seed)
    x0 = float(rng.uniform(-0.1, 0.1))
    obj = object_trajectory(family, geometry, x0)
    kp_body = grasp_keypoints(family, geometry, params)
    frames = np.empty((len(obj), 6, 2))
    for n, (x, y, th) in enumerate(obj):
        frames[n] = kp_body @ geo.rot2(th).T + np.array([x, y])
    hand = retarget_trajectory(frames, params)
    hand[:, 3:] = np.clip(hand[:, 3:], -FINGER_LIMIT, FINGER_LIMIT)
    ref = np.concatenate([hand, obj], axis=1)
    if task_id is None:
        task_id = f"{family.kind.value}_{seed}"
    return TrackingTask(id=task_id, ref=ref, geometry=geometry)


def _tip_normals(hand, geometry, pose, params):
    """Outward normal of the edge nearest each fingertip, in world frame, shape (2, 2)."""
    kp = forward_kinematics(hand, params)
    R = geo.rot2(pose[2])
    normals = geo.edge_normals(geometry.vertices)
    offs = np.einsum("vk,vk->v", geometry.vertices, normals)
    out = []
    for i in (2, 5):
        pb = R.T @ (kp[i] - pose[:2])
        j = int(np.argmax(normals @ pb - offs))
        out.append(R @ normals[j])
    return np.array(out)


def inject_noise(task: TrackingTask, spec: NoiseSpec, seed: int,
                 params: SimParams = SimParams()) -> TrackingTask:
    """Corrupt the hand reference; the object's first frame is never touched."""
    N = task.n_steps
    if spec.teleport_frame is not None and not 0 <= spec.teleport_frame < N:
        raise TaskError(f"teleport_frame {spec.teleport_frame} outside [0, {N})")
    ref = np.array(task.ref)
    if spec.penetration_offset > 0:
        from .sim import keypoint_jacobian

        for n in range(N + 1):
            hand = ref[n, :7]
            normals = _tip_normals(hand, task.geometry, ref[n, 7:], params)
            J = keypoint_jacobian(hand, params)
            dq = np.zeros(7)
            for tip, cols, nrm in ((2, [3, 4], normals[0]), (5, [5, 6], normals[1])):
                move = -(spec.penetration_offset + SURFACE_GAP) * nrm
                dq[cols] = np.linalg.lstsq(J[tip][:, cols], move, rcond=None)[0]
            ref[n, :7] = hand + dq
    if spec.jitter_std > 0:
        rng = np.random.default_rng(seed)
        ref[:, :7] += rng.normal(0.0, spec.jitter_std, size=(N + 1, 7))
    if spec.teleport_frame is not None:
        ref[spec.teleport_frame, :3] += np.asarray(spec.teleport_delta, dtype=float)
    ref[:, 2] = wrap_angle(ref[:, 2])
    ref[:, 3:7] = np.clip(ref[:, 3:7], -FINGER_LIMIT, FINGER_LIMIT)
    return task.replace(ref=ref)


def _derived_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def gen_library(count: int, seed: int, families, geometries,
                params: SimParams = SimParams()) -> list[TrackingTask]:
    if count < 1:
        raise TaskError("count must be >= 1")
    if not families or not geometries:
        raise TaskError("families and geometries must be non-empty")
    combos = [(f, g) for f in families for g in geometries]
    out = []
    for i in range(count):
        fam, g = combos[i % len(combos)]
        out.append(gen_task(fam, g, _derived_seed(seed, i), task_id=f"task_{i:04d}", params=params))
    return out


# standard shapes used by the presets and tests
def square(side=0.06, mass=0.5) -> ObjectGeometry:
    return ObjectGeometry(geo.rectangle(side, side), mass)


def bar(width=0.12, height=0.012, mass=0.5) -> ObjectGeometry:
    return ObjectGeometry(geo.rectangle(width, height), mass)


def polygon(n=8, radius=0.035, mass=0.5) -> ObjectGeometry:
    return ObjectGeometry(geo.regular_polygon(n, radius), mass)


def default_families() -> list[MotionFamily]:
    return [
        MotionFamily(Family.GRASP_LIFT, 0.25),
        MotionFamily(Family.SLIDE, 0.2),
        MotionFamily(Family.ROTATE_IN_PLACE, np.pi / 4),
        MotionFamily(Family.LIFT_REORIENT, np.pi / 4),
    ]


def default_geometries() -> list[ObjectGeometry]:
    return [square(0.06), square(0.05), polygon(8, 0.035), bar(0.10, 0.04)]
