"""Shared domain types, validation and the fixed-length task embedding.

States are stored as flat float arrays so trajectories stay vectorised:

* hand DoF (7): base_x, base_y, base_rot, finger A joints (2), finger B joints (2)
* object pose (3): x, y, theta
* full state (10): hand followed by object
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import geometry as geo

HAND_DIM = 7
OBJ_DIM = 3
STATE_DIM = HAND_DIM + OBJ_DIM
FINGER_LIMIT = np.pi / 2
N_KEYFRAMES = 16
EMBED_DIM = N_KEYFRAMES * STATE_DIM + geo.DESCRIPTOR_DIM  # 192

HAND_FIELDS = ("base_x", "base_y", "base_rot", "finger_a0", "finger_a1", "finger_b0", "finger_b1")
OBJ_FIELDS = ("x", "y", "theta")
# indices of angular components inside a full state
ANGLE_IDX = (2, 9)


class TaskError(ValueError):
    """Raised when a task or geometry violates its structural invariants."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FullState:
    hand: np.ndarray
    object: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "hand", _frozen(self.hand))
        object.__setattr__(self, "object", _frozen(self.object))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.hand, self.object])

    @classmethod
    def from_array(cls, s) -> "FullState":
        s = np.asarray(s, dtype=float)
        return cls(hand=s[:HAND_DIM], object=s[HAND_DIM:STATE_DIM])


@dataclass(frozen=True)
class ObjectGeometry:
    """Convex polygon in its body frame, re-centred on its area centroid."""

    vertices: np.ndarray
    mass: float = 0.5
    descriptor_dim: int = geo.DESCRIPTOR_DIM

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise TaskError("geometry needs at least 3 two-dimensional vertices")
        if not np.all(np.isfinite(v)):
            raise TaskError("geometry vertices must be finite")
        if not self.mass > 0:
            raise TaskError("geometry mass must be positive")
        if self.descriptor_dim != geo.DESCRIPTOR_DIM:
            raise TaskError(f"descriptor_dim must be {geo.DESCRIPTOR_DIM}")
        if geo.signed_area(v) < 0:
            v = v[::-1]
        if not geo.is_convex_ccw(v):
            raise TaskError("geometry polygon must be simple and strictly convex")
        v = v - geo.polygon_centroid(v)
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "mass", float(self.mass))

    @property
    def inertia(self) -> float:
        return geo.polygon_inertia(self.vertices, self.mass)

    @property
    def extents(self) -> np.ndarray:
        return self.vertices.max(axis=0) - self.vertices.min(axis=0)

    def rest_height(self, theta: float = 0.0) -> float:
        """Centroid height at which the rotated polygon touches the table y=0."""
        return float(-(self.vertices @ geo.rot2(theta).T)[:, 1].min())

    def to_dict(self) -> dict:
        return {"vertices": self.vertices.tolist(), "mass": self.mass}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectGeometry":
        return cls(vertices=np.asarray(d["vertices"], dtype=float), mass=float(d["mass"]))


@dataclass(frozen=True)
class TrackingTask:
    """Kinematic hand+object reference of N+1 frames plus the object geometry.

    Construction does not validate; call :func:`validate_task`.
    """

    id: str
    ref: np.ndarray  # (N+1, 10)
    geometry: ObjectGeometry
    dt: float = 1.0 / 60.0

    def __post_init__(self):
        object.__setattr__(self, "ref", _frozen(self.ref))

    @property
    def n_steps(self) -> int:
        return len(self.ref) - 1

    @property
    def hand(self) -> np.ndarray:
        return self.ref[:, :HAND_DIM]

    @property
    def obj(self) -> np.ndarray:
        return self.ref[:, HAND_DIM:]

    def state(self, n: int) -> FullState:
        return FullState.from_array(self.ref[n])

    def replace(self, **kw) -> "TrackingTask":
        d = dict(id=self.id, ref=self.ref, geometry=self.geometry, dt=self.dt)
        d.update(kw)
        return TrackingTask(**d)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "dt": self.dt,
            "ref_states": [[r[:HAND_DIM].tolist(), r[HAND_DIM:].tolist()] for r in self.ref],
            "geometry": self.geometry.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrackingTask":
        try:
            ref = np.array([list(h) + list(o) for h, o in d["ref_states"]], dtype=float)
            return cls(id=str(d["id"]), ref=ref.reshape(-1, STATE_DIM),
                       geometry=ObjectGeometry.from_dict(d["geometry"]), dt=float(d["dt"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise TaskError(f"malformed task record: {exc}") from exc


@dataclass(frozen=True)
class Demonstration:
    """Expert action sequence that tracks one task, with the achieved states."""

    task_id: str
    baseline: np.ndarray  # (N+1, 7)
    expert_actions: np.ndarray  # (N, 7) absolute position targets
    expert_deltas: np.ndarray  # (N, 7) applied residuals
    achieved: np.ndarray  # (N+1, 10)
    rewards: np.ndarray  # (N,)
    episode_reward: float
    error: float = float("nan")

    def __post_init__(self):
        for name in ("baseline", "expert_actions", "expert_deltas", "achieved", "rewards"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "episode_reward", float(self.episode_reward))
        object.__setattr__(self, "error", float(self.error))

    def reconstruct_actions(self) -> np.ndarray:
        return self.baseline[:-1] + np.cumsum(self.expert_deltas, axis=0)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "baseline": self.baseline.tolist(),
            "expert_actions": self.expert_actions.tolist(),
            "expert_deltas": self.expert_deltas.tolist(),
            "achieved": self.achieved.tolist(),
            "rewards": self.rewards.tolist(),
            "episode_reward": self.episode_reward,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Demonstration":
        return cls(**{k: d[k] for k in (
            "task_id", "baseline", "expert_actions", "expert_deltas",
            "achieved", "rewards", "episode_reward", "error")})


def validate_task(task: TrackingTask) -> list[str]:
    """Return a description of every violated invariant (empty when valid)."""
    out: list[str] = []
    ref = np.asarray(task.ref)
    if ref.ndim != 2 or ref.shape[1] != STATE_DIM:
        return [f"ref_states shape {ref.shape} != (N+1, {STATE_DIM})"]
    if len(ref) - 1 < 2:
        out.append("N < 2")
    if not (np.isfinite(task.dt) and task.dt > 0):
        out.append("dt <= 0")
    names = [f"hand.{f}" for f in HAND_FIELDS] + [f"object.{f}" for f in OBJ_FIELDS]
    bad = ~np.isfinite(ref)
    for n, j in zip(*np.nonzero(bad)):
        out.append(f"{names[j]} non-finite @{n}")
    with np.errstate(invalid="ignore"):
        over = np.abs(ref[:, 3:7]) > FINGER_LIMIT + 1e-12
        for n, j in zip(*np.nonzero(over)):
            out.append(f"{names[3 + j]} outside joint limit @{n}")
        for j in ANGLE_IDX:
            a = ref[:, j]
            for n in np.nonzero((a <= -np.pi) | (a > np.pi))[0]:
                out.append(f"{names[j]} not wrapped @{n}")
    return out


def geometry_descriptor(g: ObjectGeometry) -> np.ndarray:
    return geo.shape_descriptor(g.vertices, g.mass)


def keyframe_indices(n_steps: int) -> np.ndarray:
    # half-up rounding of k*N/15
    return np.floor(np.arange(N_KEYFRAMES) * n_steps / (N_KEYFRAMES - 1) + 0.5).astype(int)


def unwrap_angles(ref: np.ndarray) -> np.ndarray:
    """Copy of a state sequence with angle channels made continuous from frame 0."""
    out = np.array(ref, dtype=float)
    for j in ANGLE_IDX:
        out[:, j] = np.unwrap(out[:, j])
    return out


def embed_task(task: TrackingTask) -> np.ndarray:
    problems = validate_task(task)
    if problems:
        raise TaskError("; ".join(problems))
    frames = unwrap_angles(task.ref)[keyframe_indices(task.n_steps)]
    return np.concatenate([frames.reshape(-1), geometry_descriptor(task.geometry)])


def save_jsonl(path, records) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, "".join(json.dumps(r) + "\n" for r in records))


def load_tasks(path) -> list[TrackingTask]:
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                tasks.append(TrackingTask.from_dict(json.loads(line)))
    return tasks


def save_tasks(path, tasks) -> None:
    save_jsonl(path, [t.to_dict() for t in tasks])
