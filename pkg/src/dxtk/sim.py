"""Deterministic planar simulator: a two-finger floating-base hand, one convex
object and a table half-plane, coupled through penalty contacts.

The hand is a unit-inertia mass-spring system per DoF driven by PD position
control; contact forces act on it through the keypoint Jacobian. The object
is a rigid polygon under gravity. Hand-object friction uses a stick/slip
anchor spring per keypoint, table friction is regularised viscous Coulomb.

Everything operates on batches of environments (leading axis ``E``); the
single-state functions at the bottom are thin wrappers used by tests and
tooling.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from functools import lru_cache

import numpy as np

from . import _kernel
from .geometry import wrap_angle
from .types import HAND_DIM, FINGER_LIMIT, FullState, ObjectGeometry

N_KEYPOINTS = 6
KEYPOINT_NAMES = ("a_knuckle", "a_mid", "a_tip", "b_knuckle", "b_mid", "b_tip")
TIP_IDX = (2, 5)


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimParams:
    dt_control: float = 1.0 / 60.0
    substeps: int = 4
    gravity: float = 9.81
    kp_finger: float = 20.0
    kd_finger: float = 1.0
    kp_base_trans: float = 400.0
    kd_base_trans: float = 40.0
    kp_base_rot: float = 100.0
    kd_base_rot: float = 10.0
    contact_stiffness: float = 1e4
    contact_damping: float = 10.0
    friction_mu: float = 0.9
    link_length: float = 0.05
    finger_base_halfwidth: float = 0.04
    # hand-object stick spring and table viscous friction coefficient
    tangent_stiffness: float = 5e3
    tangent_damping: float = 30.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "friction_mu":
                ok = v >= 0
            else:
                ok = v > 0
            if not (ok and np.isfinite(v)):
                raise ValueError(f"SimParams.{f.name} must be positive, got {v}")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ValueError("SimParams.substeps must be an integer >= 1")

    @property
    def kp(self) -> np.ndarray:
        return np.array([self.kp_base_trans] * 2 + [self.kp_base_rot] + [self.kp_finger] * 4)

    @property
    def kd(self) -> np.ndarray:
        return np.array([self.kd_base_trans] * 2 + [self.kd_base_rot] + [self.kd_finger] * 4)


# ---------------------------------------------------------------------------
# kinematics


def _finger_dirs(phi, a, sign):
    """World direction of a finger link whose base-frame angle is ``a``.

    ``sign=+1`` for finger A (positive angles curl towards +x of the base
    frame), ``-1`` for finger B.
    """
    ex = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    ey = np.stack([-np.sin(phi), np.cos(phi)], axis=-1)
    sa, ca = np.sin(a)[..., None], np.cos(a)[..., None]
    d = sign * ex * sa + ey * ca
    dd = sign * ex * ca - ey * sa
    return d, dd


def forward_kinematics(hand, params: SimParams = SimParams()) -> np.ndarray:
    """World positions of the 6 keypoints, shape ``(..., 6, 2)``.

    Order: A knuckle, A mid-joint, A tip, B knuckle, B mid-joint, B tip.
    """
    q = np.asarray(hand, dtype=float)
    base, phi = q[..., :2], q[..., 2]
    L, hw = params.link_length, params.finger_base_halfwidth
    ex = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    ka = base - hw * ex
    kb = base + hw * ex
    d1a, _ = _finger_dirs(phi, q[..., 3], 1.0)
    d2a, _ = _finger_dirs(phi, q[..., 3] + q[..., 4], 1.0)
    d1b, _ = _finger_dirs(phi, q[..., 5], -1.0)
    d2b, _ = _finger_dirs(phi, q[..., 5] + q[..., 6], -1.0)
    ma = ka + L * d1a
    mb = kb + L * d1b
    return np.stack([ka, ma, ma + L * d2a, kb, mb, mb + L * d2b], axis=-2)


def keypoint_jacobian(hand, params: SimParams = SimParams()) -> np.ndarray:
    """Analytic d(keypoints)/d(hand DoF), shape ``(..., 6, 2, 7)``."""
    q = np.asarray(hand, dtype=float)
    kp = forward_kinematics(q, params)
    L = params.link_length
    phi = q[..., 2]
    J = np.zeros(q.shape[:-1] + (N_KEYPOINTS, 2, HAND_DIM))
    J[..., :, 0, 0] = 1.0
    J[..., :, 1, 1] = 1.0
    rel = kp - q[..., None, :2]
    J[..., :, 0, 2] = -rel[..., 1]
    J[..., :, 1, 2] = rel[..., 0]
    _, dd1a = _finger_dirs(phi, q[..., 3], 1.0)
    _, dd2a = _finger_dirs(phi, q[..., 3] + q[..., 4], 1.0)
    _, dd1b = _finger_dirs(phi, q[..., 5], -1.0)
    _, dd2b = _finger_dirs(phi, q[..., 5] + q[..., 6], -1.0)
    J[..., 1, :, 3] = L * dd1a
    J[..., 2, :, 3] = L * (dd1a + dd2a)
    J[..., 2, :, 4] = L * dd2a
    J[..., 4, :, 5] = L * dd1b
    J[..., 5, :, 5] = L * (dd1b + dd2b)
    J[..., 5, :, 6] = L * dd2b
    return J


# ---------------------------------------------------------------------------
# batched state


@dataclass
class GeometryBatch:
    """Polygons padded to a common vertex count; padded edges are masked."""

    verts: np.ndarray  # (E, V, 2)
    normals: np.ndarray  # (E, V, 2)
    offs: np.ndarray  # (E, V)
    valid: np.ndarray  # (E, V)
    mass: np.ndarray  # (E,)
    inertia: np.ndarray  # (E,)
    nverts: np.ndarray  # (E,)

    @classmethod
    def from_geometries(cls, geoms) -> "GeometryBatch":
        from .geometry import edge_normals

        vmax = max(len(g.vertices) for g in geoms)
        E = len(geoms)
        verts = np.zeros((E, vmax, 2))
        normals = np.zeros((E, vmax, 2))
        valid = np.zeros((E, vmax), dtype=bool)
        for i, g in enumerate(geoms):
            v = g.vertices
            verts[i, : len(v)] = v
            verts[i, len(v):] = v[-1]
            normals[i, : len(v)] = edge_normals(v)
            valid[i, : len(v)] = True
        offs = np.einsum("evk,evk->ev", verts, normals)
        mass = np.array([g.mass for g in geoms])
        inertia = np.array([g.inertia for g in geoms])
        nverts = np.array([len(g.vertices) for g in geoms], dtype=np.int64)
        return cls(verts, normals, offs, valid, mass, inertia, nverts)

    def take(self, idx) -> "GeometryBatch":
        return GeometryBatch(*(getattr(self, f.name)[idx] for f in fields(self)))


@dataclass
class SimBatch:
    hand_q: np.ndarray  # (E, 7)
    hand_qd: np.ndarray  # (E, 7)
    obj_q: np.ndarray  # (E, 3)
    obj_qd: np.ndarray  # (E, 3)
    anchor: np.ndarray  # (E, 6, 2) body-frame stick points
    anchor_on: np.ndarray  # (E, 6) bool

    @classmethod
    def at_rest(cls, states: np.ndarray) -> "SimBatch":
        """Batch resting at full states ``(E, 10)`` with zero velocities."""
        s = np.array(states, dtype=float).reshape(-1, 10)
        E = len(s)
        return cls(s[:, :7].copy(), np.zeros((E, 7)), s[:, 7:].copy(), np.zeros((E, 3)),
                   np.zeros((E, N_KEYPOINTS, 2)), np.zeros((E, N_KEYPOINTS), dtype=bool))

    def copy(self) -> "SimBatch":
        return SimBatch(*(np.array(getattr(self, f.name)) for f in fields(self)))

    def full_state(self) -> np.ndarray:
        return np.concatenate([self.hand_q, self.obj_q], axis=1)

    def velocity(self) -> np.ndarray:
        return np.concatenate([self.hand_qd, self.obj_qd], axis=1)

    def assign(self, idx, other: "SimBatch") -> None:
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)


def _perp(v):
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def _contact_terms(b: SimBatch, g: GeometryBatch, p: SimParams):
    """All contact forces for one substep. Returns a dict of arrays."""
    k, c_n, mu = p.contact_stiffness, p.contact_damping, p.friction_mu
    kp = forward_kinematics(b.hand_q, p)
    J = keypoint_jacobian(b.hand_q, p)
    vkp = np.einsum("eikj,ej->eik", J, b.hand_qd)

    centre = b.obj_q[:, None, :2]
    th = b.obj_q[:, 2]
    cs, sn = np.cos(th)[:, None], np.sin(th)[:, None]
    omega = b.obj_qd[:, 2][:, None, None]
    vobj = b.obj_qd[:, None, :2]

    # --- hand keypoints vs object polygon
    rel = kp - centre
    pb = np.stack([cs * rel[..., 0] + sn * rel[..., 1], -sn * rel[..., 0] + cs * rel[..., 1]], axis=-1)
    plane = np.einsum("eik,evk->eiv", pb, g.normals) - g.offs[:, None, :]
    plane = np.where(g.valid[:, None, :], plane, -np.inf)
    j = np.argmax(plane, axis=-1)
    sd = np.take_along_axis(plane, j[..., None], axis=-1)[..., 0]
    inside = sd < 0.0
    depth = np.where(inside, -sd, 0.0)
    nb = np.take_along_axis(g.normals, j.reshape(len(j), -1)[..., None], axis=1).reshape(pb.shape)
    n = np.stack([cs * nb[..., 0] - sn * nb[..., 1], sn * nb[..., 0] + cs * nb[..., 1]], axis=-1)
    t = _perp(n)
    vrel = vkp - (vobj + omega * _perp(rel))
    vn = np.sum(vrel * n, axis=-1)
    vt = np.sum(vrel * t, axis=-1)
    fn = np.where(inside, k * depth + c_n * np.maximum(0.0, -vn), 0.0)

    started = inside & ~b.anchor_on
    anchor_b = np.where(started[..., None], pb, b.anchor)
    anchor_w = centre + np.stack([cs * anchor_b[..., 0] - sn * anchor_b[..., 1],
                                  sn * anchor_b[..., 0] + cs * anchor_b[..., 1]], axis=-1)
    delta_t = np.sum((kp - anchor_w) * t, axis=-1)
    ft_raw = -p.tangent_stiffness * delta_t - c_n * vt
    lim = mu * fn
    slip = inside & (np.abs(ft_raw) > lim)
    ft = np.where(inside, np.clip(ft_raw, -lim, lim), 0.0)
    slid_w = kp + (ft / p.tangent_stiffness)[..., None] * t
    slid_rel = slid_w - centre
    slid_b = np.stack([cs * slid_rel[..., 0] + sn * slid_rel[..., 1],
                       -sn * slid_rel[..., 0] + cs * slid_rel[..., 1]], axis=-1)
    new_anchor = np.where(slip[..., None], slid_b, anchor_b)
    new_anchor = np.where(inside[..., None], new_anchor, 0.0)
    f_ho = fn[..., None] * n + ft[..., None] * t  # on the keypoint

    # --- object vertices vs table
    wv = centre + np.stack([cs * g.verts[..., 0] - sn * g.verts[..., 1],
                            sn * g.verts[..., 0] + cs * g.verts[..., 1]], axis=-1)
    rv = wv - centre
    vv = vobj + omega * _perp(rv)
    tv_on = (wv[..., 1] < 0.0) & g.valid
    fn_v = np.where(tv_on, -k * wv[..., 1] + c_n * np.maximum(0.0, -vv[..., 1]), 0.0)
    ft_v = np.where(tv_on, np.clip(-p.tangent_damping * vv[..., 0], -mu * fn_v, mu * fn_v), 0.0)
    f_tv = np.stack([ft_v, fn_v], axis=-1)

    # --- hand keypoints vs table
    th_on = kp[..., 1] < 0.0
    fn_h = np.where(th_on, -k * kp[..., 1] + c_n * np.maximum(0.0, -vkp[..., 1]), 0.0)
    ft_h = np.where(th_on, np.clip(-p.tangent_damping * vkp[..., 0], -mu * fn_h, mu * fn_h), 0.0)
    f_th = np.stack([ft_h, fn_h], axis=-1)

    return dict(
        kp=kp, J=J, rel=rel, n=n, t=t, inside=inside, fn=fn, ft=ft, ft_raw=ft_raw, f_ho=f_ho,
        anchor=new_anchor, anchor_on=inside, wv=wv, rv=rv, tv_on=tv_on, fn_v=fn_v, ft_v=ft_v,
        f_tv=f_tv, th_on=th_on, fn_h=fn_h, ft_h=ft_h, f_th=f_th,
    )


def _cross(r, f):
    return r[..., 0] * f[..., 1] - r[..., 1] * f[..., 0]


def substep(b: SimBatch, target: np.ndarray, g: GeometryBatch, p: SimParams, h: float) -> None:
    """Advance ``b`` in place by one semi-implicit Euler substep of length ``h``."""
    ct = _contact_terms(b, g, p)
    f_obj = -ct["f_ho"].sum(axis=1) + ct["f_tv"].sum(axis=1)
    tau_obj = _cross(ct["rel"], -ct["f_ho"]).sum(axis=1) + _cross(ct["rv"], ct["f_tv"]).sum(axis=1)
    f_obj[:, 1] -= g.mass * p.gravity
    gen = np.einsum("eikj,eik->ej", ct["J"], ct["f_ho"] + ct["f_th"])

    err = target - b.hand_q
    err[:, 2] = wrap_angle(err[:, 2])
    acc = p.kp * err - p.kd * b.hand_qd + gen
    b.hand_qd += h * acc
    b.hand_q += h * b.hand_qd
    b.hand_q[:, 2] = wrap_angle(b.hand_q[:, 2])
    fingers = b.hand_q[:, 3:]
    hit = np.abs(fingers) > FINGER_LIMIT
    if hit.any():
        b.hand_q[:, 3:] = np.clip(fingers, -FINGER_LIMIT, FINGER_LIMIT)
        b.hand_qd[:, 3:] = np.where(hit, 0.0, b.hand_qd[:, 3:])

    b.obj_qd[:, :2] += h * f_obj / g.mass[:, None]
    b.obj_qd[:, 2] += h * tau_obj / g.inertia
    b.obj_q += h * b.obj_qd
    b.obj_q[:, 2] = wrap_angle(b.obj_q[:, 2])
    b.anchor = ct["anchor"]
    b.anchor_on = ct["anchor_on"]


def _prepare_target(target) -> np.ndarray:
    target = np.array(target, dtype=float)
    if not np.all(np.isfinite(target)):
        raise SimulationError("non-finite position target")
    target[:, 2] = wrap_angle(target[:, 2])
    target[:, 3:] = np.clip(target[:, 3:], -FINGER_LIMIT, FINGER_LIMIT)
    return target


def _check_batch(b: SimBatch) -> None:
    if not (np.all(np.isfinite(b.hand_q)) and np.all(np.isfinite(b.obj_q))
            and np.all(np.isfinite(b.hand_qd)) and np.all(np.isfinite(b.obj_qd))):
        raise SimulationError("simulation produced non-finite state")


def step_batch(b: SimBatch, target: np.ndarray, g: GeometryBatch, p: SimParams) -> None:
    """Advance every environment by one control period, in place (compiled path)."""
    target = _prepare_target(target)
    _kernel.substeps(b.hand_q, b.hand_qd, b.obj_q, b.obj_qd, b.anchor, b.anchor_on, target,
                     g.verts, g.normals, g.offs, g.nverts, g.mass, g.inertia,
                     _packed(p), p.dt_control / p.substeps, int(p.substeps))
    _check_batch(b)


def step_batch_reference(b: SimBatch, target: np.ndarray, g: GeometryBatch, p: SimParams) -> None:
    """Pure-numpy twin of :func:`step_batch`, kept as a cross-check."""
    target = _prepare_target(target)
    h = p.dt_control / p.substeps
    for _ in range(int(p.substeps)):
        substep(b, target, g, p, h)
    _check_batch(b)


@lru_cache(maxsize=64)
def _packed(p: SimParams) -> np.ndarray:
    return _kernel.pack_params(p)


# ---------------------------------------------------------------------------
# single-state interface


@dataclass(frozen=True)
class SimState:
    """Dynamic state of one world: positions, velocities and friction anchors."""

    hand: np.ndarray
    obj: np.ndarray
    hand_vel: np.ndarray = field(default_factory=lambda: np.zeros(7))
    obj_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    anchor: np.ndarray = field(default_factory=lambda: np.zeros((N_KEYPOINTS, 2)))
    anchor_on: np.ndarray = field(default_factory=lambda: np.zeros(N_KEYPOINTS, dtype=bool))

    def __post_init__(self):
        for name in ("hand", "obj", "hand_vel", "obj_vel", "anchor"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        a = np.array(self.anchor_on, dtype=bool)
        a.setflags(write=False)
        object.__setattr__(self, "anchor_on", a)

    @property
    def q(self) -> FullState:
        return FullState(self.hand, self.obj)

    @property
    def qdot(self) -> np.ndarray:
        return np.concatenate([self.hand_vel, self.obj_vel])

    def to_batch(self) -> SimBatch:
        return SimBatch(self.hand[None].copy(), self.hand_vel[None].copy(), self.obj[None].copy(),
                        self.obj_vel[None].copy(), self.anchor[None].copy(), self.anchor_on[None].copy())

    @classmethod
    def from_batch(cls, b: SimBatch, i: int = 0) -> "SimState":
        return cls(b.hand_q[i], b.obj_q[i], b.hand_qd[i], b.obj_qd[i], b.anchor[i], b.anchor_on[i])

    @classmethod
    def from_full_state(cls, s) -> "SimState":
        s = np.asarray(s, dtype=float)
        return cls(hand=s[:7], obj=s[7:10])


def _check_finite(state: SimState) -> None:
    for name in ("hand", "obj", "hand_vel", "obj_vel", "anchor"):
        if not np.all(np.isfinite(getattr(state, name))):
            raise SimulationError(f"non-finite {name} in simulation state")


def step(state: SimState, target, geometry: ObjectGeometry, params: SimParams = SimParams()) -> SimState:
    _check_finite(state)
    b = state.to_batch()
    step_batch(b, np.asarray(target, dtype=float).reshape(1, 7),
               GeometryBatch.from_geometries([geometry]), params)
    return SimState.from_batch(b)


@dataclass(frozen=True)
class Contact:
    point: tuple
    normal: tuple
    normal_force: float
    tangent_force: float
    body_pair: tuple


def compute_contacts(state: SimState, geometry: ObjectGeometry, params: SimParams = SimParams()) -> list[Contact]:
    """Contact records at ``state``; normals point from the second body into the first.

    Forces are the magnitudes acting on the first body of ``body_pair``.
    """
    _check_finite(state)
    ct = _contact_terms(state.to_batch(), GeometryBatch.from_geometries([geometry]), params)
    out = []
    for i in range(N_KEYPOINTS):
        if ct["inside"][0, i]:
            out.append(Contact(tuple(ct["kp"][0, i]), tuple(ct["n"][0, i]), float(ct["fn"][0, i]),
                               float(ct["ft"][0, i]), (f"hand:{KEYPOINT_NAMES[i]}", "object")))
    for v in range(len(geometry.vertices)):
        if ct["tv_on"][0, v]:
            out.append(Contact(tuple(ct["wv"][0, v]), (0.0, 1.0), float(ct["fn_v"][0, v]),
                               float(ct["ft_v"][0, v]), (f"object:v{v}", "table")))
    for i in range(N_KEYPOINTS):
        if ct["th_on"][0, i]:
            out.append(Contact(tuple(ct["kp"][0, i]), (0.0, 1.0), float(ct["fn_h"][0, i]),
                               float(ct["ft_h"][0, i]), (f"hand:{KEYPOINT_NAMES[i]}", "table")))
    return out


def pene_depth(hand, geometry: ObjectGeometry, object_pose, params: SimParams = SimParams()) -> float:
    """Deepest keypoint penetration into the object polygon (0 when none)."""
    kp = forward_kinematics(np.asarray(hand, dtype=float), params)
    pose = np.asarray(object_pose, dtype=float)
    c, s = np.cos(pose[2]), np.sin(pose[2])
    rel = kp - pose[:2]
    pb = np.stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1]], axis=1)
    from .geometry import edge_normals

    normals = edge_normals(geometry.vertices)
    plane = np.einsum("ik,vk->iv", pb, normals) - np.einsum("vk,vk->v", geometry.vertices, normals)
    return float(max(0.0, -plane.max(axis=1).min()))


def pene_depth_batch(hands: np.ndarray, geometry: ObjectGeometry, poses: np.ndarray,
                     params: SimParams = SimParams()) -> np.ndarray:
    """Vectorised :func:`pene_depth` over a sequence of frames."""
    from .geometry import edge_normals

    kp = forward_kinematics(hands, params)
    poses = np.asarray(poses, dtype=float)
    c, s = np.cos(poses[:, 2])[:, None], np.sin(poses[:, 2])[:, None]
    rel = kp - poses[:, None, :2]
    pb = np.stack([c * rel[..., 0] + s * rel[..., 1], -s * rel[..., 0] + c * rel[..., 1]], axis=-1)
    normals = edge_normals(geometry.vertices)
    plane = np.einsum("fik,vk->fiv", pb, normals) - np.einsum("vk,vk->v", geometry.vertices, normals)
    return np.maximum(0.0, -plane.max(axis=2).min(axis=1))


def keypoint_surface_distance(hands: np.ndarray, geometry: ObjectGeometry, poses: np.ndarray,
                              params: SimParams = SimParams()) -> np.ndarray:
    """Unsigned distance of each keypoint to the object boundary, shape ``(F, 6)``."""
    from .geometry import signed_distance

    kp = forward_kinematics(np.asarray(hands, dtype=float), params)
    poses = np.asarray(poses, dtype=float)
    c, s = np.cos(poses[:, 2])[:, None], np.sin(poses[:, 2])[:, None]
    rel = kp - poses[:, None, :2]
    pb = np.stack([c * rel[..., 0] + s * rel[..., 1], -s * rel[..., 0] + c * rel[..., 1]], axis=-1)
    sd = signed_distance(pb.reshape(-1, 2), geometry.vertices).reshape(pb.shape[:2])
    return np.abs(sd)
