"""Keypoint retargeting: fit hand DoF so the 6 robot keypoints match source keypoints."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import wrap_angle
from .sim import SimParams, forward_kinematics, keypoint_jacobian
from .types import FINGER_LIMIT, HAND_DIM

_LOWER = np.array([-np.inf, -np.inf, -np.inf] + [-FINGER_LIMIT] * 4)
_UPPER = -_LOWER


class RetargetError(ValueError):
    pass


@dataclass
class FitReport:
    dof: np.ndarray
    residual: float
    iterations: int
    history: list = field(default_factory=list)  # objective after each accepted step


def _objective(q, target, params):
    r = forward_kinematics(q, params) - target
    f = float(np.sum(r * r))
    g = 2.0 * np.einsum("ik,ikj->j", r, keypoint_jacobian(q, params))
    return f, g


def _project(q):
    return np.clip(q, _LOWER, _UPPER)


def _projected_grad(q, g):
    # components pinned at a bound with the gradient pushing outward do not count
    pg = g.copy()
    pg[(q <= _LOWER) & (g > 0)] = 0.0
    pg[(q >= _UPPER) & (g < 0)] = 0.0
    return pg


def lbfgs_fit(target, init, params: SimParams = SimParams(), max_iter: int = 200,
              gtol: float = 1e-10, memory: int = 10, c1: float = 1e-4) -> FitReport:
    """Limited-memory quasi-Newton descent with projected Armijo backtracking."""
    q = _project(np.asarray(init, dtype=float).copy())
    f, g = _objective(q, target, params)
    hist_s: deque = deque(maxlen=memory)
    hist_y: deque = deque(maxlen=memory)
    history = [f]
    it = 0
    for it in range(1, max_iter + 1):
        pg = _projected_grad(q, g)
        if np.max(np.abs(pg)) < gtol:
            it -= 1
            break
        # two-loop recursion
        d = -pg
        alphas = []
        for s, y in reversed(list(zip(hist_s, hist_y))):
            rho = 1.0 / (y @ s)
            a = rho * (s @ d)
            alphas.append((a, rho, s, y))
            d = d - a * y
        if hist_s:
            s, y = hist_s[-1], hist_y[-1]
            d = d * ((s @ y) / (y @ y))
        for a, rho, s, y in reversed(alphas):
            b = rho * (y @ d)
            d = d + (a - b) * s
        # variables held at a bound stay fixed for this iteration
        d[pg == 0.0] = 0.0
        if d @ pg >= 0:
            hist_s.clear()
            hist_y.clear()
            d = -pg
        step = 1.0
        accepted = False
        for _ in range(40):
            q_new = _project(q + step * d)
            f_new, g_new = _objective(q_new, target, params)
            if f_new <= f + c1 * (g @ (q_new - q)) and f_new <= f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if hist_s:
                hist_s.clear()
                hist_y.clear()
                continue
            break
        s = q_new - q
        y = g_new - g
        if s @ y > 1e-20:
            hist_s.append(s)
            hist_y.append(y)
        q, f, g = q_new, f_new, g_new
        history.append(f)
    out = q.copy()
    out[2] = wrap_angle(out[2])
    return FitReport(out, f, it, history)


def retarget_frame(target, init=None, params: SimParams = SimParams()) -> tuple[np.ndarray, float]:
    """Fit one frame of 6 source keypoints; returns ``(dof, squared residual)``."""
    target = np.asarray(target, dtype=float)
    if target.shape != (6, 2) or not np.all(np.isfinite(target)):
        raise RetargetError("target must be a finite (6, 2) keypoint array")
    init = np.zeros(HAND_DIM) if init is None else np.asarray(init, dtype=float)
    rep = lbfgs_fit(target, _initial_guess(target, init), params)
    return rep.dof, rep.residual


def _initial_guess(target, init):
    # the base pose is fixed by the knuckles; seeding it avoids the
    # rotation landscape's far-side stationary point
    q = np.array(init, dtype=float)
    ka, kb = target[0], target[3]
    axis = kb - ka
    if np.linalg.norm(axis) > 1e-9:
        q[:2] = 0.5 * (ka + kb)
        phi = np.arctan2(axis[1], axis[0])
        q[2] = q[2] + wrap_angle(phi - q[2])
    return q


def retarget_trajectory(frames, params: SimParams = SimParams()) -> np.ndarray:
    """Retarget a ``(F, 6, 2)`` keypoint sequence with warm starts; returns ``(F, 7)``."""
    frames = np.asarray(frames, dtype=float)
    if frames.ndim != 3 or frames.shape[1:] != (6, 2):
        raise RetargetError("source trajectory must have shape (F, 6, 2)")
    out = np.zeros((len(frames), HAND_DIM))
    q = np.zeros(HAND_DIM)
    for n, target in enumerate(frames):
        q, _ = retarget_frame(target, q, params)
        out[n] = q
    return out
