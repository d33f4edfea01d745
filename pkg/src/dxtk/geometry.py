"""Planar polygon helpers and the deterministic object shape descriptor."""

from __future__ import annotations

import numpy as np

DESCRIPTOR_DIM = 32
N_RADII = 16


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    # np.mod maps +pi to -pi; fold it back so the interval is closed at +pi
    return np.where(w == -np.pi, np.pi, w)


def rot2(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def signed_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_centroid(vertices: np.ndarray) -> np.ndarray:
    x, y = vertices[:, 0], vertices[:, 1]
    cross = x * np.roll(y, -1) - np.roll(x, -1) * y
    a = 0.5 * cross.sum()
    cx = np.sum((x + np.roll(x, -1)) * cross) / (6.0 * a)
    cy = np.sum((y + np.roll(y, -1)) * cross) / (6.0 * a)
    return np.array([cx, cy])


def polygon_inertia(vertices: np.ndarray, mass: float) -> float:
    """Moment of inertia about the origin for a uniform-density polygon."""
    x, y = vertices[:, 0], vertices[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    j = np.sum(cross * (x * x + x * xn + xn * xn + y * y + y * yn + yn * yn)) / 12.0
    return float(mass * j / area)


def perimeter(vertices: np.ndarray) -> float:
    return float(np.linalg.norm(np.roll(vertices, -1, axis=0) - vertices, axis=1).sum())


def is_convex_ccw(vertices: np.ndarray, tol: float = 1e-12) -> bool:
    """True when the vertex loop turns left at every corner (strictly convex, CCW)."""
    e = np.roll(vertices, -1, axis=0) - vertices
    en = np.roll(e, -1, axis=0)
    turn = e[:, 0] * en[:, 1] - e[:, 1] * en[:, 0]
    return bool(np.all(turn > tol))


def edge_normals(vertices: np.ndarray) -> np.ndarray:
    """Outward unit normals of the edges v[i] -> v[i+1] of a CCW polygon."""
    e = np.roll(vertices, -1, axis=0) - vertices
    n = np.stack([e[:, 1], -e[:, 0]], axis=1)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def signed_distance(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Signed distance from body-frame points to a convex polygon boundary.

    Negative inside (exact), positive outside (exact Euclidean distance).
    """
    points = np.atleast_2d(points)
    normals = edge_normals(vertices)
    plane = np.einsum("pvk,vk->pv", points[:, None, :] - vertices[None], normals)
    inside_depth = plane.max(axis=1)
    # exact outside distance: nearest point on any edge segment
    a = vertices[None]
    b = np.roll(vertices, -1, axis=0)[None]
    ab = b - a
    t = np.einsum("pvk,pvk->pv", points[:, None, :] - a, np.broadcast_to(ab, (len(points),) + ab.shape[1:]))
    t = np.clip(t / np.sum(ab * ab, axis=-1), 0.0, 1.0)
    closest = a + t[..., None] * ab
    d_edge = np.linalg.norm(points[:, None, :] - closest, axis=-1).min(axis=1)
    return np.where(inside_depth < 0.0, inside_depth, d_edge)


def ray_radius(vertices: np.ndarray, angle: float) -> float:
    """Distance from the origin to the boundary along direction ``angle``.

    The origin must lie strictly inside the convex polygon.
    """
    d = np.array([np.cos(angle), np.sin(angle)])
    normals = edge_normals(vertices)
    # boundary point along d satisfies n.(r d - v) = 0 for the edge it exits through
    offs = np.einsum("vk,vk->v", normals, vertices)
    proj = normals @ d
    with np.errstate(divide="ignore"):
        r = np.where(proj > 1e-15, offs / np.where(proj > 1e-15, proj, 1.0), np.inf)
    return float(r.min())


def boundary_samples(vertices: np.ndarray, count: int = 64) -> np.ndarray:
    """Points spaced evenly by arc length along the closed boundary, starting at vertex 0."""
    nxt = np.roll(vertices, -1, axis=0)
    seg = np.linalg.norm(nxt - vertices, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.arange(count) * (cum[-1] / count)
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(vertices) - 1)
    t = (s - cum[idx]) / seg[idx]
    return vertices[idx] + t[:, None] * (nxt[idx] - vertices[idx])


def shape_descriptor(vertices: np.ndarray, mass: float) -> np.ndarray:
    """32-entry shape summary of a centred convex polygon.

    Layout: 16 polar radii at angles 2*pi*k/16, area, perimeter, bounding-box
    extents (x, y), min/max vertex radius, mass, 9 zero pads.
    """
    radii = [ray_radius(vertices, 2.0 * np.pi * k / N_RADII) for k in range(N_RADII)]
    vr = np.linalg.norm(vertices, axis=1)
    ext = vertices.max(axis=0) - vertices.min(axis=0)
    out = np.zeros(DESCRIPTOR_DIM)
    out[:16] = radii
    out[16] = signed_area(vertices)
    out[17] = perimeter(vertices)
    out[18:20] = ext
    out[20] = vr.min()
    out[21] = vr.max()
    out[22] = mass
    return out


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric chamfer distance: average of the two directed mean nearest-neighbour distances."""
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return 0.5 * float(d.min(axis=1).mean() + d.min(axis=0).mean())


def rectangle(width: float, height: float) -> np.ndarray:
    hw, hh = 0.5 * width, 0.5 * height
    return np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])


def regular_polygon(n: int, radius: float) -> np.ndarray:
    # flat bottom edge so the shape rests on the table
    ang = -np.pi / 2 - np.pi / n + 2.0 * np.pi * np.arange(n) / n
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
