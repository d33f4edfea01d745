"""Compiled substep loop; mirrors ``sim._contact_terms`` + ``sim.substep`` per environment."""

from __future__ import annotations

import math

import numba
import numpy as np

# layout of the packed parameter vector
P_KP, P_KD = 0, 7
(P_K, P_CN, P_MU, P_L, P_HW, P_KT, P_CT, P_G) = range(14, 22)
N_PARAMS = 22


def pack_params(p) -> np.ndarray:
    out = np.zeros(N_PARAMS)
    out[P_KP:P_KP + 7] = p.kp
    out[P_KD:P_KD + 7] = p.kd
    out[P_K] = p.contact_stiffness
    out[P_CN] = p.contact_damping
    out[P_MU] = p.friction_mu
    out[P_L] = p.link_length
    out[P_HW] = p.finger_base_halfwidth
    out[P_KT] = p.tangent_stiffness
    out[P_CT] = p.tangent_damping
    out[P_G] = p.gravity
    return out


@numba.njit(cache=True, inline="always")
def _wrap(a):
    w = (a + math.pi) % (2.0 * math.pi) - math.pi
    if w == -math.pi:
        w = math.pi
    return w


@numba.njit(cache=True)
def substeps(hq, hqd, oq, oqd, anchor, anchor_on, target, verts, normals, offs, nverts,
             mass, inertia, prm, h, count):
    E = hq.shape[0]
    k = prm[P_K]
    cn = prm[P_CN]
    mu = prm[P_MU]
    L = prm[P_L]
    hw = prm[P_HW]
    kt = prm[P_KT]
    ct = prm[P_CT]
    grav = prm[P_G]
    lim_f = math.pi / 2
    kpx = np.empty(6)
    kpy = np.empty(6)
    vx = np.empty(6)
    vy = np.empty(6)
    # per keypoint: d(point)/d(finger joints) as (dof, gx, gy) pairs; at most 2 joints
    jd = np.zeros((6, 2), dtype=np.int64)
    jx = np.zeros((6, 2))
    jy = np.zeros((6, 2))
    nj = np.zeros(6, dtype=np.int64)
    fx = np.empty(6)
    fy = np.empty(6)
    for _ in range(count):
        for e in range(E):
            phi = hq[e, 2]
            cph = math.cos(phi)
            sph = math.sin(phi)
            bx = hq[e, 0]
            by = hq[e, 1]
            for f in range(2):
                sign = 1.0 if f == 0 else -1.0
                i1 = 3 + 2 * f
                i2 = i1 + 1
                off = -hw if f == 0 else hw
                knx = bx + off * cph
                kny = by + off * sph
                a1 = hq[e, i1]
                a12 = a1 + hq[e, i2]
                s1 = math.sin(a1)
                c1 = math.cos(a1)
                s2 = math.sin(a12)
                c2 = math.cos(a12)
                d1x = sign * cph * s1 - sph * c1
                d1y = sign * sph * s1 + cph * c1
                dd1x = sign * cph * c1 + sph * s1
                dd1y = sign * sph * c1 - cph * s1
                d2x = sign * cph * s2 - sph * c2
                d2y = sign * sph * s2 + cph * c2
                dd2x = sign * cph * c2 + sph * s2
                dd2y = sign * sph * c2 - cph * s2
                b = 3 * f
                kpx[b] = knx
                kpy[b] = kny
                kpx[b + 1] = knx + L * d1x
                kpy[b + 1] = kny + L * d1y
                kpx[b + 2] = kpx[b + 1] + L * d2x
                kpy[b + 2] = kpy[b + 1] + L * d2y
                nj[b] = 0
                nj[b + 1] = 1
                jd[b + 1, 0] = i1
                jx[b + 1, 0] = L * dd1x
                jy[b + 1, 0] = L * dd1y
                nj[b + 2] = 2
                jd[b + 2, 0] = i1
                jx[b + 2, 0] = L * (dd1x + dd2x)
                jy[b + 2, 0] = L * (dd1y + dd2y)
                jd[b + 2, 1] = i2
                jx[b + 2, 1] = L * dd2x
                jy[b + 2, 1] = L * dd2y
            for i in range(6):
                rx = kpx[i] - bx
                ry = kpy[i] - by
                vx[i] = hqd[e, 0] - hqd[e, 2] * ry
                vy[i] = hqd[e, 1] + hqd[e, 2] * rx
                for m in range(nj[i]):
                    vx[i] += jx[i, m] * hqd[e, jd[i, m]]
                    vy[i] += jy[i, m] * hqd[e, jd[i, m]]

            cx = oq[e, 0]
            cy = oq[e, 1]
            th = oq[e, 2]
            cs = math.cos(th)
            sn = math.sin(th)
            ovx = oqd[e, 0]
            ovy = oqd[e, 1]
            om = oqd[e, 2]
            fox = 0.0
            foy = 0.0
            tau = 0.0
            nv = nverts[e]
            for i in range(6):
                fx[i] = 0.0
                fy[i] = 0.0
                rx = kpx[i] - cx
                ry = kpy[i] - cy
                pbx = cs * rx + sn * ry
                pby = -sn * rx + cs * ry
                best = -np.inf
                jb = 0
                for v in range(nv):
                    d = pbx * normals[e, v, 0] + pby * normals[e, v, 1] - offs[e, v]
                    if d > best:
                        best = d
                        jb = v
                if best < 0.0:
                    depth = -best
                    nbx = normals[e, jb, 0]
                    nby = normals[e, jb, 1]
                    nx = cs * nbx - sn * nby
                    ny = sn * nbx + cs * nby
                    tx = -ny
                    ty = nx
                    rvx = vx[i] - (ovx - om * ry)
                    rvy = vy[i] - (ovy + om * rx)
                    vn = rvx * nx + rvy * ny
                    vt = rvx * tx + rvy * ty
                    fn = k * depth + cn * max(0.0, -vn)
                    if anchor_on[e, i]:
                        abx = anchor[e, i, 0]
                        aby = anchor[e, i, 1]
                    else:
                        abx = pbx
                        aby = pby
                    awx = cx + cs * abx - sn * aby
                    awy = cy + sn * abx + cs * aby
                    dt_ = (kpx[i] - awx) * tx + (kpy[i] - awy) * ty
                    ftr = -kt * dt_ - cn * vt
                    lim = mu * fn
                    if abs(ftr) > lim:
                        ft = lim if ftr > 0 else -lim
                        sx = kpx[i] + (ft / kt) * tx - cx
                        sy = kpy[i] + (ft / kt) * ty - cy
                        abx = cs * sx + sn * sy
                        aby = -sn * sx + cs * sy
                    else:
                        ft = ftr
                    anchor[e, i, 0] = abx
                    anchor[e, i, 1] = aby
                    anchor_on[e, i] = True
                    fx[i] = fn * nx + ft * tx
                    fy[i] = fn * ny + ft * ty
                    fox -= fx[i]
                    foy -= fy[i]
                    tau -= rx * fy[i] - ry * fx[i]
                else:
                    anchor[e, i, 0] = 0.0
                    anchor[e, i, 1] = 0.0
                    anchor_on[e, i] = False
            for v in range(nv):
                rvx_ = cs * verts[e, v, 0] - sn * verts[e, v, 1]
                rvy_ = sn * verts[e, v, 0] + cs * verts[e, v, 1]
                wy = cy + rvy_
                if wy < 0.0:
                    vvx = ovx - om * rvy_
                    vvy = ovy + om * rvx_
                    fn = -k * wy + cn * max(0.0, -vvy)
                    ft = -ct * vvx
                    if ft > mu * fn:
                        ft = mu * fn
                    elif ft < -mu * fn:
                        ft = -mu * fn
                    fox += ft
                    foy += fn
                    tau += rvx_ * fn - rvy_ * ft
            for i in range(6):
                if kpy[i] < 0.0:
                    fn = -k * kpy[i] + cn * max(0.0, -vy[i])
                    ft = -ct * vx[i]
                    if ft > mu * fn:
                        ft = mu * fn
                    elif ft < -mu * fn:
                        ft = -mu * fn
                    fx[i] += ft
                    fy[i] += fn
            # generalized hand forces
            g0 = 0.0
            g1 = 0.0
            g2 = 0.0
            gf = np.zeros(7)
            for i in range(6):
                g0 += fx[i]
                g1 += fy[i]
                g2 += (kpx[i] - bx) * fy[i] - (kpy[i] - by) * fx[i]
                for m in range(nj[i]):
                    gf[jd[i, m]] += jx[i, m] * fx[i] + jy[i, m] * fy[i]
            gf[0] = g0
            gf[1] = g1
            gf[2] = g2
            for j in range(7):
                err = target[e, j] - hq[e, j]
                if j == 2:
                    err = _wrap(err)
                acc = prm[P_KP + j] * err - prm[P_KD + j] * hqd[e, j] + gf[j]
                hqd[e, j] += h * acc
                hq[e, j] += h * hqd[e, j]
            hq[e, 2] = _wrap(hq[e, 2])
            for j in range(3, 7):
                if hq[e, j] > lim_f:
                    hq[e, j] = lim_f
                    hqd[e, j] = 0.0
                elif hq[e, j] < -lim_f:
                    hq[e, j] = -lim_f
                    hqd[e, j] = 0.0
            foy -= mass[e] * grav
            oqd[e, 0] += h * fox / mass[e]
            oqd[e, 1] += h * foy / mass[e]
            oqd[e, 2] += h * tau / inertia[e]
            oq[e, 0] += h * oqd[e, 0]
            oq[e, 1] += h * oqd[e, 1]
            oq[e, 2] = _wrap(oq[e, 2] + h * oqd[e, 2])
