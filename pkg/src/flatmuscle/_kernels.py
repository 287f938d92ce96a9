"""Compiled plant integrator.

Mirrors :func:`flatmuscle.skeleton.step` operation for operation so that
many substeps can run without returning to Python.  The numpy version in
``skeleton`` is the reference; tests check the two agree to round-off.
"""

import numba
import numpy as np

OK, NONFINITE, JOINT_LIMIT = 0, 1, 2


class PackedModel:
    """Flat arrays of a :class:`~flatmuscle.skeleton.PlantModel` for the kernel."""

    def __init__(self, model):
        n = model.n
        self.jrev = np.array([1 if j.revolute else 0 for j in model.joints], dtype=np.int64)
        self.axis = np.array([j.axis for j in model.joints], dtype=float)
        self.origin = np.array([j.origin for j in model.joints], dtype=float)
        self.lower = model.lower.copy()
        self.upper = model.upper.copy()
        self.mass = model.mass.astype(float)
        self.com = model.com.astype(float)
        self.inertia = model.inertia.astype(float)
        self.gravity = model.gravity.astype(float)
        self.via_link = model._via_link.astype(np.int64)
        self.via_local = model._via_local.astype(float)
        self.seg_a = model._seg_a.astype(np.int64)
        self.seg_b = model._seg_b.astype(np.int64)
        self.seg_m = np.argmax(model._seg_to_muscle, axis=0).astype(np.int64)
        h = model.hill
        m = model.m
        # columns: f_max l_opt l_max fl_width fv_shape fv_ceiling fp_stiffness vmax tau_act tau_deact
        self.hill = np.stack([np.broadcast_to(np.asarray(getattr(h, k), dtype=float), (m,))
                              for k in ("f_max", "l_opt", "l_max", "fl_width", "fv_shape",
                                        "fv_ceiling", "fp_stiffness", "vmax", "tau_act",
                                        "tau_deact")], axis=1).copy()
        self.dd_joint = np.array([d.joint for d in model.direct_drives], dtype=np.int64)
        self.dd = np.array([[d.force_limit, d.kp, d.kd] for d in model.direct_drives],
                           dtype=float).reshape(-1, 3)
        self.n = n
        self.m = m

    def args(self):
        return (self.jrev, self.axis, self.origin, self.lower, self.upper, self.mass, self.com,
                self.inertia, self.gravity, self.via_link, self.via_local, self.seg_a,
                self.seg_b, self.seg_m, self.hill, self.dd_joint, self.dd)


@numba.njit(cache=True)
def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


@numba.njit(cache=True)
def _rot(axis, angle):
    x, y, z = axis[0], axis[1], axis[2]
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    R = np.empty((3, 3))
    R[0, 0] = c + x * x * C
    R[0, 1] = x * y * C - z * s
    R[0, 2] = x * z * C + y * s
    R[1, 0] = y * x * C + z * s
    R[1, 1] = c + y * y * C
    R[1, 2] = y * z * C - x * s
    R[2, 0] = z * x * C - y * s
    R[2, 1] = z * y * C + x * s
    R[2, 2] = c + z * z * C
    return R


@numba.njit(cache=True)
def _frames(q, jrev, axis, origin):
    n = q.shape[0]
    R = np.empty((n, 3, 3))
    f = np.empty((n, 3))
    o = np.empty((n, 3))
    z = np.empty((n, 3))
    Rp = np.eye(3)
    fp = np.zeros(3)
    for i in range(n):
        o[i] = fp + Rp @ origin[i]
        z[i] = Rp @ axis[i]
        if jrev[i] == 1:
            R[i] = Rp @ _rot(axis[i], q[i])
            f[i] = o[i]
        else:
            R[i] = Rp
            f[i] = o[i] + z[i] * q[i]
        Rp = R[i].copy()
        fp = f[i].copy()
    return R, f, o, z


@numba.njit(cache=True)
def _point_jac(p, link, jrev, o, z):
    n = o.shape[0]
    J = np.zeros((3, n))
    for j in range(link + 1):
        if jrev[j] == 1:
            c = _cross(z[j], p - o[j])
            J[0, j] = c[0]
            J[1, j] = c[1]
            J[2, j] = c[2]
        else:
            J[0, j] = z[j, 0]
            J[1, j] = z[j, 1]
            J[2, j] = z[j, 2]
    return J


@numba.njit(cache=True)
def _muscles(R, f, o, z, jrev, via_link, via_local, seg_a, seg_b, seg_m, m):
    P = via_link.shape[0]
    n = o.shape[0]
    pts = np.empty((P, 3))
    for p in range(P):
        k = via_link[p]
        if k >= 0:
            pts[p] = f[k] + R[k] @ via_local[p]
        else:
            pts[p] = via_local[p]
    lengths = np.zeros(m)
    J = np.zeros((m, n))
    for s in range(seg_a.shape[0]):
        a = seg_a[s]
        b = seg_b[s]
        e = pts[b] - pts[a]
        L = np.sqrt(e[0] * e[0] + e[1] * e[1] + e[2] * e[2])
        mu = seg_m[s]
        lengths[mu] += L
        u = e / L
        Jb = _point_jac(pts[b], via_link[b], jrev, o, z)
        Ja = _point_jac(pts[a], via_link[a], jrev, o, z)
        J[mu] += u @ (Jb - Ja)
    return lengths, J


@numba.njit(cache=True)
def _mass_matrix(R, f, o, z, jrev, mass, com, inertia):
    n = o.shape[0]
    M = np.zeros((n, n))
    for k in range(n):
        c = f[k] + R[k] @ com[k]
        Jv = _point_jac(c, k, jrev, o, z)
        Jw = np.zeros((3, n))
        for j in range(k + 1):
            if jrev[j] == 1:
                Jw[:, j] = z[j]
        Iw = R[k] @ inertia[k] @ R[k].T
        M += mass[k] * (Jv.T @ Jv) + Jw.T @ Iw @ Jw
    return 0.5 * (M + M.T)


@numba.njit(cache=True)
def _rnea(q, qd, qdd, g, R, f, o, z, jrev, mass, com, inertia):
    n = q.shape[0]
    w = np.zeros(3)
    wd = np.zeros(3)
    a = -g
    fprev = np.zeros(3)
    F = np.empty((n, 3))
    N = np.empty((n, 3))
    c = np.empty((n, 3))
    for i in range(n):
        c[i] = f[i] + R[i] @ com[i]
        zi = z[i]
        r = o[i] - fprev
        a_o = a + _cross(wd, r) + _cross(w, _cross(w, r))
        if jrev[i] == 1:
            wd = wd + zi * qdd[i] + _cross(w, zi * qd[i])
            w = w + zi * qd[i]
            a = a_o
        else:
            dvec = zi * q[i]
            a = (a_o + _cross(wd, dvec) + _cross(w, _cross(w, dvec))
                 + 2.0 * _cross(w, zi * qd[i]) + zi * qdd[i])
        rc = c[i] - f[i]
        a_c = a + _cross(wd, rc) + _cross(w, _cross(w, rc))
        Iw = R[i] @ inertia[i] @ R[i].T
        F[i] = mass[i] * a_c
        N[i] = Iw @ wd + _cross(w, Iw @ w)
        fprev = f[i]
    tau = np.empty(n)
    f_child = np.zeros(3)
    n_child = np.zeros(3)
    p_child = np.zeros(3)
    for i in range(n - 1, -1, -1):
        fi = F[i] + f_child
        ni = N[i] + n_child + _cross(p_child - f[i], f_child) + _cross(c[i] - f[i], F[i])
        if jrev[i] == 1:
            tau[i] = z[i] @ ni
        else:
            tau[i] = z[i] @ fi
        f_child = fi
        n_child = ni
        p_child = f[i]
    return tau


@numba.njit(cache=True)
def _tension(act, l, ld, hp):
    m = act.shape[0]
    T = np.empty(m)
    for i in range(m):
        f_max, l_opt, l_max, w, k, ceil, kp, vmax = (hp[i, 0], hp[i, 1], hp[i, 2], hp[i, 3],
                                                     hp[i, 4], hp[i, 5], hp[i, 6], hp[i, 7])
        x = (l[i] / l_opt - 1.0) / w
        fl = np.exp(-x * x)
        v = abs(ld[i]) / (vmax * l_opt)
        hyp = (1.0 - v) / (1.0 + v / k)
        if ld[i] < 0:
            fv = hyp
        else:
            fv = ceil - (ceil - 1.0) * hyp
        fv = min(max(fv, 0.05), ceil)
        xp = max(l[i] - l_opt, 0.0) / (l_max - l_opt)
        T[i] = act[i] * f_max * fl * fv + f_max * kp * xp * xp
    return T


@numba.njit(cache=True)
def _act_rate(act, u, hp):
    m = act.shape[0]
    r = np.empty(m)
    for i in range(m):
        s = 0.5 + 1.5 * act[i]
        if u[i] - act[i] > 0:
            tau = hp[i, 8] * s
        else:
            tau = hp[i, 9] / s
        r[i] = (u[i] - act[i]) / tau
    return r


@numba.njit(cache=True)
def advance(q, qd, act, u, tau_ext, dd_q, dd_qd, dd_ff, dt, nsub,
            jrev, axis, origin, lower, upper, mass, com, inertia, gravity, via_link, via_local,
            seg_a, seg_b, seg_m, hp, dd_joint, dd):
    """Run ``nsub`` plant steps; returns (q, qd, act, status, steps_done, bad_joint)."""
    n = q.shape[0]
    m = act.shape[0]
    q = q.copy()
    qd = qd.copy()
    act = act.copy()
    zero = np.zeros(n)
    for it in range(nsub):
        R, f, o, z = _frames(q, jrev, axis, origin)
        l, J = _muscles(R, f, o, z, jrev, via_link, via_local, seg_a, seg_b, seg_m, m)
        ld = J @ qd
        T = _tension(act, l, ld, hp)
        tau = -(J.T @ T) + tau_ext
        for k in range(dd_joint.shape[0]):
            j = dd_joint[k]
            fk = dd_ff[k] + dd[k, 1] * (dd_q[k] - q[j]) + dd[k, 2] * (dd_qd[k] - qd[j])
            tau[j] += min(max(fk, -dd[k, 0]), dd[k, 0])
        M = _mass_matrix(R, f, o, z, jrev, mass, com, inertia)
        h = _rnea(q, qd, zero, gravity, R, f, o, z, jrev, mass, com, inertia)
        qdd = np.linalg.solve(M, tau - h)
        qd = qd + dt * qdd
        q = q + dt * qd
        k1 = _act_rate(act, u, hp)
        k2 = _act_rate(act + 0.5 * dt * k1, u, hp)
        k3 = _act_rate(act + 0.5 * dt * k2, u, hp)
        k4 = _act_rate(act + dt * k3, u, hp)
        act = act + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        for i in range(m):
            act[i] = min(max(act[i], 0.0), 1.0)
        for i in range(n):
            if not (np.isfinite(q[i]) and np.isfinite(qd[i])):
                return q, qd, act, NONFINITE, it + 1, i
        for i in range(m):
            if not np.isfinite(act[i]):
                return q, qd, act, NONFINITE, it + 1, -1
        for i in range(n):
            if q[i] < lower[i] or q[i] > upper[i]:
                return q, qd, act, JOINT_LIMIT, it + 1, i
    return q, qd, act, OK, nsub, -1


@numba.njit(cache=True)
def control_terms(q, qd, qdd, jrev, axis, origin, mass, com, inertia, gravity, via_link,
                  via_local, seg_a, seg_b, seg_m, m):
    """Inverse-dynamics torque, muscle lengths and muscle Jacobian at ``(q, qd, qdd)``."""
    R, f, o, z = _frames(q, jrev, axis, origin)
    l, J = _muscles(R, f, o, z, jrev, via_link, via_local, seg_a, seg_b, seg_m, m)
    tau = _rnea(q, qd, qdd, gravity, R, f, o, z, jrev, mass, com, inertia)
    return tau, l, J


@numba.njit(cache=True)
def ee_pose(q, qd, link, point, jrev, axis, origin):
    """End-effector point position, velocity and link rotation."""
    R, f, o, z = _frames(q, jrev, axis, origin)
    p = f[link] + R[link] @ point
    J = _point_jac(p, link, jrev, o, z)
    return p, J @ qd, R[link].copy()


@numba.njit(cache=True)
def hill_terms(l, ld, hp):
    """Passive tension and active gain ``f_max F_L F_V`` per muscle."""
    m = l.shape[0]
    fp = np.empty(m)
    gain = np.empty(m)
    for i in range(m):
        f_max, l_opt, l_max, w, k, ceil, kp, vmax = (hp[i, 0], hp[i, 1], hp[i, 2], hp[i, 3],
                                                     hp[i, 4], hp[i, 5], hp[i, 6], hp[i, 7])
        x = (l[i] / l_opt - 1.0) / w
        v = abs(ld[i]) / (vmax * l_opt)
        hyp = (1.0 - v) / (1.0 + v / k)
        fv = hyp if ld[i] < 0 else ceil - (ceil - 1.0) * hyp
        fv = min(max(fv, 0.05), ceil)
        xp = max(l[i] - l_opt, 0.0) / (l_max - l_opt)
        gain[i] = f_max * np.exp(-x * x) * fv
        fp[i] = f_max * kp * xp * xp
    return fp, gain


@numba.njit(cache=True)
def kmac_solve(c, b, Jm, tau, lo, top, f_max, d, max_iter, tol):
    """Damped semismooth Newton solve of ``-Jm^T T(d) = tau`` (see ``kmac_inverse``)."""
    m, k = Jm.shape

    def resid(d):
        raw = c * (b - Jm @ d)
        T = np.empty(m)
        active = np.empty(m, dtype=np.bool_)
        for i in range(m):
            T[i] = min(max(min(max(raw[i], 0.0), f_max[i]), lo[i]), top[i])
            active[i] = raw[i] > lo[i] and raw[i] < top[i]
        return -(Jm.T @ T) - tau, active

    d = d.copy()
    r, active = resid(d)
    nr = np.max(np.abs(r))
    reg = 1e-9 * (np.max(np.abs(c)) * np.max(np.abs(Jm)) ** 2 + 1.0)
    for _ in range(max_iter):
        if nr < tol:
            break
        w = np.empty(m)
        for i in range(m):
            w[i] = c[i] if active[i] else 1e-3 * c[i]
        H = Jm.T @ (w[:, None] * Jm) + reg * np.eye(k)
        step = -np.linalg.solve(H, r)
        s = 1.0
        accepted = False
        while s > 1e-6:
            r_new, act_new = resid(d + s * step)
            n_new = np.max(np.abs(r_new))
            if n_new < nr:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            break
        d, r, active, nr = d + s * step, r_new, act_new, n_new
    return d, nr


@numba.njit(cache=True)
def muscle_lengths(q, jrev, axis, origin, via_link, via_local, seg_a, seg_b, seg_m, m):
    R, f, o, z = _frames(q, jrev, axis, origin)
    return _muscles(R, f, o, z, jrev, via_link, via_local, seg_a, seg_b, seg_m, m)[0]
