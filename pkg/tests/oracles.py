"""Independent reference computations used by the tests.

Nothing here imports the functions under test; each oracle is written from
the model definitions by hand.
"""

import numpy as np

G = 9.81

# PEND1 geometry: hinge about +y at the origin, insertion 0.0625 m down the
# rod, world anchors at (-+0.4, 0, 0.2375).
PEND1_INSERT = 0.0625
PEND1_ANCHORS = {"flexor": (-0.4, 0.2375), "extensor": (0.4, 0.2375)}
PEND1_HILL = dict(f_max=200.0, l_min=0.3, l_opt=0.5, l_max=0.7)


def pend1_length(q, which):
    ax, az = PEND1_ANCHORS[which]
    # rotation about +y maps (0, 0, -d) to (-d sin q, 0, -d cos q)
    px, pz = -PEND1_INSERT * np.sin(q), -PEND1_INSERT * np.cos(q)
    return np.hypot(px - ax, pz - az)


def pend1_moment(q, which, h=1e-6):
    return (pend1_length(q + h, which) - pend1_length(q - h, which)) / (2 * h)


def gaussian_fl(l, l_opt, width):
    return np.exp(-(((l / l_opt) - 1.0) / width) ** 2)


def pend1_static_hold(q, fl_width, cocontraction_free=True):
    """Excitations holding PEND1 still at ``q`` with the least-norm tensions.

    Gravity torque m g l_c sin q must be supplied as -J^T T; with the 1 x 2
    matrix A = -J^T the least-norm solution is A^T tau / (A A^T).
    """
    tau = 1.0 * G * 0.5 * np.sin(q)
    A = -np.array([pend1_moment(q, "flexor"), pend1_moment(q, "extensor")])
    T = A * tau / (A @ A)
    lengths = np.array([pend1_length(q, "flexor"), pend1_length(q, "extensor")])
    p = PEND1_HILL
    fp = np.where(lengths > p["l_opt"],
                  p["f_max"] * ((lengths - p["l_opt"]) / (p["l_max"] - p["l_opt"])) ** 2, 0.0)
    gain = p["f_max"] * gaussian_fl(lengths, p["l_opt"], fl_width)
    return (T - fp) / gain, T


def fine_flight(p, v, dt, t_max, stop, c_h=0.9, c_v=0.9, half_length=1.37, half_width=0.7625):
    """Constant-acceleration stepping with bounces detected by sign change.

    Plain floats throughout so a 1e-6 s step stays affordable.  ``stop(p_prev,
    p)`` ends the flight and the last two states ``(t, p, v)`` are returned
    so callers can interpolate; ``None`` when ``t_max`` passes first.
    """
    x, y, z = map(float, p)
    vx, vy, vz = map(float, v)
    n = 0
    while n * dt < t_max:
        nx, ny, nz = x + vx * dt, y + vy * dt, z + vz * dt - 0.5 * G * dt * dt
        nvz = vz - G * dt
        nvx, nvy = vx, vy
        if nz < 0 <= z and abs(nx) <= half_length and abs(ny) <= half_width:
            # exact sub-step to the surface, then reflect
            s = (vz + (vz * vz + 2 * G * z) ** 0.5) / G
            bx, by = x + vx * s, y + vy * s
            nvx, nvy, wz = c_h * vx, c_h * vy, -c_v * (vz - G * s)
            r = dt - s
            nx, ny, nz = bx + nvx * r, by + nvy * r, wz * r - 0.5 * G * r * r
            nvz = wz - G * r
        if stop((x, y, z), (nx, ny, nz)):
            return ((n * dt, (x, y, z), (vx, vy, vz)),
                    ((n + 1) * dt, (nx, ny, nz), (nvx, nvy, nvz)))
        x, y, z, vx, vy, vz = nx, ny, nz, nvx, nvy, nvz
        n += 1
    return None


def fine_plane_crossing(p, v, plane_x, dt=1e-6, t_max=3.0):
    """Crossing of ``x = plane_x`` by fine stepping, linearly interpolated."""
    sign = np.sign(plane_x - p[0])
    hit = fine_flight(p, v, dt, t_max, lambda a, b: sign * (b[0] - plane_x) >= 0)
    if hit is None:
        return None
    (t0, a, _), (_, b, _) = hit
    f = (plane_x - a[0]) / (b[0] - a[0])
    return t0 + f * dt, np.array([a[i] + f * (b[i] - a[i]) for i in range(3)])
