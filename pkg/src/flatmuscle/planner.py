"""Ball flight prediction and racket command planning.

World frame: ``x`` points at the opponent, ``y`` is lateral and ``z`` up with
the table surface at ``z = 0``.  The table is centred on the origin, so each
player's half is one sign of ``x``.  The ball is a point without spin or drag;
it bounces only where it meets the table surface.

A command is planned in three steps.  The incoming flight is propagated to a
fixed hitting plane ``x = plane_x``; an outgoing velocity is sampled that
lands the ball in a target box on the opponent's half; and the impact law is
inverted for the racket velocity and face normal that turn one into the
other.
"""

from dataclasses import dataclass, field, replace

import numpy as np

#: Racket face normal in the racket frame.
N0 = np.array([1.0, 0.0, 0.0])

DEAD_APEX = 1e-3
STRIKE_WINDOW = 3.0
MAX_RESAMPLE = 100


class PlannerError(RuntimeError):
    """Base class of planning failures."""


class DeadBall(PlannerError):
    """Raised when a bounce leaves the ball with an apex below 1 mm."""


class NoIntersection(PlannerError):
    """The ball does not reach the hitting plane in a legal way."""


class SamplingExhausted(PlannerError):
    """No sampled return cleared the net within the retry budget."""


class DegenerateImpact(PlannerError):
    """Incoming and outgoing velocities coincide."""


@dataclass
class BallState:
    p: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).copy()
        self.v = np.asarray(self.v, dtype=float).copy()
        self.t = float(self.t)

    def copy(self):
        return BallState(self.p, self.v, self.t)


@dataclass(frozen=True)
class TableGeometry:
    """Table dimensions (m), restitution and gravity (m/s^2)."""

    length: float = 2.74
    width: float = 1.525
    net_height: float = 0.1525
    net_x: float = 0.0
    c_h: float = 0.9
    c_v: float = 0.9
    g: float = 9.81

    def __post_init__(self):
        if not (0 < self.c_v <= 1 and 0 < self.c_h <= 1):
            raise ValueError("restitution coefficients must lie in (0, 1]")
        if not self.net_height > 0:
            raise ValueError("net_height must be positive")
        if not (self.length > 0 and self.width > 0 and self.g > 0):
            raise ValueError("length, width and g must be positive")

    @property
    def restitution(self):
        return np.array([self.c_h, self.c_h, -self.c_v])

    def on_table(self, x, y):
        """Inclusive test of a point against the table outline."""
        return abs(x) <= 0.5 * self.length and abs(y) <= 0.5 * self.width

    def opponent_half(self, x, y):
        """Inclusive test against the half beyond the net."""
        return self.on_table(x, y) and x >= self.net_x


@dataclass(frozen=True)
class PlannerConfig:
    """Hitting plane, return sampling ranges and racket restitution.

    ``crossing_box`` optionally bounds where the return crosses the
    opponent's hitting plane, ``(y_lower, y_upper, z_lower, z_upper)`` in the
    opponent's frame; returns that miss it are resampled.
    """

    plane_x: float = -1.55
    vz_range: tuple = (1.0, 2.0)
    x_lower: float = 0.4
    x_upper: float = 1.0
    y_lower: float = -0.4
    y_upper: float = 0.4
    c_r: float = 0.85
    crossing_box: tuple = None

    def __post_init__(self):
        if not (self.x_lower <= self.x_upper and self.y_lower <= self.y_upper):
            raise ValueError("target box bounds must be ordered")
        if not self.vz_range[0] <= self.vz_range[1]:
            raise ValueError("vz_range must be non-empty")
        if not 0 < self.c_r <= 1:
            raise ValueError("c_r must lie in (0, 1]")


@dataclass
class StrikePrediction:
    p: np.ndarray
    t: float
    v_in: np.ndarray
    bounces: int


@dataclass
class PlannerCommand:
    """Racket target ``(p_hat, v_hat, o_hat)`` plus the plan behind it."""

    p_hat: np.ndarray
    v_hat: np.ndarray
    o_hat: np.ndarray
    t_strike: float
    v_in: np.ndarray = field(default=None)
    v_out: np.ndarray = field(default=None)
    normal: np.ndarray = field(default=None)

    def to_dict(self):
        return {k: (np.asarray(v).tolist() if isinstance(v, np.ndarray) else v)
                for k, v in self.__dict__.items()}


def _ballistic(p, v, g, t):
    a = np.array([0.0, 0.0, -g])
    return p + v * t + 0.5 * a * t * t, v + a * t


def _time_to_surface(pz, vz, g):
    """Time until ``z`` returns to 0, or ``None`` when already below."""
    if pz < 0:
        return None
    disc = vz * vz + 2 * g * pz
    return (vz + np.sqrt(disc)) / g


def _bounce(p, v, table):
    v = table.restitution * v
    if v[2] * v[2] / (2 * table.g) < DEAD_APEX:
        raise DeadBall(f"bounce at ({p[0]:.3f}, {p[1]:.3f}) leaves apex below 1 mm")
    return np.array([p[0], p[1], 0.0]), v


def _flight_segments(ball, table, horizon):
    """Yield ``(t0, p0, v0, duration, ends_in_bounce)`` flight arcs from ``ball``.

    An arc ends in a bounce when it meets the table surface inside the
    outline.  Arcs that miss the table continue below ``z = 0``.
    """
    p, v, t = ball.p.copy(), ball.v.copy(), 0.0
    while True:
        tb = _time_to_surface(p[2], v[2], table.g)
        if tb is None or t + tb > horizon:
            yield t, p, v, horizon - t, False
            return
        p_hit, v_hit = _ballistic(p, v, table.g, tb)
        if not table.on_table(p_hit[0], p_hit[1]):
            yield t, p, v, horizon - t, False
            return
        yield t, p, v, tb, True
        p, v = _bounce(p_hit, v_hit, table)
        t += tb


def propagate_events(ball, dt, table):
    """:func:`propagate` that also returns the bounces as ``(t, p)`` pairs."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    bounces = []
    for t0, p, v, dur, bounce in _flight_segments(ball, table, dt):
        if not bounce:
            p, v = _ballistic(p, v, table.g, dur)
            return BallState(p, v, ball.t + dt), bounces
        q = _ballistic(p, v, table.g, dur)[0]
        bounces.append((ball.t + t0 + dur, np.array([q[0], q[1], 0.0])))
    raise AssertionError("unreachable")


def propagate(ball, dt, table):
    """Ball state after ``dt`` seconds of exact flight with table bounces."""
    return propagate_events(ball, dt, table)[0]


def predict_strike(ball, cfg, table, window=STRIKE_WINDOW):
    """First crossing of the hitting plane after at most one bounce.

    The crossing time inside a flight arc is linear in ``x`` and found in
    closed form.
    """
    dx = cfg.plane_x - ball.p[0]
    if ball.v[0] == 0 or dx == 0 or np.sign(dx) != np.sign(ball.v[0]):
        raise NoIntersection("ball is not moving towards the hitting plane")
    bounces = 0
    try:
        for t0, p, v, dur, bounce in _flight_segments(ball, table, window):
            tx = (cfg.plane_x - p[0]) / v[0]
            if 0 <= tx <= dur:
                q, vq = _ballistic(p, v, table.g, tx)
                if q[2] < 0:
                    raise NoIntersection("ball crosses the plane below the table surface")
                q[0] = cfg.plane_x
                return StrikePrediction(q, ball.t + t0 + tx, vq, bounces)
            if bounce:
                bounces += 1
                if bounces > 1:
                    raise NoIntersection("second bounce before the hitting plane")
    except DeadBall as exc:
        raise NoIntersection(str(exc)) from exc
    raise NoIntersection(f"no crossing within {window} s")


def flight_time(vz, z0, g):
    """Time for a ball launched upward at ``vz`` from height ``z0`` to reach ``z = 0``."""
    return (vz + np.sqrt(vz * vz + 2 * g * z0)) / g


def _clears_net(p, v, table):
    if v[0] == 0:
        return False
    tn = (table.net_x - p[0]) / v[0]
    if tn <= 0:
        return False
    zn = p[2] + v[2] * tn - 0.5 * table.g * tn * tn
    return zn > table.net_height


def return_crossing(p, v, table, plane_x):
    """Where a return launched at ``(p, v)`` crosses the opponent's plane.

    ``plane_x`` is given in the opponent's own frame (a half turn about the
    vertical), so the crossing is at world ``x = -plane_x``.  Returns the
    crossing point in the opponent's frame, or ``None``.
    """
    cfg = PlannerConfig(plane_x=-plane_x)
    try:
        s = predict_strike(BallState(p, v), cfg, table)
    except NoIntersection:
        return None
    if s.bounces != 1:
        return None
    return np.array([-s.p[0], -s.p[1], s.p[2]])


def sample_return(strike_p, cfg, table, rng):
    """Outgoing ball velocity landing in the target box and clearing the net."""
    strike_p = np.asarray(strike_p, dtype=float)
    x, y, z = strike_p
    for _ in range(MAX_RESAMPLE):
        vz = rng.uniform(*cfg.vz_range)
        t = flight_time(vz, z, table.g)
        vx = rng.uniform((cfg.x_lower - x) / t, (cfg.x_upper - x) / t)
        vy = rng.uniform((cfg.y_lower - y) / t, (cfg.y_upper - y) / t)
        v = np.array([vx, vy, vz])
        if not _clears_net(strike_p, v, table):
            continue
        if cfg.crossing_box is not None:
            c = return_crossing(strike_p, v, table, cfg.plane_x)
            ylo, yhi, zlo, zhi = cfg.crossing_box
            if c is None or not (ylo <= c[1] <= yhi and zlo <= c[2] <= zhi):
                continue
        return v
    raise SamplingExhausted(f"no valid return after {MAX_RESAMPLE} samples")


def restitute(v_ball, v_racket, normal, c_r):
    """Frictionless impact: normal relative velocity scaled by ``-c_r``."""
    rel = np.dot(v_ball - v_racket, normal)
    return v_ball - (1.0 + c_r) * rel * normal


def racket_impact(v_i, v_o, c_r):
    """Racket velocity and unit normal that turn ``v_i`` into ``v_o``.

    Returns ``(v_hat, u)`` with ``v_hat`` parallel to ``u``.
    """
    v_i = np.asarray(v_i, dtype=float)
    v_o = np.asarray(v_o, dtype=float)
    d = v_o - v_i
    nd = np.linalg.norm(d)
    if nd < 1e-9:
        raise DegenerateImpact("outgoing velocity equals incoming velocity")
    u = d / nd
    return (np.dot(v_o, u) + c_r * np.dot(v_i, u)) / (1.0 + c_r) * u, u


def normal_to_quaternion(u):
    """Unit quaternion ``(w, x, y, z)`` rotating ``N0`` onto ``u`` by the shortest arc.

    The antiparallel case is a half turn about the world ``z`` axis.
    """
    u = np.asarray(u, dtype=float)
    if abs(np.linalg.norm(u) - 1.0) > 1e-9:
        raise ValueError("u must be a unit vector")
    w = 1.0 + np.dot(N0, u)
    if w < 1e-12:
        return np.array([0.0, 0.0, 0.0, 1.0])
    q = np.r_[w, np.cross(N0, u)]
    return q / np.linalg.norm(q)


def quat_rotate(q, v):
    """Rotate ``v`` by the unit quaternion ``q = (w, x, y, z)``."""
    w, r = q[0], np.asarray(q[1:])
    v = np.asarray(v, dtype=float)
    t = 2.0 * np.cross(r, v)
    return v + w * t + np.cross(r, t)


def plan(ball, cfg, table, rng):
    """Racket command returning ``ball`` into the target box."""
    s = predict_strike(ball, cfg, table)
    v_out = sample_return(s.p, cfg, table, rng)
    v_hat, u = racket_impact(s.v_in, v_out, cfg.c_r)
    return PlannerCommand(s.p, v_hat, normal_to_quaternion(u), s.t, s.v_in, v_out, u)


def mirrored(ball):
    """``ball`` seen from the other end of the table (half turn about ``z``)."""
    flip = np.array([-1.0, -1.0, 1.0])
    return replace(ball, p=ball.p * flip, v=ball.v * flip)
