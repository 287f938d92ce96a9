"""Single-strike and dual-robot rally episodes.

The ball lives in the world frame of :mod:`flatmuscle.planner`.  Robot A
stands behind the ``x < 0`` end; in dual mode robot B is the same plant
turned half a turn about the vertical, so everything B sees (ball, command,
crossing points) is expressed in its own frame with :func:`planner.mirrored`.

Each control tick the controllers produce K-MAC targets, the plants are
advanced with excitations held, and the ball is advanced exactly with the
racket faces swept linearly across the tick for contact.
"""

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from . import controller as ctl
from . import planner, plants, skeleton
from .kmac import Kmac, KmacGains
from .planner import BallState, PlannerConfig, TableGeometry

RACKET_RADIUS = 0.085
#: Half-thickness of the slab in which the instantaneous contact test fires.
CONTACT_SLAB = 0.02
MISS_MARGIN = 0.3
FLOOR_Z = -0.2
NET_POST = 0.1525
_FLIP = np.array([-1.0, -1.0, 1.0])


class ScenarioError(ValueError):
    """Malformed scenario; the message names the offending field."""


class EpisodeFault(RuntimeError):
    """A plant fault that ended an episode; logged, never raised to callers."""


class EmptyInput(ValueError):
    pass


# ---------------------------------------------------------------- scenario


@dataclass(frozen=True)
class ServeConfig:
    """Serve distribution in the receiver's frame.

    ``kind = "box"`` draws the launch velocity from the velocity box.
    ``kind = "heuristic"`` draws a bounce ``x`` and a crossing point of the
    receiver's hitting plane inside ``crossing_box`` and solves for the
    launch velocity; solutions outside the velocity box are redrawn.
    """

    kind: str = "heuristic"
    position_lo: tuple = (1.45, -0.2, 0.25)
    position_hi: tuple = (1.55, 0.2, 0.35)
    velocity_lo: tuple = (-8.0, -2.0, -3.0)
    velocity_hi: tuple = (-2.0, 2.0, 3.0)
    bounce_x: tuple = (-0.9, -0.6)
    crossing_box: tuple = (-0.25, 0.25, 0.25, 0.4)

    def __post_init__(self):
        if self.kind not in ("box", "heuristic"):
            raise ValueError("kind must be 'box' or 'heuristic'")
        for lo, hi, name in ((self.position_lo, self.position_hi, "position"),
                             (self.velocity_lo, self.velocity_hi, "velocity")):
            if len(lo) != 3 or len(hi) != 3:
                raise ValueError(f"{name} box bounds need three entries")
            if any(a > b for a, b in zip(lo, hi)):
                raise ValueError(f"{name} box is empty")
        ylo, yhi, zlo, zhi = self.crossing_box
        if not (ylo <= yhi and zlo <= zhi and self.bounce_x[0] <= self.bounce_x[1]):
            raise ValueError("bounce_x and crossing_box must be non-empty")


@dataclass(frozen=True)
class RewardWeights:
    w_g: float = 0.1
    w_c: float = 1.0
    w_s: float = 5.0

    def __post_init__(self):
        if min(self.w_g, self.w_c, self.w_s) < 0:
            raise ValueError("reward weights must be non-negative")


@dataclass(frozen=True)
class Scenario:
    """Everything that defines an episode besides the controllers."""

    plant: str = "arm3d"
    table: TableGeometry = TableGeometry()
    planner: PlannerConfig = PlannerConfig()
    serve: ServeConfig = ServeConfig()
    rewards: RewardWeights = RewardWeights()
    mode: str = "single"
    seed: int = 0
    horizon: float = 2.5
    dt: float = 5e-4
    dt_ctrl: float = 2e-3
    kmac: KmacGains = KmacGains()
    ready: tuple = plants.ARM3D_READY
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if self.mode not in ("single", "dual"):
            raise ValueError("mode must be 'single' or 'dual'")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not 0 < self.dt <= self.dt_ctrl:
            raise ValueError("need 0 < dt <= dt_ctrl")
        n = self.dt_ctrl / self.dt
        if abs(n - round(n)) > 1e-9:
            raise ValueError("dt_ctrl must be an integer multiple of dt")
        box = self.planner.crossing_box
        if self.mode == "dual" and box is not None and tuple(box) != tuple(self.serve.crossing_box):
            raise ValueError("dual mode shares one crossing box: planner.crossing_box "
                             "must equal serve.crossing_box")

    @property
    def nsub(self):
        return int(round(self.dt_ctrl / self.dt))

    def model(self):
        ref = self.plant
        if ref in plants.BUILDERS:
            return skeleton.load_model(ref)
        path = Path(ref)
        if not path.is_absolute():
            path = Path(self.base_dir) / path
        return skeleton.load_model(str(path))

    def planner_config(self):
        """Planner config; dual mode shares the serve's crossing box."""
        if self.mode == "dual":
            return replace(self.planner, crossing_box=tuple(self.serve.crossing_box))
        return self.planner

    def to_dict(self):
        d = {"plant": self.plant, "mode": self.mode, "seed": self.seed, "horizon": self.horizon,
             "dt": self.dt, "dt_ctrl": self.dt_ctrl, "ready": list(self.ready)}
        for key in ("table", "planner", "serve", "rewards", "kmac"):
            sub = asdict(getattr(self, key))
            d[key] = {k: list(v) if isinstance(v, tuple) else v for k, v in sub.items()}
        return d


_SECTIONS = {"table": TableGeometry, "planner": PlannerConfig, "serve": ServeConfig,
             "rewards": RewardWeights, "kmac": KmacGains}
_REQUIRED = ("plant", "table", "planner", "serve", "rewards", "mode", "seed", "horizon")


def scenario_from_dict(d, base_dir="."):
    """Build a :class:`Scenario`, raising :class:`ScenarioError` with the field path."""
    if not isinstance(d, dict):
        raise ScenarioError("scenario: expected a JSON object")
    missing = [k for k in _REQUIRED if k not in d]
    if missing:
        raise ScenarioError(f"scenario: missing keys {missing}")
    top = {f.name for f in fields(Scenario)} - {"base_dir"}
    unknown = sorted(set(d) - top)
    if unknown:
        raise ScenarioError(f"scenario: unknown keys {unknown}")
    kw = {}
    for key, value in d.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            if not isinstance(value, dict):
                raise ScenarioError(f"{key}: expected an object")
            names = {f.name for f in fields(cls)}
            bad = sorted(set(value) - names)
            if bad:
                raise ScenarioError(f"{key}: unknown fields {bad}")
            value = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
            try:
                kw[key] = cls(**value)
            except (TypeError, ValueError) as exc:
                raise ScenarioError(f"{key}: {exc}") from exc
        elif key == "ready":
            kw[key] = tuple(float(x) for x in value)
        else:
            kw[key] = value
    if not isinstance(kw["seed"], int) or isinstance(kw["seed"], bool):
        raise ScenarioError("seed: expected an integer")
    if not isinstance(kw["plant"], str):
        raise ScenarioError("plant: expected a model name or file path")
    try:
        sc = Scenario(base_dir=str(base_dir), **kw)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"scenario: {exc}") from exc
    return sc


def load_scenario(path):
    """Read a scenario JSON file; relative plant paths resolve next to it."""
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return scenario_from_dict(d, base_dir=path.parent)


def bundled_scenario(name):
    """Path of a scenario shipped with the package (``single`` or ``dual``)."""
    return Path(__file__).parent / "data" / "scenarios" / f"{name}.json"


# ------------------------------------------------------------------- serve


def heuristic_velocity(p0, bounce_x, cross_y, cross_z, plane_x, table):
    """Launch velocity from ``p0`` that bounces at ``x = bounce_x`` and then
    crosses ``x = plane_x`` at ``(cross_y, cross_z)``; ``None`` if none exists.

    The flight time to the bounce is scanned on [0.15, 1.5] s and the first
    root of the height mismatch at the plane is polished with Brent's method.
    """
    g, ch, cv = table.g, table.c_h, table.c_v
    p0 = np.asarray(p0, dtype=float)

    def mismatch(T1):
        vx = (bounce_x - p0[0]) / T1
        vz0 = (0.5 * g * T1**2 - p0[2]) / T1
        vz_b = -cv * (vz0 - g * T1)
        T2 = (plane_x - bounce_x) / (ch * vx)
        return vz_b * T2 - 0.5 * g * T2**2 - cross_z, vx, vz0, T2

    Ts = np.linspace(0.15, 1.5, 200)
    f = np.array([mismatch(T)[0] for T in Ts])
    idx = np.nonzero(f[:-1] * f[1:] < 0)[0]
    if len(idx) == 0:
        return None
    k = idx[0]
    T1 = brentq(lambda T: mismatch(T)[0], Ts[k], Ts[k + 1], xtol=1e-14)
    _, vx, vz0, T2 = mismatch(T1)
    vy = (cross_y - p0[1]) / (T1 + ch * T2)
    return np.array([vx, vy, vz0])


def sample_serve(serve, table, plane_x, rng):
    """Serve ball state in the receiver's frame."""
    lo, hi = np.array(serve.position_lo), np.array(serve.position_hi)
    vlo, vhi = np.array(serve.velocity_lo), np.array(serve.velocity_hi)
    ylo, yhi, zlo, zhi = serve.crossing_box
    for _ in range(planner.MAX_RESAMPLE):
        p0 = rng.uniform(lo, hi)
        if serve.kind == "box":
            v = rng.uniform(vlo, vhi)
        else:
            v = heuristic_velocity(p0, rng.uniform(*serve.bounce_x), rng.uniform(ylo, yhi),
                                   rng.uniform(zlo, zhi), plane_x, table)
            if v is None or np.any(v < vlo) or np.any(v > vhi):
                continue
        if planner._clears_net(p0, v, table):
            return BallState(p0, v, 0.0)
    raise planner.SamplingExhausted("no serve cleared the net")


# ----------------------------------------------------------------- contact


@dataclass
class Racket:
    """Racket centre, velocity and unit face normal."""

    p: np.ndarray
    v: np.ndarray
    n: np.ndarray

    def flipped(self):
        return Racket(self.p * _FLIP, self.v * _FLIP, self.n * _FLIP)


def _approaching(d, rel):
    return d * rel < 0 or (d == 0 and rel != 0)


def racket_contact(ball, racket, c_r, radius=RACKET_RADIUS, slab=CONTACT_SLAB):
    """Ball state just after contact with ``racket``, or ``None``.

    Contact needs the ball centre within ``slab`` of the face plane, inside
    the disc of ``radius`` and moving towards the face.
    """
    r = ball.p - racket.p
    d = float(r @ racket.n)
    if abs(d) > slab or np.linalg.norm(r - d * racket.n) > radius:
        return None
    if not _approaching(d, float((ball.v - racket.v) @ racket.n)):
        return None
    return BallState(ball.p, planner.restitute(ball.v, racket.v, racket.n, c_r), ball.t)


def _lerp_racket(r0, r1, w):
    n = (1 - w) * r0.n + w * r1.n
    return Racket((1 - w) * r0.p + w * r1.p, (1 - w) * r0.v + w * r1.v, n / np.linalg.norm(n))


def sweep_contact(ball, h, r0, r1, table, radius=RACKET_RADIUS):
    """Earliest time offset in ``[0, h]`` where the ball centre crosses the
    racket face inside its disc while approaching.

    The racket moves linearly from ``r0`` to ``r1`` over the interval.
    Returns ``(s, ball_at_s, racket_at_s)`` or ``None``.
    """
    for t0, p, v, dur, _ in planner._flight_segments(ball, table, h):

        def at(s):
            q, vq = planner._ballistic(p, v, table.g, s - t0)
            rk = _lerp_racket(r0, r1, s / h)
            return q, vq, rk, float((q - rk.p) @ rk.n)

        a, b = t0, t0 + dur
        fa, fb = at(a)[3], at(b)[3]
        if fa * fb > 0 or (fa == 0 and fb == 0):
            continue
        s = a if fa == 0 else b if fb == 0 else brentq(lambda s: at(s)[3], a, b, xtol=1e-15)
        q, vq, rk, _ = at(s)
        if np.linalg.norm((q - rk.p) - ((q - rk.p) @ rk.n) * rk.n) > radius:
            continue
        if not _approaching(fa if fa != 0 else -fb, float((vq - rk.v) @ rk.n)):
            continue
        return s, BallState(q, vq, ball.t + s), rk
    return None


def predicted_landing(ball, table):
    """First table bounce of free flight and whether the net is cleared.

    Returns ``(point, clears_net)`` with ``point = None`` if the ball
    leaves the table first.
    """
    try:
        for _, p, v, dur, bounce in planner._flight_segments(ball, table, planner.STRIKE_WINDOW):
            if bounce:
                q = planner._ballistic(p, v, table.g, dur)[0]
                return q, planner._clears_net(ball.p, ball.v, table)
    except planner.DeadBall:
        pass
    return None, False


# ------------------------------------------------------------------ reward


@dataclass
class StepState:
    """Per-tick quantities the reward needs, in the robot's own frame."""

    racket: Racket
    grip_point: np.ndarray = None
    handle_point: np.ndarray = None
    contact: bool = False
    first_contact: bool = False
    return_predicted: bool = False


def reward(step, command, weights):
    """Reward terms ``{r, r_g, r_c, r_s}`` for one tick.

    ``r_c`` is zero without a command.  The orientation term uses the angle
    between the racket face normal and the commanded normal.
    """
    if step.grip_point is None:
        r_g = 1.0
    else:
        r_g = float(np.exp(-np.linalg.norm(step.grip_point - step.handle_point) / 0.05))
    r_c = 0.0
    if command is not None:
        rk = step.racket
        r_c = np.exp(-np.linalg.norm(rk.p - command.p_hat) / 0.1)
        n_hat = planner.quat_rotate(command.o_hat, planner.N0)
        ang = np.arccos(np.clip(rk.n @ n_hat, -1.0, 1.0))
        r_c += np.exp(-ang / 0.5)
        if step.contact:
            r_c += np.exp(-np.linalg.norm(rk.v - command.v_hat) / 1.0)
        r_c = float(r_c)
    r_s = float(step.first_contact) + float(step.first_contact and step.return_predicted)
    r = weights.w_g * r_g + weights.w_c * r_c + weights.w_s * r_s
    return {"r": r, "r_g": r_g, "r_c": r_c, "r_s": r_s}


# ------------------------------------------------------------------- robot


class _Robot:
    """One plant with its controller and K-MAC layer; ``flip`` for robot B."""

    def __init__(self, name, scenario, model, controller, flip):
        self.name = name
        self.model = model
        self.flip = flip
        self.controller = controller
        self.kmac = Kmac(model, scenario.kmac, scenario.dt_ctrl)
        self.state = model.initial_state(np.asarray(scenario.ready, dtype=float))
        self.command = None
        self.hits = 0
        self.u = np.zeros(len(model.muscles))
        self.racket = self.racket_world()
        if hasattr(controller, "reset"):
            controller.reset()

    def own(self, ball):
        return planner.mirrored(ball) if self.flip else ball

    def racket_own(self):
        p, v, R = skeleton.end_effector_pose(self.state, self.model)
        return Racket(p, v, R @ self.model.end_effector.normal)

    def racket_world(self):
        rk = self.racket_own()
        return rk.flipped() if self.flip else rk

    def tick(self, t, ball, scenario):
        obs = ctl.Observation(t, self.state, self.own(ball), self.command)
        act = self.controller(obs)
        self.u = self.kmac(act.q_star, self.state, act.muscles)
        self.state = skeleton.advance(self.state, self.u, self.model, scenario.dt, scenario.nsub,
                                      drive_targets=act.drive_targets, drive_ff=act.drive_ff)
        prev, self.racket = self.racket, self.racket_world()
        return prev, self.racket


# --------------------------------------------------------------------- log


@dataclass
class EpisodeLog:
    """Per-tick records, events and outcome of one episode or rally.

    ``steps`` has one row per control tick with the columns named in
    ``columns``; ``act_columns`` index the muscle activations.
    """

    seed: int
    mode: str
    columns: list
    steps: np.ndarray
    act_columns: list
    events: list
    outcome: dict

    @property
    def activations(self):
        return self.steps[:, self.act_columns]

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.steps:
            w.writerow([repr(float(x)) for x in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def summary(self):
        return {"seed": self.seed, "mode": self.mode, "outcome": self.outcome,
                "events": self.events, "n_steps": int(len(self.steps))}

    def to_json(self, path=None):
        text = json.dumps(_plain(self.summary()), indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer, np.bool_)):
        return x.item()
    return x


def _columns(robots):
    cols = ["t", "ball_x", "ball_y", "ball_z", "ball_vx", "ball_vy", "ball_vz"]
    act_cols = []
    for rb in robots:
        m = rb.model
        pre = rb.name + "_"
        cols += [f"{pre}q{j}" for j in range(m.n)] + [f"{pre}qd{j}" for j in range(m.n)]
        cols += [f"{pre}u{i}" for i in range(len(m.muscles))]
        act_cols += list(range(len(cols), len(cols) + len(m.muscles)))
        cols += [f"{pre}act{i}" for i in range(len(m.muscles))]
        cols += [pre + c for c in ("p_hat_x", "p_hat_y", "p_hat_z", "v_hat_x", "v_hat_y",
                                   "v_hat_z", "o_hat_w", "o_hat_x", "o_hat_y", "o_hat_z",
                                   "r", "r_g", "r_c", "r_s")]
    return cols, act_cols


def _row(t, ball, robots, rewards):
    parts = [[t], ball.p, ball.v]
    for rb, rw in zip(robots, rewards):
        c = rb.command
        cmd = np.r_[c.p_hat, c.v_hat, c.o_hat] if c is not None else np.full(10, np.nan)
        parts += [rb.state.q, rb.state.qd, rb.u, rb.state.act, cmd,
                  [rw["r"], rw["r_g"], rw["r_c"], rw["r_s"]]]
    return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in parts])


# ----------------------------------------------------------------- engine


class _Engine:
    """Shared stepping loop; subclasses decide what the events mean."""

    def __init__(self, scenario, robots, seed):
        self.sc = scenario
        self.table = scenario.table
        self.cfg = scenario.planner_config()
        self.robots = robots
        self.rng = np.random.default_rng(seed)
        self.seed = seed
        self.events = []
        self.rows = []
        self.termination = None
        self.ball = None

    def event(self, etype, t, **kw):
        self.events.append({"type": etype, "t": float(t), **_plain(kw)})

    def plan_for(self, rb, t):
        try:
            rb.command = planner.plan(rb.own(self.ball), self.cfg, self.table, self.rng)
            self.event("plan", t, robot=rb.name, t_strike=rb.command.t_strike,
                       p_hat=rb.command.p_hat, v_out=rb.command.v_out)
        except planner.PlannerError as exc:
            rb.command = None
            self.event("plan_failed", t, robot=rb.name, reason=type(exc).__name__)

    def advance_ball(self, h, pairs):
        """Advance the ball by ``h`` with contact against the swept rackets.

        Returns ``(contact_robot, contact_racket, bounces)``.
        """
        best = None
        for rb, (r0, r1) in pairs:
            hit = sweep_contact(self.ball, h, r0, r1, self.table, rb.model.end_effector.radius)
            if hit is not None and (best is None or hit[0] < best[1][0]):
                best = (rb, hit)
        if best is None:
            self.ball, bounces = planner.propagate_events(self.ball, h, self.table)
            return None, None, bounces
        rb, (s, b, rk) = best
        bounces = planner.propagate_events(self.ball, s, self.table)[1] if s > 0 else []
        out = BallState(b.p, planner.restitute(b.v, rk.v, rk.n, self.cfg.c_r), b.t)
        self.event("hit", b.t, robot=rb.name, p=b.p, v_in=b.v, v_out=out.v, racket_v=rk.v)
        rest = h - s
        if rest > 0:
            self.ball, more = planner.propagate_events(out, rest, self.table)
            bounces = bounces + more
        else:
            self.ball = out
        return rb, rk, bounces

    def net_fault(self, before, after):
        nx = self.table.net_x
        if (before.p[0] - nx) * (after.p[0] - nx) > 0 or before.p[0] == after.p[0]:
            return False
        w = (nx - before.p[0]) / (after.p[0] - before.p[0])
        z = before.p[2] + w * (after.p[2] - before.p[2])
        y = before.p[1] + w * (after.p[1] - before.p[1])
        return z <= self.table.net_height and abs(y) <= 0.5 * self.table.width + NET_POST

    def run(self):
        sc = self.sc
        t = 0.0
        n_ticks = int(round(sc.horizon / sc.dt_ctrl))
        k = 0
        while self.termination is None:
            if k >= n_ticks:
                self.terminate("horizon", t)
                break
            pairs = []
            try:
                for rb in self.robots:
                    pairs.append((rb, rb.tick(t, self.ball, sc)))
            except skeleton.PlantFault as exc:
                fault = EpisodeFault(f"{rb.name}: {exc}")
                self.terminate("fault", t, robot=rb.name, error=str(fault))
                break
            before = self.ball
            try:
                rb_hit, rk, bounces = self.advance_ball(sc.dt_ctrl, pairs)
            except planner.DeadBall:
                self.terminate("dead_ball", t)
                break
            k += 1
            t = k * sc.dt_ctrl
            rewards = self.on_tick(t, before, rb_hit, rk, bounces)
            self.rows.append(_row(t, self.ball, self.robots, rewards))
        return self.log()

    def terminate(self, reason, t, **kw):
        if self.termination is None:
            self.termination = reason
            self.event("end", t, reason=reason, **kw)

    def log(self):
        cols, act_cols = _columns(self.robots)
        steps = np.array(self.rows) if self.rows else np.zeros((0, len(cols)))
        return EpisodeLog(self.seed, self.sc.mode, cols, steps, act_cols, self.events,
                          _plain(self.outcome()))


class _SingleEngine(_Engine):
    def __init__(self, scenario, controller, seed):
        model = scenario.model()
        super().__init__(scenario, [_Robot("a", scenario, model, controller, False)], seed)
        self.ball = sample_serve(scenario.serve, self.table, self.cfg.plane_x, self.rng)
        self.event("serve", 0.0, p=self.ball.p, v=self.ball.v)
        self.own_bounces = 0
        self.success = False
        self.plan_for(self.robots[0], 0.0)

    def on_tick(self, t, before, rb_hit, rk, bounces):
        rb = self.robots[0]
        tb = self.table
        cmd = rb.command
        first = predicted = False
        if rb_hit is not None:
            rb.hits += 1
            first = rb.hits == 1
            if first:
                q, clears = predicted_landing(self.ball, tb)
                predicted = clears and q is not None and tb.opponent_half(q[0], q[1])
            rb.command = None
        step = StepState(rk if rk is not None else rb.racket, contact=rb_hit is not None,
                         first_contact=first, return_predicted=predicted)
        rw = reward(step, cmd, self.sc.rewards)
        for tb_t, p in bounces:
            self.event("bounce", tb_t, p=p)
            if rb.hits == 0:
                if p[0] < tb.net_x:
                    self.own_bounces += 1
                    if self.own_bounces >= 2:
                        self.terminate("double_bounce", tb_t)
            elif tb.opponent_half(p[0], p[1]):
                self.success = rb.hits == 1
                self.terminate("landed", tb_t)
            else:
                self.terminate("landed_own_side", tb_t)
            if self.termination:
                return [rw]
        if rb.hits > 0 and self.net_fault(before, self.ball):
            self.terminate("net", t)
        elif self.ball.p[2] < FLOOR_Z:
            self.terminate("floor" if rb.hits else "missed", t)
        elif rb.hits == 0 and self.ball.p[0] < self.cfg.plane_x - MISS_MARGIN:
            self.terminate("missed", t)
        return [rw]

    def outcome(self):
        rb = self.robots[0]
        return {"hit": rb.hits > 0, "hits": rb.hits, "success": bool(self.success and rb.hits == 1),
                "termination": self.termination, "rally_length": 0}


class _RallyEngine(_Engine):
    def __init__(self, scenario, controller_a, controller_b, seed):
        model = scenario.model()
        robots = [_Robot("a", scenario, model, controller_a, False),
                  _Robot("b", scenario, model, controller_b, True)]
        super().__init__(scenario, robots, seed)
        receiver = robots[int(self.rng.integers(2))]
        own = sample_serve(scenario.serve, self.table, self.cfg.plane_x, self.rng)
        self.ball = receiver.own(own)
        self.event("serve", 0.0, receiver=receiver.name, p=self.ball.p, v=self.ball.v)
        self.rally_length = 0
        self.crossings = []
        self.striker = receiver
        self.pending = None
        self.bounces_since = 0
        self.last_valid = False
        self.expect(receiver, "serve", 0.0)
        self.plan_for(receiver, 0.0)

    def other(self, rb):
        return self.robots[1] if rb is self.robots[0] else self.robots[0]

    def expect(self, rb, kind, t):
        """Predict where the ball now crosses ``rb``'s hitting plane."""
        self.striker = rb
        self.bounces_since = 0
        try:
            s = planner.predict_strike(rb.own(self.ball), self.cfg, self.table)
            ok = s.bounces == 1
        except planner.NoIntersection:
            s, ok = None, False
        self.pending = (kind, s) if ok else None
        if not ok:
            self.event("no_crossing", t, robot=rb.name, kind=kind)

    def record_crossing(self):
        kind, s = self.pending
        self.pending = None
        ylo, yhi, zlo, zhi = self.cfg.crossing_box
        inside = bool(ylo <= s.p[1] <= yhi and zlo <= s.p[2] <= zhi)
        self.crossings.append({"robot": self.striker.name, "kind": kind, "y": s.p[1],
                               "z": s.p[2], "inside": inside})
        self.event("crossing", s.t, robot=self.striker.name, kind=kind, p=s.p, inside=inside)
        self.last_valid = kind == "return" and inside
        if not inside:
            self.terminate("out_of_box", s.t, robot=self.striker.name)

    def on_tick(self, t, before, rb_hit, rk, bounces):
        tb = self.table
        rewards = []
        hit_info = {}
        if rb_hit is not None:
            if rb_hit is self.striker:
                if self.pending is not None:
                    self.record_crossing()
                if self.last_valid:
                    self.rally_length += 1
                self.last_valid = False
            rb_hit.hits += 1
            own = rb_hit.own(self.ball)
            q, clears = predicted_landing(own, tb)
            hit_info[rb_hit.name] = clears and q is not None and tb.opponent_half(q[0], q[1])
        for rb in self.robots:
            cmd = rb.command
            contact = rb is rb_hit
            racket = rk if contact else rb.racket
            if rb.flip:
                racket = racket.flipped()
            step = StepState(racket, contact=contact, first_contact=contact,
                             return_predicted=hit_info.get(rb.name, False))
            rewards.append(reward(step, cmd, self.sc.rewards))
        if self.termination:
            return rewards
        if rb_hit is not None:
            if rb_hit is not self.striker:
                self.terminate("wrong_side_hit", t, robot=rb_hit.name)
                return rewards
            rb_hit.command = None
            nxt = self.other(rb_hit)
            self.expect(nxt, "return", t)
            self.plan_for(nxt, t)
        for tb_t, p in bounces:
            self.event("bounce", tb_t, p=p)
            own = self.striker.own(BallState(p, np.zeros(3)))
            if own.p[0] > tb.net_x or self.bounces_since >= 1:
                self.terminate("bad_bounce", tb_t, robot=self.striker.name)
                return rewards
            self.bounces_since += 1
        if self.pending is not None and t >= self.pending[1].t:
            self.record_crossing()
            if self.termination:
                return rewards
        own = self.striker.own(self.ball)
        if self.net_fault(before, self.ball):
            self.terminate("net", t)
        elif self.ball.p[2] < FLOOR_Z or own.p[0] < self.cfg.plane_x - MISS_MARGIN:
            self.terminate("missed", t, robot=self.striker.name)
        return rewards

    def outcome(self):
        hits = sum(rb.hits for rb in self.robots)
        return {"hit": hits > 0, "hits": hits, "success": self.rally_length > 0,
                "termination": self.termination, "rally_length": self.rally_length,
                "crossings": self.crossings}


def run_episode(scenario, controller=None, seed=None):
    """One single-strike episode; ``seed`` defaults to the scenario seed.

    ``controller`` maps an :class:`~flatmuscle.controller.Observation` to an
    :class:`~flatmuscle.controller.Action`; the default is the scripted
    tracking controller.  Plant faults end the episode with termination
    ``"fault"``.
    """
    if scenario.mode != "single":
        raise ScenarioError("mode: run_episode needs mode 'single'")
    seed = scenario.seed if seed is None else seed
    if controller is None:
        controller = default_controller(scenario)
    return _SingleEngine(scenario, controller, seed).run()


def run_rally(scenario, controller_a=None, controller_b=None, seed=None):
    """One dual-robot rally; ``outcome["rally_length"]`` counts valid exchanges.

    An exchange is a return that crosses the opponent's hitting plane inside
    the shared crossing box and is then struck by the opponent.
    """
    if scenario.mode != "dual":
        raise ScenarioError("mode: run_rally needs mode 'dual'")
    seed = scenario.seed if seed is None else seed
    controller_a = controller_a or default_controller(scenario)
    controller_b = controller_b or default_controller(scenario)
    return _RallyEngine(scenario, controller_a, controller_b, seed).run()


def default_controller(scenario, model=None):
    model = model or scenario.model()
    return ctl.ScriptedController(model, scenario.ready, scenario.kmac)


def _run_index(args):
    scenario, seed = args
    if scenario.mode == "dual":
        return run_rally(scenario, seed=seed)
    return run_episode(scenario, seed=seed)


def default_workers():
    """Worker count from ``FLATMUSCLE_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("FLATMUSCLE_THREADS", "1")))
    except ValueError:
        return 1


def run_many(scenario, n, base_seed=None, workers=None):
    """``n`` episodes (or rallies) with seeds ``base_seed + i``, in index order."""
    base = scenario.seed if base_seed is None else base_seed
    jobs = [(scenario, base + i) for i in range(n)]
    workers = default_workers() if workers is None else workers
    if workers <= 1 or n <= 1:
        return [_run_index(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, n)) as pool:
        return list(pool.map(_run_index, jobs))


# ----------------------------------------------------------------- metrics


@dataclass
class Metrics:
    episodes: int
    hit_rate: float
    success_rate: float
    effort: float
    rally_length: int
    median_rally_length: float
    crossing_inside: float

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(_plain(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def summary(self):
        return (f"episodes={self.episodes} hit={100 * self.hit_rate:.1f}% "
                f"success={100 * self.success_rate:.1f}% effort={self.effort:.4f} "
                f"rally_length={self.rally_length}")


def episode_effort(act):
    """Time mean of ``||a_t||_2 / n_a`` over one episode's activations (T x n_a)."""
    act = np.asarray(act, dtype=float)
    if act.ndim != 2 or act.shape[0] == 0 or act.shape[1] == 0:
        raise EmptyInput("an episode needs at least one step and one muscle")
    return float(np.mean(np.linalg.norm(act, axis=1) / act.shape[1]))


def compute_metrics(logs):
    """Aggregate metrics over episode logs (any order gives the same result)."""
    logs = list(logs)
    if not logs:
        raise EmptyInput("compute_metrics needs at least one log")
    N = len(logs)
    hit = sum(bool(lg.outcome["hit"]) for lg in logs)
    succ = sum(bool(lg.outcome["success"]) for lg in logs)
    effort = float(np.mean([episode_effort(lg.activations) for lg in logs]))
    rl = [int(lg.outcome.get("rally_length", 0)) for lg in logs]
    cross = [c["inside"] for lg in logs for c in lg.outcome.get("crossings", [])
             if c["kind"] == "return"]
    return Metrics(N, hit / N, succ / N, effort, max(rl), float(np.median(rl)),
                   float(np.mean(cross)) if cross else float("nan"))
