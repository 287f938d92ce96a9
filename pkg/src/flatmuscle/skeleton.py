"""Serial-chain skeletons driven by straight-line muscles and direct drives.

A plant is a serial chain of links.  Joint ``i`` connects link ``i - 1`` (or
the world for ``i = 0``) to link ``i``; its origin is fixed in the parent link
frame and its axis is expressed in that frame as well.  Muscles are polylines
of via-points attached to links (``link = -1`` anchors a point to the world).
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import hill
from .hill import HillParams, MuscleState

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Raised when a plant model file is malformed."""


class PlantFault(RuntimeError):
    """A simulation fault that terminates an episode."""


class NonFiniteState(PlantFault):
    pass


class JointLimitFault(PlantFault):
    pass


@dataclass(frozen=True)
class Link:
    mass: float
    length: float
    com: np.ndarray
    inertia: np.ndarray
    name: str = ""


@dataclass(frozen=True)
class Joint:
    type: str
    axis: np.ndarray
    origin: np.ndarray
    limits: tuple
    name: str = ""

    @property
    def revolute(self):
        return self.type == "revolute"


@dataclass(frozen=True)
class Muscle:
    name: str
    links: tuple
    points: np.ndarray
    hill: HillParams


@dataclass(frozen=True)
class DirectDrive:
    joint: int
    force_limit: float
    kp: float = 0.0
    kd: float = 0.0


@dataclass(frozen=True)
class EndEffector:
    """Rigid tool (the racket) mounted on a link."""

    link: int
    point: np.ndarray
    normal: np.ndarray
    radius: float = 0.085


@dataclass
class JointState:
    q: np.ndarray
    qd: np.ndarray


@dataclass
class SimState:
    """Full plant state: joints, muscle activations and time."""

    q: np.ndarray
    qd: np.ndarray
    act: np.ndarray
    t: float = 0.0

    def copy(self):
        return SimState(self.q.copy(), self.qd.copy(), self.act.copy(), self.t)


@dataclass
class Frames:
    """World-frame link rotations, frame origins, joint origins and joint axes."""

    R: np.ndarray
    f: np.ndarray
    o: np.ndarray
    z: np.ndarray


class PlantModel:
    """Immutable description of a plant.

    Use :func:`load_model` or :meth:`from_dict` to build one from the JSON
    model format.
    """

    def __init__(self, links, joints, muscles, direct_drives=(), gravity=(0.0, 0.0, -9.81),
                 end_effector=None, name=""):
        self.links = tuple(links)
        self.joints = tuple(joints)
        self.muscles = tuple(muscles)
        self.direct_drives = tuple(direct_drives)
        self.gravity = np.asarray(gravity, dtype=float)
        self.end_effector = end_effector
        self.name = name
        self._validate()

        n = self.n
        self.hill = HillParams.stack(m.hill for m in self.muscles)
        self.revolute = np.array([j.revolute for j in self.joints])
        self.lower = np.array([j.limits[0] for j in self.joints], dtype=float)
        self.upper = np.array([j.limits[1] for j in self.joints], dtype=float)
        self.mass = np.array([lk.mass for lk in self.links])
        self.com = np.array([lk.com for lk in self.links])
        self.inertia = np.array([lk.inertia for lk in self.links])
        self.driven = np.array(sorted(d.joint for d in self.direct_drives), dtype=int)
        self.muscle_joints = np.array([j for j in range(n) if j not in set(self.driven)], dtype=int)
        # ancestor[i, j]: joint j moves link i
        self.ancestor = np.tril(np.ones((n, n), dtype=bool))

        # flattened via-point tables
        links_, pts, seg_a, seg_b, seg_m = [], [], [], [], []
        for k, mu in enumerate(self.muscles):
            base = len(links_)
            links_.extend(mu.links)
            pts.extend(mu.points)
            for s in range(len(mu.links) - 1):
                seg_a.append(base + s)
                seg_b.append(base + s + 1)
                seg_m.append(k)
        self._via_link = np.array(links_, dtype=int)
        self._via_local = np.array(pts, dtype=float).reshape(-1, 3)
        self._seg_a = np.array(seg_a, dtype=int)
        self._seg_b = np.array(seg_b, dtype=int)
        self._seg_to_muscle = np.zeros((self.m, len(seg_m)))
        self._seg_to_muscle[seg_m, np.arange(len(seg_m))] = 1.0
        # via_anc[p, j]: joint j moves via-point p
        self._via_anc = np.zeros((len(links_), n), dtype=bool)
        for p, lk in enumerate(links_):
            if lk >= 0:
                self._via_anc[p, :lk + 1] = True

    @property
    def n(self):
        return len(self.joints)

    @property
    def m(self):
        return len(self.muscles)

    def _validate(self):
        n = len(self.joints)
        if n < 1:
            raise ModelFormatError("joints: at least one joint is required")
        if len(self.links) != n:
            raise ModelFormatError("links: one link per joint is required")
        if len(self.muscles) < 1:
            raise ModelFormatError("muscles: at least one muscle is required")
        for i, j in enumerate(self.joints):
            if j.type not in ("revolute", "prismatic"):
                raise ModelFormatError(f"joints[{i}].type: unknown joint type {j.type!r}")
            if not j.limits[0] < j.limits[1]:
                raise ModelFormatError(f"joints[{i}].limits: lower limit must be below upper")
        for k, mu in enumerate(self.muscles):
            if len(mu.links) < 2:
                raise ModelFormatError(f"muscles[{k}].path: at least two via-points needed")
            for lk in mu.links:
                if not -1 <= lk < n:
                    raise ModelFormatError(f"muscles[{k}].path: link {lk} does not exist")
        for d in self.direct_drives:
            if not 0 <= d.joint < n:
                raise ModelFormatError(f"direct_drives: joint {d.joint} does not exist")
        if self.end_effector is not None and not 0 <= self.end_effector.link < n:
            raise ModelFormatError("end_effector.link: link does not exist")

    # ------------------------------------------------------------------ io
    @classmethod
    def from_dict(cls, d):
        try:
            return _model_from_dict(d)
        except ModelFormatError:
            raise
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ModelFormatError(f"invalid model: {exc!r}") from exc

    def to_dict(self):
        return {
            "format": FORMAT_VERSION,
            "name": self.name,
            "gravity": self.gravity.tolist(),
            "links": [{"name": lk.name, "mass": lk.mass, "length": lk.length,
                       "com": np.asarray(lk.com).tolist(),
                       "inertia": np.asarray(lk.inertia).tolist()} for lk in self.links],
            "joints": [{"name": j.name, "type": j.type, "axis": np.asarray(j.axis).tolist(),
                        "origin": np.asarray(j.origin).tolist(),
                        "limits": list(j.limits)} for j in self.joints],
            "muscles": [{"name": mu.name,
                         "path": [{"link": int(lk), "point": np.asarray(p).tolist()}
                                  for lk, p in zip(mu.links, mu.points)],
                         "hill": mu.hill.to_dict()} for mu in self.muscles],
            "direct_drives": [{"joint": d.joint, "force_limit": d.force_limit,
                               "kp": d.kp, "kd": d.kd} for d in self.direct_drives],
            "end_effector": None if self.end_effector is None else {
                "link": self.end_effector.link,
                "point": np.asarray(self.end_effector.point).tolist(),
                "normal": np.asarray(self.end_effector.normal).tolist(),
                "radius": self.end_effector.radius},
        }

    def home(self):
        """Joint configuration at the middle of the limits, clipped to zero when allowed."""
        return np.clip(np.zeros(self.n), self.lower, self.upper)

    def initial_state(self, q=None, qd=None, act=None):
        q = self.home() if q is None else np.asarray(q, dtype=float).copy()
        qd = np.zeros(self.n) if qd is None else np.asarray(qd, dtype=float).copy()
        act = np.zeros(self.m) if act is None else np.asarray(act, dtype=float).copy()
        return SimState(q, qd, act, 0.0)


def _vec3(x, where):
    a = np.asarray(x, dtype=float)
    if a.shape != (3,):
        raise ModelFormatError(f"{where}: expected a 3-vector")
    return a


def _inertia(x, where):
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        return np.eye(3) * float(a)
    if a.shape == (3,):
        return np.diag(a)
    if a.shape == (3, 3):
        return a
    raise ModelFormatError(f"{where}: inertia must be a scalar, 3-vector or 3x3 matrix")


def _model_from_dict(d):
    if d.get("format") != FORMAT_VERSION:
        raise ModelFormatError(f"format: expected {FORMAT_VERSION}, got {d.get('format')!r}")
    for key in ("links", "joints", "muscles", "gravity"):
        if key not in d:
            raise ModelFormatError(f"{key}: missing required key")
    links = []
    for i, lk in enumerate(d["links"]):
        if lk["mass"] <= 0:
            raise ModelFormatError(f"links[{i}].mass: must be positive")
        links.append(Link(float(lk["mass"]), float(lk.get("length", 0.0)),
                          _vec3(lk.get("com", [0, 0, 0]), f"links[{i}].com"),
                          _inertia(lk.get("inertia", 0.0), f"links[{i}].inertia"),
                          lk.get("name", f"link{i}")))
    joints = []
    for i, j in enumerate(d["joints"]):
        if "origin" in j:
            origin = _vec3(j["origin"], f"joints[{i}].origin")
        elif i > 0:
            origin = np.array([links[i - 1].length, 0.0, 0.0])
        else:
            origin = np.zeros(3)
        axis = _vec3(j["axis"], f"joints[{i}].axis")
        if np.linalg.norm(axis) == 0:
            raise ModelFormatError(f"joints[{i}].axis: zero axis")
        lim = j.get("limits", [-np.pi, np.pi])
        if len(lim) != 2:
            raise ModelFormatError(f"joints[{i}].limits: expected [lo, hi]")
        joints.append(Joint(j.get("type", "revolute"), axis / np.linalg.norm(axis), origin,
                            (float(lim[0]), float(lim[1])), j.get("name", f"joint{i}")))
    muscles = []
    for k, mu in enumerate(d["muscles"]):
        path = mu["path"]
        mlinks = tuple(-1 if v["link"] in ("world", None) else int(v["link"]) for v in path)
        pts = np.array([_vec3(v["point"], f"muscles[{k}].path.point") for v in path])
        try:
            hp = HillParams(**mu["hill"])
        except (TypeError, ValueError) as exc:
            raise ModelFormatError(f"muscles[{k}].hill: {exc}") from exc
        muscles.append(Muscle(mu.get("name", f"muscle{k}"), mlinks, pts, hp))
    drives = [DirectDrive(int(dd["joint"]), float(dd["force_limit"]),
                          float(dd.get("kp", 0.0)), float(dd.get("kd", 0.0)))
              for dd in d.get("direct_drives", [])]
    ee = d.get("end_effector")
    if ee is not None:
        normal = _vec3(ee.get("normal", [1, 0, 0]), "end_effector.normal")
        ee = EndEffector(int(ee["link"]), _vec3(ee.get("point", [0, 0, 0]), "end_effector.point"),
                         normal / np.linalg.norm(normal), float(ee.get("radius", 0.085)))
    return PlantModel(links, joints, muscles, drives, _vec3(d["gravity"], "gravity"), ee,
                      d.get("name", ""))


def load_model(path):
    """Load a plant model from a JSON file (or a bundled model name)."""
    path = Path(path)
    if not path.exists() and path.parent == Path("."):
        bundled = Path(__file__).parent / "data" / f"{path.name.removesuffix('.json')}.json"
        if bundled.exists():
            path = bundled
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return PlantModel.from_dict(d)


# ---------------------------------------------------------------- kinematics
def _rot(axis, angle):
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array([[c + x * x * C, x * y * C - z * s, x * z * C + y * s],
                     [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
                     [z * x * C - y * s, z * y * C + x * s, c + z * z * C]])


def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def frames(q, model):
    """Forward kinematics of all link frames."""
    n = model.n
    R = np.empty((n, 3, 3))
    f = np.empty((n, 3))
    o = np.empty((n, 3))
    z = np.empty((n, 3))
    Rp = np.eye(3)
    fp = np.zeros(3)
    for i, j in enumerate(model.joints):
        o[i] = fp + Rp @ j.origin
        z[i] = Rp @ j.axis
        if j.revolute:
            R[i] = Rp @ _rot(j.axis, q[i])
            f[i] = o[i]
        else:
            R[i] = Rp
            f[i] = o[i] + z[i] * q[i]
        Rp, fp = R[i], f[i]
    return Frames(R, f, o, z)


def _via_points(fr, model):
    lk = model._via_link
    local = model._via_local
    world = local.copy()
    on = lk >= 0
    if np.any(on):
        world[on] = fr.f[lk[on]] + np.einsum("pij,pj->pi", fr.R[lk[on]], local[on])
    return world


def _point_jacobians(points, anc, fr, model):
    """Jacobians (P, 3, n) of world points; ``anc[p, j]`` marks joint j moving point p."""
    d = points[:, None, :] - fr.o[None, :, :]
    J = np.where(model.revolute[None, :, None], np.cross(fr.z[None, :, :], d), fr.z[None, :, :])
    J = J * anc[:, :, None]
    return J.transpose(0, 2, 1)


def _muscle_geometry(fr, model, need_jac=True):
    pts = _via_points(fr, model)
    e = pts[model._seg_b] - pts[model._seg_a]
    seg_len = np.sqrt(np.einsum("si,si->s", e, e))
    lengths = model._seg_to_muscle @ seg_len
    if not need_jac:
        return lengths, None
    Jp = _point_jacobians(pts, model._via_anc, fr, model)
    unit = e / seg_len[:, None]
    dseg = np.einsum("si,sij->sj", unit, Jp[model._seg_b] - Jp[model._seg_a])
    return lengths, model._seg_to_muscle @ dseg


def muscle_lengths(q, model):
    """Muscle lengths (m), the sum of straight segment lengths along each path."""
    return _muscle_geometry(frames(np.asarray(q, dtype=float), model), model, False)[0]


def compiled_muscle_lengths(q, model):
    """Compiled :func:`muscle_lengths` (agrees to round-off)."""
    from . import _kernels
    pk = packed(model)
    return _kernels.muscle_lengths(np.asarray(q, dtype=float), pk.jrev, pk.axis, pk.origin,
                                   pk.via_link, pk.via_local, pk.seg_a, pk.seg_b, pk.seg_m, pk.m)


def muscle_jacobian(q, model):
    """Muscle Jacobian ``J_m[i, j] = d l_i / d q_j`` (m x n)."""
    return _muscle_geometry(frames(np.asarray(q, dtype=float), model), model)[1]


def muscle_state(state, model, fr=None):
    """Muscle lengths and lengthening velocities ``J_m qd`` for a plant state."""
    fr = frames(state.q, model) if fr is None else fr
    lengths, J = _muscle_geometry(fr, model)
    return MuscleState(lengths, J @ state.qd, state.act), J


# ------------------------------------------------------------------ dynamics
def _com_world(fr, model):
    return fr.f + np.einsum("nij,nj->ni", fr.R, model.com)


def mass_matrix(q, model, fr=None):
    """Joint-space inertia matrix ``M(q)``."""
    fr = frames(np.asarray(q, dtype=float), model) if fr is None else fr
    c = _com_world(fr, model)
    Jv = _point_jacobians(c, model.ancestor, fr, model)
    Jw = (fr.z[None, :, :] * (model.ancestor & model.revolute[None, :])[:, :, None]).transpose(0, 2, 1)
    Iw = np.einsum("kab,kbc,kdc->kad", fr.R, model.inertia, fr.R)
    M = np.einsum("k,kai,kaj->ij", model.mass, Jv, Jv) + np.einsum("kai,kab,kbj->ij", Jw, Iw, Jw)
    return 0.5 * (M + M.T)


def rnea(q, qd, qdd, model, gravity=None, fr=None):
    """Recursive Newton-Euler inverse dynamics ``M qdd + C qd + G``."""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    qdd = np.asarray(qdd, dtype=float)
    g = model.gravity if gravity is None else np.asarray(gravity, dtype=float)
    fr = frames(q, model) if fr is None else fr
    n = model.n
    c = _com_world(fr, model)
    w = np.zeros(3)
    wd = np.zeros(3)
    a = -g
    fprev = np.zeros(3)
    F = np.empty((n, 3))
    N = np.empty((n, 3))
    for i, j in enumerate(model.joints):
        zi = fr.z[i]
        r = fr.o[i] - fprev
        a_o = a + _cross(wd, r) + _cross(w, _cross(w, r))
        if j.revolute:
            wd = wd + zi * qdd[i] + _cross(w, zi * qd[i])
            w = w + zi * qd[i]
            a = a_o
        else:
            dvec = zi * q[i]
            a = (a_o + _cross(wd, dvec) + _cross(w, _cross(w, dvec))
                 + 2.0 * _cross(w, zi * qd[i]) + zi * qdd[i])
        rc = c[i] - fr.f[i]
        a_c = a + _cross(wd, rc) + _cross(w, _cross(w, rc))
        Iw = fr.R[i] @ model.inertia[i] @ fr.R[i].T
        F[i] = model.mass[i] * a_c
        N[i] = Iw @ wd + _cross(w, Iw @ w)
        fprev = fr.f[i]
    tau = np.empty(n)
    f_child = np.zeros(3)
    n_child = np.zeros(3)
    p_child = np.zeros(3)
    for i in range(n - 1, -1, -1):
        fi = F[i] + f_child
        ni = N[i] + n_child + _cross(p_child - fr.f[i], f_child) + _cross(c[i] - fr.f[i], F[i])
        tau[i] = fr.z[i] @ (ni if model.joints[i].revolute else fi)
        f_child, n_child, p_child = fi, ni, fr.f[i]
    return tau


def gravity_forces(q, model, fr=None):
    """Generalised gravity forces ``G(q)``."""
    n = model.n
    return rnea(q, np.zeros(n), np.zeros(n), model, fr=fr)


def bias_forces(q, qd, model, fr=None):
    """Coriolis and centrifugal forces ``C(q, qd) qd``."""
    n = model.n
    return rnea(q, qd, np.zeros(n), model, gravity=np.zeros(3), fr=fr)


def inverse_dynamics(y, yd, ydd, model, tau_ext=None):
    """Generalised force ``M ydd + C yd + G - tau_ext`` that realises the motion."""
    tau = rnea(y, yd, ydd, model)
    if tau_ext is not None:
        tau = tau - np.asarray(tau_ext, dtype=float)
    return tau


def forward_dynamics(q, qd, tau, model, fr=None):
    """Joint accelerations under generalised force ``tau``."""
    fr = frames(np.asarray(q, dtype=float), model) if fr is None else fr
    M = mass_matrix(q, model, fr)
    h = rnea(q, qd, np.zeros(model.n), model, fr=fr)
    return np.linalg.solve(M, np.asarray(tau, dtype=float) - h)


def mechanical_energy(state, model):
    """Kinetic plus gravitational potential energy of the skeleton (J)."""
    fr = frames(state.q, model)
    M = mass_matrix(state.q, model, fr)
    c = _com_world(fr, model)
    return 0.5 * state.qd @ M @ state.qd - float(np.sum(model.mass * (c @ model.gravity)))


def drive_forces(state, model, targets=None, feedforward=None):
    """Direct-drive generalised forces: feedforward plus PD servo, clamped to limits."""
    tau = np.zeros(model.n)
    for k, d in enumerate(model.direct_drives):
        j = d.joint
        f = 0.0 if feedforward is None else feedforward[k]
        if targets is not None:
            qt, qdt = targets[k]
            f += d.kp * (qt - state.q[j]) + d.kd * (qdt - state.qd[j])
        tau[j] = np.clip(f, -d.force_limit, d.force_limit)
    return tau


def end_effector_pose(state, model, fr=None):
    """Racket centre position, velocity and rotation matrix in the world frame."""
    ee = model.end_effector
    if ee is None:
        raise ValueError("model has no end effector")
    if fr is None:
        from . import _kernels
        pk = packed(model)
        return _kernels.ee_pose(np.asarray(state.q, dtype=float), np.asarray(state.qd, dtype=float),
                                ee.link, np.asarray(ee.point, dtype=float), pk.jrev, pk.axis,
                                pk.origin)
    R = fr.R[ee.link]
    p = fr.f[ee.link] + R @ ee.point
    anc = np.zeros((1, model.n), dtype=bool)
    anc[0, :ee.link + 1] = True
    J = _point_jacobians(p[None], anc, fr, model)[0]
    return p, J @ state.qd, R


def end_effector_jacobian(q, model, fr=None):
    """Position Jacobian (3 x n) and face-normal Jacobian (3 x n) of the end effector."""
    ee = model.end_effector
    fr = frames(np.asarray(q, dtype=float), model) if fr is None else fr
    R = fr.R[ee.link]
    p = fr.f[ee.link] + R @ ee.point
    anc = np.zeros((1, model.n), dtype=bool)
    anc[0, :ee.link + 1] = True
    Jp = _point_jacobians(p[None], anc, fr, model)[0]
    normal = R @ ee.normal
    Jw = fr.z.T * (anc[0] & model.revolute)[None, :]
    Jn = np.cross(Jw.T, normal).T
    return p, normal, Jp, Jn


def step(state, u, model, dt, tau_ext=None, drive_targets=None, drive_ff=None):
    """Advance the plant by ``dt`` with excitation ``u`` held constant.

    Tensions use the activation at the start of the step; joints advance by
    semi-implicit Euler (velocity first) and activation by RK4.

    Raises
    ------
    NonFiniteState
        If any state component becomes non-finite.
    JointLimitFault
        If a joint leaves its limits.
    """
    if not 0 < dt <= 1e-2:
        raise ValueError("dt must lie in (0, 1e-2]")
    fr = frames(state.q, model)
    ms, J = muscle_state(state, model, fr)
    T = hill.hill_tension(state.act, ms, model.hill)
    tau = -J.T @ T + drive_forces(state, model, drive_targets, drive_ff)
    if tau_ext is not None:
        tau = tau + tau_ext
    M = mass_matrix(state.q, model, fr)
    h = rnea(state.q, state.qd, np.zeros(model.n), model, fr=fr)
    qdd = np.linalg.solve(M, tau - h)
    qd = state.qd + dt * qdd
    q = state.q + dt * qd
    act = hill.integrate_activation(state.act, np.clip(u, 0.0, 1.0), model.hill, dt)
    new = SimState(q, qd, act, state.t + dt)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd)) and np.all(np.isfinite(act))):
        raise NonFiniteState(f"non-finite state at t={new.t:.6f}")
    bad = (q < model.lower) | (q > model.upper)
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0])
        raise JointLimitFault(f"joint {j} left its limits at t={new.t:.6f} (q={q[j]:.4f})")
    return new


def packed(model):
    """Kernel arrays for ``model`` (built once and cached on the model)."""
    pk = getattr(model, "_packed", None)
    if pk is None:
        from ._kernels import PackedModel
        pk = model._packed = PackedModel(model)
    return pk


def control_terms(state, qdd, model):
    """Compiled ``(inverse_dynamics(q, qd, qdd), MuscleState, J)`` in one pass."""
    from . import _kernels
    pk = packed(model)
    q = np.asarray(state.q, dtype=float)
    qd = np.asarray(state.qd, dtype=float)
    tau, l, J = _kernels.control_terms(
        q, qd, np.asarray(qdd, dtype=float), pk.jrev, pk.axis, pk.origin, pk.mass, pk.com,
        pk.inertia, pk.gravity, pk.via_link, pk.via_local, pk.seg_a, pk.seg_b, pk.seg_m, pk.m)
    return tau, MuscleState(l, J @ qd, np.asarray(state.act, dtype=float)), J


def advance(state, u, model, dt, nsub=1, tau_ext=None, drive_targets=None, drive_ff=None):
    """Compiled equivalent of ``nsub`` successive :func:`step` calls with inputs held.

    Raises the same faults as :func:`step`.
    """
    from . import _kernels
    if not 0 < dt <= 1e-2:
        raise ValueError("dt must lie in (0, 1e-2]")
    pk = packed(model)
    k = len(model.direct_drives)
    dd_q = np.zeros(k)
    dd_qd = np.zeros(k)
    dd_ff = np.zeros(k) if drive_ff is None else np.asarray(drive_ff, dtype=float)
    gains = pk.dd.copy()
    if drive_targets is None:
        gains[:, 1:] = 0.0
    else:
        for i, (qt, qdt) in enumerate(drive_targets):
            dd_q[i], dd_qd[i] = qt, qdt
    args = list(pk.args())
    args[-1] = gains
    tau_ext = np.zeros(model.n) if tau_ext is None else np.asarray(tau_ext, dtype=float)
    q, qd, act, status, done, bad = _kernels.advance(
        np.asarray(state.q, dtype=float), np.asarray(state.qd, dtype=float),
        np.asarray(state.act, dtype=float), np.clip(np.asarray(u, dtype=float), 0.0, 1.0),
        tau_ext, dd_q, dd_qd, dd_ff, float(dt), int(nsub), *args)
    new = SimState(q, qd, act, state.t + done * dt)
    if status == _kernels.NONFINITE:
        raise NonFiniteState(f"non-finite state at t={new.t:.6f}")
    if status == _kernels.JOINT_LIMIT:
        raise JointLimitFault(f"joint {bad} left its limits at t={new.t:.6f} (q={q[bad]:.4f})")
    return new
