"""Joint trajectories to muscle excitations by flat inversion.

The joint positions are a flat output of the musculoskeletal plant: given
``y(t)`` and its derivatives, the joint torque follows from inverse dynamics,
muscle tensions from a null-space force distribution, activations from the
inverted Hill law and excitations from the inverted activation dynamics.
Three conditions make that chain well-defined:

* C1: the muscle moment-arm matrix has full row rank,
* C2: activations and excitations stay inside ``[0, 1]``,
* C3: the force-velocity gain is nonzero (guaranteed by ``hill.FV_FLOOR``).
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import make_interp_spline

from . import hill, skeleton
from .hill import MuscleState

RANK_TOL = 1e-8
SEARCH_MAX_ITER = 500
SEARCH_TOL = 1e-10
RESIDUAL_TOL = 1e-9


class TrajectoryError(ValueError):
    """Raised for malformed or derivative-inconsistent trajectories."""


class FlatTrajectory:
    """Joint trajectory with derivatives up to third order.

    Parameters
    ----------
    sampler : callable
        ``sampler(t) -> (y, yd, ydd, yddd)``, each an ``n``-vector.
    horizon : float
        Duration in seconds.
    """

    def __init__(self, sampler, horizon, validate=True):
        self.sampler = sampler
        self.horizon = float(horizon)
        if self.horizon <= 0:
            raise TrajectoryError("horizon must be positive")
        if validate:
            self.validate()

    def __call__(self, t):
        return tuple(np.atleast_1d(np.asarray(a, dtype=float)) for a in self.sampler(t))

    def validate(self, n_grid=201, rtol=1e-4):
        """Check that finite differences of ``y`` reproduce ``yd`` on a grid."""
        h = 1e-6 * self.horizon
        ts = np.linspace(h, self.horizon - h, n_grid)
        fd = np.array([(self(t + h)[0] - self(t - h)[0]) / (2 * h) for t in ts])
        yd = np.array([self(t)[1] for t in ts])
        scale = max(np.abs(yd).max(), 1e-3)
        err = np.abs(fd - yd).max() / scale
        if not np.isfinite(err) or err > rtol:
            raise TrajectoryError(f"velocity inconsistent with positions (relative error {err:.2e})")

    @classmethod
    def from_samples(cls, t, y):
        """Quintic-spline fit through sampled joint positions (``y`` is K x n)."""
        t = np.asarray(t, dtype=float)
        y = np.asarray(y, dtype=float).reshape(len(t), -1)
        if len(t) < 6:
            raise TrajectoryError("at least six samples are needed for a quintic fit")
        if np.any(np.diff(t) <= 0):
            raise TrajectoryError("sample times must be strictly increasing")
        spl = make_interp_spline(t - t[0], y, k=5)
        ders = [spl.derivative(k) for k in (1, 2, 3)]

        def sampler(s):
            return (spl(s), ders[0](s), ders[1](s), ders[2](s))

        return cls(sampler, t[-1] - t[0])

    @classmethod
    def sinusoid(cls, amplitude, freq, offset=0.0, phase=0.0, horizon=4.0):
        """``offset + amplitude * sin(2 pi freq t + phase)`` per joint."""
        a = np.atleast_1d(np.asarray(amplitude, dtype=float))
        w = 2 * np.pi * np.broadcast_to(np.asarray(freq, dtype=float), a.shape)
        c = np.broadcast_to(np.asarray(offset, dtype=float), a.shape)
        ph = np.broadcast_to(np.asarray(phase, dtype=float), a.shape)

        def sampler(t):
            s = np.sin(w * t + ph)
            co = np.cos(w * t + ph)
            return (c + a * s, a * w * co, -a * w ** 2 * s, -a * w ** 3 * co)

        return cls(sampler, horizon)

    @classmethod
    def constant(cls, y, horizon=1.0):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        z = np.zeros_like(y)
        return cls(lambda t: (y, z, z, z), horizon)


def load_trajectory_csv(path):
    """Read a trajectory CSV with columns ``t, y1, ..., yn``."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0].strip() != "t":
        raise TrajectoryError(f"{path}: line 1: header must start with 't'")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            data.append([float(x) for x in row])
        except ValueError as exc:
            raise TrajectoryError(f"{path}: line {lineno}: {exc}") from exc
        if len(row) != len(rows[0]):
            raise TrajectoryError(f"{path}: line {lineno}: expected {len(rows[0])} columns")
    data = np.array(data)
    return FlatTrajectory.from_samples(data[:, 0], data[:, 1:])


def write_trajectory_csv(path, traj, rate=200.0):
    ts = np.arange(0.0, traj.horizon + 0.5 / rate, 1.0 / rate)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        y0 = traj(0.0)[0]
        w.writerow(["t"] + [f"y{i + 1}" for i in range(len(y0))])
        for t in ts:
            w.writerow([f"{t:.6f}"] + [f"{v:.12g}" for v in traj(t)[0]])


@dataclass
class RankCheck:
    ok: bool
    sigma_min: float
    cond: float


@dataclass
class ForceDistribution:
    """Muscle tensions realising a joint torque.

    ``alpha`` is the null-space parameter actually used, ``projector`` the
    null-space projector ``I - A^+ A`` with ``A = -J_m^T``.
    """

    tensions: np.ndarray
    alpha: np.ndarray
    projector: np.ndarray
    feasible: bool
    iterations: int = 0


def moment_matrix(q, model, J=None):
    """``A = -J_m^T`` restricted to the muscle-actuated joints (tension-positive torques)."""
    J = skeleton.muscle_jacobian(q, model) if J is None else J
    return -J[:, model.muscle_joints].T


def check_rank(q, model, J=None):
    """Kinematic solvability: does ``J_m^T`` have full row rank at ``q``?"""
    A = moment_matrix(q, model, J)
    s = np.linalg.svd(A, compute_uv=False)
    smax = s.max() if s.size else 0.0
    smin = s.min() if s.size == A.shape[0] else 0.0
    ok = bool(smax > 0 and smin > RANK_TOL * smax)
    return RankCheck(ok, float(smin), float(smax / smin) if smin > 0 else np.inf)


def _box_projection(A, tau, T0, lo, hi, max_iter=SEARCH_MAX_ITER, tol=SEARCH_TOL):
    """Closest point to ``T0`` on ``{A T = tau, lo <= T <= hi}``.

    Semismooth Newton on the dual variable ``lam`` of the equality
    constraint; the primal iterate is ``clip(T0 - A^T lam, lo, hi)``.  Falls
    back to a gradient step of length ``1 / ||A||^2`` when Newton stalls.
    Returns ``(T, converged, iterations)``.
    """
    lam = np.zeros(A.shape[0])
    step = 1.0 / max(np.linalg.norm(A, 2) ** 2, 1e-300)
    scale = max(np.abs(tau).max(), 1.0)

    def primal(lam):
        return np.clip(T0 - A.T @ lam, lo, hi)

    T = primal(lam)
    g = A @ T - tau
    for it in range(1, max_iter + 1):
        if np.abs(g).max() <= tol * scale:
            return T, True, it - 1
        free = (T0 - A.T @ lam > lo) & (T0 - A.T @ lam < hi)
        Af = A[:, free]
        H = Af @ Af.T
        try:
            delta = np.linalg.lstsq(H, g, rcond=None)[0] if free.any() else step * g
        except np.linalg.LinAlgError:
            delta = step * g
        # backtracking on the residual norm; fall back to a plain gradient step
        gn = np.linalg.norm(g)
        for t in (1.0, 0.5, 0.25, 0.125, 0.0625):
            lam_try = lam + t * delta
            T_try = primal(lam_try)
            g_try = A @ T_try - tau
            if np.linalg.norm(g_try) < gn:
                break
        else:
            lam_try = lam + step * g
            T_try = primal(lam_try)
            g_try = A @ T_try - tau
        lam, T, g = lam_try, T_try, g_try
    return T, bool(np.abs(g).max() <= tol * scale), max_iter


def distribute_forces(tau_m, q, model, alpha=None, lower=None, upper=None, J=None):
    """Muscle tensions ``T`` with ``-J_m^T T = tau_m`` on the muscle joints.

    The candidate is ``A^+ tau_m + P alpha``.  When it leaves the box
    ``[lower, upper]`` (default ``[0, f_max]``), the box-feasible tension
    closest to the candidate is searched for instead; with ``alpha = 0`` this
    is the ``alpha`` minimising ``||P alpha||``.

    ``tau_m`` may be given for all joints or for the muscle joints only.
    """
    A = moment_matrix(q, model, J)
    nj, m = A.shape
    tau_m = np.atleast_1d(np.asarray(tau_m, dtype=float))
    if tau_m.shape[0] == model.n and model.n != nj:
        tau_m = tau_m[model.muscle_joints]
    lo = np.zeros(m) if lower is None else np.broadcast_to(np.asarray(lower, float), (m,))
    hi = (np.broadcast_to(np.asarray(model.hill.f_max, float), (m,)) if upper is None
          else np.broadcast_to(np.asarray(upper, float), (m,)))
    alpha = np.zeros(m) if alpha is None else np.asarray(alpha, dtype=float)
    Ap = np.linalg.pinv(A)
    P = np.eye(m) - Ap @ A
    T0 = Ap @ tau_m
    T = T0 + P @ alpha
    if np.all(T >= lo) and np.all(T <= hi) and np.abs(A @ T - tau_m).max() < RESIDUAL_TOL:
        return ForceDistribution(T, alpha, P, True, 0)
    if np.any(lo > hi):
        return ForceDistribution(np.clip(T, lo, np.maximum(lo, hi)), alpha, P, False, 0)
    T, converged, it = _box_projection(A, tau_m, T, lo, hi)
    # polish onto the affine set, then onto the box
    T = np.clip(T + Ap @ (tau_m - A @ T), lo, hi)
    feasible = bool(converged and np.abs(A @ T - tau_m).max() < RESIDUAL_TOL)
    return ForceDistribution(T, T - T0, P, feasible, it)


@dataclass
class FlatnessReport:
    """Per-sample outcome of :func:`flat_invert`.

    Excitation ``u[k]`` is held over ``[t[k], t[k + 1])``; arrays indexed by
    sample have ``K + 1`` rows, excitations and drive forces ``K`` rows.
    """

    t: np.ndarray
    y: np.ndarray
    yd: np.ndarray
    act: np.ndarray
    tensions: np.ndarray
    u: np.ndarray
    drive_ff: np.ndarray
    drive_ref: np.ndarray
    c1_ok: np.ndarray
    c2_ok: np.ndarray
    c3_ok: np.ndarray
    max_cond: float
    dt_ctrl: float
    model_name: str = ""
    notes: dict = field(default_factory=dict)

    @property
    def infeasible(self):
        """Sample indices where any condition failed."""
        bad = ~(self.c1_ok & self.c2_ok & self.c3_ok)
        return np.flatnonzero(bad)

    @property
    def feasible(self):
        return self.infeasible.size == 0

    def summary(self):
        return {
            "model": self.model_name,
            "samples": int(len(self.t)),
            "dt_ctrl": self.dt_ctrl,
            "feasible": bool(self.feasible),
            "c1_failures": int(np.sum(~self.c1_ok)),
            "c2_failures": int(np.sum(~self.c2_ok)),
            "c3_failures": int(np.sum(~self.c3_ok)),
            "infeasible_samples": self.infeasible.tolist(),
            "max_cond": None if not np.isfinite(self.max_cond) else float(self.max_cond),
            **self.notes,
        }

    def to_csv(self, path):
        n = self.y.shape[1]
        m = self.u.shape[1]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"y{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)]
                       + ["c1_ok", "c2_ok", "c3_ok"])
            for k, t in enumerate(self.t):
                u = self.u[min(k, len(self.u) - 1)]
                w.writerow([f"{t:.6f}"] + [f"{v:.12g}" for v in self.y[k]]
                           + [f"{v:.12g}" for v in u]
                           + [int(self.c1_ok[k]), int(self.c2_ok[k]), int(self.c3_ok[k])])

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _sample_chain(y, yd, ydd, tau_ext, model, cocontraction=0.15):
    """Torque, tension, activation and flags at one trajectory point."""
    fr = skeleton.frames(y, model)
    lengths, J = skeleton._muscle_geometry(fr, model)
    ms = MuscleState(lengths, J @ yd, None)
    tau = skeleton.rnea(y, yd, ydd, model, fr=fr)
    if tau_ext is not None:
        tau = tau - tau_ext
    rank = check_rank(y, model, J)
    p = model.hill
    fp = hill.force_passive(ms.length, p)
    fv = hill.force_velocity(ms.velocity, p)
    capacity = p.f_max * hill.force_length(ms.length, p)
    gain = capacity * fv
    alpha = cocontraction * capacity
    dist = (distribute_forces(tau, y, model, alpha=alpha, lower=fp, upper=fp + gain, J=J)
            if rank.ok else None)
    if dist is None:
        T = np.zeros(model.m)
        act = np.zeros(model.m)
        act_ok = False
    else:
        T = dist.tensions
        act, feas = hill.invert_hill(T, ms, p)
        act_ok = dist.feasible and bool(np.all(feas))
    return tau, T, act, rank, act_ok, bool(np.all(fv > 0))


def flat_invert(traj, model, dt_ctrl, loads=None, cocontraction=0.15):
    """Excitations that make ``model`` follow ``traj`` open loop.

    Parameters
    ----------
    traj : FlatTrajectory
    model : PlantModel
    dt_ctrl : float
        Control period; excitations are piecewise constant on this grid.
    loads : callable, optional
        ``loads(t) -> tau_ext`` external generalised force.
    cocontraction : float
        Null-space parameter ``alpha = cocontraction * f_max * F_L``, a
        fraction of the isometric capacity at the current length.  Zero gives
        the least co-contraction; a positive level keeps antagonists active
        so that activations never have to reach zero in finite time.

    Notes
    -----
    Activations are computed on the grid ``t_k = k dt_ctrl``.  The excitation
    held over ``[t_k, t_{k+1}]`` inverts the activation dynamics at the
    interval midpoint, with the activation rate taken as the central
    difference ``(act_{k+1} - act_k) / dt_ctrl``.  Direct-drive joints receive
    their inverse-dynamics force as feedforward.
    """
    if dt_ctrl <= 0:
        raise ValueError("dt_ctrl must be positive")
    K = int(round(traj.horizon / dt_ctrl))
    ts = np.arange(K + 1) * dt_ctrl
    n, m = model.n, model.m
    Y = np.empty((K + 1, n))
    YD = np.empty((K + 1, n))
    ACT = np.empty((K + 1, m))
    TEN = np.empty((K + 1, m))
    TAU = np.empty((K + 1, n))
    c1 = np.empty(K + 1, dtype=bool)
    c2 = np.empty(K + 1, dtype=bool)
    c3 = np.empty(K + 1, dtype=bool)
    max_cond = 0.0
    for k, t in enumerate(ts):
        y, yd, ydd, _ = traj(t)
        tau_ext = None if loads is None else np.asarray(loads(t), dtype=float)
        tau, T, act, rank, act_ok, fv_ok = _sample_chain(y, yd, ydd, tau_ext, model,
                                                         cocontraction)
        Y[k], YD[k], ACT[k], TEN[k], TAU[k] = y, yd, act, T, tau
        c1[k], c2[k], c3[k] = rank.ok, act_ok, fv_ok
        max_cond = max(max_cond, rank.cond)

    act_mid = 0.5 * (ACT[1:] + ACT[:-1])
    act_dot = (ACT[1:] - ACT[:-1]) / dt_ctrl
    U, u_ok = hill.invert_activation(act_mid, act_dot, model.hill)
    u_ok = np.all(u_ok, axis=1)
    c2[:-1] &= u_ok
    c2[1:] &= u_ok

    drv = [d.joint for d in model.direct_drives]
    drive_ff = 0.5 * (TAU[1:, drv] + TAU[:-1, drv])
    drive_ref = np.stack([0.5 * (Y[1:, drv] + Y[:-1, drv]),
                          0.5 * (YD[1:, drv] + YD[:-1, drv])], axis=-1)
    return FlatnessReport(ts, Y, YD, ACT, TEN, U, drive_ff, drive_ref, c1, c2, c3, max_cond,
                          dt_ctrl, model.name)


def simulate_open_loop(report, model, dt=1e-4, loads=None):
    """Forward-simulate the excitations in ``report`` from the flat initial state.

    Returns ``(t, q)`` sampled on the control grid.
    """
    nsub = int(round(report.dt_ctrl / dt))
    if nsub < 1 or abs(nsub * dt - report.dt_ctrl) > 1e-12:
        raise ValueError("dt_ctrl must be an integer multiple of dt")
    state = skeleton.SimState(report.y[0].copy(), report.yd[0].copy(), report.act[0].copy())
    Q = np.empty_like(report.y)
    Q[0] = state.q
    for k in range(len(report.u)):
        targets = [tuple(r) for r in report.drive_ref[k]] if len(model.driven) else None
        tau_ext = None if loads is None else np.asarray(loads(report.t[k]), dtype=float)
        state = skeleton.advance(state, report.u[k], model, dt, nsub, tau_ext=tau_ext,
                                 drive_targets=targets, drive_ff=report.drive_ff[k])
        Q[k + 1] = state.q
    return report.t, Q


def round_trip_rms(report, model, dt=1e-4, loads=None):
    """Joint RMS error (per joint, then max) of the open-loop replay."""
    _, Q = simulate_open_loop(report, model, dt, loads)
    return float(np.sqrt(np.mean((Q - report.y) ** 2, axis=0)).max())
