"""Scripted racket controller standing in for a learned policy.

On each command the controller solves the inverse kinematics of the strike
pose (racket centre at ``p_hat``, face normal along the command normal),
maps the commanded racket velocity to joint velocities and plans a
minimum-jerk (quintic) joint trajectory that reaches the strike pose at the
strike time, followed by a quintic back to the ready pose.  Tracking uses
computed torque, and the torque is handed to the muscles through K-MAC by
choosing the joint targets that make K-MAC produce it.
"""

from dataclasses import dataclass

import numpy as np

from . import kmac, skeleton


def quintic(t0, t1, x0, v0, a0, x1, v1, a1):
    """Coefficients (6 x n) of the quintic matching position, velocity and
    acceleration at both ends of ``[t0, t1]``; evaluate with :func:`eval_quintic`."""
    T = t1 - t0
    x0, v0, a0, x1, v1, a1 = (np.asarray(a, dtype=float) for a in (x0, v0, a0, x1, v1, a1))
    c0, c1, c2 = x0, v0, 0.5 * a0
    h = x1 - (c0 + c1 * T + c2 * T**2)
    hv = v1 - (c1 + 2 * c2 * T)
    ha = a1 - 2 * c2
    c3 = (10 * h - 4 * hv * T + 0.5 * ha * T**2) / T**3
    c4 = (-15 * h + 7 * hv * T - ha * T**2) / T**4
    c5 = (6 * h - 3 * hv * T + 0.5 * ha * T**2) / T**5
    return np.array([c0, c1, c2, c3, c4, c5])


def eval_quintic(c, s):
    """Position, velocity and acceleration of quintic ``c`` at local time ``s``."""
    p = c[0] + s * (c[1] + s * (c[2] + s * (c[3] + s * (c[4] + s * c[5]))))
    v = c[1] + s * (2 * c[2] + s * (3 * c[3] + s * (4 * c[4] + s * 5 * c[5])))
    a = 2 * c[2] + s * (6 * c[3] + s * (12 * c[4] + s * 20 * c[5]))
    return p, v, a


def solve_ik(p_target, n_target, model, q0, damping=1e-3, tol=1e-10, max_iter=100):
    """Damped least-squares IK for racket position and face normal.

    Returns ``(q, err)`` with ``err`` the final residual norm.  Iterates are
    kept inside the joint limits.
    """
    q = np.clip(np.asarray(q0, dtype=float).copy(), model.lower, model.upper)
    lam2 = damping**2
    err = np.inf
    for _ in range(max_iter):
        p, n, Jp, Jn = skeleton.end_effector_jacobian(q, model)
        r = np.r_[p_target - p, n_target - n]
        err = np.linalg.norm(r)
        if err < tol:
            break
        J = np.vstack([Jp, Jn])
        dq = J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(6), r)
        q = np.clip(q + dq, model.lower, model.upper)
    return q, err


def strike_velocity(q, v_hat, model):
    """Joint velocity giving racket velocity ``v_hat`` with a non-rotating face."""
    _, _, Jp, Jn = skeleton.end_effector_jacobian(q, model)
    J = np.vstack([Jp, Jn])
    return np.linalg.lstsq(J, np.r_[v_hat, np.zeros(3)], rcond=None)[0]


@dataclass
class Observation:
    """What a controller sees at a control tick, in its robot's own frame."""

    t: float
    state: object
    ball: object = None
    command: object = None


@dataclass
class Action:
    """Controller output: K-MAC joint targets plus direct-drive servo inputs.

    ``muscles`` optionally forwards the ``MuscleState`` the controller already
    computed for this state so K-MAC does not recompute it.
    """

    q_star: np.ndarray
    drive_targets: list = None
    drive_ff: np.ndarray = None
    muscles: object = None


class HoldController:
    """Holds a fixed pose and ignores commands."""

    def __init__(self, model, pose):
        self.model = model
        self.pose = np.asarray(pose, dtype=float)

    def reset(self):
        pass

    def __call__(self, obs):
        drv = [d.joint for d in self.model.direct_drives]
        return Action(self.pose.copy(), [(self.pose[j], 0.0) for j in drv],
                      np.zeros(len(drv)))


class ScriptedController:
    """Quintic strike-and-return tracking through computed torque.

    Each new command in the observation triggers a replan.  The returned
    targets are the joint positions for which K-MAC reproduces the
    computed-torque demand.

    Parameters
    ----------
    model : PlantModel
    ready : ndarray
        Joint pose held between strikes.
    gains : KmacGains
        Gains of the K-MAC layer the targets are meant for.
    kp, kd : float
        Computed-torque feedback gains (1/s^2, 1/s).
    return_time : float
        Duration of the quintic from the strike back to ``ready``.
    """

    def __init__(self, model, ready, gains=None, kp=400.0, kd=40.0, return_time=0.6):
        self.model = model
        self.ready = np.asarray(ready, dtype=float)
        self.gains = gains or kmac.KmacGains()
        self.kp, self.kd = kp, kd
        self.return_time = return_time
        self.reset()

    def reset(self):
        self.segments = []
        self.ik_error = 0.0
        self._cmd = None
        self._offset = None

    def command(self, cmd, t, state):
        """Plan the strike for ``cmd`` starting from ``state`` at time ``t``."""
        if cmd is None or cmd.t_strike <= t + 0.05:
            return False
        q_s, self.ik_error = solve_ik(cmd.p_hat, cmd.normal, self.model, self.ready)
        qd_s = strike_velocity(q_s, cmd.v_hat, self.model)
        q0, qd0, qdd0 = self.reference(t)
        z = np.zeros_like(q0)
        t1 = cmd.t_strike
        t2 = t1 + self.return_time
        self.segments = [(t, t1, quintic(t, t1, q0, qd0, qdd0, q_s, qd_s, z)),
                         (t1, t2, quintic(t1, t2, q_s, qd_s, z, self.ready, z, z))]
        return True

    def reference(self, t):
        """Reference ``(q, qd, qdd)`` at time ``t``."""
        for t0, t1, c in self.segments:
            if t0 <= t <= t1:
                return eval_quintic(c, t - t0)
        z = np.zeros_like(self.ready)
        return self.ready.copy(), z, z

    def __call__(self, obs):
        if obs.command is not None and obs.command is not self._cmd:
            self._cmd = obs.command
            self.command(obs.command, obs.t, obs.state)
        m, state = self.model, obs.state
        q_ref, qd_ref, qdd_ref = self.reference(obs.t)
        qdd = qdd_ref + self.kp * (q_ref - state.q) + self.kd * (qd_ref - state.qd)
        tau, ms, J = skeleton.control_terms(state, qdd, m)
        q_star, _ = kmac.kmac_inverse(tau, state, self.gains, m, muscles=(ms, J),
                                      d0=self._offset)
        self._offset = (q_star - state.q)[m.muscle_joints]
        drv = [d.joint for d in m.direct_drives]
        return Action(q_star, [(q_ref[j], qd_ref[j]) for j in drv], tau[drv], ms)
