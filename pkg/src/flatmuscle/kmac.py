"""Kinematics-based muscle actuation control (K-MAC).

Target joint positions become target muscle lengths through the forward
kinematics; a PD law on each muscle's length error gives a commanded
tension, clipped to what a muscle can do (pull, up to ``f_max``), and the
inverted Hill law turns that tension into an excitation.
"""

from dataclasses import dataclass

import numpy as np

from . import hill, skeleton

MODES = ("static", "rate-compensated")


@dataclass(frozen=True)
class KmacGains:
    """PD gains on normalised muscle length.

    ``kp`` multiplies the length error in units of the muscle's length range
    ``l_max - l_min``; ``kd`` the lengthening velocity in the same units per
    second.
    """

    kp: float = 5.0
    kd: float = 1.0
    mode: str = "static"

    def __post_init__(self):
        if not self.kp > 0:
            raise ValueError("kp must be positive")
        if not self.kd >= 0:
            raise ValueError("kd must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class KmacOutput:
    u: np.ndarray
    tension: np.ndarray
    act: np.ndarray
    feasible: np.ndarray
    clamped: bool


def target_lengths(q_star, model):
    """Muscle lengths at ``q_star``; returns ``(lengths, clamped)``.

    Targets outside the joint limits are clamped to them first.
    """
    q_star = np.asarray(q_star, dtype=float)
    q = np.clip(q_star, model.lower, model.upper)
    return skeleton.compiled_muscle_lengths(q, model), bool(np.any(q != q_star))


def pd_force(l_star, l, ldot, gains, p):
    """Commanded tension (N), in ``[0, f_max]``.

    A muscle pulls only when it is longer than its target or lengthening.
    """
    raw = p.f_max * (gains.kp * (np.asarray(l_star) - l) - gains.kd * np.asarray(ldot)) / p.delta_l
    return np.clip(-raw, 0.0, p.f_max)


def kmac_step(q_star, muscles, gains, model, prev_act=None, dt_ctrl=None):
    """Excitations driving ``model`` towards ``q_star``.

    Parameters
    ----------
    q_star : ndarray
        Target joint positions (direct-drive entries are ignored).
    muscles : MuscleState
        Current lengths and velocities; activations are not used.
    gains : KmacGains
    model : PlantModel
    prev_act, dt_ctrl : optional
        Previous commanded activation and control period, used by the
        ``rate-compensated`` mode to difference the activation command.

    Returns
    -------
    KmacOutput
    """
    p = model.hill
    l_star, clamped = target_lengths(q_star, model)
    T = pd_force(l_star, muscles.length, muscles.velocity, gains, p)
    act, feas = hill.invert_hill(T, muscles, p)
    if gains.mode == "static" or prev_act is None:
        u = act
    else:
        if not dt_ctrl or dt_ctrl <= 0:
            raise ValueError("rate-compensated mode needs a positive dt_ctrl")
        u, feas_u = hill.invert_activation(act, (act - prev_act) / dt_ctrl, p)
        feas = feas & feas_u
    return KmacOutput(np.clip(u, 0.0, 1.0), T, act, feas, clamped)


class Kmac:
    """K-MAC controller for one robot; keeps the previous activation command."""

    def __init__(self, model, gains=None, dt_ctrl=1e-3):
        self.model = model
        self.gains = gains or KmacGains()
        self.dt_ctrl = dt_ctrl
        self.prev_act = None
        self.infeasible_steps = 0

    def reset(self):
        self.prev_act = None
        self.infeasible_steps = 0

    def __call__(self, q_star, state, muscles=None):
        ms = skeleton.muscle_state(state, self.model)[0] if muscles is None else muscles
        out = kmac_step(q_star, ms, self.gains, self.model, self.prev_act, self.dt_ctrl)
        self.prev_act = out.act
        self.infeasible_steps += int(not np.all(out.feasible))
        return out.u


def realized_tension(T_cmd, muscles, p):
    """Tension a muscle actually develops when K-MAC commands ``T_cmd``.

    The Hill inversion clips activation to ``[0, 1]``, so the result is
    ``T_cmd`` clipped to ``[F_P, F_P + f_max F_L F_V]``.
    """
    fp = hill.force_passive(muscles.length, p)
    gain = p.f_max * hill.force_length(muscles.length, p) * hill.force_velocity(muscles.velocity, p)
    return np.clip(T_cmd, fp, fp + gain)


def kmac_inverse(tau, state, gains, model, max_iter=30, tol=1e-9, muscles=None, d0=None):
    """Target joint positions for which static K-MAC produces joint torque ``tau``.

    Only the muscle-driven joints are solved for; the remaining entries of
    the result equal the current positions.  The target muscle lengths are
    linearised about the current pose, ``l* = l + J (q* - q)``, which makes
    the realised torque a monotone piecewise-linear function of ``q* - q``;
    it is solved by a damped semismooth Newton iteration.

    ``muscles`` may pass a precomputed ``(MuscleState, J)`` and ``d0`` a
    starting guess for the muscle-joint offsets ``q* - q``.

    Returns
    -------
    q_star : ndarray
    residual : float
        Infinity norm of the torque mismatch (N m) at the returned target.
    """
    from . import _kernels
    ms, J = skeleton.muscle_state(state, model) if muscles is None else muscles
    p = model.hill
    mj = model.muscle_joints
    Jm = np.ascontiguousarray(J[:, mj])
    tau = np.asarray(tau, dtype=float)[mj]
    f_max = np.broadcast_to(np.asarray(p.f_max, dtype=float), ms.length.shape).copy()
    c = f_max * gains.kp / p.delta_l
    b = gains.kd * ms.velocity / gains.kp
    fp, gain = _kernels.hill_terms(ms.length, ms.velocity, skeleton.packed(model).hill)
    top = np.minimum(f_max, fp + gain)
    lo = np.maximum(fp, 0.0)
    d = np.zeros(len(mj)) if d0 is None else np.asarray(d0, dtype=float)
    d, nr = _kernels.kmac_solve(c, b, Jm, tau, lo, top, f_max, d, max_iter, tol)
    q_star = np.asarray(state.q, dtype=float).copy()
    q_star[mj] += d
    return q_star, float(nr)
