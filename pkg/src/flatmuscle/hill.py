"""Hill-type muscle force production and activation dynamics.

Tensions are reported as non-negative pulling forces ``T``.  The MuJoCo-style
actuator force is ``f = -T`` and joint torques follow ``tau = -J_m^T T``.

Every function broadcasts over numpy arrays, so a :class:`HillParams` whose
fields are length-``m`` arrays evaluates a whole muscle set at once.
"""

from dataclasses import dataclass, fields

import numpy as np

#: Round-off allowance of the feasibility flags in the inverse maps.
FEAS_TOL = 1e-9

#: Lower clamp of the force-velocity gain.  Keeps the gain bounded away from
#: zero so the tension can always be inverted for activation.
FV_FLOOR = 0.05


@dataclass(frozen=True)
class HillParams:
    """Parameters of one Hill-type muscle (or a stacked muscle set).

    Parameters
    ----------
    f_max : float
        Peak isometric force (N).
    l_min, l_opt, l_max : float
        Minimum, optimal and maximum muscle length (m).
    tau_act, tau_deact : float
        Activation and deactivation time constants (s).
    fl_width : float
        Width of the Gaussian force-length curve, in units of ``l_opt``.
    fv_shape : float
        Curvature of the Hill hyperbola.
    fv_ceiling : float
        Eccentric force-velocity saturation (>= 1).
    fp_stiffness : float
        Passive force at ``l_max`` as a fraction of ``f_max``.
    vmax : float
        Maximum shortening velocity in optimal lengths per second.
    """

    f_max: float
    l_min: float
    l_opt: float
    l_max: float
    tau_act: float = 0.01
    tau_deact: float = 0.04
    fl_width: float = 0.45
    fv_shape: float = 0.25
    fv_ceiling: float = 1.4
    fp_stiffness: float = 1.0
    vmax: float = 10.0

    def __post_init__(self):
        a = {f.name: np.asarray(getattr(self, f.name), dtype=float) for f in fields(self)}
        checks = [
            (a["f_max"] > 0, "f_max must be positive"),
            ((0 < a["l_min"]) & (a["l_min"] < a["l_opt"]) & (a["l_opt"] < a["l_max"]),
             "lengths must satisfy 0 < l_min < l_opt < l_max"),
            ((a["tau_act"] > 0) & (a["tau_deact"] > 0), "time constants must be positive"),
            (a["fv_ceiling"] >= 1, "fv_ceiling must be >= 1"),
            (a["fl_width"] > 0, "fl_width must be positive"),
            ((a["fv_shape"] > 0) & (a["vmax"] > 0), "fv_shape and vmax must be positive"),
            (a["fp_stiffness"] >= 0, "fp_stiffness must be non-negative"),
        ]
        for ok, msg in checks:
            if not np.all(ok):
                raise ValueError(msg)

    @property
    def delta_l(self):
        """Length range ``l_max - l_min``."""
        return np.subtract(self.l_max, self.l_min)

    @classmethod
    def stack(cls, params):
        """Combine per-muscle parameters into one vectorised set."""
        params = list(params)
        return cls(**{f.name: np.array([getattr(p, f.name) for p in params], dtype=float)
                      for f in fields(cls)})

    def __getitem__(self, i):
        return HillParams(**{f.name: float(np.asarray(getattr(self, f.name))[i])
                             for f in fields(self)})

    def to_dict(self):
        return {f.name: np.asarray(getattr(self, f.name)).tolist() for f in fields(self)}


@dataclass
class MuscleState:
    """Length (m), lengthening velocity (m/s) and activation of a muscle set."""

    length: np.ndarray
    velocity: np.ndarray
    activation: np.ndarray


def force_length(l, p):
    """Active force-length gain, a Gaussian peaking at 1 when ``l = l_opt``."""
    x = (np.asarray(l) / p.l_opt - 1.0) / p.fl_width
    return np.exp(-x * x)


def force_velocity(ldot, p):
    """Force-velocity gain, monotone in ``ldot`` and clamped to ``[FV_FLOOR, fv_ceiling]``.

    Shortening (``ldot < 0``) follows the Hill hyperbola ``(1 - v)/(1 + v/k)``
    with ``v`` the shortening speed normalised by ``vmax * l_opt``.  Lengthening
    mirrors the same hyperbola towards ``fv_ceiling``.
    """
    ldot = np.asarray(ldot, dtype=float)
    v = np.abs(ldot) / (p.vmax * p.l_opt)
    hyp = (1.0 - v) / (1.0 + v / p.fv_shape)
    gain = np.where(ldot < 0, hyp, p.fv_ceiling - (p.fv_ceiling - 1.0) * hyp)
    return np.clip(gain, FV_FLOOR, p.fv_ceiling)


def force_passive(l, p):
    """Passive tension (N): zero up to ``l_opt``, quadratic beyond."""
    x = np.maximum(np.asarray(l) - p.l_opt, 0.0) / (p.l_max - p.l_opt)
    return p.f_max * p.fp_stiffness * x * x


def hill_tension(act, state, p):
    """Muscle tension ``act * f_max * F_L * F_V + F_P`` (N, >= 0)."""
    return (np.asarray(act) * p.f_max * force_length(state.length, p)
            * force_velocity(state.velocity, p) + force_passive(state.length, p))


def invert_hill(tension, state, p):
    """Activation that produces ``tension`` in ``state``.

    Returns
    -------
    act : ndarray
        Activation clamped to ``[0, 1]``.
    feasible : ndarray of bool
        False where the unclamped activation left ``[0, 1]``.
    """
    gain = p.f_max * force_length(state.length, p) * force_velocity(state.velocity, p)
    excess = np.asarray(tension, dtype=float) - force_passive(state.length, p)
    # far from l_opt the gain underflows; no activation then changes the tension
    excess, gain = np.broadcast_arrays(excess, gain)
    dead = gain <= 0.0
    raw = np.where(dead, np.where(np.abs(excess) <= FEAS_TOL, 0.0, np.copysign(np.inf, excess)),
                   excess / np.where(dead, 1.0, gain))
    feasible = (raw >= -FEAS_TOL) & (raw <= 1.0 + FEAS_TOL)
    return np.clip(raw, 0.0, 1.0), feasible


def _rate_scale(act):
    return 0.5 + 1.5 * np.asarray(act)


def activation_rate(act, u, p):
    """Time derivative of activation (1/s).

    The time constant is ``tau_act * (0.5 + 1.5 act)`` while excitation exceeds
    activation and ``tau_deact / (0.5 + 1.5 act)`` otherwise (``u == act``
    included).
    """
    act = np.asarray(act, dtype=float)
    u = np.asarray(u, dtype=float)
    s = _rate_scale(act)
    tau = np.where(u - act > 0, p.tau_act * s, p.tau_deact / s)
    return (u - act) / tau


def invert_activation(act, act_dot, p):
    """Excitation that yields ``act_dot`` at activation ``act``.

    Returns the excitation clamped to ``[0, 1]`` and a feasibility flag that is
    False where the unclamped value left that interval.
    """
    act = np.asarray(act, dtype=float)
    act_dot = np.asarray(act_dot, dtype=float)
    s = _rate_scale(act)
    u_up = act + act_dot * p.tau_act * s
    u_down = act + act_dot * p.tau_deact / s
    raw = np.where(u_up > act, u_up, u_down)
    feasible = (raw >= -FEAS_TOL) & (raw <= 1.0 + FEAS_TOL)
    return np.clip(raw, 0.0, 1.0), feasible


def integrate_activation(act, u, p, dt):
    """Advance activation by one RK4 step of length ``dt`` with excitation held."""
    k1 = activation_rate(act, u, p)
    k2 = activation_rate(act + 0.5 * dt * k1, u, p)
    k3 = activation_rate(act + 0.5 * dt * k2, u, p)
    k4 = activation_rate(act + dt * k3, u, p)
    return np.clip(act + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), 0.0, 1.0)
