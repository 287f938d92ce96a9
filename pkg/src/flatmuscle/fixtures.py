"""Bundled plant models and smooth reference trajectories.

Running ``python -m flatmuscle.fixtures`` regenerates every file under
``flatmuscle/data``.  The trajectories stay inside the envelope where the
open-loop replay of each plant is stable (see :func:`flatmuscle.plants.arm3d`).
"""

import json
from pathlib import Path

import numpy as np

from . import plants
from .flatness import FlatTrajectory, load_trajectory_csv, write_trajectory_csv

DATA = Path(__file__).parent / "data"
TRAJ_DIR = DATA / "trajectories"
CSV_RATE = 200.0


def _min_jerk(waypoints, durations):
    """Rest-to-rest quintic blends through ``waypoints`` (n_points x n)."""
    w = np.asarray(waypoints, dtype=float)
    d = np.asarray(durations, dtype=float)
    starts = np.r_[0.0, np.cumsum(d)]

    def sampler(t):
        k = int(np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(d) - 1))
        T = d[k]
        s = np.clip((t - starts[k]) / T, 0.0, 1.0)
        dy = w[k + 1] - w[k]
        b = 10 * s**3 - 15 * s**4 + 6 * s**5
        b1 = (30 * s**2 - 60 * s**3 + 30 * s**4) / T
        b2 = (60 * s - 180 * s**2 + 120 * s**3) / T**2
        b3 = (60 - 360 * s + 360 * s**2) / T**3
        return w[k] + dy * b, dy * b1, dy * b2, dy * b3

    return FlatTrajectory(sampler, starts[-1])


def _sum_of_sines(offset, terms, horizon):
    """``offset + sum a sin(2 pi f t + ph)`` with ``terms`` a list of (a, f, ph)."""
    offset = np.asarray(offset, dtype=float)

    def sampler(t):
        out = [offset.copy(), 0.0 * offset, 0.0 * offset, 0.0 * offset]
        for a, f, ph in terms:
            a = np.asarray(a, dtype=float)
            w = 2 * np.pi * np.asarray(f, dtype=float)
            s, c = np.sin(w * t + ph), np.cos(w * t + ph)
            out[0] = out[0] + a * s
            out[1] = out[1] + a * w * c
            out[2] = out[2] - a * w**2 * s
            out[3] = out[3] - a * w**3 * c
        return tuple(out)

    return FlatTrajectory(sampler, horizon)


_ARM_READY = np.array(plants.ARM3D_READY)

TRAJECTORIES = {
    "pend1": {
        "sine": lambda: FlatTrajectory.sinusoid([0.3], [0.5], horizon=4.0),
        "two_tone": lambda: _sum_of_sines([0.0], [([0.2], [0.4], 0.0), ([0.08], [1.1], 0.5)], 4.0),
        "offset_sine": lambda: FlatTrajectory.sinusoid([0.25], [0.6], offset=[0.4], horizon=4.0),
        "reach": lambda: _min_jerk([[0.0], [0.6], [-0.4], [0.0]], [1.2, 1.4, 1.2]),
        "fast_sine": lambda: FlatTrajectory.sinusoid([0.15], [1.0], horizon=3.0),
    },
    "arm3d": {
        "slow": lambda: FlatTrajectory.sinusoid(
            [0.05, 0.05, 0.3, 0.2, 0.2], [0.2, 0.25, 0.3, 0.35, 0.4], offset=_ARM_READY,
            horizon=4.0),
        "mixed": lambda: FlatTrajectory.sinusoid(
            [0.05, 0.05, 0.4, 0.25, 0.25], [0.4, 0.3, 0.5, 0.6, 0.7],
            offset=[0.0, 0.0, 0.0, 0.6, -0.4], horizon=4.0),
        "yaw_sweep": lambda: FlatTrajectory.sinusoid(
            [0.0, 0.0, 0.6, 0.0, 0.0], [0.5] * 5, offset=[0.0, 0.0, 0.0, 0.6, -0.5],
            horizon=4.0),
        "reach": lambda: _min_jerk(
            [_ARM_READY, [0.1, 0.2, 0.5, 0.4, -0.2], [-0.1, -0.2, -0.4, 0.8, -0.5], _ARM_READY],
            [1.2, 1.4, 1.2]),
        "strike": lambda: _min_jerk(
            [_ARM_READY, [0.0, 0.0, -0.4, 0.7, -0.5], [0.05, 0.0, 0.4, 0.5, -0.2],
             [0.0, 0.0, -0.4, 0.7, -0.5], _ARM_READY],
            [0.8, 0.6, 0.8, 0.8]),
    },
}


# Necessity witnesses: ``(model, trajectory)`` pairs that must fail one condition.
# C1: muscles that cannot produce joint torque.  C2: a swing whose inertial
# torque (about 70 N m) is several times what the PEND1 pair can deliver.
WITNESSES = {
    "c1": ("rankdef", lambda: FlatTrajectory.sinusoid([0.3], [0.5], horizon=2.0)),
    "c2": ("pend1", lambda: FlatTrajectory.sinusoid([0.8], [3.0], horizon=0.35)),
}


def witness_path(condition):
    return TRAJ_DIR / f"witness_{condition}.csv"


def witness(condition):
    """Bundled witness for ``condition`` as ``(PlantModel name, FlatTrajectory)``."""
    model, _ = WITNESSES[condition]
    return model, load_trajectory_csv(witness_path(condition))


def trajectory_path(plant, name):
    return TRAJ_DIR / f"{plant}_{name}.csv"


def bundled_trajectories(plant):
    """Load the bundled CSV trajectories of ``plant`` as ``{name: FlatTrajectory}``."""
    return {name: load_trajectory_csv(trajectory_path(plant, name))
            for name in TRAJECTORIES[plant]}


def main():
    for name, builder in plants.BUILDERS.items():
        (DATA / f"{name}.json").write_text(json.dumps(builder(), indent=2) + "\n")
    TRAJ_DIR.mkdir(parents=True, exist_ok=True)
    for plant, table in TRAJECTORIES.items():
        for name, make in table.items():
            write_trajectory_csv(trajectory_path(plant, name), make(), rate=CSV_RATE)
    for cond, (_, make) in WITNESSES.items():
        write_trajectory_csv(witness_path(cond), make(), rate=CSV_RATE)


if __name__ == "__main__":
    main()
