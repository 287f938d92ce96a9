"""Builders for the bundled reference plants.

``pend1``
    One revolute joint about the world y axis (``q = 0`` hangs straight down)
    with a flexor/extensor pair of 0.05 m moment arm at ``q = 0``.
``arm3d``
    Prismatic x/y base on direct drives plus shoulder yaw, shoulder pitch and
    elbow pitch, actuated by six monoarticular and two biarticular muscles.
    The racket face sits at the forearm tip with its normal along the forearm.
``rankdef``
    PEND1 geometry with both muscles anchored to the world, so the muscles
    cannot produce any joint torque.

The JSON files in ``flatmuscle/data`` are generated from these builders.
"""

import itertools

import numpy as np

from .skeleton import FORMAT_VERSION, PlantModel, muscle_lengths

PEND1_MOMENT_ARM = 0.05


def _hill(f_max, l_min, l_opt, l_max, **kw):
    return dict(f_max=f_max, l_min=l_min, l_opt=l_opt, l_max=l_max, **kw)


def pend1(fp_stiffness=1.0, gravity=9.81):
    # Both muscles insert on the rod below the hinge and run to world anchors
    # on either side; length 0.5 m and moment arm 0.05 m at q = 0.  Each
    # moment arm changes sign about 1.03 rad away from the hanging pose, so
    # beyond that both muscles lift and the pair still has full rank.
    hp = _hill(200.0, 0.3, 0.5, 0.7, fp_stiffness=fp_stiffness)
    insertion = {"link": 0, "point": [0.0, 0.0, -0.0625]}
    return {
        "format": FORMAT_VERSION,
        "name": "PEND1",
        "gravity": [0.0, 0.0, -gravity],
        "links": [{"name": "rod", "mass": 1.0, "length": 0.6, "com": [0.0, 0.0, -0.5],
                   "inertia": 0.01}],
        "joints": [{"name": "hinge", "type": "revolute", "axis": [0.0, 1.0, 0.0],
                    "origin": [0.0, 0.0, 0.0], "limits": [-2.2, 2.2]}],
        "muscles": [
            {"name": "flexor", "hill": hp,
             "path": [{"link": -1, "point": [-0.4, 0.0, 0.2375]}, dict(insertion)]},
            {"name": "extensor", "hill": hp,
             "path": [{"link": -1, "point": [0.4, 0.0, 0.2375]}, dict(insertion)]},
        ],
        "direct_drives": [],
    }


def rankdef():
    d = pend1(fp_stiffness=0.0)
    d["name"] = "RANKDEF"
    for mu in d["muscles"]:
        for v in mu["path"]:
            v["link"] = -1
    return d


# ARM3D geometry
ARM3D_BASE = (-2.05, 0.0, 0.0)
ARM3D_SHOULDER_HEIGHT = 0.3
ARM3D_UPPER = 0.28
ARM3D_FOREARM = 0.3
ARM3D_RACKET = 0.32
ARM3D_READY = (0.0, 0.0, 0.0, 0.6, -0.6)

_ARM3D_PATHS = {
    # name: (f_max, [(link, point), ...])
    "yaw_left": (400.0, [(1, [-0.15, 0.04, ARM3D_SHOULDER_HEIGHT]), (2, [0.0, 0.04, 0.0])]),
    "yaw_right": (400.0, [(1, [-0.15, -0.04, ARM3D_SHOULDER_HEIGHT]), (2, [0.0, -0.04, 0.0])]),
    "shoulder_up": (600.0, [(2, [0.0, 0.0, 0.1]), (3, [0.06, 0.0, 0.0])]),
    "shoulder_down": (600.0, [(2, [0.0, 0.0, -0.1]), (3, [0.06, 0.0, 0.0])]),
    "elbow_up": (300.0, [(3, [0.22, 0.0, 0.05]), (4, [0.06, 0.0, 0.0])]),
    "elbow_down": (300.0, [(3, [0.30, 0.0, -0.06]), (4, [0.06, 0.0, 0.0])]),
    "biarticular_up": (200.0, [(2, [0.0, 0.0, 0.1]), (4, [0.05, 0.0, 0.02])]),
    "biarticular_down": (200.0, [(2, [0.0, 0.0, -0.1]), (4, [0.05, 0.0, -0.02])]),
}


def _arm3d_skeleton():
    return {
        "format": FORMAT_VERSION,
        "name": "ARM3D",
        "gravity": [0.0, 0.0, -9.81],
        "links": [
            {"name": "carriage", "mass": 8.0, "length": 0.0, "com": [0.0, 0.0, 0.0],
             "inertia": 0.1},
            {"name": "torso", "mass": 8.0, "length": 0.0, "com": [0.0, 0.0, 0.15],
             "inertia": 0.1},
            {"name": "shoulder", "mass": 0.3, "length": 0.0, "com": [0.0, 0.0, 0.0],
             "inertia": 0.0005},
            {"name": "upper_arm", "mass": 1.2, "length": ARM3D_UPPER,
             "com": [ARM3D_UPPER / 2, 0.0, 0.0], "inertia": [0.001, 0.008, 0.008]},
            {"name": "forearm", "mass": 0.6, "length": ARM3D_FOREARM, "com": [0.18, 0.0, 0.0],
             "inertia": [0.001, 0.006, 0.006]},
        ],
        "joints": [
            {"name": "base_x", "type": "prismatic", "axis": [1, 0, 0],
             "origin": list(ARM3D_BASE), "limits": [-0.35, 0.35]},
            {"name": "base_y", "type": "prismatic", "axis": [0, 1, 0],
             "origin": [0, 0, 0], "limits": [-0.6, 0.6]},
            {"name": "shoulder_yaw", "type": "revolute", "axis": [0, 0, 1],
             "origin": [0, 0, ARM3D_SHOULDER_HEIGHT], "limits": [-1.2, 1.2]},
            {"name": "shoulder_pitch", "type": "revolute", "axis": [0, 1, 0],
             "origin": [0, 0, 0], "limits": [-1.3, 1.3]},
            {"name": "elbow", "type": "revolute", "axis": [0, 1, 0],
             "origin": [ARM3D_UPPER, 0, 0], "limits": [-1.6, 0.4]},
        ],
        "direct_drives": [
            {"joint": 0, "force_limit": 400.0, "kp": 2000.0, "kd": 250.0},
            {"joint": 1, "force_limit": 400.0, "kp": 2000.0, "kd": 250.0},
        ],
        "end_effector": {"link": 4, "point": [ARM3D_RACKET, 0.0, 0.0], "normal": [1.0, 0.0, 0.0],
                         "radius": 0.085},
    }


def arm3d():
    """ARM3D model dict; muscle length ranges are fitted to the joint ranges.

    Open-loop replay is stable for shoulder pitch in about ``[0.3, 0.9]`` and
    forearm pitch ``q3 + q4`` in ``[0, 0.6]`` with co-contraction 0.15.
    """
    d = _arm3d_skeleton()
    d["muscles"] = [{"name": k, "hill": _hill(1.0, 0.1, 0.2, 0.3),
                     "path": [{"link": lk, "point": p} for lk, p in path]}
                    for k, (_, path) in _ARM3D_PATHS.items()]
    model = PlantModel.from_dict(d)
    grids = [np.linspace(lo, hi, 9) for lo, hi in zip(model.lower[2:], model.upper[2:])]
    samples = np.array([muscle_lengths(np.r_[0.0, 0.0, g], model)
                        for g in itertools.product(*grids)])
    for k, (name, (f_max, _)) in enumerate(_ARM3D_PATHS.items()):
        lo, hi = samples[:, k].min(), samples[:, k].max()
        # l_opt near the top of the range keeps the working region on the
        # ascending limb, whose positive stiffness stabilises the open loop
        d["muscles"][k]["hill"] = _hill(f_max, round(0.9 * lo, 4), round(lo + 0.9 * (hi - lo), 4),
                                        round(1.1 * hi, 4), fl_width=0.3, fp_stiffness=0.2)
    return d


BUILDERS = {"pend1": pend1, "arm3d": arm3d, "rankdef": rankdef}


def reference_model(name, **kw):
    """Build a reference :class:`PlantModel` by name."""
    return PlantModel.from_dict(BUILDERS[name](**kw))
