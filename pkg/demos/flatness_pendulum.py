"""Open-loop excitations for a swinging pendulum.

A 0.3 rad, 0.5 Hz swing of PEND1 is inverted into muscle excitations, which
are then replayed on the plant without any feedback.  The replay should
follow the swing to a few hundredths of a milliradian.
"""

import numpy as np

from flatmuscle import flatness, skeleton
from flatmuscle.flatness import FlatTrajectory

model = skeleton.load_model("pend1")
traj = FlatTrajectory.sinusoid([0.3], [0.5], horizon=4.0)

report = flatness.flat_invert(traj, model, dt_ctrl=1e-3)
print(f"feasible at every sample: {report.feasible}")
print(f"worst condition number of the moment matrix: {report.max_cond:.2f}")

t, q = flatness.simulate_open_loop(report, model, dt=1e-4)
err = q[:, 0] - report.y[:, 0]
print(f"open-loop RMS error: {np.sqrt(np.mean(err ** 2)):.2e} rad")

# a few samples of the flexor/extensor excitations
for k in range(0, len(report.u), 500):
    u = report.u[k]
    print(f"t={t[k]:4.1f} s  q={report.y[k, 0]:+.3f}  u_flexor={u[0]:.3f}  u_extensor={u[1]:.3f}")

# the same swing on a model whose muscles cannot move the joint
rd = skeleton.load_model("rankdef")
bad = flatness.flat_invert(traj, rd, dt_ctrl=1e-3)
print(f"rank-deficient model: {int(np.sum(~bad.c1_ok))} of {len(bad.t)} samples fail C1")
