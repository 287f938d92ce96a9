"""K-MAC driving PEND1 to a target angle, for three proportional gains.

Without gravity the pendulum settles at the target; a larger gain gets there
with more co-contraction and so spends more activation.
"""

import numpy as np

from flatmuscle import kmac, plants, skeleton
from flatmuscle.kmac import KmacGains

model = plants.reference_model("pend1", gravity=0.0)
target = np.array([0.3])

for kp in (2.0, 5.0, 10.0):
    ctl = kmac.Kmac(model, KmacGains(kp=kp), dt_ctrl=1e-3)
    state = model.initial_state()
    acts = []
    for _ in range(2000):
        u = ctl(target, state)
        state = skeleton.advance(state, u, model, 1e-4, nsub=10)
        acts.append(state.act.mean())
    print(f"kp={kp:4.1f}  q(2 s)={state.q[0]:.4f} rad  "
          f"mean activation over the last second={np.mean(acts[1000:]):.4f}")
