"""From a serve to a racket command, and one scripted strike.

The planner predicts where the served ball crosses the hitting plane, draws a
return that lands in the target box and derives the racket state that
produces it.  The harness then plays the episode with the scripted
controller and K-MAC on ARM3D.
"""

import numpy as np

from flatmuscle import harness, planner

sc = harness.load_scenario(harness.bundled_scenario("single"))
rng = np.random.default_rng(sc.seed)
ball = harness.sample_serve(sc.serve, sc.table, sc.planner.plane_x, rng)
print("serve  p =", np.round(ball.p, 3), " v =", np.round(ball.v, 3))

cmd = planner.plan(ball, sc.planner, sc.table, rng)
print(f"strike at t={cmd.t_strike:.3f} s, p_hat={np.round(cmd.p_hat, 3)}")
print("racket velocity", np.round(cmd.v_hat, 3), " face normal", np.round(cmd.normal, 3))

# the ball leaving a racket that sits exactly at the command
v_out = planner.restitute(cmd.v_in, cmd.v_hat, cmd.normal, sc.planner.c_r)
print("outgoing ball velocity", np.round(v_out, 3), " planned", np.round(cmd.v_out, 3))

log = harness.run_episode(sc, seed=sc.seed)
print("episode outcome:", log.outcome)
for ev in log.events:
    if ev["type"] in ("hit", "bounce", "end"):
        print(f"  {ev['type']:6s} t={ev['t']:.3f}")
