"""Two mirrored ARM3D robots keeping a rally going.

Each return is planned to cross the opponent's hitting plane inside the same
box the serves come through.  Prints the rally length and where the returns
crossed for a handful of seeds.
"""

import numpy as np

from flatmuscle import harness

sc = harness.load_scenario(harness.bundled_scenario("dual"))
lengths = []
for seed in range(sc.seed, sc.seed + 5):
    log = harness.run_rally(sc, seed=seed)
    out = log.outcome
    lengths.append(out["rally_length"])
    inside = sum(c["inside"] for c in out["crossings"])
    print(f"seed {seed}: rally_length={out['rally_length']}  crossings inside "
          f"{inside}/{len(out['crossings'])}  ended by {out['termination']}")

m = harness.compute_metrics([harness.run_rally(sc, seed=sc.seed)])
print(f"median over seeds: {np.median(lengths):g}; effort of the first rally {m.effort:.4f}")
