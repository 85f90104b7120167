"""How much do per-lane limits matter? Compare a few hand-picked constant policies.

Each policy posts the same five limits for a whole 2-hour desk episode and
sees the same demand. Lanes are numbered from the left, so lane 4 is the one
the on-ramp joins. Travel time and emergency brakes often move in opposite
directions: that tension is what separates the throughput and safety rewards.
"""
from dvsl.env import TRACE_COLUMNS, action_to_speeds, run_fixed
from dvsl.sim.scenario import desk_scenario

POLICIES = {
    "no control": [3, 3, 3, 3, 3],
    "all fastest": [5, 5, 5, 5, 5],
    "all slowest": [0, 0, 0, 0, 0],
    "left lanes slow": [1, 2, 2, 5, 5],
    "right lanes slow": [5, 5, 2, 2, 1],
}

sc = desk_scenario(seed=0)
print(f"{'policy':>17}  {'limits (m/s)':<36} {'ATT(s)':>7} {'brakes':>7} {'done':>6}")
for name, a in POLICIES.items():
    env, att = run_fixed(sc, a, seed=7)
    tr = env.trace_array()
    brakes = tr[:, TRACE_COLUMNS.index("theta")].sum()
    limits = " ".join(f"{v:.2f}" for v in action_to_speeds(a))
    print(f"{name:>17}  {limits:<36} {att:7.1f} {brakes:7.0f} {env.episode_tts().completed:6d}")
