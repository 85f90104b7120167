"""A walk through one control interval at a time on the desk scenario.

Run with ``python3 demos/01_simulator_tour.py``. Nothing is trained here: the
limits stay at the uncontrolled 29.185 m/s and we look at what the detectors,
the brake counter and the emission accounting report as the morning peak
builds up.
"""
import numpy as np

from dvsl.env import VSLEnv
from dvsl.sim.scenario import desk_scenario

sc = desk_scenario(seed=0)
lay = sc.layout
print(f"mainline: {lay.n_main_lanes} lanes, controlled section starts at {lay.controlled_start:.0f} m, "
      f"merge detector at {lay.merge_detector:.0f} m, network ends at {lay.network_end:.0f} m")
print("hourly demand (veh/h):", {k: v for k, v in sc.demand.hourly_rates.items()})

env = VSLEnv(sc, reward_kind="r1_flow")
s = env.reset(seed=42)
print("\n  min  in  out  merge occ (lanes 0-4)         ramp   brakes  CO(kg)")
while not env.done:
    s, r, done, info = env.step([3] * 5)
    st = info["stats"]
    if env.t % 10 == 0:
        occ = " ".join(f"{v:.2f}" for v in s[:5])
        print(f"{env.t:5d} {st.f_in:3d} {st.f_out:4d}  {occ}   {s[10]:.2f}   {st.brakes:5d}  "
              f"{st.emissions.co:.3f}")

rep = env.episode_tts()
print(f"\n{rep.completed} vehicles finished, {rep.remaining} still on the road; "
      f"ATT {rep.att:.1f} s, TTS {rep.direct / 3600:.0f} veh-h")
tr = env.trace_array()
print("busiest merge lane over the episode:", int(np.argmax(tr[:, 1:6].mean(axis=0))))
