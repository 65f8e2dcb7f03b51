"""Closed-loop declutter episodes with the ground-truth oracle planner.

The oracle planner searches the analytic surfaces for a grasp the simulator
accepts, so it gives the ceiling a learned planner is measured against.  Over the
full scale range some objects are wider than the gripper opening in every
direction; the oracle then finds nothing and the episode ends with no_prediction.
"""
from voxgrasp.datagen import DatagenConfig
from voxgrasp.evalsim import EvalConfig, OraclePlanner, eval_scenes, evaluate, format_metrics, metrics

fusion = DatagenConfig(resolution=32)
for mode, count in (("single", 5), ("multi", 3)):
    scenes = eval_scenes(count, mode, seed=2024, objects=3)
    episodes = evaluate(scenes, OraclePlanner(), EvalConfig(mode=mode), fusion)
    print(f"{mode:6s} {format_metrics(metrics(episodes))}")
    for i, ep in enumerate(episodes):
        reasons = ", ".join(a.reason for a in ep.attempts) or "-"
        print(f"   episode {i}: {ep.successes}/{ep.initial} removed, {ep.termination.value} ({reasons})")
