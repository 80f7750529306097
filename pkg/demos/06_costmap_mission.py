"""Costmap, inflation, A* planning, and a closed-loop mission.

No learned models here: the mission uses the ground-truth stub classifier,
which is exactly how the planner side is validated.
"""

import os

import numpy as np

from gonogo.costmap import (Costmap, MissionConfig, MissionWorld, PlanRequest,
                            drive_simulated_mission, export_map, inflate,
                            mark_observation, plan)

out = os.path.join(os.path.dirname(__file__), "out", "costmap")
os.makedirs(out, exist_ok=True)

# A 12x8 map at 0.5 m resolution with one NOGO observation in the middle.
# Pose is (x, y, heading); the lethal mark lands range_m ahead of it.
m = Costmap(width=12, height=8, resolution=0.5)
mark_observation(m, pose=(2.5, 2.0, 0.0), decision="NOGO", range_m=0.5)
print("lethal cells after one NOGO:", int((m.cells == 254).sum()))

inflate(m, radius_m=1.0)
print("nonzero cells after inflating 1 m:", int((m.cells > 0).sum()))

path = plan(m, PlanRequest(start=(0, 4), goal=(11, 4)))
rows = []
for y in range(m.cells.shape[0]):
    row = ""
    for x in range(m.cells.shape[1]):
        if (x, y) in path:
            row += "*"
        elif m.cells[y, x] >= 200:
            row += "#"
        elif m.cells[y, x] > 0:
            row += "."
        else:
            row += " "
    rows.append(row)
print("\n".join(rows))
print("A* detours around the inflated blob; path cells:", len(path))

export_map(m, os.path.join(out, "grid"))
print(f"map exported as {out}/grid.pgm + .meta\n")

# The full loop: drive toward a goal, classify each view with the stub,
# mark NOGOs, replan when the map changes.
world = MissionWorld(obstacles=((3.0, 2.0, 0.35),), seed=0)
result = drive_simulated_mission(world, None, None, MissionConfig())
nogos = sum(1 for e in result.log if e["decision"] == "NOGO")
replans = sum(1 for e in result.log if e["replanned"])
print(f"mission: reached={result.reached} in {result.steps} steps "
      f"({nogos} NOGO views, {replans} replans)")
print("final pose:", [round(v, 2) for v in result.log[-1]["pose"]])
