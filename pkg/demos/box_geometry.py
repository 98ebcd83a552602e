"""
Predicted side collisions with oriented boxes
=============================================

A trailing vehicle's box is stretched forward by 0.6 s of travel, and two
boxes collide when their projections overlap on the lane axes and on the
cutting-in vehicle's axes.
"""

import math

import numpy as np

from lcew import collision as col
from lcew.trajdata import Scene

follower = col.build_obb(0.0, 0.0, speed=10.0, heading=0.0, length=5.0, width=1.8, rear_role=True)
print(f"follower at 10 m/s: box length {follower.length:.1f} m, width {follower.width:.1f} m")

# a merging car 9 m ahead, angled 10 degrees toward the lane
merger = col.OBB((9.0, 1.6), 2.25, 0.9, math.radians(-10))
print("four-axis gap:", round(col.sat_gap(follower, merger), 3), "m ->",
      "collision" if col.sat_collide(follower, merger) else "clear")
print("without the buffer:", col.sat_collide(col.build_obb(0, 0, 10.0, 0, 5.0, 1.8), merger))

# two rotated boxes: the four axes are not the full set of face normals
rng = np.random.default_rng(0)
pairs = [(col.OBB(tuple(rng.uniform(-4, 4, 2)), 2.0, 0.9, rng.uniform(-0.5, 0.5)),
          col.OBB(tuple(rng.uniform(-4, 4, 2)), 2.0, 0.9, rng.uniform(-0.5, 0.5))) for _ in range(5000)]
missed = sum(col.sat_collide(a, b) != col.exact_overlap(a, b) for a, b in pairs)
print(f"both boxes rotated: four-axis test differs from the exact test on {missed} of {len(pairs)} pairs")

# a whole predicted horizon: vehicle 1 drifts into vehicle 0's lane
T, F = 5, 30
k = np.arange(T + F) * 0.1
paths = np.stack([np.stack([20 * k, 0 * k]), np.stack([20 * k + 1.0, 3.5 - 1.2 * k])], axis=2).transpose(1, 0, 2)
scene = Scene(0, ["ego", "cut-in"], paths[:T], paths[T:T + 1], 0.0)
events = col.detect_collisions(paths[T:], scene)
signal = col.issue_warning(events, paths[T:, :, 0], F)
print(f"\nfirst predicted contact at step {events[0].step}, warning: {signal.location.value}")
