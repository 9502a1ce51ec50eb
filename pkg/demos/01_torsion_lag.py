"""Open-loop demonstration of torsional lag between base and tip roll.

Spin the needle base at a constant rate while inserting and watch the tip
roll fall behind. Friction against the medium grows with depth, so the
stick band (the set of base angles the tip refuses to follow) widens as
the needle goes deeper. The printed table shows the lag approaching the
band half-width k-normalized friction torque mu*depth/k.
"""

import numpy as np

from needleroll.plant import (
    MEDIUM_PRESETS,
    ControlInput,
    initial_state,
    step,
)
from needleroll.se3 import wrap_angle

medium = MEDIUM_PRESETS["gelatin"]
dt = 1.0 / 40.0
u = ControlInput(insertion_speed=5.0, rotation_speed=2.0 * np.pi)

state = initial_state()
print(f"medium: {medium.name} (stiffness {medium.torsion_stiffness}, "
      f"friction/depth {medium.friction_per_depth})")
print(f"{'depth mm':>9s} {'base rad':>9s} {'tip rad':>9s} {'lag rad':>8s} {'band rad':>9s}")
steps_per_row = 40
for i in range(600):
    state = step(state, u, medium, dt)
    if (i + 1) % steps_per_row == 0:
        lag = state.base_angle - state.tip_roll
        band = medium.friction_per_depth * state.depth / medium.torsion_stiffness
        print(f"{state.depth:9.1f} {state.base_angle:9.2f} {state.tip_roll:9.2f} "
              f"{lag:8.2f} {band:9.2f}")

# The tip's ANGLE error as seen by a controller is the wrapped lag, which
# saturates near the band half-width once slipping dominates.
lag = wrap_angle(state.base_angle - state.tip_roll)
print(f"\nfinal wrapped lag {lag:+.2f} rad at depth {state.depth:.1f} mm")
print("a roll-blind controller that trusts the base angle is wrong by this much")
