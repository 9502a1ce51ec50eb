"""Why the torsion-blind filter fails: its roll estimate IS the base angle.

The error-state filter fuses position and heading measurements under a
rigid-transmission motion model, so nothing in its state can absorb
torsional lag. In a rigid medium that assumption holds and it steers
essentially as well as ground truth. In a compliant medium its roll
error reproduces the open-loop windup, and near the target there is not
enough insertion left to wind the bevel back through the stick band.
"""

import numpy as np

from needleroll.controller import ControllerParams
from needleroll.evaluate import run_trial
from needleroll.plant import MEDIUM_PRESETS, WorkspaceCone, rigid_variant, sample_target
from needleroll.se3 import wrap_angle

controller = ControllerParams()
gelatin = MEDIUM_PRESETS["gelatin"]
workspace = WorkspaceCone(40.0, 75.0, gelatin.curvature, 0.9)
rng = np.random.default_rng(9)
target = sample_target(workspace, rng)
print(f"target: ({target[0]:.1f}, {target[1]:.1f}, {target[2]:.1f}) mm")

for medium in (rigid_variant(gelatin), gelatin):
    record, trace, summary = run_trial("ekf", medium, controller, target, seed=9)
    label = "rigid" if medium.rigid else "compliant"
    # "arrived" covers both true arrival and the target slipping behind the
    # tip plane; the targeting error tells those apart.
    print(f"\n{label}: {summary.outcome}, targeting error {summary.targeting_error:.3f} mm")
    print(f"  mean angular error {summary.mean_angular_error:.3f} rad over {summary.steps} steps")
    # The filter's roll error tracks the true windup base_angle - tip_roll.
    windup = np.array([
        abs(wrap_angle(b - r)) for b, r in zip(record.base_angle, record.roll_true)
    ])
    err = np.asarray(trace.angular_error)
    k = min(len(err), len(windup))
    print(f"  windup at end {windup[k - 1]:.3f} rad, "
          f"filter angular error at end {err[k - 1]:.3f} rad")
