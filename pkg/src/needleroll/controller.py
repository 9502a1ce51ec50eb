"""Sliding-mode steering law.

The needle curves toward body +x (see plant module), so steering reduces to
rolling the tip until the target sits in the +x half of the bevel plane and
inserting. The roll error is the angle of the target's projection onto the
tip's x-y plane; the controller applies full-magnitude base rotation against
the sign of that error (bang-bang with a small deadband) while inserting at
constant speed.

The controller is estimator-agnostic: it only sees a tip pose, however that
pose was produced (ground truth, filter mean, or learned roll recomposed
onto the sensed heading).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from needleroll.plant import ControlInput
from needleroll.se3 import Pose, wrap_angle


@dataclass(frozen=True)
class ControllerParams:
    insertion_speed: float = 5.0  # mm/s
    rotation_speed: float = 2.0 * math.pi  # rad/s, bang-bang magnitude
    rate: float = 40.0  # Hz
    deadband: float = 0.05  # rad, |error| below this stops rotating
    arrival_tolerance: float = 0.25  # mm

    def __post_init__(self):
        if self.insertion_speed <= 0.0 or self.rotation_speed <= 0.0:
            raise ValueError("speeds must be positive")
        if self.rate <= 0.0:
            raise ValueError("rate must be positive")
        if self.deadband < 0.0 or self.arrival_tolerance < 0.0:
            raise ValueError("deadband and arrival tolerance must be nonnegative")


@dataclass(frozen=True)
class Arrived:
    """Terminal outcome: target reached or passed behind the tip plane."""

    distance: float


def roll_error(est_pose: Pose, target) -> float:
    """Signed roll needed to bring the target into the curving half-plane.

    Positive means the target lies counterclockwise (about the tip z axis)
    from the current bevel direction. In (-pi, pi].
    """
    rel = est_pose.R.T @ (np.asarray(target, dtype=float) - est_pose.p)
    return wrap_angle(math.atan2(rel[1], rel[0]))


def control(est_pose: Pose, target, params: ControllerParams):
    """One controller tick: ControlInput, or Arrived to stop.

    Stops when the target is within arrival_tolerance or no longer ahead of
    the tip plane (overshoot would otherwise grow the error forever).
    """
    target = np.asarray(target, dtype=float)
    offset = target - est_pose.p
    distance = float(np.linalg.norm(offset))
    ahead = float(np.dot(est_pose.heading, offset))
    if distance <= params.arrival_tolerance or ahead <= 0.0:
        return Arrived(distance=distance)
    err = roll_error(est_pose, target)
    if abs(err) > params.deadband:
        spin = math.copysign(params.rotation_speed, err)
    else:
        spin = 0.0
    return ControlInput(insertion_speed=params.insertion_speed, rotation_speed=spin)


def targeting_error(final_tip, target) -> float:
    """Euclidean distance between the final tip position and the target."""
    diff = np.asarray(final_tip, dtype=float) - np.asarray(target, dtype=float)
    return float(np.linalg.norm(diff))
