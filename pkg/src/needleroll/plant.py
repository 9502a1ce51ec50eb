"""Ground-truth needle simulator.

A bevel-tip needle inserted with speed u_ins curves in its bevel plane with
constant curvature; rotating the base reorients that plane. The tip roll does
not follow the base instantly: the shaft acts as a torsional spring-damper
loaded by depth-proportional Coulomb friction, so the tip sticks until the
wind-up torque beats the friction torque, then slips. That lag between base
angle and tip roll is the quantity the estimators in this package compete to
recover.

Conventions: world frame has +z along the insertion axis at the entry point.
In the tip body frame the needle curves toward +x (the bevel direction), so
the bending rate is curvature * insertion_speed about body +y. All dynamics
are deterministic; randomness enters only through sense() and
sample_target().
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from needleroll.se3 import (
    EZ,
    Pose,
    heading_tangent_basis,
    recompose_roll,
    rot_z,
    se3_exp,
    so3_exp,
)


@dataclass(frozen=True)
class MediumParams:
    """Tissue/medium parameters for one simulated insertion.

    torsion_stiffness k (N*mm/rad), torsion_damping c (N*mm*s/rad) and
    friction_per_depth mu (N*mm/rad per mm) define the lag dynamics; the
    stick band half-width at depth d is mu*d/k radians. Explicit-Euler
    stability of the slip phase needs dt*k/c < 1 at the 40 Hz loop rate.
    """

    name: str
    curvature: float  # 1/mm
    torsion_stiffness: float
    torsion_damping: float
    friction_per_depth: float
    position_noise: float  # mm, per axis
    heading_noise: float  # rad
    rigid: bool = False

    def __post_init__(self):
        if self.curvature <= 0.0:
            raise ValueError("curvature must be positive")
        if self.torsion_stiffness <= 0.0 or self.torsion_damping <= 0.0:
            raise ValueError("torsion stiffness and damping must be positive")
        if self.friction_per_depth < 0.0:
            raise ValueError("friction coefficient must be nonnegative")
        if self.position_noise < 0.0 or self.heading_noise < 0.0:
            raise ValueError("noise magnitudes must be nonnegative")


# Training medium. Friction is set high enough that the stick band at full
# depth (mu*d/k, 4.5 rad at 75 mm) makes roll-blind dead reckoning miss by
# millimetres while pose-informed steering still lands under 0.25 mm.
GELATIN = MediumParams(
    name="gelatin",
    curvature=0.005,
    torsion_stiffness=2.0,
    torsion_damping=0.1,
    friction_per_depth=0.12,
    position_noise=0.3,
    heading_noise=0.005,
)

# +50% friction, -30% shaft stiffness relative to the training medium
BRAIN = MediumParams(
    name="brain",
    curvature=0.005,
    torsion_stiffness=1.4,
    torsion_damping=0.1,
    friction_per_depth=0.18,
    position_noise=0.3,
    heading_noise=0.005,
)

# +150% friction and a noisier sensor environment
LUNG = MediumParams(
    name="lung",
    curvature=0.005,
    torsion_stiffness=2.0,
    torsion_damping=0.1,
    friction_per_depth=0.30,
    position_noise=0.5,
    heading_noise=0.01,
)

MEDIUM_PRESETS = {m.name: m for m in (GELATIN, BRAIN, LUNG)}


def rigid_variant(medium: MediumParams) -> MediumParams:
    """Same medium with the torsion lag switched off (tip roll == base angle)."""
    return dataclasses.replace(medium, rigid=True)


def jittered_medium(medium: MediumParams, rng, fraction: float) -> MediumParams:
    """Torsion parameters each scaled by an independent uniform factor.

    Draws three factors from [1 - fraction, 1 + fraction] for stiffness,
    damping and friction. Sensor noise and curvature stay fixed. Keeps the
    slip phase stable: fraction must leave dt*k/c < 1.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("jitter fraction must be in [0, 1)")
    fk, fc, fm = rng.uniform(1.0 - fraction, 1.0 + fraction, size=3)
    return dataclasses.replace(
        medium,
        torsion_stiffness=medium.torsion_stiffness * fk,
        torsion_damping=medium.torsion_damping * fc,
        friction_per_depth=medium.friction_per_depth * fm,
    )


@dataclass(frozen=True)
class ControlInput:
    insertion_speed: float  # mm/s, >= 0
    rotation_speed: float  # rad/s, applied at the base

    def __post_init__(self):
        if self.insertion_speed < 0.0:
            raise ValueError("insertion speed must be nonnegative")


STOP = ControlInput(0.0, 0.0)


@dataclass(frozen=True)
class PlantState:
    """Simulator state. base_angle and tip_roll are unwrapped accumulators;
    wrapping happens only at interfaces (pose roll, features, errors)."""

    pose: Pose
    base_angle: float
    tip_roll: float
    depth: float
    tip_roll_rate: float


def initial_state(entry_pose: Pose | None = None) -> PlantState:
    pose = Pose.identity() if entry_pose is None else entry_pose
    return PlantState(pose=pose, base_angle=0.0, tip_roll=0.0, depth=0.0,
                      tip_roll_rate=0.0)


@dataclass(frozen=True)
class SensedTip:
    """5-DOF measurement: position and heading only, roll never emitted."""

    position: np.ndarray
    heading: np.ndarray


def advance_tip_pose(R, p, insertion_speed: float, roll_prev: float,
                     roll_new: float, curvature: float, dt: float):
    """One pose step: apply the roll change about body z, then the bevel arc.

    The new rotation is rebuilt as (minimal rotation to the new heading) *
    rot_z(roll_new), so the pose's roll component equals the scalar roll
    state exactly at every step rather than drifting apart through frame
    transport. Shared by the simulator and by any observer propagating the
    same torsion-free kinematics.
    """
    R_mid = R @ rot_z(roll_new - roll_prev)
    arc_R, arc_p = se3_exp(
        [0.0, 0.0, insertion_speed, 0.0, curvature * insertion_speed, 0.0], dt
    )
    p_new = p + R_mid @ arc_p
    eta = R_mid @ arc_R[:, 2]
    eta = eta / np.linalg.norm(eta)
    return recompose_roll(eta, roll_new), p_new


def step(state: PlantState, u: ControlInput, medium: MediumParams,
         dt: float) -> PlantState:
    """Advance the plant one control period. Deterministic.

    Base angle integrates the commanded rotation speed. The tip roll then
    takes one stick/slip sub-step: with wind-up torque tau = k*(alpha -
    theta) and breakaway torque mu*depth, the tip holds still inside the
    friction band and otherwise slips at (tau - breakaway*sign(tau))/c.
    Finally the pose advances along the bevel arc at the new roll.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    alpha = state.base_angle + u.rotation_speed * dt
    if medium.rigid:
        roll = alpha
        rate = u.rotation_speed
    else:
        torque = medium.torsion_stiffness * (alpha - state.tip_roll)
        breakaway = medium.friction_per_depth * state.depth
        if abs(torque) <= breakaway:
            rate = 0.0
        else:
            rate = (torque - math.copysign(breakaway, torque)) / medium.torsion_damping
        roll = state.tip_roll + rate * dt
    R_new, p_new = advance_tip_pose(
        state.pose.R, state.pose.p, u.insertion_speed, state.tip_roll, roll,
        medium.curvature, dt,
    )
    return PlantState(
        pose=Pose(p_new, R_new),
        base_angle=alpha,
        tip_roll=roll,
        depth=state.depth + u.insertion_speed * dt,
        tip_roll_rate=rate,
    )


def sense(state: PlantState, medium: MediumParams, rng) -> SensedTip:
    """Noisy 5-DOF observation of the tip: position and heading, never roll.

    Position gets iid gaussian noise per axis. The heading is tilted by a
    gaussian angle about a uniformly random axis perpendicular to it, then
    re-normalized. Draw order (3 position, tilt, axis azimuth) is part of
    the determinism contract.
    """
    position = state.pose.p + rng.normal(0.0, medium.position_noise, size=3)
    eta = state.pose.heading
    tilt = rng.normal(0.0, medium.heading_noise)
    azimuth = rng.uniform(0.0, 2.0 * math.pi)
    b1, b2 = heading_tangent_basis(eta)
    axis = math.cos(azimuth) * b1 + math.sin(azimuth) * b2
    heading = so3_exp(axis * tilt) @ eta
    heading = heading / np.linalg.norm(heading)
    return SensedTip(position=position, heading=heading)


@dataclass(frozen=True)
class WorkspaceCone:
    """Reachable trumpet: depths in [depth_min, depth_max], radial offset
    bounded by a constant-curvature arc at bounding_curvature.

    radial_margin < 1 keeps sampled targets off the exact boundary, which a
    controller that must first unwind its initial roll cannot reach.
    min_offset keeps them off the entry axis: a target within sensor noise
    of the axis needs no steering decision and only measures that noise.
    """

    depth_min: float = 40.0
    depth_max: float = 75.0
    bounding_curvature: float = 0.005
    radial_margin: float = 0.9
    min_offset: float = 1.5

    def __post_init__(self):
        if not 0.0 < self.depth_min < self.depth_max:
            raise ValueError("need 0 < depth_min < depth_max")
        if self.bounding_curvature < 0.0:
            raise ValueError("bounding curvature must be nonnegative")
        if not 0.0 < self.radial_margin <= 1.0:
            raise ValueError("radial margin must be in (0, 1]")
        if self.min_offset < 0.0:
            raise ValueError("min offset must be nonnegative")


def max_radial_offset(cone: WorkspaceCone, z: float) -> float:
    """Offset of a constant-curvature arc when it reaches depth z."""
    kappa = cone.bounding_curvature
    if kappa <= 0.0:
        return 0.0
    kz = min(kappa * z, 1.0)
    return (1.0 - math.sqrt(max(0.0, 1.0 - kz * kz))) / kappa


def sample_target(cone: WorkspaceCone, rng) -> np.ndarray:
    """Uniform draw from the trumpet: uniform depth, uniform over the
    annulus between min_offset and the reachable offset at that depth
    (scaled by radial_margin)."""
    z = rng.uniform(cone.depth_min, cone.depth_max)
    azimuth = rng.uniform(0.0, 2.0 * math.pi)
    outer = max_radial_offset(cone, z) * cone.radial_margin
    # min_offset yields to a tight cone rather than inverting the annulus
    inner = min(cone.min_offset, 0.5 * outer)
    radius = math.sqrt(inner * inner
                       + (outer * outer - inner * inner) * rng.uniform())
    return np.array([radius * math.cos(azimuth), radius * math.sin(azimuth), z])
