import dataclasses
import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from _2024_03._01_CLCMT_DRL.b_world import LaneGeometry, VehicleRole, VehicleState


@dataclass(frozen=True)
class IdmParams:
    a1: float = 3.0
    v0: float = 20.0
    s0: float = 2.0
    delta: float = 4.0
    T: float = 1.0
    b1: float = 1.5
    a_max_brake: float = 6.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError("IDM parameter {0} must be > 0".format(f.name))

    @classmethod
    def from_config(cls, config: Mapping) -> "IdmParams":
        return cls(**config)


@dataclass
class SimClock:
    dt: float = 0.1
    step_index: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be > 0")

    @property
    def elapsed(self) -> float:
        return self.step_index * self.dt

    def tick(self) -> None:
        self.step_index += 1

    def reset(self) -> None:
        self.step_index = 0


class IdmAcceleration(NamedTuple):
    acceleration: float
    emergency: bool


def integrate_kinematics(state: VehicleState, ax: float, ay: float, dt: float) -> VehicleState:
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if not all(math.isfinite(v) for v in (state.x, state.y, state.vx, state.vy, ax, ay, dt)):
        raise ValueError("non-finite kinematic input: state={0}, ax={1}, ay={2}".format(state, ax, ay))

    return dataclasses.replace(
        state,
        x=state.x + state.vx * dt + 0.5 * ax * dt * dt,
        y=state.y + state.vy * dt + 0.5 * ay * dt * dt,
        vx=state.vx + ax * dt,
        vy=state.vy + ay * dt,
        ax=ax,
        ay=ay,
    )


def integrate_idm(state: VehicleState, ax: float, dt: float) -> VehicleState:
    """IDM vehicles brake to a standstill and never reverse."""
    ax = max(ax, -max(state.vx, 0.0) / dt)
    moved = integrate_kinematics(state, ax, 0.0, dt)
    return moved if moved.vx >= 0.0 else dataclasses.replace(moved, vx=0.0)


def desired_gap(v: float, delta_v: float, params: IdmParams) -> float:
    return params.s0 + max(0.0, v * params.T + v * delta_v / (2.0 * math.sqrt(params.a1 * params.b1)))


def idm_acceleration(v: float, delta_v: float, s: float, params: IdmParams) -> IdmAcceleration:
    """delta_v is the approach rate v_follower - v_leader; s is the net gap (math.inf on a free road)."""
    if s <= 0:
        return IdmAcceleration(-params.a_max_brake, True)

    s_star = desired_gap(v, delta_v, params)
    interaction = 0.0 if math.isinf(s) else (s_star / s) ** 2
    a = params.a1 * (1.0 - (max(v, 0.0) / params.v0) ** params.delta - interaction)
    return IdmAcceleration(min(max(a, -params.a_max_brake), params.a1), False)


def clamp_action(a: np.ndarray, low: np.ndarray, high: np.ndarray) -> np.ndarray:
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    if not (np.all(np.isfinite(low)) and np.all(np.isfinite(high))):
        raise ValueError("action bounds must be finite")
    if np.any(low >= high):
        raise ValueError("action bounds need low < high in every dimension")
    return np.clip(np.asarray(a, dtype=np.float64), low, high)


def find_leader(
        role: VehicleRole,
        vehicles: Mapping[VehicleRole, VehicleState],
        geometry: LaneGeometry,
        lane: Optional[int] = None
) -> Optional[VehicleRole]:
    follower = vehicles[role]
    lane = geometry.lane_index(follower.y) if lane is None else lane
    leader, leader_x = None, math.inf
    for other, state in vehicles.items():
        if other is role or geometry.lane_index(state.y) != lane:
            continue
        if follower.x < state.x < leader_x:
            leader, leader_x = other, state.x
    return leader


def idm_step_accelerations(
        roles: Sequence[VehicleRole],
        vehicles: Mapping[VehicleRole, VehicleState],
        geometry: LaneGeometry,
        params: IdmParams
) -> Tuple[dict, Tuple[VehicleRole, ...]]:
    accelerations, emergencies = {}, []
    for role in roles:
        follower = vehicles[role]
        leader_role = find_leader(role, vehicles, geometry)
        if leader_role is None:
            result = idm_acceleration(follower.vx, 0.0, math.inf, params)
        else:
            leader = vehicles[leader_role]
            s = leader.x - follower.x - leader.length
            result = idm_acceleration(follower.vx, follower.vx - leader.vx, s, params)
        accelerations[role] = result.acceleration
        if result.emergency:
            emergencies.append(role)
    return accelerations, tuple(emergencies)
