"""Two-lane road, the six-vehicle lane-changing configuration and its observation.

Axis convention: x is longitudinal, y is lateral. The ego starts in lane 0 and
changes into lane 1 where Lead and Lag form the target gap.
"""
import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Dict, Final, Mapping, Optional, Tuple

import numpy as np

STATE_DIM: Final[int] = 16
MAX_ACTION_DIM: Final[int] = 4


class StructuralError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class VehicleRole(enum.Enum):
    EGO = "Ego"
    LEAD = "Lead"
    LAG = "Lag"
    PRE = "Pre"
    SUR1 = "Sur1"
    SUR2 = "Sur2"


class ControlMode(enum.Enum):
    AGENT_CONTROLLED = "AgentControlled"
    IDM_CONTROLLED = "IdmControlled"


class Composition(enum.Enum):
    # (sub-scenario, lead is CAV, lag is CAV)
    CAV_CAV = (1, True, True)
    HV_CAV = (2, False, True)
    CAV_HV = (3, True, False)
    HV_HV = (4, False, False)

    @property
    def sub_scenario(self) -> int:
        return self.value[0]

    def is_cav(self, role: VehicleRole) -> bool:
        if role is VehicleRole.LEAD:
            return self.value[1]
        if role is VehicleRole.LAG:
            return self.value[2]
        raise StructuralError("composition only labels Lead and Lag, got {0}".format(role.value))

    @classmethod
    def from_name(cls, name: str) -> "Composition":
        try:
            return cls[name]
        except KeyError as e:
            raise ValueError("unknown composition: {0}".format(name)) from e


GAP_ROLES: Final[Tuple[VehicleRole, VehicleRole]] = (VehicleRole.LEAD, VehicleRole.LAG)

# StateVector layout: O1, l1, l2, s1, s2 (Pre is simulated but not observed)
OBSERVED_ROLES: Final[Tuple[VehicleRole, ...]] = (
    VehicleRole.EGO, VehicleRole.LEAD, VehicleRole.LAG, VehicleRole.SUR1, VehicleRole.SUR2
)


@dataclass(frozen=True)
class LaneGeometry:
    road_length: float = 150.0
    lane_width: float = 3.75
    lane_count: int = 2

    def __post_init__(self):
        if self.road_length <= 0:
            raise ValueError("road_length must be > 0")
        if self.lane_width <= 0:
            raise ValueError("lane_width must be > 0")
        if self.lane_count != 2:
            raise ValueError("lane_count must be 2")

    @property
    def road_width(self) -> float:
        return self.lane_width * self.lane_count

    def centerline(self, lane: int) -> float:
        return self.lane_width * (lane + 0.5)

    def lane_index(self, y: float) -> int:
        # nearest centerline; a vehicle on the boundary stays in the lower lane
        lane = int(math.floor(y / self.lane_width))
        if lane > 0 and y == lane * self.lane_width:
            lane -= 1
        return min(max(lane, 0), self.lane_count - 1)

    def occupied_lanes(self, y: float, vehicle_width: float) -> Tuple[int, ...]:
        reach = (self.lane_width + vehicle_width) / 2.0
        return tuple(k for k in range(self.lane_count) if abs(y - self.centerline(k)) < reach)

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x <= self.road_length and 0.0 <= y <= self.road_width


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    vx: float
    vy: float = 0.0
    ax: float = 0.0
    ay: float = 0.0
    length: float = 5.0

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("vehicle length must be > 0")

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


@dataclass(frozen=True)
class InitialConditions:
    ego_x: float = 60.0
    ego_lane: int = 0
    target_lane: int = 1
    spacing: float = 30.0
    flow_speed: float = 15.0
    vehicle_length: float = 5.0
    vehicle_width: float = 1.8
    noise_x: Tuple[float, float] = (0.0, 1.0)
    noise_y: Tuple[float, float] = (0.0, 0.5)
    noise_v: Tuple[float, float] = (0.0, 2.0)
    reset_noise: bool = True

    @classmethod
    def from_config(cls, config: Mapping) -> "InitialConditions":
        fields = {k: (tuple(v) if isinstance(v, list) else v) for k, v in config.items()}
        return cls(**fields)

    def nominal_vehicles(self, geometry: LaneGeometry) -> Dict[VehicleRole, VehicleState]:
        ego_y = geometry.centerline(self.ego_lane)
        target_y = geometry.centerline(self.target_lane)
        half = self.spacing / 2.0
        positions = {
            VehicleRole.EGO: (self.ego_x, ego_y),
            VehicleRole.PRE: (self.ego_x + self.spacing, ego_y),
            VehicleRole.LEAD: (self.ego_x + half, target_y),
            VehicleRole.LAG: (self.ego_x - half, target_y),
            VehicleRole.SUR1: (self.ego_x + half + self.spacing, target_y),
            VehicleRole.SUR2: (self.ego_x - half - self.spacing, target_y),
        }
        return {
            role: VehicleState(x=x, y=y, vx=self.flow_speed, length=self.vehicle_length)
            for role, (x, y) in positions.items()
        }


@dataclass(frozen=True)
class ScenarioInstance:
    composition: Composition
    adoption: Mapping[VehicleRole, bool]
    vehicles: Mapping[VehicleRole, VehicleState]
    geometry: LaneGeometry = field(default_factory=LaneGeometry)
    rng_seed: int = 0
    ego_lane: int = 0
    target_lane: int = 1
    vehicle_width: float = 1.8

    def control_mode(self, role: VehicleRole) -> ControlMode:
        if role is VehicleRole.EGO:
            return ControlMode.AGENT_CONTROLLED
        if role in GAP_ROLES:
            if self.composition.is_cav(role) or self.adoption.get(role, False):
                return ControlMode.AGENT_CONTROLLED
        return ControlMode.IDM_CONTROLLED

    @property
    def action_mask(self) -> np.ndarray:
        # padded slots: (ego_x, ego_y, lead, lag)
        return np.array([
            True,
            True,
            self.control_mode(VehicleRole.LEAD) is ControlMode.AGENT_CONTROLLED,
            self.control_mode(VehicleRole.LAG) is ControlMode.AGENT_CONTROLLED,
        ], dtype=bool)

    @property
    def target_centerline(self) -> float:
        return self.geometry.centerline(self.target_lane)

    def vehicle(self, role: VehicleRole) -> VehicleState:
        try:
            return self.vehicles[role]
        except KeyError as e:
            raise StructuralError("world is missing role {0}".format(role.value)) from e

    def with_vehicles(self, vehicles: Mapping[VehicleRole, VehicleState]) -> "ScenarioInstance":
        return dataclasses.replace(self, vehicles=dict(vehicles))


def gap(leader: VehicleState, follower: VehicleState) -> float:
    return leader.x - follower.x - leader.length


def _check_no_overlap(vehicles: Mapping[VehicleRole, VehicleState], geometry: LaneGeometry) -> None:
    by_lane: Dict[int, list] = {}
    for role, state in vehicles.items():
        by_lane.setdefault(geometry.lane_index(state.y), []).append((state.x, role, state))
    for lane, members in by_lane.items():
        members.sort(key=lambda item: item[0])
        for (_, follower_role, follower), (_, leader_role, leader) in zip(members, members[1:]):
            if leader.x - follower.x <= follower.length:
                raise StructuralError("initial vehicles overlap in lane {0}: {1} and {2}".format(
                    lane, follower_role.value, leader_role.value
                ))


def build_scenario(
        composition: Composition,
        adoption: Mapping[VehicleRole, bool],
        base: InitialConditions,
        geometry: Optional[LaneGeometry] = None,
        rng_seed: int = 0,
        noise_rng: Optional[np.random.Generator] = None
) -> ScenarioInstance:
    geometry = geometry if geometry is not None else LaneGeometry()
    nominal = base.nominal_vehicles(geometry)
    _check_no_overlap(nominal, geometry)

    vehicles = {}
    for role in VehicleRole:
        state = nominal[role]
        if noise_rng is not None:
            state = dataclasses.replace(
                state,
                x=state.x + noise_rng.uniform(*base.noise_x),
                y=state.y + noise_rng.uniform(*base.noise_y),
                vx=state.vx + noise_rng.uniform(*base.noise_v),
            )
        vehicles[role] = state

    adoption = {role: bool(adoption.get(role, False)) and not composition.is_cav(role) for role in GAP_ROLES}

    return ScenarioInstance(
        composition=composition,
        adoption=adoption,
        vehicles=vehicles,
        geometry=geometry,
        rng_seed=rng_seed,
        ego_lane=base.ego_lane,
        target_lane=base.target_lane,
        vehicle_width=base.vehicle_width,
    )


def sample_scenario(
        seed: int,
        p: float,
        base: InitialConditions,
        composition: Optional[Composition] = None,
        geometry: Optional[LaneGeometry] = None
) -> ScenarioInstance:
    """Draw a composition (unless fixed), the CHV adoption outcomes and the reset noise.

    The draws always happen in the same order so that equal seeds give equal instances.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("adoption probability p must be in [0, 1], got {0}".format(p))

    rng = np.random.default_rng(seed)

    if composition is None:
        compositions = list(Composition)
        composition = compositions[int(rng.integers(len(compositions)))]

    adoption = {}
    for role in GAP_ROLES:
        if not composition.is_cav(role):
            adoption[role] = bool(rng.random() < p)

    return build_scenario(
        composition=composition,
        adoption=adoption,
        base=base,
        geometry=geometry,
        rng_seed=seed,
        noise_rng=rng if base.reset_noise else None,
    )


def observe(world: ScenarioInstance) -> np.ndarray:
    ego = world.vehicle(VehicleRole.EGO)
    entries = [ego.x, ego.y, ego.vx, ego.vy]
    for role in OBSERVED_ROLES[1:]:
        state = world.vehicle(role)
        entries.extend((state.x, state.y, state.vx))

    state_vector = np.array(entries, dtype=np.float64)
    assert state_vector.shape == (STATE_DIM,)
    return state_vector
