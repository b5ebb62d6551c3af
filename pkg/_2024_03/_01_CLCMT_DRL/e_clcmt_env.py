# Cooperative lane-changing in mixed traffic as a gymnasium environment.
import csv
import dataclasses
import enum
from dataclasses import dataclass
from typing import Dict, List, Mapping, NamedTuple, Optional, Tuple

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from _2024_03._01_CLCMT_DRL.b_world import (
    Composition, ControlMode, GAP_ROLES, InitialConditions, LaneGeometry, MAX_ACTION_DIM, STATE_DIM,
    ScenarioInstance, StructuralError, UsageError, VehicleRole, VehicleState, observe, sample_scenario
)
from _2024_03._01_CLCMT_DRL.c_dynamics import (
    IdmParams, SimClock, clamp_action, find_leader, idm_step_accelerations, integrate_idm, integrate_kinematics
)
from _2024_03._01_CLCMT_DRL.d_rewards import (
    FollowingPair, FuelModelCoeffs, RewardBreakdown, RewardCoefficients, comfort_reward, fuel_emissions_reward,
    lateral_reward, safety_reward, target_gap_d_tar, total_reward, warning_penalty
)

ACTION_SLOTS = ("ego_x", "ego_y", "lead", "lag")

TRAJECTORY_FIELDS = [
    "episode", "step", "role", "x", "y", "vx", "vy", "ax", "ay",
    "r_safety", "r_warning", "r_comfort", "r_fuel", "r_lateral", "termination"
]


class TerminationType(enum.Enum):
    RUNNING = "Running"
    SUCCESS = "Success"
    CRASH = "Crash"
    OUT_OF_BOUNDS = "OutOfBounds"
    TIMEOUT = "Timeout"

    @property
    def is_terminal(self) -> bool:
        # Timeout ends the episode but is not a terminal state for bootstrapping
        return self in (TerminationType.SUCCESS, TerminationType.CRASH, TerminationType.OUT_OF_BOUNDS)


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 200
    success_lateral_tol: float = 0.1
    success_hold_steps: int = 3
    composition_mode: str = "fixed"
    composition: Composition = Composition.CAV_CAV
    seed: int = 0
    dt: float = 0.1
    substeps: int = 1

    def __post_init__(self):
        if self.max_steps <= 0:
            raise ValueError("max_steps must be > 0")
        if self.success_lateral_tol <= 0:
            raise ValueError("success_lateral_tol must be > 0")
        if self.composition_mode not in ("fixed", "mixed"):
            raise ValueError("composition_mode must be 'fixed' or 'mixed'")

    @classmethod
    def from_config(cls, config: Mapping, seed: int = 0) -> "EpisodeConfig":
        config = dict(config)
        config["composition"] = Composition.from_name(config["composition"])
        return cls(seed=seed, **config)


class StepOutcome(NamedTuple):
    next_state: np.ndarray
    reward: float
    reward_breakdown: RewardBreakdown
    terminated: TerminationType
    warnings_triggered: int


def action_dim(scenario: ScenarioInstance) -> int:
    return 2 + sum(
        1 for role in GAP_ROLES if scenario.control_mode(role) is ControlMode.AGENT_CONTROLLED
    )


def episode_seed(base_seed: int, episode_index: int) -> int:
    return int(np.random.SeedSequence([base_seed, episode_index]).generate_state(1, dtype=np.uint64)[0])


def is_collision(world: ScenarioInstance, dt: float, coeffs: RewardCoefficients) -> bool:
    geometry = world.geometry
    ego = world.vehicle(VehicleRole.EGO)
    lanes = geometry.occupied_lanes(ego.y, world.vehicle_width)

    for role, other in world.vehicles.items():
        if role is VehicleRole.EGO or geometry.lane_index(other.y) not in lanes:
            continue
        front, back = (other, ego) if other.x >= ego.x else (ego, other)
        if front.x - back.x <= front.length:
            return True

    if world.target_lane in lanes:
        lead = world.vehicle(VehicleRole.LEAD)
        if lead.x >= ego.x and target_gap_d_tar(lead, ego, dt, coeffs.d0) <= ego.length:
            return True

    return False


class ClcmtEnv(gym.Env):
    def __init__(self, env_config: Mapping, seed: int = 0, record_trajectory: bool = False, verbose: bool = False):
        super(ClcmtEnv, self).__init__()

        self._geometry = LaneGeometry(**env_config["geometry"])
        self._initial_conditions = InitialConditions.from_config(env_config["initial_conditions"])
        self._idm_params = IdmParams.from_config(env_config["idm"])
        self._coeffs = RewardCoefficients.from_config(env_config["rewards"])
        self._fuel = FuelModelCoeffs.from_config(env_config["fuel_table"])
        self._episode_config = EpisodeConfig.from_config(env_config["episode"], seed=seed)
        self._p = env_config["chv_adoption_probability"]
        self._state_normalization = env_config["state_normalization"]

        lon_low, lon_high = env_config["action_bounds"]["longitudinal"]
        lat_low, lat_high = env_config["action_bounds"]["lateral"]
        self._action_low = np.array([lon_low, lat_low, lon_low, lon_low], dtype=np.float64)
        self._action_high = np.array([lon_high, lat_high, lon_high, lon_high], dtype=np.float64)

        self._observation_scale = np.array(
            [self._geometry.road_length, self._geometry.road_width, self._idm_params.v0, self._idm_params.v0]
            + [self._geometry.road_length, self._geometry.road_width, self._idm_params.v0] * 4,
            dtype=np.float64
        )

        self._clock = SimClock(dt=self._episode_config.dt)
        self._base_seed = seed
        self._episode_index = 0

        # State
        self._scenario: Optional[ScenarioInstance] = None
        self._termination = TerminationType.RUNNING
        self._hold_steps = 0

        # Info for monitoring, trajectory export, etc.
        self._record_trajectory = record_trajectory
        self._trajectory: List[dict] = []

        # Spaces (padded layout; the active slots of an episode are given by action_mask)
        self._action_space = spaces.Box(low=self._action_low, high=self._action_high, dtype=np.float64)
        self._observation_space = spaces.Box(low=-np.inf, high=np.inf, shape=(STATE_DIM,), dtype=np.float64)

        if verbose:
            self._print_env_config(env_config)

    @property
    def action_space(self):
        return self._action_space

    @property
    def observation_space(self):
        return self._observation_space

    @property
    def scenario(self) -> ScenarioInstance:
        if self._scenario is None:
            raise UsageError("environment has not been reset")
        return self._scenario

    @property
    def action_mask(self) -> np.ndarray:
        return self.scenario.action_mask

    @property
    def action_low(self) -> np.ndarray:
        return self._action_low.copy()

    @property
    def action_high(self) -> np.ndarray:
        return self._action_high.copy()

    @property
    def clock(self) -> SimClock:
        return self._clock

    @property
    def coefficients(self) -> RewardCoefficients:
        return self._coeffs

    @property
    def episode_index(self) -> int:
        return self._episode_index

    @property
    def trajectory(self) -> List[dict]:
        return self._trajectory

    @property
    def record_trajectory(self) -> bool:
        return self._record_trajectory

    @record_trajectory.setter
    def record_trajectory(self, flag: bool):
        self._record_trajectory = bool(flag)

    @property
    def speed_scale(self) -> float:
        return self._idm_params.v0 if self._state_normalization else 1.0

    def normalize_observation(self, state_vector: np.ndarray) -> np.ndarray:
        if not self._state_normalization:
            return state_vector
        return state_vector / self._observation_scale

    def compact_action(self, padded_action: np.ndarray) -> np.ndarray:
        padded_action = np.asarray(padded_action, dtype=np.float64)
        if padded_action.shape != (MAX_ACTION_DIM,):
            raise StructuralError("padded action must have shape (4,), got {0}".format(padded_action.shape))
        return padded_action[self.action_mask]

    def reset(self, *, seed: Optional[int] = None, options: Optional[dict] = None) -> Tuple[np.ndarray, dict]:
        super().reset(seed=seed)
        options = options or {}

        if seed is not None:
            self._base_seed = seed
            self._episode_index = 0

        if "scenario" in options:
            self._scenario = options["scenario"]
        else:
            base = self._initial_conditions
            if "noise" in options:
                base = dataclasses.replace(base, reset_noise=bool(options["noise"]))
            composition = (
                self._episode_config.composition if self._episode_config.composition_mode == "fixed" else None
            )
            self._scenario = sample_scenario(
                seed=episode_seed(self._base_seed, self._episode_index),
                p=self._p,
                base=base,
                composition=composition,
                geometry=self._geometry,
            )
        self._episode_index += 1

        self._clock.reset()
        self._termination = TerminationType.RUNNING
        self._hold_steps = 0
        self._trajectory = []
        if self._record_trajectory:
            self._record(self._scenario, RewardBreakdown(0.0, 0.0, 0.0, 0.0, 0.0))

        observation = self.normalize_observation(observe(self._scenario))

        info = {}
        self.fill_info(info)

        assert info.get("ACTION_MASK") is not None, "ACTION_MASK not in info"
        return observation, info

    def step(self, action: np.ndarray):
        outcome = self.advance(action)

        next_observation = self.normalize_observation(outcome.next_state)
        terminated = outcome.terminated.is_terminal
        truncated = outcome.terminated is TerminationType.TIMEOUT

        info = {}
        self.fill_info(info)
        info["REWARD_BREAKDOWN"] = outcome.reward_breakdown
        info["WARNINGS"] = outcome.warnings_triggered
        info["OUTCOME"] = outcome

        return next_observation, outcome.reward, terminated, truncated, info

    def advance(self, action: np.ndarray) -> StepOutcome:
        if self._scenario is None:
            raise UsageError("environment has not been reset")
        if self._termination is not TerminationType.RUNNING:
            raise UsageError("episode already ended with {0}; call reset()".format(self._termination.value))

        scenario = self._scenario
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        mask = scenario.action_mask
        if action.shape[0] != action_dim(scenario):
            raise StructuralError("action dimension {0} does not match scenario dimension {1}".format(
                action.shape[0], action_dim(scenario)
            ))

        # (1) clamp, (2) assign to AgentControlled vehicles
        action = clamp_action(action, self._action_low[mask], self._action_high[mask])
        padded = np.zeros(MAX_ACTION_DIM, dtype=np.float64)
        padded[mask] = action
        commands: Dict[VehicleRole, Tuple[float, float]] = {VehicleRole.EGO: (padded[0], padded[1])}
        if mask[2]:
            commands[VehicleRole.LEAD] = (padded[2], 0.0)
        if mask[3]:
            commands[VehicleRole.LAG] = (padded[3], 0.0)

        previous = dict(scenario.vehicles)
        pairs = self._following_pairs(scenario, commands)

        # (3) IDM accelerations and (4) integration over I substeps
        idm_roles = [role for role in VehicleRole if role not in commands]
        dt = self._episode_config.dt
        sub_dt = dt / self._episode_config.substeps
        vehicles = dict(previous)
        ego_advances = []
        for _ in range(self._episode_config.substeps):
            idm_accelerations, _ = idm_step_accelerations(idm_roles, vehicles, self._geometry, self._idm_params)
            ego_x = vehicles[VehicleRole.EGO].x
            vehicles = {
                role: integrate_kinematics(state, *commands[role], sub_dt) if role in commands
                else integrate_idm(state, idm_accelerations[role], sub_dt)
                for role, state in vehicles.items()
            }
            ego_advances.append(vehicles[VehicleRole.EGO].x - ego_x)
        self._clock.tick()

        world = scenario.with_vehicles(vehicles)
        self._scenario = world
        ego = world.vehicle(VehicleRole.EGO)

        # (5) rewards on the post-step world
        crashed = is_collision(world, dt, self._coeffs)
        r_safety = safety_reward(crashed, ego_advances, self._coeffs)
        r_warning, n_warnings = warning_penalty(pairs, dt, self._coeffs)
        r_comfort = sum(comfort_reward(previous[role], vehicles[role], dt, self._coeffs) for role in commands)
        r_fuel = fuel_emissions_reward([vehicles[role] for role in commands], self._coeffs, self._fuel, dt)
        r_lateral = lateral_reward(ego.y, world.target_centerline, self._coeffs)
        reward, breakdown = total_reward((r_safety, r_warning, r_comfort, r_fuel, r_lateral))

        # (6) termination
        if abs(ego.y - world.target_centerline) <= self._episode_config.success_lateral_tol:
            self._hold_steps += 1
        else:
            self._hold_steps = 0

        if crashed:
            self._termination = TerminationType.CRASH
        elif not self._geometry.contains(ego.x, ego.y):
            self._termination = TerminationType.OUT_OF_BOUNDS
        elif self._hold_steps >= self._episode_config.success_hold_steps:
            self._termination = TerminationType.SUCCESS
        elif self._clock.step_index >= self._episode_config.max_steps:
            self._termination = TerminationType.TIMEOUT

        if self._record_trajectory:
            self._record(world, breakdown)

        return StepOutcome(
            next_state=observe(world),
            reward=reward,
            reward_breakdown=breakdown,
            terminated=self._termination,
            warnings_triggered=n_warnings,
        )

    def _following_pairs(
            self, scenario: ScenarioInstance, commands: Mapping[VehicleRole, Tuple[float, float]]
    ) -> List[FollowingPair]:
        vehicles = scenario.vehicles
        pairs = []
        for role, (ax_command, _) in commands.items():
            if role is VehicleRole.EGO:
                lanes = self._geometry.occupied_lanes(vehicles[role].y, scenario.vehicle_width)
            else:
                lanes = (self._geometry.lane_index(vehicles[role].y),)
            for lane in lanes:
                leader = find_leader(role, vehicles, self._geometry, lane=lane)
                if leader is not None:
                    pairs.append(FollowingPair(vehicles[role], vehicles[leader], ax_command))
        return pairs

    def _record(self, world: ScenarioInstance, breakdown: RewardBreakdown) -> None:
        for role in VehicleRole:
            state: VehicleState = world.vehicles[role]
            self._trajectory.append({
                "episode": self._episode_index,
                "step": self._clock.step_index,
                "role": role.value,
                "x": state.x, "y": state.y, "vx": state.vx, "vy": state.vy, "ax": state.ax, "ay": state.ay,
                "r_safety": breakdown.safety,
                "r_warning": breakdown.warning,
                "r_comfort": breakdown.comfort,
                "r_fuel": breakdown.fuel,
                "r_lateral": breakdown.lateral,
                "termination": self._termination.value,
            })

    def write_trajectory(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=TRAJECTORY_FIELDS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(self._trajectory)

    def render(self):
        return None

    def fill_info(self, info: dict):
        info["SCENARIO"] = self._scenario
        info["COMPOSITION"] = self._scenario.composition
        info["ACTION_MASK"] = self._scenario.action_mask
        info["TERMINATION"] = self._termination
        info["STEP"] = self._clock.step_index

    @staticmethod
    def _print_env_config(env_config: Mapping):
        for k, v in env_config.items():
            print("{0:>50}: {1}".format(k, v))

