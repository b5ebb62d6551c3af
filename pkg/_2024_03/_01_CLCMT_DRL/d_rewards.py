import dataclasses
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence, Tuple

import numpy as np

from _2024_03._01_CLCMT_DRL.b_world import VehicleState


@dataclass(frozen=True)
class RewardCoefficients:
    alpha: float = 1.0
    beta: float = 0.1
    c: float = 50.0
    w: float = 5.0
    b1_c: float = 0.1
    b2_c: float = 1.0
    kappa: float = 0.01
    omega: float = -0.5
    varrho: float = -4.0
    zeta: float = 1.0
    theta_lat: float = 0.0
    d0: float = 2.0
    a_s: float = 0.5
    lateral_band: float = 0.5
    lateral_branch_tol: float = 0.3
    fuel_exponent_cap: float = 20.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise ValueError("reward coefficient {0} must be finite".format(f.name))
        if self.c <= 0 or self.w <= 0:
            raise ValueError("c and w must be > 0")
        if self.b1_c < 0 or self.b2_c < 0 or self.kappa < 0:
            raise ValueError("b1_c, b2_c and kappa must be >= 0")

    @classmethod
    def from_config(cls, config: Mapping) -> "RewardCoefficients":
        return cls(**config)


@dataclass(frozen=True)
class FuelModelCoeffs:
    table: Tuple[Tuple[float, ...], ...]

    def __post_init__(self):
        k = np.asarray(self.table, dtype=np.float64)
        if k.shape != (4, 4):
            raise ValueError("fuel table must be 4x4, got {0}".format(k.shape))
        if not np.all(np.isfinite(k)):
            raise ValueError("fuel table must be finite")

    @classmethod
    def from_config(cls, table: Sequence[Sequence[float]]) -> "FuelModelCoeffs":
        return cls(tuple(tuple(float(v) for v in row) for row in table))

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.table, dtype=np.float64)

    def log_rate(self, v: float, a: float) -> float:
        powers_v = np.array([1.0, v, v ** 2, v ** 3])
        powers_a = np.array([1.0, a, a ** 2, a ** 3])
        return float(powers_v @ self.matrix @ powers_a)


class RewardBreakdown(NamedTuple):
    safety: float
    warning: float
    comfort: float
    fuel: float
    lateral: float

    @property
    def total(self) -> float:
        return self.safety + self.warning + self.comfort + self.fuel + self.lateral


class FollowingPair(NamedTuple):
    follower: VehicleState
    leader: VehicleState
    commanded_acceleration: float


def safety_reward(crashed: bool, ego_advances: Iterable[float], coeffs: RewardCoefficients) -> float:
    if crashed:
        return -coeffs.c
    return coeffs.alpha * sum(ego_advances) + coeffs.beta


def target_gap_d_tar(lead: VehicleState, ego: VehicleState, t: float, d0: float) -> float:
    return (lead.x - ego.x) + (lead.vx - ego.vx) * t + 0.5 * (lead.ax - ego.ax) * t * t + d0


def warning_triggered(pair: FollowingPair, dt: float, coeffs: RewardCoefficients) -> bool:
    follower, leader = pair.follower, pair.leader
    delta_x = leader.x - follower.x - leader.length
    delta_v = follower.vx - leader.vx
    delta_a = follower.ax - leader.ax
    if delta_x > coeffs.d0 + delta_v * dt + 0.5 * delta_a * dt * dt:
        return False
    return not pair.commanded_acceleration <= leader.ax - coeffs.a_s


def warning_penalty(pairs: Iterable[FollowingPair], dt: float, coeffs: RewardCoefficients) -> Tuple[float, int]:
    count = sum(1 for pair in pairs if warning_triggered(pair, dt, coeffs))
    return -coeffs.w * count, count


def heading(state: VehicleState) -> float:
    return math.atan2(state.vy, state.vx)


def comfort_reward(ego_prev: VehicleState, ego_now: VehicleState, dt: float, coeffs: RewardCoefficients) -> float:
    if dt <= 0:
        raise ValueError("dt must be > 0")
    jerk = math.hypot(ego_now.ax - ego_prev.ax, ego_now.ay - ego_prev.ay) / dt
    yaw_change = heading(ego_now) - heading(ego_prev)
    yaw_change = (yaw_change + math.pi) % (2.0 * math.pi) - math.pi
    return -coeffs.b1_c * abs(jerk) - coeffs.b2_c * abs(yaw_change)


def fuel_rate(state: VehicleState, fuel: FuelModelCoeffs, exponent_cap: float) -> float:
    exponent = fuel.log_rate(max(state.vx, 0.0), state.ax)
    if exponent > exponent_cap:
        warnings.warn(
            "fuel model exponent {0:.3f} capped at {1:.3f} (v={2:.3f}, a={3:.3f})".format(
                exponent, exponent_cap, state.vx, state.ax
            ),
            RuntimeWarning
        )
        exponent = exponent_cap
    return math.exp(exponent)


def fuel_emissions_reward(
        controlled_states: Iterable[VehicleState], coeffs: RewardCoefficients, fuel: FuelModelCoeffs, dt: float
) -> float:
    if coeffs.kappa == 0.0:
        return 0.0
    total_fuel = sum(fuel_rate(state, fuel, coeffs.fuel_exponent_cap) * dt for state in controlled_states)
    return -coeffs.kappa * total_fuel


def lateral_reward(y_ego: float, target_centerline: float, coeffs: RewardCoefficients) -> float:
    deviation = abs(y_ego - target_centerline)
    if deviation <= coeffs.lateral_band:
        return coeffs.varrho * (deviation - coeffs.theta_lat) ** 2 + coeffs.zeta
    return coeffs.omega * deviation


def lateral_branch_mismatch(coeffs: RewardCoefficients) -> float:
    band = coeffs.lateral_band
    return abs(coeffs.varrho * (band - coeffs.theta_lat) ** 2 + coeffs.zeta - coeffs.omega * band)


def total_reward(components: Sequence[float]) -> Tuple[float, RewardBreakdown]:
    breakdown = RewardBreakdown(*components)
    return breakdown.total, breakdown


### CRASH DOMINANCE BOUNDS ###

def _lateral_range(coeffs: RewardCoefficients, max_lateral_deviation: float) -> Tuple[float, float]:
    deviations = np.concatenate((
        np.linspace(0.0, coeffs.lateral_band, 101),
        np.linspace(coeffs.lateral_band, max(max_lateral_deviation, coeffs.lateral_band), 101)[1:] + 1e-12,
    ))
    values = [lateral_reward(d, 0.0, coeffs) for d in deviations]
    return min(values), max(values)


def crash_reward_upper_bound(coeffs: RewardCoefficients, max_lateral_deviation: float) -> float:
    # warning, comfort and fuel are never positive
    return -coeffs.c + _lateral_range(coeffs, max_lateral_deviation)[1]


def non_crash_reward_lower_bound(
        coeffs: RewardCoefficients,
        fuel: FuelModelCoeffs,
        longitudinal_bounds: Tuple[float, float],
        lateral_bounds: Tuple[float, float],
        dt: float,
        speed_range: Tuple[float, float],
        max_lateral_deviation: float,
        max_warnings: int,
        n_longitudinal_controlled: int = 3
) -> float:
    """Lower bound of one non-crash step's total reward over the clamped action box."""
    v_min, v_max = speed_range
    ax_low, ax_high = longitudinal_bounds
    ay_low, ay_high = lateral_bounds

    advance_min = min(v_min * dt + 0.5 * ax_low * dt * dt, 0.0)
    safety_min = coeffs.alpha * advance_min + coeffs.beta

    warning_min = -coeffs.w * max_warnings

    ego_jerk_max = math.hypot(ax_high - ax_low, ay_high - ay_low) / dt
    other_jerk_max = (ax_high - ax_low) / dt
    comfort_min = (
        -coeffs.b1_c * (ego_jerk_max + (n_longitudinal_controlled - 1) * other_jerk_max)
        - coeffs.b2_c * math.pi
    )

    speeds = np.linspace(max(v_min, 0.0), v_max, 61)
    accelerations = np.linspace(ax_low, ax_high, 61)
    log_rates = [fuel.log_rate(v, a) for v in speeds for a in accelerations]
    rate_max = math.exp(min(max(log_rates), coeffs.fuel_exponent_cap))
    fuel_min = -coeffs.kappa * rate_max * dt * n_longitudinal_controlled

    lateral_min = _lateral_range(coeffs, max_lateral_deviation)[0]

    return safety_min + warning_min + comfort_min + fuel_min + lateral_min
