import copy
import hashlib
import json
from dataclasses import dataclass
from typing import Any, Dict, Optional

import yaml

ENV_NAME = "CLCMT"
CONFIG_VERSION = 1

ALGORITHM_NAMES = ("ddpg", "td3", "sac", "ppo")

### VT-MICRO STYLE FUEL TABLE: START ###
# ln(fuel rate [L/s]) = sum_ij K[i][j] * v^i * a^j  (v: m/s, a: m/s^2)
DEFAULT_FUEL_TABLE = [
    [-7.5,    0.45,   0.05, 0.0],
    [0.02,    0.01,   0.0,  0.0],
    [-2.0e-4, 1.0e-4, 0.0,  0.0],
    [1.0e-6,  0.0,    0.0,  0.0],
]
### VT-MICRO STYLE FUEL TABLE: END ###

env_config = {
    "geometry": {
        "road_length": 150.0,                   # 도로 길이 (m)
        "lane_width": 3.75,                     # 차선 폭 (m)
        "lane_count": 2,                        # 차선 개수
    },
    "initial_conditions": {
        "ego_x": 60.0,                          # 자차 초기 종방향 위치 (m)
        "ego_lane": 0,                          # 자차 초기 차선 인덱스
        "target_lane": 1,                       # 목표 차선 인덱스
        "spacing": 30.0,                        # leader-follower 간격 L (m)
        "flow_speed": 15.0,                     # 교통류 초기 속도 (m/s)
        "vehicle_length": 5.0,                  # 차량 길이 l_veh (m)
        "vehicle_width": 1.8,                   # 차량 폭, 차선 점유 판정용 (m)
        "noise_x": [0.0, 1.0],                  # 리셋 시 x 잡음 범위 (m)
        "noise_y": [0.0, 0.5],                  # 리셋 시 y 잡음 범위 (m)
        "noise_v": [0.0, 2.0],                  # 리셋 시 속도 잡음 범위 (m/s)
        "reset_noise": True,                    # 리셋 잡음 사용 유무
    },
    "idm": {
        "a1": 3.0,                              # 최대 가속도 (m/s^2)
        "v0": 20.0,                             # 희망 속도 (m/s)
        "s0": 2.0,                              # 최소 간격 (m)
        "delta": 4.0,                           # 가속 지수
        "T": 1.0,                               # 안전 시간 간격 (s)
        "b1": 1.5,                              # 편안한 감속도 (m/s^2)
        "a_max_brake": 6.0,                     # 비상 최대 감속도 (m/s^2)
    },
    "rewards": {
        "alpha": 1.0,                           # 전진 보상 계수
        "beta": 0.1,                            # 생존 보상 상수
        "c": 50.0,                              # 충돌 페널티
        "w": 5.0,                               # 경고 1회당 페널티
        "b1_c": 0.1,                            # 저크 페널티 계수
        "b2_c": 1.0,                            # 요 변화 페널티 계수
        "kappa": 0.01,                          # 연료/배출 페널티 계수
        "omega": -0.5,                          # 횡방향 편차 선형 계수 (음수)
        "varrho": -4.0,                         # 횡방향 편차 2차 계수
        "zeta": 1.0,                            # 중심선 정렬 최대 보상
        "theta_lat": 0.0,                       # 2차 보상 꼭짓점 위치 (m)
        "d0": 2.0,                              # 최소 안전 거리 (m)
        "a_s": 0.5,                             # 추가 안전 여유 가속도 (m/s^2)
        "lateral_band": 0.5,                    # 2차 보상이 적용되는 편차 범위 (m)
        "lateral_branch_tol": 0.3,              # 두 분기 경계 불연속 허용치
        "fuel_exponent_cap": 20.0,              # 연료 모델 지수 상한
    },
    "fuel_table": DEFAULT_FUEL_TABLE,           # 4x4 연료 회귀 계수 K[i][j]
    "episode": {
        "dt": 0.1,                              # 시뮬레이션 시간 간격 (s)
        "substeps": 1,                          # 스텝 내부 적분 횟수 I
        "max_steps": 200,                       # 에피소드 최대 스텝
        "success_lateral_tol": 0.1,             # 성공 판정 횡방향 허용 오차 (m)
        "success_hold_steps": 3,                # 성공 판정 유지 스텝 수
        "composition_mode": "fixed",            # fixed: 고정 구성, mixed: 균등 샘플링
        "composition": "CAV_CAV",               # fixed 모드에서 사용할 leader-follower 구성
    },
    "action_bounds": {
        "longitudinal": [-3.0, 3.0],            # 종방향 가속도 범위 (m/s^2)
        "lateral": [-3.0, 3.0],                 # 횡방향 가속도 범위 (m/s^2)
    },
    "chv_adoption_probability": 0.5,            # HV가 협력 권고를 수용할 확률 p
    "state_normalization": True,                # 상태 정보 정규화 유무
}

_common_algorithm_config = {
    "gamma": 0.995,                             # 감가율
    "learning_rate": 6e-5,                      # 학습율
    "hidden_sizes": [256, 256],                 # 은닉층 폭
}

_off_policy_config = _common_algorithm_config | {
    "batch_size": 2000,                         # 리플레이 버퍼에서 한번에 가져오는 배치 사이즈
    "replay_buffer_size": 50_000,               # 리플레이 버퍼 사이즈
    "warmup_steps": 10_000,                     # 훈련 전 워밍업 스텝 수
    "steps_between_train": 1,                   # 훈련 사이의 환경 스텝 수
    "tau": 0.005,                               # 타깃 네트워크 polyak 계수
}

algorithm_configs = {
    "ddpg": _off_policy_config | {
        "exploration_noise": 0.5,               # 탐색 잡음 표준편차 (m/s^2)
        "exploration_noise_clip": 1.0,          # 탐색 잡음 절단 값 (m/s^2)
    },
    "td3": _off_policy_config | {
        "exploration_noise": 0.5,               # 탐색 잡음 표준편차 (m/s^2)
        "exploration_noise_clip": 1.0,          # 탐색 잡음 절단 값 (m/s^2)
        "smoothing_noise": 0.5,                 # 타깃 정책 평활화 잡음 표준편차
        "smoothing_noise_clip": 0.5,            # 평활화 잡음 절단 값
        "policy_delay": 2,                      # actor 업데이트 지연 간격
    },
    "sac": _off_policy_config | {
        "auto_entropy": True,                   # 온도 파라미터 자동 조정 유무
        "initial_alpha": 0.2,                   # 초기 온도 파라미터
        "log_std_min": -20.0,                   # log 표준편차 하한
        "log_std_max": 2.0,                     # log 표준편차 상한
    },
    "ppo": _common_algorithm_config | {
        "batch_size": 2000,                     # 업데이트 사이 롤아웃 길이
        "minibatch_size": 200,                  # 미니배치 크기
        "ppo_epochs": 10,                       # 업데이트 당 에폭 수
        "clip_ratio": 0.2,                      # 확률비 절단 범위 epsilon
        "gae_lambda": 0.95,                     # GAE lambda
        "entropy_coef": 0.0,                    # 엔트로피 보너스 가중치
        "value_loss_coef": 0.5,                 # 가치 손실 가중치
        "log_std_min": -5.0,                    # log 표준편차 하한
        "log_std_max": 1.0,                     # log 표준편차 상한
    },
}

schedule_config = {
    "episodes": 5000,                           # 훈련을 위한 최대 에피소드 횟수
    "checkpoint_interval": 500,                 # 체크포인트 저장 에피소드 간격
    "eval_interval": 100,                       # 검증 사이 마다 각 훈련 episode 간격
    "validation_num_episodes": 10,              # 검증에 수행하는 에피소드 횟수
    "print_episode_interval": 10,               # Episode 통계 출력에 관한 에피소드 간격
    "trajectory_interval": 10,                  # 궤적 기록 에피소드 간격
    "stage_window": 200,                        # early/late 단계 에피소드 수
    "moving_average_window": 50,                # 보상 이동 평균 창 크기
    "convergence_window": 1000,                 # 효용 계산에 사용하는 마지막 에피소드 수
}

DEFAULT_SEED = 0


class ConfigError(ValueError):
    pass


def _merge_checked(defaults: Dict[str, Any], overrides: Dict[str, Any], path: str) -> Dict[str, Any]:
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        key_path = "{0}.{1}".format(path, key) if path else key
        if key not in defaults:
            raise ConfigError("unknown key: {0}".format(key_path))
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError("{0} must be a mapping".format(key_path))
            merged[key] = _merge_checked(defaults[key], value, key_path)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _validate_environment(env: Dict[str, Any]) -> None:
    geometry = env["geometry"]
    _require(geometry["road_length"] > 0, "environment.geometry.road_length must be > 0")
    _require(geometry["lane_width"] > 0, "environment.geometry.lane_width must be > 0")
    _require(geometry["lane_count"] == 2, "environment.geometry.lane_count must be 2")

    for key, value in env["idm"].items():
        _require(value > 0, "environment.idm.{0} must be > 0".format(key))

    rewards = env["rewards"]
    _require(rewards["c"] > 0, "environment.rewards.c must be > 0")
    _require(rewards["w"] > 0, "environment.rewards.w must be > 0")
    _require(rewards["b1_c"] >= 0 and rewards["b2_c"] >= 0, "environment.rewards.b1_c/b2_c must be >= 0")
    _require(rewards["kappa"] >= 0, "environment.rewards.kappa must be >= 0")

    table = env["fuel_table"]
    _require(
        isinstance(table, list) and len(table) == 4 and all(isinstance(row, list) and len(row) == 4 for row in table),
        "environment.fuel_table must be a 4x4 list"
    )

    episode = env["episode"]
    _require(episode["dt"] > 0, "environment.episode.dt must be > 0")
    _require(episode["substeps"] >= 1, "environment.episode.substeps must be >= 1")
    _require(episode["max_steps"] > 0, "environment.episode.max_steps must be > 0")
    _require(episode["success_lateral_tol"] > 0, "environment.episode.success_lateral_tol must be > 0")
    _require(episode["success_hold_steps"] >= 1, "environment.episode.success_hold_steps must be >= 1")
    _require(
        episode["composition_mode"] in ("fixed", "mixed"),
        "environment.episode.composition_mode must be 'fixed' or 'mixed'"
    )
    _require(
        episode["composition"] in ("CAV_CAV", "HV_CAV", "CAV_HV", "HV_HV"),
        "environment.episode.composition must be one of CAV_CAV, HV_CAV, CAV_HV, HV_HV"
    )

    for key, (low, high) in env["action_bounds"].items():
        _require(low < high, "environment.action_bounds.{0}: low must be < high".format(key))

    p = env["chv_adoption_probability"]
    _require(0.0 <= p <= 1.0, "environment.chv_adoption_probability must be in [0, 1]")


def _validate_algorithm(algorithm: Dict[str, Any]) -> None:
    _require(0.0 < algorithm["gamma"] < 1.0, "algorithm.gamma must be in (0, 1)")
    _require(algorithm["learning_rate"] > 0, "algorithm.learning_rate must be > 0")
    _require(algorithm["batch_size"] > 0, "algorithm.batch_size must be > 0")
    _require(all(h > 0 for h in algorithm["hidden_sizes"]), "algorithm.hidden_sizes must be positive")
    if "tau" in algorithm:
        _require(0.0 < algorithm["tau"] <= 1.0, "algorithm.tau must be in (0, 1]")
        _require(
            algorithm["batch_size"] <= algorithm["replay_buffer_size"],
            "algorithm.batch_size must not exceed replay_buffer_size"
        )
    if "clip_ratio" in algorithm:
        _require(0.0 < algorithm["clip_ratio"] < 1.0, "algorithm.clip_ratio must be in (0, 1)")
        _require(0.0 <= algorithm["gae_lambda"] <= 1.0, "algorithm.gae_lambda must be in [0, 1]")
    if "exploration_noise_clip" in algorithm:
        _require(algorithm["exploration_noise_clip"] > 0, "algorithm.exploration_noise_clip must be > 0")
    if "policy_delay" in algorithm:
        _require(algorithm["policy_delay"] >= 1, "algorithm.policy_delay must be >= 1")


def _validate_schedule(schedule: Dict[str, Any]) -> None:
    for key, value in schedule.items():
        _require(isinstance(value, int) and value > 0, "schedule.{0} must be a positive integer".format(key))


@dataclass
class RunConfig:
    seed: int
    environment: Dict[str, Any]
    algorithm: Dict[str, Any]
    schedule: Dict[str, Any]

    @property
    def algorithm_name(self) -> str:
        return self.algorithm["name"]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "environment": copy.deepcopy(self.environment),
            "algorithm": copy.deepcopy(self.algorithm),
            "schedule": copy.deepcopy(self.schedule),
        }

    def coefficient_hash(self) -> str:
        payload = json.dumps(
            {"rewards": self.environment["rewards"], "fuel_table": self.environment["fuel_table"]},
            sort_keys=True
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)


def build_run_config(
        raw: Optional[Dict[str, Any]] = None,
        seed: Optional[int] = None,
        algo: Optional[str] = None,
        episodes: Optional[int] = None
) -> RunConfig:
    raw = copy.deepcopy(raw) if raw else {}
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be a mapping")

    unknown = set(raw) - {"version", "seed", "environment", "algorithm", "schedule"}
    if unknown:
        raise ConfigError("unknown key: {0}".format(sorted(unknown)[0]))

    algorithm_raw = raw.get("algorithm") or {}
    if not isinstance(algorithm_raw, dict):
        raise ConfigError("algorithm must be a mapping")
    algorithm_raw = dict(algorithm_raw)
    name = algo if algo is not None else algorithm_raw.pop("name", "ppo")
    algorithm_raw.pop("name", None)
    if name not in ALGORITHM_NAMES:
        raise ConfigError("algorithm.name must be one of {0}".format(", ".join(ALGORITHM_NAMES)))

    environment = _merge_checked(env_config, raw.get("environment") or {}, "environment")
    algorithm = _merge_checked(algorithm_configs[name], algorithm_raw, "algorithm")
    algorithm = {"name": name} | algorithm
    schedule = _merge_checked(schedule_config, raw.get("schedule") or {}, "schedule")

    if episodes is not None:
        schedule["episodes"] = episodes

    run_seed = raw.get("seed", DEFAULT_SEED) if seed is None else seed
    _require(isinstance(run_seed, int) and 0 <= run_seed < 2 ** 64, "seed must be a 64-bit unsigned integer")

    _validate_environment(environment)
    _validate_algorithm(algorithm)
    _validate_schedule(schedule)

    return RunConfig(seed=run_seed, environment=environment, algorithm=algorithm, schedule=schedule)


def load_run_config(
        path: str, seed: Optional[int] = None, algo: Optional[str] = None, episodes: Optional[int] = None
) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError("config file not found: {0}".format(path)) from e
    except yaml.YAMLError as e:
        raise ConfigError("malformed YAML in {0}: {1}".format(path, str(e).splitlines()[0])) from e

    return build_run_config(raw, seed=seed, algo=algo, episodes=episodes)


def print_config(config: Dict[str, Any], indent: int = 0) -> None:
    for k, v in config.items():
        if isinstance(v, dict):
            print("{0:>50}:".format(" " * indent + k))
            print_config(v, indent + 2)
        else:
            print("{0:>50}: {1}".format(" " * indent + k, v))
