"""Marine world simulation: Rankine vortex currents, circular obstacles and a
point robot whose steering velocity is disturbed by the local current."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SNAPSHOT_FORMAT = "vortexnav-env/1"


class Outcome(str, enum.Enum):
    RUNNING = "running"
    GOAL = "goal"
    COLLISION = "collision"
    OUT_OF_BOUNDS = "out_of_bounds"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class Vortex:
    center: tuple[float, float]
    core_radius: float
    circulation: float

    @classmethod
    def from_edge_speed(cls, center, core_radius: float, v_edge: float, clockwise: bool = False) -> "Vortex":
        gamma = 2.0 * math.pi * core_radius * v_edge
        return cls((float(center[0]), float(center[1])), float(core_radius), -gamma if clockwise else gamma)

    @property
    def edge_speed(self) -> float:
        return abs(self.circulation) / (2.0 * math.pi * self.core_radius)


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class Action:
    accel: float
    turn_rate: float


ACCELS = (-0.4, 0.0, 0.4)
TURN_RATES = (-0.52, 0.0, 0.52)
# index = 3 * accel_index + turn_index
ACTIONS: tuple[Action, ...] = tuple(Action(a, w) for a in ACCELS for w in TURN_RATES)
N_ACTIONS = len(ACTIONS)


def action_index(accel: float, turn_rate: float) -> int:
    return 3 * ACCELS.index(accel) + TURN_RATES.index(turn_rate)


def wrap_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]."""
    return math.pi - (math.pi - theta) % (2.0 * math.pi)


@dataclass
class RobotState:
    position: np.ndarray
    heading: float
    speed: float

    def copy(self) -> "RobotState":
        return RobotState(np.array(self.position, dtype=float), float(self.heading), float(self.speed))

    @property
    def steering_velocity(self) -> np.ndarray:
        return self.speed * np.array([math.cos(self.heading), math.sin(self.heading)])


@dataclass(frozen=True)
class RewardParams:
    r_step: float = -1.0
    r_collision: float = -50.0
    r_goal: float = 100.0
    alpha: float = 1.0
    gamma: float = 0.99


@dataclass(frozen=True)
class EnvConfig:
    map_size: float = 50.0
    v_max: float = 2.0
    clearance: float = 0.5
    goal_radius: float = 2.0
    substeps: int = 10
    max_steps: int = 1000
    core_radius_range: tuple[float, float] = (0.5, 2.0)
    edge_speed_range: tuple[float, float] = (5.0, 10.0)
    obstacle_radius_range: tuple[float, float] = (1.0, 3.0)
    obstacle_standoff: float = 5.0
    placement_margin: float = 2.5
    enforce_boundary: bool = False
    boundary_margin: float = 0.0
    max_retries: int = 10_000

    @classmethod
    def from_dict(cls, data: dict) -> "EnvConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown env config keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**kwargs)


# (vortices, obstacles, min start-goal distance) per curriculum phase
PHASES = {1: (4, 6, 30.0), 2: (6, 8, 35.0), 3: (8, 10, 40.0)}
# evaluation test cases reuse the easiest and hardest phase counts
TEST_CASES = {1: (4, 6), 2: (8, 10)}
TEST_START = (5.0, 5.0)
TEST_GOAL = (45.0, 45.0)


class GenerationError(RuntimeError):
    pass


def _rankine(centers: np.ndarray, gammas: np.ndarray, core: np.ndarray, point: np.ndarray) -> np.ndarray:
    d = point - centers
    r2 = d[:, 0] ** 2 + d[:, 1] ** 2
    inside = r2 <= core**2
    scale = gammas / (2.0 * math.pi) * np.where(inside, 1.0 / core**2, 1.0 / np.where(inside, 1.0, r2))
    return np.array([-(scale * d[:, 1]).sum(), (scale * d[:, 0]).sum()])


def rankine_velocity(vortex: Vortex, point) -> np.ndarray:
    """Tangential Rankine flow of a single vortex at ``point``."""
    return _rankine(
        np.array([vortex.center], dtype=float),
        np.array([vortex.circulation], dtype=float),
        np.array([vortex.core_radius], dtype=float),
        np.asarray(point, dtype=float),
    )


@dataclass
class Environment:
    vortices: list[Vortex]
    obstacles: list[Obstacle]
    start: np.ndarray
    goal: np.ndarray
    robot: RobotState
    config: EnvConfig = field(default_factory=EnvConfig)
    rewards: RewardParams = field(default_factory=RewardParams)
    step_count: int = 0
    rng_seed: int | None = None
    phase: int | None = None
    test_case: int | None = None

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        self._v_center = np.array([v.center for v in self.vortices], dtype=float).reshape(-1, 2)
        self._v_gamma = np.array([v.circulation for v in self.vortices], dtype=float)
        self._v_core = np.array([v.core_radius for v in self.vortices], dtype=float)
        self.obstacle_centers = np.array([o.center for o in self.obstacles], dtype=float).reshape(-1, 2)
        self.obstacle_radii = np.array([o.radius for o in self.obstacles], dtype=float)
        self.initial_robot = self.robot.copy()

    # -- flow ---------------------------------------------------------------
    def flow(self, point) -> np.ndarray:
        if not self.vortices:
            return np.zeros(2)
        return _rankine(self._v_center, self._v_gamma, self._v_core, np.asarray(point, dtype=float))

    def flow_grid(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Flow on a meshgrid, shape (len(ys), len(xs), 2)."""
        gx, gy = np.meshgrid(xs, ys)
        out = np.zeros(gx.shape + (2,))
        for c, g, r0 in zip(self._v_center, self._v_gamma, self._v_core):
            dx, dy = gx - c[0], gy - c[1]
            r2 = dx**2 + dy**2
            inside = r2 <= r0**2
            s = g / (2.0 * math.pi) * np.where(inside, 1.0 / r0**2, 1.0 / np.where(inside, 1.0, r2))
            out[..., 0] -= s * dy
            out[..., 1] += s * dx
        return out

    # -- termination ----------------------------------------------------------
    def goal_distance(self, position=None) -> float:
        p = self.robot.position if position is None else position
        return float(math.hypot(p[0] - self.goal[0], p[1] - self.goal[1]))

    def in_collision(self, position) -> bool:
        if not self.obstacles:
            return False
        d = np.hypot(*(self.obstacle_centers - position).T)
        return bool(np.any(d <= self.obstacle_radii + self.config.clearance))

    def out_of_bounds(self, position) -> bool:
        lo = -self.config.boundary_margin
        hi = self.config.map_size + self.config.boundary_margin
        return not (lo <= position[0] <= hi and lo <= position[1] <= hi)

    def classify(self, position, step_count: int) -> Outcome:
        if self.in_collision(position):
            return Outcome.COLLISION
        if self.goal_distance(position) <= self.config.goal_radius:
            return Outcome.GOAL
        if self.config.enforce_boundary and self.out_of_bounds(position):
            return Outcome.OUT_OF_BOUNDS
        if step_count >= self.config.max_steps:
            return Outcome.TIMEOUT
        return Outcome.RUNNING

    # -- stepping -------------------------------------------------------------
    def step(self, action: int | Action, dt: float) -> tuple[float, Outcome]:
        """Advance one control step; returns (reward, outcome)."""
        if isinstance(action, (int, np.integer)):
            action = ACTIONS[int(action)]
        prev_d = self.goal_distance()
        robot, outcome = step_dynamics(self, action, dt)
        self.robot = robot
        self.step_count += 1
        if outcome is Outcome.RUNNING:
            outcome = self.classify(robot.position, self.step_count)
        r = reward(prev_d, self.goal_distance(), outcome, self.rewards)
        return r, outcome

    # -- serialization --------------------------------------------------------
    def to_snapshot(self) -> dict:
        cfg = {k: list(v) if isinstance(v, tuple) else v for k, v in self.config.__dict__.items()}
        return {
            "format": SNAPSHOT_FORMAT,
            "seed": self.rng_seed,
            "phase": self.phase,
            "test_case": self.test_case,
            "config": cfg,
            "vortices": [
                {"center": list(v.center), "core_radius": v.core_radius, "circulation": v.circulation}
                for v in self.vortices
            ],
            "obstacles": [{"center": list(o.center), "radius": o.radius} for o in self.obstacles],
            "start": [float(x) for x in self.start],
            "goal": [float(x) for x in self.goal],
            "robot": {
                "position": [float(x) for x in self.initial_robot.position],
                "heading": self.initial_robot.heading,
                "speed": self.initial_robot.speed,
            },
        }

    @classmethod
    def from_snapshot(cls, data: dict) -> "Environment":
        if data.get("format") != SNAPSHOT_FORMAT:
            raise ValueError(f"not an environment snapshot (format={data.get('format')!r})")
        robot = data["robot"]
        return cls(
            vortices=[Vortex(tuple(v["center"]), v["core_radius"], v["circulation"]) for v in data["vortices"]],
            obstacles=[Obstacle(tuple(o["center"]), o["radius"]) for o in data["obstacles"]],
            start=np.array(data["start"]),
            goal=np.array(data["goal"]),
            robot=RobotState(np.array(robot["position"], dtype=float), robot["heading"], robot["speed"]),
            config=EnvConfig.from_dict(data["config"]),
            rng_seed=data.get("seed"),
            phase=data.get("phase"),
            test_case=data.get("test_case"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_snapshot(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Environment":
        return cls.from_snapshot(json.loads(Path(path).read_text()))


def flow_at(env: Environment, point) -> np.ndarray:
    """Superposed current of every vortex in ``env`` at ``point``."""
    return env.flow(point)


def step_dynamics(env: Environment, action: Action, dt: float) -> tuple[RobotState, Outcome]:
    """Integrate the robot over one control step without mutating ``env``.

    Heading and steering speed follow their closed forms; position is
    integrated with classical RK4 on fixed substeps. Collision, goal and
    boundary events are checked after every substep and stop the motion.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    cfg = env.config
    x = np.array(env.robot.position, dtype=float)
    th0, s0 = env.robot.heading, env.robot.speed
    a, w = action.accel, action.turn_rate
    vmax = cfg.v_max

    def vel(t, p):
        s = min(max(s0 + a * t, 0.0), vmax)
        th = th0 + w * t
        return env.flow(p) + s * np.array([math.cos(th), math.sin(th)])

    n = cfg.substeps
    h = dt / n
    outcome = Outcome.RUNNING
    t = 0.0
    for k in range(n):
        t = k * h
        k1 = vel(t, x)
        k2 = vel(t + 0.5 * h, x + 0.5 * h * k1)
        k3 = vel(t + 0.5 * h, x + 0.5 * h * k2)
        k4 = vel(t + h, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = (k + 1) * h
        outcome = env.classify(x, -1)
        if outcome is not Outcome.RUNNING:
            break
    speed = min(max(s0 + a * t, 0.0), vmax)
    return RobotState(x, wrap_angle(th0 + w * t), speed), outcome


def reward(prev_distance: float, distance: float, outcome: Outcome, params: RewardParams = RewardParams()) -> float:
    r = params.r_step + params.alpha * (prev_distance - distance)
    if outcome is Outcome.COLLISION:
        r += params.r_collision
    elif outcome is Outcome.GOAL:
        r += params.r_goal
    return r


def classify_termination(env: Environment) -> Outcome:
    return env.classify(env.robot.position, env.step_count)


def _sample_vortices(rng: np.random.Generator, n: int, cfg: EnvConfig) -> list[Vortex]:
    out = []
    for _ in range(n):
        center = rng.uniform(0.0, cfg.map_size, size=2)
        r0 = rng.uniform(*cfg.core_radius_range)
        v_edge = rng.uniform(*cfg.edge_speed_range)
        clockwise = bool(rng.integers(2))
        out.append(Vortex.from_edge_speed(center, r0, v_edge, clockwise))
    return out


def _sample_obstacles(rng, n, cfg: EnvConfig, keep_clear: list[np.ndarray]) -> list[Obstacle]:
    out = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > cfg.max_retries:
            raise GenerationError(f"could not place {n} obstacles after {cfg.max_retries} tries")
        c = rng.uniform(0.0, cfg.map_size, size=2)
        r = rng.uniform(*cfg.obstacle_radius_range)
        if all(np.hypot(*(c - p)) - r >= cfg.obstacle_standoff for p in keep_clear):
            out.append(Obstacle((float(c[0]), float(c[1])), float(r)))
    return out


def _initial_robot(rng, start: np.ndarray, cfg: EnvConfig) -> RobotState:
    heading = wrap_angle(rng.uniform(-math.pi, math.pi))
    speed = rng.uniform(0.0, cfg.v_max)
    return RobotState(np.array(start, dtype=float), heading, float(speed))


def generate_environment(phase: int, seed: int, config: EnvConfig | None = None) -> Environment:
    """Random curriculum environment for training phase 1, 2 or 3."""
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {sorted(PHASES)}, got {phase!r}")
    cfg = config or EnvConfig()
    n_vortices, n_obstacles, min_dist = PHASES[phase]
    rng = np.random.default_rng(seed)
    lo, hi = cfg.placement_margin, cfg.map_size - cfg.placement_margin
    for _ in range(cfg.max_retries):
        start = rng.uniform(lo, hi, size=2)
        goal = rng.uniform(lo, hi, size=2)
        if np.hypot(*(goal - start)) >= min_dist:
            break
    else:
        raise GenerationError(f"no start/goal pair {min_dist} m apart after {cfg.max_retries} tries")
    vortices = _sample_vortices(rng, n_vortices, cfg)
    obstacles = _sample_obstacles(rng, n_obstacles, cfg, [start, goal])
    robot = _initial_robot(rng, start, cfg)
    return Environment(vortices, obstacles, start, goal, robot, config=cfg, rng_seed=seed, phase=phase)


def generate_test_environment(case: int, seed: int, config: EnvConfig | None = None) -> Environment:
    """Evaluation environment: fixed lower-left start, top-right goal, boundary on."""
    if case not in TEST_CASES:
        raise ValueError(f"test case must be one of {sorted(TEST_CASES)}, got {case!r}")
    cfg = replace(config or EnvConfig(), enforce_boundary=True)
    n_vortices, n_obstacles = TEST_CASES[case]
    rng = np.random.default_rng(seed)
    start, goal = np.array(TEST_START), np.array(TEST_GOAL)
    vortices = _sample_vortices(rng, n_vortices, cfg)
    obstacles = _sample_obstacles(rng, n_obstacles, cfg, [start, goal])
    robot = _initial_robot(rng, start, cfg)
    return Environment(vortices, obstacles, start, goal, robot, config=cfg, rng_seed=seed, test_case=case)


def generate_eval_environment(phase: int, seed: int, config: EnvConfig | None = None) -> Environment:
    """Training-time evaluation environment: phase counts with the fixed test start/goal."""
    cfg = config or EnvConfig()
    n_vortices, n_obstacles, _ = PHASES[phase]
    rng = np.random.default_rng(seed)
    start, goal = np.array(TEST_START), np.array(TEST_GOAL)
    vortices = _sample_vortices(rng, n_vortices, cfg)
    obstacles = _sample_obstacles(rng, n_obstacles, cfg, [start, goal])
    robot = _initial_robot(rng, start, cfg)
    return Environment(vortices, obstacles, start, goal, robot, config=cfg, rng_seed=seed, phase=phase)
