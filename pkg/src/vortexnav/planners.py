"""Reactive baselines: artificial potential field and a VisBug-style bug
algorithm. Both work purely in the robot frame from an Observation and emit
indices into ``env.ACTIONS``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import ACCELS, TURN_RATES, RobotState, action_index, wrap_angle
from .sensing import LIDAR_RANGE, Observation

STILL_SPEED = 1e-3


@dataclass(frozen=True)
class ApfParams:
    k_att: float = 50.0
    k_rep: float = 500.0
    n: float = 2.0
    m: float = 500.0
    d0: float = LIDAR_RANGE


@dataclass(frozen=True)
class BugParams:
    standoff: float = 5.0
    v_max: float = 2.0
    follow_fraction: float = 0.4
    tangent_points: int = 7
    d0: float = LIDAR_RANGE

    @property
    def follow_speed(self) -> float:
        return self.follow_fraction * self.v_max


def apf_potential(x, points, goal, params: ApfParams = ApfParams()) -> float:
    """U_att + U_rep at position ``x``; every point in ``points`` is an obstacle."""
    x = np.asarray(x, dtype=float)
    dg = float(np.hypot(*(x - goal)))
    u = 0.5 * params.k_att * dg**2
    for p in np.asarray(points, dtype=float).reshape(-1, 2):
        d = float(np.hypot(*(x - p)))
        if d <= params.d0:
            u += 0.5 * params.k_rep * (1.0 / d - 1.0 / params.d0) ** 2 * dg**params.n
    return u


def apf_force_at(x, points, goal, params: ApfParams = ApfParams()) -> np.ndarray:
    """Analytic -grad(U_att + U_rep) at ``x``."""
    x = np.asarray(x, dtype=float)
    goal = np.asarray(goal, dtype=float)
    to_goal = x - goal
    dg = float(np.hypot(*to_goal))
    force = -params.k_att * to_goal
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return force
    diff = x - pts
    d = np.hypot(diff[:, 0], diff[:, 1])
    near = d <= params.d0
    diff, d = diff[near], d[near]
    if len(d) == 0:
        return force
    inv = 1.0 / d - 1.0 / params.d0
    # d/dx of (1/d - 1/d0)^2 / 2 = -(1/d - 1/d0) / d^2 * (x - p) / d
    g_obs = (-(inv / d**3))[:, None] * diff * dg**params.n
    g_goal = 0.5 * (inv**2).sum() * params.n * dg ** (params.n - 2) * to_goal if dg > 0 else np.zeros(2)
    grad_rep = params.k_rep * (g_obs.sum(axis=0) + g_goal)
    return force - grad_rep


def apf_force(obs: Observation, params: ApfParams = ApfParams()) -> np.ndarray:
    """Total potential-field force on the robot, in the robot frame."""
    return apf_force_at(np.zeros(2), obs.reflections(), obs.goal, params)


def _velocity_direction(obs: Observation) -> float:
    v = obs.velocity
    if math.hypot(v[0], v[1]) < STILL_SPEED:
        return 0.0  # robot-frame heading
    return math.atan2(v[1], v[0])


def nearest_turn_rate(angle_diff: float, dt: float) -> float:
    """Turn rate whose one-step heading change is closest to ``angle_diff``."""
    return min(TURN_RATES, key=lambda w: abs(angle_diff - w * dt))


def nearest_accel(value: float) -> float:
    return min(ACCELS, key=lambda a: abs(value - a))


def apf_action(obs: Observation, dt: float, params: ApfParams = ApfParams()) -> int:
    force = apf_force(obs, params)
    v_dir = _velocity_direction(obs)
    diff = wrap_angle(math.atan2(force[1], force[0]) - v_dir)
    w = nearest_turn_rate(diff, dt)
    along = force[0] * math.cos(v_dir) + force[1] * math.sin(v_dir)
    a = nearest_accel(along / params.m)
    return action_index(a, w)


def _point_segment_blocked(points: np.ndarray, direction: np.ndarray, length: float, half_width: float) -> bool:
    s = points @ direction
    perp = np.abs(points[:, 0] * direction[1] - points[:, 1] * direction[0])
    return bool(np.any((s >= 0.0) & (s <= length) & (perp < half_width)))


def fit_tangent(points: np.ndarray) -> np.ndarray:
    """Unit principal direction of a point cloud (sign arbitrary)."""
    centered = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return vt[0]


class ApfPlanner:
    name = "apf"

    def __init__(self, params: ApfParams = ApfParams(), dt: float = 0.5):
        self.params = params
        self.dt = dt
        self.last_phi = float("nan")

    def reset(self, seed=None) -> None:
        pass

    def act(self, obs: Observation, robot: RobotState | None = None) -> int:
        return apf_action(obs, self.dt, self.params)


class BugPlanner:
    """Boundary following with a per-episode mode and direction latch."""

    name = "ba"
    GO = "go_to_goal"
    FOLLOW = "follow"

    def __init__(self, params: BugParams = BugParams(), dt: float = 0.5):
        self.params = params
        self.dt = dt
        self.last_phi = float("nan")
        self.reset()

    def reset(self, seed=None) -> None:
        self.mode = self.GO
        self.side: float | None = None  # +1 obstacle kept on the right, -1 on the left
        self.desired = np.array([1.0, 0.0])

    def _follow_direction(self, pts: np.ndarray, goal_dir: np.ndarray) -> np.ndarray:
        p = self.params
        d = np.hypot(pts[:, 0], pts[:, 1])
        nearest = np.argsort(d, kind="stable")[: p.tangent_points]
        tangent = fit_tangent(pts[nearest]) if len(nearest) >= 2 else np.array([-pts[nearest[0], 1], pts[nearest[0], 0]])
        closest = pts[nearest[0]]
        normal = closest / max(d[nearest[0]], 1e-9)  # towards the obstacle
        # side = sign of cross(tangent, normal): which hand the obstacle is on
        cross = tangent[0] * normal[1] - tangent[1] * normal[0]
        if self.side is None:
            if tangent @ goal_dir < 0.0:
                tangent, cross = -tangent, -cross
            self.side = 1.0 if cross < 0.0 else -1.0
        elif (cross < 0.0) != (self.side > 0.0):
            tangent = -tangent
        err = np.clip((d[nearest[0]] - p.standoff) / p.standoff, -1.0, 1.0)
        direction = tangent + err * normal
        return direction / np.hypot(*direction)

    def act(self, obs: Observation, robot: RobotState | None = None) -> int:
        p = self.params
        pts = obs.reflections()
        goal = np.asarray(obs.goal, dtype=float)
        dist = float(np.hypot(*goal))
        goal_dir = goal / dist if dist > 0 else np.array([1.0, 0.0])
        blocked = len(pts) > 0 and _point_segment_blocked(pts, goal_dir, min(dist, p.d0), p.standoff)
        if blocked:
            self.mode = self.FOLLOW
            self.desired = self._follow_direction(pts, goal_dir)
            target_speed = p.follow_speed
        else:
            self.mode = self.GO
            self.desired = goal_dir
            target_speed = p.v_max
        diff = wrap_angle(math.atan2(self.desired[1], self.desired[0]) - _velocity_direction(obs))
        w = nearest_turn_rate(diff, self.dt)
        speed = robot.speed if robot is not None else float(np.hypot(*obs.velocity))
        a = min(ACCELS, key=lambda acc: abs(min(max(speed + acc * self.dt, 0.0), p.v_max) - target_speed))
        return action_index(a, w)
