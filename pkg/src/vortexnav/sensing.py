"""Partial observations: DVL velocity, goal offset and LiDAR ranges, all in
the robot frame."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import Environment

LIDAR_RANGE = 10.0
N_BEAMS = 61
FOV_HALF = 2.0 * math.pi / 3.0
MIN_RANGE = 1e-3

BEAM_ANGLES = np.linspace(-FOV_HALF, FOV_HALF, N_BEAMS)


@dataclass
class Observation:
    velocity: np.ndarray
    goal: np.ndarray
    lidar: np.ndarray
    angles: np.ndarray = BEAM_ANGLES
    max_range: float = LIDAR_RANGE

    def reflections(self) -> np.ndarray:
        """Robot-frame reflection points of beams that hit something, shape (k, 2)."""
        hit = self.lidar < self.max_range
        r, a = self.lidar[hit], self.angles[hit]
        return np.column_stack([r * np.cos(a), r * np.sin(a)])


def rotate(vec, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    v = np.asarray(vec, dtype=float)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def raycast(env: Environment, origin, angles, max_range: float = LIDAR_RANGE) -> np.ndarray:
    """Distance along each world-frame ray direction to the nearest obstacle circle.

    Rays are half-lines; misses and hits beyond ``max_range`` read ``max_range``.
    """
    angles = np.asarray(angles, dtype=float)
    ranges = np.full(angles.shape, float(max_range))
    if not env.obstacles:
        return ranges
    d = np.column_stack([np.cos(angles), np.sin(angles)])  # (B, 2)
    f = np.asarray(origin, dtype=float) - env.obstacle_centers  # (M, 2)
    b = d @ f.T  # (B, M)
    c = (f**2).sum(axis=1) - env.obstacle_radii**2  # (M,)
    disc = b**2 - c
    hit = disc >= 0.0
    root = np.sqrt(np.where(hit, disc, 0.0))
    t_near = -b - root
    t_far = -b + root
    # origin inside a disc: the surface is at distance zero
    t = np.where(c < 0.0, 0.0, t_near)
    valid = hit & (t_far >= 0.0)
    t = np.where(valid, t, np.inf).min(axis=1)
    return np.clip(t, MIN_RANGE, max_range)


def observe(env: Environment, angles: np.ndarray = BEAM_ANGLES, max_range: float = LIDAR_RANGE) -> Observation:
    robot = env.robot
    th = robot.heading
    world_vel = env.flow(robot.position) + robot.steering_velocity
    lidar = raycast(env, robot.position, th + angles, max_range)
    return Observation(
        velocity=rotate(world_vel, -th),
        goal=rotate(env.goal - robot.position, -th),
        lidar=lidar,
        angles=angles,
        max_range=max_range,
    )


def encode(obs: Observation) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-source feature groups fed to the separate encoders."""
    return (
        np.asarray(obs.velocity, dtype=np.float32),
        np.asarray(obs.goal, dtype=np.float32),
        np.asarray(obs.lidar / obs.max_range, dtype=np.float32),
    )


def encode_flat(obs: Observation) -> np.ndarray:
    return np.concatenate(encode(obs))
