"""Episode rollouts, suite evaluation and the success/time/energy metrics."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .env import ACTIONS, EnvConfig, Environment, Outcome, generate_test_environment
from .sensing import Observation, observe

EVAL_DT = 0.5
STEP_COLUMNS = ["t", "x", "y", "theta", "speed", "a", "w", "reward", "phi"]
EPISODE_COLUMNS = ["episode", "seed", "outcome", "steps", "time", "energy", "total_reward"]
SUMMARY_COLUMNS = [
    "planner", "case", "n_episodes", "success_rate", "out_of_bounds_rate", "collision_rate",
    "timeout_rate", "error_rate", "average_time", "average_energy",
]
RUNTIME_COLUMNS = ["planner", "mean_ms", "max_ms", "n_actions"]


class Planner(Protocol):
    name: str
    last_phi: float

    def reset(self, seed=None) -> None: ...

    def act(self, obs: Observation, robot=None) -> int: ...


@dataclass
class EpisodeRecord:
    dt: float
    times: list[float] = field(default_factory=list)
    positions: list[tuple[float, float]] = field(default_factory=list)
    headings: list[float] = field(default_factory=list)
    speeds: list[float] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    phis: list[float] = field(default_factory=list)
    plan_seconds: list[float] = field(default_factory=list)
    outcome: str = Outcome.RUNNING.value
    error: str | None = None
    seed: int | None = None

    @property
    def steps(self) -> int:
        return len(self.actions)

    @property
    def time(self) -> float:
        return self.steps * self.dt

    @property
    def success(self) -> bool:
        return self.outcome == Outcome.GOAL.value

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(STEP_COLUMNS)
            for i, act in enumerate(self.actions):
                a = ACTIONS[act]
                writer.writerow([
                    _fmt(self.times[i]), _fmt(self.positions[i][0]), _fmt(self.positions[i][1]),
                    _fmt(self.headings[i]), _fmt(self.speeds[i]), _fmt(a.accel), _fmt(a.turn_rate),
                    _fmt(self.rewards[i]), _fmt(self.phis[i]),
                ])


def _fmt(x: float) -> str:
    return repr(float(x))


def read_episode_csv(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def run_episode(planner: Planner, env: Environment, dt: float = EVAL_DT) -> EpisodeRecord:
    """Roll ``planner`` out in ``env`` until termination; mutates ``env``."""
    rec = EpisodeRecord(dt=dt, seed=env.rng_seed)
    outcome = env.classify(env.robot.position, env.step_count)
    while outcome is Outcome.RUNNING:
        obs = observe(env)
        t0 = time.perf_counter()
        try:
            act = int(planner.act(obs, env.robot))
        except Exception as exc:  # noqa: BLE001 - recorded as a failed episode
            rec.error = f"{type(exc).__name__}: {exc}"
            rec.outcome = "error"
            return rec
        rec.plan_seconds.append(time.perf_counter() - t0)
        r, outcome = env.step(act, dt)
        rec.times.append(env.step_count * dt)
        rec.positions.append((float(env.robot.position[0]), float(env.robot.position[1])))
        rec.headings.append(env.robot.heading)
        rec.speeds.append(env.robot.speed)
        rec.actions.append(act)
        rec.rewards.append(r)
        rec.phis.append(float(getattr(planner, "last_phi", float("nan"))))
    rec.outcome = outcome.value
    return rec


def energy(record: EpisodeRecord) -> float:
    """Sum of action magnitudes, each component normalized by its maximum."""
    return float(sum(abs(ACTIONS[i].accel) / 0.4 + abs(ACTIONS[i].turn_rate) / 0.52 for i in record.actions))


@dataclass
class SuiteMetrics:
    n_episodes: int
    success_rate: float
    out_of_bounds_rate: float
    collision_rate: float
    timeout_rate: float
    error_rate: float
    average_time: float
    average_energy: float
    mean_runtime_ms: float
    max_runtime_ms: float
    n_actions: int

    @classmethod
    def from_records(cls, records: list[EpisodeRecord]) -> "SuiteMetrics":
        n = len(records)
        if n == 0:
            raise ValueError("no episodes to aggregate")
        counts = {k: 0 for k in ("goal", "out_of_bounds", "collision", "timeout", "error")}
        for r in records:
            counts[r.outcome] += 1
        wins = [r for r in records if r.success]
        runtimes = [s for r in records for s in r.plan_seconds]
        return cls(
            n_episodes=n,
            success_rate=counts["goal"] / n,
            out_of_bounds_rate=counts["out_of_bounds"] / n,
            collision_rate=counts["collision"] / n,
            timeout_rate=counts["timeout"] / n,
            error_rate=counts["error"] / n,
            average_time=float(np.mean([r.time for r in wins])) if wins else math.nan,
            average_energy=float(np.mean([energy(r) for r in wins])) if wins else math.nan,
            mean_runtime_ms=1e3 * float(np.mean(runtimes)) if runtimes else math.nan,
            max_runtime_ms=1e3 * float(np.max(runtimes)) if runtimes else math.nan,
            n_actions=len(runtimes),
        )


@dataclass
class SuiteResult:
    planner: str
    case: int
    master_seed: int
    metrics: SuiteMetrics
    records: list[EpisodeRecord]
    environments: list[Environment]

    def summary_row(self) -> list[str]:
        m = self.metrics
        return [
            self.planner, str(self.case), str(m.n_episodes), _fmt(m.success_rate), _fmt(m.out_of_bounds_rate),
            _fmt(m.collision_rate), _fmt(m.timeout_rate), _fmt(m.error_rate), _fmt(m.average_time),
            _fmt(m.average_energy),
        ]

    def runtime_row(self) -> list[str]:
        m = self.metrics
        return [self.planner, f"{m.mean_runtime_ms:.4f}", f"{m.max_runtime_ms:.4f}", str(m.n_actions)]

    def write(self, out_dir, episodes: bool = True) -> None:
        """Write summary.csv, episodes.csv (deterministic) and runtime.csv (wall clock)."""
        out = Path(out_dir)
        write_rows(out / "summary.csv", SUMMARY_COLUMNS, [self.summary_row()])
        write_rows(out / "runtime.csv", RUNTIME_COLUMNS, [self.runtime_row()])
        rows = [
            [str(i), str(r.seed), r.outcome, str(r.steps), _fmt(r.time), _fmt(energy(r)), _fmt(r.total_reward)]
            for i, r in enumerate(self.records)
        ]
        write_rows(out / "episodes.csv", EPISODE_COLUMNS, rows)
        if episodes:
            ep_dir = out / "episodes"
            ep_dir.mkdir(exist_ok=True)
            for i, (rec, env) in enumerate(zip(self.records, self.environments)):
                rec.write_csv(ep_dir / f"episode_{i:04d}.csv")
                env.save(ep_dir / f"env_{i:04d}.json")


def write_rows(path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def episode_seed(master_seed: int, index: int) -> int:
    """Per-episode seed derived from the master seed and the episode index."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, np.uint64)[0])


def evaluate_suite(
    planner: Planner,
    case: int,
    n_envs: int,
    master_seed: int,
    dt: float = EVAL_DT,
    config: EnvConfig | None = None,
    progress: Callable[[int, EpisodeRecord], None] | None = None,
) -> SuiteResult:
    """Run ``planner`` on ``n_envs`` seeded test-case environments."""
    if n_envs < 1:
        raise ValueError("n_envs must be >= 1")
    records, envs = [], []
    for i in range(n_envs):
        seed = episode_seed(master_seed, i)
        env = generate_test_environment(case, seed, config)
        envs.append(generate_test_environment(case, seed, config))
        planner.reset(seed)
        rec = run_episode(planner, env, dt)
        records.append(rec)
        if progress is not None:
            progress(i, rec)
    return SuiteResult(
        planner=planner.name,
        case=case,
        master_seed=master_seed,
        metrics=SuiteMetrics.from_records(records),
        records=records,
        environments=envs,
    )
