"""Figures: trajectories over the current-speed field and suite summaries.

SVG output is byte-reproducible: the file carries no date stamp and element
ids are hashed with a fixed salt.
"""

from __future__ import annotations


import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Circle, Rectangle  # noqa: E402

from .env import Environment, action_index  # noqa: E402

STYLE = {
    "svg.hashsalt": "vortexnav",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.linewidth": 0.8,
}
REPLAY_TOL = 1e-6
SAVE_KW = {"metadata": {"Date": None, "Creator": None}}


class RenderError(ValueError):
    pass


def _check_consistent(env: Environment, rows: list[dict[str, float]], dt: float | None) -> None:
    """Replay the recorded actions on a copy of the snapshot; positions must match."""
    if not rows:
        return
    times = [r["t"] for r in rows]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise RenderError("trajectory times are not increasing")
    step = rows[0]["t"] if dt is None else dt
    sim = Environment.from_snapshot(env.to_snapshot())
    for i, r in enumerate(rows):
        try:
            act = action_index(r["a"], r["w"])
        except (KeyError, ValueError) as exc:
            raise RenderError(f"row {i}: no valid action ({exc})") from exc
        sim.step(act, step)
        if np.hypot(r["x"] - sim.robot.position[0], r["y"] - sim.robot.position[1]) > REPLAY_TOL:
            raise RenderError(f"trajectory does not match the snapshot (diverges at row {i})")


def draw_environment(ax, env: Environment, grid: int = 101, arrows: int = 11) -> None:
    size = env.config.map_size
    xs = np.linspace(0.0, size, grid)
    flow = env.flow_grid(xs, xs)
    speed = np.hypot(flow[..., 0], flow[..., 1])
    ax.imshow(speed, origin="lower", extent=(0, size, 0, size), cmap="Blues", vmin=0.0,
              vmax=max(float(speed.max()), 1e-9), interpolation="bilinear")
    xa = np.linspace(0.0, size, arrows)
    fa = env.flow_grid(xa, xa)
    gx, gy = np.meshgrid(xa, xa)
    ax.quiver(gx, gy, fa[..., 0], fa[..., 1], color="0.25", width=0.003, scale=None)
    for c, r in zip(env.obstacle_centers, env.obstacle_radii):
        ax.add_patch(Circle(c, r, facecolor="0.35", edgecolor="k", linewidth=0.6))
    m = env.config.boundary_margin if env.config.enforce_boundary else 0.0
    ax.add_patch(Rectangle((-m, -m), size + 2 * m, size + 2 * m, fill=False, edgecolor="tab:red",
                           linestyle="-.", linewidth=0.8))
    ax.plot(*env.start, marker="o", color="tab:green", markersize=6, linestyle="none", label="start")
    ax.plot(*env.goal, marker="*", color="tab:orange", markersize=10, linestyle="none", label="goal")
    ax.add_patch(Circle(env.goal, env.config.goal_radius, fill=False, edgecolor="tab:orange", linewidth=0.6))
    pad = max(m, 2.0)
    ax.set_xlim(-pad, size + pad)
    ax.set_ylim(-pad, size + pad)
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")


def render_trajectory(env: Environment, rows: list[dict[str, float]], path, title: str | None = None,
                      dt: float | None = None) -> None:
    """Render the environment, current field and an episode trajectory to ``path``."""
    _check_consistent(env, rows, dt)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 5.0))
        draw_environment(ax, env)
        if rows:
            xy = np.array([env.initial_robot.position] + [[r["x"], r["y"]] for r in rows])
            ax.plot(xy[:, 0], xy[:, 1], color="tab:red", linewidth=1.2, label="trajectory")
            last = xy[-1]
            if env.out_of_bounds(last):
                ax.plot(*last, marker="X", color="tab:red", markersize=9, linestyle="none", label="out of bounds")
        if title:
            ax.set_title(title)
        ax.legend(loc="upper left", fontsize=7, framealpha=0.8)
        fig.tight_layout()
        fig.savefig(path, **SAVE_KW)
        plt.close(fig)


def plot_suite_outcomes(rows: list[list[str]], path) -> None:
    """Stacked outcome rates per planner from summary rows (SUMMARY_COLUMNS order)."""
    labels = [r[0] for r in rows]
    parts = [("success", 3, "tab:green"), ("out of bounds", 4, "tab:purple"),
             ("collision", 5, "tab:red"), ("timeout", 6, "0.6"), ("error", 7, "k")]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.9 * len(labels) + 1.5), 3.2))
        bottom = np.zeros(len(rows))
        for name, col, color in parts:
            vals = np.array([float(r[col]) for r in rows])
            ax.bar(labels, vals, bottom=bottom, color=color, label=name)
            bottom += vals
        ax.set_ylim(0, 1)
        ax.set_ylabel("fraction of episodes")
        ax.legend(fontsize=7, loc="lower right")
        fig.tight_layout()
        fig.savefig(path, **SAVE_KW)
        plt.close(fig)


def plot_learning_curve(rows: list[list[str]], path) -> None:
    """Mean reward and success rate against training step from eval-log rows."""
    steps = [int(r[0]) for r in rows]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        a1.plot(steps, [float(r[1]) for r in rows], color="tab:blue")
        a1.set_xlabel("training step")
        a1.set_ylabel("mean cumulative reward")
        a2.plot(steps, [float(r[2]) for r in rows], color="tab:green")
        a2.set_xlabel("training step")
        a2.set_ylabel("success rate")
        a2.set_ylim(0, 1)
        fig.tight_layout()
        fig.savefig(path, **SAVE_KW)
        plt.close(fig)
