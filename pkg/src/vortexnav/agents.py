"""IQN and DQN agents: CVaR action selection, losses, replay, exploration
schedule and the curriculum training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .env import N_ACTIONS, EnvConfig, Outcome, generate_environment, generate_eval_environment
from .nn import Adam, MlpModel, load_checkpoint, save_checkpoint
from .sensing import LIDAR_RANGE, N_BEAMS, Observation, encode_flat, observe

log = logging.getLogger(__name__)

OBS_DIM = 4 + N_BEAMS


def split_features(flat: np.ndarray):
    """(B, 65) flat observations -> (velocity, goal, lidar) groups."""
    flat = np.atleast_2d(flat)
    return flat[:, 0:2], flat[:, 2:4], flat[:, 4:]


# -- risk measure and action selection ----------------------------------------

def cvar_distort(tau, phi: float):
    """CVaR distortion f(tau; phi) = phi * tau."""
    return phi * tau


def distorted_q(model, features, phi: float, taus) -> np.ndarray:
    """Mean over ``taus`` of Z_{phi*tau}(s, a), shape (B, A)."""
    taus = np.asarray(taus, dtype=float)
    B = features[0].shape[0]
    z = model.forward(features, np.broadcast_to(cvar_distort(taus, phi), (B, taus.shape[-1])))
    return z.mean(axis=1)


def select_action_iqn(model, features, phi: float, k: int, rng: np.random.Generator) -> int:
    """Risk-sensitive greedy action from K sampled quantile fractions.

    ``np.argmax`` returns the first maximum, so ties go to the lowest index.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    taus = rng.random(k)
    return int(np.argmax(distorted_q(model, features, phi, taus)[0]))


def select_action_exact(model, features, phi: float, n_grid: int = 4096) -> int:
    """Same policy with the tau expectation taken on a midpoint grid instead of samples."""
    taus = (np.arange(n_grid) + 0.5) / n_grid
    return int(np.argmax(distorted_q(model, features, phi, taus)[0]))


def adaptive_phi(reflections, position=(0.0, 0.0), d0: float = LIDAR_RANGE) -> float:
    """CVaR threshold proportional to the nearest detected obstacle point."""
    pts = np.asarray(reflections, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return 1.0
    d = float(np.min(np.hypot(*(pts - np.asarray(position, dtype=float)).T)))
    return d / d0 if d <= d0 else 1.0


# -- losses -------------------------------------------------------------------

def huber(u, kappa: float = 1.0):
    a = np.abs(u)
    return np.where(a <= kappa, 0.5 * u * u, kappa * (a - 0.5 * kappa))


def quantile_huber(u, tau, kappa: float = 1.0):
    """rho_tau^kappa(u) = |tau - 1{u<0}| * L_kappa(u) / kappa."""
    u = np.asarray(u, dtype=float)
    return np.abs(tau - (u < 0)) * huber(u, kappa) / kappa


def _quantile_huber_grad(u, tau, kappa: float):
    """d rho / d u."""
    dl = np.where(np.abs(u) <= kappa, u, kappa * np.sign(u))
    return np.abs(tau - (u < 0)) * dl / kappa


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray

    def __len__(self):
        return len(self.actions)


def iqn_loss(model: MlpModel, target: MlpModel, batch: Batch, n: int, n_prime: int, gamma: float,
             phi_target: float, rng: np.random.Generator, kappa: float = 1.0, k: int = 32,
             taus=None, taus_next=None):
    """Sampled quantile-regression TD loss and its parameter gradients.

    Returns (loss, grads). ``taus`` (B, N) and ``taus_next`` (B, N') may be
    pinned for testing; otherwise they are drawn from U[0, 1]. The next
    action comes from the distorted-expectation policy of the online model.
    """
    B = len(batch)
    s, s2 = split_features(batch.obs), split_features(batch.next_obs)
    taus = rng.random((B, n)) if taus is None else np.asarray(taus, dtype=float).reshape(B, n)
    taus_next = rng.random((B, n_prime)) if taus_next is None else np.asarray(taus_next, dtype=float).reshape(B, n_prime)

    q_next = distorted_q(model, s2, phi_target, rng.random(k))
    a_next = np.argmax(q_next, axis=1)
    z_next = target.forward(s2, taus_next)[np.arange(B), :, a_next]  # (B, N')
    not_done = 1.0 - batch.dones.astype(float)
    target_z = batch.rewards[:, None] + gamma * not_done[:, None] * z_next.astype(float)

    z, cache = model.forward_cached(s, taus)
    z_sa = z[np.arange(B), :, batch.actions].astype(float)  # (B, N)
    delta = target_z[:, None, :] - z_sa[:, :, None]  # (B, N, N')
    tau_b = taus[:, :, None]
    loss = quantile_huber(delta, tau_b, kappa).sum(axis=(1, 2)).mean() / n_prime

    d_zsa = -_quantile_huber_grad(delta, tau_b, kappa).sum(axis=2) / (n_prime * B)
    dout = np.zeros_like(z)
    dout[np.arange(B), :, batch.actions] = d_zsa
    return float(loss), model.backward(cache, dout)


def dqn_loss(model: MlpModel, target: MlpModel, batch: Batch, gamma: float):
    """Mean squared TD error against the target network and its gradients."""
    B = len(batch)
    q_next = target.forward(split_features(batch.next_obs)).astype(float).max(axis=1)
    y = batch.rewards + gamma * (1.0 - batch.dones.astype(float)) * q_next
    q, cache = model.forward_cached(split_features(batch.obs))
    td = y - q[np.arange(B), batch.actions].astype(float)
    dout = np.zeros_like(q)
    dout[np.arange(B), batch.actions] = -2.0 * td / B
    return float(np.mean(td**2)), model.backward(cache, dout)


def epsilon_at(step: int, total_steps: int, start: float = 1.0, end: float = 0.05, fraction: float = 0.1) -> float:
    horizon = fraction * total_steps
    if horizon <= 0 or step >= horizon:
        return end
    return start + (end - start) * step / horizon


# -- replay -------------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity FIFO ring buffer with uniform sampling."""

    def __init__(self, capacity: int, obs_dim: int = OBS_DIM):
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, obs_dim), dtype=np.float32)
        self.next_obs = np.zeros((self.capacity, obs_dim), dtype=np.float32)
        self.actions = np.zeros(self.capacity, dtype=np.int64)
        self.rewards = np.zeros(self.capacity, dtype=np.float64)
        self.dones = np.zeros(self.capacity, dtype=bool)
        self.pos = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, reward, next_obs, done) -> None:
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"action index {action} out of range")
        if not math.isfinite(reward):
            raise ValueError("non-finite reward")
        i = self.pos
        self.obs[i], self.actions[i], self.rewards[i] = obs, action, reward
        self.next_obs[i], self.dones[i] = next_obs, done
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx])

    def state_arrays(self) -> dict[str, np.ndarray]:
        n = self.size
        return {
            "buf_obs": self.obs[:n], "buf_next_obs": self.next_obs[:n], "buf_actions": self.actions[:n],
            "buf_rewards": self.rewards[:n], "buf_dones": self.dones[:n],
            "buf_pos": np.array(self.pos), "buf_size": np.array(n),
        }

    def load_state_arrays(self, data) -> None:
        n = int(data["buf_size"])
        self.obs[:n], self.next_obs[:n] = data["buf_obs"], data["buf_next_obs"]
        self.actions[:n], self.rewards[:n], self.dones[:n] = data["buf_actions"], data["buf_rewards"], data["buf_dones"]
        self.pos, self.size = int(data["buf_pos"]), n


# -- planners wrapping trained models -----------------------------------------

class IqnPlanner:
    """Greedy IQN policy with a fixed or adaptive CVaR threshold."""

    def __init__(self, model: MlpModel, phi: float | str = 1.0, k: int = 32):
        if model.kind != "iqn":
            raise ValueError(f"IQN planner needs an iqn checkpoint, got {model.kind!r}")
        self.model, self.phi, self.k = model, phi, k
        self.name = "iqn:adaptive" if phi == "adaptive" else f"iqn:{float(phi):g}"
        self.last_phi = float("nan")
        self.rng = np.random.default_rng(0)

    def reset(self, seed=None) -> None:
        self.rng = np.random.default_rng(seed)

    def act(self, obs: Observation, robot=None) -> int:
        phi = adaptive_phi(obs.reflections(), d0=obs.max_range) if self.phi == "adaptive" else float(self.phi)
        self.last_phi = phi
        return select_action_iqn(self.model, split_features(encode_flat(obs)), phi, self.k, self.rng)


class DqnPlanner:
    name = "dqn"

    def __init__(self, model: MlpModel):
        if model.kind != "dqn":
            raise ValueError(f"DQN planner needs a dqn checkpoint, got {model.kind!r}")
        self.model = model
        self.last_phi = float("nan")

    def reset(self, seed=None) -> None:
        pass

    def act(self, obs: Observation, robot=None) -> int:
        return int(np.argmax(self.model.forward(split_features(encode_flat(obs)))[0]))


# -- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    total_steps: int = 3_000_000
    dt: float = 1.0
    batch_size: int = 32
    gamma: float = 0.99
    lr: float = 1e-4
    buffer_size: int = 1_000_000
    n_quantiles: int = 8
    n_target_quantiles: int = 8
    k_policy: int = 32
    phi_train: float = 1.0
    kappa: float = 1.0
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.1
    phase_steps: tuple[int, int] = (1_000_000, 2_000_000)
    learning_starts: int = 5_000
    train_freq: int = 4
    target_update: int = 1_000
    eval_interval: int = 10_000
    eval_per_phase: int = 10
    eval_seed: int = 2023
    checkpoint_interval: int = 100_000
    env: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = EnvConfig.from_dict(self.env)
        self.phase_steps = tuple(self.phase_steps)
        for name in ("dt", "batch_size", "lr", "buffer_size", "n_quantiles", "n_target_quantiles",
                     "k_policy", "phi_train", "kappa", "train_freq", "target_update", "eval_interval",
                     "checkpoint_interval"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.total_steps < 0 or self.learning_starts < 0:
            raise ValueError("total_steps and learning_starts must be non-negative")
        if len(self.phase_steps) != 2 or not 0 < self.phase_steps[0] <= self.phase_steps[1]:
            raise ValueError("phase_steps must be two increasing step counts")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phase_steps"] = list(self.phase_steps)
        d["env"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["env"].items()}
        return d

    def phase_at(self, step: int) -> int:
        return 1 + sum(step >= b for b in self.phase_steps)


EVAL_LOG_COLUMNS = [
    "step", "mean_reward", "success_rate",
    "phase1_reward", "phase1_success", "phase2_reward", "phase2_success", "phase3_reward", "phase3_success",
]


def eval_environment_seeds(config: TrainConfig) -> list[tuple[int, int]]:
    """The fixed (phase, seed) list evaluated during training."""
    ss = np.random.SeedSequence(config.eval_seed)
    seeds = ss.generate_state(3 * config.eval_per_phase, np.uint64)
    return [(1 + i // config.eval_per_phase, int(s)) for i, s in enumerate(seeds)]


def greedy_rollout(model: MlpModel, env, config: TrainConfig, rng) -> tuple[float, bool]:
    total = 0.0
    outcome = env.classify(env.robot.position, env.step_count)
    while outcome is Outcome.RUNNING:
        feats = split_features(encode_flat(observe(env)))
        if model.kind == "iqn":
            act = select_action_iqn(model, feats, config.phi_train, config.k_policy, rng)
        else:
            act = int(np.argmax(model.forward(feats)[0]))
        r, outcome = env.step(act, config.dt)
        total += r
    return total, outcome is Outcome.GOAL


def evaluate_training(model: MlpModel, config: TrainConfig, step: int) -> list[str]:
    rewards = {1: [], 2: [], 3: []}
    wins = {1: [], 2: [], 3: []}
    for i, (phase, seed) in enumerate(eval_environment_seeds(config)):
        env = generate_eval_environment(phase, seed, config.env)
        r, ok = greedy_rollout(model, env, config, np.random.default_rng([config.eval_seed, i]))
        rewards[phase].append(r)
        wins[phase].append(ok)
    all_r = sum(rewards.values(), [])
    all_w = sum(wins.values(), [])
    row = [str(step), repr(float(np.mean(all_r))), repr(float(np.mean(all_w)))]
    for p in (1, 2, 3):
        row += [repr(float(np.mean(rewards[p]))), repr(float(np.mean(wins[p])))]
    return row


class Trainer:
    """Episodic epsilon-greedy training with replay and a hard-synced target network.

    All randomness derives from ``seed``: model init, environment sequence,
    exploration and minibatch sampling use separate child streams.
    """

    STATE_FILE = "train_state.npz"

    def __init__(self, kind: str, config: TrainConfig, seed: int, out_dir=None):
        if kind not in ("iqn", "dqn"):
            raise ValueError(f"agent must be 'iqn' or 'dqn', got {kind!r}")
        self.kind, self.config, self.seed = kind, config, int(seed)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        ss = np.random.SeedSequence(self.seed)
        init_ss, env_ss, act_ss, learn_ss = ss.spawn(4)
        self.model = MlpModel.build(kind, seed=int(init_ss.generate_state(1)[0]))
        self.target = self.model.copy()
        self.optim = Adam(self.model.parameters(), lr=config.lr)
        self.env_rng = np.random.default_rng(env_ss)
        self.act_rng = np.random.default_rng(act_ss)
        self.learn_rng = np.random.default_rng(learn_ss)
        self.buffer = ReplayBuffer(max(1, min(config.buffer_size, config.total_steps)))
        self.step = 0
        self.grad_steps = 0
        self.episodes = 0
        self.env = None
        self.eval_rows: list[list[str]] = []
        self.checkpoints: list[Path] = []
        self.last_loss = float("nan")

    # -- io --
    def _ckpt_dir(self) -> Path:
        d = self.out_dir / "checkpoints"
        d.mkdir(exist_ok=True)
        return d

    def save_checkpoint(self) -> Path | None:
        if self.out_dir is None:
            return None
        path = self._ckpt_dir() / f"{self.kind}_step{self.step:08d}.json"
        save_checkpoint(self.model, path, seed=self.seed, step=self.step, layer_sizes=self.model.sizes)
        self.checkpoints.append(path)
        return path

    def write_eval_log(self) -> None:
        if self.out_dir is None:
            return
        with open(self.out_dir / "eval_log.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EVAL_LOG_COLUMNS)
            w.writerows(self.eval_rows)

    def save_state(self) -> None:
        """Everything needed to resume bit-identically."""
        if self.out_dir is None:
            return
        arrays = {**self.buffer.state_arrays(), **self.optim.state_arrays()}
        for i, p in enumerate(self.target.parameters()):
            arrays[f"target{i}"] = p
        for i, p in enumerate(self.model.parameters()):
            arrays[f"model{i}"] = p
        meta = {
            "kind": self.kind, "seed": self.seed, "step": self.step, "grad_steps": self.grad_steps,
            "episodes": self.episodes, "config": self.config.to_dict(),
            "rngs": [g.bit_generator.state for g in (self.env_rng, self.act_rng, self.learn_rng)],
            "env": None if self.env is None else {
                "snapshot": self.env.to_snapshot(),
                "robot": [list(map(float, self.env.robot.position)), self.env.robot.heading, self.env.robot.speed],
                "step_count": self.env.step_count,
            },
            "eval_rows": self.eval_rows, "checkpoints": [str(p) for p in self.checkpoints],
        }
        arrays["meta"] = np.array(json.dumps(_jsonable(meta)))
        tmp = self.out_dir / (self.STATE_FILE + ".tmp.npz")
        np.savez(tmp, **arrays)
        tmp.replace(self.out_dir / self.STATE_FILE)

    def load_state(self) -> bool:
        from .env import Environment, RobotState

        path = self.out_dir / self.STATE_FILE if self.out_dir is not None else None
        if path is None or not path.exists():
            return False
        with np.load(path) as data:
            meta = json.loads(str(data["meta"]))
            if meta["kind"] != self.kind or meta["seed"] != self.seed:
                raise ValueError(f"{path} belongs to a different run ({meta['kind']}, seed {meta['seed']})")
            if meta["config"] != self.config.to_dict():
                raise ValueError(f"{path} was written with a different configuration")
            self.buffer.load_state_arrays(data)
            self.optim.load_state_arrays(data)
            for i, p in enumerate(self.target.parameters()):
                p[...] = data[f"target{i}"]
            for i, p in enumerate(self.model.parameters()):
                p[...] = data[f"model{i}"]
        for g, st in zip((self.env_rng, self.act_rng, self.learn_rng), meta["rngs"]):
            g.bit_generator.state = st
        self.step, self.grad_steps, self.episodes = meta["step"], meta["grad_steps"], meta["episodes"]
        self.eval_rows = meta["eval_rows"]
        self.checkpoints = [Path(p) for p in meta["checkpoints"]]
        if meta["env"] is not None:
            env = Environment.from_snapshot(meta["env"]["snapshot"])
            pos, heading, speed = meta["env"]["robot"]
            env.robot = RobotState(np.array(pos), heading, speed)
            env.step_count = meta["env"]["step_count"]
            self.env = env
        return True

    # -- loop --
    def _new_episode(self):
        phase = self.config.phase_at(self.step)
        seed = int(self.env_rng.integers(2**63))
        self.env = generate_environment(phase, seed, self.config.env)
        self.episodes += 1

    def _act(self, flat_obs: np.ndarray) -> int:
        cfg = self.config
        eps = epsilon_at(self.step, cfg.total_steps, cfg.eps_start, cfg.eps_end, cfg.eps_fraction)
        if self.act_rng.random() < eps:
            return int(self.act_rng.integers(N_ACTIONS))
        feats = split_features(flat_obs)
        if self.kind == "iqn":
            return select_action_iqn(self.model, feats, cfg.phi_train, cfg.k_policy, self.act_rng)
        return int(np.argmax(self.model.forward(feats)[0]))

    def _learn(self) -> None:
        cfg = self.config
        batch = self.buffer.sample(cfg.batch_size, self.learn_rng)
        if self.kind == "iqn":
            loss, grads = iqn_loss(self.model, self.target, batch, cfg.n_quantiles, cfg.n_target_quantiles,
                                   cfg.gamma, cfg.phi_train, self.learn_rng, cfg.kappa, cfg.k_policy)
        else:
            loss, grads = dqn_loss(self.model, self.target, batch, cfg.gamma)
        self.optim.step(grads)
        self.grad_steps += 1
        self.last_loss = loss
        if self.grad_steps % cfg.target_update == 0:
            self.target.load_state_from(self.model)

    def run(self, resume: bool = False) -> "Trainer":
        cfg = self.config
        if not (resume and self.load_state()):
            self.save_checkpoint()
        while self.step < cfg.total_steps:
            if self.env is None:
                self._new_episode()
            obs = encode_flat(observe(self.env))
            act = self._act(obs)
            r, outcome = self.env.step(act, cfg.dt)
            next_obs = encode_flat(observe(self.env))
            terminal = outcome in (Outcome.GOAL, Outcome.COLLISION)
            self.buffer.add(obs, act, r, next_obs, terminal)
            self.step += 1
            if outcome is not Outcome.RUNNING:
                self.env = None
            if self.step > cfg.learning_starts and self.step % cfg.train_freq == 0:
                self._learn()
            if self.step % cfg.eval_interval == 0:
                self.eval_rows.append(evaluate_training(self.model, cfg, self.step))
                self.write_eval_log()
                log.info("step %d  episodes %d  loss %.4f  eval reward %s  success %s", self.step,
                         self.episodes, self.last_loss, self.eval_rows[-1][1], self.eval_rows[-1][2])
            if self.step % cfg.checkpoint_interval == 0 or self.step == cfg.total_steps:
                self.save_checkpoint()
                self.save_state()
        self.write_eval_log()
        return self


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def train(kind: str, config: TrainConfig, seed: int, out_dir=None, resume: bool = False) -> Trainer:
    """Train an agent; writes checkpoints and ``eval_log.csv`` when ``out_dir`` is given."""
    return Trainer(kind, config, seed, out_dir).run(resume=resume)


def load_planner(spec: str, checkpoint=None, k: int = 32):
    """Build a planner from a name like ``apf``, ``ba``, ``dqn``, ``iqn:0.25`` or ``iqn:adaptive``."""
    from .planners import ApfPlanner, BugPlanner

    name, _, arg = spec.partition(":")
    if name == "apf":
        return ApfPlanner()
    if name == "ba":
        return BugPlanner()
    if checkpoint is None:
        raise ValueError(f"planner {spec!r} needs a checkpoint")
    model, _ = load_checkpoint(checkpoint)
    if name == "dqn":
        return DqnPlanner(model)
    if name == "iqn":
        phi: float | str = "adaptive" if arg == "adaptive" else float(arg or 1.0)
        if phi != "adaptive" and not 0.0 < phi <= 1.0:
            raise ValueError(f"CVaR threshold must be in (0, 1], got {phi}")
        return IqnPlanner(model, phi, k)
    raise ValueError(f"unknown planner {spec!r}")
