import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vortexnav import agents
from vortexnav.agents import (
    Batch,
    IqnPlanner,
    ReplayBuffer,
    TrainConfig,
    Trainer,
    adaptive_phi,
    cvar_distort,
    dqn_loss,
    epsilon_at,
    huber,
    iqn_loss,
    load_planner,
    quantile_huber,
    select_action_exact,
    select_action_iqn,
    train,
)
from vortexnav.env import EnvConfig
from vortexnav.nn import MlpModel, save_checkpoint

TINY = {"velocity_hidden": 4, "goal_hidden": 4, "lidar_hidden": 6, "feature": 8, "hidden": 6}


class StubModel:
    """Two actions; A (index 0) returns a constant quantile, B a step function of tau."""

    kind = "iqn"

    def __init__(self, a=0.5, b_low=-1.0, b_high=2.2, split=0.5):
        self.a, self.b_low, self.b_high, self.split = a, b_low, b_high, split

    def forward(self, features, taus):
        taus = np.asarray(taus, dtype=float)
        za = np.full(taus.shape, self.a)
        zb = np.where(taus < self.split, self.b_low, self.b_high)
        return np.stack([za, zb], axis=-1)


def stub_features():
    return (np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 61)))


def constant_model(kind, value):
    """Model whose output is ``value`` for every input: all weights zero, out bias = value."""
    m = MlpModel.build(kind, 0, TINY, np.float64)
    for p in m.parameters():
        p[...] = 0.0
    m.layers["out"].bias[...] = value
    return m


def one_transition(done=False, reward=1.0, action=3):
    obs = np.zeros((1, 65))
    return Batch(obs, np.array([action]), np.array([reward]), obs.copy(), np.array([done]))


# -- CVaR distortion and action selection ---------------------------------------------

def test_cvar_identity_at_one():
    taus = np.linspace(0, 1, 11)
    np.testing.assert_array_equal(cvar_distort(taus, 1.0), taus)


def test_cvar_examples():
    assert cvar_distort(0.8, 0.5) == pytest.approx(0.4)
    assert cvar_distort(1.0, 0.25) == 0.25


@given(tau=st.floats(0, 1), phi=st.floats(1e-6, 1))
def test_cvar_never_exceeds_phi(tau, phi):
    assert 0.0 <= cvar_distort(tau, phi) <= phi


def test_stub_risk_neutral_picks_risky_action():
    # exact mean of B at phi = 1 is 0.5 * -1 + 0.5 * 2.2 = 0.6 > 0.5
    assert select_action_exact(StubModel(), stub_features(), 1.0) == 1
    assert select_action_iqn(StubModel(), stub_features(), 1.0, 100_000, np.random.default_rng(0)) == 1


def test_stub_cvar_picks_safe_action():
    assert select_action_iqn(StubModel(), stub_features(), 0.5, 32, np.random.default_rng(0)) == 0
    assert select_action_exact(StubModel(), stub_features(), 0.5) == 0


def test_ties_go_to_lowest_index():
    stub = StubModel(a=1.0, b_low=1.0, b_high=1.0)
    assert select_action_iqn(stub, stub_features(), 0.7, 8, np.random.default_rng(1)) == 0


@given(a=st.floats(-5, 5), b=st.floats(-5, 5), phi=st.floats(0.01, 1), k=st.integers(1, 64), seed=st.integers(0, 99))
def test_constant_quantiles_give_argmax(a, b, phi, k, seed):
    stub = StubModel(a=a, b_low=b, b_high=b)
    expected = 1 if b > a else 0
    assert select_action_iqn(stub, stub_features(), phi, k, np.random.default_rng(seed)) == expected


def test_cvar_threshold_switch():
    # exact distorted mean of B: 2.2 - 1.6 / phi for phi > 0.5, so it equals A's 0.5 at phi* = 16/17
    phi_star = 16.0 / 17.0
    for phi in np.linspace(0.05, 1.0, 96):
        if abs(phi - phi_star) < 2e-3:
            continue
        assert select_action_exact(StubModel(), stub_features(), phi, n_grid=20_000) == (1 if phi > phi_star else 0)


def test_select_action_rejects_k_zero():
    with pytest.raises(ValueError):
        select_action_iqn(StubModel(), stub_features(), 1.0, 0, np.random.default_rng(0))


# -- adaptive phi ---------------------------------------------------------------

def test_adaptive_phi_examples():
    assert adaptive_phi([[3.0, 4.0], [8.0, 0.0]]) == pytest.approx(0.5)
    assert adaptive_phi(np.zeros((0, 2))) == 1.0
    assert adaptive_phi([[10.0, 0.0]]) == pytest.approx(1.0)
    assert adaptive_phi([[12.0, 0.0]]) == 1.0


def test_adaptive_phi_relative_to_position():
    assert adaptive_phi([[13.0, 10.0]], position=(10.0, 6.0)) == pytest.approx(0.5)


# -- quantile Huber ----------------------------------------------------------------

def test_quantile_huber_examples():
    assert quantile_huber(0.0, 0.3) == 0.0
    assert quantile_huber(0.5, 0.5, 1.0) == pytest.approx(0.0625)
    assert quantile_huber(-0.5, 0.9, 1.0) == pytest.approx(0.0125)
    assert quantile_huber(3.0, 0.25, 1.0) == pytest.approx(0.25 * 2.5)


@given(u=st.floats(-10, 10).filter(lambda x: abs(x) > 1e-6), t1=st.floats(0, 1), t2=st.floats(0, 1))
def test_quantile_huber_asymmetry(u, t1, t2):
    lo, hi = sorted((t1, t2))
    if u > 0:
        assert quantile_huber(u, lo) <= quantile_huber(u, hi)
    else:
        assert quantile_huber(u, lo) >= quantile_huber(u, hi)


@given(u=st.floats(-10, 10), kappa=st.floats(0.1, 5))
def test_quantile_huber_degenerates_to_huber(u, kappa):
    assert 2 * kappa * quantile_huber(u, 0.5, kappa) == pytest.approx(float(huber(u, kappa)), rel=1e-12, abs=1e-15)


# -- losses -------------------------------------------------------------------------

def test_iqn_loss_terminal_matched_prediction_is_zero():
    model = constant_model("iqn", 1.0)
    loss, grads = iqn_loss(model, constant_model("iqn", 7.0), one_transition(done=True, reward=1.0), 4, 4,
                           0.99, 1.0, np.random.default_rng(0))
    assert loss == 0.0
    assert all(not g.any() for g in grads)


def test_iqn_loss_pinned_scalar():
    # delta = 1 + 0.99 * 2 - 1 = 1.98; rho_0.5 = 0.5 * (1.98 - 0.5) = 0.74
    model, target = constant_model("iqn", 1.0), constant_model("iqn", 2.0)
    loss, grads = iqn_loss(model, target, one_transition(), 1, 1, 0.99, 1.0, np.random.default_rng(0),
                           taus=[[0.5]], taus_next=[[0.5]])
    assert loss == pytest.approx(0.74, abs=1e-12)
    out_bias_grad = grads[-1]
    expected = np.zeros(9)
    expected[3] = -0.5  # d rho / d Z = -tau in the linear region
    np.testing.assert_allclose(out_bias_grad, expected, atol=1e-12)


def test_iqn_loss_averages_over_n_prime_and_batch():
    model, target = constant_model("iqn", 1.0), constant_model("iqn", 2.0)
    obs = np.zeros((2, 65))
    batch = Batch(obs, np.array([0, 5]), np.array([1.0, 1.0]), obs.copy(), np.array([False, False]))
    loss, _ = iqn_loss(model, target, batch, 3, 4, 0.99, 1.0, np.random.default_rng(0),
                       taus=np.full((2, 3), 0.5), taus_next=np.full((2, 4), 0.5))
    # each (i, j) pair contributes 0.74; sum over i (3) and mean over j and batch
    assert loss == pytest.approx(3 * 0.74)


@given(seed=st.integers(0, 2**31))
def test_iqn_loss_non_negative(seed):
    rng = np.random.default_rng(seed)
    model, target = MlpModel.build("iqn", seed % 97, TINY), MlpModel.build("iqn", seed % 89, TINY)
    obs = rng.normal(size=(4, 65))
    batch = Batch(obs, rng.integers(0, 9, 4), rng.normal(size=4) * 50, rng.normal(size=(4, 65)), rng.random(4) < 0.3)
    loss, _ = iqn_loss(model, target, batch, 8, 8, 0.99, 1.0, rng)
    assert loss >= 0.0 and math.isfinite(loss)


def test_dqn_loss_example():
    # (0.99 * 2 - 1)^2 = 0.9604 needs r = 0; with r = 1 the TD error is 1.98
    loss, grads = dqn_loss(constant_model("dqn", 1.0), constant_model("dqn", 2.0), one_transition(reward=0.0), 0.99)
    assert loss == pytest.approx(0.9604)
    assert grads[-1][3] == pytest.approx(-2 * 0.98)
    loss, _ = dqn_loss(constant_model("dqn", 1.0), constant_model("dqn", 2.0), one_transition(reward=1.0), 0.99)
    assert loss == pytest.approx(1.98**2)


def test_dqn_loss_perfect_and_terminal():
    loss, _ = dqn_loss(constant_model("dqn", 99.0), constant_model("dqn", 0.0), one_transition(reward=99.0), 0.99)
    assert loss == 0.0
    loss, _ = dqn_loss(constant_model("dqn", 1.0), constant_model("dqn", 50.0), one_transition(done=True), 0.99)
    assert loss == 0.0


def _perturbed(kind, seed):
    m = MlpModel.build(kind, seed, TINY, np.float64)
    rng = np.random.default_rng(seed + 1000)
    for p in m.parameters():
        p += rng.normal(scale=0.1, size=p.shape)
    return m


def _batch(seed, n=3):
    rng = np.random.default_rng(seed)
    return Batch(rng.normal(size=(n, 65)), rng.integers(0, 9, n), rng.normal(size=n), rng.normal(size=(n, 65)),
                 np.array([False, True, False][:n]))


def _loss_fd_error(loss_fn, model, h=1e-4, n_coords=60, seed=0):
    _, grads = loss_fn()
    rng = np.random.default_rng(seed)
    params = model.parameters()
    errs = []
    for _ in range(n_coords):
        i = int(rng.integers(len(params)))
        idx = tuple(int(rng.integers(s)) for s in params[i].shape)
        old = params[i][idx]
        params[i][idx] = old + h
        up = loss_fn()[0]
        params[i][idx] = old - h
        down = loss_fn()[0]
        params[i][idx] = old
        errs.append(((up - down) / (2 * h), grads[i][idx]))
    fd, an = np.array(errs).T
    return np.linalg.norm(fd - an) / (np.linalg.norm(fd) + np.linalg.norm(an))


def test_dqn_loss_gradient_finite_differences():
    for seed in range(5):
        model, target, batch = _perturbed("dqn", seed), _perturbed("dqn", seed + 50), _batch(seed)
        assert _loss_fd_error(lambda: dqn_loss(model, target, batch, 0.99), model, seed=seed) < 1e-4


def test_iqn_loss_gradient_finite_differences():
    for seed in range(5):
        model, target, batch = _perturbed("iqn", seed), _perturbed("iqn", seed + 50), _batch(seed)
        rng = np.random.default_rng(seed)
        taus, taus_next = rng.random((3, 4)), rng.random((3, 4))

        def fn():
            # the next-action choice depends on the online model, so hold its tau samples fixed as well
            return iqn_loss(model, target, batch, 4, 4, 0.99, 1.0, np.random.default_rng(7),
                            taus=taus, taus_next=taus_next)

        assert _loss_fd_error(fn, model, seed=seed) < 1e-4


# -- epsilon -------------------------------------------------------------------------

def test_epsilon_schedule():
    assert epsilon_at(0, 1000) == 1.0
    assert epsilon_at(100, 1000) == pytest.approx(0.05)
    assert epsilon_at(50, 1000) == pytest.approx(0.525)
    assert epsilon_at(900, 1000) == 0.05
    assert epsilon_at(0, 0) == 0.05


@given(total=st.integers(1, 10**7), a=st.floats(0, 1), b=st.floats(0, 1))
def test_epsilon_monotone(total, a, b):
    s1, s2 = sorted((int(a * total), int(b * total)))
    assert 0.05 <= epsilon_at(s2, total) <= epsilon_at(s1, total) <= 1.0


# -- replay --------------------------------------------------------------------------

def test_replay_fifo():
    buf = ReplayBuffer(5, obs_dim=1)
    for i in range(3):
        buf.add([i], 0, float(i), [i], False)
    assert len(buf) == 3
    for i in range(3, 8):
        buf.add([i], 0, float(i), [i], False)
    assert len(buf) == 5
    assert sorted(buf.rewards.tolist()) == [3.0, 4.0, 5.0, 6.0, 7.0]


@given(capacity=st.integers(1, 40), n=st.integers(0, 120))
def test_replay_size_and_eviction(capacity, n):
    buf = ReplayBuffer(capacity, obs_dim=1)
    for i in range(n):
        buf.add([i], i % 9, float(i), [i], False)
    assert len(buf) == min(n, capacity)
    kept = set(buf.rewards[: len(buf)].tolist())
    assert kept == {float(i) for i in range(max(0, n - capacity), n)}


def test_replay_sampling_is_uniform():
    buf = ReplayBuffer(4, obs_dim=1)
    for i in range(4):
        buf.add([i], i, float(i), [i], False)
    counts = np.bincount(buf.sample(40_000, np.random.default_rng(0)).actions, minlength=4)
    assert np.all(np.abs(counts / 40_000 - 0.25) < 0.01)


def test_replay_validates_transitions():
    buf = ReplayBuffer(2, obs_dim=1)
    with pytest.raises(ValueError):
        buf.add([0], 9, 0.0, [0], False)
    with pytest.raises(ValueError):
        buf.add([0], 0, float("nan"), [0], False)


# -- config ----------------------------------------------------------------------------

def test_train_config_defaults():
    c = TrainConfig()
    assert (c.total_steps, c.dt, c.batch_size, c.gamma, c.lr, c.buffer_size) == (3_000_000, 1.0, 32, 0.99, 1e-4, 1_000_000)
    assert (c.n_quantiles, c.n_target_quantiles, c.k_policy, c.phi_train, c.kappa) == (8, 8, 32, 1.0, 1.0)
    assert c.phase_steps == (1_000_000, 2_000_000) and c.eval_interval == 10_000
    assert [c.phase_at(s) for s in (0, 999_999, 1_000_000, 2_500_000)] == [1, 1, 2, 3]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(phase_steps=(2, 1))
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"batchsize": 3})


# -- training loop ------------------------------------------------------------------------

def small_config(**kw):
    base = dict(total_steps=240, learning_starts=40, train_freq=4, target_update=10, batch_size=8,
                eval_interval=120, eval_per_phase=1, checkpoint_interval=80, phase_steps=(100, 200),
                env=EnvConfig(max_steps=25))
    base.update(kw)
    return TrainConfig(**base)


def test_train_zero_steps(tmp_path):
    t = train("iqn", small_config(total_steps=0), 0, tmp_path)
    assert [p.name for p in t.checkpoints] == ["iqn_step00000000.json"]
    assert (tmp_path / "eval_log.csv").read_text().strip().count("\n") == 0


@pytest.mark.parametrize("kind", ["iqn", "dqn"])
def test_train_is_deterministic(tmp_path, kind):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a = train(kind, small_config(), 3, tmp_path / "a")
    b = train(kind, small_config(), 3, tmp_path / "b")
    assert (tmp_path / "a" / "eval_log.csv").read_bytes() == (tmp_path / "b" / "eval_log.csv").read_bytes()
    assert len(a.eval_rows) == 2
    for pa, pb in zip(a.checkpoints, b.checkpoints):
        assert pa.read_bytes() == pb.read_bytes()
    assert [p.name for p in a.checkpoints] == [f"{kind}_step{s:08d}.json" for s in (0, 80, 160, 240)]
    assert a.grad_steps == (240 - 40) // 4
    c = train(kind, small_config(), 4)
    assert c.eval_rows != a.eval_rows or not np.array_equal(c.model.parameters()[0], a.model.parameters()[0])


def test_training_policy_uses_phi_one(monkeypatch):
    seen = []
    original = agents.select_action_iqn

    def spy(model, features, phi, k, rng):
        seen.append(phi)
        return original(model, features, phi, k, rng)

    monkeypatch.setattr(agents, "select_action_iqn", spy)
    train("iqn", small_config(total_steps=120, eval_interval=1000, eps_fraction=0.01), 0)
    assert seen and set(seen) == {1.0}


def test_resume_matches_uninterrupted_run(tmp_path, monkeypatch):
    (tmp_path / "full").mkdir()
    (tmp_path / "split").mkdir()
    full = train("iqn", small_config(), 1, tmp_path / "full")

    class Interrupt(Exception):
        pass

    original = Trainer.save_state

    def save_then_stop(self):
        original(self)
        if self.step == 160:
            raise Interrupt

    monkeypatch.setattr(Trainer, "save_state", save_then_stop)
    with pytest.raises(Interrupt):
        train("iqn", small_config(), 1, tmp_path / "split")
    monkeypatch.setattr(Trainer, "save_state", original)
    resumed = train("iqn", small_config(), 1, tmp_path / "split", resume=True)
    assert resumed.step == full.step
    assert (tmp_path / "split" / "eval_log.csv").read_bytes() == (tmp_path / "full" / "eval_log.csv").read_bytes()
    last = "iqn_step00000240.json"
    assert (tmp_path / "split" / "checkpoints" / last).read_bytes() == (tmp_path / "full" / "checkpoints" / last).read_bytes()


def test_resume_rejects_other_config(tmp_path):
    train("dqn", small_config(total_steps=80), 0, tmp_path)
    with pytest.raises(ValueError):
        train("dqn", small_config(total_steps=80, gamma=0.9), 0, tmp_path, resume=True)


# -- planners ---------------------------------------------------------------------------

def test_load_planner_variants(tmp_path):
    path = tmp_path / "iqn.json"
    save_checkpoint(MlpModel.build("iqn", 0), path, seed=0, step=0)
    assert load_planner("iqn:0.25", path).name == "iqn:0.25"
    assert load_planner("iqn:adaptive", path).phi == "adaptive"
    assert load_planner("apf").name == "apf" and load_planner("ba").name == "ba"
    with pytest.raises(ValueError):
        load_planner("iqn:1.5", path)
    with pytest.raises(ValueError):
        load_planner("dqn", path)
    with pytest.raises(ValueError):
        load_planner("iqn:0.5")
    with pytest.raises(ValueError):
        load_planner("sac", path)


def test_iqn_planner_reports_phi():
    from vortexnav.env import generate_test_environment
    from vortexnav.sensing import observe

    env = generate_test_environment(1, 0)
    p = IqnPlanner(MlpModel.build("iqn", 0), "adaptive")
    p.act(observe(env))
    assert 0.0 < p.last_phi <= 1.0
    fixed = IqnPlanner(MlpModel.build("iqn", 0), 0.25)
    fixed.act(observe(env))
    assert fixed.last_phi == 0.25
