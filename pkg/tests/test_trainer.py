import dataclasses
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from attentive_dqn import tensor_compute as tc
from attentive_dqn.qnetworks import make_qnet, zero_parameters
from attentive_dqn.replay_env import Batch, ReplayBuffer, Transition
from attentive_dqn.trainer import (
    EpsilonSchedule,
    MetricsLog,
    Row,
    Trainer,
    TrainerConfig,
    aggregate_seeds,
    epsilon_at,
    preset,
    run,
    select_action,
    smooth,
    td_targets,
    train_step,
)

from oracles import last_value_interpolate, trailing_mean_loops


class FixedQ:
    """Stand-in network that returns the same Q row for every state."""

    def __init__(self, row):
        self.row = torch.tensor(row, dtype=torch.float32)
        self.n_actions = len(row)

    def __call__(self, x, rng=None, training=False):
        return self.row.expand(x.shape[0], -1)


def tiny_config(**overrides):
    base = dict(buffer_size=2_000, learning_starts=100, exploration_steps=500, total_steps=400,
                target_update_freq=100, batch_size=8, checkpoint_every=0, seeds=(0,))
    base.update(overrides)
    return TrainerConfig(**base)


# presets and validation ------------------------------------------------------

def test_paper_preset_matches_hyperparameter_table():
    cfg = preset("paper")
    assert cfg.buffer_size == 1_000_000 and cfg.gamma == 0.99
    assert cfg.target_update_freq == 30_000
    assert cfg.batch_for("baseline") == 32 and cfg.batch_for("attentive") == 256
    assert cfg.lr == 1e-4 and cfg.adam_eps == 0.00015
    assert (cfg.eps_start, cfg.eps_end, cfg.exploration_steps) == (1.0, 0.01, 5_000_000)
    assert cfg.learning_starts == 200_000 and cfg.train_freq == 4
    assert (cfg.eval_every, cfg.eval_episodes, cfg.dropout_rate) == (10, 2, 0.1)
    assert len(cfg.seeds) == 3 and cfg.smoothing_window == 10


def test_desk_preset_overlay():
    cfg = preset("desk")
    assert (cfg.buffer_size, cfg.learning_starts, cfg.exploration_steps, cfg.total_steps,
            cfg.target_update_freq) == (50_000, 1_000, 20_000, 150_000, 1_000)
    assert cfg.lr == 1e-4 and cfg.train_freq == 4
    preset("desk").buffer_size = 7
    assert preset("desk").buffer_size == 50_000


@pytest.mark.parametrize("field,value", [
    ("eps_end", 1.5), ("lr", 0.0), ("train_freq", 0), ("learning_starts", 10_000),
    ("gamma", 1.5), ("batch_size", 0), ("buffer_size", -1), ("seeds", ()),
    ("positional_combine", "stack"), ("n_heads", 7),
])
def test_invalid_configs_raise(field, value):
    cfg = dataclasses.replace(tiny_config(), **{field: value})
    with pytest.raises(tc.ConfigError):
        cfg.validate()
    with pytest.raises(tc.ConfigError):
        Trainer(cfg, "bandit", "baseline")


def test_unknown_preset():
    with pytest.raises(tc.ConfigError):
        preset("atari")


# exploration -----------------------------------------------------------------

def test_epsilon_endpoints_and_midpoint():
    sched = EpsilonSchedule(1.0, 0.01, 5_000_000)
    assert epsilon_at(sched, 0) == 1.0
    assert epsilon_at(sched, 5_000_000) == 0.01
    assert epsilon_at(sched, 9_000_000) == 0.01
    assert math.isclose(epsilon_at(sched, 2_500_000), 0.505, rel_tol=0, abs_tol=1e-12)


@given(st.integers(0, 6_000_000), st.integers(0, 6_000_000))
@settings(max_examples=100)
def test_epsilon_non_increasing(a, b):
    sched = EpsilonSchedule()
    lo, hi = sorted((a, b))
    assert 0.01 <= epsilon_at(sched, hi) <= epsilon_at(sched, lo) <= 1.0


def test_full_exploration_is_uniform():
    rng = tc.RngState(0)
    net = FixedQ([0.0, 5.0, 0.0, 0.0])
    state = np.zeros((4, 84, 84), np.uint8)
    counts = np.bincount([select_action(net, state, 1.0, rng) for _ in range(100_000)], minlength=4)
    assert np.all(np.abs(counts / 100_000 - 0.25) < 0.01)


def test_greedy_selection_and_tie_break():
    rng = tc.RngState(0)
    state = np.zeros((4, 84, 84), np.uint8)
    assert select_action(FixedQ([0.1, 0.9, 0.3]), state, 0.0, rng) == 1
    assert select_action(FixedQ([0.5, 0.5]), state, 0.0, rng) == 0


def test_select_action_on_real_network_matches_argmax():
    net = make_qnet("baseline", 3, seed=0)
    state = np.random.default_rng(0).integers(0, 256, (4, 84, 84), dtype=np.uint8)
    with torch.no_grad():
        expected = int(net(torch.from_numpy(state)[None])[0].argmax())
    assert select_action(net, state, 0.0, tc.RngState(1)) == expected


# targets and updates ---------------------------------------------------------

def make_batch(rewards, dones):
    n = len(rewards)
    s = np.zeros((n, 4, 84, 84), np.uint8)
    return Batch(s, np.zeros(n, np.int64), np.array(rewards, np.float32), s,
                 np.array(dones, bool), np.arange(n))


def test_td_target_hand_backup():
    y = td_targets(make_batch([1.0], [False]), FixedQ([0.0, 2.0]), 0.99)
    assert abs(float(y[0]) - 2.98) < 1e-6


def test_td_target_terminal_and_myopic():
    batch = make_batch([0.5, -1.0, 2.0], [True, True, False])
    y = td_targets(batch, FixedQ([3.0, 7.0]), 0.99)
    assert float(y[0]) == 0.5 and float(y[1]) == -1.0
    assert torch.equal(td_targets(batch, FixedQ([3.0, 7.0]), 0.0), torch.tensor([0.5, -1.0, 2.0]))


def test_td_targets_do_not_track_gradients():
    net = make_qnet("baseline", 2)
    y = td_targets(make_batch([0.0, 1.0], [False, False]), net, 0.99)
    assert not y.requires_grad


def filled_buffer(n, seed=0, reward=None):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(n)
    for _ in range(n):
        s = rng.integers(0, 256, (4, 84, 84), dtype=np.uint8)
        r = float(rng.integers(-1, 2)) if reward is None else reward
        buf.push(Transition(s, int(rng.integers(3)), r, s, bool(rng.integers(2))))
    return buf


def test_train_step_is_deterministic():
    def losses():
        online, target = make_qnet("baseline", 3, seed=0), make_qnet("baseline", 3, seed=0)
        opt = tc.Adam(list(online.parameters()), lr=1e-4, eps=1.5e-4)
        buf, rng = filled_buffer(20), tc.RngState(5)
        return [train_step(online, target, buf, opt, 8, 0.99, rng) for _ in range(5)]

    assert losses() == losses()


def test_zero_network_fixed_point_has_zero_loss():
    online, target = make_qnet("baseline", 3), make_qnet("baseline", 3)
    zero_parameters(online)
    zero_parameters(target)
    opt = tc.Adam(list(online.parameters()), lr=1e-4, eps=1.5e-4)
    buf = filled_buffer(16, reward=0.0)
    for _ in range(3):
        assert train_step(online, target, buf, opt, 8, 0.99, tc.RngState(0)) == 0.0


def test_underfull_buffer_skips_update():
    online, target = make_qnet("baseline", 3), make_qnet("baseline", 3)
    before = [p.detach().clone() for p in online.parameters()]
    opt = tc.Adam(list(online.parameters()), lr=1e-4)
    assert train_step(online, target, filled_buffer(4), opt, 8, 0.99, tc.RngState(0)) is None
    assert all(torch.equal(a, b) for a, b in zip(before, online.parameters()))
    assert opt.t == 0


def test_single_transition_regression_converges():
    online, target = make_qnet("baseline", 3, seed=2), make_qnet("baseline", 3, seed=3)
    s = np.random.default_rng(0).integers(0, 256, (4, 84, 84), dtype=np.uint8)
    buf = ReplayBuffer(1)
    buf.push(Transition(s, 2, 1.0, s, True))  # terminal, so y = 1 exactly
    opt = tc.Adam(list(online.parameters()), lr=1e-4, eps=1.5e-4)
    rng = tc.RngState(0)
    x = torch.from_numpy(s)[None]
    for step in range(2000):
        train_step(online, target, buf, opt, 1, 0.99, rng)
        with torch.no_grad():
            if abs(float(online(x)[0, 2]) - 1.0) < 1e-2:
                break
    with torch.no_grad():
        assert abs(float(online(x)[0, 2]) - 1.0) < 1e-2
    assert step < 2000


# full loop ---------------------------------------------------------------------

def test_zero_steps_gives_empty_log():
    log = run(tiny_config(total_steps=0), "catch", "baseline")
    assert log.rows == []


def test_bandit_greedy_eval_reaches_episode_length():
    cfg = tiny_config(total_steps=1_500, learning_starts=100, exploration_steps=400,
                      target_update_freq=50, lr=1e-3, gamma=0.5)
    log = run(cfg, "bandit", "baseline", seed=0)
    evals = [r.ret for r in log.phase("eval")]
    assert evals[-1] == 5.0
    assert all(r.length == 5 for r in log.phase("train"))


def test_training_protocol_is_audited():
    cfg = tiny_config(total_steps=600, learning_starts=120, target_update_freq=50, train_freq=4)
    trainer = Trainer(cfg, "catch", "baseline", seed=1)
    log = trainer.run()
    updates = [s for kind, s in trainer.events if kind == "update"]
    syncs = [s for kind, s in trainer.events if kind == "sync"]
    assert updates and min(updates) >= 120
    assert all(s % 4 == 0 for s in updates)
    assert len(updates) == len(range(120, 601, 4))
    assert syncs == list(range(50, 601, 50))
    # No updates and no buffer writes happen inside an evaluation window.
    inside = False
    for kind, _ in trainer.events:
        if kind == "eval_start":
            inside = True
        elif kind == "eval_end":
            inside = False
        else:
            assert not (inside and kind == "update")
    n_train = len(log.phase("train"))
    assert len(log.phase("eval")) == n_train // 10
    assert trainer.counters["eval_episodes"] == 2 * (n_train // 10)
    assert trainer.buffer.pushes == 600
    steps = [r.step for r in log.rows]
    assert steps == sorted(steps)


def test_target_changes_only_at_sync_steps():
    cfg = tiny_config(total_steps=300, learning_starts=20, target_update_freq=64)
    trainer = Trainer(cfg, "catch", "baseline", seed=0)
    probe = torch.from_numpy(np.random.default_rng(0).integers(0, 256, (1, 4, 84, 84), dtype=np.uint8))
    snapshots = []
    env_step = trainer.episode.step

    def watched_step(action):
        # Called at the start of each environment step, so trainer.step
        # counts the steps already completed.
        with torch.no_grad():
            snapshots.append((trainer.step, trainer.target(probe).clone()))
        return env_step(action)

    trainer.episode.step = watched_step
    trainer.run()
    changed = [s for (_, a), (s, b) in zip(snapshots, snapshots[1:]) if not torch.equal(a, b)]
    assert changed == [64, 128, 192, 256]


def test_eval_leaves_online_and_buffer_untouched():
    cfg = tiny_config(total_steps=200)
    trainer = Trainer(cfg, "catch", "baseline", seed=0)
    trainer.run()
    params = [p.detach().clone() for p in trainer.online.parameters()]
    pushes = trainer.buffer.pushes
    trainer.evaluate()
    assert trainer.buffer.pushes == pushes
    assert all(torch.equal(a, b) for a, b in zip(params, trainer.online.parameters()))


def test_full_run_determinism():
    cfg = tiny_config(total_steps=300)
    a, b = run(cfg, "catch", "baseline", seed=4), run(cfg, "catch", "baseline", seed=4)
    assert a.rows == b.rows
    c = run(cfg, "catch", "baseline", seed=5)
    assert a.rows != c.rows


def test_attentive_trainer_runs(tmp_path):
    cfg = tiny_config(total_steps=120, learning_starts=100, batch_size=4, checkpoint_every=60)
    trainer = Trainer(cfg, "catch", "attentive", seed=0, out_dir=tmp_path)
    trainer.run()
    assert trainer.counters["updates"] == len(range(100, 121, 4))
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert names == ["final.ckpt", "step_000000060.ckpt", "step_000000120.ckpt"]
    named, meta = tc.load_checkpoint(tmp_path / "checkpoints" / "final.ckpt")
    assert meta["step"] == 120 and set(named) == {n for n, _ in trainer.online.named_parameters()}


# metrics ----------------------------------------------------------------------

def test_smooth_examples():
    assert smooth([3.0] * 7).tolist() == [3.0] * 7
    assert smooth([0, 10], 10).tolist() == [0.0, 5.0]
    with pytest.raises(ValueError):
        smooth([1.0], 0)


@pytest.mark.parametrize("window", [1, 3, 10, 50])
def test_smooth_matches_loop_oracle(window):
    x = np.random.default_rng(window).normal(size=200) * 100
    np.testing.assert_allclose(smooth(x, window), trailing_mean_loops(list(x), window), atol=1e-9)


def log_from(steps, returns, phase="eval"):
    log = MetricsLog()
    for i, (s, r) in enumerate(zip(steps, returns)):
        log.append(Row(s, i, phase, r, 0.0))
    return log


def test_single_seed_summary():
    summary = aggregate_seeds([log_from([10, 20, 30], [1.0, -1.0, 1.0])])
    ph = summary.phases["eval"]
    assert np.array_equal(ph.mean, ph.min) and np.array_equal(ph.mean, ph.max)


def test_constant_seeds_summary():
    logs = [log_from([5, 10, 15], [v] * 3) for v in (1.0, 2.0, 3.0)]
    ph = aggregate_seeds(logs).phases["eval"]
    assert np.all(ph.mean == 2.0) and np.all(ph.min == 1.0) and np.all(ph.max == 3.0)


def test_unequal_logs_align_with_reference_interpolator():
    rng = np.random.default_rng(0)
    logs, raw = [], []
    for n in (7, 12, 9):
        steps = np.sort(rng.choice(np.arange(1, 400), n, replace=False))
        vals = rng.normal(size=n)
        logs.append(log_from(steps.tolist(), vals.tolist()))
        raw.append((steps, trailing_mean_loops(list(vals), 10)))
    ph = aggregate_seeds(logs).phases["eval"]
    start = max(s[0] for s, _ in raw)
    assert ph.steps[0] == start
    for i, (steps, vals) in enumerate(raw):
        np.testing.assert_allclose(ph.per_seed[i], last_value_interpolate(steps, vals, ph.steps), atol=1e-12)
    assert np.all(ph.min <= ph.mean + 1e-12) and np.all(ph.mean <= ph.max + 1e-12)


def test_aggregate_requires_logs():
    with pytest.raises(ValueError):
        aggregate_seeds([])


def test_metrics_must_be_step_ordered():
    log = log_from([5, 10], [0.0, 1.0])
    with pytest.raises(ValueError):
        log.append(Row(3, 2, "train", 0.0, 0.5))


def test_csv_roundtrip(tmp_path):
    log = MetricsLog(meta={"model": "baseline", "batch_size": 32})
    log.append(Row(9, 0, "train", -1.0, 0.99, None, 9))
    log.append(Row(18, 1, "train", 1.0, 0.98, 0.123456789, 9))
    log.append(Row(18, 2, "eval", 0.5, 0.0))
    path = tmp_path / "m.csv"
    log.write_csv(path)
    text = path.read_text().splitlines()
    assert text[0] == "# batch_size=32" and text[1] == "# model=baseline"
    assert text[2] == "step,episode,phase,return,smoothed_return,epsilon,loss_mean"
    back = MetricsLog.read_csv(path)
    assert back.meta == {"batch_size": "32", "model": "baseline"}
    assert [(r.step, r.phase, r.ret, r.epsilon, r.loss_mean) for r in back.rows] == [
        (r.step, r.phase, r.ret, r.epsilon, r.loss_mean) for r in log.rows]
