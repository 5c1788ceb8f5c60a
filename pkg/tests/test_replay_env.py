import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from attentive_dqn.replay_env import (
    ENVIRONMENTS,
    AvoidEnv,
    BanditEnv,
    CatchEnv,
    FrameSkip,
    FrameStacker,
    NotReadyError,
    PixelEpisode,
    ProtocolError,
    ReplayBuffer,
    Transition,
    export_transitions,
    load_transitions,
    make_env,
    preprocess,
    push,
    sample_minibatch,
    step_env,
)

from oracles import area_resize_loops


def tagged(tag, shape=(4, 2, 2)):
    """A transition whose reward and action identify it."""
    s = np.full(shape, tag % 256, dtype=np.uint8)
    return Transition(s, tag % 3, float(tag), s.copy(), tag % 2 == 0)


def small_buffer(capacity, n):
    buf = ReplayBuffer(capacity, state_shape=(4, 2, 2))
    for i in range(n):
        push(buf, tagged(i))
    return buf


# preprocessing ---------------------------------------------------------------

def test_preprocess_identity_on_84_gray():
    frame = np.random.default_rng(0).integers(0, 256, (84, 84), dtype=np.uint8)
    assert np.array_equal(preprocess(frame), frame)


def test_preprocess_white_rgb():
    out = preprocess(np.full((210, 160, 3), 255, dtype=np.uint8))
    assert out.shape == (84, 84) and out.dtype == np.uint8
    assert np.all(out == 255)


def test_preprocess_checkerboard_matches_pixel_loop():
    yy, xx = np.indices((168, 168))
    board = np.where((yy + xx) % 2 == 0, 255, 0).astype(np.uint8)
    assert np.array_equal(preprocess(board), area_resize_loops(board, 84))


def test_preprocess_odd_sized_random_matches_pixel_loop():
    img = np.random.default_rng(1).integers(0, 256, (97, 130), dtype=np.uint8)
    assert np.array_equal(preprocess(img), area_resize_loops(img, 84))


def test_preprocess_luminance_rounding():
    rgb = np.zeros((84, 84, 3), dtype=np.uint8)
    rgb[..., 0], rgb[..., 1], rgb[..., 2] = 10, 20, 30
    # 0.299*10 + 0.587*20 + 0.114*30 = 18.15
    assert np.all(preprocess(rgb) == 18)


def test_preprocess_empty_frame():
    with pytest.raises(ValueError):
        preprocess(np.zeros((0, 5), dtype=np.uint8))


# replay buffer ---------------------------------------------------------------

def test_ring_keeps_last_three_in_order():
    buf = small_buffer(3, 5)
    assert [t.reward for t in buf.contents()] == [2.0, 3.0, 4.0]


@given(st.integers(1, 20), st.integers(0, 60))
@settings(max_examples=50, deadline=None)
def test_size_and_contents_after_n_pushes(capacity, n):
    buf = small_buffer(capacity, n)
    assert len(buf) == min(n, capacity)
    assert [t.reward for t in buf.contents()] == [float(i) for i in range(max(0, n - capacity), n)]


def test_evicted_transitions_never_sampled():
    buf = small_buffer(50, 130)
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(200):
        seen.update(sample_minibatch(buf, 50, rng).rewards.tolist())
    assert seen == {float(i) for i in range(80, 130)}


def test_single_element_batch_of_four():
    buf = small_buffer(10, 1)
    b = sample_minibatch(buf, 4, np.random.default_rng(0), strict=False)
    assert b.rewards.tolist() == [0.0] * 4
    with pytest.raises(NotReadyError):
        sample_minibatch(buf, 4, np.random.default_rng(0))


def test_empty_buffer_not_ready():
    with pytest.raises(NotReadyError):
        sample_minibatch(small_buffer(4, 0), 1, np.random.default_rng(0), strict=False)


def test_uniform_sampling_chi_square():
    buf = small_buffer(100, 100)
    rng = np.random.default_rng(7)
    draws = np.concatenate([sample_minibatch(buf, 100, rng).indices for _ in range(1000)])
    counts = np.bincount(draws, minlength=100)
    assert counts.sum() == 100_000
    assert stats.chisquare(counts).pvalue > 1e-3


def test_sampling_is_seed_deterministic():
    buf = small_buffer(20, 20)
    a = sample_minibatch(buf, 16, np.random.default_rng(3)).indices
    b = sample_minibatch(buf, 16, np.random.default_rng(3)).indices
    assert np.array_equal(a, b)


def test_shared_frame_storage_reconstructs_next_state():
    ep = PixelEpisode(CatchEnv(0), FrameStacker())
    plain = ReplayBuffer(20)
    shared = ReplayBuffer(20, share_frames=True)
    state = ep.reset()
    for _ in range(12):
        nxt, r, done = ep.step(1)
        t = Transition(state, 1, r, nxt, done)
        plain.push(t)
        shared.push(t)
        state = ep.reset() if done else nxt
    for a, b in zip(plain.contents(), shared.contents()):
        assert np.array_equal(a.state, b.state) and np.array_equal(a.next_state, b.next_state)
    bad = np.zeros((4, 84, 84), np.uint8)
    with pytest.raises(ValueError):
        shared.push(Transition(bad, 0, 0.0, bad + 1, False))


def test_states_are_bytes():
    buf = ReplayBuffer(2)
    s = np.full((4, 84, 84), 200, dtype=np.uint8)
    buf.push(Transition(s, 0, 0.5, s, False))
    assert buf.states.dtype == np.uint8
    assert buf.contents()[0].state.max() == 200


def test_transition_log_roundtrip(tmp_path):
    buf = small_buffer(5, 8)
    path = tmp_path / "log.bin"
    assert export_transitions(buf, path) == 5
    loaded = load_transitions(path)
    for a, b in zip(buf.contents(), loaded):
        assert a.action == b.action and a.reward == b.reward and a.done == b.done
        assert np.array_equal(a.state, b.state) and np.array_equal(a.next_state, b.next_state)


# frame stacking --------------------------------------------------------------

def test_reset_fills_window():
    stacker = FrameStacker()
    env = CatchEnv(0)
    state = stacker.reset(preprocess(env.reset()))
    assert state.shape == (4, 84, 84)
    assert all(np.array_equal(state[0], state[i]) for i in range(4))


def test_after_two_steps_oldest_frames_are_reset_frame():
    env, stacker = CatchEnv(1), FrameStacker()
    first = stacker.reset(preprocess(env.reset()))[0]
    step_env(env, stacker, 1)
    state, _, _ = step_env(env, stacker, 1)
    assert np.array_equal(state[0], first) and np.array_equal(state[1], first)
    assert not np.array_equal(state[3], first)


# environments ----------------------------------------------------------------

def play_scripted_catch(seed):
    env = CatchEnv(seed)
    stacker = FrameStacker()
    stacker.reset(preprocess(env.reset()))
    total, done = 0.0, False
    while not done:
        _, r, done = step_env(env, stacker, env.scripted_action())
        total += r
    return total


def test_scripted_catch_policy_always_wins():
    assert all(play_scripted_catch(seed) == 1.0 for seed in range(100))


def test_catch_returns_are_bounded():
    for seed in range(20):
        env = CatchEnv(seed)
        env.reset()
        rng = np.random.default_rng(seed)
        total, done, steps = 0.0, False, 0
        while not done:
            _, r, done = env.step(int(rng.integers(3)))
            total += r
            steps += 1
        assert total in (-1.0, 1.0) and steps == 9


@pytest.mark.parametrize("name", sorted(ENVIRONMENTS))
def test_environments_are_deterministic(name):
    actions = np.random.default_rng(0).integers(0, make_env(name).action_count, 60)

    def rollout():
        env = make_env(name, seed=11)
        frames, rewards = [env.reset()], []
        for a in actions:
            f, r, d = env.step(int(a))
            frames.append(f)
            rewards.append(r)
            if d:
                frames.append(env.reset())
        return frames, rewards

    (fa, ra), (fb, rb) = rollout(), rollout()
    assert ra == rb
    assert all(np.array_equal(x, y) for x, y in zip(fa, fb))
    assert all(f.shape == (84, 84) and f.dtype == np.uint8 for f in fa)


def test_stepping_finished_episode_is_protocol_error():
    env = BanditEnv(0)
    with pytest.raises(ProtocolError):
        env.step(0)
    env.reset()
    for _ in range(5):
        env.step(1)
    with pytest.raises(ProtocolError):
        env.step(1)


def test_invalid_action_and_unknown_env():
    env = CatchEnv(0)
    env.reset()
    with pytest.raises(ValueError):
        env.step(3)
    with pytest.raises(ValueError):
        make_env("pong")


def test_avoid_episode_ends_within_limit():
    for seed in range(10):
        env = AvoidEnv(seed)
        env.reset()
        rng = np.random.default_rng(seed)
        done, steps, total = False, 0, 0.0
        while not done:
            _, r, done = env.step(int(rng.integers(5)))
            steps += 1
            total += r
        assert steps <= 200 and total in (-1.0, 0.0, 1.0)


def test_avoid_goal_is_reachable_on_empty_path():
    env = AvoidEnv(0)
    env.reset()
    env.hazards = []
    env.goal = [0, 0]
    total, done = 0.0, False
    while not done:
        _, r, done = env.step(1)
        total += r
    assert total == 1.0


def test_frame_skip_sums_rewards_and_stops_at_done():
    env = FrameSkip(BanditEnv(0), skip=4)
    env.reset()
    _, r, done = env.step(1)
    assert r == 4.0 and not done
    _, r, done = env.step(1)
    assert r == 1.0 and done


def test_reward_clipping_flag():
    env, stacker = FrameSkip(BanditEnv(0), skip=3), FrameStacker()
    stacker.reset(preprocess(env.reset()))
    _, r, _ = step_env(env, stacker, 1, clip_rewards=True)
    assert r == 1.0
