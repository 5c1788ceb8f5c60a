"""Experience replay, frame preprocessing and the toy pixel environments."""

from __future__ import annotations

import abc
import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

FRAME_SIZE = 84
STACK = 4


class NotReadyError(RuntimeError):
    """The replay buffer holds too few transitions to sample."""


class ProtocolError(RuntimeError):
    """An environment was stepped after its episode terminated."""


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``n_out×n_in`` matrix of exact box-filter overlaps."""
    scale = n_in / n_out
    w = np.zeros((n_out, n_in))
    for o in range(n_out):
        lo, hi = o * scale, (o + 1) * scale
        for i in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            w[o, i] = min(hi, i + 1) - max(lo, i)
    return w / scale


def to_grayscale(raw: np.ndarray) -> np.ndarray:
    """Luminance ``0.299R + 0.587G + 0.114B``, rounded half up, as float64."""
    raw = np.asarray(raw)
    if raw.ndim == 2:
        return raw.astype(np.float64)
    if raw.ndim == 3 and raw.shape[2] in (3, 4):
        rgb = raw[..., :3].astype(np.float64)
        return np.floor(rgb @ np.array([0.299, 0.587, 0.114]) + 0.5)
    raise ValueError(f"expected H×W or H×W×3 frame, got shape {raw.shape}")


def preprocess(raw: np.ndarray, size: int = FRAME_SIZE) -> np.ndarray:
    """Grayscale then area-resample to ``size×size`` bytes.

    Each output pixel is the overlap-weighted mean of the source pixels its
    footprint covers, rounded half up. A frame already ``size×size``
    grayscale passes through unchanged.
    """
    raw = np.asarray(raw)
    if raw.size == 0 or raw.ndim < 2 or raw.shape[0] < 1 or raw.shape[1] < 1:
        raise ValueError(f"cannot preprocess an empty frame of shape {raw.shape}")
    gray = to_grayscale(raw)
    h, w = gray.shape
    if (h, w) != (size, size):
        gray = _area_weights(h, size) @ gray @ _area_weights(w, size).T
        gray = np.floor(gray + 0.5 + 1e-9)
    return np.clip(gray, 0, 255).astype(np.uint8)


class FrameStacker:
    """Window of the last four frames, oldest first."""

    def __init__(self, depth: int = STACK):
        self.depth = depth
        self.frames: deque[np.ndarray] = deque(maxlen=depth)

    def reset(self, frame: np.ndarray) -> np.ndarray:
        self.frames.clear()
        for _ in range(self.depth):
            self.frames.append(frame)
        return self.state()

    def push(self, frame: np.ndarray) -> np.ndarray:
        if not self.frames:
            return self.reset(frame)
        self.frames.append(frame)
        return self.state()

    def state(self) -> np.ndarray:
        return np.stack(self.frames)


# ---------------------------------------------------------------------------
# Replay buffer
# ---------------------------------------------------------------------------

class Transition(NamedTuple):
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    indices: np.ndarray


class ReplayBuffer:
    """Ring buffer of transitions with byte-valued state storage.

    With ``share_frames=True`` only the newest frame of ``next_state`` is
    stored, which requires ``next_state[:-1] == state[1:]`` (true for every
    transition produced by a :class:`FrameStacker`).
    """

    def __init__(self, capacity: int, state_shape=(STACK, FRAME_SIZE, FRAME_SIZE),
                 share_frames: bool = False):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.state_shape = tuple(state_shape)
        self.share_frames = share_frames
        # np.zeros leaves pages uncommitted until written.
        self.states = np.zeros((capacity,) + self.state_shape, dtype=np.uint8)
        next_shape = self.state_shape[1:] if share_frames else self.state_shape
        self.next_frames = np.zeros((capacity,) + next_shape, dtype=np.uint8)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.dones = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.cursor = 0
        self.pushes = 0

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> None:
        state = np.asarray(t.state, dtype=np.uint8)
        next_state = np.asarray(t.next_state, dtype=np.uint8)
        if state.shape != self.state_shape or next_state.shape != self.state_shape:
            raise ValueError(f"transition states must have shape {self.state_shape}")
        i = self.cursor
        self.states[i] = state
        if self.share_frames:
            if not np.array_equal(next_state[:-1], state[1:]):
                raise ValueError("share_frames buffer needs next_state[:-1] == state[1:]")
            self.next_frames[i] = next_state[-1]
        else:
            self.next_frames[i] = next_state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.dones[i] = t.done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.pushes += 1

    def gather(self, idx: np.ndarray) -> Batch:
        states = self.states[idx]
        if self.share_frames:
            next_states = np.concatenate([states[:, 1:], self.next_frames[idx][:, None]], axis=1)
        else:
            next_states = self.next_frames[idx]
        return Batch(states, self.actions[idx], self.rewards[idx], next_states,
                     self.dones[idx], idx)

    def contents(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        start = self.cursor if self.size == self.capacity else 0
        order = (start + np.arange(self.size)) % self.capacity
        b = self.gather(order)
        return [Transition(b.states[j], int(b.actions[j]), float(b.rewards[j]),
                           b.next_states[j], bool(b.dones[j])) for j in range(self.size)]


def push(buffer: ReplayBuffer, transition: Transition) -> None:
    buffer.push(transition)


def sample_minibatch(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator,
                     strict: bool = True) -> Batch:
    """Uniform sampling with replacement.

    ``strict`` requires at least ``batch_size`` stored transitions; otherwise
    any non-empty buffer can be sampled.
    """
    if buffer.size == 0 or (strict and buffer.size < batch_size):
        raise NotReadyError(f"buffer holds {buffer.size} transitions, need {batch_size}")
    idx = rng.integers(0, buffer.size, size=batch_size)
    return buffer.gather(idx)


# Transition log: magic, uint32 version, uint32 count, uint32 x3 state shape,
# then per record: int32 action, float32 reward, uint8 done, state bytes,
# next_state bytes.
TRANSITION_MAGIC = b"ADQNTRNS"


def export_transitions(buffer: ReplayBuffer, path: str | Path) -> int:
    records = buffer.contents()
    with open(path, "wb") as fh:
        fh.write(TRANSITION_MAGIC)
        fh.write(struct.pack("<II3I", 1, len(records), *buffer.state_shape))
        for t in records:
            fh.write(struct.pack("<ifB", t.action, t.reward, int(t.done)))
            fh.write(np.ascontiguousarray(t.state, dtype=np.uint8).tobytes())
            fh.write(np.ascontiguousarray(t.next_state, dtype=np.uint8).tobytes())
    return len(records)


def load_transitions(path: str | Path) -> list[Transition]:
    data = Path(path).read_bytes()
    if data[:8] != TRANSITION_MAGIC:
        raise ValueError(f"{path}: not a transition log")
    _, count, *shape = struct.unpack("<II3I", data[8:28])
    n = int(np.prod(shape))
    pos, out = 28, []
    for _ in range(count):
        action, reward, done = struct.unpack("<ifB", data[pos:pos + 9])
        pos += 9
        s = np.frombuffer(data, np.uint8, n, pos).reshape(shape)
        ns = np.frombuffer(data, np.uint8, n, pos + n).reshape(shape)
        pos += 2 * n
        out.append(Transition(s.copy(), action, reward, ns.copy(), bool(done)))
    return out


# ---------------------------------------------------------------------------
# Environments
# ---------------------------------------------------------------------------

class Env(abc.ABC):
    """Minimal episodic pixel environment.

    ``reset`` returns a raw frame; ``step`` returns ``(frame, reward, done)``.
    Given a seed and an action sequence, the outputs are fully determined.
    """

    action_count: int

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.terminated = True

    @abc.abstractmethod
    def reset(self) -> np.ndarray: ...

    @abc.abstractmethod
    def _step(self, action: int) -> tuple[np.ndarray, float, bool]: ...

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.terminated:
            raise ProtocolError(f"{type(self).__name__}.step called on a finished episode; reset first")
        if not 0 <= action < self.action_count:
            raise ValueError(f"action {action} outside [0, {self.action_count})")
        frame, reward, done = self._step(int(action))
        self.terminated = done
        return frame, reward, done


def render_grid(grid: np.ndarray, size: int = FRAME_SIZE) -> np.ndarray:
    """Nearest-neighbour upscale of a logical grid to ``size×size`` bytes."""
    rows = np.arange(size) * grid.shape[0] // size
    cols = np.arange(size) * grid.shape[1] // size
    return grid[np.ix_(rows, cols)].astype(np.uint8)


class CatchEnv(Env):
    """A pellet falls down a 10×10 grid; a one-cell paddle on the bottom row catches it.

    Actions: 0 left, 1 stay, 2 right. The episode ends when the pellet reaches
    the bottom row (9 steps) with reward +1 on a catch and -1 on a miss.
    """

    action_count = 3
    rows = cols = 10
    BALL, PADDLE = 255, 128

    def reset(self) -> np.ndarray:
        self.ball_row = 0
        self.ball_col = int(self.rng.integers(self.cols))
        self.paddle = self.cols // 2
        self.terminated = False
        return self.render()

    def _step(self, action):
        self.paddle = int(np.clip(self.paddle + action - 1, 0, self.cols - 1))
        self.ball_row += 1
        done = self.ball_row == self.rows - 1
        reward = 0.0
        if done:
            reward = 1.0 if self.paddle == self.ball_col else -1.0
        return self.render(), reward, done

    def render(self) -> np.ndarray:
        grid = np.zeros((self.rows, self.cols), dtype=np.uint8)
        grid[self.ball_row, self.ball_col] = self.BALL
        grid[self.rows - 1, self.paddle] = self.PADDLE
        return render_grid(grid)

    def scripted_action(self) -> int:
        return int(np.sign(self.ball_col - self.paddle)) + 1


class AvoidEnv(Env):
    """Reach a goal cell while dodging hazards that sweep across their rows.

    Actions: 0 stay, 1 up, 2 down, 3 left, 4 right. Reward +1 on the goal,
    -1 on collision (both terminal); the episode is cut at 200 steps.
    """

    action_count = 5
    rows = cols = 10
    n_hazards = 3
    step_limit = 200
    MOVES = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))

    def reset(self) -> np.ndarray:
        self.agent = [self.rows - 1, 0]
        self.goal = [0, int(self.rng.integers(self.cols))]
        hazard_rows = self.rng.choice(np.arange(2, self.rows - 1), self.n_hazards, replace=False)
        self.hazards = [[int(r), int(self.rng.integers(self.cols)), int(self.rng.choice((-1, 1)))]
                        for r in sorted(hazard_rows)]
        self.t = 0
        self.terminated = False
        return self.render()

    def _step(self, action):
        dr, dc = self.MOVES[action]
        self.agent = [int(np.clip(self.agent[0] + dr, 0, self.rows - 1)),
                      int(np.clip(self.agent[1] + dc, 0, self.cols - 1))]
        for h in self.hazards:
            if not 0 <= h[1] + h[2] < self.cols:
                h[2] = -h[2]
            h[1] += h[2]
        self.t += 1
        if any(self.agent == h[:2] for h in self.hazards):
            return self.render(), -1.0, True
        if self.agent == self.goal:
            return self.render(), 1.0, True
        return self.render(), 0.0, self.t >= self.step_limit

    def render(self) -> np.ndarray:
        grid = np.zeros((self.rows, self.cols), dtype=np.uint8)
        grid[tuple(self.goal)] = 170
        for r, c, _ in self.hazards:
            grid[r, c] = 85
        grid[tuple(self.agent)] = 255
        return render_grid(grid)


class BanditEnv(Env):
    """Constant frames; reward equals the action (0 or 1); fixed episode length."""

    action_count = 2
    episode_length = 5

    def reset(self):
        self.t = 0
        self.terminated = False
        return np.full((FRAME_SIZE, FRAME_SIZE), 64, dtype=np.uint8)

    def _step(self, action):
        self.t += 1
        return np.full((FRAME_SIZE, FRAME_SIZE), 64, dtype=np.uint8), float(action), \
            self.t >= self.episode_length


class FrameSkip(Env):
    """Repeat each action ``skip`` times, summing rewards (for ALE-style adapters)."""

    def __init__(self, env: Env, skip: int = 4):
        self.env, self.skip = env, skip
        self.action_count = env.action_count
        self.seed = env.seed
        self.terminated = True

    def reset(self):
        self.terminated = False
        return self.env.reset()

    def _step(self, action):
        total = 0.0
        for _ in range(self.skip):
            frame, reward, done = self.env.step(action)
            total += reward
            if done:
                break
        return frame, total, done


ENVIRONMENTS = {"catch": CatchEnv, "avoid": AvoidEnv, "bandit": BanditEnv}


def make_env(name: str, seed: int = 0) -> Env:
    try:
        return ENVIRONMENTS[name](seed)
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; registered: {sorted(ENVIRONMENTS)}") from None


@dataclass
class PixelEpisode:
    """An environment paired with its frame stacker."""

    env: Env
    stacker: FrameStacker
    clip_rewards: bool = False

    def reset(self) -> np.ndarray:
        return self.stacker.reset(preprocess(self.env.reset()))

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        return step_env(self.env, self.stacker, action, self.clip_rewards)


def step_env(env: Env, stacker: FrameStacker, action: int,
             clip_rewards: bool = False) -> tuple[np.ndarray, float, bool]:
    frame, reward, done = env.step(action)
    if clip_rewards:
        reward = float(np.clip(reward, -1.0, 1.0))
    return stacker.push(preprocess(frame)), reward, done
