"""Q-learning with a target network, annealed ε-greedy exploration and
interleaved greedy evaluation episodes."""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .attention import AttentionConfig
from .qnetworks import make_qnet, sync_target
from .replay_env import (
    STACK,
    Batch,
    FrameStacker,
    NotReadyError,
    PixelEpisode,
    ReplayBuffer,
    Transition,
    make_env,
    sample_minibatch,
)
from .tensor_compute import Adam, ConfigError, RngState, huber_loss, save_checkpoint

log = logging.getLogger(__name__)

DEFAULT_BATCH = {"baseline": 32, "attentive": 256}
CSV_COLUMNS = ("step", "episode", "phase", "return", "smoothed_return", "epsilon", "loss_mean")


@dataclass
class TrainerConfig:
    """Hyper-parameters of a run. Defaults are the ``paper`` preset."""

    buffer_size: int = 1_000_000
    gamma: float = 0.99
    target_update_freq: int = 30_000
    # None resolves per model kind: 32 for baseline, 256 for attentive.
    batch_size: int | None = None
    lr: float = 1e-4
    adam_eps: float = 0.00015
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    max_grad_norm: float | None = None
    huber_delta: float = 1.0
    eps_start: float = 1.0
    eps_end: float = 0.01
    exploration_steps: int = 5_000_000
    learning_starts: int = 200_000
    train_freq: int = 4
    total_steps: int = 40_000_000
    eval_every: int = 10
    eval_episodes: int = 2
    eval_seed_offset: int = 1_000_003
    seeds: tuple[int, ...] = (0, 1, 2)
    dropout_rate: float = 0.1
    clip_rewards: bool = False
    checkpoint_every: int = 10_000
    smoothing_window: int = 10
    # Encoder shape (attentive model only).
    d_model: int = 128
    n_heads: int = 8
    n_layers: int = 2
    linformer: bool = True
    linformer_k: int = 32
    tie_kv_projections: bool = False
    mlp_hidden: int = 512
    positional_combine: str = "add"

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)

    def validate(self) -> None:
        positive = ("buffer_size", "target_update_freq", "lr", "adam_eps", "exploration_steps",
                    "train_freq", "eval_every", "huber_delta", "smoothing_window")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("learning_starts", "total_steps", "eval_episodes", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not 0 <= self.gamma <= 1:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ConfigError(f"need 0 <= eps_end <= eps_start <= 1, got {self.eps_end}, {self.eps_start}")
        if self.total_steps > 0 and self.learning_starts > self.total_steps:
            raise ConfigError(
                f"learning_starts={self.learning_starts} exceeds total_steps={self.total_steps}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.positional_combine not in ("add", "concat"):
            raise ConfigError(f"positional_combine must be add or concat, got {self.positional_combine!r}")
        self.attention_config()

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers, seq_len=50,
            linformer_k=self.linformer_k, linformer=self.linformer,
            tie_kv_projections=self.tie_kv_projections, dropout_rate=self.dropout_rate,
            mlp_hidden=self.mlp_hidden)

    def batch_for(self, model_kind: str) -> int:
        return self.batch_size if self.batch_size is not None else DEFAULT_BATCH[model_kind]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return d


PRESETS = {
    "paper": TrainerConfig(),
    "desk": TrainerConfig(buffer_size=50_000, learning_starts=1_000, exploration_steps=20_000,
                          total_steps=150_000, target_update_freq=1_000),
}


def preset(name: str) -> TrainerConfig:
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# Exploration and targets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpsilonSchedule:
    eps_start: float = 1.0
    eps_end: float = 0.01
    exploration_steps: int = 5_000_000

    def __call__(self, step: int) -> float:
        return epsilon_at(self, step)


def epsilon_at(schedule: EpsilonSchedule, step: int) -> float:
    """Linear anneal from ``eps_start`` to ``eps_end``, then held at ``eps_end``."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step >= schedule.exploration_steps:
        return schedule.eps_end
    frac = step / schedule.exploration_steps
    return schedule.eps_start + (schedule.eps_end - schedule.eps_start) * frac


def greedy_action(q_values) -> int:
    """Index of the largest Q-value; ties go to the lowest index."""
    return int(np.argmax(np.asarray(q_values)))


def select_action(qnet: Callable, state: np.ndarray, epsilon: float, rng: RngState,
                  training: bool = False) -> int:
    """ε-greedy action. ``rng`` supplies the coin flip and any dropout masks."""
    coin = rng.np.random()
    if coin < epsilon:
        return int(rng.np.integers(qnet.n_actions))
    with torch.no_grad():
        q = qnet(torch.from_numpy(np.ascontiguousarray(state))[None], rng, training)
    return greedy_action(q[0].numpy())


def td_targets(batch: Batch, target_net, gamma: float) -> torch.Tensor:
    """One-step bootstrapped targets ``r + γ·max_a Q_target(s′, a)·(1 − done)``."""
    with torch.no_grad():
        q_next = target_net(torch.from_numpy(batch.next_states), None, False)
        best = q_next.max(dim=1).values
        rewards = torch.as_tensor(batch.rewards, dtype=best.dtype)
        not_done = 1.0 - torch.as_tensor(batch.dones, dtype=best.dtype)
        return rewards + gamma * best * not_done


def train_step(online, target, buffer: ReplayBuffer, optimizer: Adam, batch_size: int,
               gamma: float, rng: RngState, huber_delta: float = 1.0) -> float | None:
    """One gradient step on a sampled minibatch; ``None`` if the buffer is underfull."""
    try:
        batch = sample_minibatch(buffer, batch_size, rng.np)
    except NotReadyError:
        return None
    y = td_targets(batch, target, gamma)
    q = online(torch.from_numpy(batch.states), rng, True)
    q_taken = q.gather(1, torch.from_numpy(batch.actions)[:, None]).squeeze(1)
    loss = huber_loss(q_taken, y, huber_delta)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class Row:
    step: int
    episode: int
    phase: str  # "train" or "eval"
    ret: float
    epsilon: float
    loss_mean: float | None = None
    length: int = 0


@dataclass
class MetricsLog:
    rows: list[Row] = field(default_factory=list)
    # Wall-clock seconds per 1,000 environment steps (kept out of the CSV).
    seconds_per_1k: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, row: Row) -> None:
        if self.rows and row.step < self.rows[-1].step:
            raise ValueError("metrics must be appended in step order")
        self.rows.append(row)

    def phase(self, name: str) -> list[Row]:
        return [r for r in self.rows if r.phase == name]

    def curve(self, name: str, window: int = 10) -> tuple[np.ndarray, np.ndarray]:
        rows = self.phase(name)
        steps = np.array([r.step for r in rows], dtype=np.int64)
        return steps, smooth([r.ret for r in rows], window)

    def write_csv(self, path: str | Path, window: int = 10) -> None:
        smoothed = {p: iter(self.curve(p, window)[1]) for p in ("train", "eval")}
        with open(path, "w", newline="") as fh:
            for key in sorted(self.meta):
                fh.write(f"# {key}={self.meta[key]}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r.step, r.episode, r.phase, repr(float(r.ret)),
                            repr(float(next(smoothed[r.phase]))), repr(float(r.epsilon)),
                            "" if r.loss_mean is None else repr(float(r.loss_mean))])

    @classmethod
    def read_csv(cls, path: str | Path) -> "MetricsLog":
        out = cls()
        with open(path, newline="") as fh:
            lines = fh.read().splitlines()
        body = []
        for line in lines:
            if line.startswith("# "):
                key, _, value = line[2:].partition("=")
                out.meta[key] = value
            else:
                body.append(line)
        reader = csv.DictReader(body)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for rec in reader:
            out.rows.append(Row(int(rec["step"]), int(rec["episode"]), rec["phase"],
                                float(rec["return"]), float(rec["epsilon"]),
                                float(rec["loss_mean"]) if rec["loss_mean"] else None))
        return out


def smooth(values: Sequence[float], window: int = 10) -> np.ndarray:
    """Trailing mean over the last ``min(window, i+1)`` entries."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        return x
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


@dataclass
class PhaseSummary:
    steps: np.ndarray
    per_seed: np.ndarray  # seeds × steps
    mean: np.ndarray
    min: np.ndarray
    max: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("steps", "per_seed", "mean", "min", "max")}


@dataclass
class RunSummary:
    phases: dict[str, PhaseSummary]
    seeds: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"seeds": list(self.seeds), "phases": {k: v.to_dict() for k, v in self.phases.items()}}

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def align_last_value(steps: np.ndarray, values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Value of the latest entry at or before each grid step (NaN before the first)."""
    pos = np.searchsorted(steps, grid, side="right") - 1
    out = np.full(grid.shape, np.nan)
    ok = pos >= 0
    out[ok] = np.asarray(values, dtype=np.float64)[pos[ok]]
    return out


def aggregate_seeds(logs: Sequence[MetricsLog], window: int = 10,
                    seeds: Sequence | None = None) -> RunSummary:
    """Pointwise mean/min/max of smoothed curves across seeds.

    Curves are aligned on the union of their step values, starting where every
    seed has at least one entry; shorter curves carry their last value forward.
    """
    if not logs:
        raise ValueError("aggregate_seeds needs at least one log")
    phases = {}
    for name in ("train", "eval"):
        curves = [lg.curve(name, window) for lg in logs]
        if any(s.size == 0 for s, _ in curves):
            empty = np.zeros(0)
            phases[name] = PhaseSummary(empty, np.zeros((len(logs), 0)), empty, empty, empty)
            continue
        start = max(s[0] for s, _ in curves)
        grid = np.unique(np.concatenate([s for s, _ in curves]))
        grid = grid[grid >= start]
        per_seed = np.stack([align_last_value(s, v, grid) for s, v in curves])
        phases[name] = PhaseSummary(grid, per_seed, per_seed.mean(axis=0),
                                    per_seed.min(axis=0), per_seed.max(axis=0))
    return RunSummary(phases, list(seeds) if seeds is not None else list(range(len(logs))))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class Trainer:
    """Runs one seed. ``counters`` and ``events`` record every update, target
    sync and evaluation so the training protocol can be audited."""

    def __init__(self, config: TrainerConfig, env_name: str, model_kind: str, seed: int = 0,
                 out_dir: str | Path | None = None):
        config.validate()
        self.config = config
        self.env_name = env_name
        self.model_kind = model_kind
        self.seed = seed
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.batch_size = config.batch_for(model_kind)

        root = RngState(seed)
        init_rng, self.act_rng, self.learn_rng, self.eval_rng = root.spawn(4)
        env = make_env(env_name, seed)
        self.episode = PixelEpisode(env, FrameStacker(STACK), config.clip_rewards)
        self.eval_episode = PixelEpisode(make_env(env_name, seed + config.eval_seed_offset),
                                         FrameStacker(STACK), config.clip_rewards)
        self.n_actions = env.action_count
        self.online = make_qnet(model_kind, self.n_actions, config.attention_config(),
                                seed=int(init_rng.np.integers(2**62)),
                                positional_combine=config.positional_combine)
        self.target = copy.deepcopy(self.online)
        for p in self.target.parameters():
            p.requires_grad_(False)
        self.optimizer = Adam(self.online.parameters(), lr=config.lr, eps=config.adam_eps,
                              beta1=config.adam_beta1, beta2=config.adam_beta2,
                              max_grad_norm=config.max_grad_norm)
        self.buffer = ReplayBuffer(config.buffer_size, share_frames=True)
        self.schedule = EpsilonSchedule(config.eps_start, config.eps_end, config.exploration_steps)
        self.counters: Counter = Counter()
        self.events: list[tuple[str, int]] = []
        self.step = 0

    def _checkpoint(self, tag: str) -> None:
        if self.out_dir is None:
            return
        ckpt_dir = self.out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt_dir / f"{tag}.ckpt", dict(self.online.named_parameters()),
                        {"step": self.step, "model": self.model_kind, "n_actions": self.n_actions,
                         "env": self.env_name, "seed": self.seed})

    def evaluate(self) -> list[float]:
        """Greedy, dropout-off episodes with no buffer writes and no learning."""
        pushes, updates = self.buffer.pushes, self.counters["updates"]
        self.events.append(("eval_start", self.step))
        returns = []
        for _ in range(self.config.eval_episodes):
            state, total, done = self.eval_episode.reset(), 0.0, False
            while not done:
                action = select_action(self.online, state, 0.0, self.eval_rng, training=False)
                state, reward, done = self.eval_episode.step(action)
                total += reward
            returns.append(total)
            self.counters["eval_episodes"] += 1
        self.events.append(("eval_end", self.step))
        assert self.buffer.pushes == pushes and self.counters["updates"] == updates
        return returns

    def run(self) -> MetricsLog:
        cfg = self.config
        metrics = MetricsLog(meta={"model": self.model_kind, "env": self.env_name, "seed": self.seed,
                                   "batch_size": self.batch_size})
        if cfg.total_steps == 0:
            return metrics
        state = self.episode.reset()
        ep_return, ep_len, losses = 0.0, 0, []
        episodes = 0
        tick = time.perf_counter()
        while self.step < cfg.total_steps:
            eps = self.schedule(self.step)
            action = select_action(self.online, state, eps, self.act_rng, training=True)
            next_state, reward, done = self.episode.step(action)
            self.buffer.push(Transition(state, action, reward, next_state, done))
            self.step += 1
            ep_return += reward
            ep_len += 1

            if self.step >= cfg.learning_starts and self.step % cfg.train_freq == 0:
                loss = train_step(self.online, self.target, self.buffer, self.optimizer,
                                  self.batch_size, cfg.gamma, self.learn_rng, cfg.huber_delta)
                if loss is not None:
                    losses.append(loss)
                    self.counters["updates"] += 1
                    self.events.append(("update", self.step))
            if self.step % cfg.target_update_freq == 0:
                sync_target(self.online, self.target)
                self.counters["syncs"] += 1
                self.events.append(("sync", self.step))
            if cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                self._checkpoint(f"step_{self.step:09d}")
            if self.step % 1000 == 0:
                now = time.perf_counter()
                metrics.seconds_per_1k.append(now - tick)
                tick = now

            if done:
                metrics.append(Row(self.step, episodes, "train", ep_return, eps,
                                   float(np.mean(losses)) if losses else None, ep_len))
                episodes += 1
                self.counters["train_episodes"] += 1
                if episodes % cfg.eval_every == 0 and cfg.eval_episodes > 0:
                    returns = self.evaluate()
                    metrics.append(Row(self.step, episodes, "eval", float(np.mean(returns)), 0.0))
                    if episodes % (10 * cfg.eval_every) == 0:
                        recent = smooth([r.ret for r in metrics.phase("eval")], cfg.smoothing_window)
                        log.info("%s/%s seed %d step %d: episodes %d, eps %.3f, smoothed eval %.3f",
                                 self.model_kind, self.env_name, self.seed, self.step, episodes,
                                 eps, recent[-1])
                state = self.episode.reset()
                ep_return, ep_len, losses = 0.0, 0, []
            else:
                state = next_state
        self._checkpoint("final")
        return metrics


def run(config: TrainerConfig, env_name: str, model_kind: str, seed: int = 0,
        out_dir: str | Path | None = None) -> MetricsLog:
    return Trainer(config, env_name, model_kind, seed, out_dir).run()
