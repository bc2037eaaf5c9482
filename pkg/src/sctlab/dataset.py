"""Trajectory collection, JSON-lines persistence, and training-window sampling.

A dataset is a header line plus one line per transition. The reward-to-go
is the predator team's (summed) reward telescoped backward over the
episode; observation and rtg normalisation statistics live in the header
so train and test time agree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import env
from .policies import DATA_LEVELS, PredatorTeam, make_prey_policy

FORMAT_VERSION = 1
FORMAT_KIND = "sctlab-dataset"
DEFAULT_TRANSITIONS = 50_000
STD_FLOOR = 1e-6


class DatasetError(ValueError):
    pass


@dataclass
class Episode:
    obs: np.ndarray  # (T, 3, obs_dim)
    prey_actions: np.ndarray  # (T, 2)
    pred_actions: np.ndarray  # (T, 3, 2)
    rewards: np.ndarray  # (T, 4)
    rtg: np.ndarray  # (T,)

    def team_return(self) -> float:
        return float(self.rewards[:, :3].sum())


@dataclass
class Dataset:
    env_id: str
    level: str
    obs_dim: int
    episode_len: int
    seed: int
    episodes: list[Episode]
    obs_mean: np.ndarray = field(default=None)
    obs_std: np.ndarray = field(default=None)
    rtg_mean: float = 0.0
    rtg_std: float = 1.0
    mean_episode_return: float = 0.0

    @property
    def n_transitions(self) -> int:
        return sum(len(e.rtg) for e in self.episodes)

    def compute_stats(self) -> None:
        """Pooled per-dimension observation stats and scalar rtg stats."""
        all_obs = np.concatenate([e.obs.reshape(-1, self.obs_dim) for e in self.episodes])
        self.obs_mean = all_obs.mean(axis=0)
        self.obs_std = np.maximum(all_obs.std(axis=0), STD_FLOOR)
        all_rtg = np.concatenate([e.rtg for e in self.episodes])
        self.rtg_mean = float(all_rtg.mean())
        self.rtg_std = float(max(all_rtg.std(), STD_FLOOR))
        self.mean_episode_return = float(np.mean([e.team_return() for e in self.episodes]))


def rollout_episode(task: str, level: str, seed_tuple: tuple) -> Episode:
    """One scripted-vs-scripted episode; all randomness keyed by seed_tuple."""
    env_seed = int(np.random.SeedSequence(entropy=seed_tuple + (0,)).generate_state(1)[0])
    rng_pred = np.random.default_rng(np.random.SeedSequence(entropy=seed_tuple + (1,)))
    rng_prey = np.random.default_rng(np.random.SeedSequence(entropy=seed_tuple + (2,)))
    state = env.reset(task, env_seed)
    team = PredatorTeam(level, task)
    prey = make_prey_policy(level, task)  # matching prey quality
    T = env.EPISODE_LEN
    obs = np.zeros((T, 3, env.obs_dim(task, 0)))
    prey_actions = np.zeros((T, 2))
    pred_actions = np.zeros((T, 3, 2))
    rewards = np.zeros((T, 4))
    t = 0
    while not state.done:
        obs[t] = env.observe_predators(state)
        pa = team.act(obs[t], rng_pred)
        ya = prey.act(env.observe(state, env.PREY), rng_prey)
        state, r, _ = env.step(state, np.vstack([pa, ya]))
        pred_actions[t] = pa
        prey_actions[t] = ya
        rewards[t] = r
        t += 1
    team_r = rewards[:, :3].sum(axis=1)
    rtg = np.cumsum(team_r[::-1])[::-1].copy()
    return Episode(obs, prey_actions, pred_actions, rewards, rtg)


def generate(task: str, level: str, n_transitions: int, seed: int) -> Dataset:
    if level not in DATA_LEVELS:
        raise DatasetError(f"level must be one of {DATA_LEVELS}, got {level!r}")
    if n_transitions % env.EPISODE_LEN != 0:
        raise DatasetError(f"n_transitions must be a multiple of {env.EPISODE_LEN}")
    n_episodes = n_transitions // env.EPISODE_LEN
    episodes = [rollout_episode(task, level, (seed, i)) for i in range(n_episodes)]
    ds = Dataset(
        env_id=task,
        level=level,
        obs_dim=env.obs_dim(task, 0),
        episode_len=env.EPISODE_LEN,
        seed=seed,
        episodes=episodes,
    )
    ds.compute_stats()
    return ds


def save(ds: Dataset, path, meta: dict | None = None) -> None:
    """Writes header line plus one JSON line per transition. meta, when
    given, is embedded in the header for provenance and ignored on load."""
    header = {
        "version": FORMAT_VERSION,
        "kind": FORMAT_KIND,
        "env": ds.env_id,
        "level": ds.level,
        "obs_dim": ds.obs_dim,
        "act_dim": 2,
        "episode_len": ds.episode_len,
        "n_transitions": ds.n_transitions,
        "seed": ds.seed,
        "obs_mean": ds.obs_mean.tolist(),
        "obs_std": ds.obs_std.tolist(),
        "rtg_mean": ds.rtg_mean,
        "rtg_std": ds.rtg_std,
        "mean_episode_return": ds.mean_episode_return,
    }
    if meta is not None:
        header["meta"] = meta
    with open(path, "w") as f:
        f.write(json.dumps(header, separators=(",", ":")) + "\n")
        for ep in ds.episodes:
            for t in range(len(ep.rtg)):
                row = {
                    "t": t + 1,
                    "rtg": float(ep.rtg[t]),
                    "obs": ep.obs[t].tolist(),
                    "prey_action": ep.prey_actions[t].tolist(),
                    "pred_actions": ep.pred_actions[t].tolist(),
                    "rewards": ep.rewards[t].tolist(),
                }
                f.write(json.dumps(row, separators=(",", ":")) + "\n")


def load(path) -> Dataset:
    with open(path) as f:
        first = f.readline()
        if not first:
            raise DatasetError(f"{path}: empty file")
        try:
            header = json.loads(first)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}: bad header: {e}") from e
        if header.get("kind") != FORMAT_KIND:
            raise DatasetError(f"{path}: not a dataset file")
        if header.get("version") != FORMAT_VERSION:
            raise DatasetError(f"{path}: version {header.get('version')} unsupported")
        obs_dim = int(header["obs_dim"])
        episode_len = int(header["episode_len"])
        n_expected = int(header["n_transitions"])
        rows = []
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{lineno}: bad transition: {e}") from e
    if len(rows) != n_expected:
        raise DatasetError(f"{path}: header says {n_expected} transitions, found {len(rows)}")
    if n_expected % episode_len != 0:
        raise DatasetError(f"{path}: transition count not a multiple of episode_len")
    episodes = []
    for start in range(0, n_expected, episode_len):
        chunk = rows[start : start + episode_len]
        obs = np.array([r["obs"] for r in chunk])
        if obs.shape != (episode_len, 3, obs_dim):
            raise DatasetError(f"{path}: observation block shape {obs.shape} vs header dim {obs_dim}")
        prey = np.array([r["prey_action"] for r in chunk])
        acts = np.array([r["pred_actions"] for r in chunk])
        if np.abs(prey).max() > 1.0 + 1e-12 or np.abs(acts).max() > 1.0 + 1e-12:
            raise DatasetError(f"{path}: action outside [-1, 1]")
        episodes.append(
            Episode(
                obs=obs,
                prey_actions=prey,
                pred_actions=acts,
                rewards=np.array([r["rewards"] for r in chunk]),
                rtg=np.array([r["rtg"] for r in chunk]),
            )
        )
    ds = Dataset(
        env_id=header["env"],
        level=header["level"],
        obs_dim=obs_dim,
        episode_len=episode_len,
        seed=int(header["seed"]),
        episodes=episodes,
        obs_mean=np.array(header["obs_mean"]),
        obs_std=np.array(header["obs_std"]),
        rtg_mean=float(header["rtg_mean"]),
        rtg_std=float(header["rtg_std"]),
        mean_episode_return=float(header["mean_episode_return"]),
    )
    return ds


@dataclass
class WindowBatch:
    """Right-aligned context windows, tail-padded to the longest in the batch.

    timesteps are window-relative (0..len-1) and index the positional table.
    """

    rtg: np.ndarray  # (B, L)
    obs: np.ndarray  # (B, L, 3, obs_dim)
    prey_actions: np.ndarray  # (B, L, 2)
    pred_actions: np.ndarray  # (B, L, 3, 2)
    timesteps: np.ndarray  # (B, L) int
    mask: np.ndarray  # (B, L) 1.0 where valid
    lengths: np.ndarray  # (B,) int

    @property
    def batch_size(self) -> int:
        return self.rtg.shape[0]


def sample_window(ds: Dataset, batch: int, context_len: int, rng: np.random.Generator) -> WindowBatch:
    """Uniform over (episode, end-index); windows never cross episodes."""
    if not ds.episodes:
        raise DatasetError("cannot sample from an empty dataset")
    if context_len > ds.episode_len:
        raise DatasetError(f"context_len {context_len} > episode length {ds.episode_len}")
    ep_idx = rng.integers(0, len(ds.episodes), size=batch)
    ends = rng.integers(1, ds.episode_len + 1, size=batch)
    lengths = np.minimum(ends, context_len)
    L = int(lengths.max())
    D = ds.obs_dim
    out = WindowBatch(
        rtg=np.zeros((batch, L)),
        obs=np.zeros((batch, L, 3, D)),
        prey_actions=np.zeros((batch, L, 2)),
        pred_actions=np.zeros((batch, L, 3, 2)),
        timesteps=np.zeros((batch, L), dtype=np.int64),
        mask=np.zeros((batch, L)),
        lengths=lengths.astype(np.int64),
    )
    for b in range(batch):
        ep = ds.episodes[ep_idx[b]]
        n = int(lengths[b])
        sl = slice(int(ends[b]) - n, int(ends[b]))
        out.rtg[b, :n] = ep.rtg[sl]
        out.obs[b, :n] = ep.obs[sl]
        out.prey_actions[b, :n] = ep.prey_actions[sl]
        out.pred_actions[b, :n] = ep.pred_actions[sl]
        out.timesteps[b, :n] = np.arange(n)
        out.mask[b, :n] = 1.0
    return out
