"""Closed-loop evaluation: seeded rollouts against configurable prey,
D4RL-style score normalization, conjecture accuracy, blend-rate sweeps.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import env
from .policies import PolicySpec, PredatorTeam, make_prey_policy

DEFAULT_EPS = 0.5
DEFAULT_EPISODES = 100
SWEEP_P = (1.0, 0.7, 0.5, 0.3, 0.0)
ANCHOR_PREY = "expert"


class EvalError(Exception):
    pass


@dataclass
class Anchors:
    task: str
    expert_return: float
    random_return: float
    n_episodes: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "expert_return": self.expert_return,
            "random_return": self.random_return,
            "n_episodes": self.n_episodes,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Anchors":
        return cls(d["task"], float(d["expert_return"]), float(d["random_return"]), int(d["n_episodes"]), int(d["seed"]))


def normalized_score(s: float, anchors: Anchors) -> float:
    span = anchors.expert_return - anchors.random_return
    if abs(span) < 1e-9:
        raise EvalError("degenerate anchors: expert and random returns coincide")
    return 100.0 * (s - anchors.random_return) / span


def prediction_accuracy(conjectures: np.ndarray, true_actions: np.ndarray, eps: float = DEFAULT_EPS) -> float:
    conjectures = np.asarray(conjectures)
    true_actions = np.asarray(true_actions)
    if eps <= 0:
        raise EvalError("eps must be positive")
    if conjectures.shape != true_actions.shape:
        raise EvalError(f"conjecture/action shapes differ: {conjectures.shape} vs {true_actions.shape}")
    dists = np.linalg.norm(conjectures - true_actions, axis=-1)
    return float(np.mean(dists < eps))


class _ScriptedAgent:
    """Adapter giving scripted predator teams the model-agent interface."""

    def __init__(self, level: str, task: str):
        self.team = PredatorTeam(level, task)
        self.rng = np.random.default_rng()

    def reset(self, seed: int | None = None) -> None:
        if seed is not None:
            self.rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 1)))

    def act(self, obs3: np.ndarray, conjecture_override=None):
        return self.team.act(obs3, self.rng), None

    def post_step(self, team_reward: float) -> None:
        pass


class ScriptedPredatorModel:
    """Scripted team behind the model interface; used for score anchors."""

    def __init__(self, level: str, task: str):
        self.level = level
        self.task = task
        self.kind = f"scripted-{level}"

    def make_agent(self, rtg_target: float | None = None) -> _ScriptedAgent:
        return _ScriptedAgent(self.level, self.task)


@dataclass
class EpisodeRecord:
    seed: int
    team_return: float
    accuracy: float | None

    def to_dict(self) -> dict:
        return {"seed": self.seed, "team_return": self.team_return, "accuracy": self.accuracy}


@dataclass
class EvalReport:
    model_id: str
    task: str
    opponent: str
    n_episodes: int
    eps: float
    mean_return: float
    std_return: float
    score_mean: float | None
    score_std: float | None
    accuracy_mean: float | None
    anchors: Anchors | None
    records: list[EpisodeRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "model_id": self.model_id,
            "task": self.task,
            "opponent": self.opponent,
            "n_episodes": self.n_episodes,
            "eps": self.eps,
            "mean_return": self.mean_return,
            "std_return": self.std_return,
            "score_mean": self.score_mean,
            "score_std": self.score_std,
            "accuracy_mean": self.accuracy_mean,
            "anchors": self.anchors.to_dict() if self.anchors else None,
            "records": [r.to_dict() for r in self.records],
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            model_id=d["model_id"],
            task=d["task"],
            opponent=d["opponent"],
            n_episodes=int(d["n_episodes"]),
            eps=float(d["eps"]),
            mean_return=float(d["mean_return"]),
            std_return=float(d["std_return"]),
            score_mean=None if d["score_mean"] is None else float(d["score_mean"]),
            score_std=None if d["score_std"] is None else float(d["score_std"]),
            accuracy_mean=None if d["accuracy_mean"] is None else float(d["accuracy_mean"]),
            anchors=Anchors.from_dict(d["anchors"]) if d.get("anchors") else None,
            records=[EpisodeRecord(r["seed"], r["team_return"], r["accuracy"]) for r in d.get("records", [])],
        )


def episode_seeds(base_seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(entropy=(base_seed, 6)).generate_state(n)]


def run_episode(agent, task: str, opponent: PolicySpec | str, seed: int, eps: float = DEFAULT_EPS) -> EpisodeRecord:
    """One closed-loop episode; the agent sees predator observations, the
    prey follows the opponent spec. Seeding mirrors dataset rollouts."""
    env_seed = int(np.random.SeedSequence(entropy=(seed, 0)).generate_state(1)[0])
    rng_prey = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 2)))
    state = env.reset(task, env_seed)
    prey = make_prey_policy(opponent, task)
    agent.reset(seed=seed)
    team_return = 0.0
    conjectures: list[np.ndarray] = []
    prey_actions: list[np.ndarray] = []
    while not state.done:
        pred_obs = env.observe_predators(state)
        actions, conjecture = agent.act(pred_obs)
        prey_action = prey.act(env.observe(state, env.PREY), rng_prey)
        state, rewards, _ = env.step(state, np.vstack([actions, prey_action[None]]))
        team_reward = float(rewards[:3].sum())
        agent.post_step(team_reward)
        team_return += team_reward
        if conjecture is not None:
            conjectures.append(conjecture)
            prey_actions.append(prey_action)
    accuracy = prediction_accuracy(np.array(conjectures), np.array(prey_actions), eps) if conjectures else None
    return EpisodeRecord(seed=seed, team_return=team_return, accuracy=accuracy)


def rollout_eval(
    model,
    opponent: PolicySpec | str,
    task: str,
    n_episodes: int = DEFAULT_EPISODES,
    seed: int = 0,
    seeds: list[int] | None = None,
    eps: float = DEFAULT_EPS,
    anchors: Anchors | None = None,
    jobs: int = 1,
    rtg_target: float | None = None,
) -> EvalReport:
    cfg = getattr(model, "cfg", None)
    if cfg is not None and cfg.env_id != task:
        raise EvalError(
            f"model is wired for {cfg.env_id!r} (obs dim {cfg.obs_dim}), cannot evaluate on {task!r} "
            f"(obs dim {env.obs_dim(task, 0)})"
        )
    if seeds is None:
        seeds = episode_seeds(seed, n_episodes)
    if len(seeds) != n_episodes:
        raise EvalError(f"{len(seeds)} seeds for {n_episodes} episodes")
    spec = PolicySpec.parse(opponent) if isinstance(opponent, str) else opponent

    def _run(ep_seed: int) -> EpisodeRecord:
        return run_episode(model.make_agent(rtg_target), task, spec, ep_seed, eps)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            records = list(ex.map(_run, seeds))
    else:
        records = [_run(s) for s in seeds]

    returns = np.array([r.team_return for r in records])
    accs = [r.accuracy for r in records if r.accuracy is not None]
    score_mean = score_std = None
    if anchors is not None:
        scores = np.array([normalized_score(r, anchors) for r in returns])
        score_mean = float(scores.mean())
        score_std = float(scores.std(ddof=1)) if len(scores) > 1 else 0.0
    return EvalReport(
        model_id=getattr(model, "kind", "unknown"),
        task=task,
        opponent=str(spec),
        n_episodes=n_episodes,
        eps=eps,
        mean_return=float(returns.mean()),
        std_return=float(returns.std(ddof=1)) if len(returns) > 1 else 0.0,
        score_mean=score_mean,
        score_std=score_std,
        accuracy_mean=float(np.mean(accs)) if accs else None,
        anchors=anchors,
        records=records,
    )


def measure_anchors(task: str, n_episodes: int = DEFAULT_EPISODES, seed: int = 0, jobs: int = 1) -> Anchors:
    """Scripted expert and uniform-random predators vs the expert prey."""
    expert = rollout_eval(ScriptedPredatorModel("expert", task), ANCHOR_PREY, task, n_episodes, seed=seed, jobs=jobs)
    random_ = rollout_eval(ScriptedPredatorModel("random", task), ANCHOR_PREY, task, n_episodes, seed=seed, jobs=jobs)
    return Anchors(
        task=task,
        expert_return=expert.mean_return,
        random_return=random_.mean_return,
        n_episodes=n_episodes,
        seed=seed,
    )


def load_or_measure_anchors(task: str, cache_path=None, n_episodes: int = DEFAULT_EPISODES, seed: int = 0, jobs: int = 1) -> Anchors:
    if cache_path is not None:
        try:
            with open(cache_path) as f:
                cached = json.load(f)
            if task in cached:
                return Anchors.from_dict(cached[task])
        except FileNotFoundError:
            cached = {}
        anchors = measure_anchors(task, n_episodes, seed, jobs)
        cached[task] = anchors.to_dict()
        with open(cache_path, "w") as f:
            json.dump(cached, f, indent=1)
        return anchors
    return measure_anchors(task, n_episodes, seed, jobs)


@dataclass
class SweepRow:
    p: float
    score_mean: float
    score_std: float
    accuracy: float | None
    mean_return: float

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "score_mean": self.score_mean,
            "score_std": self.score_std,
            "accuracy": self.accuracy,
            "mean_return": self.mean_return,
        }


def blend_sweep(
    model,
    task: str,
    p_list: tuple[float, ...] = SWEEP_P,
    n_episodes: int = DEFAULT_EPISODES,
    seed: int = 0,
    eps: float = DEFAULT_EPS,
    anchors: Anchors | None = None,
    jobs: int = 1,
) -> list[SweepRow]:
    """Degradation curve against blend(p) preys, one row per p."""
    rows = []
    for p in p_list:
        spec = PolicySpec("blend", blend_p=float(p))
        rep = rollout_eval(model, spec, task, n_episodes, seed=seed, eps=eps, anchors=anchors, jobs=jobs)
        rows.append(
            SweepRow(
                p=float(p),
                score_mean=rep.score_mean if rep.score_mean is not None else float("nan"),
                score_std=rep.score_std if rep.score_std is not None else float("nan"),
                accuracy=rep.accuracy_mean,
                mean_return=rep.mean_return,
            )
        )
    return rows
