"""Scripted opponents and data-collection behaviors.

The prey evades along a potential field (inverse-square repulsion from
predators and obstacles, a centering pull near the edge, food pull in
simple-world); predators pursue a lead-predicted prey position with
fixed 120 degree encircling offsets. Two gain sets give two distinct
evaders: "expert" and the differently tuned "alt-expert".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import env

PREY_KINDS = ("expert", "alt-expert", "medium", "random", "still", "blend")
DATA_LEVELS = ("expert", "medium", "random")

EXPERT_GAINS = {"repel": 1.0, "obstacle": 0.5, "center": 0.7, "food": 0.3}
ALT_GAINS = {"repel": 1.5, "obstacle": 0.25, "center": 0.45, "food": 0.5}
CENTER_TRIGGER = 0.8
LEAD = 0.3  # steps of prey velocity extrapolation
ENCIRCLE_RADIUS = 0.15
HOMING_RADIUS = 0.3  # inside this range, drop the slot and dive at the prey
MEDIUM_NOISE = 0.4


def _box_normalise(d: np.ndarray) -> np.ndarray:
    """Largest action in [-1,1]^2 along d; the box allows more thrust off-axis."""
    m = float(np.max(np.abs(d)))
    return d / m if m > 1e-9 else np.zeros(2)


@dataclass(frozen=True)
class PolicySpec:
    kind: str
    blend_p: float | None = None
    noise_scale: float | None = None

    def __post_init__(self):
        if self.kind not in PREY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "blend":
            if self.blend_p is None or not 0.0 <= self.blend_p <= 1.0:
                raise ValueError("blend needs blend_p in [0, 1]")
        elif self.blend_p is not None:
            raise ValueError("blend_p only valid for kind=blend")
        if self.kind == "medium":
            if self.noise_scale is not None and self.noise_scale <= 0:
                raise ValueError("medium noise_scale must be > 0")
        elif self.noise_scale is not None:
            raise ValueError("noise_scale only valid for kind=medium")

    @classmethod
    def parse(cls, text: str) -> "PolicySpec":
        """e.g. "expert", "still", "blend:0.5", "medium:0.3"."""
        kind, _, arg = text.partition(":")
        if kind == "blend":
            return cls("blend", blend_p=float(arg) if arg else None)
        if kind == "medium":
            return cls("medium", noise_scale=float(arg) if arg else None)
        if arg:
            raise ValueError(f"policy {kind!r} takes no argument")
        return cls(kind)

    def __str__(self) -> str:
        if self.kind == "blend":
            return f"blend:{self.blend_p:g}"
        if self.kind == "medium" and self.noise_scale is not None:
            return f"medium:{self.noise_scale:g}"
        return self.kind


class _PreyView:
    """Slices of a prey observation, by task."""

    def __init__(self, obs: np.ndarray, task: str):
        n_obst, n_food = env.task_layout(task)
        self.vel = obs[0:2]
        self.pos = obs[2:4]
        k = 4
        self.obstacles = obs[k : k + 2 * n_obst].reshape(n_obst, 2)
        k += 2 * n_obst
        self.food = obs[k : k + 2 * n_food].reshape(n_food, 2)
        k += 2 * n_food
        self.predators = obs[k : k + 6].reshape(3, 2)


class _PredatorView:
    """Slices of a predator observation, by task. Prey is the last 'other'."""

    def __init__(self, obs: np.ndarray, task: str):
        n_obst, n_food = env.task_layout(task)
        self.vel = obs[0:2]
        self.pos = obs[2:4]
        k = 4 + 2 * n_obst + 2 * n_food
        others = obs[k : k + 6].reshape(3, 2)
        self.prey_rel = others[2]
        k += 6
        if task == env.SIMPLE_TAG:
            self.prey_vel = obs[k : k + 2]
        else:
            self.prey_vel = obs[k + 4 : k + 6]


def _evasion_field(view: _PreyView, gains: dict[str, float]) -> np.ndarray:
    drive = np.zeros(2)
    for rel in view.predators:
        d = max(float(np.hypot(rel[0], rel[1])), 1e-6)
        drive -= gains["repel"] * rel / d**3
    for rel in view.obstacles:
        d = max(float(np.hypot(rel[0], rel[1])), 1e-6)
        drive -= gains["obstacle"] * rel / d**3
    r = float(np.hypot(view.pos[0], view.pos[1]))
    if r > CENTER_TRIGGER:
        # escalates like the arena's own boundary penalty, so the evader
        # patrols the rim instead of fleeing to infinity
        drive -= gains["center"] * np.exp(5.0 * (r - CENTER_TRIGGER)) * view.pos / r
    if len(view.food):
        dists = np.hypot(view.food[:, 0], view.food[:, 1])
        rel = view.food[int(np.argmin(dists))]
        d = max(float(np.hypot(rel[0], rel[1])), 1e-6)
        drive += gains["food"] * rel / d
    return np.clip(drive, -1.0, 1.0)


class PreyPolicy:
    """Uniform prey-side interface: act(observation, rng) -> action in [-1,1]^2."""

    def __init__(self, spec: PolicySpec, task: str):
        self.spec = spec
        self.task = task
        self.chose_expert = False  # last blend arm taken, for diagnostics
        self._gains = ALT_GAINS if spec.kind == "alt-expert" else EXPERT_GAINS

    def act(self, obs: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        kind = self.spec.kind
        if kind == "still":
            return np.zeros(2)
        if kind == "random":
            return rng.uniform(-1.0, 1.0, size=2)
        expert = _evasion_field(_PreyView(obs, self.task), self._gains)
        if kind in ("expert", "alt-expert"):
            return expert
        if kind == "medium":
            sigma = self.spec.noise_scale or MEDIUM_NOISE
            return np.clip(expert + rng.normal(0.0, sigma, size=2), -1.0, 1.0)
        # blend: per-step coin flip between the expert and random arms
        self.chose_expert = rng.random() < self.spec.blend_p
        if self.chose_expert:
            return expert
        return rng.uniform(-1.0, 1.0, size=2)


def make_prey_policy(spec: PolicySpec | str, task: str) -> PreyPolicy:
    if isinstance(spec, str):
        spec = PolicySpec.parse(spec)
    return PreyPolicy(spec, task)


class PredatorTeam:
    """Scripted predators: level is one of expert / medium / random."""

    def __init__(self, level: str, task: str):
        if level not in DATA_LEVELS:
            raise ValueError(f"unknown predator level {level!r}")
        self.level = level
        self.task = task

    def act(self, obs_stack: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        if self.level == "random":
            return rng.uniform(-1.0, 1.0, size=(3, 2))
        views = [_PredatorView(obs_stack[k], self.task) for k in range(3)]
        positions = np.array([v.pos for v in views])
        predicted = views[0].pos + views[0].prey_rel + LEAD * views[0].prey_vel
        # encircle slots rotate with the prey's heading: slot 0 cuts it off
        base = float(np.arctan2(views[0].prey_vel[1], views[0].prey_vel[0]))
        angles = base + 2.0 * np.pi * np.arange(3) / 3.0
        slots = predicted + ENCIRCLE_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        # role assignment: cheapest predator-to-slot matching of the 6
        best, best_cost = None, np.inf
        for perm in ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)):
            cost = sum(np.hypot(*(slots[perm[k]] - positions[k])) for k in range(3))
            if cost < best_cost:
                best, best_cost = perm, cost
        actions = np.zeros((3, 2))
        for k in range(3):
            target = slots[best[k]]
            if float(np.hypot(*views[k].prey_rel)) < HOMING_RADIUS:
                target = views[k].pos + views[k].prey_rel + LEAD * views[k].prey_vel
            actions[k] = _box_normalise(target - positions[k])
        if self.level == "medium":
            actions = np.clip(actions + rng.normal(0.0, MEDIUM_NOISE, size=(3, 2)), -1.0, 1.0)
        return actions
