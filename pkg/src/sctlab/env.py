"""Particle pursuit tasks: three slow predators chase one fast prey.

simple-tag has 2 obstacles; simple-world has 1 obstacle and 2 food
particles the prey wants to touch. Physics is a damped double
integrator with soft contact forces, plus hard projection out of
obstacles so bodies never tunnel into them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

N_PREDATORS = 3
PREY = 3
N_AGENTS = 4
EPISODE_LEN = 25

SIMPLE_TAG = "simple-tag"
SIMPLE_WORLD = "simple-world"
TASKS = (SIMPLE_TAG, SIMPLE_WORLD)


class EpisodeOver(RuntimeError):
    """step() called on a finished episode."""


@dataclass(frozen=True)
class PhysicsParams:
    dt: float = 0.1
    damping: float = 0.25
    contact_force: float = 100.0
    contact_margin: float = 0.01
    agent_radius: float = 0.05
    prey_radius: float = 0.045
    obstacle_radius: float = 0.2
    food_radius: float = 0.03
    predator_accel: float = 3.0
    prey_accel: float = 4.0
    predator_max_speed: float = 1.0
    prey_max_speed: float = 1.3
    landmark_min_sep: float = 0.4
    contact_tol: float = 1e-3

    @classmethod
    def from_dict(cls, overrides: dict) -> "PhysicsParams":
        bad = set(overrides) - set(cls.__dataclass_fields__)
        if bad:
            raise KeyError(f"unknown physics keys: {sorted(bad)}")
        return cls(**overrides)

    def radius(self, agent_id: int) -> float:
        return self.prey_radius if agent_id == PREY else self.agent_radius

    def accel(self, agent_id: int) -> float:
        return self.prey_accel if agent_id == PREY else self.predator_accel

    def max_speed(self, agent_id: int) -> float:
        return self.prey_max_speed if agent_id == PREY else self.predator_max_speed


def task_layout(task: str) -> tuple[int, int]:
    """(n_obstacles, n_food) for a task id."""
    if task == SIMPLE_TAG:
        return 2, 0
    if task == SIMPLE_WORLD:
        return 1, 2
    raise ValueError(f"unknown task {task!r}")


def obs_dim(task: str, agent_id: int) -> int:
    if task == SIMPLE_TAG:
        return 14 if agent_id == PREY else 16
    return 16 if agent_id == PREY else 24


@dataclass
class WorldState:
    task: str
    pos: np.ndarray  # (4, 2) predators 0..2, prey 3
    vel: np.ndarray  # (4, 2)
    obstacles: np.ndarray  # (n_obstacles, 2)
    food: np.ndarray  # (n_food, 2)
    t: int = 1
    done: bool = False
    seed: int | None = None
    params: PhysicsParams = field(default_factory=PhysicsParams)


def _project_out_of_obstacles(pos: np.ndarray, vel: np.ndarray, obstacles: np.ndarray, params: PhysicsParams) -> None:
    """Push agents to the obstacle surface, killing inward normal velocity.

    Mutates pos and vel. A few passes handle chained overlaps when
    escaping one obstacle lands an agent inside another.
    """
    if len(obstacles) == 0:
        return
    for _ in range(16):
        moved = False
        for i in range(N_AGENTS):
            r = params.radius(i) + params.obstacle_radius
            for ob in obstacles:
                delta = pos[i] - ob
                d = float(np.hypot(delta[0], delta[1]))
                if d >= r:
                    continue
                n = delta / d if d > 1e-9 else np.array([1.0, 0.0])
                pos[i] = ob + n * r
                vn = float(vel[i] @ n)
                if vn < 0.0:
                    vel[i] = vel[i] - vn * n
                moved = True
        if not moved:
            return


def reset(task: str, seed: int, params: PhysicsParams | None = None) -> WorldState:
    """Sample a fresh episode. Same seed gives a bitwise-identical state."""
    params = params or PhysicsParams()
    n_obstacles, n_food = task_layout(task)
    rng = np.random.default_rng(seed)
    landmarks: list[np.ndarray] = []
    for _ in range(n_obstacles + n_food):
        for _attempt in range(1000):
            cand = rng.uniform(-1.0, 1.0, size=2)
            if all(np.hypot(*(cand - q)) >= params.landmark_min_sep for q in landmarks):
                landmarks.append(cand)
                break
        else:
            raise RuntimeError("landmark placement failed")
    obstacles = np.array(landmarks[:n_obstacles]).reshape(n_obstacles, 2)
    food = np.array(landmarks[n_obstacles:]).reshape(n_food, 2)
    pos = rng.uniform(-1.0, 1.0, size=(N_AGENTS, 2))
    vel = np.zeros((N_AGENTS, 2))
    _project_out_of_obstacles(pos, vel, obstacles, params)
    return WorldState(task=task, pos=pos, vel=vel, obstacles=obstacles, food=food, t=1, seed=seed, params=params)


def _contact_force(delta: np.ndarray, dist: float, min_dist: float, params: PhysicsParams) -> np.ndarray:
    """Soft overlap repulsion along delta; smooth in the gap via logaddexp."""
    k = params.contact_margin
    penetration = np.logaddexp(0.0, -(dist - min_dist) / k) * k
    direction = delta / dist if dist > 1e-9 else np.array([1.0, 0.0])
    return params.contact_force * penetration * direction


def predator_collisions(state: WorldState) -> list[int]:
    """Predator indices currently overlapping the prey."""
    p = state.params
    hits = []
    for i in range(N_PREDATORS):
        d = float(np.hypot(*(state.pos[i] - state.pos[PREY])))
        if d < p.agent_radius + p.prey_radius:
            hits.append(i)
    return hits


def food_contacts(state: WorldState) -> int:
    p = state.params
    n = 0
    for f in state.food:
        if float(np.hypot(*(state.pos[PREY] - f))) < p.prey_radius + p.food_radius:
            n += 1
    return n


def boundary_penalty(pos: np.ndarray) -> float:
    """Escalating per-coordinate penalty once |x| passes 0.9, capped at 10."""
    total = 0.0
    for x in np.abs(pos):
        if x > 0.9:
            total += min(np.exp(2.0 * (x - 0.9)) - 1.0, 10.0)
    return float(total)


def compute_rewards(state: WorldState) -> np.ndarray:
    """Per-agent rewards [pred0, pred1, pred2, prey] on the current state."""
    p = state.params
    hits = predator_collisions(state)
    n_coll = len(hits)
    dists = np.hypot(
        state.pos[:N_PREDATORS, 0] - state.pos[PREY, 0],
        state.pos[:N_PREDATORS, 1] - state.pos[PREY, 1],
    )
    rewards = np.zeros(N_AGENTS)
    if state.task == SIMPLE_TAG:
        for i in range(N_PREDATORS):
            rewards[i] = 10.0 if i in hits else -dists[i]
        rewards[PREY] = 0.1 * dists.sum() - 10.0 * n_coll
    else:
        # one catch pays the whole team
        for i in range(N_PREDATORS):
            rewards[i] = 5.0 * n_coll if n_coll else -dists[i]
        rewards[PREY] = 0.1 * dists.sum() - 5.0 * n_coll + 2.0 * food_contacts(state)
    rewards[PREY] -= boundary_penalty(state.pos[PREY])
    return rewards


def step(state: WorldState, actions: np.ndarray) -> tuple[WorldState, np.ndarray, bool]:
    """Advance one tick; returns (next state, rewards, done)."""
    if state.done:
        raise EpisodeOver(f"episode ended at t={state.t}")
    p = state.params
    a = np.clip(np.asarray(actions, dtype=np.float64).reshape(N_AGENTS, 2), -1.0, 1.0)
    force = a * np.array([[p.accel(i)] for i in range(N_AGENTS)])

    for i in range(N_AGENTS):
        for j in range(i + 1, N_AGENTS):
            delta = state.pos[i] - state.pos[j]
            d = float(np.hypot(delta[0], delta[1]))
            f = _contact_force(delta, d, p.radius(i) + p.radius(j), p)
            force[i] += f
            force[j] -= f
        for ob in state.obstacles:
            delta = state.pos[i] - ob
            d = float(np.hypot(delta[0], delta[1]))
            force[i] += _contact_force(delta, d, p.radius(i) + p.obstacle_radius, p)

    vel = state.vel * (1.0 - p.damping) + force * p.dt
    for i in range(N_AGENTS):
        speed = float(np.hypot(vel[i, 0], vel[i, 1]))
        cap = p.max_speed(i)
        if speed > cap:
            vel[i] *= cap / speed
    pos = state.pos + vel * p.dt
    _project_out_of_obstacles(pos, vel, state.obstacles, p)

    done = state.t == EPISODE_LEN
    nxt = replace(state, pos=pos, vel=vel, t=min(state.t + 1, EPISODE_LEN), done=done)
    rewards = compute_rewards(nxt)
    return nxt, rewards, done


def observe(state: WorldState, agent_id: int) -> np.ndarray:
    """Flat observation; every relative quantity is target minus self."""
    if not 0 <= agent_id < N_AGENTS:
        raise ValueError(f"bad agent id {agent_id}")
    pos = state.pos[agent_id]
    others = [j for j in range(N_AGENTS) if j != agent_id]
    parts = [state.vel[agent_id], pos]
    parts += [ob - pos for ob in state.obstacles]
    parts += [f - pos for f in state.food]
    parts += [state.pos[j] - pos for j in others]
    if state.task == SIMPLE_TAG:
        if agent_id != PREY:
            parts.append(state.vel[PREY])
    elif agent_id != PREY:
        parts += [state.vel[j] for j in others]
        dist_prey = np.hypot(*(state.pos[PREY] - pos))
        in_bounds = float(np.all(np.abs(state.pos[PREY]) <= 1.0))
        parts.append(np.array([dist_prey, in_bounds]))
    out = np.concatenate(parts)
    expected = obs_dim(state.task, agent_id)
    if out.shape != (expected,):
        raise AssertionError(f"observation dim {out.shape} != {expected}")
    return out


def observe_predators(state: WorldState) -> np.ndarray:
    return np.stack([observe(state, i) for i in range(N_PREDATORS)])
