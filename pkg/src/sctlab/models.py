"""Model variants: three head wirings over the shared transformer core, plus
an MLP behavior cloner.

sct   : belief head on concat(h_o1,h_o2,h_o3); each action head reads
        concat(h_prey_act, h_oi), so the current conjecture feeds the
        current decision.
cmadt : belief head identical to sct, but action heads read h_oi alone;
        the conjecture token only informs future steps through attention.
madt  : no prey token, no belief head; action heads on h_oi.
bc    : flattened 20-step observation history through a 3x128 ReLU MLP.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DropoutState, Tensor
from .dataset import Dataset, WindowBatch
from .transformer import TransformerConfig, TransformerCore, _linear

KINDS = ("sct", "cmadt", "madt", "bc")
N_PREDATORS = 3


@dataclass
class LossBreakdown:
    belief_loss: float
    policy_loss: float
    total: float


@dataclass
class NormStats:
    obs_mean: np.ndarray
    obs_std: np.ndarray
    rtg_mean: float
    rtg_std: float
    rtg_target: float

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "NormStats":
        return cls(
            obs_mean=np.asarray(ds.obs_mean, dtype=np.float64),
            obs_std=np.asarray(ds.obs_std, dtype=np.float64),
            rtg_mean=ds.rtg_mean,
            rtg_std=ds.rtg_std,
            rtg_target=ds.mean_episode_return,
        )

    def to_dict(self) -> dict:
        return {
            "obs_mean": self.obs_mean.tolist(),
            "obs_std": self.obs_std.tolist(),
            "rtg_mean": self.rtg_mean,
            "rtg_std": self.rtg_std,
            "rtg_target": self.rtg_target,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            obs_mean=np.asarray(d["obs_mean"], dtype=np.float64),
            obs_std=np.asarray(d["obs_std"], dtype=np.float64),
            rtg_mean=float(d["rtg_mean"]),
            rtg_std=float(d["rtg_std"]),
            rtg_target=float(d["rtg_target"]),
        )


@dataclass
class ModelConfig:
    kind: str
    env_id: str
    obs_dim: int
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    lambda_belief: float = 1.0
    stats: NormStats | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "env_id": self.env_id,
            "obs_dim": self.obs_dim,
            "transformer": self.transformer.to_dict(),
            "lambda_belief": self.lambda_belief,
            "stats": self.stats.to_dict() if self.stats else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            kind=d["kind"],
            env_id=d["env_id"],
            obs_dim=int(d["obs_dim"]),
            transformer=TransformerConfig(**d["transformer"]),
            lambda_belief=float(d["lambda_belief"]),
            stats=NormStats.from_dict(d["stats"]) if d.get("stats") else None,
        )


def _modalities(kind: str, obs_dim: int) -> list[tuple[str, int]]:
    mods = [("rtg", 1), ("obs1", obs_dim), ("obs2", obs_dim), ("obs3", obs_dim)]
    if kind in ("sct", "cmadt"):
        mods.append(("prey_act", 2))
    mods += [("act1", 2), ("act2", 2), ("act3", 2)]
    return mods


class SequenceModel:
    """One of sct / cmadt / madt. Teacher forcing in training windows."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if cfg.kind == "bc":
            raise ValueError("use BcModel for kind=bc")
        self.cfg = cfg
        self.core = TransformerCore(cfg.transformer, _modalities(cfg.kind, cfg.obs_dim), seed)
        d = cfg.transformer.d_model
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 1)))
        heads: dict[str, Tensor] = {}
        if self.has_belief:
            heads["belief.w"] = Tensor(rng.normal(0, 0.02, size=(3 * d, 2)), requires_grad=True)
            heads["belief.b"] = Tensor(np.zeros(2), requires_grad=True)
        act_in = 2 * d if cfg.kind == "sct" else d
        for i in range(1, 4):
            heads[f"action{i}.w"] = Tensor(rng.normal(0, 0.02, size=(act_in, 2)), requires_grad=True)
            heads[f"action{i}.b"] = Tensor(np.zeros(2), requires_grad=True)
        self.heads = heads
        self.params: dict[str, Tensor] = {**self.core.params, **heads}

    @property
    def kind(self) -> str:
        return self.cfg.kind

    @property
    def has_belief(self) -> bool:
        return self.cfg.kind in ("sct", "cmadt")

    @property
    def tokens_per_step(self) -> int:
        return self.core.tokens_per_step

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def _norm_obs(self, obs: np.ndarray) -> np.ndarray:
        s = self.cfg.stats
        return (obs - s.obs_mean) / s.obs_std if s else obs

    def _norm_rtg(self, rtg: np.ndarray) -> np.ndarray:
        s = self.cfg.stats
        return (rtg - s.rtg_mean) / s.rtg_std if s else rtg

    def forward_window(self, wb: WindowBatch, drop: DropoutState | None = None):
        """Returns (belief (B,L,2) or None, actions (B,L,3,2)) as tensors."""
        B, L = wb.rtg.shape
        values = {
            "rtg": self._norm_rtg(wb.rtg)[..., None],
            "act1": wb.pred_actions[:, :, 0],
            "act2": wb.pred_actions[:, :, 1],
            "act3": wb.pred_actions[:, :, 2],
        }
        for i in range(3):
            values[f"obs{i + 1}"] = self._norm_obs(wb.obs[:, :, i])
        if self.has_belief:
            values["prey_act"] = wb.prey_actions
        h = self.core.forward(self.core.embed_steps(values, wb.timesteps), drop)
        M = self.tokens_per_step

        def at(mod: str) -> Tensor:
            j = self.core.mod_index[mod]
            return ad.index_select(h, 1, j + M * np.arange(L))

        h_obs = [at(f"obs{i + 1}") for i in range(3)]
        belief = None
        if self.has_belief:
            belief = ad.tanh(
                _linear(ad.concat(h_obs, axis=-1), self.params["belief.w"], self.params["belief.b"])
            )
        if self.cfg.kind == "sct":
            h_prey = at("prey_act")
            ins = [ad.concat([h_prey, ho], axis=-1) for ho in h_obs]
        else:
            ins = h_obs
        acts = [
            ad.tanh(_linear(ins[i], self.params[f"action{i + 1}.w"], self.params[f"action{i + 1}.b"]))
            for i in range(3)
        ]
        return belief, ad.stack(acts, axis=2)

    def loss(self, wb: WindowBatch, drop: DropoutState | None = None):
        """Squared-L2 per step, averaged over valid steps and batch."""
        belief, acts = self.forward_window(wb, drop)
        count = float(wb.mask.sum())
        diff = ad.sub(acts, wb.pred_actions)
        policy = ad.mul(ad.tsum(ad.mul(ad.square(diff), wb.mask[:, :, None, None])), 1.0 / count)
        if belief is not None:
            bdiff = ad.sub(belief, wb.prey_actions)
            braw = ad.mul(ad.tsum(ad.mul(ad.square(bdiff), wb.mask[:, :, None])), 1.0 / count)
            bweighted = ad.mul(braw, self.cfg.lambda_belief)
            total = ad.add(bweighted, policy)
            breakdown = LossBreakdown(bweighted.item(), policy.item(), total.item())
        else:
            total = policy
            breakdown = LossBreakdown(0.0, policy.item(), total.item())
        return total, breakdown

    def make_agent(self, rtg_target: float | None = None) -> "SequenceAgent":
        return SequenceAgent(self, rtg_target)


def _np_head(x: np.ndarray, w: Tensor, b: Tensor) -> np.ndarray:
    return np.tanh(x @ w.data + b.data)


class SequenceAgent:
    """Closed-loop controller: keeps token history, decrements rtg, acts.

    Deterministic at eval; the conjecture_override hook replaces the
    belief output for the current step (and enters the history).
    """

    def __init__(self, model: SequenceModel, rtg_target: float | None = None):
        self.model = model
        stats = model.cfg.stats
        self.rtg_target = rtg_target if rtg_target is not None else (stats.rtg_target if stats else 0.0)
        self.reset()

    def reset(self, seed: int | None = None) -> None:
        # seed accepted for interface parity with stochastic controllers
        self.rtgs: list[float] = []
        self.obs: list[np.ndarray] = []
        self.preys: list[np.ndarray] = []
        self.acts: list[np.ndarray] = []
        self.rtg_next = self.rtg_target

    def clone(self) -> "SequenceAgent":
        return copy.deepcopy(self)

    def _window_tokens(self, include_current_prey: np.ndarray | None):
        """Token list for the last <=context_len steps; current step is partial."""
        m = self.model
        K = m.cfg.transformer.context_len
        n = len(self.obs)
        start = max(0, n - K)
        tokens = []
        positions: dict[str, int] = {}
        for local, idx in enumerate(range(start, n)):
            current = idx == n - 1
            rtg = m._norm_rtg(np.array([self.rtgs[idx]]))
            tokens.append(("rtg", rtg, local))
            for i in range(3):
                if current:
                    positions[f"obs{i + 1}"] = len(tokens)
                tokens.append((f"obs{i + 1}", m._norm_obs(self.obs[idx][i]), local))
            if current:
                if include_current_prey is not None:
                    positions["prey_act"] = len(tokens)
                    tokens.append(("prey_act", include_current_prey, local))
                break
            if m.has_belief:
                tokens.append(("prey_act", self.preys[idx], local))
            for i in range(3):
                tokens.append((f"act{i + 1}", self.acts[idx][i], local))
        return tokens, positions

    def _hidden(self, tokens) -> np.ndarray:
        with ad.no_grad():
            h = self.model.core.forward(self.model.core.embed_tokens(tokens))
        return h.data[0]

    def act(self, obs3: np.ndarray, conjecture_override: np.ndarray | None = None):
        """Returns (predator actions (3,2), prey conjecture (2,) or None)."""
        m = self.model
        self.rtgs.append(self.rtg_next)
        self.obs.append(np.asarray(obs3, dtype=np.float64))

        tokens, pos = self._window_tokens(include_current_prey=None)
        h1 = self._hidden(tokens)
        h_obs = [h1[pos[f"obs{i + 1}"]] for i in range(3)]

        conjecture = None
        if m.has_belief:
            belief_in = np.concatenate(h_obs)
            conjecture = _np_head(belief_in, m.params["belief.w"], m.params["belief.b"])
            if conjecture_override is not None:
                conjecture = np.asarray(conjecture_override, dtype=np.float64)

        if m.kind == "sct":
            tokens2, pos2 = self._window_tokens(include_current_prey=conjecture)
            h2 = self._hidden(tokens2)
            h_prey = h2[pos2["prey_act"]]
            actions = np.stack(
                [
                    _np_head(
                        np.concatenate([h_prey, h2[pos2[f"obs{i + 1}"]]]),
                        m.params[f"action{i + 1}.w"],
                        m.params[f"action{i + 1}.b"],
                    )
                    for i in range(3)
                ]
            )
        else:
            actions = np.stack(
                [
                    _np_head(h_obs[i], m.params[f"action{i + 1}.w"], m.params[f"action{i + 1}.b"])
                    for i in range(3)
                ]
            )

        if m.has_belief:
            self.preys.append(conjecture)
        self.acts.append(actions)
        return actions, conjecture

    def post_step(self, team_reward: float) -> None:
        """Decrement the conditioning return by the realized team reward."""
        self.rtg_next = self.rtgs[-1] - team_reward


@dataclass
class BcConfig:
    env_id: str
    obs_dim: int
    context_len: int = 20
    hidden: int = 128
    n_hidden: int = 3
    dropout: float = 0.1
    stats: NormStats | None = None
    kind: str = "bc"

    @property
    def input_dim(self) -> int:
        return self.context_len * N_PREDATORS * self.obs_dim

    def to_dict(self) -> dict:
        return {
            "kind": "bc",
            "env_id": self.env_id,
            "obs_dim": self.obs_dim,
            "context_len": self.context_len,
            "hidden": self.hidden,
            "n_hidden": self.n_hidden,
            "dropout": self.dropout,
            "stats": self.stats.to_dict() if self.stats else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BcConfig":
        return cls(
            env_id=d["env_id"],
            obs_dim=int(d["obs_dim"]),
            context_len=int(d["context_len"]),
            hidden=int(d["hidden"]),
            n_hidden=int(d["n_hidden"]),
            dropout=float(d["dropout"]),
            stats=NormStats.from_dict(d["stats"]) if d.get("stats") else None,
        )


class BcModel:
    """MLP cloner on the flattened, zero-front-padded observation history."""

    def __init__(self, cfg: BcConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 2)))
        p: dict[str, Tensor] = {}
        dims = [cfg.input_dim] + [cfg.hidden] * cfg.n_hidden
        for i in range(cfg.n_hidden):
            p[f"fc{i}.w"] = Tensor(rng.normal(0, 0.02, size=(dims[i], dims[i + 1])), requires_grad=True)
            p[f"fc{i}.b"] = Tensor(np.zeros(dims[i + 1]), requires_grad=True)
        p["out.w"] = Tensor(rng.normal(0, 0.02, size=(cfg.hidden, 6)), requires_grad=True)
        p["out.b"] = Tensor(np.zeros(6), requires_grad=True)
        self.params = p

    kind = "bc"

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def _norm_obs(self, obs: np.ndarray) -> np.ndarray:
        s = self.cfg.stats
        return (obs - s.obs_mean) / s.obs_std if s else obs

    def history_array(self, wb: WindowBatch) -> tuple[np.ndarray, np.ndarray]:
        """(B, input_dim) histories and (B, 3, 2) last-step action targets."""
        cfg = self.cfg
        B = wb.batch_size
        hist = np.zeros((B, cfg.context_len, N_PREDATORS, cfg.obs_dim))
        targets = np.zeros((B, N_PREDATORS, 2))
        for b in range(B):
            n = int(wb.lengths[b])
            hist[b, cfg.context_len - n :] = self._norm_obs(wb.obs[b, :n])
            targets[b] = wb.pred_actions[b, n - 1]
        return hist.reshape(B, -1), targets

    def forward(self, x: np.ndarray, drop: DropoutState | None = None) -> Tensor:
        if x.shape[-1] != self.cfg.input_dim:
            raise ValueError(f"input dim {x.shape[-1]} != {self.cfg.input_dim}")
        rate = self.cfg.dropout if drop is not None else 0.0
        h = ad.as_tensor(x)
        for i in range(self.cfg.n_hidden):
            h = ad.relu(_linear(h, self.params[f"fc{i}.w"], self.params[f"fc{i}.b"]))
            if rate > 0.0:
                h = ad.dropout(h, rate, drop.generator(100 + i))
        out = ad.tanh(_linear(h, self.params["out.w"], self.params["out.b"]))
        return ad.reshape(out, (x.shape[0], N_PREDATORS, 2))

    def loss(self, wb: WindowBatch, drop: DropoutState | None = None):
        x, targets = self.history_array(wb)
        pred = self.forward(x, drop)
        diff = ad.sub(pred, targets)
        policy = ad.mul(ad.tsum(ad.square(diff)), 1.0 / x.shape[0])
        return policy, LossBreakdown(0.0, policy.item(), policy.item())

    def make_agent(self, rtg_target: float | None = None) -> "BcAgent":
        return BcAgent(self)


class BcAgent:
    def __init__(self, model: BcModel):
        self.model = model
        self.reset()

    def reset(self, seed: int | None = None) -> None:
        self.obs: list[np.ndarray] = []

    def clone(self) -> "BcAgent":
        return copy.deepcopy(self)

    def act(self, obs3: np.ndarray, conjecture_override=None):
        cfg = self.model.cfg
        self.obs.append(np.asarray(obs3, dtype=np.float64))
        window = self.obs[-cfg.context_len :]
        hist = np.zeros((cfg.context_len, N_PREDATORS, cfg.obs_dim))
        hist[cfg.context_len - len(window) :] = self.model._norm_obs(np.stack(window))
        with ad.no_grad():
            out = self.model.forward(hist.reshape(1, -1))
        return out.data[0], None

    def post_step(self, team_reward: float) -> None:
        pass


CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(model, path, optimizer_state: dict | None = None, extra: dict | None = None) -> None:
    blob = {
        "format": "sctlab-checkpoint",
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "config": model.cfg.to_dict(),
        "params": {k: {"shape": list(t.data.shape), "values": t.data.ravel().tolist()} for k, t in model.params.items()},
        "optimizer": optimizer_state,
        "extra": extra or {},
    }
    with open(path, "w") as f:
        json.dump(blob, f)


def load_checkpoint(path, expect_kind: str | None = None):
    """Returns (model, optimizer_state, extra). Refuses cross-variant loads."""
    with open(path) as f:
        blob = json.load(f)
    if blob.get("format") != "sctlab-checkpoint":
        raise CheckpointError(f"{path}: not a checkpoint file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {blob.get('version')!r}")
    kind = blob["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"{path}: checkpoint is {kind!r}, expected {expect_kind!r}")
    if kind == "bc":
        model = BcModel(BcConfig.from_dict(blob["config"]))
    else:
        model = SequenceModel(ModelConfig.from_dict(blob["config"]))
    saved = blob["params"]
    if set(saved) != set(model.params):
        raise CheckpointError(f"{path}: parameter names do not match the {kind!r} layout")
    for k, t in model.params.items():
        arr = np.asarray(saved[k]["values"], dtype=np.float64).reshape(saved[k]["shape"])
        if arr.shape != t.data.shape:
            raise CheckpointError(f"{path}: shape mismatch for {k}")
        t.data = arr
    return model, blob.get("optimizer"), blob.get("extra", {})


def make_model(kind: str, ds: Dataset, tf_cfg: TransformerConfig | None = None, seed: int = 0, lambda_belief: float = 1.0):
    """Build a fresh model wired for a dataset's task and statistics."""
    stats = NormStats.from_dataset(ds)
    if kind == "bc":
        return BcModel(BcConfig(env_id=ds.env_id, obs_dim=ds.obs_dim, stats=stats), seed)
    cfg = ModelConfig(
        kind=kind,
        env_id=ds.env_id,
        obs_dim=ds.obs_dim,
        transformer=tf_cfg or TransformerConfig(),
        lambda_belief=lambda_belief,
        stats=stats,
    )
    return SequenceModel(cfg, seed)
