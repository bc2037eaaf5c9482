"""Offline training loop: window sampling, loss, backward, AdamW, logging.

Training reads only the dataset file; opponent behavior at eval time never
enters this module.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import DropoutState
from .dataset import Dataset, sample_window
from .models import BcModel, save_checkpoint
from .optim import AdamW, NonFiniteGradient, clip_global_norm, zero_grads

CSV_HEADER = "step,belief_loss,policy_loss,total,lr"
LOG_EVERY = 100
GRAD_CLIP = 1.0


@dataclass
class TrainConfig:
    """Defaults are desk scale; multiply steps and warmup by
    desk_scale_factor to recover the full-scale schedule."""

    batch: int = 64
    steps_per_epoch: int = 2000
    epochs: int = 1
    lr: float = 1e-4
    wd: float = 1e-4
    warmup: int = 2000
    seed: int = 0
    desk_scale_factor: int = 5

    def __post_init__(self):
        if self.steps_per_epoch % self.desk_scale_factor:
            raise ValueError("desk_scale_factor must divide steps_per_epoch")
        if self.warmup % self.desk_scale_factor:
            raise ValueError("desk_scale_factor must divide warmup")

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.epochs

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricRow:
    step: int
    belief_loss: float
    policy_loss: float
    total: float
    lr: float

    def csv_line(self) -> str:
        return f"{self.step},{self.belief_loss!r},{self.policy_loss!r},{self.total!r},{self.lr!r}"


def write_metrics(rows: list[MetricRow], path) -> None:
    with open(path, "w") as f:
        f.write(CSV_HEADER + "\n")
        for r in rows:
            f.write(r.csv_line() + "\n")


@dataclass
class TrainResult:
    metrics: list[MetricRow]
    final_step: int
    aborted: bool
    checkpoint: Path | None = None


def _context_len(model) -> int:
    if isinstance(model, BcModel):
        return model.cfg.context_len
    return model.cfg.transformer.context_len


def _check_compatible(model, ds: Dataset) -> None:
    if model.cfg.env_id != ds.env_id or model.cfg.obs_dim != ds.obs_dim:
        raise ValueError(
            f"model is wired for {model.cfg.env_id!r}/dim {model.cfg.obs_dim}, "
            f"dataset is {ds.env_id!r}/dim {ds.obs_dim}"
        )


def train(
    model,
    ds: Dataset,
    cfg: TrainConfig,
    out_path=None,
    metrics_path=None,
    log_fn=None,
    extra_meta: dict | None = None,
) -> TrainResult:
    """Runs the full schedule. On a non-finite loss or gradient the loop
    stops and the last logged parameter snapshot is written to out_path, so
    a divergence never destroys the most recent good state. extra_meta is
    merged into every checkpoint's extra block (provenance)."""
    _check_compatible(model, ds)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 3)))
    drop = DropoutState(cfg.seed)
    opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.wd, warmup_steps=cfg.warmup)
    context_len = _context_len(model)

    snapshot = {k: t.data.copy() for k, t in model.params.items()}
    snapshot_step = 0
    rows: list[MetricRow] = []
    aborted = False
    step = 0
    for step in range(1, cfg.total_steps + 1):
        drop.step = step
        wb = sample_window(ds, cfg.batch, context_len, rng)
        loss, br = model.loss(wb, drop)
        if not math.isfinite(br.total):
            aborted = True
            break
        zero_grads(model.params)
        loss.backward()
        clip_global_norm(model.params, GRAD_CLIP)
        try:
            opt.step()
        except NonFiniteGradient:
            aborted = True
            break
        if step % LOG_EVERY == 0 or step == cfg.total_steps:
            row = MetricRow(step, br.belief_loss, br.policy_loss, br.total, opt.effective_lr(step))
            rows.append(row)
            if log_fn:
                log_fn(row)
            snapshot = {k: t.data.copy() for k, t in model.params.items()}
            snapshot_step = step
        if out_path and step % cfg.steps_per_epoch == 0:
            save_checkpoint(
                model,
                out_path,
                optimizer_state=opt.state_dict(),
                extra={"step": step, "epoch": step // cfg.steps_per_epoch, "train_config": cfg.to_dict(), **(extra_meta or {})},
            )

    if aborted:
        # roll the model back to the last logged state
        for k, t in model.params.items():
            t.data = snapshot[k]
        if out_path:
            save_checkpoint(
                model,
                out_path,
                extra={"aborted_at_step": step, "last_good_step": snapshot_step, "train_config": cfg.to_dict(), **(extra_meta or {})},
            )
    if metrics_path:
        write_metrics(rows, metrics_path)
    return TrainResult(metrics=rows, final_step=step, aborted=aborted, checkpoint=Path(out_path) if out_path else None)


def overfit_probe(
    model,
    ds: Dataset,
    max_steps: int = 10000,
    batch: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
    stop_below: float | None = None,
    plateau_patience: int = 1500,
    plateau_tol: float = 0.01,
) -> float:
    """Memorization sanity check on a tiny dataset, dropout off.

    Stops when the loss plateaus (no relative improvement over the
    patience window), drops below stop_below, or hits max_steps.
    Returns the last total loss.
    """
    if len(ds.episodes) > 10:
        raise ValueError("overfit probe expects at most 10 episodes")
    _check_compatible(model, ds)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 4)))
    opt = AdamW(model.params, lr=lr, weight_decay=0.0, warmup_steps=100)
    context_len = _context_len(model)
    best = math.inf
    best_step = 0
    total = math.inf
    for step in range(1, max_steps + 1):
        wb = sample_window(ds, batch, context_len, rng)
        loss, br = model.loss(wb, drop=None)
        total = br.total
        if not math.isfinite(total):
            break
        zero_grads(model.params)
        loss.backward()
        clip_global_norm(model.params, GRAD_CLIP)
        opt.step()
        if total < best * (1.0 - plateau_tol):
            best = total
            best_step = step
        if stop_below is not None and total < stop_below:
            break
        if step - best_step > plateau_patience:
            break
    return total
