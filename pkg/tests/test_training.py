import math

import numpy as np
import pytest

from sctlab.autodiff import Tensor
from sctlab.dataset import generate
from sctlab.models import LossBreakdown, load_checkpoint, make_model
from sctlab.training import (
    CSV_HEADER,
    MetricRow,
    TrainConfig,
    overfit_probe,
    train,
    write_metrics,
)
from sctlab.transformer import TransformerConfig

TINY_TF = TransformerConfig(d_model=16, n_layers=1, n_heads=1, context_len=20, dropout=0.1)


def tiny_dataset(n=500, level="expert", seed=11, task="simple-tag"):
    return generate(task, level, n_transitions=n, seed=seed)


def quick_cfg(**kw):
    base = dict(batch=8, steps_per_epoch=20, epochs=1, lr=1e-3, warmup=10, seed=0, desk_scale_factor=5)
    base.update(kw)
    return TrainConfig(**base)


def test_desk_scale_factor_must_divide_schedule():
    TrainConfig()  # defaults are consistent
    with pytest.raises(ValueError, match="steps_per_epoch"):
        TrainConfig(steps_per_epoch=2001)
    with pytest.raises(ValueError, match="warmup"):
        TrainConfig(warmup=2001)
    assert TrainConfig(epochs=10).total_steps == 20000


def test_lr_zero_leaves_weights_identical():
    ds = tiny_dataset(n=100)
    m = make_model("sct", ds, tf_cfg=TINY_TF, seed=1)
    before = {k: t.data.copy() for k, t in m.params.items()}
    res = train(m, ds, quick_cfg(lr=0.0))
    assert not res.aborted
    assert all(np.array_equal(before[k], m.params[k].data) for k in before)


def test_same_seed_reproduces_metrics_exactly():
    ds = tiny_dataset(n=100)
    lines = []
    for _ in range(2):
        m = make_model("madt", ds, tf_cfg=TINY_TF, seed=3)
        res = train(m, ds, quick_cfg(steps_per_epoch=100, seed=9))
        lines.append([r.csv_line() for r in res.metrics])
    assert lines[0] == lines[1]
    m = make_model("madt", ds, tf_cfg=TINY_TF, seed=3)
    other = train(m, ds, quick_cfg(steps_per_epoch=100, seed=10))
    assert [r.csv_line() for r in other.metrics] != lines[0]


def test_logged_lr_matches_warmup_formula():
    ds = tiny_dataset(n=100)
    m = make_model("madt", ds, tf_cfg=TINY_TF, seed=1)
    res = train(m, ds, quick_cfg(steps_per_epoch=300, lr=2e-4, warmup=250))
    assert [r.step for r in res.metrics] == [100, 200, 300]
    for r in res.metrics:
        assert r.lr == 2e-4 * min(1.0, r.step / 250)


def test_metrics_file_layout(tmp_path):
    rows = [MetricRow(100, 0.5, 1.5, 2.0, 1e-4), MetricRow(200, 0.25, 1.0, 1.25, 1e-4)]
    path = tmp_path / "metrics.csv"
    write_metrics(rows, path)
    text = path.read_text().splitlines()
    assert text[0] == CSV_HEADER
    assert text[1] == "100,0.5,1.5,2.0,0.0001"
    assert len(text) == 3


def test_mismatched_dataset_is_rejected():
    tag = tiny_dataset(n=100)
    world = tiny_dataset(n=100, task="simple-world")
    m = make_model("sct", tag, tf_cfg=TINY_TF, seed=1)
    with pytest.raises(ValueError, match="wired for"):
        train(m, world, quick_cfg())


def test_epoch_checkpoints_carry_progress(tmp_path):
    ds = tiny_dataset(n=100)
    m = make_model("cmadt", ds, tf_cfg=TINY_TF, seed=1)
    out = tmp_path / "ck.json"
    res = train(m, ds, quick_cfg(steps_per_epoch=10, epochs=2), out_path=out)
    assert res.final_step == 20 and res.checkpoint == out
    loaded, opt_state, extra = load_checkpoint(out, expect_kind="cmadt")
    assert extra["step"] == 20 and extra["epoch"] == 2
    assert extra["train_config"]["steps_per_epoch"] == 10
    assert opt_state is not None
    for k in m.params:
        assert np.array_equal(loaded.params[k].data, m.params[k].data)


def test_nan_loss_aborts_and_rolls_back(tmp_path):
    ds = tiny_dataset(n=100)
    m = make_model("madt", ds, tf_cfg=TINY_TF, seed=1)
    orig = m.loss
    calls = 0

    def poisoned(wb, drop=None):
        nonlocal calls
        calls += 1
        if calls == 105:
            bad = float("nan")
            return Tensor(np.array(bad)), LossBreakdown(0.0, bad, bad)
        return orig(wb, drop)

    m.loss = poisoned
    out = tmp_path / "ck.json"
    res = train(m, ds, quick_cfg(steps_per_epoch=300), out_path=out)
    assert res.aborted and res.final_step == 105
    # model rolled back to the step-100 snapshot and saved as such
    loaded, _, extra = load_checkpoint(out)
    assert extra["aborted_at_step"] == 105 and extra["last_good_step"] == 100
    for k in m.params:
        assert np.array_equal(loaded.params[k].data, m.params[k].data)
        assert np.all(np.isfinite(m.params[k].data))


def test_training_is_pure_offline():
    # the loop must touch only the dataset: identical results whether or
    # not any environment object exists elsewhere
    ds = tiny_dataset(n=100)
    m = make_model("madt", ds, tf_cfg=TINY_TF, seed=5)
    res = train(m, ds, quick_cfg(steps_per_epoch=50))
    h1 = [r.csv_line() for r in res.metrics]
    from sctlab import env

    state = env.reset("simple-tag", seed=0)  # unrelated env activity
    env.step(state, np.zeros((4, 2)))
    m2 = make_model("madt", ds, tf_cfg=TINY_TF, seed=5)
    res2 = train(m2, ds, quick_cfg(steps_per_epoch=50))
    assert [r.csv_line() for r in res2.metrics] == h1


def test_sct_loss_halves_at_development_scale():
    ds = tiny_dataset(n=500)
    tf = TransformerConfig(d_model=32, n_layers=2, n_heads=1, context_len=20, dropout=0.1)
    m = make_model("sct", ds, tf_cfg=tf, seed=1)
    cfg = TrainConfig(batch=16, steps_per_epoch=600, epochs=1, lr=1e-3, warmup=100, seed=7, desk_scale_factor=5)
    res = train(m, ds, cfg)
    rows = {r.step: r for r in res.metrics}
    assert rows[600].total <= 0.5 * rows[100].total


def test_overfit_probe_requires_tiny_dataset():
    ds = tiny_dataset(n=500)  # 20 episodes
    m = make_model("sct", ds, tf_cfg=TINY_TF, seed=1)
    with pytest.raises(ValueError, match="10 episodes"):
        overfit_probe(m, ds)


def test_overfit_probe_memorizes_two_episodes():
    tiny = tiny_dataset(n=50, seed=5)
    m = make_model("sct", tiny, tf_cfg=TINY_TF, seed=2)
    final = overfit_probe(m, tiny, max_steps=4000, batch=8, lr=3e-3, stop_below=1e-3)
    assert final < 1e-3
