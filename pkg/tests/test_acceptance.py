"""Acceptance gates for the whole package: numerics, causality, architecture,
wiring, optimization, environment, belief consistency, robustness orderings,
and end-to-end reproducibility, each with a pinned threshold and budget.

The closed-loop criteria (7-10) share one expert dataset and one trained
model per variant via session fixtures; their training recipe is sized for a
single CPU.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from sctlab import autodiff as ad
from sctlab import cli, env
from sctlab.dataset import WindowBatch, generate, sample_window
from sctlab.evaluation import blend_sweep, measure_anchors, rollout_eval
from sctlab.gradcheck import grad_check
from sctlab.models import ModelConfig, SequenceModel, make_model
from sctlab.policies import PredatorTeam, make_prey_policy
from sctlab.training import TrainConfig, overfit_probe, train
from sctlab.transformer import TransformerConfig, TransformerCore

TASK = "simple-tag"

# shared closed-loop fixtures: dataset size and training recipe
DATA_TRANSITIONS = 25000
DATA_SEED = 11
TRAIN_STEPS = 500
TRAIN_BATCH = 48
TRAIN_LR = 3e-4
TRAIN_WARMUP = 120
EVAL_EPISODES = 100


class budget:
    """Asserts the block stays under its pinned wall-clock budget."""

    def __init__(self, seconds: float):
        self.seconds = seconds

    def __enter__(self):
        self.t0 = time.time()
        return self

    def __exit__(self, *exc):
        if exc[0] is None:
            elapsed = time.time() - self.t0
            assert elapsed < self.seconds, f"took {elapsed:.1f}s, budget {self.seconds}s"


def shift_relu_biases(params) -> None:
    # keep ReLU preactivations away from 0 so central differences are valid
    for name, t in params.items():
        if name.endswith(".b1") or (name.startswith("fc") and name.endswith(".b")):
            t.data = t.data + 0.5 * (-1.0) ** np.arange(t.data.size)


def synthetic_window(rng, B=2, L=5, obs_dim=6, lengths=None):
    if lengths is None:
        lengths = np.full(B, L)
    mask = (np.arange(L)[None, :] < lengths[:, None]).astype(np.float64)
    return WindowBatch(
        rtg=rng.normal(size=(B, L)),
        obs=rng.normal(size=(B, L, 3, obs_dim)),
        prey_actions=rng.uniform(-1, 1, size=(B, L, 2)),
        pred_actions=rng.uniform(-1, 1, size=(B, L, 3, 2)),
        timesteps=np.tile(np.arange(L), (B, 1)),
        mask=mask,
        lengths=np.asarray(lengths),
    )


# --- 1. gradient correctness ---


def test_gradients_primitives_block_and_full_loss():
    with budget(60):
        rng = np.random.default_rng(0)

        def check(n_tensors, shapes, build, tol=1e-6, shift=None):
            """Fixed leaf tensors, graph rebuilt per call: the finite-difference
            contract of grad_check."""
            ts = [
                ad.Tensor(rng.normal(size=shape) + (shift[i] if shift else 0.0), requires_grad=True)
                for i, shape in enumerate(shapes[:n_tensors])
            ]
            params = {f"t{i}": t for i, t in enumerate(ts)}
            worst = grad_check(lambda: build(*ts), params, rng=np.random.default_rng(1))
            assert worst < tol, f"rel err {worst:.2e} >= {tol}"

        # (a) one probe per primitive, each against 1e-6
        check(2, [(3, 4), (4, 2)], lambda a, b: ad.tsum(ad.matmul(a, b)))
        check(3, [(3, 4), (4,), (3, 1)], lambda a, b, c: ad.tsum(ad.mul(ad.add(a, b), c)))
        check(2, [(5,), (5,)], lambda a, b: ad.tsum(ad.sub(a, b)))
        check(1, [(40,)], lambda a: ad.tsum(ad.relu(a)), shift=[0.5])
        check(1, [(4, 3)], lambda a: ad.tsum(ad.square(ad.tanh(a))))
        check(2, [(3, 5), (3, 5)], lambda a, w: ad.tsum(ad.mul(ad.softmax_rows(a), w)))
        check(3, [(3, 6), (6,), (6,)], lambda a, g, b: ad.tsum(ad.square(ad.layer_norm(a, g, b))), shift=[0, 1.0, 0])
        check(1, [(7, 4)], lambda e: ad.tsum(ad.square(ad.embedding(e, np.array([[0, 3], [3, 6]])))))
        check(1, [(2, 6, 3)], lambda a: ad.tsum(ad.square(ad.index_select(a, 1, np.array([1, 4])))))
        check(2, [(2, 3), (2, 2)], lambda a, b: ad.tsum(ad.square(ad.concat([a, b], axis=-1))))
        check(2, [(2, 3), (2, 3)], lambda a, b: ad.tsum(ad.square(ad.stack([a, b], axis=1))))
        check(1, [(2, 3, 4)], lambda a: ad.tsum(ad.square(ad.transpose(a, (2, 0, 1)))))
        check(1, [(2, 6)], lambda a: ad.tsum(ad.square(ad.reshape(a, (3, 4)))))
        check(1, [(3, 4)], lambda a: ad.tsum(ad.tmean(ad.square(a), axis=1)))

        # (b) one full transformer block at d=8
        core = TransformerCore(
            TransformerConfig(d_model=8, n_layers=1, n_heads=1, context_len=6, dropout=0.0),
            [("x", 3), ("y", 2)], seed=2,
        )
        shift_relu_biases(core.params)
        values = {"x": rng.normal(size=(2, 4, 3)), "y": rng.normal(size=(2, 4, 2))}
        ts = np.tile(np.arange(4), (2, 1))

        def block_loss():
            return ad.tsum(ad.square(core.forward(core.embed_steps(values, ts))))

        assert grad_check(block_loss, core.params, rng=np.random.default_rng(3)) < 1e-4

        # (c) the full SCT loss on a synthetic masked batch
        tf = TransformerConfig(d_model=8, n_layers=2, n_heads=1, context_len=20)
        model = SequenceModel(ModelConfig(kind="sct", env_id="e", obs_dim=6, transformer=tf), seed=4)
        shift_relu_biases(model.params)
        wb = synthetic_window(np.random.default_rng(13), lengths=np.array([5, 3]))

        def sct_loss():
            return model.loss(wb)[0]

        assert grad_check(sct_loss, model.params, rng=np.random.default_rng(5)) < 1e-4


# --- 2. causality ---


def test_causality_exact_and_prefix_consistent():
    with budget(60):
        mods = [("r", 1), ("o", 4), ("a", 2)]
        M = len(mods)
        L = 6
        for trial in range(50):
            rng = np.random.default_rng(100 + trial)
            core = TransformerCore(
                TransformerConfig(d_model=8, n_layers=2, n_heads=1, context_len=L, dropout=0.0),
                mods, seed=trial,
            )
            values = {name: rng.normal(size=(1, L, dim)) for name, dim in mods}
            ts = np.arange(L)[None, :]
            with ad.no_grad():
                base = core.forward(core.embed_steps(values, ts)).data
                step = rng.integers(0, L)
                mod_i = rng.integers(0, M)
                name, dim = mods[mod_i]
                bumped = {k: v.copy() for k, v in values.items()}
                bumped[name][0, step] += rng.normal(size=dim)
                out = core.forward(core.embed_steps(bumped, ts)).data
            j = step * M + mod_i
            assert np.array_equal(base[0, :j], out[0, :j]), "past tokens moved"
            assert not np.array_equal(base[0, j], out[0, j])

        # prefix consistency: running a prefix alone matches the sliced full run
        rng = np.random.default_rng(7)
        core = TransformerCore(
            TransformerConfig(d_model=8, n_layers=2, n_heads=1, context_len=L, dropout=0.0),
            mods, seed=9,
        )
        values = {name: rng.normal(size=(1, L, dim)) for name, dim in mods}
        prefix = {name: v[:, :3] for name, v in values.items()}
        with ad.no_grad():
            full = core.forward(core.embed_steps(values, np.arange(L)[None, :])).data
            part = core.forward(core.embed_steps(prefix, np.arange(3)[None, :])).data
        assert np.max(np.abs(full[:, : 3 * M] - part)) < 1e-12


# --- 3. architecture conformance ---


def test_architecture_dimensions_conform():
    ds_stub = TransformerConfig()
    assert ds_stub.d_model == 128 and ds_stub.n_layers == 3
    assert ds_stub.n_heads == 1 and ds_stub.context_len == 20

    full = {
        kind: SequenceModel(ModelConfig(kind=kind, env_id=TASK, obs_dim=16, transformer=TransformerConfig()))
        for kind in ("sct", "cmadt", "madt")
    }
    assert full["sct"].tokens_per_step == 8
    assert full["cmadt"].tokens_per_step == 8
    assert full["madt"].tokens_per_step == 7
    assert full["sct"].params["belief.w"].shape == (3 * 128, 2)
    assert full["cmadt"].params["belief.w"].shape == (3 * 128, 2)
    assert "belief.w" not in full["madt"].params
    assert full["sct"].params["action1.w"].shape == (2 * 128, 2)
    assert full["madt"].params["action1.w"].shape == (128, 2)
    # feed-forward widening d_f = 4*d = 512
    assert full["sct"].params["block0.w1"].shape == (128, 512)

    assert env.obs_dim(TASK, env.PREY) == 14
    assert env.obs_dim(TASK, 0) == 16
    assert env.obs_dim("simple-world", 0) == 24
    assert env.EPISODE_LEN == 25


# --- 4. wiring discriminator ---


def test_conjecture_override_splits_sct_from_cmadt():
    with budget(60):
        tf = TransformerConfig(d_model=16, n_layers=1, n_heads=1, context_len=8, dropout=0.1)
        for trial in range(100):
            rng = np.random.default_rng(1000 + trial)
            kind = ("sct", "cmadt")[trial % 2]
            model = SequenceModel(
                ModelConfig(kind=kind, env_id=TASK, obs_dim=16, transformer=tf), seed=trial
            )
            agent = model.make_agent(rtg_target=float(rng.normal()))
            for _ in range(rng.integers(1, 5)):
                agent.act(rng.normal(size=(3, 16)))
                agent.post_step(float(rng.normal()))
            obs = rng.normal(size=(3, 16))
            frozen = agent.clone()
            base_actions, _ = frozen.act(obs)
            frozen2 = agent.clone()
            override = rng.uniform(-1, 1, size=2)
            forced_actions, conj = frozen2.act(obs, conjecture_override=override)
            assert np.array_equal(conj, override)
            if kind == "sct":
                assert not np.array_equal(base_actions, forced_actions)
            else:
                assert np.array_equal(base_actions, forced_actions)


# --- 5. optimization sanity ---


def test_overfit_probe_memorizes_two_episodes():
    with budget(300):
        ds = generate(TASK, "expert", n_transitions=2 * env.EPISODE_LEN, seed=3)
        tf = TransformerConfig(d_model=16, n_layers=1, n_heads=1, context_len=8, dropout=0.1)
        probe = dict(max_steps=10000, batch=8, lr=3e-3, seed=0, stop_below=1e-3)
        sct = make_model("sct", ds, tf_cfg=tf, seed=0)
        assert overfit_probe(sct, ds, **probe) < 1e-3
        madt = make_model("madt", ds, tf_cfg=tf, seed=0)
        assert overfit_probe(madt, ds, **probe) < 1e-3
        bc = make_model("bc", ds, seed=0)
        assert overfit_probe(bc, ds, **probe) < 1e-3


# --- 6. environment properties ---


def test_environment_properties():
    with budget(120):
        ds = generate(TASK, "random", n_transitions=500, seed=21)
        for ep in ds.episodes:
            team = ep.rewards[:, :3].sum(axis=1)
            # exact rtg recursion, including the terminal step
            assert ep.rtg[-1] == team[-1]
            for t in range(len(team) - 1):
                assert ep.rtg[t] == ep.rtg[t + 1] + team[t]

        ds2 = generate(TASK, "random", n_transitions=500, seed=21)
        assert np.array_equal(ds.episodes[0].obs, ds2.episodes[0].obs)
        ds3 = generate(TASK, "random", n_transitions=500, seed=22)
        assert not np.array_equal(ds.episodes[0].obs, ds3.episodes[0].obs)

        def clear_state(task):
            n_obst, n_food = env.task_layout(task)
            return env.WorldState(
                task=task,
                pos=np.array([[0.05, 0.0], [0.0, 0.6], [-0.6, 0.0], [0.0, 0.0]]),
                vel=np.zeros((4, 2)),
                obstacles=np.array([[5.0, 5.0], [5.0, -5.0]])[:n_obst],
                food=np.array([[-5.0, 5.0], [-5.0, -5.0]])[:n_food],
            )

        tag = clear_state(TASK)
        r = env.compute_rewards(tag)
        shaping = 0.1 * sum(np.hypot(*(tag.pos[i] - tag.pos[3])) for i in range(3))
        assert r[0] == 10.0 and r[3] == pytest.approx(shaping - 10.0)

        world = clear_state("simple-world")
        r = env.compute_rewards(world)
        assert all(r[i] == 5.0 for i in range(3))
        shaping = 0.1 * sum(np.hypot(*(world.pos[i] - world.pos[3])) for i in range(3))
        assert r[3] == pytest.approx(shaping - 5.0)

        world.pos[0] = [0.6, 0.6]  # break contact; park prey on food
        world.food[0] = [0.0, 0.0]
        r = env.compute_rewards(world)
        shaping = 0.1 * sum(np.hypot(*(world.pos[i] - world.pos[3])) for i in range(3))
        assert r[3] == pytest.approx(shaping + 2.0)

        for task in (TASK, "simple-world"):
            for seed in range(5):
                st = env.reset(task, seed=seed)
                rng = np.random.default_rng(seed)
                while not st.done:
                    st, _, _ = env.step(st, rng.uniform(-1, 1, size=(4, 2)))
                    for i in range(4):
                        reach = st.params.radius(i) + st.params.obstacle_radius
                        for ob in st.obstacles:
                            assert reach - np.hypot(*(st.pos[i] - ob)) <= 1e-3


# --- shared closed-loop fixtures (criteria 7-10) ---
#
# One dataset and one trained model per variant serve criteria 7-10. Each
# fixture reports its own wall-clock cost so every criterion can assert an
# inclusive budget over exactly the pipeline it depends on, without paying
# twice for work another criterion shares.


@pytest.fixture(scope="session")
def expert_data():
    t0 = time.time()
    ds = generate(TASK, "expert", n_transitions=DATA_TRANSITIONS, seed=DATA_SEED)
    return ds, time.time() - t0


def _train_variant(kind, ds):
    cfg = TrainConfig(
        batch=TRAIN_BATCH, steps_per_epoch=TRAIN_STEPS, epochs=1,
        lr=TRAIN_LR, wd=1e-4, warmup=TRAIN_WARMUP, seed=0, desk_scale_factor=5,
    )
    model = make_model(kind, ds, seed=0)
    t0 = time.time()
    result = train(model, ds, cfg)
    assert not result.aborted
    return model, time.time() - t0


@pytest.fixture(scope="session")
def trained_sct(expert_data):
    return _train_variant("sct", expert_data[0])


@pytest.fixture(scope="session")
def trained_madt(expert_data):
    return _train_variant("madt", expert_data[0])


@pytest.fixture(scope="session")
def anchors():
    return measure_anchors(TASK, n_episodes=EVAL_EPISODES, seed=0)


# --- 7. belief consistency ---


@pytest.mark.slow
def test_belief_consistency_thresholds(expert_data, trained_sct):
    model, train_s = trained_sct
    t0 = time.time()
    vs_expert = rollout_eval(model, "expert", TASK, n_episodes=EVAL_EPISODES, seed=1)
    vs_still = rollout_eval(model, "still", TASK, n_episodes=EVAL_EPISODES, seed=1)
    eval_s = time.time() - t0
    # budget covers this criterion's whole pipeline: data, training, evals
    assert expert_data[1] + train_s + eval_s < 900
    print(f"accuracy vs expert {vs_expert.accuracy_mean:.3f}, vs still {vs_still.accuracy_mean:.3f}")
    assert vs_expert.accuracy_mean >= 0.9 and vs_still.accuracy_mean >= 0.95, (
        f"accuracy vs expert {vs_expert.accuracy_mean:.3f} (bar 0.9), "
        f"vs still {vs_still.accuracy_mean:.3f} (bar 0.95)"
    )


# --- 8. blend mixture law ---


@pytest.mark.slow
def test_blend_accuracy_mixture_law(trained_sct):
    # budget covers the mixture-law measurement on the already-trained model
    with budget(600):
        acc = {}
        for p in (1.0, 0.7, 0.5, 0.3, 0.0):
            rep = rollout_eval(trained_sct[0], f"blend:{p}", TASK, n_episodes=EVAL_EPISODES, seed=2)
            acc[p] = rep.accuracy_mean
    for p in (0.3, 0.5, 0.7):
        mixture = p * acc[1.0] + (1 - p) * acc[0.0]
        assert abs(acc[p] - mixture) <= 0.15, f"p={p}: acc {acc[p]:.3f} vs mixture {mixture:.3f}"


# --- 9. degradation trend ---


@pytest.mark.slow
def test_madt_blend_sweep_trend(expert_data, trained_madt, anchors):
    model, train_s = trained_madt
    t0 = time.time()
    rows = blend_sweep(model, TASK, n_episodes=EVAL_EPISODES, seed=3, anchors=anchors)
    sweep_s = time.time() - t0
    assert expert_data[1] + train_s + sweep_s < 900
    for r in rows:
        print(f"p={r.p}: score {r.score_mean:.1f} +- {r.score_std:.1f}")
    rises = []
    for a, b in zip(rows, rows[1:]):
        pooled_se = np.hypot(a.score_std, b.score_std) / np.sqrt(EVAL_EPISODES)
        if b.score_mean > a.score_mean + pooled_se:
            rises.append(
                f"p={a.p}->{b.p}: {a.score_mean:.1f} rose to {b.score_mean:.1f} (SE {pooled_se:.1f})"
            )
    assert not rises, "; ".join(rises)


# --- 10. adaptability ordering ---


@pytest.mark.slow
def test_sct_scores_at_least_madt(expert_data, trained_sct, trained_madt, anchors):
    t0 = time.time()
    reports = {
        (kind, opponent): rollout_eval(model, opponent, TASK, n_episodes=EVAL_EPISODES, seed=4, anchors=anchors)
        for kind, model in (("sct", trained_sct[0]), ("madt", trained_madt[0]))
        for opponent in ("still", "blend:0.5")
    }
    eval_s = time.time() - t0
    assert expert_data[1] + trained_sct[1] + trained_madt[1] + eval_s < 1200
    trails = []
    for opponent in ("still", "blend:0.5"):
        sct, madt = reports[("sct", opponent)], reports[("madt", opponent)]
        pooled_se = np.hypot(sct.score_std, madt.score_std) / np.sqrt(EVAL_EPISODES)
        margin = sct.score_mean - madt.score_mean
        print(
            f"vs {opponent}: sct {sct.score_mean:.1f} +- {sct.score_std:.1f}, "
            f"madt {madt.score_mean:.1f} +- {madt.score_std:.1f}, pooled SE {pooled_se:.1f}"
        )
        if margin < -pooled_se:
            trails.append(
                f"vs {opponent}: sct {sct.score_mean:.1f} trails madt {madt.score_mean:.1f} "
                f"by more than pooled SE {pooled_se:.1f}"
            )
    assert not trails, "; ".join(trails)


# --- 11. end-to-end reproducibility ---


def test_pipeline_byte_identical_across_reruns(tmp_path):
    with budget(1800):
        cfg = tmp_path / "run.ini"
        cfg.write_text(
            "[env]\ntask = simple-tag\nlevel = expert\ntransitions = 400\n\n"
            "[model]\nkind = sct\nd_model = 16\nn_layers = 1\ncontext_len = 8\n\n"
            "[train]\nbatch = 8\nsteps_per_epoch = 50\nwarmup = 10\nlr = 0.0003\n\n"
            "[eval]\nepisodes = 4\n"
        )
        outs = []
        for run in ("a", "b"):
            d = tmp_path / run
            d.mkdir()
            assert cli.dispatch([
                "gen-data", "--config", str(cfg), "--seed", "5", "--out", str(d / "ds.jsonl"),
            ]) == 0
            assert cli.dispatch([
                "train", "--config", str(cfg), "--seed", "5", "--data", str(d / "ds.jsonl"),
                "--out", str(d / "ckpt.json"), "--metrics", str(d / "metrics.csv"),
            ]) == 0
            assert cli.dispatch([
                "eval", "--config", str(cfg), "--seed", "5", "--model", str(d / "ckpt.json"),
                "--prey", "blend:0.5", "--anchors", str(d / "anchors.json"),
                "--anchor-episodes", "4", "--out", str(d / "report.json"),
            ]) == 0
            outs.append(d)
        for name in ("ds.jsonl", "ckpt.json", "metrics.csv", "anchors.json", "report.json"):
            a = (outs[0] / name).read_bytes()
            b = (outs[1] / name).read_bytes()
            assert a == b, f"{name} differs between reruns"
