"""Command-line pipeline: gen-data, train, eval, sweep, gradcheck, report.

Settings come from an optional sectioned key=value config file plus flag
overrides (flags win). Logs are one JSON object per line on stderr; results
go to stdout or to --out files only. All randomness is keyed by --seed, with
the SCTLAB_SEED environment variable as a global fallback. Every output
artifact embeds the effective config and the tool version. Exit codes:
0 success, 1 runtime/I-O failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__, env
from .dataset import Dataset, DatasetError, generate, load, save
from .evaluation import (
    DEFAULT_EPISODES,
    DEFAULT_EPS,
    SWEEP_P,
    EvalError,
    blend_sweep,
    load_or_measure_anchors,
    rollout_eval,
)
from .gradcheck import grad_check
from .models import KINDS, CheckpointError, load_checkpoint, make_model
from .policies import DATA_LEVELS, PREY_KINDS, PolicySpec
from .training import TrainConfig, train
from .transformer import TransformerConfig

REPORT_KIND = "sctlab-report"
SWEEP_CSV_HEADER = "p,score_mean,score_std,accuracy,mean_return"
GRADCHECK_TOL = 1e-4

# every config key, by section, with its coercion
CONFIG_SCHEMA: dict[str, dict[str, type]] = {
    "env": {"task": str, "level": str, "transitions": int},
    "model": {
        "kind": str,
        "d_model": int,
        "n_layers": int,
        "n_heads": int,
        "context_len": int,
        "dropout": float,
        "lambda_belief": float,
    },
    "train": {
        "batch": int,
        "steps_per_epoch": int,
        "epochs": int,
        "lr": float,
        "wd": float,
        "warmup": int,
        "desk_scale_factor": int,
    },
    "eval": {"episodes": int, "eps": float, "prey": str, "jobs": int, "rtg_target": float},
}


class ConfigError(Exception):
    pass


def parse_config(path) -> dict[str, dict]:
    """Sectioned key=value text: [env]/[model]/[train]/[eval] headers, one
    key=value per line, # comments. Unknown sections or keys are rejected."""
    tree: dict[str, dict] = {}
    section = None
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in CONFIG_SCHEMA:
                    raise ConfigError(f"{path}:{lineno}: unknown section [{section}]")
                tree.setdefault(section, {})
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            if section is None:
                raise ConfigError(f"{path}:{lineno}: key outside any [section]")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip().strip('"')
            schema = CONFIG_SCHEMA[section]
            if key not in schema:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r} in [{section}]")
            try:
                tree[section][key] = schema[key](value)
            except ValueError as e:
                raise ConfigError(f"{path}:{lineno}: bad value for {section}.{key}: {value!r}") from e
    return tree


def _log(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}), file=sys.stderr, flush=True)


def _resolve_seed(flag_value: int | None) -> int:
    if flag_value is not None:
        return flag_value
    env_value = os.environ.get("SCTLAB_SEED")
    if env_value is not None:
        try:
            return int(env_value)
        except ValueError:
            raise ConfigError(f"SCTLAB_SEED must be an integer, got {env_value!r}") from None
    return 0


def _pick(flag_value, cfg: dict, section: str, key: str, default=None):
    """Flag wins over config file wins over default."""
    if flag_value is not None:
        return flag_value
    return cfg.get(section, {}).get(key, default)


def _require(value, what: str):
    if value is None:
        raise ConfigError(f"{what} is required (flag or config file)")
    return value


def _load_config_arg(args) -> dict[str, dict]:
    return parse_config(args.config) if args.config else {}


def _emit(doc: dict, out_path) -> None:
    text = json.dumps(doc, indent=1)
    if out_path:
        with open(out_path, "w") as f:
            f.write(text + "\n")
        _log("wrote", path=str(out_path))
    else:
        print(text)


def _write_lines(lines: list[str], out_path) -> None:
    text = "\n".join(lines) + "\n"
    if out_path:
        with open(out_path, "w") as f:
            f.write(text)
        _log("wrote", path=str(out_path))
    else:
        print(text, end="")


# --- subcommands ---


def cmd_gen_data(args) -> int:
    cfg = _load_config_arg(args)
    task = _require(_pick(args.env, cfg, "env", "task"), "--env task")
    level = _require(_pick(args.level, cfg, "env", "level"), "--level")
    if task not in (env.SIMPLE_TAG, env.SIMPLE_WORLD):
        raise ConfigError(f"task must be {env.SIMPLE_TAG} or {env.SIMPLE_WORLD}, got {task!r}")
    if level not in DATA_LEVELS:
        raise ConfigError(f"level must be one of {DATA_LEVELS}, got {level!r}")
    transitions = _pick(args.transitions, cfg, "env", "transitions", 50000)
    seed = _resolve_seed(args.seed)
    effective = {"env": {"task": task, "level": level, "transitions": transitions}, "seed": seed}
    _log("gen-data", **effective["env"], seed=seed)
    ds = generate(task, level, transitions, seed)
    save(ds, args.out, meta={"tool_version": __version__, "config": effective})
    _log("wrote", path=str(args.out), episodes=len(ds.episodes))
    print(json.dumps({
        "out": str(args.out),
        "n_transitions": ds.n_transitions,
        "episodes": len(ds.episodes),
        "mean_episode_return": ds.mean_episode_return,
    }))
    return 0


def _transformer_config(cfg: dict) -> TransformerConfig:
    model = cfg.get("model", {})
    kwargs = {k: model[k] for k in ("d_model", "n_layers", "n_heads", "context_len", "dropout") if k in model}
    return TransformerConfig(**kwargs)


def cmd_train(args) -> int:
    cfg = _load_config_arg(args)
    kind = _require(_pick(args.model, cfg, "model", "kind"), "--model kind")
    if kind not in KINDS:
        raise ConfigError(f"model kind must be one of {KINDS}, got {kind!r}")
    seed = _resolve_seed(args.seed)
    ds = load(args.data)
    train_cfg = TrainConfig(
        batch=_pick(args.batch, cfg, "train", "batch", 64),
        steps_per_epoch=_pick(args.steps, cfg, "train", "steps_per_epoch", 2000),
        epochs=_pick(args.epochs, cfg, "train", "epochs", 1),
        lr=_pick(args.lr, cfg, "train", "lr", 1e-4),
        wd=_pick(args.wd, cfg, "train", "wd", 1e-4),
        warmup=_pick(args.warmup, cfg, "train", "warmup", 2000),
        seed=seed,
        desk_scale_factor=_pick(None, cfg, "train", "desk_scale_factor", 5),
    )
    lambda_belief = _pick(None, cfg, "model", "lambda_belief", 1.0)
    model = make_model(kind, ds, tf_cfg=_transformer_config(cfg), seed=seed, lambda_belief=lambda_belief)
    # paths stay out of embedded configs so reruns into fresh directories
    # stay byte-identical
    effective = {
        "model": {"kind": kind, "lambda_belief": lambda_belief, **cfg.get("model", {})},
        "train": train_cfg.to_dict(),
        "data": {"task": ds.env_id, "level": ds.level, "transitions": ds.n_transitions, "seed": ds.seed},
        "seed": seed,
    }
    _log("train", kind=kind, data=str(args.data), total_steps=train_cfg.total_steps, seed=seed)
    result = train(
        model,
        ds,
        train_cfg,
        out_path=args.out,
        metrics_path=args.metrics,
        log_fn=lambda row: _log("metrics", step=row.step, belief_loss=row.belief_loss,
                                policy_loss=row.policy_loss, total=row.total, lr=row.lr),
        extra_meta={"tool_version": __version__, "run_config": effective, "data_level": ds.level},
    )
    summary = {
        "out": str(args.out),
        "final_step": result.final_step,
        "aborted": result.aborted,
        "final_total_loss": result.metrics[-1].total if result.metrics else None,
    }
    _log("trained", **summary)
    print(json.dumps(summary))
    return 1 if result.aborted else 0


def _load_model(path):
    model, _, extra = load_checkpoint(path)
    return model, (extra or {})


def _anchors_for(task: str, args, seed: int):
    return load_or_measure_anchors(task, args.anchors, n_episodes=args.anchor_episodes, seed=seed, jobs=args.jobs)


def cmd_eval(args) -> int:
    cfg = _load_config_arg(args)
    model, extra = _load_model(args.model)
    task = _pick(args.env, cfg, "env", "task", model.cfg.env_id)
    prey = _pick(args.prey, cfg, "eval", "prey", "expert")
    episodes = _pick(args.episodes, cfg, "eval", "episodes", DEFAULT_EPISODES)
    eps = _pick(args.eps, cfg, "eval", "eps", DEFAULT_EPS)
    seed = _resolve_seed(args.seed)
    spec = PolicySpec.parse(prey)
    anchors = _anchors_for(task, args, seed)
    effective = {
        "env": {"task": task},
        "eval": {"episodes": episodes, "eps": eps, "prey": str(spec), "jobs": args.jobs},
        "model": {"kind": model.cfg.kind, "level": extra.get("data_level")},
        "seed": seed,
    }
    _log("eval", model=model.cfg.kind, task=task, prey=str(spec), episodes=episodes, seed=seed)
    rep = rollout_eval(
        model, spec, task, n_episodes=episodes, seed=seed, eps=eps,
        anchors=anchors, jobs=args.jobs, rtg_target=args.rtg_target,
    )
    _log("evaluated", score_mean=rep.score_mean, mean_return=rep.mean_return, accuracy=rep.accuracy_mean)
    _emit({
        "kind": REPORT_KIND,
        "tool_version": __version__,
        "config": effective,
        "model": model.cfg.kind,
        "level": extra.get("data_level"),
        "task": task,
        "report": rep.to_dict(),
    }, args.out)
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config_arg(args)
    model, _ = _load_model(args.model)
    task = _pick(args.env, cfg, "env", "task", model.cfg.env_id)
    episodes = _pick(args.episodes, cfg, "eval", "episodes", DEFAULT_EPISODES)
    eps = _pick(args.eps, cfg, "eval", "eps", DEFAULT_EPS)
    seed = _resolve_seed(args.seed)
    try:
        p_list = tuple(float(p) for p in args.p.split(","))
    except ValueError:
        raise ConfigError(f"--p wants comma-separated rates, got {args.p!r}") from None
    anchors = _anchors_for(task, args, seed)
    effective = {
        "env": {"task": task},
        "eval": {"episodes": episodes, "eps": eps, "jobs": args.jobs},
        "model": {"kind": model.cfg.kind},
        "p": list(p_list),
        "seed": seed,
    }
    _log("sweep", model=model.cfg.kind, task=task, p=list(p_list), episodes=episodes, seed=seed)
    rows = blend_sweep(model, task, p_list=p_list, n_episodes=episodes, seed=seed,
                       eps=eps, anchors=anchors, jobs=args.jobs)
    lines = [
        "# " + json.dumps({"kind": "sctlab-sweep", "tool_version": __version__, "config": effective}),
        SWEEP_CSV_HEADER,
    ]
    for r in rows:
        acc = "" if r.accuracy is None else repr(r.accuracy)
        lines.append(f"{r.p!r},{r.score_mean!r},{r.score_std!r},{acc},{r.mean_return!r}")
    _write_lines(lines, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .dataset import sample_window

    seed = _resolve_seed(args.seed)
    if args.kind not in KINDS:
        raise ConfigError(f"--kind must be one of {KINDS}, got {args.kind!r}")
    ds = generate("simple-tag", "random", n_transitions=100, seed=seed)
    tf = TransformerConfig(d_model=16, n_layers=2, n_heads=1, context_len=8, dropout=0.0)
    model = make_model(args.kind, ds, tf_cfg=tf, seed=seed)
    for name, t in model.params.items():
        # keep ReLU preactivations away from 0 so central differences are valid
        if name.endswith(".b1") or (name.startswith("fc") and name.endswith(".b")):
            t.data = t.data + 0.5 * (-1.0) ** np.arange(t.data.size)
    rng = np.random.default_rng(seed)
    wb = sample_window(ds, 2, 6 if args.kind != "bc" else 20, rng)

    def f():
        return model.loss(wb)[0]

    h = 1e-4 if args.kind == "bc" else 1e-5
    worst = grad_check(f, model.params, h=h, rng=rng)
    ok = worst <= GRADCHECK_TOL
    print(json.dumps({"kind": args.kind, "max_rel_err": worst, "threshold": GRADCHECK_TOL, "ok": ok}))
    return 0 if ok else 1


def _opponent_sort_key(name: str) -> tuple:
    order = {"expert": 0, "alt-expert": 1, "still": 2, "random": 3}
    if name in order:
        return (0, order[name], 0.0)
    if name.startswith("blend"):
        p = float(name.split(":", 1)[1]) if ":" in name else -1.0
        return (1, 0, -p)
    return (2, 0, 0.0)


def _row_sort_key(row: tuple[str, str]) -> tuple:
    level, kind = row
    levels = {lv: i for i, lv in enumerate(DATA_LEVELS)}
    kinds = {k: i for i, k in enumerate(KINDS)}
    return (levels.get(level, len(levels)), level, kinds.get(kind, len(kinds)), kind)


def cmd_report(args) -> int:
    docs = []
    for path in args.reports:
        with open(path) as f:
            doc = json.load(f)
        if doc.get("kind") != REPORT_KIND:
            raise ConfigError(f"{path}: not a {REPORT_KIND} file")
        docs.append((path, doc))
    tasks = {doc["task"] for _, doc in docs}
    if len(tasks) != 1:
        raise ConfigError(f"reports span multiple tasks: {sorted(tasks)}")
    anchor_dicts = [doc["report"].get("anchors") for _, doc in docs]
    if any(a is None for a in anchor_dicts):
        raise ConfigError("every report needs anchors for a score table")
    if any(a != anchor_dicts[0] for a in anchor_dicts[1:]):
        raise ConfigError("reports carry inconsistent anchors; regenerate against one anchor set")

    cells: dict[tuple[str, str], dict[str, str]] = {}
    for path, doc in docs:
        row = (doc.get("level") or "-", doc["model"])
        col = doc["report"]["opponent"]
        if col in cells.get(row, {}):
            raise ConfigError(f"{path}: duplicate cell for {row} vs {col!r}")
        mean, std = doc["report"]["score_mean"], doc["report"]["score_std"]
        cells.setdefault(row, {})[col] = f"{mean:.1f}±{std:.1f}"

    columns = sorted({c for by_col in cells.values() for c in by_col}, key=_opponent_sort_key)
    lines = ["# " + json.dumps({
        "kind": "sctlab-table",
        "tool_version": __version__,
        "task": tasks.pop(),
        "anchors": anchor_dicts[0],
        "inputs": [str(p) for p in args.reports],
    })]
    lines.append(",".join(["level", "model"] + columns))
    for row in sorted(cells, key=_row_sort_key):
        level, kind = row
        lines.append(",".join([level, kind] + [cells[row].get(c, "") for c in columns]))
    _write_lines(lines, args.out)
    return 0


# --- parser / dispatch ---


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sctlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"sctlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="sectioned key=value config file")
        p.add_argument("--seed", type=int, help="global seed (fallback: SCTLAB_SEED, then 0)")

    p = sub.add_parser("gen-data", help="roll out scripted teams into a dataset file")
    common(p)
    p.add_argument("--env", choices=(env.SIMPLE_TAG, env.SIMPLE_WORLD))
    p.add_argument("--level", choices=DATA_LEVELS)
    p.add_argument("--transitions", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset file")
    common(p)
    p.add_argument("--model", help=f"one of {', '.join(KINDS)}")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="CSV metrics path")
    p.add_argument("--batch", type=int)
    p.add_argument("--steps", type=int, help="steps per epoch")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--wd", type=float)
    p.add_argument("--warmup", type=int)
    p.set_defaults(fn=cmd_train)

    def eval_common(p):
        common(p)
        p.add_argument("--model", required=True, help="checkpoint path")
        p.add_argument("--env", choices=(env.SIMPLE_TAG, env.SIMPLE_WORLD), help="defaults to the checkpoint's task")
        p.add_argument("--episodes", type=int)
        p.add_argument("--eps", type=float, help="conjecture hit radius")
        p.add_argument("--anchors", help="anchor cache path (JSON sidecar)")
        p.add_argument("--anchor-episodes", type=int, default=DEFAULT_EPISODES)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--out")

    p = sub.add_parser("eval", help="closed-loop evaluation against a prey spec")
    eval_common(p)
    p.add_argument("--prey", help=f"{', '.join(k for k in PREY_KINDS if k != 'blend')}, blend:P, medium:S")
    p.add_argument("--rtg-target", type=float, help="override the dataset return-to-go target")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="degradation curve over blend rates")
    eval_common(p)
    p.add_argument("--p", default=",".join(str(p) for p in SWEEP_P), help="comma-separated blend rates")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of a small model's loss gradient")
    common(p)
    p.add_argument("--kind", default="sct", help=f"one of {', '.join(KINDS)}")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("report", help="pivot eval reports into a score table")
    p.add_argument("reports", nargs="+", metavar="report.json")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)

    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (OSError, DatasetError, CheckpointError, EvalError, json.JSONDecodeError) as e:
        _log("error", error=str(e), exit=1)
        return 1
    except (ConfigError, ValueError) as e:
        _log("error", error=str(e), exit=2)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
