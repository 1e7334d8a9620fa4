"""Command-line pipeline: gen-tasks, annotate, sft, train, eval, report.

Every command reads an optional flat JSON config (``--config``), lets
``--seed`` override its seed, and writes to ``--out``. Exit codes:

* 2: invalid configuration (unknown key, wrong type, rejected value)
* 3: malformed task record (the message names the line)
* 4: missing input file
* 5: checkpoint schema mismatch
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from .atgrpo import ShapingConfig
from .benefit import StochasticOracle, annotate_dataset, delta_s_histogram, format_histogram
from .core import Kind, Task
from .policy import SchemaMismatchError, load_checkpoint, save_checkpoint, scripted_expert, sft_fit, zeros
from .toolenv import TOOL_REQUIRED, GenSpec, generate_tasks
from .trainer import EvalSummary, TrainConfig, emit_metrics, evaluate, read_metrics, train
from .verifiers import VerifierConfig

EXIT_CONFIG, EXIT_RECORD, EXIT_MISSING, EXIT_SCHEMA = 2, 3, 4, 5

_COUNT_KEYS = {kind: f"count_{kind.name.lower()}" for kind in Kind}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of the pipeline as one flat record; each field has a default."""

    seed: int = 0
    # task generation: how many tasks of each kind, and the scene geometry
    count_needle_image: int = 50
    count_global_image: int = 100
    count_needle_video: int = 50
    count_clip_count: int = 50
    count_path_image: int = 50
    count_global_video: int = 100
    grid_size: int = 8
    frames: int = 8
    options: int = 4
    alphabet: int = 6
    # reference solver for benefit annotation: success rates with/without tools
    runs_per_arm: int = 8
    paired_arms: bool = True
    p_with_required: float = 0.95
    p_without_required: float = 0.2
    p_with_free: float = 0.7
    p_without_free: float = 0.95
    # verifier
    numeric_rel_tol: float = 1e-6
    format_weight: float = 0.1
    # supervised warm start
    redundancy_rate: float = 0.5
    sft_learning_rate: float = 1.0
    sft_epochs: int = 200
    # reinforcement learning
    gamma: float = 2.0
    alpha: float = 0.6
    beta: float = 0.04
    clip_epsilon: float | None = None
    group_size: int = 8
    batch_tasks: int = 32
    inner_epochs: int = 1
    learning_rate: float = 0.05
    iterations: int = 300
    n_max: int = 4
    step_limit: int = 12
    turn_limit: int | None = None
    eval_every: int = 0
    # evaluation: 0 means one greedy rollout per task, N > 0 means N sampled rollouts
    eval_samples: int = 0

    def gen_spec(self) -> GenSpec:
        counts = {kind: getattr(self, key) for kind, key in _COUNT_KEYS.items()}
        return GenSpec(counts, self.grid_size, self.frames, self.options, self.alphabet, self.seed)

    def solver(self) -> StochasticOracle:
        req = (self.p_with_required, self.p_without_required)
        free = (self.p_with_free, self.p_without_free)
        return StochasticOracle({k: req if TOOL_REQUIRED[k] else free for k in Kind})

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            shaping=ShapingConfig(self.gamma, self.alpha, self.beta, self.clip_epsilon),
            verifier=VerifierConfig(self.numeric_rel_tol, self.format_weight),
            group_size=self.group_size,
            batch_tasks=self.batch_tasks,
            inner_epochs=self.inner_epochs,
            learning_rate=self.learning_rate,
            iterations=self.iterations,
            n_max=self.n_max,
            step_limit=self.step_limit,
            turn_limit=self.turn_limit,
            seed=self.seed,
            eval_every=self.eval_every,
        )

    def validate(self) -> None:
        """Check per-key ranges, then build every derived config so bad values exit with 2."""
        checks = {key: getattr(self, key) >= 0 for key in _COUNT_KEYS.values()}
        for key in ("p_with_required", "p_without_required", "p_with_free", "p_without_free", "redundancy_rate"):
            checks[key] = 0.0 <= getattr(self, key) <= 1.0
        checks.update(
            runs_per_arm=self.runs_per_arm >= 1,
            sft_epochs=self.sft_epochs >= 0,
            sft_learning_rate=self.sft_learning_rate > 0,
            learning_rate=self.learning_rate > 0,
            eval_samples=self.eval_samples >= 0,
        )
        for key, ok in checks.items():
            if not ok:
                raise CliError(EXIT_CONFIG, f"invalid config: {key}={getattr(self, key)!r} is out of range")
        try:
            self.gen_spec()
            self.train_config()
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, f"invalid config: {exc}") from None


def reference_config(**overrides) -> RunConfig:
    """The calibrated reference scenario: 400 tasks and 300 iterations at lr 0.2."""
    return replace(RunConfig(learning_rate=0.2), **overrides)


_OPTIONAL_KEYS = {"clip_epsilon": float, "turn_limit": int}


def _type_ok(key: str, value, default) -> bool:
    if value is None:
        return key in _OPTIONAL_KEYS
    expected = _OPTIONAL_KEYS.get(key, type(default))
    if isinstance(value, bool) or expected is bool:
        return isinstance(value, bool) and expected is bool
    if expected is float:
        return isinstance(value, (int, float))
    return isinstance(value, expected)


def config_from_mapping(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise CliError(EXIT_CONFIG, "config must be a JSON object")
    defaults = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for key, value in data.items():
        if key not in known:
            raise CliError(EXIT_CONFIG, f"unknown config key {key!r}")
        default = getattr(defaults, key)
        if not _type_ok(key, value, default):
            raise CliError(EXIT_CONFIG, f"config key {key!r} has the wrong type: {value!r}")
        if _OPTIONAL_KEYS.get(key, type(default)) is float and value is not None:
            value = float(value)
        values[key] = value
    cfg = replace(defaults, **values)
    cfg.validate()
    return cfg


def load_config(path: str | None, seed: int | None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise CliError(EXIT_MISSING, f"config file not found: {path}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_CONFIG, f"config is not valid JSON: {exc}") from None
        cfg = config_from_mapping(data)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    cfg.validate()
    return cfg


def config_to_json(cfg: RunConfig) -> str:
    return json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Task files


def task_line(task: Task) -> str:
    return json.dumps(task.to_dict(), sort_keys=True, separators=(",", ":"))


def write_tasks(tasks: Sequence[Task], path: str | Path) -> None:
    text = "".join(task_line(t) + "\n" for t in tasks)
    Path(path).write_text(text, encoding="utf-8")


def read_tasks(path: str | Path) -> list[Task]:
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING, f"task file not found: {path}")
    tasks = []
    with p.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                tasks.append(Task.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CliError(EXIT_RECORD, f"{path}:{lineno}: malformed task record ({exc})") from None
    return tasks


def _require_annotated(tasks: Sequence[Task], path: str) -> None:
    for i, task in enumerate(tasks, start=1):
        if not task.annotated:
            raise CliError(EXIT_RECORD, f"{path}: record {i} ({task.id}) has no delta_s; run annotate first")


def _checkpoint(path: str) -> np.ndarray:
    if not Path(path).exists():
        raise CliError(EXIT_MISSING, f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except SchemaMismatchError as exc:
        raise CliError(EXIT_SCHEMA, f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_tasks(cfg: RunConfig, out: str, stdout: TextIO) -> None:
    tasks = generate_tasks(cfg.gen_spec())
    write_tasks(tasks, out)
    stdout.write(f"wrote {len(tasks)} tasks to {out}\n")


def cmd_annotate(cfg: RunConfig, tasks_path: str, out: str, stdout: TextIO) -> None:
    tasks = read_tasks(tasks_path)
    if not tasks:
        write_tasks([], out)
        stdout.write(format_histogram(delta_s_histogram([])) + "\n")
        return
    annotated, hist = annotate_dataset(tasks, cfg.solver(), cfg.runs_per_arm, cfg.seed, cfg.paired_arms)
    write_tasks(annotated, out)
    stdout.write(f"annotated {len(annotated)} tasks into {out}\n")
    stdout.write(format_histogram(hist) + "\n")


def cmd_sft(cfg: RunConfig, tasks_path: str, out: str, stdout: TextIO) -> None:
    tasks = read_tasks(tasks_path)
    if not tasks:
        raise CliError(EXIT_RECORD, f"{tasks_path}: no tasks to build demonstrations from")
    env = cfg.train_config().env
    demos = [scripted_expert(t, cfg.redundancy_rate, cfg.seed, env) for t in tasks]
    theta = sft_fit(demos, {t.id: t for t in tasks}, zeros(), cfg.sft_learning_rate, cfg.sft_epochs, env)
    save_checkpoint(theta, out)
    redundant = sum(d.redundant_tools for d in demos)
    stdout.write(f"fit {len(demos)} demonstrations ({redundant} with a redundant call); checkpoint {out}\n")


def cmd_train(cfg: RunConfig, tasks_path: str, checkpoint: str, out: str, metrics: str | None, stdout: TextIO) -> None:
    tasks = read_tasks(tasks_path)
    _require_annotated(tasks, tasks_path)
    if not tasks:
        raise CliError(EXIT_RECORD, f"{tasks_path}: empty training set")
    theta0 = _checkpoint(checkpoint)
    theta, history = train(tasks, theta0, cfg.train_config(), log=stdout)
    save_checkpoint(theta, out)
    if metrics is not None and history:
        emit_metrics(history, metrics)
    stdout.write(f"trained {len(history)} iterations; checkpoint {out}\n")


def _evaluate(cfg: RunConfig, tasks_path: str, checkpoint: str) -> tuple[list[Task], EvalSummary]:
    tasks = read_tasks(tasks_path)
    if not tasks:
        raise CliError(EXIT_RECORD, f"{tasks_path}: empty evaluation set")
    theta = _checkpoint(checkpoint)
    tc = cfg.train_config()
    if cfg.eval_samples:
        summary = evaluate(theta, tasks, tc, cfg.seed, greedy=False, samples=cfg.eval_samples)
    else:
        summary = evaluate(theta, tasks, tc, cfg.seed)
    return tasks, summary


def format_summary(summary: EvalSummary) -> str:
    rows = [
        ("tasks", f"{summary.n_tasks}"),
        ("accuracy", f"{summary.accuracy:.4f}"),
        ("accuracy (tool-required)", f"{summary.accuracy_required:.4f}"),
        ("accuracy (tool-free)", f"{summary.accuracy_free:.4f}"),
        ("tool rate (tool-required)", f"{summary.tool_rate_required:.4f}"),
        ("tool rate (tool-free)", f"{summary.tool_rate_free:.4f}"),
        ("mean tool calls", f"{summary.mean_tool_calls:.4f}"),
        ("mean trajectory length", f"{summary.mean_length:.4f}"),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def cmd_eval(cfg: RunConfig, tasks_path: str, checkpoint: str, out: str | None, stdout: TextIO) -> None:
    _, summary = _evaluate(cfg, tasks_path, checkpoint)
    stdout.write(format_summary(summary) + "\n")
    if out is not None:
        Path(out).write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _window_means(path: str) -> str:
    if not Path(path).exists():
        raise CliError(EXIT_MISSING, f"metrics file not found: {path}")
    try:
        history = read_metrics(path)
    except (ValueError, IndexError) as exc:
        raise CliError(EXIT_RECORD, f"{path}: {exc}") from None
    if not history:
        return "metrics: no rows"
    n = len(history)
    early = history[: min(20, n)]
    late = history[max(0, n - 51):]

    def mean(rows, attr):
        return float(np.mean([getattr(r, attr) for r in rows]))

    lines = [f"metrics over {n} iterations (first {len(early)} vs last {len(late)})"]
    for attr in ("mean_total_reward", "mean_tool_calls", "mean_accuracy", "mean_kl"):
        lines.append(f"  {attr:<18} {mean(early, attr):.4f} -> {mean(late, attr):.4f}")
    return "\n".join(lines)


def cmd_report(
    cfg: RunConfig, tasks_path: str, checkpoint: str, metrics: str | None, out: str | None, stdout: TextIO
) -> None:
    tasks, summary = _evaluate(cfg, tasks_path, checkpoint)
    parts = ["final evaluation", format_summary(summary), ""]
    annotated = [t.delta_s for t in tasks if t.annotated]
    if annotated:
        parts += [format_histogram(delta_s_histogram(annotated)), ""]
    else:
        parts += ["no delta_s annotations in the task file", ""]
    if metrics is not None:
        parts += [_window_means(metrics), ""]
    text = "\n".join(parts)
    stdout.write(text)
    if out is not None:
        Path(out).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config; unknown keys are rejected")
    common.add_argument("--seed", type=int, help="overrides the config seed")

    parser = argparse.ArgumentParser(prog="adatool", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-tasks", parents=[common], help="generate a task file")
    p.add_argument("--out", required=True)

    p = sub.add_parser("annotate", parents=[common], help="attach benefit scores")
    p.add_argument("tasks")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sft", parents=[common], help="fit the policy to scripted demonstrations")
    p.add_argument("tasks")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="run AT-GRPO from a checkpoint")
    p.add_argument("tasks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="where to write the per-iteration metrics table")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("tasks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="optional JSON summary")

    p = sub.add_parser("report", parents=[common], help="evaluation table, benefit histogram, metric trends")
    p.add_argument("tasks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metrics")
    p.add_argument("--out", help="optional copy of the report")

    p = sub.add_parser("show-config", parents=[common], help="print the effective config with all defaults")
    p.add_argument("--out")
    return parser


def main(argv: Sequence[str] | None = None, stdout: TextIO | None = None, stderr: TextIO | None = None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        if args.command == "gen-tasks":
            cmd_gen_tasks(cfg, args.out, stdout)
        elif args.command == "annotate":
            cmd_annotate(cfg, args.tasks, args.out, stdout)
        elif args.command == "sft":
            cmd_sft(cfg, args.tasks, args.out, stdout)
        elif args.command == "train":
            cmd_train(cfg, args.tasks, args.checkpoint, args.out, args.metrics, stdout)
        elif args.command == "eval":
            cmd_eval(cfg, args.tasks, args.checkpoint, args.out, stdout)
        elif args.command == "report":
            cmd_report(cfg, args.tasks, args.checkpoint, args.metrics, args.out, stdout)
        elif args.command == "show-config":
            text = config_to_json(cfg)
            if args.out:
                Path(args.out).write_text(text, encoding="utf-8")
            else:
                stdout.write(text)
    except CliError as exc:
        stderr.write(f"adatool: error: {exc}\n")
        return exc.code
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
