"""The reinforcement-learning loop: group rollouts, AT-GRPO updates, evaluation, metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from .atgrpo import (
    GroupResult,
    ShapingConfig,
    group_advantages,
    objective_and_gradient,
    shaped_tool_reward,
    total_reward,
)
from .core import Action, Observation, RewardBreakdown, Task, Trajectory, tool_count, trajectory_length
from .policy import PolicyParams, SoftmaxEvaluator, rollout
from .toolenv import EnvConfig, derive_seed
from .verifiers import VerifierConfig, base_reward

METRICS_COLUMNS = (
    "iter",
    "mean_total_reward",
    "mean_accuracy",
    "mean_tool_calls",
    "mean_traj_length",
    "mean_kl",
    "objective",
    "tool_rate_required",
    "tool_rate_free",
)


class TrainingDiverged(FloatingPointError):
    """The objective or parameters became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    shaping: ShapingConfig = field(default_factory=ShapingConfig)
    verifier: VerifierConfig = field(default_factory=VerifierConfig)
    group_size: int = 8
    batch_tasks: int = 32
    inner_epochs: int = 1
    learning_rate: float = 0.05
    iterations: int = 300
    n_max: int = 4
    step_limit: int = 12
    turn_limit: int | None = None
    seed: int = 0
    eval_every: int = 0  # 0 disables periodic evaluation

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        for name in ("batch_tasks", "inner_epochs", "n_max", "step_limit"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0 or self.eval_every < 0:
            raise ValueError("iterations and eval_every must be non-negative")
        if self.inner_epochs > 1 and self.shaping.clip_epsilon is None:
            raise ValueError("inner_epochs > 1 requires shaping.clip_epsilon")

    @property
    def env(self) -> EnvConfig:
        return EnvConfig(self.n_max, self.step_limit, self.turn_limit)


@dataclass(frozen=True)
class MetricsRow:
    iteration: int
    mean_total_reward: float
    mean_accuracy: float
    mean_tool_calls: float
    mean_traj_length: float
    mean_kl: float
    objective: float
    tool_rate_on_required: float
    tool_rate_on_free: float

    def values(self) -> tuple:
        return (
            self.iteration,
            self.mean_total_reward,
            self.mean_accuracy,
            self.mean_tool_calls,
            self.mean_traj_length,
            self.mean_kl,
            self.objective,
            self.tool_rate_on_required,
            self.tool_rate_on_free,
        )


def executed_tool_count(traj: Trajectory) -> int:
    """Tool calls that ran; rejected calls (error observations) are not counted."""
    steps = traj.steps
    return sum(
        1
        for i, s in enumerate(steps)
        if isinstance(s, Action) and isinstance(steps[i + 1], Observation) and not steps[i + 1].is_error
    )


def score_rollout(traj: Trajectory, task: Task, cfg: TrainConfig) -> RewardBreakdown:
    """Base reward, shaped tool reward, and their total for one rollout."""
    if task.delta_s is None:
        raise ValueError(f"task {task.id} has no benefit score; annotate it first")
    rb = base_reward(traj, task, cfg.verifier)
    tool = shaped_tool_reward(task.delta_s, executed_tool_count(traj), cfg.n_max, cfg.shaping.gamma)
    total = total_reward(rb.base, tool, cfg.shaping.alpha)
    return RewardBreakdown(rb.base, rb.correctness, rb.format_ok, tool=tool, total=total)


def make_group(
    task: Task, trajectories: Sequence[Trajectory], cfg: TrainConfig
) -> GroupResult:
    rewards = tuple(score_rollout(t, task, cfg) for t in trajectories)
    adv = group_advantages([r.total for r in rewards])
    return GroupResult(task.id, tuple(trajectories), rewards, tuple(float(a) for a in adv), cfg.shaping.alpha)


def collect_group(
    task: Task,
    theta_old: PolicyParams,
    cfg: TrainConfig,
    seed: int,
    evaluator: SoftmaxEvaluator | None = None,
) -> GroupResult:
    """Sample G rollouts of ``task`` under ``theta_old`` and score them.

    Rollout ``i`` uses seed hash(seed, task.id, i). When an evaluator is
    passed, the decision tables are registered with it so the update never
    needs to replay.
    """
    trajectories = []
    for i in range(cfg.group_size):
        traj, table = rollout(theta_old, task, cfg.env, derive_seed(seed, task.id, i))
        if evaluator is not None:
            evaluator.register(traj, table)
        trajectories.append(traj)
    return make_group(task, trajectories, cfg)


def _task_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(derive_seed(seed, "order", epoch)).permutation(n)


def _batches(dataset: Sequence[Task], cfg: TrainConfig):
    """Round-robin over a seeded permutation that is reshuffled every epoch."""
    n = len(dataset)
    epoch, pos = 0, 0
    order = _task_order(n, cfg.seed, epoch)
    while True:
        batch = []
        while len(batch) < min(cfg.batch_tasks, n):
            if pos == n:
                epoch, pos = epoch + 1, 0
                order = _task_order(n, cfg.seed, epoch)
            batch.append(dataset[order[pos]])
            pos += 1
        yield batch


def _rate(flags: list[bool]) -> float:
    return float(np.mean(flags)) if flags else 0.0


def train(
    dataset: Sequence[Task],
    theta_init: PolicyParams,
    cfg: TrainConfig,
    log: TextIO | None = None,
) -> tuple[PolicyParams, list[MetricsRow]]:
    """Run AT-GRPO from ``theta_init``; the reference policy is frozen at ``theta_init``."""
    if not dataset:
        raise ValueError("empty training set")
    missing = [t.id for t in dataset if t.delta_s is None]
    if missing:
        raise ValueError(f"{len(missing)} tasks lack a benefit score, e.g. {missing[0]}")
    theta = np.array(theta_init, dtype=float)
    theta_ref = theta.copy()
    history: list[MetricsRow] = []
    if cfg.iterations == 0:
        return theta, history

    evaluator = SoftmaxEvaluator(dataset, cfg.env)
    batches = _batches(dataset, cfg)
    for it in range(1, cfg.iterations + 1):
        theta_old = theta.copy()
        batch = next(batches)
        evaluator.clear()
        groups = [
            collect_group(task, theta_old, cfg, derive_seed(cfg.seed, "iter", it), evaluator)
            for task in batch
        ]
        objective = 0.0
        for _ in range(cfg.inner_epochs):
            objective, grad = objective_and_gradient(groups, theta, theta_old, theta_ref, cfg.shaping, evaluator)
            if not math.isfinite(objective) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(
                    f"non-finite objective at iteration {it}: objective={objective}, "
                    f"|theta|={np.linalg.norm(theta):.3g}, |grad|={np.linalg.norm(grad):.3g}"
                )
            theta = theta + cfg.learning_rate * grad

        trajs = [t for g in groups for t in g.trajectories]
        rewards = [r for g in groups for r in g.rewards]
        required = [task.tool_required for task in batch for _ in range(cfg.group_size)]
        used = [tool_count(t) > 0 for t in trajs]
        row = MetricsRow(
            iteration=it,
            mean_total_reward=float(np.mean([r.total for r in rewards])),
            mean_accuracy=float(np.mean([r.correctness for r in rewards])),
            mean_tool_calls=float(np.mean([tool_count(t) for t in trajs])),
            mean_traj_length=float(np.mean([trajectory_length(t) for t in trajs])),
            mean_kl=float(np.mean([evaluator.kl(theta_old, theta_ref, t) for t in trajs])),
            objective=float(objective),
            tool_rate_on_required=_rate([u for u, req in zip(used, required) if req]),
            tool_rate_on_free=_rate([u for u, req in zip(used, required) if not req]),
        )
        history.append(row)
        if log is not None and (cfg.eval_every and it % cfg.eval_every == 0):
            summary = evaluate(theta, dataset, cfg)
            log.write(
                f"iter {it}: reward {row.mean_total_reward:.3f} tools {row.mean_tool_calls:.3f} "
                f"eval acc {summary.accuracy:.3f} tool rate req {summary.tool_rate_required:.3f} "
                f"free {summary.tool_rate_free:.3f}\n"
            )
    return theta, history


@dataclass(frozen=True)
class EvalSummary:
    n_tasks: int
    accuracy: float
    tool_rate_required: float
    tool_rate_free: float
    mean_tool_calls: float
    mean_length: float
    accuracy_required: float
    accuracy_free: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def evaluate(
    theta: PolicyParams,
    tasks: Sequence[Task],
    cfg: TrainConfig,
    seed: int = 0,
    greedy: bool = True,
    samples: int = 1,
) -> EvalSummary:
    """Roll out every task and aggregate, split by ``tool_required``.

    The default is one greedy rollout per task, for which ``seed`` has no
    effect. With ``greedy=False`` each task gets ``samples`` sampled rollouts,
    which measures the stochastic policy's tool-use propensity instead of its
    argmax behaviour.
    """
    if not tasks:
        raise ValueError("empty evaluation set")
    if samples < 1:
        raise ValueError("samples must be positive")
    acc, used, calls, length, req = [], [], [], [], []
    for task in tasks:
        for j in range(1 if greedy else samples):
            traj, _ = rollout(theta, task, cfg.env, derive_seed(seed, task.id, "eval", j), greedy=greedy)
            acc.append(base_reward(traj, task, cfg.verifier).correctness)
            used.append(tool_count(traj) > 0)
            calls.append(tool_count(traj))
            length.append(trajectory_length(traj))
            req.append(task.tool_required)
    acc_a, used_a, req_a = np.array(acc), np.array(used), np.array(req)

    def _mean(x):
        return float(x.mean()) if len(x) else 0.0

    return EvalSummary(
        n_tasks=len(tasks),
        accuracy=_mean(acc_a),
        tool_rate_required=_mean(used_a[req_a]),
        tool_rate_free=_mean(used_a[~req_a]),
        mean_tool_calls=float(np.mean(calls)),
        mean_length=float(np.mean(length)),
        accuracy_required=_mean(acc_a[req_a]),
        accuracy_free=_mean(acc_a[~req_a]),
    )


def format_metrics(history: Sequence[MetricsRow]) -> str:
    if not history:
        raise ValueError("no metrics to write")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for row in history:
        it, *rest = row.values()
        writer.writerow([it] + [f"{v:.6f}" for v in rest])
    return buf.getvalue()


def emit_metrics(history: Sequence[MetricsRow], destination: str | Path | TextIO) -> None:
    text = format_metrics(history)
    if hasattr(destination, "write"):
        destination.write(text)
    else:
        Path(destination).write_text(text, encoding="utf-8")


def read_metrics(path: str | Path) -> list[MetricsRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRICS_COLUMNS:
            raise ValueError(f"unexpected metrics header {header}")
        return [MetricsRow(int(r[0]), *(float(x) for x in r[1:])) for r in reader]
