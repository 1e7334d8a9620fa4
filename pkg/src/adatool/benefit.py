"""Tool Benefit Score estimation and dataset annotation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .core import Kind, Task
from .toolenv import derive_seed

HISTOGRAM_EDGES = np.linspace(-1.0, 1.0, 17)  # 16 buckets of width 0.125


class AnnotationError(RuntimeError):
    """The reference solver failed on a task; the whole annotation is rejected."""


class ReferenceSolver(Protocol):
    def solve(self, task: Task, with_tools: bool, seed: int) -> float:
        """Correctness in [0, 1] of one attempt, deterministic in the arguments."""
        ...


# (p_with, p_without) per kind; tool-helpful kinds gain about +0.75, tool-free
# kinds lose about 0.25 when tools are forced on them
DEFAULT_SOLVER_PROBS: dict[Kind, tuple[float, float]] = {
    Kind.NEEDLE_IMAGE: (0.95, 0.2),
    Kind.PATH_IMAGE: (0.95, 0.2),
    Kind.NEEDLE_VIDEO: (0.95, 0.2),
    Kind.CLIP_COUNT: (0.95, 0.2),
    Kind.GLOBAL_IMAGE: (0.7, 0.95),
    Kind.GLOBAL_VIDEO: (0.7, 0.95),
}


@dataclass(frozen=True)
class StochasticOracle:
    """Bernoulli solver with per-kind success probabilities (p_with, p_without)."""

    probs: Mapping[Kind, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_SOLVER_PROBS))

    def __post_init__(self) -> None:
        for kind, pair in self.probs.items():
            if not all(0.0 <= p <= 1.0 for p in pair):
                raise ValueError(f"probabilities for {kind} must lie in [0, 1]")

    def solve(self, task: Task, with_tools: bool, seed: int) -> float:
        p_with, p_without = self.probs[task.kind]
        p = p_with if with_tools else p_without
        return float(np.random.default_rng(seed).random() < p)


@dataclass(frozen=True)
class BenefitEstimate:
    s_plus: float
    s_minus: float
    delta_s: float
    runs_per_arm: int


def run_seed(seed: int, task_id: str, run: int, arm: str | None = None) -> int:
    """Seed for one solver run. Paired estimation leaves ``arm`` out."""
    if arm is None:
        return derive_seed(seed, task_id, run)
    return derive_seed(seed, task_id, arm, run)


def estimate_delta_s(
    task: Task, solver: ReferenceSolver, k: int = 8, seed: int = 0, paired: bool = True
) -> BenefitEstimate:
    """Accuracy with tools minus accuracy without, over ``k`` runs per arm.

    A run counts as correct when the solver reports correctness >= 0.5. With
    ``paired`` (the default) run ``i`` of both arms shares one seed, so the
    two arms see common random numbers; otherwise each arm draws its own.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    hits = {True: 0, False: 0}
    for with_tools, arm in ((True, "with"), (False, "without")):
        for i in range(k):
            s = run_seed(seed, task.id, i, None if paired else arm)
            try:
                score = float(solver.solve(task, with_tools, s))
            except Exception as exc:
                raise AnnotationError(f"solver failed on {task.id} ({arm} tools, run {i}): {exc}") from exc
            if not 0.0 <= score <= 1.0:
                raise AnnotationError(f"solver returned {score} for {task.id}, outside [0, 1]")
            hits[with_tools] += score >= 0.5
    s_plus, s_minus = hits[True] / k, hits[False] / k
    return BenefitEstimate(s_plus, s_minus, s_plus - s_minus, k)


def delta_s_histogram(values: Sequence[float]) -> np.ndarray:
    """Counts over 16 buckets of width 0.125 on [-1, 1]; the last bucket is closed."""
    counts, _ = np.histogram(np.asarray(values, dtype=float), bins=HISTOGRAM_EDGES)
    return counts


def annotate_dataset(
    tasks: Sequence[Task], solver: ReferenceSolver, k: int = 8, seed: int = 0, paired: bool = True
) -> tuple[list[Task], np.ndarray]:
    """Attach a frozen benefit score to every task; all-or-nothing."""
    if not tasks:
        raise ValueError("nothing to annotate")
    out = []
    for task in tasks:
        est = estimate_delta_s(task, solver, k, seed, paired)
        out.append(task.with_benefit(est.s_plus, est.s_minus, est.delta_s))
    return out, delta_s_histogram([t.delta_s for t in out])


def format_histogram(counts: Sequence[int]) -> str:
    lines = ["delta_s bucket      count"]
    for lo, hi, n in zip(HISTOGRAM_EDGES[:-1], HISTOGRAM_EDGES[1:], counts):
        close = "]" if hi == HISTOGRAM_EDGES[-1] else ")"
        lines.append(f"[{lo:+.3f}, {hi:+.3f}{close} {int(n):6d} {'#' * min(int(n), 60)}")
    return "\n".join(lines)
