"""Small builders shared by the test modules."""

from __future__ import annotations

import math

from adatool.core import (
    Action,
    AnswerSpec,
    AnswerType,
    CropImg,
    FinalAnswer,
    Grid,
    Kind,
    Task,
    Termination,
    Trajectory,
)


def decision(p: float = 1.0, n: int = 1):
    """step_dist/choice/logprob triple for a decision of probability ``p`` among ``n`` actions."""
    if n == 1:
        return math.log(1.0), (1.0,), 0
    rest = (1.0 - p) / (n - 1)
    dist = (p,) + (rest,) * (n - 1)
    return math.log(p), dist, 0


def answer_step(text: str = "A") -> FinalAnswer:
    return FinalAnswer(text, *decision())


def tool_step(bbox=(0, 0, 1, 1)) -> Action:
    return Action(CropImg(bbox), *decision())


def make_traj(steps, answer: str = "A", ended: Termination = Termination.ANSWER, task_id: str = "t") -> Trajectory:
    return Trajectory(task_id, tuple(steps), answer, ended)


def mc_task(task_id: str = "t", gold: str = "A", options=("A", "B")) -> Task:
    grid = Grid(4, 4, (0,) * 16)
    return Task(
        task_id,
        Kind.GLOBAL_IMAGE,
        grid,
        "q",
        AnswerSpec(AnswerType.MULTIPLE_CHOICE, gold, tuple(options)),
        False,
    )
