"""Shared domain vocabulary: scenes, tasks, trajectory steps and rewards.

Every type here is an immutable value object. Each one serializes to a plain
dict (and back) so tasks and trajectories can be written as JSON lines and
re-read without losing a single bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Union


class Kind(str, Enum):
    NEEDLE_IMAGE = "NeedleImage"
    GLOBAL_IMAGE = "GlobalImage"
    NEEDLE_VIDEO = "NeedleVideo"
    CLIP_COUNT = "ClipCount"
    PATH_IMAGE = "PathImage"
    GLOBAL_VIDEO = "GlobalVideo"


class Modality(str, Enum):
    IMAGE = "Image"
    MULTI_IMAGE = "MultiImage"
    VIDEO = "Video"


class AnswerType(str, Enum):
    MULTIPLE_CHOICE = "MultipleChoice"
    NUMERIC = "Numeric"
    OCR = "Ocr"
    FREE_FORM = "FreeForm"


class Termination(str, Enum):
    ANSWER = "Answer"
    TURN_LIMIT = "TurnLimit"
    LENGTH_LIMIT = "LengthLimit"


KIND_MODALITY = {
    Kind.NEEDLE_IMAGE: Modality.IMAGE,
    Kind.GLOBAL_IMAGE: Modality.IMAGE,
    Kind.PATH_IMAGE: Modality.IMAGE,
    Kind.NEEDLE_VIDEO: Modality.VIDEO,
    Kind.CLIP_COUNT: Modality.VIDEO,
    Kind.GLOBAL_VIDEO: Modality.VIDEO,
}

Coord = tuple[int, int]


def symbol_name(code: int) -> str:
    """Display name of a symbol code: 0 -> "A", 1 -> "B", ..."""
    return chr(ord("A") + code)


def symbol_code(name: str) -> int:
    return ord(name) - ord("A")


# ---------------------------------------------------------------------------
# Scenes


@dataclass(frozen=True)
class Grid:
    rows: int
    cols: int
    cells: tuple[int, ...]
    marks: tuple[Coord, Coord] | None = None

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid dimensions must be positive")
        if len(self.cells) != self.rows * self.cols:
            raise ValueError(
                f"cells has {len(self.cells)} entries, expected {self.rows * self.cols}"
            )
        if self.marks is not None:
            a, b = self.marks
            if a == b:
                raise ValueError("marks must be two distinct cells")
            for r, c in self.marks:
                if not (0 <= r < self.rows and 0 <= c < self.cols):
                    raise ValueError(f"mark {(r, c)} out of bounds")

    def at(self, r: int, c: int) -> int:
        return self.cells[r * self.cols + c]

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": "grid",
            "rows": self.rows,
            "cols": self.cols,
            "cells": list(self.cells),
            "marks": None if self.marks is None else [list(m) for m in self.marks],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Grid:
        marks = data.get("marks")
        return cls(
            rows=int(data["rows"]),
            cols=int(data["cols"]),
            cells=tuple(int(x) for x in data["cells"]),
            marks=None if marks is None else (tuple(marks[0]), tuple(marks[1])),
        )


@dataclass(frozen=True)
class Video:
    frames: tuple[Grid, ...]

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError("video needs at least one frame")
        shape = (self.frames[0].rows, self.frames[0].cols)
        if any((f.rows, f.cols) != shape for f in self.frames):
            raise ValueError("all frames of a video must share dimensions")

    def to_dict(self) -> dict[str, Any]:
        return {"type": "video", "frames": [f.to_dict() for f in self.frames]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Video:
        return cls(frames=tuple(Grid.from_dict(f) for f in data["frames"]))


Scene = Union[Grid, Video]


def scene_from_dict(data: dict[str, Any]) -> Scene:
    if data["type"] == "grid":
        return Grid.from_dict(data)
    if data["type"] == "video":
        return Video.from_dict(data)
    raise ValueError(f"unknown scene type {data['type']!r}")


# ---------------------------------------------------------------------------
# Tasks


@dataclass(frozen=True)
class AnswerSpec:
    type: AnswerType
    gold: str | float
    options: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.type is AnswerType.MULTIPLE_CHOICE:
            if self.options is None or not 2 <= len(self.options) <= 8:
                raise ValueError("multiple choice needs 2-8 options")
            if self.gold not in self.options:
                raise ValueError("gold answer must be one of the options")
        elif self.type is AnswerType.NUMERIC:
            gold = float(self.gold)
            if gold != gold or gold in (float("inf"), float("-inf")):
                raise ValueError("numeric gold must be finite")

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": self.type.value,
            "gold": self.gold,
            "options": None if self.options is None else list(self.options),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AnswerSpec:
        options = data.get("options")
        return cls(
            type=AnswerType(data["type"]),
            gold=data["gold"],
            options=None if options is None else tuple(options),
        )


@dataclass(frozen=True)
class Query:
    """Structured question parameters, so nothing has to parse question prose."""

    target: int | None = None
    window: tuple[int, int] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "target": self.target,
            "window": None if self.window is None else list(self.window),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Query:
        window = data.get("window")
        return cls(target=data.get("target"), window=None if window is None else tuple(window))


@dataclass(frozen=True)
class Task:
    """One query over a scene.

    ``tool_required`` is generator-side ground truth and is never shown to the
    policy. ``delta_s``, ``s_plus`` and ``s_minus`` are filled in by annotation;
    a task with ``delta_s`` set is what the trainer calls an annotated task.
    """

    id: str
    kind: Kind
    scene: Scene
    question: str
    answer_spec: AnswerSpec
    tool_required: bool
    query: Query = Query()
    delta_s: float | None = None
    s_plus: float | None = None
    s_minus: float | None = None

    @property
    def modality(self) -> Modality:
        return KIND_MODALITY[self.kind]

    @property
    def annotated(self) -> bool:
        return self.delta_s is not None

    def with_benefit(self, s_plus: float, s_minus: float, delta_s: float) -> Task:
        return replace(self, s_plus=s_plus, s_minus=s_minus, delta_s=delta_s)

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "id": self.id,
            "kind": self.kind.value,
            "modality": self.modality.value,
            "scene": self.scene.to_dict(),
            "question": self.question,
            "answer_spec": self.answer_spec.to_dict(),
            "tool_required": self.tool_required,
            "query": self.query.to_dict(),
        }
        if self.annotated:
            data["delta_s"] = self.delta_s
            data["s_plus"] = self.s_plus
            data["s_minus"] = self.s_minus
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Task:
        kind = Kind(data["kind"])
        if "modality" in data and Modality(data["modality"]) is not KIND_MODALITY[kind]:
            raise ValueError(f"modality {data['modality']} does not match kind {kind.value}")
        return cls(
            id=str(data["id"]),
            kind=kind,
            scene=scene_from_dict(data["scene"]),
            question=str(data["question"]),
            answer_spec=AnswerSpec.from_dict(data["answer_spec"]),
            tool_required=bool(data["tool_required"]),
            query=Query.from_dict(data.get("query") or {}),
            delta_s=data.get("delta_s"),
            s_plus=data.get("s_plus"),
            s_minus=data.get("s_minus"),
        )


# ---------------------------------------------------------------------------
# Tool calls


@dataclass(frozen=True)
class CropImg:
    bbox: tuple[int, int, int, int]  # (r0, c0, r1, c1), inclusive

    name = "CropImg"


@dataclass(frozen=True)
class FrameAt:
    t: int

    name = "FrameAt"


@dataclass(frozen=True)
class VideoClip:
    t0: int
    t1: int

    name = "VideoClip"


@dataclass(frozen=True)
class PathTracer:
    p0: Coord
    p1: Coord

    name = "PathTracer"


ToolCall = Union[CropImg, FrameAt, VideoClip, PathTracer]


def tool_call_to_dict(call: ToolCall) -> dict[str, Any]:
    if isinstance(call, CropImg):
        return {"tool": call.name, "bbox": list(call.bbox)}
    if isinstance(call, FrameAt):
        return {"tool": call.name, "t": call.t}
    if isinstance(call, VideoClip):
        return {"tool": call.name, "t0": call.t0, "t1": call.t1}
    return {"tool": call.name, "p0": list(call.p0), "p1": list(call.p1)}


def tool_call_from_dict(data: dict[str, Any]) -> ToolCall:
    tool = data["tool"]
    if tool == "CropImg":
        return CropImg(tuple(data["bbox"]))
    if tool == "FrameAt":
        return FrameAt(int(data["t"]))
    if tool == "VideoClip":
        return VideoClip(int(data["t0"]), int(data["t1"]))
    if tool == "PathTracer":
        return PathTracer(tuple(data["p0"]), tuple(data["p1"]))
    raise ValueError(f"unknown tool {tool!r}")


# ---------------------------------------------------------------------------
# Observation payloads and trajectory steps


@dataclass(frozen=True)
class CoarseView:
    """Initial low-resolution rendering: quadrant majority symbols, row-major."""

    rows: int
    cols: int
    majorities: tuple[int, int, int, int]
    frames: int | None = None  # frame count for videos

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": "coarse",
            "rows": self.rows,
            "cols": self.cols,
            "majorities": list(self.majorities),
            "frames": self.frames,
        }


PathCells = tuple[tuple[Coord, int], ...]
Payload = Union[Grid, tuple[Grid, ...], PathCells, CoarseView, str]


def payload_to_dict(payload: Payload) -> dict[str, Any]:
    if isinstance(payload, str):
        return {"type": "error", "text": payload}
    if isinstance(payload, (Grid, CoarseView)):
        return payload.to_dict()
    if payload and isinstance(payload[0], Grid):
        return {"type": "clip", "frames": [g.to_dict() for g in payload]}
    return {"type": "path", "cells": [[list(rc), s] for rc, s in payload]}


def payload_from_dict(data: dict[str, Any]) -> Payload:
    kind = data["type"]
    if kind == "error":
        return data["text"]
    if kind == "grid":
        return Grid.from_dict(data)
    if kind == "coarse":
        return CoarseView(
            rows=data["rows"],
            cols=data["cols"],
            majorities=tuple(data["majorities"]),
            frames=data["frames"],
        )
    if kind == "clip":
        return tuple(Grid.from_dict(g) for g in data["frames"])
    if kind == "path":
        return tuple((tuple(rc), int(s)) for rc, s in data["cells"])
    raise ValueError(f"unknown payload type {kind!r}")


@dataclass(frozen=True)
class Thought:
    text: str


def _check_decision(dist: tuple[float, ...], choice: int, logprob: float) -> None:
    if not 0 <= choice < len(dist):
        raise ValueError(f"choice {choice} outside a distribution of {len(dist)} actions")
    if any(p < 0 for p in dist) or abs(math.fsum(dist) - 1.0) > 1e-9:
        raise ValueError("step_dist must be a probability vector")
    if dist[choice] <= 0 or abs(math.log(dist[choice]) - logprob) > 1e-9:
        raise ValueError("step_logprob must equal log(step_dist[choice])")


@dataclass(frozen=True)
class Action:
    """A sampled tool call.

    ``step_dist`` is the full distribution over the admissible actions at the
    time of the decision and ``choice`` indexes the sampled entry, so that
    ``step_logprob == log(step_dist[choice])``.
    """

    tool_call: ToolCall
    step_logprob: float
    step_dist: tuple[float, ...]
    choice: int

    def __post_init__(self) -> None:
        _check_decision(self.step_dist, self.choice, self.step_logprob)


@dataclass(frozen=True)
class Observation:
    payload: Payload

    @property
    def is_error(self) -> bool:
        return isinstance(self.payload, str)


@dataclass(frozen=True)
class FinalAnswer:
    text: str
    step_logprob: float
    step_dist: tuple[float, ...]
    choice: int

    def __post_init__(self) -> None:
        _check_decision(self.step_dist, self.choice, self.step_logprob)


Step = Union[Thought, Action, Observation, FinalAnswer]


def step_to_dict(step: Step) -> dict[str, Any]:
    if isinstance(step, Thought):
        return {"step": "thought", "text": step.text}
    if isinstance(step, Observation):
        return {"step": "observation", "payload": payload_to_dict(step.payload)}
    common = {
        "step_logprob": step.step_logprob,
        "step_dist": list(step.step_dist),
        "choice": step.choice,
    }
    if isinstance(step, Action):
        return {"step": "action", "tool_call": tool_call_to_dict(step.tool_call), **common}
    return {"step": "answer", "text": step.text, **common}


def step_from_dict(data: dict[str, Any]) -> Step:
    kind = data["step"]
    if kind == "thought":
        return Thought(data["text"])
    if kind == "observation":
        return Observation(payload_from_dict(data["payload"]))
    dist = tuple(float(p) for p in data["step_dist"])
    if kind == "action":
        return Action(
            tool_call=tool_call_from_dict(data["tool_call"]),
            step_logprob=float(data["step_logprob"]),
            step_dist=dist,
            choice=int(data["choice"]),
        )
    if kind == "answer":
        return FinalAnswer(
            text=data["text"],
            step_logprob=float(data["step_logprob"]),
            step_dist=dist,
            choice=int(data["choice"]),
        )
    raise ValueError(f"unknown step kind {kind!r}")


@dataclass(frozen=True)
class Trajectory:
    task_id: str
    steps: tuple[Step, ...]
    final_answer: str
    terminated_by: Termination

    @property
    def decisions(self) -> tuple[Action | FinalAnswer, ...]:
        return tuple(s for s in self.steps if isinstance(s, (Action, FinalAnswer)))

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "steps": [step_to_dict(s) for s in self.steps],
            "final_answer": self.final_answer,
            "terminated_by": self.terminated_by.value,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Trajectory:
        return cls(
            task_id=data["task_id"],
            steps=tuple(step_from_dict(s) for s in data["steps"]),
            final_answer=data["final_answer"],
            terminated_by=Termination(data["terminated_by"]),
        )


def tool_count(traj: Trajectory) -> int:
    """Number of executed-or-attempted tool calls (Action steps)."""
    return sum(1 for s in traj.steps if isinstance(s, Action))


def trajectory_length(traj: Trajectory) -> int:
    """Total step count; the stand-in for response length."""
    return len(traj.steps)


@dataclass(frozen=True)
class RewardBreakdown:
    base: float
    correctness: float
    format_ok: bool
    tool: float | None = None
    total: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "base": self.base,
            "tool": self.tool,
            "total": self.total,
            "correctness": self.correctness,
            "format_ok": self.format_ok,
        }
