"""Deterministic simulated vision-tool environment.

Scenes are symbolic grids (or videos of grids). A rollout starts from a coarse
view holding only the four quadrant-majority symbols. The four tools reveal
exact cells: a crop shows a rectangle, a frame or clip shows whole frames, and
the path tracer shows the cells on a line. What has been revealed so far
decides which answers are still consistent.

Interaction accounting is in trajectory steps. A tool turn costs three steps
(thought, action, observation) and an answer turn costs two (thought, answer).
A state is ``done`` once no answer turn fits within ``step_limit``.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Mapping

import numpy as np

from .core import (
    AnswerSpec,
    AnswerType,
    CoarseView,
    Coord,
    CropImg,
    FrameAt,
    Grid,
    Kind,
    Modality,
    Observation,
    PathTracer,
    Query,
    Scene,
    Task,
    ToolCall,
    Video,
    VideoClip,
    symbol_code,
    symbol_name,
)

TOOL_TURN_STEPS = 3
ANSWER_TURN_STEPS = 2
DEFAULT_N_MAX = 4
DEFAULT_STEP_LIMIT = 12

BUDGET_EXHAUSTED = "tool budget exhausted"

Position = tuple[int, int, int]  # (frame, row, col); images use frame 0


class ToolArgumentError(ValueError):
    """A tool was called with arguments outside the scene."""


class EnvUsageError(RuntimeError):
    """The environment was driven outside its contract (e.g. acting when done)."""


def derive_seed(*parts: object) -> int:
    """Stable 63-bit seed from arbitrary printable parts."""
    digest = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


# ---------------------------------------------------------------------------
# Rendering and tools


def quadrant_boxes(rows: int, cols: int) -> tuple[tuple[int, int, int, int], ...]:
    """Inclusive (r0, c0, r1, c1) boxes of the four quadrants, row-major."""
    h, w = max(rows // 2, 1), max(cols // 2, 1)
    return (
        (0, 0, h - 1, w - 1),
        (0, w, h - 1, cols - 1),
        (h, 0, rows - 1, w - 1),
        (h, w, rows - 1, cols - 1),
    )


def majority_symbol(symbols) -> int:
    """Most frequent symbol; ties go to the smallest code."""
    counts = Counter(symbols)
    return min(counts, key=lambda s: (-counts[s], s))


def quadrant_majorities(grid: Grid) -> tuple[int, int, int, int]:
    return tuple(
        majority_symbol(grid.at(r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1))
        for r0, c0, r1, c1 in quadrant_boxes(grid.rows, grid.cols)
    )


def coarse_view(scene: Scene) -> CoarseView:
    if isinstance(scene, Video):
        first = scene.frames[0]
        return CoarseView(first.rows, first.cols, quadrant_majorities(first), frames=len(scene.frames))
    return CoarseView(scene.rows, scene.cols, quadrant_majorities(scene))


def _check_cell(grid: Grid, p: Coord) -> None:
    r, c = p
    if not (0 <= r < grid.rows and 0 <= c < grid.cols):
        raise ToolArgumentError(f"point {tuple(p)} out of bounds for {grid.rows}x{grid.cols} grid")


def crop_img(grid: Grid, bbox: tuple[int, int, int, int]) -> Grid:
    r0, c0, r1, c1 = bbox
    if not (0 <= r0 <= r1 < grid.rows and 0 <= c0 <= c1 < grid.cols):
        raise ToolArgumentError(f"bbox {tuple(bbox)} invalid for {grid.rows}x{grid.cols} grid")
    cells = tuple(grid.at(r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1))
    return Grid(r1 - r0 + 1, c1 - c0 + 1, cells)


def frame_at(video: Video, t: int) -> Grid:
    if not 0 <= t < len(video.frames):
        raise ToolArgumentError(f"t out of range: {t} not in [0, {len(video.frames) - 1}]")
    return video.frames[t]


def video_clip(video: Video, t0: int, t1: int) -> tuple[Grid, ...]:
    if not 0 <= t0 <= t1 < len(video.frames):
        raise ToolArgumentError(f"clip ({t0}, {t1}) invalid for {len(video.frames)} frames")
    return video.frames[t0 : t1 + 1]


def bresenham(p0: Coord, p1: Coord) -> list[Coord]:
    (r0, c0), (r1, c1) = p0, p1
    dr, dc = abs(r1 - r0), -abs(c1 - c0)
    sr, sc = (1 if r1 > r0 else -1), (1 if c1 > c0 else -1)
    err = dr + dc
    cells = []
    r, c = r0, c0
    while True:
        cells.append((r, c))
        if (r, c) == (r1, c1):
            return cells
        e2 = 2 * err
        if e2 >= dc:
            err += dc
            r += sr
        if e2 <= dr:
            err += dr
            c += sc


def path_tracer(grid: Grid, p0: Coord, p1: Coord) -> tuple[tuple[Coord, int], ...]:
    _check_cell(grid, p0)
    _check_cell(grid, p1)
    return tuple(((r, c), grid.at(r, c)) for r, c in bresenham(tuple(p0), tuple(p1)))


def run_tool(scene: Scene, call: ToolCall):
    """Execute ``call`` on the original scene.

    Returns the observation payload and the frozenset of revealed positions.
    """
    if isinstance(call, (CropImg, PathTracer)):
        if not isinstance(scene, Grid):
            raise ToolArgumentError(f"{call.name} needs an image scene")
        if isinstance(call, CropImg):
            r0, c0, r1, c1 = call.bbox
            payload = crop_img(scene, call.bbox)
            cells = ((0, r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1))
            return payload, frozenset(cells)
        payload = path_tracer(scene, call.p0, call.p1)
        return payload, frozenset((0, r, c) for (r, c), _ in payload)
    if not isinstance(scene, Video):
        raise ToolArgumentError(f"{call.name} needs a video scene")
    if isinstance(call, FrameAt):
        return frame_at(scene, call.t), _frame_positions(scene, call.t, call.t)
    return video_clip(scene, call.t0, call.t1), _frame_positions(scene, call.t0, call.t1)


def _frame_positions(video: Video, t0: int, t1: int) -> frozenset[Position]:
    g = video.frames[0]
    return frozenset((t, r, c) for t in range(t0, t1 + 1) for r in range(g.rows) for c in range(g.cols))


# ---------------------------------------------------------------------------
# Tool templates: the finite action set the policy chooses from

TEMPLATE_NAMES = (
    "crop_q0",
    "crop_q1",
    "crop_q2",
    "crop_q3",
    "path",
    "frame_b0",
    "frame_b1",
    "frame_b2",
    "frame_b3",
    "clip_h0",
    "clip_h1",
)


def frame_bucket_times(n_frames: int) -> tuple[int, ...]:
    buckets = min(4, n_frames)
    return tuple((2 * k + 1) * n_frames // (2 * buckets) for k in range(buckets))


def clip_halves(n_frames: int) -> tuple[tuple[int, int], ...]:
    if n_frames < 2:
        return ((0, n_frames - 1),)
    mid = n_frames // 2
    return ((0, mid - 1), (mid, n_frames - 1))


def tool_templates(task: Task) -> tuple[tuple[str, ToolCall], ...]:
    return _templates(task)


@lru_cache(maxsize=8192)
def _templates(task: Task) -> tuple[tuple[str, ToolCall], ...]:
    scene = task.scene
    if isinstance(scene, Grid):
        out = [(f"crop_q{i}", CropImg(box)) for i, box in enumerate(quadrant_boxes(scene.rows, scene.cols))]
        if scene.marks is not None:
            out.append(("path", PathTracer(*scene.marks)))
        return tuple(out)
    n = len(scene.frames)
    out = [(f"frame_b{i}", FrameAt(t)) for i, t in enumerate(frame_bucket_times(n))]
    out += [(f"clip_h{i}", VideoClip(t0, t1)) for i, (t0, t1) in enumerate(clip_halves(n))]
    return tuple(out)


# ---------------------------------------------------------------------------
# Environment state and transitions


@dataclass(frozen=True)
class EnvConfig:
    """Interaction budgets for one rollout. ``turn_limit`` caps decisions."""

    n_max: int = DEFAULT_N_MAX
    step_limit: int = DEFAULT_STEP_LIMIT
    turn_limit: int | None = None

    def __post_init__(self) -> None:
        if self.n_max < 1 or self.step_limit < 1:
            raise ValueError("n_max and step_limit must be positive")
        if self.turn_limit is not None and self.turn_limit < 1:
            raise ValueError("turn_limit must be positive when set")


@dataclass(frozen=True)
class EnvState:
    task: Task
    observations: tuple[Observation, ...]
    tools_used: int
    n_max: int
    step_limit: int
    steps_used: int = 0
    done: bool = False
    revealed: frozenset[Position] = field(default=frozenset(), repr=False)
    calls: tuple[ToolCall, ...] = ()  # successfully executed calls, in order

    def __post_init__(self) -> None:
        if not 0 <= self.tools_used <= self.n_max:
            raise ValueError("tools_used must lie in [0, n_max]")


def reset(task: Task, n_max: int = DEFAULT_N_MAX, step_limit: int = DEFAULT_STEP_LIMIT) -> EnvState:
    if n_max < 1 or step_limit < 1:
        raise ValueError("n_max and step_limit must be positive")
    return EnvState(
        task=task,
        observations=(Observation(coarse_view(task.scene)),),
        tools_used=0,
        n_max=n_max,
        step_limit=step_limit,
        done=step_limit < ANSWER_TURN_STEPS,
    )


def can_use_tool(state: EnvState) -> bool:
    return (
        not state.done
        and state.tools_used < state.n_max
        and state.steps_used + TOOL_TURN_STEPS <= state.step_limit
    )


def execute(state: EnvState, call: ToolCall) -> tuple[EnvState, Observation]:
    """Run one tool turn.

    Over-budget calls and invalid arguments produce an error observation; they
    still consume the turn's steps but never the tool budget.
    """
    if state.done:
        raise EnvUsageError("cannot act in a finished episode")
    steps = state.steps_used + TOOL_TURN_STEPS
    done = steps + ANSWER_TURN_STEPS > state.step_limit
    if state.tools_used >= state.n_max:
        obs = Observation(BUDGET_EXHAUSTED)
        new = replace(state, observations=state.observations + (obs,), steps_used=steps, done=done)
        return new, obs
    try:
        payload, positions = run_tool(state.task.scene, call)
    except ToolArgumentError as exc:
        obs = Observation(str(exc))
        new = replace(state, observations=state.observations + (obs,), steps_used=steps, done=done)
        return new, obs
    obs = Observation(payload)
    new = replace(
        state,
        observations=state.observations + (obs,),
        tools_used=state.tools_used + 1,
        steps_used=steps,
        done=done,
        revealed=state.revealed | positions,
        calls=state.calls + (call,),
    )
    return new, obs


def finish(state: EnvState) -> EnvState:
    """Close the episode with an answer turn."""
    if state.done:
        raise EnvUsageError("cannot answer in a finished episode")
    return replace(state, steps_used=state.steps_used + ANSWER_TURN_STEPS, done=True)


# ---------------------------------------------------------------------------
# Ambiguity oracle


def candidate_answers(task: Task) -> tuple[str, ...]:
    """Every answer string the policy may give for ``task``."""
    spec = task.answer_spec
    if spec.type is AnswerType.MULTIPLE_CHOICE:
        return spec.options
    if spec.type is AnswerType.NUMERIC and task.query.window is not None:
        t0, t1 = task.query.window
        return tuple(str(i) for i in range(t1 - t0 + 2))
    raise EnvUsageError(f"no finite answer set for a {spec.type.value} task")


@lru_cache(maxsize=8192)
def _region(task: Task) -> frozenset[Position]:
    """Positions that may hold the odd cell of a needle or path task."""
    scene = task.scene
    if task.kind is Kind.PATH_IMAGE:
        return frozenset((0, r, c) for r, c in bresenham(*scene.marks))
    if isinstance(scene, Video):
        return _frame_positions(scene, 0, len(scene.frames) - 1)
    return frozenset((0, r, c) for r in range(scene.rows) for c in range(scene.cols))


def _symbol(scene: Scene, p: Position) -> int:
    t, r, c = p
    grid = scene.frames[t] if isinstance(scene, Video) else scene
    return grid.at(r, c)


def consistent_candidates(state: EnvState) -> tuple[str, ...]:
    """Candidates not contradicted by the coarse view or any revealed cell."""
    task = state.task
    cands = candidate_answers(task)
    coarse = state.observations[0].payload
    majorities = set(coarse.majorities)
    kind = task.kind

    if kind in (Kind.GLOBAL_IMAGE, Kind.GLOBAL_VIDEO):
        if len(majorities) == 1:
            (d,) = majorities
            return tuple(x for x in cands if symbol_code(x) == d)
        return cands

    if kind in (Kind.NEEDLE_IMAGE, Kind.NEEDLE_VIDEO, Kind.PATH_IMAGE):
        if len(majorities) != 1:
            return cands
        (background,) = majorities
        region = _region(task)
        seen = region & state.revealed
        odd = {_symbol(task.scene, p) for p in seen} - {background}
        if odd:
            return tuple(x for x in cands if symbol_code(x) in odd)
        if len(seen) == len(region):
            return ()
        return tuple(x for x in cands if symbol_code(x) != background)

    if kind is Kind.CLIP_COUNT:
        t0, t1 = task.query.window
        target = task.query.target
        video = task.scene
        frame_size = video.frames[0].rows * video.frames[0].cols
        per_frame = Counter(p[0] for p in state.revealed)
        hits = {p[0] for p in state.revealed if _symbol(video, p) == target}
        lo = unknown = 0
        for t in range(t0, t1 + 1):
            if t in hits:
                lo += 1
            elif per_frame[t] < frame_size:
                unknown += 1
        return tuple(x for x in cands if lo <= int(x) <= lo + unknown)

    return cands


def consistent_answers(state: EnvState) -> tuple[str, ...]:
    """Multiple-choice options still consistent with everything observed."""
    if state.task.answer_spec.type is not AnswerType.MULTIPLE_CHOICE:
        raise EnvUsageError("consistent_answers needs a multiple-choice task")
    return consistent_candidates(state)


# ---------------------------------------------------------------------------
# Task generation


@dataclass(frozen=True)
class GenSpec:
    counts: Mapping[Kind, int] = field(default_factory=dict)
    grid_size: int = 8
    frames: int = 8
    options: int = 4
    alphabet: int = 6
    seed: int = 0

    def __post_init__(self) -> None:
        if any(n < 0 for n in self.counts.values()):
            raise ValueError("task counts must be non-negative")
        if min(self.grid_size, self.frames, self.options, self.alphabet) < 2:
            raise ValueError("sizes must be at least 2")
        if self.grid_size < 4:
            raise ValueError("grid_size must be at least 4 so a single odd cell cannot flip a quadrant")
        if self.options > 8:
            raise ValueError("at most 8 options")
        if self.options > self.alphabet - 1:
            raise ValueError("options must leave one symbol free for the background")
        if self.alphabet > 26:
            raise ValueError("alphabet is limited to 26 symbols")


TOOL_REQUIRED = {
    Kind.NEEDLE_IMAGE: True,
    Kind.GLOBAL_IMAGE: False,
    Kind.NEEDLE_VIDEO: True,
    Kind.CLIP_COUNT: True,
    Kind.PATH_IMAGE: True,
    Kind.GLOBAL_VIDEO: False,
}


def _options(rng: np.random.Generator, gold: int, pool: list[int], n: int) -> tuple[str, ...]:
    others = [s for s in pool if s != gold]
    picked = [gold] + [int(s) for s in rng.choice(others, size=n - 1, replace=False)]
    return tuple(symbol_name(s) for s in rng.permutation(picked))


def _uniform(rows: int, cols: int, symbol: int) -> list[int]:
    return [symbol] * (rows * cols)


def _dominated_grid(rng, spec: GenSpec, dominant: int) -> list[int]:
    n = spec.grid_size
    while True:
        cells = [
            dominant if rng.random() < 0.55 else int(rng.integers(spec.alphabet))
            for _ in range(n * n)
        ]
        grid = Grid(n, n, tuple(cells))
        ok = True
        for r0, c0, r1, c1 in quadrant_boxes(n, n):
            counts = Counter(grid.at(r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1))
            top = counts.pop(dominant, 0)
            if counts and max(counts.values()) >= top:
                ok = False
        if ok:
            return cells


def _gen_needle_image(rng, spec: GenSpec):
    n, alpha = spec.grid_size, spec.alphabet
    bg = int(rng.integers(alpha))
    pool = [s for s in range(alpha) if s != bg]
    needle = int(rng.choice(pool))
    cells = _uniform(n, n, bg)
    cells[int(rng.integers(n * n))] = needle
    question = "Exactly one cell differs from the background. Which symbol does it hold?"
    return Grid(n, n, tuple(cells)), question, needle, pool, Query()


def _gen_global_image(rng, spec: GenSpec):
    n, alpha = spec.grid_size, spec.alphabet
    dom = int(rng.integers(alpha))
    cells = _dominated_grid(rng, spec, dom)
    question = "Which symbol covers the largest share of the image?"
    return Grid(n, n, tuple(cells)), question, dom, list(range(alpha)), Query()


def _gen_path_image(rng, spec: GenSpec):
    n, alpha = spec.grid_size, spec.alphabet
    bg = int(rng.integers(alpha))
    pool = [s for s in range(alpha) if s != bg]
    gate = int(rng.choice(pool))
    while True:
        p0 = (int(rng.integers(n)), int(rng.integers(n)))
        p1 = (int(rng.integers(n)), int(rng.integers(n)))
        line = bresenham(p0, p1)
        if len(line) >= 3:
            break
    on_path = set(line)
    while True:
        cells = _uniform(n, n, bg)
        r, c = line[1 + int(rng.integers(len(line) - 2))]
        cells[r * n + c] = gate
        off = [i for i in range(n * n) if divmod(i, n) not in on_path]
        for i in rng.choice(off, size=min(len(off), n * n // 8), replace=False):
            cells[int(i)] = int(rng.choice([s for s in pool if s != gate]))
        grid = Grid(n, n, tuple(cells), marks=(p0, p1))
        if set(quadrant_majorities(grid)) == {bg}:
            break
    question = "Follow the straight line between the two marked cells. Which symbol interrupts it?"
    return grid, question, gate, pool, Query()


def _gen_needle_video(rng, spec: GenSpec):
    n, alpha, nf = spec.grid_size, spec.alphabet, spec.frames
    bg = int(rng.integers(alpha))
    pool = [s for s in range(alpha) if s != bg]
    needle = int(rng.choice(pool))
    plain = Grid(n, n, tuple(_uniform(n, n, bg)))
    frames = [plain] * nf
    flash = _uniform(n, n, bg)
    flash[int(rng.integers(n * n))] = needle
    frames[int(rng.integers(nf))] = Grid(n, n, tuple(flash))
    question = "For one second a single cell flashes a different symbol. Which symbol?"
    return Video(tuple(frames)), question, needle, pool, Query()


def _gen_clip_count(rng, spec: GenSpec):
    n, alpha, nf = spec.grid_size, spec.alphabet, spec.frames
    bg = int(rng.integers(alpha))
    target = int(rng.choice([s for s in range(alpha) if s != bg]))
    halves = clip_halves(nf)
    t0, t1 = halves[int(rng.integers(len(halves)))]
    inside = list(range(t0, t1 + 1))
    count = 1 + int(rng.integers(len(inside)))
    shown = set(int(t) for t in rng.choice(inside, size=count, replace=False))
    # frames outside the window may show the target too; they must not be counted
    shown |= {t for t in range(nf) if not t0 <= t <= t1 and rng.random() < 0.5}
    frames = []
    for t in range(nf):
        cells = _uniform(n, n, bg)
        if t in shown:
            cells[int(rng.integers(n * n))] = target
        frames.append(Grid(n, n, tuple(cells)))
    question = (
        f"How many frames between second {t0} and second {t1} show the symbol {symbol_name(target)}?"
    )
    return Video(tuple(frames)), question, count, None, Query(target=target, window=(t0, t1))


def _gen_global_video(rng, spec: GenSpec):
    n, alpha, nf = spec.grid_size, spec.alphabet, spec.frames
    dom = int(rng.integers(alpha))
    frames = [Grid(n, n, tuple(_dominated_grid(rng, spec, dom)))]
    for _ in range(nf - 1):
        frames.append(Grid(n, n, tuple(int(s) for s in rng.integers(alpha, size=n * n))))
    question = "Which symbol dominates the opening frame?"
    return Video(tuple(frames)), question, dom, list(range(alpha)), Query()


_GENERATORS = {
    Kind.NEEDLE_IMAGE: _gen_needle_image,
    Kind.GLOBAL_IMAGE: _gen_global_image,
    Kind.PATH_IMAGE: _gen_path_image,
    Kind.NEEDLE_VIDEO: _gen_needle_video,
    Kind.CLIP_COUNT: _gen_clip_count,
    Kind.GLOBAL_VIDEO: _gen_global_video,
}


def generate_tasks(spec: GenSpec) -> list[Task]:
    """Synthesize tasks kind by kind; each task's randomness depends only on
    (seed, kind, index), so changing one count never perturbs other kinds."""
    tasks = []
    for kind in Kind:
        for i in range(spec.counts.get(kind, 0)):
            rng = np.random.default_rng(derive_seed(spec.seed, kind.value, i))
            scene, question, gold, pool, query = _GENERATORS[kind](rng, spec)
            if pool is None:
                answer = AnswerSpec(AnswerType.NUMERIC, gold=gold)
            else:
                options = _options(rng, gold, pool, spec.options)
                answer = AnswerSpec(AnswerType.MULTIPLE_CHOICE, gold=symbol_name(gold), options=options)
            tasks.append(
                Task(
                    id=f"{kind.value}-{i:04d}",
                    kind=kind,
                    scene=scene,
                    question=question,
                    answer_spec=answer,
                    tool_required=TOOL_REQUIRED[kind],
                    query=query,
                )
            )
    return tasks


def modality_index(modality: Modality) -> int:
    return (Modality.IMAGE, Modality.MULTI_IMAGE, Modality.VIDEO).index(modality)
