"""Featurized softmax decision policy, scripted expert, and SFT cold start.

The parameter vector is laid out as one weight block per action type (each
tool template, plus a single "answer" block shared by every answer option).
An action's score is its block's weights dotted with the state features:

    f1 bias
    f2 ambiguity indicator, 1 if at least two answers remain consistent
    f3 tool budget fraction used
    f4..f6 modality one-hot (image, multi-image, video)
    f7 fraction of the answer candidates still consistent

Features never include the task kind or whether a tool is required, so any
tool-use preference has to come from what the observations leave ambiguous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .core import (
    Action,
    AnswerType,
    FinalAnswer,
    Task,
    Termination,
    Thought,
    ToolCall,
    Trajectory,
)
from .toolenv import (
    EnvConfig,
    EnvState,
    TEMPLATE_NAMES,
    can_use_tool,
    candidate_answers,
    consistent_candidates,
    derive_seed,
    execute,
    finish,
    modality_index,
    reset,
    tool_templates,
)

SCHEMA_VERSION = "adatool-policy-v1"
BLOCKS = TEMPLATE_NAMES + ("answer",)
BLOCK_INDEX = {name: i for i, name in enumerate(BLOCKS)}
ANSWER_BLOCK = BLOCK_INDEX["answer"]
N_FEATURES = 7
N_BLOCKS = len(BLOCKS)
DIM = N_BLOCKS * N_FEATURES

PolicyParams = np.ndarray  # flat float64 vector of length DIM
Move = Union[ToolCall, str]  # a tool call, or an answer string


class ReplayError(RuntimeError):
    """A recorded trajectory does not replay in its environment."""


class SchemaMismatchError(ValueError):
    """A checkpoint was written for a different feature schema."""


def zeros() -> PolicyParams:
    return np.zeros(DIM)


def block_view(theta: PolicyParams) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (DIM,):
        raise ValueError(f"policy parameters must have shape ({DIM},), got {theta.shape}")
    return theta.reshape(N_BLOCKS, N_FEATURES)


def weight_index(block: str, feature: int) -> int:
    """Flat index of feature ``feature`` (0-based) in ``block``."""
    if not 0 <= feature < N_FEATURES:
        raise ValueError(f"feature index {feature} out of range")
    return BLOCK_INDEX[block] * N_FEATURES + feature


# ---------------------------------------------------------------------------
# State featurization and admissible actions


@dataclass(frozen=True)
class DecisionContext:
    features: np.ndarray  # (N_FEATURES,)
    blocks: np.ndarray  # (m,) block index per admissible action
    moves: tuple[Move, ...]  # the admissible actions, aligned with ``blocks``
    n_consistent: int


def decision_context(state: EnvState) -> DecisionContext:
    task = state.task
    consistent = consistent_candidates(state)
    n_cands = len(candidate_answers(task))
    f = np.zeros(N_FEATURES)
    f[0] = 1.0
    f[1] = float(len(consistent) >= 2)
    f[2] = state.tools_used / state.n_max
    f[3 + modality_index(task.modality)] = 1.0
    f[6] = len(consistent) / n_cands

    blocks: list[int] = []
    moves: list[Move] = []
    if can_use_tool(state):
        for name, call in tool_templates(task):
            if call not in state.calls:
                blocks.append(BLOCK_INDEX[name])
                moves.append(call)
    # answering stays possible even if the oracle is left with nothing consistent
    for answer in consistent or candidate_answers(task):
        blocks.append(ANSWER_BLOCK)
        moves.append(answer)
    return DecisionContext(f, np.array(blocks, dtype=np.intp), tuple(moves), len(consistent))


def features(state: EnvState) -> np.ndarray:
    return decision_context(state).features


def admissible_actions(state: EnvState) -> tuple[Move, ...]:
    return decision_context(state).moves


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = np.exp(scores - scores.max())
    return z / z.sum()


def _context_probs(theta: PolicyParams, ctx: DecisionContext) -> np.ndarray:
    return _softmax(block_view(theta)[ctx.blocks] @ ctx.features)


def action_distribution(theta: PolicyParams, state: EnvState) -> np.ndarray:
    """Probabilities aligned with :func:`admissible_actions`."""
    if state.done:
        raise ValueError("no decision to make in a finished episode")
    return _context_probs(theta, decision_context(state))


# ---------------------------------------------------------------------------
# Decision tables: padded per-trajectory arrays for exact evaluation


@dataclass(frozen=True)
class DecisionTable:
    features: np.ndarray  # (T, N_FEATURES)
    blocks: np.ndarray  # (T, M), padded with 0
    mask: np.ndarray  # (T, M) bool
    choice: np.ndarray  # (T,)
    # recent log_probs results keyed by parameter bytes; theta_old and theta_ref
    # are evaluated many times per update
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def build(cls, rows: Sequence[tuple[DecisionContext, int]]) -> DecisionTable:
        if not rows:
            return cls(np.zeros((0, N_FEATURES)), np.zeros((0, 1), np.intp), np.zeros((0, 1), bool), np.zeros(0, np.intp))
        width = max(len(ctx.blocks) for ctx, _ in rows)
        blocks = np.zeros((len(rows), width), dtype=np.intp)
        mask = np.zeros((len(rows), width), dtype=bool)
        for t, (ctx, _) in enumerate(rows):
            blocks[t, : len(ctx.blocks)] = ctx.blocks
            mask[t, : len(ctx.blocks)] = True
        return cls(
            features=np.stack([ctx.features for ctx, _ in rows]),
            blocks=blocks,
            mask=mask,
            choice=np.array([c for _, c in rows], dtype=np.intp),
        )

    def __len__(self) -> int:
        return len(self.choice)

    def log_probs(self, theta: PolicyParams) -> np.ndarray:
        """(T, M) log-probabilities; padded slots are -inf. The result is read-only."""
        w = block_view(theta)
        key = w.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        scores = np.einsum("tmf,tf->tm", w[self.blocks], self.features)
        scores = np.where(self.mask, scores, -np.inf)
        top = scores.max(axis=1, keepdims=True)
        lse = top + np.log(np.exp(scores - top).sum(axis=1, keepdims=True))
        out = scores - lse
        out.flags.writeable = False
        if len(self._cache) >= 4:
            self._cache.pop(next(iter(self._cache)))
        self._cache[key] = out
        return out

    def taken_log_probs(self, theta: PolicyParams) -> np.ndarray:
        return self.log_probs(theta)[np.arange(len(self)), self.choice]

    def scatter(self, coef: np.ndarray) -> np.ndarray:
        """Map per-action logit coefficients (T, M) to a parameter-space vector."""
        grad = np.zeros((N_BLOCKS, N_FEATURES))
        contrib = coef[:, :, None] * self.features[:, None, :]
        np.add.at(grad, self.blocks[self.mask], contrib[self.mask])
        return grad.ravel()

    def grad_log_prob(self, theta: PolicyParams) -> np.ndarray:
        p = np.exp(self.log_probs(theta))
        coef = -p
        coef[np.arange(len(self)), self.choice] += 1.0
        return self.scatter(coef)

    def kl(self, theta: PolicyParams, theta_ref: PolicyParams) -> float:
        """Sum over decision states of KL(pi_theta || pi_ref)."""
        lp, lq = self._masked_pair(theta, theta_ref)
        return float((np.exp(lp) * (lp - lq)).sum())

    def _masked_pair(self, theta, theta_ref):
        # padded slots become 0 so that exp() and differences stay finite there
        return (
            np.where(self.mask, self.log_probs(theta), 0.0),
            np.where(self.mask, self.log_probs(theta_ref), 0.0),
        )

    def grad_kl(self, theta: PolicyParams, theta_ref: PolicyParams) -> np.ndarray:
        lp, lq = self._masked_pair(theta, theta_ref)
        p = np.where(self.mask, np.exp(lp), 0.0)
        diff = lp - lq
        per_state = (p * diff).sum(axis=1, keepdims=True)
        return self.scatter(p * (diff - per_state))


# ---------------------------------------------------------------------------
# Rollouts


def _thought(state: EnvState, n_consistent: int) -> Thought:
    return Thought(
        f"considering {n_consistent} consistent options, budget {state.tools_used}/{state.n_max}"
    )


def rollout(
    theta: PolicyParams,
    task: Task,
    env: EnvConfig = EnvConfig(),
    seed: int | None = None,
    greedy: bool = False,
) -> tuple[Trajectory, DecisionTable]:
    """Run one episode; returns the trajectory and its decision table.

    Sampling draws from ``numpy.random.default_rng(seed)``; ``greedy`` takes
    the argmax action (first index on ties) and ignores the seed.
    """
    rng = None if greedy else np.random.default_rng(seed)
    state = reset(task, env.n_max, env.step_limit)
    steps: list = []
    rows: list[tuple[DecisionContext, int]] = []
    answer = ""
    turns = 0
    while True:
        if state.done:
            ended = Termination.LENGTH_LIMIT
            break
        if env.turn_limit is not None and turns >= env.turn_limit:
            ended = Termination.TURN_LIMIT
            break
        ctx = decision_context(state)
        probs = _context_probs(theta, ctx)
        if greedy:
            k = int(np.argmax(probs))
        else:
            k = min(int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right")), len(probs) - 1)
        rows.append((ctx, k))
        steps.append(_thought(state, ctx.n_consistent))
        dist = tuple(probs.tolist())
        logp = math.log(dist[k])
        move = ctx.moves[k]
        turns += 1
        if isinstance(move, str):
            steps.append(FinalAnswer(move, logp, dist, k))
            state = finish(state)
            answer = move
            ended = Termination.ANSWER
            break
        state, obs = execute(state, move)
        steps += [Action(move, logp, dist, k), obs]
    traj = Trajectory(task.id, tuple(steps), answer, ended)
    return traj, DecisionTable.build(rows)


def sample_trajectory(theta: PolicyParams, task: Task, env: EnvConfig = EnvConfig(), seed: int = 0) -> Trajectory:
    return rollout(theta, task, env, seed)[0]


def replay(task: Task, traj: Trajectory, env: EnvConfig = EnvConfig()) -> DecisionTable:
    """Rebuild the decision table of ``traj`` by re-running its environment.

    Raises :class:`ReplayError` if any recorded decision or observation
    disagrees with the replay.
    """
    if traj.task_id != task.id:
        raise ReplayError(f"trajectory for {traj.task_id!r} replayed on task {task.id!r}")
    state = reset(task, env.n_max, env.step_limit)
    rows = []
    steps = traj.steps
    i = 0
    while i < len(steps):
        step = steps[i]
        if isinstance(step, Thought):
            i += 1
            continue
        if not isinstance(step, (Action, FinalAnswer)) or state.done:
            raise ReplayError(f"unexpected {type(step).__name__} at step {i}")
        ctx = decision_context(state)
        k = step.choice
        expected = step.tool_call if isinstance(step, Action) else step.text
        if not 0 <= k < len(ctx.moves) or ctx.moves[k] != expected:
            raise ReplayError(f"decision at step {i} is not admissible action {k} on replay")
        rows.append((ctx, k))
        if isinstance(step, FinalAnswer):
            state = finish(state)
            i += 1
            continue
        state, obs = execute(state, step.tool_call)
        if i + 1 >= len(steps) or steps[i + 1] != obs:
            raise ReplayError(f"observation after step {i} diverges on replay")
        i += 2
    return DecisionTable.build(rows)


def log_prob(theta: PolicyParams, traj: Trajectory, task: Task, env: EnvConfig = EnvConfig()) -> float:
    return float(replay(task, traj, env).taken_log_probs(theta).sum())


def grad_log_prob(theta: PolicyParams, traj: Trajectory, task: Task, env: EnvConfig = EnvConfig()) -> np.ndarray:
    return replay(task, traj, env).grad_log_prob(theta)


class SoftmaxEvaluator:
    """Evaluates the policy on recorded trajectories.

    Decision tables are cached per trajectory object; unseen trajectories are
    replayed against the registered tasks.
    """

    def __init__(self, tasks: Iterable[Task] | Mapping[str, Task] = (), env: EnvConfig = EnvConfig()):
        self.tasks = dict(tasks) if isinstance(tasks, Mapping) else {t.id: t for t in tasks}
        self.env = env
        self._tables: dict[int, tuple[Trajectory, DecisionTable]] = {}

    def register(self, traj: Trajectory, table: DecisionTable) -> None:
        self._tables[id(traj)] = (traj, table)

    def table(self, traj: Trajectory) -> DecisionTable:
        hit = self._tables.get(id(traj))
        if hit is not None and hit[0] is traj:
            return hit[1]
        table = replay(self.tasks[traj.task_id], traj, self.env)
        self.register(traj, table)
        return table

    def clear(self) -> None:
        self._tables.clear()

    def step_log_probs(self, theta: PolicyParams, traj: Trajectory) -> np.ndarray:
        return self.table(traj).taken_log_probs(theta)

    def log_prob(self, theta: PolicyParams, traj: Trajectory) -> float:
        return float(self.step_log_probs(theta, traj).sum())

    def grad_log_prob(self, theta: PolicyParams, traj: Trajectory) -> np.ndarray:
        return self.table(traj).grad_log_prob(theta)

    def kl(self, theta: PolicyParams, theta_ref: PolicyParams, traj: Trajectory) -> float:
        return self.table(traj).kl(theta, theta_ref)

    def grad_kl(self, theta: PolicyParams, theta_ref: PolicyParams, traj: Trajectory) -> np.ndarray:
        return self.table(traj).grad_kl(theta, theta_ref)


# ---------------------------------------------------------------------------
# Scripted expert and SFT


@dataclass(frozen=True)
class Demonstration:
    task_id: str
    calls: tuple[ToolCall, ...]
    answer: str
    redundant_tools: int = 0


# tool family tried first when looking for the informative call
_PREFERRED = {"NeedleImage": "crop", "PathImage": "path", "NeedleVideo": "clip", "ClipCount": "clip"}


def gold_text(task: Task) -> str:
    gold = task.answer_spec.gold
    if task.answer_spec.type is AnswerType.NUMERIC and float(gold).is_integer():
        return str(int(float(gold)))
    return str(gold)


def informative_call(task: Task, env: EnvConfig = EnvConfig()) -> ToolCall | None:
    """A single template call that leaves only the gold answer consistent."""
    start = reset(task, env.n_max, env.step_limit)
    family = _PREFERRED.get(task.kind.value, "")
    templates = sorted(tool_templates(task), key=lambda nc: not nc[0].startswith(family))
    for _, call in templates:
        state, _ = execute(start, call)
        if consistent_candidates(state) == (gold_text(task),):
            return call
    return None


def scripted_expert(task: Task, redundancy_rate: float, seed: int, env: EnvConfig = EnvConfig()) -> Demonstration:
    if not 0.0 <= redundancy_rate <= 1.0:
        raise ValueError("redundancy_rate must lie in [0, 1]")
    gold = gold_text(task)
    if task.tool_required:
        call = informative_call(task, env)
        return Demonstration(task.id, () if call is None else (call,), gold)
    rng = np.random.default_rng(derive_seed(seed, task.id, "expert"))
    if rng.random() < redundancy_rate:
        templates = tool_templates(task)
        _, call = templates[int(rng.integers(len(templates)))]
        return Demonstration(task.id, (call,), gold, redundant_tools=1)
    return Demonstration(task.id, (), gold)


def demo_table(task: Task, demo: Demonstration, env: EnvConfig = EnvConfig()) -> DecisionTable:
    state = reset(task, env.n_max, env.step_limit)
    rows = []
    for move in demo.calls + (demo.answer,):
        ctx = decision_context(state)
        try:
            k = ctx.moves.index(move)
        except ValueError:
            raise ReplayError(f"demonstration move {move!r} is not admissible for {task.id}") from None
        rows.append((ctx, k))
        if isinstance(move, str):
            break
        state, _ = execute(state, move)
    return DecisionTable.build(rows)


def demo_log_likelihood(theta: PolicyParams, tables: Sequence[DecisionTable]) -> float:
    return float(sum(t.taken_log_probs(theta).sum() for t in tables))


def sft_fit(
    demos: Sequence[Demonstration],
    tasks: Mapping[str, Task],
    theta0: PolicyParams,
    learning_rate: float,
    epochs: int,
    env: EnvConfig = EnvConfig(),
) -> PolicyParams:
    """Full-batch gradient ascent on the mean demonstration log-likelihood."""
    if not demos:
        raise ValueError("sft_fit needs at least one demonstration")
    tables = [demo_table(tasks[d.task_id], d, env) for d in demos]
    theta = np.array(theta0, dtype=float)
    for epoch in range(epochs):
        loglik = demo_log_likelihood(theta, tables)
        if not math.isfinite(loglik):
            raise FloatingPointError(f"non-finite demonstration log-likelihood at epoch {epoch}")
        grad = sum(t.grad_log_prob(theta) for t in tables) / len(tables)
        theta = theta + learning_rate * grad
    return theta


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(theta: PolicyParams, path: str | Path) -> None:
    w = block_view(theta)
    lines = [f"# schema {SCHEMA_VERSION}"]
    for b, name in enumerate(BLOCKS):
        lines += [f"{name} {j} {float(w[b, j])!r}" for j in range(N_FEATURES)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> PolicyParams:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0].strip() != f"# schema {SCHEMA_VERSION}":
        found = text[0].strip() if text else "<empty>"
        raise SchemaMismatchError(f"expected schema {SCHEMA_VERSION}, found {found!r}")
    theta = zeros()
    seen = set()
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        try:
            name, index, value = line.split()
            idx = weight_index(name, int(index))
            theta[idx] = float(value)
        except (ValueError, KeyError) as exc:
            raise SchemaMismatchError(f"line {lineno}: cannot read {line!r} ({exc})") from None
        seen.add(idx)
    if len(seen) != DIM:
        raise SchemaMismatchError(f"checkpoint holds {len(seen)} of {DIM} weights")
    return theta
