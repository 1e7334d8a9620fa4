"""Rule-based verifiable rewards for the four answer types, plus format checking."""

from __future__ import annotations

import re
import string
import warnings
from collections import Counter
from dataclasses import dataclass

from .core import (
    Action,
    AnswerSpec,
    AnswerType,
    FinalAnswer,
    Observation,
    RewardBreakdown,
    Task,
    Termination,
    Trajectory,
)

_NUMBER = re.compile(r"[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?")
_STRIP = string.punctuation + string.whitespace


class VerifierUsageError(ValueError):
    """Raised when a verifier is handed an answer spec of the wrong type."""


class RougeFallbackWarning(UserWarning):
    """Every ROUGE component was undefined; the free-form score fell back to 0."""


@dataclass(frozen=True)
class VerifierConfig:
    numeric_rel_tol: float = 1e-6
    format_weight: float = 0.1
    wer_clamp: bool = True

    def __post_init__(self) -> None:
        for name in ("numeric_rel_tol", "format_weight"):
            value = getattr(self, name)
            if not (value >= 0 and value != float("inf")):
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


def _expect(spec: AnswerSpec, kind: AnswerType) -> None:
    if spec.type is not kind:
        raise VerifierUsageError(f"expected a {kind.value} answer spec, got {spec.type.value}")


def normalize_choice(text: str) -> str:
    return str(text).strip().casefold().strip(_STRIP)


def verify_multiple_choice(pred: str, spec: AnswerSpec) -> float:
    _expect(spec, AnswerType.MULTIPLE_CHOICE)
    return float(normalize_choice(pred) == normalize_choice(spec.gold))


def parse_last_number(text: str) -> float | None:
    matches = _NUMBER.findall(text)
    if not matches:
        return None
    return float(matches[-1])


def verify_numeric(pred: str, spec: AnswerSpec, cfg: VerifierConfig = VerifierConfig()) -> float:
    _expect(spec, AnswerType.NUMERIC)
    x = parse_last_number(pred)
    if x is None:
        return 0.0
    gold = float(spec.gold)
    return float(abs(x - gold) <= cfg.numeric_rel_tol * max(1.0, abs(gold)))


def edit_distance(hyp: list[str], ref: list[str]) -> int:
    """Levenshtein distance over token lists, unit costs, two-row DP."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i]
        for j, r in enumerate(ref, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r)))
        prev = cur
    return prev[-1]


def word_error_rate(hyp: str, ref: str) -> float:
    ref_tokens = ref.split()
    if not ref_tokens:
        raise ValueError("word error rate is undefined for an empty reference")
    return edit_distance(hyp.split(), ref_tokens) / len(ref_tokens)


def verify_ocr(hyp: str, spec: AnswerSpec, cfg: VerifierConfig = VerifierConfig()) -> float:
    _expect(spec, AnswerType.OCR)
    score = 1.0 - word_error_rate(hyp, str(spec.gold))
    return max(0.0, score) if cfg.wer_clamp else score


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _f1(matches: int, n_hyp: int, n_ref: int) -> float:
    """F1 of precision matches/n_hyp and recall matches/n_ref.

    2PR/(P+R) simplifies to 2m/(n_hyp+n_ref), which rounds only once.
    """
    return 2 * matches / (n_hyp + n_ref)


def rouge_n(hyp: str, ref: str, n: int) -> float | None:
    """ROUGE-N F1 with clipped counts; None when the reference has no n-grams."""
    if n < 1:
        raise ValueError("n must be a positive integer")
    ref_grams = _ngrams(ref.split(), n)
    if not ref_grams:
        return None
    hyp_grams = _ngrams(hyp.split(), n)
    if not hyp_grams:
        return 0.0
    matches = sum((hyp_grams & ref_grams).values())
    return _f1(matches, sum(hyp_grams.values()), sum(ref_grams.values()))


def lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: str, ref: str) -> float | None:
    """ROUGE-L F1 from the token LCS; None only when both sides are empty."""
    h, r = hyp.split(), ref.split()
    if not h and not r:
        return None
    if not h or not r:
        return 0.0
    return _f1(lcs_length(h, r), len(h), len(r))


def verify_freeform(hyp: str, spec: AnswerSpec) -> float:
    _expect(spec, AnswerType.FREE_FORM)
    gold = str(spec.gold)
    parts = [s for s in (rouge_n(hyp, gold, 1), rouge_n(hyp, gold, 2), rouge_l(hyp, gold)) if s is not None]
    if not parts:
        warnings.warn("all ROUGE components undefined; scoring 0", RougeFallbackWarning, stacklevel=2)
        return 0.0
    return sum(parts) / len(parts)


def check_format(traj: Trajectory) -> bool:
    """Structural well-formedness: paired actions, one terminal answer, answered."""
    if traj.terminated_by is not Termination.ANSWER:
        return False
    steps = traj.steps
    if not steps or not isinstance(steps[-1], FinalAnswer):
        return False
    if any(isinstance(s, FinalAnswer) for s in steps[:-1]):
        return False
    for i, s in enumerate(steps):
        if isinstance(s, Action) and not (i + 1 < len(steps) and isinstance(steps[i + 1], Observation)):
            return False
    return True


def correctness(answer: str, spec: AnswerSpec, cfg: VerifierConfig = VerifierConfig()) -> float:
    """Dispatch to the verifier for ``spec.type``."""
    if spec.type is AnswerType.MULTIPLE_CHOICE:
        return verify_multiple_choice(answer, spec)
    if spec.type is AnswerType.NUMERIC:
        return verify_numeric(answer, spec, cfg)
    if spec.type is AnswerType.OCR:
        return verify_ocr(answer, spec, cfg)
    return verify_freeform(answer, spec)


def base_reward(traj: Trajectory, task: Task, cfg: VerifierConfig = VerifierConfig()) -> RewardBreakdown:
    if traj.task_id != task.id:
        raise ValueError(f"trajectory for {traj.task_id!r} scored against task {task.id!r}")
    answered = traj.terminated_by is Termination.ANSWER
    score = correctness(traj.final_answer, task.answer_spec, cfg) if answered else 0.0
    fmt = check_format(traj)
    return RewardBreakdown(base=score + cfg.format_weight * fmt, correctness=score, format_ok=fmt)
