"""AT-GRPO: tool-benefit reward shaping, group advantages, and the policy objective."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .core import RewardBreakdown, Trajectory

_LOG_TINY = math.log(1e-300)


class PolicyEvaluator(Protocol):
    """What the objective needs from a policy, evaluated on recorded trajectories."""

    def step_log_probs(self, theta: np.ndarray, traj: Trajectory) -> np.ndarray: ...

    def grad_log_prob(self, theta: np.ndarray, traj: Trajectory) -> np.ndarray: ...

    def kl(self, theta: np.ndarray, theta_ref: np.ndarray, traj: Trajectory) -> float: ...

    def grad_kl(self, theta: np.ndarray, theta_ref: np.ndarray, traj: Trajectory) -> np.ndarray: ...


@dataclass(frozen=True)
class ShapingConfig:
    gamma: float = 2.0
    alpha: float = 0.6
    beta: float = 0.04
    clip_epsilon: float | None = None

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.clip_epsilon is not None and not self.clip_epsilon > 0:
            raise ValueError("clip_epsilon must be positive when set")


def shaped_tool_reward(delta_s: float, n_tool: int, n_max: int, gamma: float) -> float:
    """Tool reward: the benefit score under a Gaussian decay centred on n_max.

    The magnitude peaks at ``n_tool == n_max`` for either sign of
    ``delta_s``: helpful tasks earn more for each call, unhelpful ones are
    penalized more for each call.
    """
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    if not 0 <= n_tool <= n_max:
        raise ValueError(f"n_tool={n_tool} outside [0, {n_max}]")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    x = (n_tool - n_max) / n_max
    return delta_s * math.exp(-gamma * x * x)


def total_reward(base: float, tool: float, alpha: float) -> float:
    return base + alpha * tool


def group_advantages(rewards: Sequence[float], eps: float = 1e-8) -> np.ndarray:
    """Standardize rewards within a group (population std).

    Groups whose std falls below ``eps`` get all-zero advantages.
    """
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or len(r) < 2:
        raise ValueError("a group needs at least two rewards")
    std = r.std()
    if std < eps:
        return np.zeros_like(r)
    return (r - r.mean()) / std


@dataclass(frozen=True)
class GroupResult:
    task_id: str
    trajectories: tuple[Trajectory, ...]
    rewards: tuple[RewardBreakdown, ...]
    advantages: tuple[float, ...]
    alpha: float

    def __post_init__(self) -> None:
        g = len(self.trajectories)
        if g < 2 or len(self.rewards) != g or len(self.advantages) != g:
            raise ValueError("a group needs G >= 2 trajectories, rewards and advantages")

    @property
    def group_size(self) -> int:
        return len(self.trajectories)


def sequence_log_ratio(traj: Trajectory, theta, theta_old, evaluator: PolicyEvaluator) -> float:
    """log pi_theta(o|q) - log pi_theta_old(o|q), summed over decision steps."""
    new = evaluator.step_log_probs(theta, traj)
    old = evaluator.step_log_probs(theta_old, traj)
    if np.any(new < _LOG_TINY) or np.any(old < _LOG_TINY):
        raise FloatingPointError(f"decision probability below 1e-300 in trajectory {traj.task_id}")
    return float(np.sum(new - old))


def kl_divergence(theta, theta_ref, traj: Trajectory, evaluator: PolicyEvaluator) -> float:
    """Exact KL(pi_theta || pi_ref) summed over the trajectory's decision states."""
    if np.shape(theta) != np.shape(theta_ref):
        raise ValueError("parameter vectors differ in dimension")
    return evaluator.kl(theta, theta_ref, traj)


def _surrogate(
    groups: Sequence[GroupResult],
    theta,
    theta_old,
    theta_ref,
    cfg: ShapingConfig,
    evaluator: PolicyEvaluator,
    with_gradient: bool,
) -> tuple[float, np.ndarray | None]:
    theta = np.asarray(theta, dtype=float)
    if not (theta.shape == np.shape(theta_old) == np.shape(theta_ref)):
        raise ValueError("theta, theta_old and theta_ref must share one dimension")
    if not groups:
        raise ValueError("no groups to optimize")

    objective = 0.0
    grad = np.zeros_like(theta) if with_gradient else None
    for group in groups:
        g = group.group_size
        for traj, adv in zip(group.trajectories, group.advantages):
            ratio = math.exp(sequence_log_ratio(traj, theta, theta_old, evaluator))
            surrogate = ratio * adv
            active = True
            if cfg.clip_epsilon is not None:
                eps = cfg.clip_epsilon
                clipped = min(max(ratio, 1.0 - eps), 1.0 + eps) * adv
                if clipped < surrogate:
                    surrogate, active = clipped, False
            kl = evaluator.kl(theta, theta_ref, traj) if cfg.beta else 0.0
            objective += (surrogate - cfg.beta * kl) / g
            if with_gradient:
                if active and adv != 0.0:
                    grad += (adv * ratio / g) * evaluator.grad_log_prob(theta, traj)
                if cfg.beta:
                    grad -= (cfg.beta / g) * evaluator.grad_kl(theta, theta_ref, traj)
    n = len(groups)
    return objective / n, (grad / n if with_gradient else None)


def objective(groups, theta, theta_old, theta_ref, cfg: ShapingConfig, evaluator: PolicyEvaluator) -> float:
    """The AT-GRPO objective alone, without its gradient."""
    return _surrogate(groups, theta, theta_old, theta_ref, cfg, evaluator, False)[0]


def objective_and_gradient(
    groups: Sequence[GroupResult],
    theta,
    theta_old,
    theta_ref,
    cfg: ShapingConfig,
    evaluator: PolicyEvaluator,
) -> tuple[float, np.ndarray]:
    """Group-averaged surrogate minus beta * KL, and its exact gradient in theta.

    Advantages are constants. With ``cfg.clip_epsilon`` set, each ratio term
    becomes the clipped surrogate min(r A, clip(r, 1-eps, 1+eps) A).
    """
    return _surrogate(groups, theta, theta_old, theta_ref, cfg, evaluator, True)
