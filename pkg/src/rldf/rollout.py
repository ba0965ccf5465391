"""Grouped rollouts, rewards and group-relative advantages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import DecodeConfig, DenoiseTrajectory, Predictor, decode
from .tasks import TaskInstance

DEFAULT_STD_FLOOR = 1e-4


@dataclass
class RolloutGroup:
    task: TaskInstance
    trajectories: list[DenoiseTrajectory]
    rewards: np.ndarray | None = None
    advantages: np.ndarray | None = None

    @property
    def prompt(self) -> tuple[int, ...]:
        return self.task.prompt

    @property
    def G(self) -> int:
        return len(self.trajectories)


def rollout_group(model_old: Predictor, task: TaskInstance, G: int, decode_cfg: DecodeConfig,
                  rng: np.random.Generator) -> RolloutGroup:
    """Decode ``G`` responses, each from its own seeded stream.

    Rewards and advantages are left unset; see ``score_group``.
    """
    if G < 2:
        raise ValueError("group size must be at least 2")
    seeds = rng.integers(0, 2**63, size=G, dtype=np.int64)
    trajs = [decode(model_old, task.prompt, decode_cfg, np.random.default_rng(int(s)), seed=int(s))
             for s in seeds]
    return RolloutGroup(task, trajs)


def score_group(group: RolloutGroup) -> np.ndarray:
    """Reward each trajectory; incomplete decodes score 0."""
    group.rewards = np.array([
        group.task.reward(tr.final.response) if tr.complete else 0.0
        for tr in group.trajectories
    ])
    return group.rewards


def normalize_advantages(rewards, std_floor: float = DEFAULT_STD_FLOOR) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two rewards")
    mu = r.mean()
    sigma = np.sqrt(np.mean((r - mu) ** 2))
    return (r - mu) / max(sigma, std_floor)


def filter_group(group: RolloutGroup) -> bool:
    """True to retain: the group carries a nonzero policy gradient."""
    return bool(np.var(group.rewards) > 0)
