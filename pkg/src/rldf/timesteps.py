"""Uncertainty-weighted selection of denoising steps.

Each step of a recorded trajectory is scored by the mean negative log
probability of the tokens it committed.  A temperature-scaled softmax over
those scores gives sampling weights, and ``k`` steps are drawn without
replacement by successive renormalization.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .diffusion import UnmaskEvent

P_MIN = 1e-12
WEIGHT_FLOOR = 1e-15
TAU_DETERMINISTIC = 1e-6


def step_uncertainty(event: UnmaskEvent, p_min: float = P_MIN) -> float:
    probs = np.asarray(event.probs, dtype=np.float64)
    if probs.size == 0:
        raise ValueError("event has no committed probabilities")
    return float(-np.mean(np.log(np.maximum(probs, p_min))))


def step_softmax(uncertainty: Sequence[float], tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = np.asarray(uncertainty, dtype=np.float64) / tau
    w = np.exp(z - z.max())
    w /= w.sum()
    if np.any(w < WEIGHT_FLOOR):
        w = np.maximum(w, WEIGHT_FLOOR)
        w /= w.sum()
    return w


def top_k_steps(uncertainty: Sequence[float], k: int) -> np.ndarray:
    P = np.asarray(uncertainty, dtype=np.float64)
    order = sorted(range(len(P)), key=lambda j: (-P[j], j))
    return np.sort(np.array(order[: min(k, len(P))], dtype=np.int64))


def sample_timesteps(uncertainty: Sequence[float], k: int, tau: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Indices (into ``uncertainty``) of ``min(k, T)`` distinct steps, sorted.

    At ``tau <= 1e-6`` the choice is the deterministic top-k, ties broken by
    lowest index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    T = len(uncertainty)
    if k >= T:
        return np.arange(T, dtype=np.int64)
    if tau <= TAU_DETERMINISTIC:
        return top_k_steps(uncertainty, k)
    w = step_softmax(uncertainty, tau)
    alive = np.ones(T, dtype=bool)
    picked = []
    for _ in range(k):
        mass = np.where(alive, w, 0.0)
        cum = np.cumsum(mass)
        j = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        j = min(j, T - 1)
        while not alive[j]:
            j -= 1
        alive[j] = False
        picked.append(j)
    return np.sort(np.array(picked, dtype=np.int64))
