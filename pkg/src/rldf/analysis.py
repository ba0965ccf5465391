"""Diagnostics over recorded trajectories and loss records.

Everything here is read-only: token-level confidence statistics pulled from
trajectory logs, their correlations and histograms, a confidence profile
over normalized denoising progress, and per-configuration summaries of
gradient norms and token utility.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats as sps

from .diffusion import DenoiseTrajectory
from .errors import UndefinedCorrelationError

DEFAULT_EDGES = tuple(np.round(np.linspace(0.0, 1.0, 11), 10))
HIGH_CONFIDENCE = 0.9
N_BUCKETS = 20


@dataclass(frozen=True)
class TokenStat:
    position: int
    step: int
    prob: float
    entropy: float


@dataclass(frozen=True)
class LossReport:
    """One update's loss summary under a given target configuration."""
    target: str
    clipped: bool
    loss: float
    kl: float
    grad_norm: float
    token_utility: float
    step: int = 0
    min_target_prob: float = math.nan  # smallest behavior-policy prob among scored tokens


def entropy_nats(dist) -> np.ndarray:
    """Entropy of each row of ``dist`` (rows need not be normalized)."""
    return sps.entropy(np.asarray(dist, dtype=np.float64), axis=-1)


def token_stats(trajs: Iterable[DenoiseTrajectory]) -> list[TokenStat]:
    out = []
    for tr in trajs:
        for ev in tr.events:
            if len(ev.entropies) != len(ev.positions):
                raise ValueError("trajectory events carry no entropies")
            for i, p, h in zip(ev.positions, ev.probs, ev.entropies):
                out.append(TokenStat(i, ev.step, float(p), float(h)))
    return out


def correlate(token_stats_: Sequence[TokenStat]) -> tuple[float, float]:
    """Pearson r and Spearman rho (average ranks) between probability and entropy."""
    if len(token_stats_) < 3:
        raise UndefinedCorrelationError("need at least 3 token stats")
    p = np.array([s.prob for s in token_stats_])
    h = np.array([s.entropy for s in token_stats_])
    if np.ptp(p) == 0 or np.ptp(h) == 0:
        raise UndefinedCorrelationError("probability or entropy has zero variance")
    r = sps.pearsonr(p, h).statistic
    rho = sps.spearmanr(p, h).statistic
    return float(np.clip(r, -1, 1)), float(np.clip(rho, -1, 1))


@dataclass(frozen=True)
class Histogram:
    edges: tuple[float, ...]
    counts: tuple[int, ...]
    high_fraction: float  # share of probabilities >= 0.9

    @property
    def total(self) -> int:
        return sum(self.counts)


def bin_probabilities(token_stats_: Sequence[TokenStat] | Sequence[float],
                      edges: Sequence[float] = DEFAULT_EDGES) -> Histogram:
    """Counts per bin; bins are half-open on the right except the last."""
    p = np.array([getattr(s, "prob", s) for s in token_stats_], dtype=np.float64)
    counts, _ = np.histogram(p, bins=np.asarray(edges, dtype=np.float64))
    high = float(np.mean(p >= HIGH_CONFIDENCE)) if p.size else 0.0
    return Histogram(tuple(float(e) for e in edges), tuple(int(c) for c in counts), high)


def confidence_profile(trajs: Iterable[DenoiseTrajectory], n_buckets: int = N_BUCKETS) -> list[dict]:
    """Committed-token probability by normalized progress through denoising.

    The event at step ``t`` of a ``T``-step trajectory sits at progress
    ``(T - t + 0.5) / T``, so trajectories of any length share one axis.
    Returns one row per bucket with the count, mean and interquartile range.
    """
    buckets: list[list[float]] = [[] for _ in range(n_buckets)]
    for tr in trajs:
        T = tr.T
        for ev in tr.events:
            b = min(int((T - ev.step + 0.5) / T * n_buckets), n_buckets - 1)
            buckets[b].extend(ev.probs)
    rows = []
    for b, vals in enumerate(buckets):
        v = np.asarray(vals, dtype=np.float64)
        q25, q75 = np.percentile(v, [25, 75]) if v.size else (math.nan, math.nan)
        rows.append({
            "bucket": b,
            "progress_lo": b / n_buckets,
            "progress_hi": (b + 1) / n_buckets,
            "n": int(v.size),
            "mean_prob": float(v.mean()) if v.size else math.nan,
            "q25": float(q25),
            "q75": float(q75),
        })
    return rows


def utility_report(reports: Iterable[LossReport]) -> list[dict]:
    """Mean grad norm, loss and token utility per (target, clipped)."""
    groups: dict = {}
    for r in reports:
        groups.setdefault((r.target, r.clipped), []).append(r)
    rows = []
    for (target, clipped), rs in sorted(groups.items()):
        rows.append({
            "target": target,
            "clipped": clipped,
            "n": len(rs),
            "mean_grad_norm": float(np.mean([r.grad_norm for r in rs])),
            "mean_loss": float(np.mean([r.loss for r in rs])),
            "mean_token_utility": float(np.mean([r.token_utility for r in rs])),
        })
    return rows


def _fmt(v):
    if isinstance(v, bool) or v is None:
        return str(v)
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def write_csv(path, rows: Sequence[dict], header: Sequence[str] | None = None) -> None:
    """Header row plus one line per dict; floats to 6 significant digits."""
    if header is None:
        header = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row.get(k)) for k in header])
