"""Token sampling from a per-position categorical row."""

from __future__ import annotations

import numpy as np

from .errors import NumericError

SAMPLING_MODES = ("gumbel_argmax", "categorical")


def _tempered(row: np.ndarray, temperature: float) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logits = np.log(row) / temperature
    logits = logits - logits.max()
    p = np.exp(logits)
    return p / p.sum()


def sample_token(row, mode: str = "gumbel_argmax", temperature: float = 1.0,
                 top_p: float = 1.0, rng: np.random.Generator | None = None) -> tuple[int, float]:
    """Draw one token id from a probability row.

    Returns ``(token, prob)`` where ``prob`` is the probability of ``token``
    under the temperature-scaled distribution (before Gumbel noise or top-p
    truncation). ``temperature == 0`` means argmax, and the reported
    probability is then the untempered model probability.
    """
    row = np.asarray(row, dtype=np.float64)
    if not np.all(np.isfinite(row)) or row.sum() <= 0:
        raise NumericError("degenerate probability row")
    if mode not in SAMPLING_MODES:
        raise ValueError(f"unknown sampling mode {mode!r}")
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if temperature == 0:
        tok = int(np.argmax(row))
        return tok, float(row[tok])
    if rng is None:
        raise ValueError("rng required for temperature > 0")

    p = _tempered(row, temperature)
    q = _nucleus(p, top_p) if top_p < 1.0 else p
    if mode == "gumbel_argmax":
        with np.errstate(divide="ignore"):
            keys = np.log(q) + rng.gumbel(size=q.shape)
        tok = int(np.argmax(keys))
        return tok, float(p[tok])

    u = rng.random()
    tok = int(np.searchsorted(np.cumsum(q), u * q.sum(), side="right"))
    tok = min(tok, len(q) - 1)
    while q[tok] == 0.0:  # guard against landing on a zero-mass tail entry
        tok -= 1
    return tok, float(p[tok])


def _nucleus(p: np.ndarray, top_p: float) -> np.ndarray:
    """Smallest most-probable set with mass >= top_p, renormalized."""
    order = np.argsort(-p, kind="stable")
    cum = np.cumsum(p[order])
    keep = order[: int(np.searchsorted(cum, top_p)) + 1]
    q = np.zeros_like(p)
    q[keep] = p[keep]
    return q / q.sum()
