"""Forward masking, confidence-based unmasking, and denoising trajectories.

Two notions of "time" live here and are never converted into one another:

* ``mask_ratio`` -- the continuous probability with which ``forward_mask``
  hides each response token.
* ``step`` -- the ordinal of an unmask event.  A trajectory with ``T`` events
  goes ``o_T`` (fully masked) -> ... -> ``o_0`` (clean); the event with
  ``step == t`` turns ``o_t`` into ``o_{t-1}``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
from scipy.special import entr

from . import tokens
from .errors import InvalidStateError
from .sampling import SAMPLING_MODES, sample_token

STRATEGIES = ("static_topk", "dynamic_threshold")


@dataclass(frozen=True)
class SequenceState:
    prompt: tuple[int, ...]
    response: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        object.__setattr__(self, "response", tuple(int(t) for t in self.response))
        if tokens.MASK in self.prompt:
            raise ValueError("prompt may not contain MASK")

    @classmethod
    def masked(cls, prompt: Sequence[int], length: int) -> "SequenceState":
        return cls(tuple(prompt), (tokens.MASK,) * length)

    @property
    def mask_flags(self) -> tuple[bool, ...]:
        return tuple(t == tokens.MASK for t in self.response)

    @property
    def masked_positions(self) -> list[int]:
        return [i for i, t in enumerate(self.response) if t == tokens.MASK]

    @property
    def n_masked(self) -> int:
        return sum(self.mask_flags)

    def __len__(self) -> int:
        return len(self.response)

    @property
    def ids(self) -> list[int]:
        return list(self.prompt) + list(self.response)

    def commit(self, positions: Iterable[int], values: Iterable[int]) -> "SequenceState":
        resp = list(self.response)
        for i, v in zip(positions, values):
            if resp[i] != tokens.MASK:
                raise InvalidStateError(f"position {i} already committed")
            if v == tokens.MASK:
                raise ValueError("cannot commit the MASK token")
            resp[i] = int(v)
        return SequenceState(self.prompt, tuple(resp))


@dataclass(frozen=True)
class UnmaskEvent:
    step: int
    positions: tuple[int, ...]
    probs: tuple[float, ...]
    # entropy (nats) of the full predicted distribution at each position
    entropies: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.positions:
            raise ValueError("an unmask event must commit at least one position")
        if len(self.probs) != len(self.positions):
            raise ValueError("one probability per committed position")


@dataclass(frozen=True)
class DecodeConfig:
    length: int
    strategy: str = "dynamic_threshold"
    k_per_step: int = 1
    threshold: float = 0.9
    block_size: int = 32
    max_steps: int | None = None
    sampling: str = "gumbel_argmax"
    temperature: float = 1.0
    top_p: float = 1.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.sampling not in SAMPLING_MODES:
            raise ValueError(f"sampling must be one of {SAMPLING_MODES}")
        if self.length < 1 or self.k_per_step < 1 or self.block_size < 1:
            raise ValueError("length, k_per_step and block_size must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.temperature < 0 or not 0.0 < self.top_p <= 1.0:
            raise ValueError("temperature must be >= 0 and top_p in (0, 1]")

    @property
    def step_budget(self) -> int:
        return self.length if self.max_steps is None else self.max_steps

    def block_of(self, position: int) -> int:
        return position // self.block_size


@dataclass(frozen=True)
class DenoiseTrajectory:
    prompt: tuple[int, ...]
    events: tuple[UnmaskEvent, ...]
    final: SequenceState
    decode_config: DecodeConfig
    complete: bool = True
    seed: int | None = None

    @property
    def T(self) -> int:
        return len(self.events)

    @property
    def length(self) -> int:
        return len(self.final)

    def event_at(self, step: int) -> UnmaskEvent:
        if not 1 <= step <= self.T:
            raise ValueError(f"step {step} outside [1, {self.T}]")
        return self.events[self.T - step]

    def state_at(self, t: int) -> SequenceState:
        return reconstruct_state(self, t)


class Predictor(Protocol):
    def predict(self, state: SequenceState) -> np.ndarray: ...


def forward_mask(x0: SequenceState, t_ratio: float, rng: np.random.Generator) -> SequenceState:
    """Hide each response token independently with probability ``t_ratio``."""
    if not 0.0 <= t_ratio <= 1.0:
        raise ValueError(f"t_ratio must lie in [0, 1], got {t_ratio}")
    if x0.n_masked:
        raise ValueError("forward_mask expects a clean state")
    hide = rng.random(len(x0)) < t_ratio
    resp = tuple(tokens.MASK if h else t for h, t in zip(hide, x0.response))
    return SequenceState(x0.prompt, resp)


def reconstruct_state(traj: DenoiseTrajectory, t: int) -> SequenceState:
    """Rebuild ``o_t``: positions from events with step > t are committed."""
    if not 0 <= t <= traj.T:
        raise ValueError(f"t must lie in [0, {traj.T}], got {t}")
    resp = [tokens.MASK] * traj.length
    for ev in traj.events:
        if ev.step > t:
            for i in ev.positions:
                resp[i] = traj.final.response[i]
    return SequenceState(traj.prompt, tuple(resp))


def _active_candidates(state: SequenceState, cfg: DecodeConfig) -> list[int]:
    masked = state.masked_positions
    if not masked:
        raise InvalidStateError("no masked positions left")
    block = cfg.block_of(masked[0])
    return [i for i in masked if cfg.block_of(i) == block]


def _propose(state, dist, cfg, rng):
    cand = _active_candidates(state, cfg)
    picks = [sample_token(dist[i], cfg.sampling, cfg.temperature, cfg.top_p, rng) for i in cand]
    return cand, [p[0] for p in picks], [p[1] for p in picks]


def _finish(state, dist, cand, toks, probs, chosen):
    chosen = sorted(chosen)
    pos = tuple(cand[j] for j in chosen)
    ev = UnmaskEvent(
        step=0,
        positions=pos,
        probs=tuple(probs[j] for j in chosen),
        entropies=tuple(float(entr(dist[i]).sum()) for i in pos),
    )
    return state.commit(pos, [toks[j] for j in chosen]), ev


def dynamic_unmask_step(state: SequenceState, dist: np.ndarray, cfg: DecodeConfig,
                        rng: np.random.Generator) -> tuple[SequenceState, UnmaskEvent]:
    """Commit every in-block masked position whose committed-token probability
    is >= threshold, or the single most confident one if none qualifies.

    The returned event carries ``step=0``; ``decode`` renumbers events once
    the trajectory length is known.
    """
    cand, toks, probs = _propose(state, dist, cfg, rng)
    chosen = [j for j, p in enumerate(probs) if p >= cfg.threshold]
    if not chosen:
        chosen = [int(np.argmax(probs))]  # argmax returns the lowest index on ties
    return _finish(state, dist, cand, toks, probs, chosen)


def static_unmask_step(state: SequenceState, dist: np.ndarray, cfg: DecodeConfig,
                       rng: np.random.Generator) -> tuple[SequenceState, UnmaskEvent]:
    """Commit the ``k_per_step`` most confident in-block masked positions."""
    cand, toks, probs = _propose(state, dist, cfg, rng)
    order = sorted(range(len(cand)), key=lambda j: (-probs[j], j))
    return _finish(state, dist, cand, toks, probs, order[: cfg.k_per_step])


def _forced_step(state: SequenceState, dist: np.ndarray):
    pos = state.masked_positions
    toks = [int(np.argmax(dist[i])) for i in pos]
    ev = UnmaskEvent(
        step=0,
        positions=tuple(pos),
        probs=tuple(float(dist[i][t]) for i, t in zip(pos, toks)),
        entropies=tuple(float(entr(dist[i]).sum()) for i in pos),
    )
    return state.commit(pos, toks), ev


def decode(model: Predictor, prompt: Sequence[int], cfg: DecodeConfig,
           rng: np.random.Generator, seed: int | None = None) -> DenoiseTrajectory:
    """Run block-wise denoising from the fully masked response.

    If the step budget runs out with masks left, the last allowed step
    commits every remaining mask to its argmax token and the trajectory is
    returned with ``complete=False``.
    """
    step_fn = dynamic_unmask_step if cfg.strategy == "dynamic_threshold" else static_unmask_step
    state = SequenceState.masked(prompt, cfg.length)
    events: list[UnmaskEvent] = []
    complete = True
    budget = cfg.step_budget
    while state.n_masked:
        dist = model.predict(state)
        nxt, ev = step_fn(state, dist, cfg, rng)
        if nxt.n_masked and len(events) == budget - 1:
            nxt, ev = _forced_step(state, dist)
            complete = False
        events.append(ev)
        state = nxt
    T = len(events)
    events = tuple(replace(ev, step=T - j) for j, ev in enumerate(events))
    return DenoiseTrajectory(tuple(prompt), events, state, cfg, complete, seed)


# -- line-delimited trajectory log -------------------------------------------

def _f32(x: float) -> float:
    return float(f"{np.float32(x):.9g}")


def trajectory_to_record(traj: DenoiseTrajectory) -> dict:
    return {
        "prompt": list(traj.prompt),
        "final": list(traj.final.response),
        "events": [
            {
                "step": ev.step,
                "positions": list(ev.positions),
                "probs": [_f32(p) for p in ev.probs],
                "entropies": [_f32(h) for h in ev.entropies],
            }
            for ev in traj.events
        ],
        "decode_config": asdict(traj.decode_config),
        "complete": traj.complete,
        "seed": traj.seed,
    }


def trajectory_from_record(rec: dict) -> DenoiseTrajectory:
    events = tuple(
        UnmaskEvent(e["step"], tuple(e["positions"]), tuple(e["probs"]), tuple(e.get("entropies", ())))
        for e in rec["events"]
    )
    return DenoiseTrajectory(
        prompt=tuple(rec["prompt"]),
        events=events,
        final=SequenceState(tuple(rec["prompt"]), tuple(rec["final"])),
        decode_config=DecodeConfig(**rec["decode_config"]),
        complete=rec.get("complete", True),
        seed=rec.get("seed"),
    )


def write_trajectories(path, trajs: Iterable[DenoiseTrajectory], append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        for tr in trajs:
            fh.write(json.dumps(trajectory_to_record(tr), separators=(",", ":")) + "\n")


def read_trajectories(path) -> list[DenoiseTrajectory]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(trajectory_from_record(json.loads(line)))
    return out
