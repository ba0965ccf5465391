"""Policy-loss estimators for masked diffusion policies.

Every estimator reduces to a list of :class:`StepItem` -- a conditioning
state, the positions scored in it, their target tokens and the response's
advantage -- followed by one batched forward pass of the current policy.
What differs is how items are chosen:

``rldf``              uncertainty-weighted sample of ``k`` recorded steps,
                      scoring the clean response on positions the behavior
                      policy already finds plausible (token clipping).
``sequential_oracle`` every recorded step, with either the clean-state
                      target (``x0``) or only the tokens committed at that
                      step (``x_prev``).
``full_seq``          a single fully masked state, all positions.
``random_mask``       a single randomly masked state, masked positions.

:func:`loss_sequential_oracle` recomputes the exhaustive estimator one step
at a time without batching and serves as the reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import tokens
from .diffusion import DenoiseTrajectory, SequenceState, reconstruct_state
from .model import DTYPE, LOG_P_MIN, DenoiserModel
from .timesteps import sample_timesteps, step_uncertainty

ESTIMATORS = ("rldf", "full_seq", "random_mask", "sequential_oracle")
TARGETS = ("x0", "x_prev")
NORMALIZATIONS = ("sample", "token")


@dataclass(frozen=True)
class LossConfig:
    estimator: str = "rldf"
    target: str = "x0"
    k: int = 16
    tau_sample: float = 1.0
    epsilon: float = 0.2
    clip_threshold: float = 0.2
    beta: float = 0.01
    normalization: str = "sample"
    mask_rate: float | None = None  # random_mask only; None draws U(0, 1) per response

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if self.k < 1 or self.tau_sample <= 0 or self.epsilon < 0 or self.beta < 0:
            raise ValueError("k >= 1, tau_sample > 0, epsilon >= 0, beta >= 0 required")
        if not 0.0 <= self.clip_threshold <= 1.0:
            raise ValueError("clip_threshold must lie in [0, 1]")


@dataclass(frozen=True)
class ClippedCleanState:
    kept_positions: tuple[int, ...]
    kept_tokens: tuple[int, ...]
    clip_threshold: float
    length: int

    @property
    def utility(self) -> float:
        return len(self.kept_positions) / self.length


def clip_tokens(o0: SequenceState, o_t: SequenceState, dists: np.ndarray,
                threshold: float) -> ClippedCleanState:
    """Keep the positions masked in ``o_t`` whose clean token has probability
    >= ``threshold`` under ``dists`` (the behavior policy's prediction at
    ``o_t``)."""
    keep = [i for i in o_t.masked_positions if dists[i][o0.response[i]] >= threshold]
    return ClippedCleanState(tuple(keep), tuple(o0.response[i] for i in keep), threshold, len(o0))


def next_state_targets(traj: DenoiseTrajectory, t: int) -> ClippedCleanState:
    """Positions committed at step ``t`` with their tokens (no clipping)."""
    ev = traj.event_at(t)
    return ClippedCleanState(ev.positions, tuple(traj.final.response[i] for i in ev.positions),
                             0.0, traj.length)


# -- per-token terms ------------------------------------------------------------

def clamp_logp(logp: torch.Tensor) -> tuple[torch.Tensor, int]:
    n = int((logp < LOG_P_MIN).sum())
    return logp.clamp(min=LOG_P_MIN), n


def reinforce_terms(logp: torch.Tensor, advantage) -> torch.Tensor:
    return -logp * advantage


def ppo_terms(logp: torch.Tensor, old_logp: torch.Tensor, advantage, epsilon: float) -> torch.Tensor:
    ratio = torch.exp(logp - old_logp)
    return -torch.minimum(ratio * advantage, ratio.clamp(1 - epsilon, 1 + epsilon) * advantage)


def k3_terms(logp: torch.Tensor, ref_logp: torch.Tensor) -> torch.Tensor:
    """``rho - log rho - 1`` with ``rho = p_ref / p_theta``; nonnegative."""
    log_rho = ref_logp - logp
    return torch.exp(log_rho) - log_rho - 1


@dataclass
class StepLoss:
    policy_sum: torch.Tensor
    kl_sum: torch.Tensor
    tokens_used: int
    length: int
    clamped: int = 0

    @property
    def policy_term(self) -> torch.Tensor:
        return self.policy_sum / max(self.tokens_used, 1)

    @property
    def kl_term(self) -> torch.Tensor:
        return self.kl_sum / max(self.tokens_used, 1)

    @property
    def token_utility(self) -> float:
        return self.tokens_used / self.length

    @classmethod
    def of(cls, policy: float, kl: float = 0.0, tokens_used: int = 1, length: int = 1) -> "StepLoss":
        """Build from per-token means (handy for fixtures)."""
        return cls(torch.tensor(policy * tokens_used, dtype=DTYPE),
                   torch.tensor(kl * tokens_used, dtype=DTYPE), tokens_used, length)


# -- single-state reference path ---------------------------------------------------

def _logp_at(model: DenoiserModel, o_t: SequenceState, positions, toks) -> torch.Tensor:
    logp = model.response_logprobs([o_t])[0]
    idx = torch.tensor(list(positions), dtype=torch.long)
    return logp[idx, torch.tensor(list(toks), dtype=torch.long)]


def _empty(length: int) -> StepLoss:
    z = torch.zeros((), dtype=DTYPE)
    return StepLoss(z, z, 0, length)


def kl_k3(model, ref_model, o_t: SequenceState, positions, toks) -> torch.Tensor:
    """Mean K3 estimate over ``positions``; differentiable through ``model``."""
    if not positions:
        return torch.zeros((), dtype=DTYPE)
    logp, _ = clamp_logp(_logp_at(model, o_t, positions, toks))
    with torch.no_grad():
        ref, _ = clamp_logp(_logp_at(ref_model, o_t, positions, toks))
    return k3_terms(logp, ref).mean()


def _step_loss(model, o_t, clean, advantage, old_model, epsilon, ref_model) -> StepLoss:
    if not clean.kept_positions:
        return _empty(clean.length)
    logp, clamped = clamp_logp(_logp_at(model, o_t, clean.kept_positions, clean.kept_tokens))
    if old_model is None:
        terms = reinforce_terms(logp, advantage)
    else:
        with torch.no_grad():
            old, c2 = clamp_logp(_logp_at(old_model, o_t, clean.kept_positions, clean.kept_tokens))
        clamped += c2
        terms = ppo_terms(logp, old, advantage, epsilon)
    kl = torch.zeros((), dtype=DTYPE)
    if ref_model is not None:
        with torch.no_grad():
            ref, _ = clamp_logp(_logp_at(ref_model, o_t, clean.kept_positions, clean.kept_tokens))
        kl = k3_terms(logp, ref).sum()
    return StepLoss(terms.sum(), kl, len(clean.kept_positions), clean.length, clamped)


def step_loss_reinforce(model, o_t: SequenceState, clean: ClippedCleanState, advantage: float,
                        ref_model=None) -> StepLoss:
    return _step_loss(model, o_t, clean, advantage, None, 0.0, ref_model)


def step_loss_ppo(model, old_model, o_t: SequenceState, clean: ClippedCleanState, advantage: float,
                  epsilon: float = 0.2, ref_model=None) -> StepLoss:
    return _step_loss(model, o_t, clean, advantage, old_model, epsilon, ref_model)


# -- aggregation --------------------------------------------------------------------

def aggregate_sample_level(per_response: Sequence[Sequence[StepLoss]], beta: float) -> torch.Tensor:
    """Mean over responses of the mean over (non-empty) steps of
    ``policy + beta * kl``.  Steps with no kept tokens drop out of the
    per-response denominator."""
    total = torch.zeros((), dtype=DTYPE)
    for steps in per_response:
        live = [s for s in steps if s.tokens_used]
        if live:
            total = total + sum(s.policy_term + beta * s.kl_term for s in live) / len(live)
    return total / max(len(per_response), 1)


def aggregate_token_level(per_response: Sequence[Sequence[StepLoss]], beta: float) -> torch.Tensor:
    """Every kept token in the group weighs the same."""
    steps = [s for group in per_response for s in group]
    n = sum(s.tokens_used for s in steps)
    if n == 0:
        return torch.zeros((), dtype=DTYPE)
    return sum(s.policy_sum + beta * s.kl_sum for s in steps) / n


def aggregate(per_response, beta: float, normalization: str = "sample") -> torch.Tensor:
    if normalization == "token":
        return aggregate_token_level(per_response, beta)
    return aggregate_sample_level(per_response, beta)


# -- batched item path ------------------------------------------------------------------

@dataclass
class StepItem:
    response: int
    step: int | None
    state: SequenceState
    positions: tuple[int, ...]
    targets: tuple[int, ...]
    advantage: float
    old_logp: np.ndarray | None = None
    ref_logp: np.ndarray | None = None
    flags: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.state)


def _batched_logprobs(model, states: Sequence[SequenceState]) -> torch.Tensor:
    """Stack states of equal shape; returns ``[N, L, V]`` log-probs."""
    return model.response_logprobs(list(states))


def _shape_groups(items: Sequence[StepItem]) -> dict:
    groups: dict = {}
    for n, it in enumerate(items):
        groups.setdefault((len(it.state.prompt), it.length), []).append(n)
    return groups


def gather_item_logprobs(model, items: Sequence[StepItem]) -> list[torch.Tensor]:
    """Log-probability of each item's targets, one forward per shape group."""
    out: list = [None] * len(items)
    for idx in _shape_groups(items).values():
        logp = _batched_logprobs(model, [items[n].state for n in idx])
        for row, n in enumerate(idx):
            it = items[n]
            pos = torch.tensor(it.positions, dtype=torch.long)
            tgt = torch.tensor(it.targets, dtype=torch.long)
            out[n] = logp[row, pos, tgt]
    return out


@torch.no_grad()
def attach_logprobs(model, items: Sequence[StepItem], attr: str) -> None:
    """Freeze ``model``'s target log-probs on every item (``old_logp`` or ``ref_logp``)."""
    for it, lp in zip(items, gather_item_logprobs(model, items)):
        setattr(it, attr, lp.numpy().copy())


def item_step_losses(model, items: Sequence[StepItem], *, ppo: bool = False, epsilon: float = 0.2,
                     use_ref: bool = False) -> list[StepLoss]:
    losses = []
    for it, lp in zip(items, gather_item_logprobs(model, items)):
        if not it.positions:
            losses.append(_empty(it.length))
            continue
        logp, clamped = clamp_logp(lp)
        if ppo:
            old, c2 = clamp_logp(torch.from_numpy(it.old_logp))
            clamped += c2
            terms = ppo_terms(logp, old, it.advantage, epsilon)
        else:
            terms = reinforce_terms(logp, it.advantage)
        kl = torch.zeros((), dtype=DTYPE)
        if use_ref:
            ref, _ = clamp_logp(torch.from_numpy(it.ref_logp))
            kl = k3_terms(logp, ref).sum()
        losses.append(StepLoss(terms.sum(), kl, len(it.positions), it.length, clamped))
    return losses


def group_by_response(items: Sequence[StepItem], losses: Sequence[StepLoss], n_responses: int):
    per = [[] for _ in range(n_responses)]
    for it, sl in zip(items, losses):
        per[it.response].append(sl)
    return per


@torch.no_grad()
def rldf_items(old_model, trajs: Sequence[DenoiseTrajectory], advantages, cfg: LossConfig,
               rng: np.random.Generator, all_steps: bool = False) -> list[StepItem]:
    """Select steps per response and fix the scored positions.

    Step selection uses the probabilities recorded during rollout; token
    clipping uses ``old_model``'s prediction at each selected state, and those
    log-probs are stored as the items' ``old_logp``.
    """
    items: list[StepItem] = []
    for b, (tr, adv) in enumerate(zip(trajs, advantages)):
        if all_steps:
            idx = np.arange(tr.T)
        else:
            P = [step_uncertainty(ev) for ev in tr.events]
            idx = sample_timesteps(P, cfg.k, cfg.tau_sample, rng)
        for j in idx:
            t = tr.events[j].step
            items.append(StepItem(b, t, reconstruct_state(tr, t), (), (), float(adv)))
    if not items:
        return items
    if cfg.target == "x_prev":
        for it in items:
            clean = next_state_targets(trajs[it.response], it.step)
            it.positions, it.targets = clean.kept_positions, clean.kept_tokens
        attach_logprobs(old_model, items, "old_logp")
        return items
    for n_idx in _shape_groups(items).values():
        logp = _batched_logprobs(old_model, [items[n].state for n in n_idx])
        probs, logp = logp.exp().numpy(), logp.numpy()
        for row, n in enumerate(n_idx):
            it = items[n]
            clean = clip_tokens(trajs[it.response].final, it.state, probs[row], cfg.clip_threshold)
            it.positions, it.targets = clean.kept_positions, clean.kept_tokens
            it.old_logp = logp[row][list(clean.kept_positions), list(clean.kept_tokens)].copy()
    return items


def full_seq_items(trajs_or_finals, advantages) -> list[StepItem]:
    items = []
    for b, (o0, adv) in enumerate(zip(trajs_or_finals, advantages)):
        o0 = getattr(o0, "final", o0)
        L = len(o0)
        items.append(StepItem(b, None, SequenceState.masked(o0.prompt, L), tuple(range(L)),
                              o0.response, float(adv)))
    return items


def random_mask_items(trajs_or_finals, advantages, rng: np.random.Generator,
                      mask_rate: float | None = None) -> list[StepItem]:
    items = []
    for b, (o0, adv) in enumerate(zip(trajs_or_finals, advantages)):
        o0 = getattr(o0, "final", o0)
        rate = rng.uniform(0.0, 1.0) if mask_rate is None else mask_rate
        hide = np.flatnonzero(rng.random(len(o0)) < rate)
        resp = list(o0.response)
        for i in hide:
            resp[i] = tokens.MASK
        items.append(StepItem(b, None, SequenceState(o0.prompt, tuple(resp)), tuple(int(i) for i in hide),
                              tuple(o0.response[i] for i in hide), float(adv)))
    return items


def build_items(old_model, trajs, advantages, cfg: LossConfig, rng) -> list[StepItem]:
    if cfg.estimator == "rldf":
        items = rldf_items(old_model, trajs, advantages, cfg, rng)
    elif cfg.estimator == "sequential_oracle":
        items = rldf_items(old_model, trajs, advantages, cfg, rng, all_steps=True)
    elif cfg.estimator == "full_seq":
        items = full_seq_items(trajs, advantages)
        attach_logprobs(old_model, items, "old_logp")
    else:
        items = random_mask_items(trajs, advantages, rng, cfg.mask_rate)
        attach_logprobs(old_model, items, "old_logp")
    return items


def estimate_loss(model, items: Sequence[StepItem], n_responses: int, cfg: LossConfig, *,
                  ppo: bool = False, use_ref: bool = False) -> tuple[torch.Tensor, list[StepLoss]]:
    losses = item_step_losses(model, items, ppo=ppo, epsilon=cfg.epsilon, use_ref=use_ref)
    per = group_by_response(items, losses, n_responses)
    beta = cfg.beta if use_ref else 0.0
    return aggregate(per, beta, cfg.normalization), losses


def rldf_loss(model, trajs, advantages, cfg: LossConfig, rng, *, old_model=None,
              ref_model=None) -> tuple[torch.Tensor, list[StepLoss]]:
    """One-call estimate for a group of responses.

    Without ``old_model`` the current policy filters tokens and the
    REINFORCE form is used; with it, PPO ratios against ``old_model``.
    """
    behavior = model if old_model is None else old_model
    items = build_items(behavior, trajs, advantages, cfg, rng)
    if ref_model is not None:
        attach_logprobs(ref_model, items, "ref_logp")
    return estimate_loss(model, items, len(trajs), cfg, ppo=old_model is not None,
                         use_ref=ref_model is not None)


# -- baselines and exhaustive reference ------------------------------------------------

def _score(model, state, clean, advantage, epsilon, old_model, ref_model):
    if old_model is None:
        return step_loss_reinforce(model, state, clean, advantage, ref_model)
    return step_loss_ppo(model, old_model, state, clean, advantage, epsilon, ref_model)


def loss_full_seq(model, o0: SequenceState, advantage: float, epsilon: float = 0.2, *,
                  old_model=None, ref_model=None, beta: float = 0.0) -> torch.Tensor:
    """Score every response token conditioned on the prompt alone."""
    L = len(o0)
    clean = ClippedCleanState(tuple(range(L)), o0.response, 0.0, L)
    sl = _score(model, SequenceState.masked(o0.prompt, L), clean, advantage, epsilon, old_model, ref_model)
    return aggregate_sample_level([[sl]], beta)


def loss_random_mask(model, o0: SequenceState, mask_rate: float, advantage: float, epsilon: float,
                     rng: np.random.Generator, *, old_model=None, ref_model=None,
                     beta: float = 0.0) -> torch.Tensor:
    """Score a random mask set, conditioned on the visible remainder."""
    hide = [i for i, h in enumerate(rng.random(len(o0)) < mask_rate) if h]
    resp = tuple(tokens.MASK if i in hide else t for i, t in enumerate(o0.response))
    clean = ClippedCleanState(tuple(hide), tuple(o0.response[i] for i in hide), 0.0, len(o0))
    sl = _score(model, SequenceState(o0.prompt, resp), clean, advantage, epsilon, old_model, ref_model)
    return aggregate_sample_level([[sl]], beta)


def loss_sequential_oracle(model, traj: DenoiseTrajectory, advantage: float, epsilon: float = 0.2,
                           target: str = "x0", *, clip_threshold: float = 0.2, old_model=None,
                           ref_model=None, beta: float = 0.0) -> tuple[torch.Tensor, list[StepLoss]]:
    """Walk every recorded step, one forward pass each.

    ``x0`` scores clipped clean tokens at each state; ``x_prev`` scores only
    the tokens committed at that step.
    """
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}")
    behavior = model if old_model is None else old_model
    steps = []
    for t in range(traj.T, 0, -1):
        o_t = reconstruct_state(traj, t)
        if target == "x0":
            with torch.no_grad():
                dists = behavior.response_logprobs([o_t])[0].exp().numpy()
            clean = clip_tokens(traj.final, o_t, dists, clip_threshold)
        else:
            clean = next_state_targets(traj, t)
        steps.append(_score(model, o_t, clean, advantage, epsilon, old_model, ref_model))
    return aggregate_sample_level([steps], beta), steps
