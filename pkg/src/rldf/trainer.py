"""Pretraining, the RL outer loop and evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np
import torch

from .analysis import LossReport
from .diffusion import DecodeConfig, decode
from .losses import LossConfig, aggregate, attach_logprobs, build_items, estimate_loss, group_by_response, item_step_losses
from .model import DenoiserModel, clone_model, masked_lm_loss
from .optim import apply_gradients, clip_grad_norm, global_norm, grad, make_optimizer
from .rollout import filter_group, normalize_advantages, rollout_group, score_group
from .streams import substream
from .tasks import TaskInstance

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    G: int = 4
    batch_size: int = 8
    k: int = 16
    N: int = 1
    tau_sample: float = 1.0
    epsilon: float = 0.2
    clip_threshold: float = 0.2
    beta: float = 0.01
    std_floor: float = 1e-4
    lr: float = 1e-5
    max_grad_norm: float = 1.0
    total_steps: int = 200
    seed: int = 0
    estimator: str = "rldf"
    target: str = "x0"
    normalization: str = "sample"
    mask_rate: float | None = None
    optimizer: str = "adam"
    decode: DecodeConfig = field(default_factory=lambda: DecodeConfig(length=10))

    def __post_init__(self):
        if self.N < 1 or self.G < 2 or self.batch_size < 1:
            raise ValueError("N >= 1, G >= 2 and batch_size >= 1 required")
        if self.std_floor <= 0 or self.lr <= 0 or self.max_grad_norm <= 0:
            raise ValueError("std_floor, lr and max_grad_norm must be positive")
        self.loss_config()  # validates the estimator fields

    def loss_config(self) -> LossConfig:
        return LossConfig(
            estimator=self.estimator, target=self.target, k=self.k, tau_sample=self.tau_sample,
            epsilon=self.epsilon, clip_threshold=self.clip_threshold, beta=self.beta,
            normalization=self.normalization, mask_rate=self.mask_rate,
        )

    @property
    def uses_ppo(self) -> bool:
        return self.N > 1


@dataclass
class TrainState:
    model: DenoiserModel
    old: DenoiserModel
    ref: DenoiserModel
    optimizer: torch.optim.Optimizer
    step: int = 0
    history: list = field(default_factory=list)
    last_groups: list = field(default_factory=list, repr=False)  # rollouts of the latest step

    @classmethod
    def start(cls, model: DenoiserModel, cfg: TrainConfig) -> "TrainState":
        """The reference policy is frozen at the starting weights."""
        ref = clone_model(model)
        for p in ref.parameters():
            p.requires_grad_(False)
        old = clone_model(model)
        for p in old.parameters():
            p.requires_grad_(False)
        return cls(model, old, ref, make_optimizer(model.parameters(), cfg.optimizer, cfg.lr))


def _flag(flags: list, name: str, n: int = 1) -> None:
    if n:
        flags.append(name if n == 1 else f"{name}:{n}")


def prepare_batch(state: TrainState, tasks: Sequence[TaskInstance], cfg: TrainConfig,
                  rng: np.random.Generator):
    """Rollouts, rewards, filtering, advantages and step items for one outer step."""
    state.old.load_state_dict(state.model.state_dict())
    lcfg = cfg.loss_config()
    dcfg = cfg.decode
    groups, items, owners = [], [], []
    for task in tasks:
        g = rollout_group(state.old, task, cfg.G, replace(dcfg, length=task.response_length), rng)
        score_group(g)
        groups.append(g)
    n_resp = 0
    for gi, g in enumerate(groups):
        if not filter_group(g):
            continue
        g.advantages = normalize_advantages(g.rewards, cfg.std_floor)
        part = build_items(state.old, g.trajectories, g.advantages, lcfg, rng)
        for it in part:
            it.response += n_resp
        items.extend(part)
        owners.extend([gi] * g.G)
        n_resp += g.G
    if items:
        attach_logprobs(state.ref, items, "ref_logp")
    return groups, items, owners


def batch_loss(model, items, owners, cfg: TrainConfig):
    """Mean over retained groups of the aggregated group loss."""
    losses = item_step_losses(model, items, ppo=cfg.uses_ppo, epsilon=cfg.epsilon, use_ref=True)
    per = group_by_response(items, losses, len(owners))
    by_group: dict = {}
    for r, g in enumerate(owners):
        by_group.setdefault(g, []).append(per[r])
    loss = sum(aggregate(v, cfg.beta, cfg.normalization) for v in by_group.values()) / len(by_group)
    policy = sum(aggregate(v, 0.0, cfg.normalization) for v in by_group.values()) / len(by_group)
    return loss, policy, losses


def apply_update(state: TrainState, loss: torch.Tensor, cfg: TrainConfig, flags: list) -> float:
    """Backprop, clip, step.  Returns the pre-clip gradient norm (nan if skipped)."""
    if not torch.isfinite(loss):
        _flag(flags, "nonfinite_loss")
        return float("nan")
    if not loss.requires_grad:
        # every sampled step lost all its tokens to clipping
        _flag(flags, "no_kept_tokens")
        return 0.0
    named = [(n, p) for n, p in state.model.named_parameters() if p.requires_grad]
    grads = grad(loss, named)
    norm, finite = clip_grad_norm(grads, cfg.max_grad_norm)
    if not finite:
        _flag(flags, "nonfinite_grad")
        log.warning("skipping update with non-finite gradient at step %d", state.step)
        return norm
    apply_gradients(state.optimizer, named, grads)
    return norm


def train_step(state: TrainState, tasks: Sequence[TaskInstance], cfg: TrainConfig,
               rng: np.random.Generator) -> dict:
    flags: list = []
    groups, items, owners = prepare_batch(state, tasks, cfg, rng)
    state.last_groups = groups
    rewards = np.concatenate([g.rewards for g in groups])
    _flag(flags, "incomplete_rollouts", sum(not tr.complete for g in groups for tr in g.trajectories))
    metrics = {
        "step": state.step,
        "mean_reward": float(rewards.mean()),
        "loss": 0.0, "policy_loss": 0.0, "kl": 0.0, "grad_norm": 0.0, "token_utility": 0.0,
        "groups_retained": len(set(owners)),
        "steps_sampled": len(items),
    }
    if not items:
        _flag(flags, "all_groups_filtered")
    else:
        sums = np.zeros(4)
        for _ in range(cfg.N):
            loss, policy, losses = batch_loss(state.model, items, owners, cfg)
            live = [s for s in losses if s.tokens_used]
            kl = float(np.mean([s.kl_term.item() for s in live])) if live else 0.0
            norm = apply_update(state, loss, cfg, flags)
            sums += [loss.item(), policy.item(), kl, norm]
        sums /= cfg.N
        metrics.update(loss=sums[0], policy_loss=sums[1], kl=sums[2], grad_norm=sums[3])
        metrics["token_utility"] = float(np.mean([s.token_utility for s in losses]))
        _flag(flags, "clamped_probs", sum(s.clamped for s in losses))
        _flag(flags, "empty_steps", sum(not s.tokens_used for s in losses))
    metrics["flags"] = flags
    state.step += 1
    state.history.append(metrics)
    return metrics


def sample_batch(tasks: Sequence[TaskInstance], size: int, rng: np.random.Generator) -> list[TaskInstance]:
    idx = rng.choice(len(tasks), size=size, replace=len(tasks) < size)
    return [tasks[int(i)] for i in idx]


def train(state: TrainState, train_tasks: Sequence[TaskInstance], cfg: TrainConfig,
          steps: int | None = None) -> Iterator[dict]:
    """Run outer steps, yielding one metrics record each.

    Every step draws its prompts and its rollout/step-sampling randomness
    from streams named by ``(seed, label, step)``, so a resumed run
    reproduces the same sequence.
    """
    for _ in range(cfg.total_steps if steps is None else steps):
        batch = sample_batch(train_tasks, cfg.batch_size, substream(cfg.seed, "batch", state.step))
        yield train_step(state, batch, cfg, substream(cfg.seed, "step", state.step))


TARGET_VARIANTS = (("x0", True), ("x0", False), ("x_prev", False))


def target_probe(model, ref, trajs, advantages, cfg: TrainConfig, seed: int, step: int = 0) -> list[LossReport]:
    """Score one batch under each target variant with identical step choices.

    The loss is the REINFORCE form plus the KL term; ``grad_norm`` is the
    unclipped global gradient norm.  Nothing is updated.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    out = []
    for target, clipped in TARGET_VARIANTS:
        lcfg = replace(cfg.loss_config(), estimator="rldf", target=target,
                       clip_threshold=cfg.clip_threshold if clipped else 0.0)
        items = build_items(model, trajs, advantages, lcfg, substream(seed, "probe", step))
        attach_logprobs(ref, items, "ref_logp")
        loss, losses = estimate_loss(model, items, len(trajs), lcfg, use_ref=True)
        live = [s for s in losses if s.tokens_used]
        scored = np.concatenate([it.old_logp for it in items if it.positions] or [np.zeros(0)])
        out.append(LossReport(
            target=target, clipped=clipped, loss=loss.item(),
            kl=float(np.mean([s.kl_term.item() for s in live])) if live else 0.0,
            grad_norm=global_norm(grad(loss, named)) if loss.requires_grad else 0.0,
            token_utility=float(np.mean([s.token_utility for s in losses])) if losses else 0.0,
            step=step,
            min_target_prob=float(np.exp(scored.min())) if scored.size else float("nan"),
        ))
    return out


# -- pretraining ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 500
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    normalization: str = "length"


def _stack(tasks: Sequence[TaskInstance]) -> torch.Tensor:
    return torch.tensor([list(t.prompt) + list(t.solution) for t in tasks], dtype=torch.long)


def sample_t_ratio(rng: np.random.Generator, size: int) -> np.ndarray:
    """Uniform on (0, 1]."""
    return 1.0 - rng.random(size)


def mlm_batch_loss(model, tasks: Sequence[TaskInstance], rng: np.random.Generator,
                   normalization: str = "length") -> torch.Tensor:
    ids = _stack(tasks)
    P = len(tasks[0].prompt)
    L = ids.shape[1] - P
    t = sample_t_ratio(rng, len(tasks))
    hide = rng.random((len(tasks), L)) < t[:, None]
    return masked_lm_loss(model, ids, P, torch.from_numpy(hide), torch.from_numpy(t), normalization)


def pretrain(model: DenoiserModel, corpus: Sequence[TaskInstance], cfg: PretrainConfig) -> list[float]:
    """Masked-diffusion pretraining on gold responses; returns per-step losses."""
    opt = make_optimizer(model.parameters(), "adam", cfg.lr)
    history = []
    for step in range(cfg.steps):
        rng = substream(cfg.seed, "pretrain", step)
        batch = sample_batch(corpus, cfg.batch_size, rng)
        loss = mlm_batch_loss(model, batch, rng, cfg.normalization)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(loss.item())
    return history


@torch.no_grad()
def heldout_mlm_loss(model, tasks: Sequence[TaskInstance], seed: int = 0, repeats: int = 4) -> float:
    """MLM loss on a fixed set of mask draws (same draws for every model)."""
    vals = [float(mlm_batch_loss(model, tasks, substream(seed, "heldout", r))) for r in range(repeats)]
    return float(np.mean(vals))


# -- evaluation ----------------------------------------------------------------------------

def evaluate(model, tasks: Sequence[TaskInstance], decode_cfg: DecodeConfig, rng: np.random.Generator,
             step_multipliers: Sequence[float] = (1.0,)) -> dict:
    """Noise-free decoding reward, per family and per step budget.

    ``step_multipliers`` scales the step budget relative to the response
    length (``(0.5, 1, 2)`` mirrors short/regular/long generation budgets).
    """
    out: dict = {"by_family": {}, "by_budget": {}}
    base = replace(decode_cfg, temperature=0.0)
    all_rewards = []
    for mult in step_multipliers:
        rewards, fams = [], []
        for task in tasks:
            L = task.response_length
            cfg = replace(base, length=L, max_steps=max(1, int(round(mult * L))))
            tr = decode(model, task.prompt, cfg, rng)
            rewards.append(task.reward(tr.final.response) if tr.complete else 0.0)
            fams.append(task.family)
        out["by_budget"][mult] = float(np.mean(rewards))
        for fam in sorted(set(fams)):
            out["by_family"].setdefault(fam, {})[mult] = float(np.mean([r for r, f in zip(rewards, fams) if f == fam]))
        all_rewards.extend(rewards)
    out["mean_reward"] = float(np.mean(all_rewards))
    return out


def config_dict(cfg) -> dict:
    return asdict(cfg)

