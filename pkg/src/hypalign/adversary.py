"""l-inf PGD over image features and the shared text context vector."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import torch

from hypalign.dataio import STRATEGIES, RunConfig
from hypalign.losses import batch_objective
from hypalign.model import EmbeddingModel


class AttackError(FloatingPointError):
    pass


@dataclass(frozen=True)
class PerturbationSpec:
    eps_x: float
    alpha_x: float
    eps_t: float = 0.0
    alpha_t: float = 0.0
    steps: int = 3
    init_noise: float = 1e-3
    strategy: str = "universal"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        for name in ("eps_x", "alpha_x", "eps_t", "alpha_t", "init_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")

    @classmethod
    def for_training(cls, cfg: RunConfig, seed: int = 0) -> "PerturbationSpec":
        return cls(cfg.eps_x, cfg.alpha_x, cfg.eps_t, cfg.alpha_t, cfg.pgd_steps_train, cfg.init_noise, cfg.strategy, seed)

    @classmethod
    def for_evaluation(cls, cfg: RunConfig, seed: int = 0) -> "PerturbationSpec":
        """Image-only attack with the evaluation budget and step count."""
        return cls(cfg.eps_x_eval, cfg.alpha_x_eval, 0.0, 0.0, cfg.pgd_steps_eval, cfg.init_noise, "leaf-only", seed)

    def with_seed(self, seed: int) -> "PerturbationSpec":
        return replace(self, seed=seed)


@dataclass
class AdversarialBatch:
    x_adv: torch.Tensor
    delta_t: torch.Tensor
    trace: list[float] = field(default_factory=list)


def _check(grad: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(grad).all()):
        raise AttackError(f"non-finite gradient with respect to the {what} perturbation")


def pgd_joint(
    x: torch.Tensor,
    text_dim: int,
    loss_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    spec: PerturbationSpec,
) -> AdversarialBatch:
    """Joint signed-gradient ascent on features and the text context offset.

    Features start at ``x + init_noise * N(0, 1)`` clamped into the budget;
    the text offset starts at zero.  ``trace`` records the loss at every
    iterate, the final one included (``steps + 1`` entries).
    """
    x0 = x.detach()
    lo, hi = x0 - spec.eps_x, x0 + spec.eps_x
    gen = torch.Generator().manual_seed(spec.seed)
    noise = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    xa = torch.clamp(x0 + spec.init_noise * noise, lo, hi)
    dt = torch.zeros(text_dim, dtype=x0.dtype)
    attack_text = spec.eps_t > 0
    trace: list[float] = []
    for step in range(spec.steps + 1):
        xa.requires_grad_(True)
        dt.requires_grad_(attack_text)
        loss = loss_fn(xa, dt)
        trace.append(float(loss.detach()))
        if step == spec.steps:
            break
        inputs = [xa, dt] if attack_text else [xa]
        grads = torch.autograd.grad(loss, inputs, allow_unused=True, materialize_grads=True)
        _check(grads[0], "image")
        with torch.no_grad():
            xa = torch.clamp(xa + spec.alpha_x * torch.sign(grads[0]), lo, hi)
            if attack_text:
                _check(grads[1], "text")
                dt = torch.clamp(dt + spec.alpha_t * torch.sign(grads[1]), -spec.eps_t, spec.eps_t)
    return AdversarialBatch(xa.detach(), dt.detach(), trace)


def pgd_images(x: torch.Tensor, loss_fn: Callable[[torch.Tensor], torch.Tensor], spec: PerturbationSpec) -> AdversarialBatch:
    """Image-only PGD; ``loss_fn`` maps perturbed features to a scalar."""
    return pgd_joint(x, 1, lambda xa, dt: loss_fn(xa), replace(spec, eps_t=0.0))


def pgd_text(context: torch.Tensor, loss_fn: Callable[[torch.Tensor], torch.Tensor], spec: PerturbationSpec) -> torch.Tensor:
    """Text-only PGD on an additive offset to ``context``; returns the offset."""
    if spec.eps_t == 0:
        return torch.zeros_like(context)
    dummy = torch.zeros(1, dtype=context.dtype)
    image_free = replace(spec, eps_x=0.0, init_noise=0.0)
    return pgd_joint(dummy, context.numel(), lambda xa, dt: loss_fn(dt), image_free).delta_t


def strategy_weights(strategy: str, depth: int) -> list:
    """Level weights maximized by each strategy; per-level returns one vector per level."""
    if strategy == "leaf-only":
        return [[1.0] + [0.0] * depth]
    if strategy == "universal":
        return [None]
    if strategy == "per-level":
        return [[1.0 if l == k else 0.0 for l in range(depth + 1)] for k in range(depth + 1)]
    raise ValueError(f"unknown strategy {strategy!r}")


def generate_hierarchical_adversaries(
    x: torch.Tensor,
    leaf_idx: torch.Tensor,
    model: EmbeddingModel,
    spec: PerturbationSpec,
    cfg: RunConfig,
    full: bool | None = None,
):
    """Maximize the hierarchical objective under ``spec.strategy``.

    Returns one :class:`AdversarialBatch` for "leaf-only" and "universal" and a
    list of ``L + 1`` batches (one per level) for "per-level".  ``full``
    selects the whole objective instead of the cross-entropy alone and
    defaults to ``cfg.attack_full_objective``.
    """
    full = cfg.attack_full_objective if full is None else full
    depth = model.forest[0].depth
    out = []
    for weights in strategy_weights(spec.strategy, depth):
        def loss_fn(xa, dt, weights=weights):
            return batch_objective(model, xa, leaf_idx, cfg, dt, weights, full).total

        out.append(pgd_joint(x, model.embed_dim, loss_fn, spec))
    return out if spec.strategy == "per-level" else out[0]
