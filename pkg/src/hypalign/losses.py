"""Hierarchical alignment objective.

Probabilities use exponentiated negative geodesic distances.  Within a level
the softmax runs over every class text; the denominator is augmented with
the classes one level below and one level above that share no edge with the
target.  Cross-entropies are taken over per-class Einstein midpoints of the
batch, and summed over levels with weights ``omega_l``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from hypalign import geometry as geo
from hypalign.dataio import RunConfig
from hypalign.hierarchy import HierarchyTree, level_weights
from hypalign.model import EmbeddingModel, class_level_averages

# Stand-in logit for masked-out negatives; finite so no inf ever appears.
_MASKED = -1e300


def _masked_logits(logits: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return logits
    return torch.where(torch.as_tensor(mask, dtype=torch.bool), logits, torch.full_like(logits, _MASKED))


def hierarchical_log_prob(
    phi: torch.Tensor,
    texts: torch.Tensor,
    target: torch.Tensor,
    r: float,
    below: torch.Tensor | None = None,
    below_mask=None,
    above: torch.Tensor | None = None,
    above_mask=None,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Log of :func:`hierarchical_prob`, computed with a stable logsumexp."""
    phi = torch.atleast_2d(phi)
    target = torch.as_tensor(target, dtype=torch.long).reshape(-1)
    logits = -geo.pairwise_distance(phi, texts, r) / temperature
    parts = [logits]
    for negs, mask in ((below, below_mask), (above, above_mask)):
        if negs is not None and negs.shape[0] > 0:
            neg_logits = -geo.pairwise_distance(phi, negs, r) / temperature
            parts.append(_masked_logits(neg_logits, None if mask is None else torch.atleast_2d(torch.as_tensor(mask))))
    log_den = torch.logsumexp(torch.cat(parts, dim=-1), dim=-1)
    return logits.gather(-1, target[:, None]).squeeze(-1) - log_den


def hierarchical_prob(phi, texts, target, r: float, below=None, below_mask=None, above=None, above_mask=None, temperature: float = 1.0):
    """Probability of ``target`` for each row of ``phi`` at one level.

    Args:
        phi: (k, d) image points (class averages in training).
        texts: (C_l, d) text points of every class at the level.
        target: (k,) class index per row.
        below, above: text points of the levels l-1 and l+1, or None.
        below_mask, above_mask: (k, C_{l-1}) / (k, C_{l+1}) booleans selecting
            the negatives of each row; None keeps every class.
        temperature: divides every distance.

    Returns:
        (k,) tensor ``exp(-d_target) / (eta + sum_c' exp(-d_c'))`` where ``eta``
        sums ``exp(-d)`` over the selected negatives.
    """
    return torch.exp(hierarchical_log_prob(phi, texts, target, r, below, below_mask, above, above_mask, temperature))


def hita_loss(level_probs: Sequence[torch.Tensor], weighting: str = "linear", weights=None, reduction: str = "sum", log: bool = False) -> torch.Tensor:
    """Weighted cross-entropy over levels.

    ``level_probs[l]`` holds the probability assigned to the true class for
    each item at level ``l`` (log-probabilities when ``log`` is True).  Level
    weights are ``1 - l/(L+1)`` ("linear") or 1 ("equal") unless ``weights``
    is given explicitly.
    """
    depth = len(level_probs) - 1
    w = level_weights(depth, weighting) if weights is None else weights
    total = level_probs[0].new_zeros(())
    for wl, p in zip(w, level_probs):
        if float(wl) == 0.0:
            continue
        nll = -p if log else -torch.log(p)
        total = total + float(wl) * (nll.mean() if reduction == "mean" else nll.sum())
    return total


def _reduce(values: torch.Tensor, reduction: str) -> torch.Tensor:
    return values.mean() if reduction == "mean" else values.sum()


def vicinity_loss(images: torch.Tensor, text: torch.Tensor, zeta: float, r: float, reduction: str = "sum") -> torch.Tensor:
    """``sum |d(phi, psi) - zeta|``; ``text`` broadcasts against ``images``."""
    d = geo._distance(torch.atleast_2d(images), text, r)
    return _reduce((d - zeta).abs(), reduction)


def label_gap_loss(text_points: Sequence[torch.Tensor], parent_index: Sequence, zeta: float, reduction: str = "sum") -> torch.Tensor:
    """``sum_l sum_c max(0, |psi_parent(c)| - |psi_c| + zeta)`` over every edge."""
    terms = []
    for l in range(len(text_points) - 1):
        child = torch.linalg.vector_norm(text_points[l], dim=-1)
        parent = torch.linalg.vector_norm(text_points[l + 1], dim=-1)[torch.as_tensor(parent_index[l])]
        terms.append(torch.relu(parent - child + zeta))
    if not terms:
        return text_points[0].new_zeros(())
    return _reduce(torch.cat(terms), reduction)


def intra_gap_loss(images: torch.Tensor, text: torch.Tensor, zeta: float, reduction: str = "sum") -> torch.Tensor:
    """``sum max(0, |psi| - |phi| + zeta)``; ``text`` broadcasts against ``images``."""
    img = torch.linalg.vector_norm(torch.atleast_2d(images), dim=-1)
    txt = torch.linalg.vector_norm(text, dim=-1)
    return _reduce(torch.relu(txt - img + zeta), reduction)


@dataclass
class LossBreakdown:
    hita: torch.Tensor
    vic: torch.Tensor
    gap_label: torch.Tensor
    gap_intra: torch.Tensor
    total: torch.Tensor

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(*(getattr(self, f) + getattr(other, f) for f in ("hita", "vic", "gap_label", "gap_intra", "total")))

    def as_floats(self) -> dict[str, float]:
        return {f"loss_{k}" if k != "total" else "loss_total": float(getattr(self, k).detach()) for k in ("total", "hita", "vic", "gap_label", "gap_intra")}


def total_loss(hita, vic, gap_label, gap_intra, lambda1: float = 0.3, lambda2: float = 0.1) -> LossBreakdown:
    """Combine components as ``hita + lambda1*vic + lambda2*(gap_label + gap_intra)``."""
    hita, vic, gap_label, gap_intra = (geo.as_tensor(v) for v in (hita, vic, gap_label, gap_intra))
    return LossBreakdown(hita, vic, gap_label, gap_intra, hita + lambda1 * vic + lambda2 * (gap_label + gap_intra))


# -- batch objective -------------------------------------------------------------


def level_log_probs(
    images: torch.Tensor,
    leaf_idx: torch.Tensor,
    text_points: Sequence[torch.Tensor],
    tree: HierarchyTree,
    r: float,
    negatives: str = "both",
    temperature: float = 1.0,
    leaf_alignment: str = "average",
) -> list[torch.Tensor]:
    """Log-probability of each present class's average at every level.

    With ``leaf_alignment="samples"`` level 0 scores every image on its own
    instead of the leaf averages.
    """
    avgs = class_level_averages(images, leaf_idx, tree, r)
    out = []
    for l in range(tree.depth + 1):
        cls = avgs.classes[l]
        if l == 0 and leaf_alignment == "samples":
            above = above_mask = None
            if tree.depth > 0 and negatives in ("upper", "both"):
                above, above_mask = text_points[1], tree.upper_negative_mask[0][leaf_idx.numpy()]
            out.append(hierarchical_log_prob(images, text_points[0], leaf_idx, r, None, None, above, above_mask, temperature))
            continue
        below = above = below_mask = above_mask = None
        if l > 0 and negatives in ("lower", "both"):
            below, below_mask = text_points[l - 1], tree.lower_negative_mask[l][cls.numpy()]
        if l < tree.depth and negatives in ("upper", "both"):
            above, above_mask = text_points[l + 1], tree.upper_negative_mask[l][cls.numpy()]
        out.append(hierarchical_log_prob(avgs.points[l], text_points[l], cls, r, below, below_mask, above, above_mask, temperature))
    return out


def tree_objective(
    images: torch.Tensor,
    leaf_idx: torch.Tensor,
    text_points: Sequence[torch.Tensor],
    tree: HierarchyTree,
    cfg: RunConfig,
    weights=None,
    full: bool = True,
) -> LossBreakdown:
    """Objective of one tree on a batch of ball points.

    ``cfg.loss_reduction`` applies to the batch-indexed terms (cross-entropy
    items per level, vicinity, intra gap); the label gap runs over the fixed
    set of tree edges and is always summed.  ``weights`` overrides the per-level weights (the adversary uses one-hot
    vectors); ``full=False`` keeps only the hierarchical cross-entropy.
    """
    r, red = cfg.r, cfg.loss_reduction
    logp = level_log_probs(images, leaf_idx, text_points, tree, r, cfg.negatives, cfg.temperature, cfg.leaf_alignment)
    hita = hita_loss(logp, cfg.weighting, weights=weights, reduction=red, log=True)
    zero = hita.new_zeros(())
    if not full:
        return LossBreakdown(hita, zero, zero, zero, hita)
    leaf_text = text_points[0][leaf_idx]
    vic = vicinity_loss(images, leaf_text, cfg.zeta_vic, r, red)
    gap_label = label_gap_loss(text_points, tree.parent_index, cfg.zeta_gap)
    gap_intra = intra_gap_loss(images, leaf_text, cfg.zeta_gap, red)
    return total_loss(hita, vic, gap_label, gap_intra, cfg.lambda1, cfg.lambda2)


def batch_objective(
    model: EmbeddingModel,
    x: torch.Tensor,
    leaf_idx: torch.Tensor,
    cfg: RunConfig,
    delta_t: torch.Tensor | None = None,
    weights=None,
    full: bool = True,
) -> LossBreakdown:
    """Objective of a feature batch summed over every tree of the model's forest."""
    images = model.embed_images(x)
    out = None
    for t, tree in enumerate(model.forest):
        part = tree_objective(images, leaf_idx, model.text_points(t, delta_t), tree, cfg, weights, full)
        out = part if out is None else out + part
    return out


def sample_cross_entropy(images: torch.Tensor, labels: torch.Tensor, texts: torch.Tensor, r: float, temperature: float = 1.0) -> torch.Tensor:
    """Per-sample cross-entropy of the plain distance softmax over one level, summed."""
    logits = -geo.pairwise_distance(images, texts, r) / temperature
    return torch.nn.functional.cross_entropy(logits, labels, reduction="sum")
