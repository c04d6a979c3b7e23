"""Adversarial training loop, per-level evaluation, and transfer attacks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from hypalign import geometry as geo
from hypalign.adversary import AttackError, PerturbationSpec, generate_hierarchical_adversaries, pgd_images
from hypalign.dataio import RunConfig
from hypalign.hierarchy import HierarchyForest
from hypalign.losses import LossBreakdown, batch_objective, sample_cross_entropy
from hypalign.model import EmbeddingModel


class TrainingDiverged(FloatingPointError):
    """The loss became non-finite; ``state`` holds the last finite parameters."""

    def __init__(self, message: str, state: "TrainState"):
        super().__init__(message)
        self.state = state


@dataclass
class TrainState:
    model: EmbeddingModel
    optimizer: torch.optim.Optimizer
    config: RunConfig
    epoch: int = 0
    metrics: list[dict] = field(default_factory=list)


def batch_seed(*keys: int) -> int:
    """Independent 63-bit seed for a tuple of integer keys."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def _tensors(x, y) -> tuple[torch.Tensor, torch.Tensor]:
    return geo.as_tensor(x), torch.as_tensor(np.asarray(y), dtype=torch.long)


def new_state(cfg: RunConfig, forest: HierarchyForest) -> TrainState:
    model = EmbeddingModel.from_config(forest, cfg)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    return TrainState(model, opt, cfg)


def _training_loss(state: TrainState, xb: torch.Tensor, yb: torch.Tensor, seed: int) -> LossBreakdown:
    cfg, model = state.config, state.model
    spec = PerturbationSpec.for_training(cfg, seed)
    adv = generate_hierarchical_adversaries(xb, yb, model, spec, cfg)
    if isinstance(adv, list):
        # per-level strategy: average the objective over the level-specific adversaries
        parts = [batch_objective(model, a.x_adv, yb, cfg, a.delta_t) for a in adv]
        loss = parts[0]
        for p in parts[1:]:
            loss = loss + p
        k = float(len(parts))
        loss = LossBreakdown(loss.hita / k, loss.vic / k, loss.gap_label / k, loss.gap_intra / k, loss.total / k)
    else:
        loss = batch_objective(model, adv.x_adv, yb, cfg, adv.delta_t)
    if cfg.aux_on_clean:
        loss = loss + batch_objective(model, xb, yb, cfg)
    return loss


def train(cfg: RunConfig, forest: HierarchyForest, x, y, state: TrainState | None = None, epochs: int | None = None) -> TrainState:
    """Run ``epochs`` (default ``cfg.epochs``) of adversarial SGD with momentum.

    Each batch draws adversaries with a seed derived from (seed, epoch,
    batch), evaluates the full objective on them, and takes one SGD step.
    After every epoch a loss row and per-level clean training accuracies are
    appended to ``state.metrics``.
    """
    state = state or new_state(cfg, forest)
    model, opt = state.model, state.optimizer
    x, y = _tensors(x, y)
    n = x.shape[0]
    if n == 0:
        raise ValueError("no training samples")
    for _ in range(cfg.epochs if epochs is None else epochs):
        epoch = state.epoch + 1
        gen = torch.Generator().manual_seed(batch_seed(cfg.seed, epoch))
        perm = torch.randperm(n, generator=gen)
        sums: dict[str, float] = {}
        batches = 0
        model.train()
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            try:
                loss = _training_loss(state, x[idx], y[idx], batch_seed(cfg.seed, epoch, b))
            except AttackError as exc:
                raise TrainingDiverged(f"adversary failed at epoch {epoch}, batch {b}: {exc}", state) from exc
            if not math.isfinite(float(loss.total.detach())):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}", state)
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            for k, v in loss.as_floats().items():
                sums[k] = sums.get(k, 0.0) + v
            batches += 1
        state.epoch = epoch
        row = {"epoch": epoch, "split": "train", "level": "all"}
        row.update({k: v / batches for k, v in sums.items()})
        state.metrics.append(row)
        with torch.no_grad():
            accs = clean_accuracy(model, x, y)
        for level, acc in enumerate(accs):
            state.metrics.append({"epoch": epoch, "split": "train", "level": level, "clean_acc": acc})
    return state


# -- evaluation ------------------------------------------------------------------


def level_labels(forest: HierarchyForest, y: torch.Tensor, level: int, tree: int = 0) -> torch.Tensor:
    return torch.as_tensor(forest[tree].leaf_ancestors[:, level])[y]


def predict(model: EmbeddingModel, x: torch.Tensor, level: int, tree: int = 0) -> torch.Tensor:
    """Nearest class text at ``level`` for each sample."""
    d = geo.pairwise_distance(model.embed_images(x), model.text_points(tree)[level], model.r)
    return d.argmin(-1)


def clean_accuracy(model: EmbeddingModel, x, y, tree: int = 0) -> list[float]:
    x, y = _tensors(x, y)
    return [
        float((predict(model, x, l, tree) == level_labels(model.forest, y, l, tree)).double().mean())
        for l in range(model.forest[tree].depth + 1)
    ]


def attack_level(model: EmbeddingModel, x: torch.Tensor, y: torch.Tensor, level: int, spec: PerturbationSpec, tree: int = 0) -> torch.Tensor:
    """Image-only PGD maximizing the per-sample cross-entropy at one level."""
    labels = level_labels(model.forest, y, level, tree)
    texts = model.text_points(tree)[level].detach()

    def loss_fn(xa):
        return sample_cross_entropy(model.embed_images(xa), labels, texts, model.r, 1.0)

    return pgd_images(x, loss_fn, spec).x_adv


@dataclass
class EvalReport:
    clean_acc: list[float]
    robust_acc: list[float]
    transfer: np.ndarray | None
    norm_ordering: float
    mean_image_norm: float
    mean_leaf_text_norm: float

    def rows(self, epoch: int, split: str = "test") -> list[dict]:
        return [
            {"epoch": epoch, "split": split, "level": l, "clean_acc": c, "robust_acc": r}
            for l, (c, r) in enumerate(zip(self.clean_acc, self.robust_acc))
        ]

    def superclass_to_leaf_transfer(self) -> float:
        """Mean attack success at the leaves of attacks aimed at levels 1..L."""
        if self.transfer is None or self.transfer.shape[0] < 2:
            raise ValueError("no superclass levels to transfer from")
        return float(self.transfer[1:, 0].mean())


def norm_ordering_rate(model: EmbeddingModel) -> float:
    """Fraction of parent-child pairs whose parent text has the smaller norm, over all trees."""
    hits = total = 0
    with torch.no_grad():
        for t, tree in enumerate(model.forest):
            pts = model.text_points(t)
            for l in range(tree.depth):
                child = torch.linalg.vector_norm(pts[l], dim=-1)
                parent = torch.linalg.vector_norm(pts[l + 1], dim=-1)[torch.as_tensor(tree.parent_index[l])]
                hits += int((parent < child).sum())
                total += child.numel()
    return hits / total if total else 1.0


def transfer_attack_eval(model: EmbeddingModel, x, y, spec: PerturbationSpec, tree: int = 0) -> np.ndarray:
    """``T[a, e]``: misclassification rate at level e under attacks on level a."""
    x, y = _tensors(x, y)
    depth = model.forest[tree].depth
    out = np.zeros((depth + 1, depth + 1))
    for a in range(depth + 1):
        xa = attack_level(model, x, y, a, spec, tree)
        with torch.no_grad():
            for e in range(depth + 1):
                wrong = predict(model, xa, e, tree) != level_labels(model.forest, y, e, tree)
                out[a, e] = float(wrong.double().mean())
    return out


def evaluate(model: EmbeddingModel, x, y, spec: PerturbationSpec, tree: int = 0, transfer: bool = False) -> EvalReport:
    """Per-level clean and PGD-robust accuracy of individual samples.

    The attack at level l maximizes the plain distance-softmax cross-entropy
    of that level.  ``transfer`` also fills the attack-level by eval-level
    success matrix.
    """
    x, y = _tensors(x, y)
    depth = model.forest[tree].depth
    with torch.no_grad():
        clean = clean_accuracy(model, x, y, tree)
    robust = []
    for l in range(depth + 1):
        xa = attack_level(model, x, y, l, spec, tree)
        with torch.no_grad():
            robust.append(float((predict(model, xa, l, tree) == level_labels(model.forest, y, l, tree)).double().mean()))
    matrix = transfer_attack_eval(model, x, y, spec, tree) if transfer else None
    with torch.no_grad():
        img_norm = float(torch.linalg.vector_norm(model.embed_images(x), dim=-1).mean())
        txt_norm = float(torch.linalg.vector_norm(model.text_points(tree)[0], dim=-1).mean())
    return EvalReport(clean, robust, matrix, norm_ordering_rate(model), img_norm, txt_norm)
