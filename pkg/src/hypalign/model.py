"""Toy image/text encoders and the hyperbolic embedding pipeline.

Images are feature vectors passed through an affine map (optionally one tanh
hidden layer).  Each (tree, level, class) node owns a learnable base vector;
text embeddings are ``Proj(exp_0(W_T (base + context + delta_T)))`` where the
context vector is shared and carries the text perturbation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from hypalign import geometry as geo
from hypalign.dataio import RunConfig, atomic_write_text, parse_config
from hypalign.hierarchy import HierarchyForest, HierarchyTree, parse_forest

CHECKPOINT_FORMAT = "hypalign-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def embed_to_ball(e: torch.Tensor, r: float = 1.0, xi: float = 1e-5) -> torch.Tensor:
    """Lift Euclidean vectors into the ball: ``Proj(exp_0(e))``."""
    return geo.project_to_ball(geo.exp_map0(e, r), r, xi)


class EmbeddingModel(nn.Module):
    def __init__(
        self,
        forest: HierarchyForest,
        feature_dim: int,
        embed_dim: int,
        hidden_dim: int = 0,
        r: float = 1.0,
        xi: float = 1e-5,
        seed: int = 0,
    ):
        super().__init__()
        if embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        self.forest = forest
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.r = geo.check_curvature(r)
        self.xi = xi
        gen = torch.Generator().manual_seed(seed)
        kw = dict(dtype=torch.float64)

        def orth(rows, cols, gain):
            w = torch.empty(rows, cols, **kw)
            nn.init.orthogonal_(w, gain=gain, generator=gen)
            return nn.Parameter(w)

        if hidden_dim:
            self.enc_hidden_w = orth(hidden_dim, feature_dim, 1.0)
            self.enc_hidden_b = nn.Parameter(torch.zeros(hidden_dim, **kw))
            self.enc_w = orth(embed_dim, hidden_dim, 0.5)
        else:
            self.enc_w = orth(embed_dim, feature_dim, 0.5)
        self.enc_b = nn.Parameter(torch.zeros(embed_dim, **kw))
        self.text_proj = nn.Parameter(torch.eye(embed_dim, **kw))
        self.text_base = nn.ParameterList(
            nn.Parameter(torch.randn(t.num_nodes, embed_dim, generator=gen, **kw) * (0.8 / embed_dim**0.5))
            for t in forest
        )
        self.register_buffer("context", torch.randn(embed_dim, generator=gen, **kw) * (0.1 / embed_dim**0.5))
        self._offsets = [np.concatenate([[0], np.cumsum([t.num_classes(l) for l in range(t.depth + 1)])]) for t in forest]

    @classmethod
    def from_config(cls, forest: HierarchyForest, cfg: RunConfig) -> "EmbeddingModel":
        return cls(forest, cfg.feature_dim, cfg.embed_dim, cfg.hidden_dim, cfg.r, cfg.xi, cfg.seed)

    # -- images ------------------------------------------------------------
    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim} features, got {x.shape[-1]}")
        if self.hidden_dim:
            x = torch.tanh(x @ self.enc_hidden_w.T + self.enc_hidden_b)
        return x @ self.enc_w.T + self.enc_b

    def embed_images(self, x: torch.Tensor) -> torch.Tensor:
        return embed_to_ball(self.encode(x), self.r, self.xi)

    # -- text ----------------------------------------------------------------
    def text_vectors(self, tree: int, level: int) -> torch.Tensor:
        lo, hi = self._offsets[tree][level], self._offsets[tree][level + 1]
        return self.text_base[tree][lo:hi]

    def text_points(self, tree: int, delta_t: torch.Tensor | None = None) -> list[torch.Tensor]:
        """Ball embeddings of every class, one (C_l, d) tensor per level."""
        ctx = self.context if delta_t is None else self.context + delta_t
        pts = embed_to_ball((self.text_base[tree] + ctx) @ self.text_proj.T, self.r, self.xi)
        offs = self._offsets[tree]
        return [pts[offs[l] : offs[l + 1]] for l in range(len(offs) - 1)]

    def parameter_dict(self) -> dict[str, torch.Tensor]:
        return {name: p for name, p in self.named_parameters()}

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.state_dict().items()}


def encode_image(x, model: EmbeddingModel) -> torch.Tensor:
    return model.encode(geo.as_tensor(x))


def text_embedding(
    model: EmbeddingModel,
    tree: int,
    level: int,
    index: int,
    delta_t: torch.Tensor | None = None,
    eps_t: float | None = None,
) -> torch.Tensor:
    """Ball embedding of one class prompt, optionally under a context perturbation."""
    t = model.forest[tree]
    if not 0 <= level <= t.depth or not 0 <= index < t.num_classes(level):
        raise IndexError(f"class ({level}, {index}) does not exist in tree {tree}")
    if delta_t is not None and eps_t is not None:
        if float(delta_t.detach().abs().max()) > eps_t + 1e-12:
            raise ValueError(f"text perturbation exceeds its l-inf budget {eps_t}")
    return model.text_points(tree, delta_t)[level][index]


@dataclass
class LevelClassAverages:
    """Per-level class averages of a batch: ``classes[l]`` indexes ``points[l]``."""

    classes: list[torch.Tensor]
    points: list[torch.Tensor]

    def get(self, level: int, index: int) -> torch.Tensor:
        hit = (self.classes[level] == index).nonzero()
        if hit.numel() == 0:
            raise KeyError(f"class ({level}, {index}) absent from the batch")
        return self.points[level][int(hit[0, 0])]


def class_level_averages(points: torch.Tensor, leaf_idx: torch.Tensor, tree: HierarchyTree, r: float) -> LevelClassAverages:
    """Einstein midpoints per leaf, then recursively per superclass.

    A superclass averages its present children's averages, each child
    counting once regardless of how many samples it holds.
    """
    present = torch.unique(leaf_idx)
    groups = torch.searchsorted(present, leaf_idx)
    level_pts = geo.hyp_avg_grouped(points, groups, len(present), r)
    classes, avgs = [present], [level_pts]
    for l in range(tree.depth):
        parents = torch.as_tensor(tree.parent_index[l])[present]
        present = torch.unique(parents)
        groups = torch.searchsorted(present, parents)
        level_pts = geo.hyp_avg_grouped(level_pts, groups, len(present), r)
        classes.append(present)
        avgs.append(level_pts)
    return LevelClassAverages(classes, avgs)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: EmbeddingModel, cfg: RunConfig, path) -> None:
    """Versioned JSON dump of every parameter, the config and its digest, and the forest."""
    tensors = {
        name: {"shape": list(t.shape), "data": [float(v) for v in t.detach().reshape(-1).tolist()]}
        for name, t in model.state_dict().items()
    }
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_text(),
        "config_digest": cfg.digest(),
        "forest": model.forest.to_text(),
        "dims": {"feature_dim": model.feature_dim, "embed_dim": model.embed_dim, "hidden_dim": model.hidden_dim},
        "tensors": tensors,
    }
    atomic_write_text(path, json.dumps(payload, sort_keys=True) + "\n")


def load_checkpoint(path, cfg: RunConfig | None = None) -> tuple[EmbeddingModel, RunConfig]:
    """Rebuild a model; with ``cfg`` given, its dimensions must match the file."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    saved_cfg = parse_config(payload["config"])
    if saved_cfg.digest() != payload["config_digest"]:
        raise CheckpointError(f"{path}: config digest mismatch")
    dims = payload["dims"]
    if cfg is not None:
        for key, value in dims.items():
            if getattr(cfg, key) != value:
                raise CheckpointError(f"{path}: {key}={value} does not match requested {getattr(cfg, key)}")
    forest = parse_forest(payload["forest"])
    model = EmbeddingModel(forest, dims["feature_dim"], dims["embed_dim"], dims["hidden_dim"], saved_cfg.r, saved_cfg.xi)
    state = {}
    expected = model.state_dict()
    for name, ref in expected.items():
        entry = payload["tensors"].get(name)
        if entry is None or list(ref.shape) != entry["shape"]:
            raise CheckpointError(f"{path}: tensor {name!r} missing or mis-shaped")
        state[name] = torch.tensor(entry["data"], dtype=torch.float64).reshape(entry["shape"])
    model.load_state_dict(state)
    return model, saved_cfg
