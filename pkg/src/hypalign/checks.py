"""Self-checks run by the ``geom-test`` and ``gradcheck`` subcommands."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from hypalign import geometry as geo
from hypalign import losses
from hypalign.dataio import RunConfig
from hypalign.gradengine import finite_diff_check, registered_primitives
from hypalign.hierarchy import HierarchyForest, parse_forest
from hypalign.model import EmbeddingModel, embed_to_ball


@dataclass
class CheckResult:
    name: str
    cases: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def random_ball_points(gen: np.random.Generator, n: int, d: int, r: float, max_frac: float = 0.9) -> np.ndarray:
    """Uniform directions with radii uniform in ``[0, max_frac/sqrt(r))``."""
    x = gen.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=-1, keepdims=True)
    return x * (gen.uniform(0, max_frac, (n, 1)) / math.sqrt(r))


def acosh_distance(u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    """Distance via ``acosh(1 + 2r|u-v|^2 / ((1-r|u|^2)(1-r|v|^2))) / sqrt(r)``."""
    num = 2 * r * np.sum((u - v) ** 2, -1)
    den = (1 - r * np.sum(u * u, -1)) * (1 - r * np.sum(v * v, -1))
    return np.arccosh(1 + num / den) / math.sqrt(r)


def _rel(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.abs(b), 1e-300)


def geometry_checks(cases: int = 1000, seed: int = 0, dim: int = 5) -> list[CheckResult]:
    gen = np.random.Generator(np.random.PCG64(seed))
    out = []
    per_r = max(cases // 3, 1)
    rt = 0.0
    for r in (0.5, 1.0, 2.0):
        u = torch.as_tensor(random_ball_points(gen, per_r, dim, r))
        w = torch.as_tensor(random_ball_points(gen, per_r, dim, r))
        back = geo.exp_map(u, geo.log_map(u, w, r), r)
        err = (torch.linalg.vector_norm(back - w, dim=-1) / torch.linalg.vector_norm(w, dim=-1).clamp_min(1e-300)).max()
        rt = max(rt, float(err))
    out.append(CheckResult("exp_log_round_trip", 3 * per_r, rt, 1e-9))

    r = 1.0
    x, y, z = (torch.as_tensor(random_ball_points(gen, cases, dim, r)) for _ in range(3))
    dxy, dyx = geo.riemannian_distance(x, y, r), geo.riemannian_distance(y, x, r)
    dyz, dxz = geo.riemannian_distance(y, z, r), geo.riemannian_distance(x, z, r)
    out.append(CheckResult("identity_of_indiscernibles", cases, float(geo.riemannian_distance(x, x, r).abs().max()), 1e-12))
    out.append(CheckResult("symmetry", cases, float((dxy - dyx).abs().max()), 1e-12))
    out.append(CheckResult("non_negativity", cases, float((-dxy).clamp_min(0).max()), 0.0))
    out.append(CheckResult("triangle_inequality", cases, float((dxz - dxy - dyz).clamp_min(0).max()), 1e-12))
    dual = 0.0
    for r in (0.5, 1.0, 2.0):
        u, v = random_ball_points(gen, per_r, dim, r), random_ball_points(gen, per_r, dim, r)
        d = geo.riemannian_distance(u, v, r).numpy()
        dual = max(dual, float(_rel(d, acosh_distance(u, v, r)).max()))
    out.append(CheckResult("dual_form_distance", 3 * per_r, dual, 1e-8))

    u, v = (torch.as_tensor(random_ball_points(gen, cases, dim, r)) for _ in range(2))
    zero = torch.zeros_like(u)
    mob = max(
        float((geo.mobius_add(u, zero, r) - u).abs().max()),
        float((geo.mobius_add(zero, u, r) - u).abs().max()),
        float(geo.mobius_add(-u, u, r).abs().max()),
        float((geo.mobius_add(-u, geo.mobius_add(u, v, r), r) - v).abs().max()),
    )
    out.append(CheckResult("mobius_identities", cases, mob, 1e-12))
    return out


def lorentz_midpoint(points: np.ndarray, r: float) -> np.ndarray:
    """Einstein midpoint via the hyperboloid: sum the lifted points, renormalize, map back."""
    sq = np.sum(points * points, -1, keepdims=True)
    x0 = (1 + r * sq) / (1 - r * sq)
    xs = 2 * points / (1 - r * sq)
    s0, ss = x0.sum(0), xs.sum(0)
    scale = np.sqrt(s0[0] ** 2 - r * np.dot(ss, ss))
    y0, ys = s0[0] / scale, ss / scale
    return ys / (1 + y0)


def hyp_avg_checks(cases: int = 500, seed: int = 0, dim: int = 4) -> list[CheckResult]:
    gen = np.random.Generator(np.random.PCG64(seed))
    oracle = perm = bound = 0.0
    for i in range(cases):
        r = (0.5, 1.0, 2.0)[i % 3]
        m = int(gen.integers(1, 9))
        pts = random_ball_points(gen, m, dim, r, 0.95)
        avg = geo.hyp_avg(pts, r).numpy()
        ref = lorentz_midpoint(pts, r)
        oracle = max(oracle, float(np.linalg.norm(avg - ref) / max(np.linalg.norm(ref), 1e-12)))
        shuffled = geo.hyp_avg(pts[gen.permutation(m)], r).numpy()
        perm = max(perm, float(np.abs(shuffled - avg).max()))
        bound = max(bound, float(np.linalg.norm(avg) - np.linalg.norm(pts, axis=-1).max()))
    p = random_ball_points(gen, cases, dim, 1.0)
    singleton = max(float(np.abs(geo.hyp_avg(p[i : i + 1], 1.0).numpy() - p[i]).max()) for i in range(cases))
    sym = max(float(np.abs(geo.hyp_avg(np.stack([p[i], -p[i]]), 1.0).numpy()).max()) for i in range(cases))
    # two distinct points of equal norm: the midpoint must be strictly (1e-12) shorter
    shrink = 0.0
    for i in range(cases):
        a, b = random_ball_points(gen, 2, dim, 1.0)
        b = b / np.linalg.norm(b) * np.linalg.norm(a)
        avg_norm = float(np.linalg.norm(geo.hyp_avg(np.stack([a, b]), 1.0).numpy()))
        shrink = max(shrink, avg_norm - float(np.linalg.norm(a)) + 1e-12)
    return [
        CheckResult("klein_oracle", cases, oracle, 1e-8),
        CheckResult("permutation_invariance", cases, perm, 1e-12),
        CheckResult("norm_bound", cases, max(bound, 0.0), 1e-12),
        CheckResult("singleton", cases, singleton, 0.0),
        CheckResult("antipodal_symmetry", cases, sym, 1e-12),
        CheckResult("strict_norm_reduction", cases, max(shrink, 0.0), 0.0),
    ]


# -- gradient cases ----------------------------------------------------------------

_SMALL_FOREST = "a1\tA\na2\tA\nb1\tB\nb2\tB\nb3\tB\nA\tR\nB\tR\n"


def small_forest() -> HierarchyForest:
    return parse_forest(_SMALL_FOREST)


class _Objective(nn.Module):
    """Wraps the full objective so parameters can be swapped in functionally."""

    def __init__(self, model: EmbeddingModel, cfg: RunConfig):
        super().__init__()
        self.model = model
        self.cfg = cfg

    def forward(self, x, leaf_idx, delta_t):
        return losses.batch_objective(self.model, x, leaf_idx, self.cfg, delta_t).total


def loss_cases(feature_dim: int = 3, embed_dim: int = 3, batch: int = 6) -> dict:
    """name -> (expression, sampler) pairs for every loss component.

    Samplers draw a random small model and batch from the supplied
    generator; expressions are functions of named float64 tensors.
    """
    forest = small_forest()
    tree = forest[0]
    cfg = RunConfig(feature_dim=feature_dim, embed_dim=embed_dim)

    def draw(gen):
        seed = int(torch.randint(0, 2**31 - 1, (1,), generator=gen))
        model = EmbeddingModel(forest, feature_dim, embed_dim, 0, cfg.r, cfg.xi, seed)
        x = torch.randn(batch, feature_dim, generator=gen, dtype=torch.float64)
        y = torch.randint(0, tree.num_classes(0), (batch,), generator=gen)
        return model, x, y

    def texts(model, ctx_delta=None):
        return model.text_points(0, ctx_delta)

    state = {}

    def remember(gen):
        model, x, y = draw(gen)
        state["model"], state["y"] = model, y
        return model, x, y

    def s_prob(gen):
        model, x, y = remember(gen)
        return {"x": x, "base": model.text_base[0].detach().clone()}

    def levels(base):
        # text points of every level with the base vectors as a free input
        model = state["model"]
        pts = embed_to_ball((base + model.context) @ model.text_proj.T, cfg.r, cfg.xi)
        offs = model._offsets[0]
        return [pts[offs[l] : offs[l + 1]] for l in range(len(offs) - 1)]

    def e_prob(x, base):
        logp = losses.level_log_probs(state["model"].embed_images(x), state["y"], levels(base), tree, cfg.r, "both")
        return sum(lp.exp().sum() for lp in logp)

    def e_hita(x, base):
        logp = losses.level_log_probs(state["model"].embed_images(x), state["y"], levels(base), tree, cfg.r, "both")
        return losses.hita_loss(logp, "linear", log=True)

    def s_pair(gen):
        model, x, y = remember(gen)
        return {"x": x, "ctx": torch.randn(embed_dim, generator=gen, dtype=torch.float64) * 0.1}

    def e_vic(x, ctx):
        model = state["model"]
        return losses.vicinity_loss(model.embed_images(x), texts(model, ctx)[0][state["y"]], cfg.zeta_vic, cfg.r)

    def e_intra(x, ctx):
        model = state["model"]
        return losses.intra_gap_loss(model.embed_images(x), texts(model, ctx)[0][state["y"]], 0.05)

    def s_label(gen):
        model, x, y = remember(gen)
        return {"base": model.text_base[0].detach().clone()}

    def e_label(base):
        return losses.label_gap_loss(levels(base), tree.parent_index, 0.05)

    def s_total(gen):
        model, x, y = remember(gen)
        state["wrapper"] = _Objective(model, cfg)
        named = {f"model.{k}": v.detach().clone() for k, v in model.named_parameters()}
        named["x"] = x
        named["delta_t"] = torch.randn(embed_dim, generator=gen, dtype=torch.float64) * 1e-3
        return {k.replace(".", "__"): v for k, v in named.items()}

    def e_total(**leaves):
        x, dt = leaves.pop("x"), leaves.pop("delta_t")
        params = {k.replace("__", "."): v for k, v in leaves.items()}
        return functional_call(state["wrapper"], params, (x, state["y"], dt))

    return {
        "hierarchical_prob": (e_prob, s_prob),
        "hita": (e_hita, s_prob),
        "vicinity": (e_vic, s_pair),
        "intra_gap": (e_intra, s_pair),
        "label_gap": (e_label, s_label),
        "total_objective": (e_total, s_total),
    }


def gradient_checks(cases: int = 100, seed: int = 0, include_primitives: bool = True, tolerance: float = 1e-4) -> list[CheckResult]:
    """Central finite differences against autograd for every registered case."""
    registry = dict(registered_primitives()) if include_primitives else {}
    registry.update(loss_cases())
    out = []
    for name, (expr, sampler) in registry.items():
        gen = torch.Generator().manual_seed(seed)
        worst = 0.0
        for _ in range(cases):
            rep = finite_diff_check(expr, sampler(gen), step=1e-5, tolerance=tolerance)
            worst = max(worst, rep.max_rel_error)
        out.append(CheckResult(name, cases, worst, tolerance))
    return out
