"""Poincaré ball primitives.

The ball of curvature ``-r`` is the open set ``{x : r * |x|^2 < 1}`` (radius
``1/sqrt(r)``).  Every function works on float64 tensors whose last axis holds
the coordinates and broadcasts over any leading axes.  All maps are written
with plain torch ops so they can be differentiated end to end.
"""

from __future__ import annotations

import math

import numpy as np
import torch

MIN_NORM = 1e-15
# keeps atanh/acosh arguments inside their closed domains near the boundary
BOUNDARY_GUARD = 1e-15


class DomainError(ValueError):
    """A point lies on or outside the ball, or a curvature is invalid."""


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.float64 else x.to(torch.float64)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def check_curvature(r: float) -> float:
    r = float(r)
    if not math.isfinite(r) or r <= 0:
        raise DomainError(f"curvature must be positive and finite, got {r}")
    return r


def check_in_ball(u: torch.Tensor, r: float, name: str = "point") -> None:
    """Raise DomainError unless every row of ``u`` is strictly inside the ball."""
    with torch.no_grad():
        if not bool(torch.isfinite(u).all()):
            raise DomainError(f"{name} has non-finite coordinates")
        sq = (u * u).sum(-1)
        if bool((r * sq >= 1.0).any()):
            worst = float(sq.max().sqrt())
            raise DomainError(
                f"{name} lies on/outside the ball: norm {worst!r} >= {1 / math.sqrt(r)!r}"
            )


def _sqnorm(u: torch.Tensor) -> torch.Tensor:
    return (u * u).sum(-1, keepdim=True)


def _norm(u: torch.Tensor) -> torch.Tensor:
    # vector_norm has a zero (sub)gradient at the origin instead of nan
    return torch.linalg.vector_norm(u, dim=-1, keepdim=True)


def _mobius_add(u: torch.Tensor, v: torch.Tensor, r: float) -> torch.Tensor:
    uv = (u * v).sum(-1, keepdim=True)
    uu = _sqnorm(u)
    vv = _sqnorm(v)
    # grouping 2<u,v> + |v|^2 makes u + (-u) and (-u) + u cancel to exact zeros
    num = (1 + r * (2 * uv + vv)) * u + (1 - r * uu) * v
    den = 1 + 2 * r * uv + r * r * uu * vv
    return num / den.clamp_min(MIN_NORM)


def _lambda(u: torch.Tensor, r: float) -> torch.Tensor:
    return 2 / (1 - r * _sqnorm(u))


def mobius_add(u, v, r: float = 1.0) -> torch.Tensor:
    """Gyrovector addition ``u ⊕ v`` on the ball of curvature ``-r``.

    Uses ``((1 + 2r<u,v> + r|v|^2) u + (1 - r|u|^2) v) / (1 + 2r<u,v> + r^2|u|^2|v|^2)``.
    """
    r = check_curvature(r)
    u, v = as_tensor(u), as_tensor(v)
    check_in_ball(u, r, "u")
    check_in_ball(v, r, "v")
    return _mobius_add(u, v, r)


def conformal_factor(u, r: float = 1.0) -> torch.Tensor:
    """``2 / (1 - r|u|^2)``; diverges at the boundary."""
    r = check_curvature(r)
    u = as_tensor(u)
    check_in_ball(u, r, "u")
    return _lambda(u, r).squeeze(-1)


def exp_map(u, v, r: float = 1.0) -> torch.Tensor:
    """Exponential map at ``u`` applied to the tangent vector ``v``."""
    r = check_curvature(r)
    u, v = as_tensor(u), as_tensor(v)
    check_in_ball(u, r, "u")
    if not bool(torch.isfinite(v).all()):
        raise DomainError("tangent vector has non-finite coordinates")
    sqrt_r = math.sqrt(r)
    vnorm = _norm(v).clamp_min(MIN_NORM)
    t = torch.tanh(sqrt_r * _lambda(u, r) * vnorm / 2).clamp(max=1 - BOUNDARY_GUARD)
    return _mobius_add(u, t * v / (sqrt_r * vnorm), r)


def exp_map0(v, r: float = 1.0) -> torch.Tensor:
    """Exponential map at the origin, ``tanh(sqrt(r)|v|) v / (sqrt(r)|v|)``.

    Saturated inputs land on the boundary; callers project afterwards.
    """
    r = check_curvature(r)
    v = as_tensor(v)
    sqrt_r = math.sqrt(r)
    vnorm = _norm(v).clamp_min(MIN_NORM)
    return torch.tanh(sqrt_r * vnorm) * v / (sqrt_r * vnorm)


def log_map(u, w, r: float = 1.0) -> torch.Tensor:
    """Logarithmic map at ``u``; inverse of :func:`exp_map`."""
    r = check_curvature(r)
    u, w = as_tensor(u), as_tensor(w)
    check_in_ball(u, r, "u")
    check_in_ball(w, r, "w")
    sqrt_r = math.sqrt(r)
    sub = _mobius_add(-u, w, r)
    n = _norm(sub)
    arg = (sqrt_r * n).clamp(max=1 - BOUNDARY_GUARD)
    return 2 / (sqrt_r * _lambda(u, r)) * torch.atanh(arg) * sub / n.clamp_min(MIN_NORM)


def riemannian_distance(u, v, r: float = 1.0) -> torch.Tensor:
    """Geodesic distance ``(2/sqrt(r)) atanh(sqrt(r) |(-u) ⊕ v|)``."""
    r = check_curvature(r)
    u, v = as_tensor(u), as_tensor(v)
    check_in_ball(u, r, "u")
    check_in_ball(v, r, "v")
    return _distance(u, v, r)


def _distance(u: torch.Tensor, v: torch.Tensor, r: float) -> torch.Tensor:
    # |(-u) ⊕ v| = |u - v| / sqrt((1 - r<u,v>)^2 + r^2 (|u|^2|v|^2 - <u,v>^2))
    sqrt_r = math.sqrt(r)
    uv = (u * v).sum(-1, keepdim=True)
    cross = (_sqnorm(u) * _sqnorm(v) - uv * uv).clamp_min(0)
    den = ((1 - r * uv) ** 2 + r * r * cross).sqrt()
    arg = (sqrt_r * _norm(u - v) / den.clamp_min(MIN_NORM)).clamp(max=1 - BOUNDARY_GUARD)
    return (2 / sqrt_r * torch.atanh(arg)).squeeze(-1)


def pairwise_distance(u: torch.Tensor, v: torch.Tensor, r: float) -> torch.Tensor:
    """Distances between every row of ``u`` (n, d) and of ``v`` (m, d) -> (n, m)."""
    return _distance(u.unsqueeze(-2), v.unsqueeze(-3), r)


def project_to_ball(z, r: float = 1.0, xi: float = 1e-5) -> torch.Tensor:
    """Rescale ``z`` onto the shell of radius ``(1 - xi)/sqrt(r)`` when it exceeds it."""
    r = check_curvature(r)
    if xi < 0:
        raise DomainError(f"xi must be non-negative, got {xi}")
    z = as_tensor(z)
    maxnorm = (1 - xi) / math.sqrt(r)
    norm = _norm(z)
    # a rescaled point can land a few ulps above maxnorm; leave those alone so projection is idempotent
    scale = torch.where(norm > maxnorm * (1 + 1e-15), maxnorm / norm.clamp_min(MIN_NORM), torch.ones_like(norm))
    return z * scale


def _einstein_terms(z: torch.Tensor, r: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Lorentz factors and Klein coordinates of Poincaré points.

    ``gamma = 1/sqrt(1 - r|k|^2)`` with ``k = 2z/(1 + r|z|^2)`` simplifies to
    ``(1 + r|z|^2)/(1 - r|z|^2)``, which avoids the cancellation near the rim.
    """
    zz = _sqnorm(z)
    gamma = (1 + r * zz) / (1 - r * zz)
    k = 2 * z / (1 + r * zz)
    return gamma, k


def _klein_to_poincare(weighted_sum: torch.Tensor, rho: torch.Tensor, r: float) -> torch.Tensor:
    inner = (1 - r / rho**2 * _sqnorm(weighted_sum)).clamp_min(BOUNDARY_GUARD)
    return (weighted_sum / rho) / (1 + torch.sqrt(inner))


def hyp_avg(points, r: float = 1.0) -> torch.Tensor:
    """Einstein midpoint of ``points`` (m, d) computed in Klein coordinates."""
    r = check_curvature(r)
    if isinstance(points, (list, tuple)):
        if len(points) == 0:
            raise ValueError("hyp_avg needs at least one point")
        points = torch.stack([as_tensor(p) for p in points])
    z = as_tensor(points)
    if z.dim() != 2 or z.shape[0] == 0:
        raise ValueError("hyp_avg expects a non-empty (m, d) array of points")
    check_in_ball(z, r, "points")
    if z.shape[0] == 1:
        return z[0].clone()
    gamma, k = _einstein_terms(z, r)
    return _klein_to_poincare((gamma * k).sum(0), gamma.sum(0), r)


def hyp_avg_grouped(points: torch.Tensor, groups: torch.Tensor, num_groups: int, r: float) -> torch.Tensor:
    """Einstein midpoint of each group of rows; ``groups[i]`` is the group of row i.

    Empty groups come back as the origin.
    """
    gamma, k = _einstein_terms(points, r)
    d = points.shape[-1]
    num = torch.zeros(num_groups, d, dtype=points.dtype).index_add(0, groups, gamma * k)
    rho = torch.zeros(num_groups, 1, dtype=points.dtype).index_add(0, groups, gamma)
    return _klein_to_poincare(num, rho.clamp_min(MIN_NORM), r)


def equal_norm_distance(eta, theta, r: float = 1.0):
    """Distance between two points of norm ``eta`` separated by angle ``theta``.

    ``(1/sqrt(r)) acosh(1 + a * (1 - cos theta))`` with ``a = 4 r eta^2 / (1 - r eta^2)^2``.
    Works on floats and numpy arrays.
    """
    r = check_curvature(r)
    sqrt_r = math.sqrt(r)
    eta = np.asarray(eta, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(eta < 0) or np.any(sqrt_r * eta >= 1):
        raise DomainError("eta must lie in [0, 1/sqrt(r))")
    one_minus = (1 - sqrt_r * eta) * (1 + sqrt_r * eta)
    a = 4 * r * eta**2 / one_minus**2
    beta = 2 * np.sin(theta / 2) ** 2
    u = a * beta
    # acosh(1 + u) = log1p(u + sqrt(u (u + 2))), exact for tiny u
    out = np.log1p(u + np.sqrt(u * (u + 2))) / sqrt_r
    return float(out) if out.ndim == 0 else out
