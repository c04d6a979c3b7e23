"""Closed-form log margins for equal-norm embeddings.

Image and text embeddings share the norm ``eta``; the target text sits at
angle ``theta_c`` from the image and the nearest rival at ``theta_c'``.  With
``beta = 1 - cos(theta)`` the hyperbolic margin is

    (lam / sqrt(r)) * [acosh(1 + alpha(eta) beta_c') - acosh(1 + alpha(eta) beta_c)],
    alpha(eta) = 4 r eta^2 / (1 - r eta^2)^2,

and the Euclidean comparator is ``2 lam eta^2 (beta_c' - beta_c)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from hypalign.dataio import atomic_write_text
from hypalign.geometry import DomainError, check_curvature

CURVE_COLUMNS = ("eta", "m_hyp", "m_euc", "m_hyp_small_asym", "m_hyp_large_asym")


def beta_of(theta):
    """``1 - cos(theta)`` written as ``2 sin^2(theta/2)`` to keep small angles exact."""
    return 2 * np.sin(np.asarray(theta, dtype=np.float64) / 2) ** 2


@dataclass(frozen=True)
class MarginQuery:
    eta: float
    beta_c: float
    beta_cp: float
    lam: float = 1.0
    r: float = 1.0

    def __post_init__(self):
        check_curvature(self.r)
        if not 0 <= self.eta < 1 / math.sqrt(self.r) or self.r * self.eta**2 >= 1:
            raise DomainError(f"eta must lie in [0, 1/sqrt(r)), got {self.eta}")
        for b in (self.beta_c, self.beta_cp):
            if not 0 <= b <= 2:
                raise DomainError(f"beta must lie in [0, 2], got {b}")
        if not self.lam > 0:
            raise DomainError("lambda must be positive")

    @classmethod
    def from_angles(cls, eta: float, theta_c: float, theta_cp: float, lam: float = 1.0, r: float = 1.0) -> "MarginQuery":
        return cls(eta, float(beta_of(theta_c)), float(beta_of(theta_cp)), lam, r)


def _check_eta(eta, r: float) -> np.ndarray:
    eta = np.asarray(eta, dtype=np.float64)
    if np.any(eta < 0) or np.any(math.sqrt(r) * eta >= 1):
        raise DomainError("eta must lie in [0, 1/sqrt(r))")
    return eta


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def alpha_factor(eta, r: float = 1.0):
    """``4 r eta^2 / (1 - r eta^2)^2``; the denominator is factored to keep precision near the rim."""
    r = check_curvature(r)
    eta = _check_eta(eta, r)
    s = math.sqrt(r) * eta
    return _out(4 * s**2 / ((1 - s) * (1 + s)) ** 2)


def _acosh1p(u: float) -> float:
    # acosh(1 + u) without forming 1 + u, exact for tiny u
    return math.log1p(u + math.sqrt(u * (u + 2)))


def hyperbolic_log_margin(q: MarginQuery) -> float:
    a = alpha_factor(q.eta, q.r)
    return q.lam / math.sqrt(q.r) * (_acosh1p(a * q.beta_cp) - _acosh1p(a * q.beta_c))


def euclidean_margin(q: MarginQuery) -> float:
    return 2 * q.lam * q.eta**2 * (q.beta_cp - q.beta_c)


def small_eta_asymptote(eta, beta_c: float, beta_cp: float, lam: float = 1.0, r: float = 1.0):
    """``(lam/sqrt(r)) sqrt(2 alpha) (sqrt(beta_c') - sqrt(beta_c))``, from ``acosh(1+u) ~ sqrt(2u)``."""
    a = np.asarray(alpha_factor(eta, r))
    return _out(lam / math.sqrt(r) * np.sqrt(2 * a) * (math.sqrt(beta_cp) - math.sqrt(beta_c)))


def large_eta_asymptote(beta_c: float, beta_cp: float, lam: float = 1.0, r: float = 1.0) -> float:
    """``(lam/sqrt(r)) ln(beta_c'/beta_c)``, from ``acosh(1+u) ~ ln(2u)``; +inf when ``beta_c = 0``."""
    if beta_c == 0:
        return math.inf
    return lam / math.sqrt(check_curvature(r)) * math.log(beta_cp / beta_c)


def default_grid(r: float = 1.0, points: int = 400) -> np.ndarray:
    """Log-spaced norms from 1e-4 to ``(1 - 1e-6)/sqrt(r)``."""
    s = 1 / math.sqrt(check_curvature(r))
    return np.geomspace(1e-4, 1 - 1e-6, points) * s


def margin_curve(eta_grid, beta_c: float, beta_cp: float, lam: float = 1.0, r: float = 1.0) -> list[tuple[float, ...]]:
    """Rows of ``eta, m_hyp, m_euc, small-eta asymptote, large-eta asymptote``."""
    grid = _check_eta(eta_grid, check_curvature(r)).reshape(-1)
    large = large_eta_asymptote(beta_c, beta_cp, lam, r)
    rows = []
    for eta in grid:
        q = MarginQuery(float(eta), beta_c, beta_cp, lam, r)
        rows.append(
            (float(eta), hyperbolic_log_margin(q), euclidean_margin(q), small_eta_asymptote(float(eta), beta_c, beta_cp, lam, r), large)
        )
    return rows


def curve_to_csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for row in rows:
        w.writerow(["inf" if math.isinf(v) else repr(float(v)) for v in row])
    return buf.getvalue()


def write_margin_curve(path, eta_grid, beta_c: float, beta_cp: float, lam: float = 1.0, r: float = 1.0) -> list:
    rows = margin_curve(eta_grid, beta_c, beta_cp, lam, r)
    atomic_write_text(path, curve_to_csv_text(rows))
    return rows
