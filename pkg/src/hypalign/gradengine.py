"""Reverse-mode gradients and finite-difference checking.

Gradients come from torch autograd in float64.  :func:`finite_diff_check` is
the independent route: it only ever evaluates the expression forward.
"""

from __future__ import annotations

import contextlib
import math
import re
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import torch
from torch.overrides import TorchFunctionMode

from hypalign import geometry as geo

Expression = Callable[..., torch.Tensor]


class NonFiniteError(FloatingPointError):
    """A primitive produced a non-finite value while evaluating an expression."""

    def __init__(self, primitive: str, phase: str = "forward"):
        self.primitive = primitive
        self.phase = phase
        super().__init__(f"non-finite value produced by primitive '{primitive}' during {phase} pass")


class _FiniteGuard(TorchFunctionMode):
    """Checks every floating tensor returned by a torch function."""

    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        if isinstance(out, torch.Tensor) and out.is_floating_point():
            with torch.no_grad():
                if not bool(torch.isfinite(out).all()):
                    raise NonFiniteError(getattr(func, "__name__", repr(func)))
        return out


@contextlib.contextmanager
def deterministic_mode() -> Iterator[None]:
    """Fix the evaluation order so repeated runs agree bit for bit."""
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


@dataclass
class GradientReport:
    gradients: dict[str, torch.Tensor]

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.gradients[name]

    def __iter__(self):
        return iter(self.gradients)


def _leaves(wrt: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {k: geo.as_tensor(v).detach().clone().requires_grad_(True) for k, v in wrt.items()}


def evaluate_with_gradients(
    expression: Expression,
    wrt: Mapping[str, torch.Tensor],
    *,
    check_finite: bool = True,
    deterministic: bool = True,
) -> tuple[float, GradientReport]:
    """Evaluate ``expression(**wrt)`` and its gradient with respect to every input.

    Args:
        expression: callable returning a scalar tensor; receives each entry of
            ``wrt`` as a keyword argument.
        wrt: named tensors to differentiate against (model parameters or
            inputs alike; they are copied, never mutated).
        check_finite: raise :class:`NonFiniteError` naming the first primitive
            that yields a non-finite forward value or gradient.
        deterministic: run under :func:`deterministic_mode`.
    """
    leaves = _leaves(wrt)
    ctx = deterministic_mode() if deterministic else contextlib.nullcontext()
    with ctx:
        if check_finite:
            with _FiniteGuard():
                loss = expression(**leaves)
        else:
            loss = expression(**leaves)
        if loss.numel() != 1:
            raise ValueError("expression must return a scalar")
        if not check_finite:
            grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                with torch.autograd.detect_anomaly(check_nan=True):
                    try:
                        grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
                    except RuntimeError as exc:
                        m = re.search(r"Function '(\w+)' returned nan", str(exc))
                        if m is None:
                            raise
                        raise NonFiniteError(m.group(1), "backward") from exc
    report = {}
    for (name, leaf), g in zip(leaves.items(), grads):
        g = torch.zeros_like(leaf) if g is None else g.detach()
        if check_finite and not bool(torch.isfinite(g).all()):
            raise NonFiniteError(f"gradient of {name}", "backward")
        report[name] = g
    return float(loss.detach()), GradientReport(report)


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    tolerance: float
    failing: list[tuple[str, int]] = field(default_factory=list)
    excluded: list[tuple[str, int]] = field(default_factory=list)
    checked: int = 0

    @property
    def passed(self) -> bool:
        return not self.failing


def _eval(expression: Expression, values: Mapping[str, torch.Tensor]) -> float:
    with torch.inference_mode():
        return float(expression(**values))


def finite_diff_check(
    expression: Expression,
    wrt: Mapping[str, torch.Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    kink_tolerance: float = 1e-3,
) -> FiniteDiffReport:
    """Compare autograd against central differences, coordinate by coordinate.

    The error of a coordinate is ``|auto - fd| / max(|auto|, |fd|, s)`` where
    ``s`` is 1e-3 times the largest gradient entry (floor 1e-8), so entries far
    below the gradient's own scale are not judged on rounding noise.

    A coordinate whose one-sided slopes disagree by more than
    ``kink_tolerance`` (relative to the same scale) sits on a non-differentiable
    point, e.g. a hinge at zero; it is listed in ``excluded`` and not judged.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    _, auto = evaluate_with_gradients(expression, wrt, check_finite=False)
    base = {k: geo.as_tensor(v).detach().clone() for k, v in wrt.items()}
    f0 = _eval(expression, base)
    fd: dict[str, torch.Tensor] = {}
    kinks: dict[str, list[int]] = {}
    for name, x in base.items():
        flat = x.reshape(-1)
        est = torch.zeros_like(flat)
        kinks[name] = []
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + step
            fp = _eval(expression, base)
            flat[i] = orig - step
            fm = _eval(expression, base)
            flat[i] = orig
            est[i] = (fp - fm) / (2 * step)
            right, left = (fp - f0) / step, (f0 - fm) / step
            if abs(right - left) > kink_tolerance * max(1.0, abs(right), abs(left)):
                kinks[name].append(i)
        fd[name] = est.reshape(x.shape)
    scale = max(
        [float(g.abs().max()) for g in auto.gradients.values() if g.numel()]
        + [float(g.abs().max()) for g in fd.values() if g.numel()]
        + [0.0]
    )
    floor = max(1e-3 * scale, 1e-8)
    report = FiniteDiffReport(max_rel_error=0.0, tolerance=tolerance)
    for name in base:
        a = auto[name].reshape(-1)
        f = fd[name].reshape(-1)
        for i in range(a.numel()):
            if i in kinks[name]:
                report.excluded.append((name, i))
                continue
            ai, fi = float(a[i]), float(f[i])
            err = abs(ai - fi) / max(abs(ai), abs(fi), floor)
            if not math.isfinite(err):
                err = math.inf
            report.checked += 1
            report.max_rel_error = max(report.max_rel_error, err)
            if err > tolerance:
                report.failing.append((name, i))
    return report


# Registered primitives: name -> (function of one tensor, sampler of an interior input).
def _interior(gen: torch.Generator, shape: tuple[int, ...], radius: float = 0.85) -> torch.Tensor:
    x = torch.randn(shape, generator=gen, dtype=torch.float64)
    direction = x / torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    scale = radius * torch.rand(shape[:-1] + (1,), generator=gen, dtype=torch.float64)
    return direction * scale


def registered_primitives() -> dict[str, tuple[Expression, Callable[[torch.Generator], dict[str, torch.Tensor]]]]:
    """Scalar test expressions for each primitive the losses are built from."""

    def pair(gen):
        return {"u": _interior(gen, (3,)), "v": _interior(gen, (3,))}

    def vec(gen):
        return {"x": torch.randn(3, generator=gen, dtype=torch.float64)}

    def cloud(gen):
        return {"p": _interior(gen, (3, 3))}

    w = torch.linspace(-1.0, 1.0, 3, dtype=torch.float64)
    return {
        "mobius_add": (lambda u, v: (geo._mobius_add(u, v, 1.0) * w).sum(), pair),
        "conformal_factor": (lambda u, v: geo._lambda(u, 1.0).sum() + geo._lambda(v, 1.0).sum(), pair),
        "exp_map": (lambda u, v: (geo.exp_map(u, v, 1.0) * w).sum(), pair),
        "log_map": (lambda u, v: (geo.log_map(u, v, 1.0) * w).sum(), pair),
        "riemannian_distance": (lambda u, v: geo.riemannian_distance(u, v, 1.0), pair),
        "project_to_ball": (lambda x: (geo.project_to_ball(x, 1.0, 1e-5) * w).sum(), vec),
        "exp_map0": (lambda x: (geo.exp_map0(x, 1.0) * w).sum(), vec),
        "hyp_avg": (lambda p: (geo.hyp_avg(p, 1.0) * w).sum(), cloud),
        "norm": (lambda x: torch.linalg.vector_norm(x), vec),
        "hinge": (lambda x: torch.relu(x).sum(), vec),
        "abs": (lambda x: x.abs().sum(), vec),
        "exp": (lambda x: torch.exp(x).sum(), vec),
        "log": (lambda x: torch.log(1 + x * x).sum(), vec),
        "acosh": (lambda x: torch.acosh(2 + x * x).sum(), vec),
        "atanh": (lambda x: torch.atanh(torch.tanh(x) * 0.9).sum(), vec),
        "affine": (lambda x: (torch.outer(w, w) @ x + w).sum(), vec),
    }
