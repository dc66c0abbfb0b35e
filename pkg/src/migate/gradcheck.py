"""Central-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, get_dtype, record_decisions


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_parameter: dict[str, float] = field(default_factory=dict)
    worst: tuple[str, tuple] | None = None
    kink_crossings: dict[str, int] = field(default_factory=dict)
    max_rel_error_smooth: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{status} max relative error {self.max_rel_error:.3e} (tol {self.tol:.0e})"]
        for name, err in self.per_parameter.items():
            kinks = self.kink_crossings.get(name, 0)
            lines.append(f"  {name:<24s} {err:.3e}" + (f"  ({kinks} kink crossings)" if kinks else ""))
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor).

    The floor keeps entries whose true gradient is at roundoff level from
    dominating; with eps=1e-4 in 64-bit the difference quotient carries about
    1e-12 absolute noise.
    """
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def numerical_gradient(f: Callable[[], Tensor], param: Tensor, eps: float = 1e-4, label: str = "",
                       kinks: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to every entry of ``param``.

    If ``kinks`` is given (a boolean array shaped like ``param``), entries whose
    perturbations change the branch of some ReLU/abs/max are marked in it.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    base = _pattern(f, label, 0) if kinks is not None else None
    kflat = kinks.reshape(-1) if kinks is not None else None
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp, pp = _scalar(f, label, i, base is not None)
        flat[i] = orig - eps
        fm, pm = _scalar(f, label, i, base is not None)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
        if base is not None:
            kflat[i] = not (_same(base, pp) and _same(base, pm))
    return grad


def _same(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _pattern(f, label, index) -> list:
    return _scalar(f, label, index, True)[1]


def _scalar(f, label, index, track: bool = False):
    if track:
        with record_decisions() as pattern:
            v, _ = _scalar(f, label, index)
        return v, pattern
    try:
        v = float(f().data)
    except NonFiniteError as exc:
        raise NonFiniteError(f"loss not finite while perturbing {label or 'parameter'}[{index}]: {exc}") from exc
    if not np.isfinite(v):
        raise NonFiniteError(f"loss not finite while perturbing {label or 'parameter'}[{index}]")
    return v, None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor] | dict[str, Tensor],
               eps: float = 1e-4, tol: float = 1e-5, floor: float = 1e-6) -> GradCheckReport:
    """Compare back-propagated gradients of ``f`` with central differences.

    ``f`` must rebuild the graph from the current parameter values on every
    call. Requires 64-bit precision; 32-bit differences are too noisy to be
    meaningful at these tolerances.
    """
    if get_dtype() is not np.float64:
        raise RuntimeError("grad_check needs 64-bit precision; wrap the call in precision('f64')")
    if not isinstance(params, dict):
        params = {(p.name or f"param{i}"): p for i, p in enumerate(params)}
    for p in params.values():
        p.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise NonFiniteError("loss not finite at the unperturbed point")
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    report = GradCheckReport(max_rel_error=0.0, tol=tol)
    for name, p in params.items():
        kinks = np.zeros(p.shape, dtype=bool)
        numeric = numerical_gradient(f, p, eps, name, kinks)
        err = relative_error(analytic[name], numeric, floor)
        worst = float(err.max()) if err.size else 0.0
        report.per_parameter[name] = worst
        report.kink_crossings[name] = int(kinks.sum())
        if (~kinks).any():
            report.max_rel_error_smooth = max(report.max_rel_error_smooth, float(err[~kinks].max()))
        if worst >= report.max_rel_error:
            report.max_rel_error = worst
            report.worst = (name, np.unravel_index(int(err.argmax()), err.shape) if err.size else ())
    return report
