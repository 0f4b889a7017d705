"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from inklpose.errors import ArgumentError, NumericError
from inklpose.substrate.tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    errors: dict[str, float] = field(default_factory=dict)
    entries_checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def worst(self) -> str:
        if not self.errors:
            return ""
        return max(self.errors, key=self.errors.get)


def _named(inputs) -> list[tuple[str, Tensor]]:
    if isinstance(inputs, Tensor):
        return [(inputs.name or "x", inputs)]
    if isinstance(inputs, Mapping):
        return list(inputs.items())
    return [(t.name or f"x{i}", t) for i, t in enumerate(inputs)]


def argmax_margin(values: np.ndarray, axis: int) -> float:
    """Smallest gap between the largest and second largest entry along ``axis``."""
    if values.shape[axis] < 2:
        return float("inf")
    part = -np.partition(-values, 1, axis=axis)
    top = np.take(part, 0, axis=axis)
    second = np.take(part, 1, axis=axis)
    return float((top - second).min())


def require_margin(values: np.ndarray, axis: int, h: float) -> None:
    """Refuse to finite-difference through a max whose winner could flip under ``h``."""
    gap = argmax_margin(values, axis)
    if gap < 10 * h:
        raise ArgumentError(f"argmax margin {gap:.3g} below 10*h = {10 * h:.3g}; pick another point")


def grad_check(
    f: Callable[[], Tensor],
    inputs: Tensor | Sequence[Tensor] | Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
    atol: float = 0.0,
    include_largest: bool = False,
    _tamper: bool = False,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` takes no arguments and closes over ``inputs``; it must be
    deterministic.  The error for each input tensor is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, atol)``.
    With ``max_entries`` set, that many entries per tensor are sampled;
    ``include_largest`` makes one of them the entry with the largest analytic
    gradient, so the scale is not set by entries lost in rounding noise.
    """
    named = _named(inputs)
    for name, t in named:
        if t.dtype != np.float64:
            raise ArgumentError(f"grad_check needs float64 tensors; {name} is {t.dtype}")
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"non-finite values in input {name}")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("non-finite loss value")
    backward(loss)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0, tol=tol)
    first = True
    for name, t in named:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        if not np.all(np.isfinite(analytic)):
            raise NumericError(f"non-finite analytic gradient for {name}")
        tampered = _tamper and first
        if tampered:
            analytic.reshape(-1)[0] += 1.0 + abs(analytic.reshape(-1)[0])
        first = False
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
            if include_largest:
                top = int(np.argmax(np.abs(analytic.reshape(-1))))
                if top not in idx:
                    idx[0] = top
            if tampered and 0 not in idx:
                idx[-1] = 0
            idx = np.sort(idx)
        numeric = np.zeros(idx.size)
        with no_grad():
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
                numeric[k] = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[idx]
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), atol)
        err = 0.0 if scale == 0 else float(np.abs(a - numeric).max() / scale)
        report.errors[name] = err
        report.entries_checked += idx.size
        report.max_rel_error = max(report.max_rel_error, err)
    return report
