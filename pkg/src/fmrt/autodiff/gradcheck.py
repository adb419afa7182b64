"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Sequence, Union

import numpy as np

from .tensor import Tensor, default_dtype


@dataclass
class ParamCheck:
    name: str
    size: int
    max_abs_error: float
    max_rel_error: float


@dataclass
class GradCheckReport:
    tol: float
    step: float
    deterministic: bool
    params: List[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.deterministic and self.max_rel_error <= self.tol

    def summary(self) -> str:
        worst = max(self.params, key=lambda p: p.max_rel_error, default=None)
        where = f" (worst: {worst.name})" if worst is not None else ""
        status = "PASS" if self.passed else "FAIL"
        det = "" if self.deterministic else " NON-DETERMINISTIC"
        return f"{status} max_rel_err={self.max_rel_error:.2e}{where}{det}"


def _named(params) -> Dict[str, Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    return {f"p{i}": p for i, p in enumerate(params)}


def check_gradients(
    fn: Callable[[], Tensor],
    params: Union[Mapping[str, Tensor], Sequence[Tensor]],
    inputs: Iterable[Tensor] = (),
    step: float = 1e-3,
    tol: float = 1e-3,
) -> GradCheckReport:
    """Compare backward-pass gradients of ``fn()`` against central differences.

    ``fn`` takes no arguments and returns a scalar tensor built from ``params``
    (and any constant ``inputs``). Everything is promoted to float64 for the
    duration of the check and restored afterwards.

    The per-parameter relative error is ``max|analytic - numeric|`` divided by
    ``max(max|analytic|, max|numeric|)`` over that parameter's entries; a
    parameter whose gradient is identically zero on both paths scores 0.
    """
    named = _named(params)
    tensors = list(named.values()) + [t for t in inputs if isinstance(t, Tensor)]
    saved = [(t, t.data) for t in tensors]
    saved_flags = [(t, t.requires_grad) for t in named.values()]
    try:
        for t, data in saved:
            t.data = data.astype(np.float64)
        for t in named.values():
            t.requires_grad = True
            t.grad = None
        with default_dtype(np.float64):
            first = fn()
            second = fn()
            deterministic = bool(np.array_equal(first.data, second.data))
            first.backward()
            report = GradCheckReport(tol=tol, step=step, deterministic=deterministic)
            for name, p in named.items():
                analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
                numeric = np.zeros_like(p.data)
                flat = p.data.reshape(-1)
                num_flat = numeric.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    fp = fn().item()
                    flat[i] = orig - step
                    fm = fn().item()
                    flat[i] = orig
                    num_flat[i] = (fp - fm) / (2 * step)
                diff = np.abs(analytic - numeric)
                scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
                max_abs = float(diff.max(initial=0.0))
                rel = 0.0 if scale == 0.0 else max_abs / scale
                report.params.append(ParamCheck(name, p.size, max_abs, float(rel)))
    finally:
        for t, data in saved:
            t.data = data
        for t, flag in saved_flags:
            t.requires_grad = flag
            t.grad = None
    return report
