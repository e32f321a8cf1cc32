"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, Tensor, no_grad


@dataclass
class GradCheckReport:
    """Per-leaf maximum relative error between analytic and numeric gradients."""

    max_rel_error: list[float] = field(default_factory=list)
    names: list[str] = field(default_factory=list)
    tol: float = 1e-6

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is (numerically) zero from
    dividing roundoff by roundoff.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-6,
    names: Sequence[str] | None = None,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f()`` against central differences.

    ``f`` must rebuild its graph on each call and be deterministic; a second
    evaluation at the unperturbed point that disagrees with the first raises
    :class:`ContractError`.
    """
    report = GradCheckReport(tol=tol)
    if not leaves:
        return report
    names = list(names) if names is not None else [f"leaf{i}" for i in range(len(leaves))]

    for leaf in leaves:
        leaf.zero_grad()
    loss = f()
    if loss.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    base = loss.item()
    loss.backward()
    analytic = [leaf.grad.copy() for leaf in leaves]

    with no_grad():
        if f().item() != base:
            raise ContractError("function is not deterministic; disable dropout before checking")
        for leaf, ga, name in zip(leaves, analytic, names):
            leaf.data = np.ascontiguousarray(leaf.data)
            flat = leaf.data.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2.0 * step)
            err = relative_error(ga.reshape(-1), numeric, floor)
            report.max_rel_error.append(float(err.max()) if err.size else 0.0)
            report.names.append(name)
    return report
