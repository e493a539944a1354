"""Central-difference gradient checking."""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, grad, no_grad


@dataclass
class GradCheckReport:
    """Outcome of a gradient check.

    ``max_rel_error`` is the largest ``|analytic - numeric|`` over checked
    elements, divided by the gradient scale of the owning input: the larger of
    the two max-abs gradients and ``scale_floor``.
    """

    passed: bool
    max_rel_error: float
    max_abs_error: float
    checked: int
    tol: float
    per_input: List[float] = field(default_factory=list)

    def __bool__(self):
        return self.passed


def grad_check(
    f: Callable[..., Tensor],
    inputs: Union[Tensor, Sequence[Tensor]],
    h: float = 1e-5,
    tol: float = 1e-6,
    max_elements: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    scale_floor: float = 1e-3,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` to central differences.

    With ``max_elements`` set, each input is probed at a random subset of that
    many flat positions (drawn from ``rng``) instead of every element.
    """
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    analytic = grad(f(*inputs), inputs)
    rng = rng if rng is not None else np.random.default_rng(0)

    worst_rel = 0.0
    worst_abs = 0.0
    checked = 0
    per_input = []
    for x, ga in zip(inputs, analytic):
        flat = x.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            positions = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.empty(len(positions))
        with no_grad():
            for n, pos in enumerate(positions):
                orig = flat[pos]
                flat[pos] = orig + h
                fp = float(f(*inputs).data.sum())
                flat[pos] = orig - h
                fm = float(f(*inputs).data.sum())
                flat[pos] = orig
                numeric[n] = (fp - fm) / (2 * h)
        a = ga.reshape(-1)[positions].astype(np.float64)
        diff = np.abs(a - numeric)
        scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(numeric), initial=0.0), scale_floor)
        rel = float(diff.max(initial=0.0) / scale)
        per_input.append(rel)
        worst_rel = max(worst_rel, rel)
        worst_abs = max(worst_abs, float(diff.max(initial=0.0)))
        checked += len(positions)
    return GradCheckReport(worst_rel < tol, worst_rel, worst_abs, checked, tol, per_input)
