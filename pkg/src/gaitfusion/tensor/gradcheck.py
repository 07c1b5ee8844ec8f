"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tolerance: float
    worst_input: int | None = None
    worst_index: tuple | None = None
    checked: int = 0
    per_input: list = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = "" if self.passed else f" at input {self.worst_input} index {self.worst_index}"
        return f"{status} max_rel_error={self.max_rel_error:.3e} (tol {self.tolerance:.0e}, {self.checked} entries){where}"


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    atol: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn(*inputs)`` with central differences.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, atol)``; the
    ``atol`` floor keeps entries whose true gradient is ~0 from reporting
    noise as relative error.  ``max_entries`` caps how many entries per input
    are probed (chosen at random with ``seed``); ``None`` probes all of them.
    Failures are reported, never raised.
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    backward(out, tape)
    analytic = [np.array(t.grad, dtype=np.float64) for t in inputs]

    rng = np.random.default_rng(seed)
    worst, worst_input, worst_index, checked = 0.0, None, None, 0
    per_input = []
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            positions = rng.choice(flat.size, size=max_entries, replace=False)
        local = 0.0
        for pos in positions:
            orig = flat[pos]
            flat[pos] = orig + epsilon
            f_plus = float(fn(*inputs).data)
            flat[pos] = orig - epsilon
            f_minus = float(fn(*inputs).data)
            flat[pos] = orig
            numeric = (f_plus - f_minus) / (2 * epsilon)
            a = analytic[k].reshape(-1)[pos]
            err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
            checked += 1
            local = max(local, err)
            if err > worst:
                worst, worst_input = err, k
                worst_index = tuple(int(i) for i in np.unravel_index(pos, t.shape))
        per_input.append(local)
    return GradCheckReport(worst, worst <= tolerance, tolerance, worst_input, worst_index, checked, per_input)
