"""Central finite-difference oracle for gradient verification.

Comparisons run in float64: at h=1e-3, float32 evaluation noise alone
(~1e-7/2h per coordinate) would exceed the 1e-4 relative-error target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NumericError
from .tensor import Tensor, backward, parameter


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    n_checked: int

    def __str__(self):
        word = "pass" if self.passed else "FAIL"
        return (f"gradcheck {word}: max rel error {self.max_rel_error:.3e} at {self.worst_index} "
                f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e}, {self.n_checked} coords)")


def finite_diff_check(fn, point, tolerance: float = 1e-4, h: float = 1e-3,
                      coords=None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar `fn` against central differences.

    `fn` maps one Tensor to a scalar Tensor.  `coords` limits the check to
    selected flat indices (all coordinates when None).
    """
    x0 = np.asarray(point, dtype=np.float64)
    leaf = parameter(x0, name="fdcheck_point", dtype=np.float64)
    loss = fn(leaf)
    if not np.isfinite(loss.data).all():
        raise NumericError("finite_diff_check: function returned a non-finite value")
    analytic = backward(loss)[leaf].data.reshape(-1)

    flat_indices = range(x0.size) if coords is None else coords
    max_rel, worst, worst_a, worst_n, n_checked = 0.0, (0,), 0.0, 0.0, 0

    def eval_at(arr):
        out = fn(Tensor(arr, dtype=np.float64))
        val = float(out.data)
        if not np.isfinite(val):
            raise NumericError("finite_diff_check: function returned a non-finite value")
        return val

    for i in flat_indices:
        xp = x0.reshape(-1).copy()
        xm = xp.copy()
        xp[i] += h
        xm[i] -= h
        num = (eval_at(xp.reshape(x0.shape)) - eval_at(xm.reshape(x0.shape))) / (2.0 * h)
        ana = float(analytic[i])
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        n_checked += 1
        if rel >= max_rel:
            max_rel = rel
            worst = np.unravel_index(i, x0.shape)
            worst_a, worst_n = ana, num
    return GradCheckReport(passed=max_rel <= tolerance, max_rel_error=max_rel,
                           worst_index=worst, analytic=worst_a, numeric=worst_n,
                           n_checked=n_checked)
