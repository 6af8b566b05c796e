"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    # (tensor name, flat index) where the step-h and step-2h estimates disagree,
    # i.e. the numeric derivative is unreliable (typically a ReLU crossing)
    kinks: List[Tuple[str, int]] = field(default_factory=list)
    # points where |analytic| + |numeric| fell under the floor
    tiny: List[Tuple[str, int]] = field(default_factory=list)
    per_tensor: Dict[str, float] = field(default_factory=dict)

    @property
    def kink_fraction(self) -> float:
        total = self.checked + len(self.kinks)
        return len(self.kinks) / total if total else 0.0

    def passed(self, tol: float = 1e-5, max_kink_fraction: float = 0.05) -> bool:
        return self.checked > 0 and self.max_rel_error < tol and self.kink_fraction <= max_kink_fraction


def _step(eps, name: str) -> float:
    if not isinstance(eps, Mapping):
        return float(eps)
    for pattern, value in eps.items():
        if fnmatch.fnmatchcase(name, pattern):
            return float(value)
    raise KeyError(f"no step given for input {name!r}")


def grad_check(
    f: Callable[..., Tensor],
    inputs: Mapping[str, Tensor],
    eps: Union[float, Mapping[str, float]] = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-8,
    kink_tol: float = 1e-5,
    scale_floor: float = 1e-3,
) -> GradCheckResult:
    """Compare analytic gradients of ``f(**inputs)`` with finite differences.

    The numeric derivative is the Richardson combination of central
    differences at steps ``eps`` and ``2 * eps`` (a five-point stencil with
    O(eps^4) truncation error). When the two central differences disagree by
    more than ``kink_tol`` relative, or the one-sided slopes jump (which a
    symmetric kink such as relu at exactly 0 shows), the function is not
    smooth on that interval and the point is reported as a kink instead of
    being scored.

    Args:
      f: returns a scalar Tensor. Called repeatedly, so it must be pure
        apart from batch-norm running statistics.
      inputs: named tensors to differentiate; must be float64 for the check
        to be meaningful.
      eps: finite-difference step, or an ordered mapping from glob pattern
        to step; the first pattern matching an input name applies.
      max_coords: if set, a random subset of at most this many coordinates
        per tensor is checked.
      rng: generator used for subset selection.
      floor: smallest denominator for the relative error. It is raised
        automatically to what float64 roundoff allows for the observed
        magnitude of ``f``.
      kink_tol: relative disagreement between the two central differences
        above which a coordinate is excluded as non-differentiable.
      scale_floor: the denominator is also at least this fraction of the
        largest analytic gradient magnitude in the same tensor, so entries
        many orders below the tensor's gradient scale are compared on an
        absolute footing instead of amplifying roundoff.

    Returns:
      A GradCheckResult with the worst relative error over checked points.
    """
    rng = rng or np.random.default_rng(0)
    steps = {k: _step(eps, k) for k in inputs}
    for t in inputs.values():
        t.grad = None
        t.requires_grad = True
    out = f(**inputs)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar function")
    out.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in inputs.items()}

    def at(flat, i, value):
        flat[i] = value
        return float(f(**inputs).data)

    with no_grad():
        f0 = float(f(**inputs).data)
        worst, checked = 0.0, 0
        result = GradCheckResult(0.0, 0)
        for name, t in inputs.items():
            eps = steps[name]
            base_floor = max(floor, 1e3 * np.finfo(np.float64).eps * max(1.0, abs(f0)) / eps)
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            a_flat = analytic[name].reshape(-1)
            t_floor = max(base_floor, scale_floor * float(np.abs(a_flat).max(initial=0.0)))
            tensor_worst = 0.0
            for i in idx:
                orig = flat[i]
                f1p, f1m = at(flat, i, orig + eps), at(flat, i, orig - eps)
                f2p, f2m = at(flat, i, orig + 2 * eps), at(flat, i, orig - 2 * eps)
                flat[i] = orig
                c1 = (f1p - f1m) / (2 * eps)
                c2 = (f2p - f2m) / (4 * eps)
                # one-sided slope gaps; smooth: gap(2h) = 2 gap(h), kink: gap(2h) = gap(h)
                gap1 = (f1p - 2 * f0 + f1m) / eps
                gap2 = (f2p - 2 * f0 + f2m) / (2 * eps)
                scale = max(abs(c1), abs(c2), t_floor)
                if abs(c1 - c2) > kink_tol * scale or abs(gap2 - 2 * gap1) > kink_tol * scale:
                    result.kinks.append((name, int(i)))
                    continue
                numeric = (4 * c1 - c2) / 3
                a = float(a_flat[i])
                if abs(a) + abs(numeric) < t_floor:
                    result.tiny.append((name, int(i)))
                err = abs(a - numeric) / max(abs(a), abs(numeric), t_floor)
                tensor_worst = max(tensor_worst, err)
                checked += 1
            result.per_tensor[name] = tensor_worst
            worst = max(worst, tensor_worst)
    result.max_rel_error = worst
    result.checked = checked
    return result
