"""Central finite-difference gradient checking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import torch
from torch import Tensor, nn

DEFAULT_STEP = 1e-5
# Gradients smaller than this (in absolute value) are compared absolutely.
ERROR_FLOOR = 1e-6
# Central differences carry roundoff of order eps * sum|c_i out_i| / step; the
# floor grows with that magnitude so exactly-zero gradients (e.g. a key bias
# under softmax) are not judged on that noise alone.
SCALE_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    failure: Optional[str] = None

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_error < self.tolerance

    def table(self) -> str:
        lines = [f"{name:<48s} {err:.3e}" for name, err in self.errors.items()]
        if self.failure:
            lines.append(f"FAILED: {self.failure}")
        return "\n".join(lines)


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = ERROR_FLOOR) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(analytic, floor))
    return float(((analytic - numeric).abs() / denom).max()) if analytic.numel() else 0.0


def grad_check(
    op: Callable[..., Tensor],
    input_shapes: Sequence[Sequence[int]] = (),
    tolerance: float = 1e-4,
    *,
    inputs: Optional[Sequence[Tensor]] = None,
    module: Optional[nn.Module] = None,
    seed: int = 0,
    step: float = DEFAULT_STEP,
    shift: float = 0.0,
    max_entries: Optional[int] = None,
    input_names: Optional[Sequence[str]] = None,
    directional: bool = False,
) -> GradCheckReport:
    """Compare autograd gradients of ``op`` against central differences.

    The op output is reduced to a scalar with a fixed random cotangent so
    every output entry contributes.  Inputs are drawn from N(0, 1) + shift
    in float64 unless given explicitly.  If ``module`` is given, its
    parameters are checked too (the module is converted to float64).
    ``max_entries`` limits the number of finite-difference probes per
    tensor; probed entries are chosen at random.  ``directional`` instead
    probes each tensor once along a random unit direction v, comparing
    <grad, v> with the central difference along v (two evaluations per
    tensor, every entry covered).
    """
    gen = torch.Generator().manual_seed(seed)
    if inputs is None:
        inputs = [torch.randn(tuple(s), generator=gen, dtype=torch.float64) + shift for s in input_shapes]
    inputs = [t.detach().clone().to(torch.float64).requires_grad_(True) for t in inputs]
    names = list(input_names) if input_names else [f"input{i}" for i in range(len(inputs))]
    checked: list[tuple[str, Tensor]] = list(zip(names, inputs))
    if module is not None:
        module.double()
        checked += [(n, p) for n, p in module.named_parameters() if p.requires_grad]

    with torch.no_grad():
        probe = op(*inputs)
    cotangent = torch.randn(probe.shape, generator=gen, dtype=torch.float64) if probe.numel() > 1 else None

    def scalar() -> Tensor:
        out = op(*inputs)
        return out.sum() if cotangent is None else (out * cotangent).sum()

    magnitude = float(probe.abs().sum() if cotangent is None else (probe * cotangent).abs().sum())

    report = GradCheckReport(tolerance=tolerance)
    tensors = [t for _, t in checked]
    floor = max(ERROR_FLOOR, SCALE_FLOOR * magnitude)
    grads = torch.autograd.grad(scalar(), tensors, allow_unused=True)
    for (name, t), g in zip(checked, grads):
        g = torch.zeros_like(t) if g is None else g
        if not torch.isfinite(g).all():
            report.failure = f"non-finite analytic gradient for {name}"
            report.errors[name] = math.inf
            return report
        if directional:
            v = torch.randn(t.shape, generator=gen, dtype=torch.float64)
            v /= v.norm().clamp_min(1e-300)
            with torch.no_grad():
                orig = t.data.clone()
                t.data.add_(v, alpha=step)
                up = scalar().item()
                t.data.copy_(orig - step * v)
                down = scalar().item()
                t.data.copy_(orig)
            report.errors[name] = relative_error(
                (g * v).sum().view(1), torch.tensor([(up - down) / (2 * step)], dtype=torch.float64), floor)
            continue
        flat = t.data.view(-1)
        n = flat.numel()
        if max_entries is not None and n > max_entries:
            idx = torch.randperm(n, generator=gen)[:max_entries].tolist()
        else:
            idx = range(n)
        numeric, analytic = [], []
        with torch.no_grad():
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                up = scalar().item()
                flat[i] = orig - step
                down = scalar().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * step))
                analytic.append(g.reshape(-1)[i].item())
        report.errors[name] = relative_error(
            torch.tensor(analytic, dtype=torch.float64), torch.tensor(numeric, dtype=torch.float64), floor
        )
    return report
