"""Float64 tensors and a thin reverse-mode layer over torch autograd.

A *program* is any callable mapping float64 tensors to a tensor (or tuple of
tensors).  ``forward`` records it on a :class:`Tape`; ``backward`` pulls an
output adjoint back to every input.  ``finite_diff_check`` is the independent
central-difference oracle used throughout the test-suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

DTYPE = torch.float64


class ShapeError(ValueError):
    """A primitive received operands of incompatible shape."""


class TapeError(RuntimeError):
    """A tape was replayed after one of its inputs was mutated."""


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    if not torch.is_tensor(x):
        x = np.asarray(x, dtype=np.float64)
        if not x.flags.writeable:
            x = x.copy()
    t = torch.as_tensor(x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


@dataclass(frozen=True)
class Program:
    """A scalar- or tensor-valued function with an optional declared input signature."""

    fn: Callable[..., torch.Tensor]
    signature: tuple[tuple[int, ...], ...] | None = None
    name: str = "program"

    def __call__(self, *args):
        return self.fn(*args)


@dataclass
class Tape:
    inputs: list[torch.Tensor]
    outputs: list[torch.Tensor]
    versions: list[int] = field(default_factory=list)

    def check_intact(self) -> None:
        for i, (t, v) in enumerate(zip(self.inputs, self.versions)):
            if t._version != v:
                raise TapeError(f"input {i} was mutated after the tape was recorded")


def _as_program(program) -> Program:
    return program if isinstance(program, Program) else Program(program)


def forward(program, inputs: Sequence) -> tuple[list[torch.Tensor], Tape]:
    program = _as_program(program)
    leaves = [as_tensor(x, requires_grad=True) for x in inputs]
    if program.signature is not None:
        if len(program.signature) != len(leaves):
            raise ShapeError(f"{program.name}: expected {len(program.signature)} inputs, got {len(leaves)}")
        for i, (shape, leaf) in enumerate(zip(program.signature, leaves)):
            if tuple(leaf.shape) != tuple(shape):
                raise ShapeError(
                    f"{program.name}: input {i} has shape {tuple(leaf.shape)}, declared {tuple(shape)}"
                )
    try:
        out = program(*leaves)
    except RuntimeError as exc:
        # torch names the failing primitive in its message (matmul, cat, ...)
        raise ShapeError(f"{program.name}: {exc}") from exc
    outputs = list(out) if isinstance(out, (tuple, list)) else [out]
    tape = Tape(leaves, outputs, [t._version for t in leaves])
    return outputs, tape


def backward(tape: Tape, adjoint=None) -> list[torch.Tensor]:
    """Gradients of ``sum(adjoint * output)`` w.r.t. every recorded input."""
    tape.check_intact()
    if adjoint is None:
        adjoints = [torch.ones_like(o) for o in tape.outputs]
    else:
        adj = adjoint if isinstance(adjoint, (tuple, list)) else [adjoint]
        adjoints = [as_tensor(a) for a in adj]
        for a, o in zip(adjoints, tape.outputs):
            if a.shape != o.shape:
                raise ShapeError(f"adjoint shape {tuple(a.shape)} does not match output {tuple(o.shape)}")
    pairs = [(o, a) for o, a in zip(tape.outputs, adjoints) if o.requires_grad]
    if not pairs:
        return [torch.zeros_like(x) for x in tape.inputs]
    grads = torch.autograd.grad(
        [p[0] for p in pairs], tape.inputs, [p[1] for p in pairs],
        retain_graph=True, allow_unused=True,
    )
    return [torch.zeros_like(x) if g is None else g.detach() for x, g in zip(tape.inputs, grads)]


def value_and_grad(fn, *inputs) -> tuple[float, list[torch.Tensor]]:
    (out,), tape = forward(fn, inputs)
    if out.numel() != 1:
        raise ShapeError("value_and_grad needs a scalar program")
    return out.item(), backward(tape)


# -- primitives with the kink conventions the energies rely on ---------------

def hinge(x: torch.Tensor) -> torch.Tensor:
    """max(x, 0) with subgradient 0 exactly at x == 0."""
    return torch.relu(x)


def safe_norm(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Euclidean norm whose gradient at the zero vector is 0 instead of NaN."""
    sq = (v * v).sum(dim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def pairwise_sqdist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(..., M, D) x (N, D) -> (..., M, N) squared distances, clamped at 0.

    Uses |a|^2 + |b|^2 - 2 a.b (one matmul); absolute error ~1e-16 * |a|^2.
    """
    sq = (a * a).sum(-1, keepdim=True) + (b * b).sum(-1) - 2.0 * (a @ b.T)
    return torch.clamp(sq, min=0.0)


# -- finite-difference oracle -------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tolerance: float
    step: float
    compared: int
    non_comparable: list[tuple[int, int]]
    worst: tuple[int, int] | None = None

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_error:.3e} tol={self.tolerance:.1e} "
                f"compared={self.compared} kinks={len(self.non_comparable)}")


def finite_diff_check(program, inputs: Sequence, step: float = 1e-5,
                      tolerance: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences, coordinate by coordinate.

    A coordinate whose one-sided slopes disagree at both ``step`` and ``step/10``
    (the gap does not shrink with the step) sits on a kink; it is reported as
    non-comparable rather than failed.  Relative error uses the denominator
    ``max(|g_ad|, |g_fd|, 1e-6 * (1 + |f(x)|))``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    program = _as_program(program)
    (out,), tape = forward(program, inputs)
    if out.numel() != 1:
        raise ShapeError(f"{program.name}: finite_diff_check needs a scalar output, got shape {tuple(out.shape)}")
    grads = backward(tape)
    base = [t.detach().clone() for t in tape.inputs]
    f0 = out.item()

    def f_at(which: int, flat_idx: int, delta: float) -> float:
        args = [b.clone() for b in base]
        args[which].view(-1)[flat_idx] += delta
        with torch.no_grad():
            return float(program(*args))

    floor = 1e-6 * (1.0 + abs(f0))
    worst_err, worst, compared, kinks = 0.0, None, 0, []
    for which, b in enumerate(base):
        g_ad = grads[which].reshape(-1)
        for j in range(b.numel()):
            fp, fm = f_at(which, j, step), f_at(which, j, -step)
            g_fd = (fp - fm) / (2 * step)
            gap = abs((fp - f0) - (f0 - fm)) / step
            if gap > max(tolerance * max(abs(g_fd), 1.0), 1e3 * step * (1.0 + abs(g_fd))):
                h = step / 10
                gap_small = abs((f_at(which, j, h) - f0) - (f0 - f_at(which, j, -h))) / h
                if gap_small > 0.5 * gap:
                    kinks.append((which, j))
                    continue
            a = float(g_ad[j])
            err = abs(a - g_fd) / max(abs(a), abs(g_fd), floor)
            compared += 1
            if err > worst_err:
                worst_err, worst = err, (which, j)
    return GradCheckReport(worst_err < tolerance, worst_err, tolerance, step, compared, kinks, worst)
