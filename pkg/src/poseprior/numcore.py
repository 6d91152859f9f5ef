"""Numerical substrate: float64 tensors, counter-based randomness, gradient checks.

Tensors are plain ``torch.Tensor`` values in float64. Gradients come from torch
autograd; :func:`finite_difference_gradient` is the independent oracle used to
check them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch.overrides import TorchFunctionMode

DTYPE = torch.float64


class NumericError(ArithmeticError):
    """A NaN or infinity appeared in a computation."""


class ContractError(ValueError):
    """A function was called outside its contract."""


@dataclass
class RngStream:
    """Counter-based random stream.

    Every draw opens a fresh Philox lane keyed by ``seed`` at lane ``counter`` and
    then bumps the counter, so two streams with equal ``(seed, counter)`` produce
    identical sequences.
    """

    seed: int
    counter: int = 0

    def generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=self.seed & (2**64 - 1), counter=[0, 0, 0, self.counter])
        self.counter += 1
        return np.random.Generator(bitgen)

    def spawn(self, index: int) -> "RngStream":
        """Derive an independent child stream without touching this one."""
        mixed = np.random.SeedSequence([self.seed & (2**64 - 1), self.counter, index]).generate_state(
            2, dtype=np.uint32
        )
        return RngStream(seed=int(mixed[0]) << 32 | int(mixed[1]))

    def uniform(self, shape: Sequence[int] | int = ()) -> np.ndarray:
        return self.generator().random(shape)

    def integers(self, low: int, high: int, shape: Sequence[int] | int = ()) -> np.ndarray:
        return self.generator().integers(low, high, size=shape)


def gauss_sample(stream: RngStream, shape: Sequence[int] | int) -> torch.Tensor:
    """I.i.d. standard normal tensor of ``shape``."""
    return torch.from_numpy(stream.generator().standard_normal(shape)).to(DTYPE)


class _NanWatch(TorchFunctionMode):
    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        outs = out if isinstance(out, (tuple, list)) else (out,)
        for o in outs:
            if isinstance(o, torch.Tensor) and o.is_floating_point() and torch.isnan(o).any():
                raise NumericError(f"NaN produced by primitive {getattr(func, '__name__', func)}")
        return out


def evaluate_with_gradients(
    f: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor]
) -> tuple[float, list[torch.Tensor]]:
    """Evaluate scalar ``f(*inputs)`` and its gradient with respect to every input.

    Raises:
        ContractError: if ``f`` does not return a single scalar.
        NumericError: if any primitive produces NaN, naming that primitive.
    """
    leaves = [x.detach().clone().to(DTYPE).requires_grad_(True) for x in inputs]
    with _NanWatch():
        value = f(*leaves)
    if not isinstance(value, torch.Tensor) or value.numel() != 1:
        raise ContractError("f must return a scalar tensor")
    try:
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message="Anomaly Detection has been enabled")
            with torch.autograd.detect_anomaly(check_nan=True):
                grads = torch.autograd.grad(value.reshape(()), leaves, allow_unused=True)
    except RuntimeError as exc:
        raise NumericError(str(exc).splitlines()[0]) from exc
    grads = [torch.zeros_like(x) if g is None else g.detach() for x, g in zip(leaves, grads)]
    return float(value.detach()), grads


def finite_difference_gradient(
    f: Callable[[torch.Tensor], torch.Tensor | float], x: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    x = x.detach().to(DTYPE)
    flat = x.reshape(-1)
    grad = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            step = torch.zeros_like(flat)
            step[i] = eps
            hi = float(f((flat + step).reshape(x.shape)))
            lo = float(f((flat - step).reshape(x.shape)))
            grad[i] = (hi - lo) / (2 * eps)
    return grad.reshape(x.shape)


def gradient_agrees(analytic: torch.Tensor, numeric: torch.Tensor, rtol: float = 1e-4, atol: float = 1e-6) -> bool:
    """Relative agreement, falling back to absolute where the gradient is small."""
    analytic = analytic.detach().reshape(-1)
    numeric = numeric.detach().reshape(-1)
    small = numeric.abs() < 1e-2
    rel = (analytic - numeric).abs() / numeric.abs().clamp_min(1e-300)
    ok = torch.where(small, (analytic - numeric).abs() <= max(atol, 1e-6), rel <= rtol)
    return bool(ok.all())


def check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x
