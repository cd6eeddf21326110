"""Reverse-mode differentiation, AdamW and the learning-rate schedule.

Tensors are float64 ``torch.Tensor`` objects; the autograd tape of torch is
the recording. Everything here runs single-threaded for bit-exact replays.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch.overrides import TorchFunctionMode

DTYPE = torch.float64
torch.set_default_dtype(DTYPE)

DiffValue = torch.Tensor


class NonFiniteLossError(FloatingPointError):
    pass


def set_single_thread() -> None:
    torch.set_num_threads(1)


class ParamStore:
    """Named parameter tensors (a view over a module's parameters, or standalone)."""

    def __init__(self, params: Mapping[str, torch.Tensor], seed: int | None = None):
        self._params: OrderedDict[str, torch.Tensor] = OrderedDict(params)
        self.seed = seed

    @classmethod
    def from_module(cls, module: torch.nn.Module, prefix: str = "", seed: int | None = None) -> "ParamStore":
        return cls(OrderedDict((prefix + k, p) for k, p in module.named_parameters()), seed=seed)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[torch.Tensor]:
        return list(self._params.values())

    @property
    def num_params(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._params.items()}

    def flat(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self._params.values()])

    def load_flat(self, flat: torch.Tensor) -> None:
        i = 0
        with torch.no_grad():
            for p in self._params.values():
                n = p.numel()
                p.copy_(flat[i : i + n].reshape(p.shape))
                i += n


@dataclass
class OptState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0
    lr_peak: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def zeros_like(cls, params: ParamStore, **hyper) -> "OptState":
        m = {k: torch.zeros_like(p, dtype=DTYPE) for k, p in params.items()}
        v = {k: torch.zeros_like(p, dtype=DTYPE) for k, p in params.items()}
        return cls(m=m, v=v, **hyper)


class _FirstNonFinite(TorchFunctionMode):
    def __init__(self):
        super().__init__()
        self.culprit: str | None = None

    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        if self.culprit is None and isinstance(out, torch.Tensor) and out.is_floating_point():
            if not bool(torch.isfinite(out.detach()).all()):
                self.culprit = getattr(func, "__name__", repr(func))
        return out


def locate_non_finite(loss_builder: Callable[[], torch.Tensor]) -> str:
    mode = _FirstNonFinite()
    with torch.no_grad(), mode:
        loss_builder()
    return mode.culprit or "unknown"


def record_and_grad(
    loss_builder: Callable[[], torch.Tensor],
    params: ParamStore,
) -> tuple[float, dict[str, torch.Tensor]]:
    """Evaluate ``loss_builder()`` and return ``(loss, grads)`` for every parameter in ``params``.

    Parameters the loss does not depend on get exact zeros. A non-finite loss
    raises ``NonFiniteLossError`` naming the first operation that produced a
    non-finite value.
    """
    loss = loss_builder()
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss; first non-finite intermediate from '{locate_non_finite(loss_builder)}'")
    names = params.names()
    tensors = params.tensors()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    out = {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, tensors, grads)}
    return float(loss.detach()), out


def grads_for(loss: torch.Tensor, params: ParamStore, retain_graph: bool = False) -> dict[str, torch.Tensor]:
    tensors = params.tensors()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True, retain_graph=retain_graph)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(params.names(), tensors, grads)}


def clip_grad_norm(grads: dict[str, torch.Tensor], max_norm: float = 10.0) -> float:
    """In-place global-norm clip. Returns the pre-clip norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g.mul_(scale)
    return total


def optimizer_step(params: ParamStore, grads: Mapping[str, torch.Tensor], opt: OptState, lr: float) -> None:
    """AdamW with decoupled weight decay; updates ``params`` and ``opt`` in place."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    b1, b2 = opt.betas
    opt.step += 1
    bc1 = 1.0 - b1**opt.step
    bc2 = 1.0 - b2**opt.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape or opt.m[name].shape != p.shape:
                raise ValueError(f"shape mismatch for parameter '{name}'")
            m, v = opt.m[name], opt.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if opt.weight_decay:
                p.mul_(1.0 - lr * opt.weight_decay)
            denom = (v / bc2).sqrt_().add_(opt.eps)
            p.addcdiv_(m / bc1, denom, value=-lr)


def lr_at(step: int, total_steps: int, warmup_steps: int, lr_peak: float) -> float:
    """Linear warmup from 0 to ``lr_peak`` then cosine decay to 0 at ``total_steps``."""
    if not 0 <= warmup_steps < total_steps:
        raise ValueError("need 0 <= warmup_steps < total_steps")
    step = min(max(step, 0), total_steps)
    if step < warmup_steps:
        return lr_peak * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * lr_peak * (1.0 + math.cos(math.pi * progress))


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    a = analytic.detach().reshape(-1)
    n = numeric.detach().reshape(-1)
    scale = max(float(a.norm()), float(n.norm()), floor)
    return float((a - n).norm()) / scale


def finite_difference_grad(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central differences of a scalar function, one coordinate at a time."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            fp = float(fn(x))
            flat[i] = orig - h
            fm = float(fn(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return g


def directional_check(
    loss_of: Callable[[], torch.Tensor],
    params: ParamStore,
    rng: np.random.Generator,
    n_dirs: int = 3,
    h: float = 1e-5,
) -> float:
    """Compare ``grad . d`` with a central difference along random directions ``d``.

    Cheap stand-in for a full Jacobian check on large parameter sets. Returns
    the worst relative error over the sampled directions.
    """
    _, grads = record_and_grad(loss_of, params)
    flat0 = params.flat()
    gflat = torch.cat([grads[n].reshape(-1) for n in params.names()])
    worst = 0.0
    for _ in range(n_dirs):
        d = torch.as_tensor(rng.standard_normal(flat0.numel()))
        d = d / d.norm()
        with torch.no_grad():
            params.load_flat(flat0 + h * d)
            fp = float(loss_of())
            params.load_flat(flat0 - h * d)
            fm = float(loss_of())
            params.load_flat(flat0)
        numeric = (fp - fm) / (2.0 * h)
        analytic = float(gflat @ d)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    return worst


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named sub-stream (corpus, partition, init, coin, ...)."""
    key = int.from_bytes(name.encode("utf-8"), "little") % (2**63)
    return np.random.default_rng([seed, key])


def torch_generator(rng: np.random.Generator) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(rng.integers(0, 2**62)))
    return g


def sum_in_order(per_item: Iterable[dict[str, torch.Tensor]]) -> dict[str, torch.Tensor]:
    """Sum gradient dicts in the order given (ascending scenario index for determinism)."""
    total: dict[str, torch.Tensor] = {}
    for g in per_item:
        for k, v in g.items():
            total[k] = v.clone() if k not in total else total[k] + v
    return total
