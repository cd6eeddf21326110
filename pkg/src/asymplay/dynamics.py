"""Kinematic bicycle model with explicit-Euler integration.

State position is the rear-axle centre. Box geometry is centred on the
midpoint between the axles: ``centre = rear_axle + (L / 2) * heading``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

DT_DEFAULT = 0.5
U_MAX = 6.0
PHI_MAX = 0.5


@dataclass(frozen=True)
class ActorState:
    x: float
    y: float
    theta: float
    v: float
    length: float = 4.5
    width: float = 2.0
    wheelbase: float = 2.8
    actor_class: str = "vehicle"

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError("box dimensions must be positive")
        if not 0 < self.wheelbase <= self.length:
            raise ValueError("wheelbase must be in (0, length]")


@dataclass(frozen=True)
class Action:
    u: float
    phi: float


def dt_default(override: float | None = None) -> float:
    if override is None:
        return DT_DEFAULT
    if not override > 0 or not math.isfinite(override):
        raise ValueError(f"dt must be positive and finite, got {override}")
    return float(override)


def wrap_tensor(theta: torch.Tensor) -> torch.Tensor:
    # floor has zero gradient, so the wrap passes gradients through unchanged
    return theta + (2.0 * math.pi) * torch.floor((math.pi - theta) / (2.0 * math.pi))


def step_tensor(
    s: torch.Tensor,
    a: torch.Tensor,
    wheelbase: torch.Tensor,
    dt: float = DT_DEFAULT,
    u_max: float = U_MAX,
    phi_max: float = PHI_MAX,
) -> torch.Tensor:
    """Batched step: ``s`` is ``(..., 4)`` as (x, y, theta, v), ``a`` is ``(..., 2)`` as (u, phi)."""
    x, y, th, v = s.unbind(-1)
    u = torch.clamp(a[..., 0], -u_max, u_max)
    phi = torch.clamp(a[..., 1], -phi_max, phi_max)
    nx = x + v * torch.cos(th) * dt
    ny = y + v * torch.sin(th) * dt
    nth = wrap_tensor(th + v / wheelbase * torch.tan(phi) * dt)
    nv = v + u * dt
    return torch.stack([nx, ny, nth, nv], dim=-1)


def step(
    state: ActorState,
    action: Action,
    dt: float = DT_DEFAULT,
    u_max: float = U_MAX,
    phi_max: float = PHI_MAX,
) -> ActorState:
    vals = (state.x, state.y, state.theta, state.v, action.u, action.phi, dt)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("non-finite state, action or dt")
    if not dt > 0:
        raise ValueError("dt must be positive")
    s = torch.tensor([state.x, state.y, state.theta, state.v], dtype=torch.float64)
    a = torch.tensor([action.u, action.phi], dtype=torch.float64)
    nx, ny, nth, nv = step_tensor(s, a, torch.tensor(state.wheelbase, dtype=torch.float64), dt, u_max, phi_max).tolist()
    return replace(state, x=nx, y=ny, theta=nth, v=nv)


def box_center(x, y, theta, wheelbase):
    """Works on floats, numpy arrays and torch tensors alike."""
    lib = torch if isinstance(theta, torch.Tensor) else np
    half = 0.5 * wheelbase
    return x + half * lib.cos(theta), y + half * lib.sin(theta)


def box_corners(x, y, theta, length, width, wheelbase) -> np.ndarray:
    """Oriented-box corners, shape ``(..., 4, 2)``, counter-clockwise from rear-right."""
    x, y, theta, length, width, wheelbase = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (x, y, theta, length, width, wheelbase))
    )
    cx, cy = box_center(x, y, theta, wheelbase)
    c, s = np.cos(theta), np.sin(theta)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
    lx = local[:, 0] * hl[..., None]
    ly = local[:, 1] * hw[..., None]
    px = cx[..., None] + c[..., None] * lx - s[..., None] * ly
    py = cy[..., None] + s[..., None] * lx + c[..., None] * ly
    return np.stack([px, py], axis=-1)
