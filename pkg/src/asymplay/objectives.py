"""Loss terms for self-play and the baselines, plus exact failure detectors.

All differentiable terms take batched tensors: states ``(B, T, N, 4)`` and
box dims ``(B, N, 3)``; they return one value per scenario, shape ``(B,)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from asymplay.dynamics import box_center, box_corners

CIRCLE_FRACTIONS = (-0.4, -0.2, 0.0, 0.2, 0.4)
_EPS = 1e-20


@dataclass(frozen=True)
class ObjectiveConfig:
    beta: float = 0.5
    w_challenge: float = 1.0
    w_solvable: float = 1.0
    lambda_dist: float = 0.05
    huber_delta: float = 1.0
    buffer: float = 0.2
    # realism weight inside the student loss; None shares beta. The realism
    # ablation zeroes beta for the teacher only and pins this to the old value.
    student_beta: float | None = None

    def __post_init__(self):
        if self.student_beta is not None and self.student_beta < 0:
            raise ValueError("student_beta must be non-negative")
        if self.beta < 0 or self.buffer < 0 or self.w_challenge < 0 or self.w_solvable < 0 or self.lambda_dist < 0:
            raise ValueError("objective weights and buffer must be non-negative")
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# collision


def circle_centers(states: torch.Tensor, dims: torch.Tensor) -> torch.Tensor:
    """Five circle centres per actor along the box's long axis, shape ``(..., N, 5, 2)``."""
    cx, cy = box_center(states[..., 0], states[..., 1], states[..., 2], dims[..., 2])
    c, s = torch.cos(states[..., 2]), torch.sin(states[..., 2])
    frac = torch.tensor(CIRCLE_FRACTIONS)
    off = frac * dims[..., 0].unsqueeze(-1)  # (..., N, 5)
    return torch.stack([cx.unsqueeze(-1) + off * c.unsqueeze(-1), cy.unsqueeze(-1) + off * s.unsqueeze(-1)], dim=-1)


def circle_cover_contains_box(length: float, width: float, buffer: float) -> bool:
    """True when the five circles, each grown by ``buffer / 2``, cover the whole box.

    The farthest box points from the circle centres are the corners and the
    long-edge midpoints between centres, all at ``hypot(0.1 * length, width / 2)``.
    """
    return math.hypot(0.1 * length, 0.5 * width) <= 0.5 * width + 0.5 * buffer


def pairwise_collision(states: torch.Tensor, dims: torch.Tensor, buffer: float = 0.2) -> torch.Tensor:
    """Per-pair penetration ``relu(r_i + r_j + b - d)`` of the closest circle pair, ``(B, T, N, N)``.

    Diagonal entries are zero.
    """
    centers = circle_centers(states, dims.unsqueeze(1))  # (B, T, N, 5, 2)
    a = centers[:, :, :, None, :, None, :]
    b = centers[:, :, None, :, None, :, :]
    d2 = ((a - b) ** 2).sum(-1)  # (B, T, N, N, 5, 5)
    dmin = torch.sqrt(d2.flatten(-2).min(dim=-1).values + _EPS)
    r = 0.5 * dims[..., 1]  # (B, N)
    reach = (r[:, :, None] + r[:, None, :]).unsqueeze(1) + buffer
    pen = torch.relu(reach - dmin)
    n = states.shape[2]
    off_diag = ~torch.eye(n, dtype=torch.bool)
    return pen * off_diag


def pair_mask(actor_mask: torch.Tensor, involve: torch.Tensor | None = None) -> torch.Tensor:
    """``(B, N, N)`` ordered pairs of distinct real actors; with ``involve``, at least one end in that set."""
    m = actor_mask[:, :, None] & actor_mask[:, None, :]
    m = m & ~torch.eye(actor_mask.shape[1], dtype=torch.bool)
    if involve is not None:
        m = m & (involve[:, :, None] | involve[:, None, :])
    return m


def collision_loss(
    states: torch.Tensor,
    dims: torch.Tensor,
    actor_mask: torch.Tensor,
    pairs: torch.Tensor | None = None,
    buffer: float = 0.2,
) -> torch.Tensor:
    """``(1 / (N T)) * sum_t sum_{i != j} l(s_i, s_j)`` over the selected ordered pairs."""
    if pairs is None:
        pairs = pair_mask(actor_mask)
    pen = pairwise_collision(states, dims, buffer) * pairs.unsqueeze(1)
    n = actor_mask.sum(-1).clamp(min=1)
    return pen.sum(dim=(1, 2, 3)) / (n * states.shape[1])


def per_actor_collision(states: torch.Tensor, dims: torch.Tensor, actor_mask: torch.Tensor, buffer: float = 0.2) -> torch.Tensor:
    """Relaxed failure per actor ``(B, N)``; summing over all actors gives ``collision_loss``."""
    pen = pairwise_collision(states, dims, buffer) * pair_mask(actor_mask).unsqueeze(1)
    n = actor_mask.sum(-1, keepdim=True).clamp(min=1)
    return pen.sum(dim=(1, 3)) / (n * states.shape[1])


def _boxes_overlap(ci: np.ndarray, cj: np.ndarray) -> np.ndarray:
    """Strict separating-axis overlap test between corner arrays ``(..., 4, 2)``."""
    overlap = np.ones(ci.shape[:-2], dtype=bool)
    for corners in (ci, cj):
        e1 = corners[..., 1, :] - corners[..., 0, :]
        e2 = corners[..., 3, :] - corners[..., 0, :]
        for axis in (e1, e2):
            pi = np.einsum("...kd,...d->...k", ci, axis)
            pj = np.einsum("...kd,...d->...k", cj, axis)
            sep = (pi.max(-1) <= pj.min(-1)) | (pj.max(-1) <= pi.min(-1))
            overlap &= ~sep
    return overlap


def exact_collision_matrix(states: np.ndarray, dims: np.ndarray) -> np.ndarray:
    """Box overlap for every ordered pair at every step, ``(T, N, N)``; touching boxes do not overlap."""
    states = np.asarray(states, dtype=np.float64)
    corners = box_corners(states[..., 0], states[..., 1], states[..., 2], dims[:, 0], dims[:, 1], dims[:, 2])
    t, n = corners.shape[:2]
    ci = np.broadcast_to(corners[:, :, None], (t, n, n, 4, 2))
    cj = np.broadcast_to(corners[:, None, :], (t, n, n, 4, 2))
    ov = _boxes_overlap(ci, cj)
    n = states.shape[1]
    ov[:, np.arange(n), np.arange(n)] = False
    return ov


def exact_collision(states: np.ndarray, dims: np.ndarray) -> np.ndarray:
    """Per-actor collision flags ``(N,)`` over the whole horizon for states ``(T, N, 4)``."""
    return exact_collision_matrix(states, dims).any(axis=(0, 2))


def offroad_flags(graph, states: np.ndarray, dims: np.ndarray) -> np.ndarray:
    """Per-actor flags: any box corner outside the drivable area at any step."""
    corners = box_corners(states[..., 0], states[..., 1], states[..., 2], dims[:, 0], dims[:, 1], dims[:, 2])
    inside = graph.contains_points(corners)  # (T, N, 4)
    return ~inside.all(axis=(0, 2))


# ---------------------------------------------------------------------------
# realism and targets


def huber_of_distance(sq: torch.Tensor, delta: float) -> torch.Tensor:
    """Huber loss of a Euclidean distance given its square; smooth at zero."""
    quad = sq <= delta * delta
    safe = torch.where(quad, torch.ones_like(sq), sq)
    return torch.where(quad, 0.5 * sq, delta * (torch.sqrt(safe) - 0.5 * delta))


def realism_term(states: torch.Tensor, log_future: torch.Tensor, mask: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Mean Huber distance between simulated and logged positions over masked actors and all steps."""
    sq = ((states[..., :2] - log_future[..., :2]) ** 2).sum(-1)  # (B, T, N)
    h = huber_of_distance(sq, delta) * mask.unsqueeze(1)
    count = mask.sum(-1) * states.shape[1]
    return h.sum(dim=(1, 2)) / count.clamp(min=1)


def distance_loss(states: torch.Tensor, teacher_mask: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean distance from each teacher-set actor to its target over all steps."""
    safe = targets.clamp(min=0)
    idx = safe[:, None, :, None].expand(-1, states.shape[1], -1, 2)
    tgt = torch.gather(states[..., :2], 2, idx)
    d = torch.sqrt(((states[..., :2] - tgt) ** 2).sum(-1) + _EPS)
    d = d * teacher_mask.unsqueeze(1)
    count = teacher_mask.sum(-1) * states.shape[1]
    return d.sum(dim=(1, 2)) / count.clamp(min=1)


# ---------------------------------------------------------------------------
# self-play returns (as losses to minimise)


@dataclass
class TeacherTerms:
    loss: torch.Tensor
    challenge: torch.Tensor
    solvable: torch.Tensor
    realism_demo: torch.Tensor
    realism_mixed: torch.Tensor
    distance: torch.Tensor


def teacher_return(pair, batch, cfg: ObjectiveConfig) -> TeacherTerms:
    """Relaxed teacher loss on a (teacher-only, mixed) rollout pair.

    ``-w_c * coll(mixed, student pairs) + w_s * coll(demo, all pairs)
    + beta * (realism(demo) + realism(mixed)) + lambda * dist(mixed)``
    """
    demo, mixed = pair.demo, pair.mixed
    if not torch.equal(demo.states[:, 0], mixed.states[:, 0]):
        raise ValueError("rollout pair does not share its initial state")
    am = batch.actor_mask
    challenge = collision_loss(mixed.states, batch.dims, am, pair_mask(am, batch.student_mask), cfg.buffer)
    solvable = collision_loss(demo.states, batch.dims, am, pair_mask(am), cfg.buffer)
    r_demo = realism_term(demo.states, batch.log_future, am, cfg.huber_delta)
    r_mixed = realism_term(mixed.states, batch.log_future, am, cfg.huber_delta)
    dist = distance_loss(mixed.states, batch.teacher_mask & am, batch.targets)
    loss = -cfg.w_challenge * challenge + cfg.w_solvable * solvable + cfg.beta * (r_demo + r_mixed) + cfg.lambda_dist * dist
    return TeacherTerms(loss, challenge, solvable, r_demo, r_mixed, dist)


def student_return(mixed, batch, cfg: ObjectiveConfig) -> torch.Tensor:
    """Relaxed student loss: collisions involving student actors plus realism of student actors."""
    am, sm = batch.actor_mask, batch.student_mask
    col = collision_loss(mixed.states, batch.dims, am, pair_mask(am, sm), cfg.buffer)
    beta = cfg.beta if cfg.student_beta is None else cfg.student_beta
    return col + beta * realism_term(mixed.states, batch.log_future, sm, cfg.huber_delta)


# ---------------------------------------------------------------------------
# theory harness


@dataclass(frozen=True)
class TheoryTuple:
    c_t_n: float  # failures of the teacher-only rollout over all actors
    c_ts_s: float  # failures of student actors in the mixed rollout
    i_t: float
    i_ts: float
    beta: float

    def __post_init__(self):
        vals = (self.c_t_n, self.c_ts_s, self.i_t, self.i_ts, self.beta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("theory tuple must be finite")
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    @property
    def alpha(self) -> float:
        return self.i_ts + 1.0 / (2.0 * self.beta)


@dataclass(frozen=True)
class LemmaVerdict:
    teacher_return: float
    bound: float
    copy_return: float
    student_return: float
    antecedent: bool
    consequent: bool

    @property
    def holds(self) -> bool:
        return (not self.antecedent) or self.consequent


def lemma1_check(tup: TheoryTuple) -> LemmaVerdict:
    """If the teacher return exceeds ``2 beta I_TS``, the student gains by copying the teacher.

    Evaluated exactly: every float is a dyadic rational, so all inputs are
    scaled to integers over a common power-of-two denominator ``D`` and each
    quantity below is an integer multiple of ``1 / D**2``. Rounding cannot
    break the algebraic identity.
    """
    ratios = [v.as_integer_ratio() for v in (tup.c_t_n, tup.c_ts_s, tup.i_t, tup.i_ts, tup.beta)]
    d = max(den for _, den in ratios)
    c_t, c_s, i_t, i_s, b = (num * (d // den) for num, den in ratios)
    r_t = (c_s - c_t) * d + b * (i_t + i_s)
    bound = 2 * b * i_s
    copy = -c_t * d + b * i_t  # lower bound on the copying student's return, C(S) <= C(N)
    r_s = -c_s * d + b * i_s
    dd = d * d
    return LemmaVerdict(r_t / dd, bound / dd, copy / dd, r_s / dd, r_t > bound, copy > r_s)
