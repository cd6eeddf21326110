"""Lane-graph maps, synthetic highway generation and relative-pose features.

Lane nodes are centerline points joined by successor edges. Lane ``0`` is the
rightmost main lane; higher lane indices sit further to the left. An optional
on-ramp runs to the right of lane 0 and tapers into it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import shapely
import torch
from shapely.geometry import Polygon

from asymplay.dynamics import ActorState, box_corners

LANE_WIDTH = 3.7
_DIST_EPS = 1e-20


def wrap_angle(theta):
    """Wrap angles to (-pi, pi]. Works on floats and numpy arrays."""
    return theta + 2.0 * np.pi * np.floor((np.pi - theta) / (2.0 * np.pi))


@dataclass(frozen=True)
class LaneNode:
    id: int
    position: tuple[float, float]
    heading: float
    width: float
    successors: tuple[int, ...] = ()
    left_neighbor: int | None = None
    right_neighbor: int | None = None

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"lane node {self.id}: width must be positive, got {self.width}")


@dataclass(frozen=True)
class MergeSpec:
    """On-ramp joining lane 0 from the right.

    The ramp runs parallel for ``ramp_length`` metres ending at station
    ``start`` and then tapers laterally into lane 0 over ``taper`` metres.
    """

    start: float
    taper: float = 60.0
    ramp_length: float = 60.0


@dataclass(frozen=True)
class LaneGraph:
    nodes: tuple[LaneNode, ...]
    drivable_polygons: tuple[np.ndarray, ...]
    has_merge: bool = False

    def __post_init__(self):
        k = len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise ValueError("node ids must equal their index")
            refs = list(node.successors) + [n for n in (node.left_neighbor, node.right_neighbor) if n is not None]
            for r in refs:
                if not 0 <= r < k:
                    raise ValueError(f"node {i} references missing node {r}")
        for poly in self.drivable_polygons:
            ring = Polygon(poly)
            if not ring.is_valid:
                raise ValueError("drivable polygon is not simple")
            if not ring.exterior.is_ccw:
                raise ValueError("drivable polygon must be counter-clockwise")

    def __len__(self) -> int:
        return len(self.nodes)

    @cached_property
    def positions(self) -> np.ndarray:
        return np.array([n.position for n in self.nodes], dtype=np.float64).reshape(-1, 2)

    @cached_property
    def headings(self) -> np.ndarray:
        return np.array([n.heading for n in self.nodes], dtype=np.float64)

    @cached_property
    def widths(self) -> np.ndarray:
        return np.array([n.width for n in self.nodes], dtype=np.float64)

    @cached_property
    def poses(self) -> np.ndarray:
        return np.concatenate([self.positions, self.headings[:, None]], axis=1)

    @cached_property
    def predecessors(self) -> list[list[int]]:
        preds: list[list[int]] = [[] for _ in self.nodes]
        for n in self.nodes:
            for s in n.successors:
                preds[s].append(n.id)
        return preds

    def neighborhood(self, max_size: int = 5) -> tuple[np.ndarray, np.ndarray]:
        """Per-node neighbour table ``[self, pred, succ, left, right]`` and its validity mask."""
        idx = np.zeros((len(self.nodes), max_size), dtype=np.int64)
        mask = np.zeros((len(self.nodes), max_size), dtype=bool)
        for n in self.nodes:
            cand = [n.id]
            cand += self.predecessors[n.id][:1]
            cand += list(n.successors[:1])
            cand += [m for m in (n.left_neighbor, n.right_neighbor) if m is not None]
            cand = cand[:max_size]
            idx[n.id, : len(cand)] = cand
            mask[n.id, : len(cand)] = True
        return idx, mask

    @cached_property
    def drivable_area(self):
        polys = [Polygon(p) for p in self.drivable_polygons]
        area = shapely.union_all(polys)
        shapely.prepare(area)
        return area

    @cached_property
    def road_boundary(self):
        boundary = self.drivable_area.boundary
        shapely.prepare(boundary)
        return boundary

    def contains_points(self, xy: np.ndarray) -> np.ndarray:
        """Boundary points count as on-road."""
        xy = np.asarray(xy, dtype=np.float64)
        flat = xy.reshape(-1, 2)
        inside = shapely.intersects_xy(self.drivable_area, flat[:, 0], flat[:, 1])
        return inside.reshape(xy.shape[:-1])

    def boundary_distance(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        flat = xy.reshape(-1, 2)
        pts = shapely.points(flat)
        return shapely.distance(self.road_boundary, pts).reshape(xy.shape[:-1])

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {
                    "id": n.id,
                    "x": n.position[0],
                    "y": n.position[1],
                    "heading": n.heading,
                    "width": n.width,
                    "successors": list(n.successors),
                    "left_neighbor": n.left_neighbor,
                    "right_neighbor": n.right_neighbor,
                }
                for n in self.nodes
            ],
            "drivable_polygons": [p.tolist() for p in self.drivable_polygons],
            "has_merge": self.has_merge,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LaneGraph":
        nodes = tuple(
            LaneNode(
                id=n["id"],
                position=(n["x"], n["y"]),
                heading=n["heading"],
                width=n["width"],
                successors=tuple(n["successors"]),
                left_neighbor=n["left_neighbor"],
                right_neighbor=n["right_neighbor"],
            )
            for n in d["nodes"]
        )
        polys = tuple(np.asarray(p, dtype=np.float64) for p in d["drivable_polygons"])
        return cls(nodes=nodes, drivable_polygons=polys, has_merge=d.get("has_merge", False))


def _reference_pose(s: np.ndarray, curvature: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = np.asarray(s, dtype=np.float64)
    if curvature == 0.0:
        return s.copy(), np.zeros_like(s), np.zeros_like(s)
    theta = curvature * s
    return np.sin(theta) / curvature, (1.0 - np.cos(theta)) / curvature, theta


def _offset_points(s: np.ndarray, offset: np.ndarray, curvature: float) -> np.ndarray:
    x, y, theta = _reference_pose(s, curvature)
    return np.stack([x - offset * np.sin(theta), y + offset * np.cos(theta)], axis=-1)


def _strip_polygon(s: np.ndarray, right: np.ndarray, left: np.ndarray, curvature: float) -> np.ndarray:
    right_pts = _offset_points(s, right, curvature)
    left_pts = _offset_points(s, left, curvature)[::-1]
    return np.concatenate([right_pts, left_pts], axis=0)


def build_highway_map(
    lanes: int,
    length: float,
    curvature: float = 0.0,
    node_spacing: float = 10.0,
    merge: MergeSpec | None = None,
    seed: int = 0,
    lane_width: float = LANE_WIDTH,
    width_jitter: float = 0.0,
) -> LaneGraph:
    """Straight or constant-curvature multilane highway, optionally with an on-ramp.

    ``seed`` only matters when ``width_jitter > 0``; the layout itself is
    deterministic.
    """
    if lanes < 1:
        raise ValueError("lanes must be >= 1")
    if not length > 0 or not node_spacing > 0 or not lane_width > 0:
        raise ValueError("length, node_spacing and lane_width must be positive")
    if abs(curvature) * length > np.pi:
        raise ValueError("curvature too large for the road length (road would turn past 180 degrees)")
    rng = np.random.default_rng(seed)

    n_st = int(math.floor(length / node_spacing + 1e-9)) + 1
    stations = np.arange(n_st, dtype=np.float64) * node_spacing
    widths = lane_width + width_jitter * rng.uniform(-1.0, 1.0, size=lanes)
    offsets = np.concatenate([[0.0], np.cumsum(0.5 * (widths[:-1] + widths[1:]))])

    nodes: list[LaneNode] = []
    for lane in range(lanes):
        pts = _offset_points(stations, np.full(n_st, offsets[lane]), curvature)
        _, _, theta = _reference_pose(stations, curvature)
        for j in range(n_st):
            nid = lane * n_st + j
            nodes.append(
                LaneNode(
                    id=nid,
                    position=(float(pts[j, 0]), float(pts[j, 1])),
                    heading=float(wrap_angle(theta[j])),
                    width=float(widths[lane]),
                    successors=(nid + 1,) if j + 1 < n_st else (),
                    left_neighbor=nid + n_st if lane + 1 < lanes else None,
                    right_neighbor=nid - n_st if lane > 0 else None,
                )
            )

    fine = np.linspace(0.0, stations[-1], max(int(stations[-1]) + 1, 2))
    polys = [
        _strip_polygon(
            fine,
            np.full_like(fine, -0.5 * widths[0]),
            np.full_like(fine, offsets[-1] + 0.5 * widths[-1]),
            curvature,
        )
    ]

    if merge is not None:
        nodes, ramp_poly = _add_ramp(nodes, merge, stations, n_st, widths[0], curvature)
        polys.append(ramp_poly)

    return LaneGraph(nodes=tuple(nodes), drivable_polygons=tuple(polys), has_merge=merge is not None)


def _add_ramp(nodes, merge: MergeSpec, stations, n_st, width, curvature):
    spacing = stations[1] - stations[0] if len(stations) > 1 else 1.0
    j_join = int(round((merge.start + merge.taper) / spacing))
    j_first = int(round((merge.start - merge.ramp_length) / spacing))
    if j_first < 0 or j_join >= n_st or j_join <= j_first + 1:
        raise ValueError("merge does not fit on the road")

    def ramp_offset(s):
        frac = np.clip((s - merge.start) / merge.taper, 0.0, 1.0)
        return -width * (1.0 - frac)

    ramp_st = stations[j_first:j_join]
    offs = ramp_offset(ramp_st)
    pts = _offset_points(ramp_st, offs, curvature)
    _, _, theta = _reference_pose(ramp_st, curvature)
    slope = np.where((ramp_st >= merge.start) & (ramp_st < merge.start + merge.taper), width / merge.taper, 0.0)
    headings = wrap_angle(theta + np.arctan(slope))

    nodes = list(nodes)
    base = len(nodes)
    for k, j in enumerate(range(j_first, j_join)):
        nid = base + k
        succ = nid + 1 if j + 1 < j_join else j_join  # last ramp node feeds lane 0
        lane0 = j
        nodes.append(
            LaneNode(
                id=nid,
                position=(float(pts[k, 0]), float(pts[k, 1])),
                heading=float(headings[k]),
                width=float(width),
                successors=(succ,),
                left_neighbor=lane0,
                right_neighbor=None,
            )
        )
        old = nodes[lane0]
        nodes[lane0] = LaneNode(
            id=old.id,
            position=old.position,
            heading=old.heading,
            width=old.width,
            successors=old.successors,
            left_neighbor=old.left_neighbor,
            right_neighbor=nid,
        )

    # start half a spacing early so the first ramp node is strictly inside its strip
    s0 = ramp_st[0] - 0.5 * spacing
    fine = np.linspace(s0, stations[j_join], max(int(stations[j_join] - s0) + 1, 2))
    centre = ramp_offset(fine)
    poly = _strip_polygon(fine, centre - 0.5 * width, centre + 0.5 * width, curvature)
    return nodes, poly


def nearest_nodes(graph: LaneGraph, point: Sequence[float], k: int) -> list[int]:
    if len(graph) == 0:
        raise ValueError("empty lane graph")
    if k < 1:
        raise ValueError("k must be >= 1")
    d = np.hypot(graph.positions[:, 0] - point[0], graph.positions[:, 1] - point[1])
    order = np.lexsort((np.arange(len(d)), d))
    return [int(i) for i in order[: min(k, len(d))]]


def is_offroad(graph: LaneGraph, state: ActorState) -> bool:
    corners = box_corners(state.x, state.y, state.theta, state.length, state.width, state.wheelbase)
    return not bool(np.all(graph.contains_points(corners)))


@dataclass(frozen=True)
class PairPose:
    dx: float
    dy: float
    sin_dtheta: float
    cos_dtheta: float
    dist: float

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.dx, self.dy, self.sin_dtheta, self.cos_dtheta, self.dist)


def pairpose(frame_a: Sequence[float], frame_b: Sequence[float]) -> PairPose:
    """Pose of ``frame_b`` expressed in the local frame of ``frame_a``."""
    xa, ya, ta = (float(v) for v in frame_a)
    xb, yb, tb = (float(v) for v in frame_b)
    if not all(math.isfinite(v) for v in (ta, tb)):
        raise ValueError("headings must be finite")
    ex, ey = xb - xa, yb - ya
    c, s = math.cos(ta), math.sin(ta)
    dx = c * ex + s * ey
    dy = -s * ex + c * ey
    dt = tb - ta
    return PairPose(dx, dy, math.sin(dt), math.cos(dt), math.sqrt(dx * dx + dy * dy))


def pairpose_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched, differentiable PairPose. ``a`` and ``b`` broadcast over ``(..., 3)`` poses; returns ``(..., 5)``."""
    ex = b[..., 0] - a[..., 0]
    ey = b[..., 1] - a[..., 1]
    c, s = torch.cos(a[..., 2]), torch.sin(a[..., 2])
    dx = c * ex + s * ey
    dy = -s * ex + c * ey
    dt = b[..., 2] - a[..., 2]
    dist = torch.sqrt(dx * dx + dy * dy + _DIST_EPS)
    return torch.stack([dx, dy, torch.sin(dt), torch.cos(dt), dist], dim=-1)


def compose(a_to_b: PairPose, b_to_c: PairPose) -> PairPose:
    """Chain two relative poses: returns c expressed in a's frame."""
    c, s = a_to_b.cos_dtheta, a_to_b.sin_dtheta
    dx = a_to_b.dx + c * b_to_c.dx - s * b_to_c.dy
    dy = a_to_b.dy + s * b_to_c.dx + c * b_to_c.dy
    sin_t = s * b_to_c.cos_dtheta + c * b_to_c.sin_dtheta
    cos_t = c * b_to_c.cos_dtheta - s * b_to_c.sin_dtheta
    return PairPose(dx, dy, sin_t, cos_t, math.hypot(dx, dy))
