"""Scenarios, actor partitions and the closed-loop rollout engine."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from asymplay.dynamics import DT_DEFAULT, PHI_MAX, U_MAX, step_tensor
from asymplay.scenegraph import LANE_WIDTH, LaneGraph, MergeSpec, build_highway_map

log = logging.getLogger(__name__)

MAP_PRESETS = ("straight", "curved", "merge", "mixed")
_PAD_X = 1.0e5
_NODE_SPACING = 10.0


# ---------------------------------------------------------------------------
# scenarios


@dataclass
class Scenario:
    map: LaneGraph
    history: np.ndarray  # (H, N, 4) x, y, theta, v; last entry is the initial state
    dims: np.ndarray  # (N, 3) length, width, wheelbase
    logged_future: np.ndarray  # (T, N, 4), first entry equals history[-1]
    logged_actions: np.ndarray  # (T - 1, N, 2)
    dt: float = DT_DEFAULT
    name: str = ""
    kind: str = "nominal"
    ego: int | None = None
    scripted: np.ndarray | None = None  # (N,) bool, actors that always replay their log

    def __post_init__(self):
        n = self.history.shape[1]
        if n < 1:
            raise ValueError("scenario needs at least one actor")
        if self.dims.shape != (n, 3) or self.logged_future.shape[1] != n:
            raise ValueError("actor count mismatch between history, dims and log")
        if self.logged_actions.shape[0] != self.logged_future.shape[0] - 1:
            raise ValueError("logged_actions must have horizon - 1 steps")
        if not np.array_equal(self.history[-1], self.logged_future[0]):
            raise ValueError("logged future must start at the initial state")

    @property
    def num_actors(self) -> int:
        return self.history.shape[1]

    @property
    def horizon(self) -> int:
        return self.logged_future.shape[0]

    def to_dict(self) -> dict:
        actors = []
        for i in range(self.num_actors):
            actors.append(
                {
                    "id": i,
                    "length": float(self.dims[i, 0]),
                    "width": float(self.dims[i, 1]),
                    "wheelbase": float(self.dims[i, 2]),
                    "history": self.history[:, i].tolist(),
                    "scripted": bool(self.scripted[i]) if self.scripted is not None else False,
                }
            )
        return {
            "name": self.name,
            "kind": self.kind,
            "map": self.map.to_dict(),
            "actors": actors,
            "logged_future": [self.logged_future[:, i].tolist() for i in range(self.num_actors)],
            "logged_actions": [self.logged_actions[:, i].tolist() for i in range(self.num_actors)],
            "horizon": self.horizon,
            "dt": self.dt,
            "ego": self.ego,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        actors = d["actors"]
        n = len(actors)
        history = np.stack([np.asarray(a["history"], dtype=np.float64) for a in actors], axis=1)
        dims = np.array([[a["length"], a["width"], a["wheelbase"]] for a in actors], dtype=np.float64)
        fut = np.stack([np.asarray(f, dtype=np.float64) for f in d["logged_future"]], axis=1)
        acts = np.stack([np.asarray(f, dtype=np.float64).reshape(-1, 2) for f in d["logged_actions"]], axis=1)
        scripted = np.array([a.get("scripted", False) for a in actors], dtype=bool)
        if fut.shape[0] != d["horizon"]:
            raise ValueError("logged_future length does not match horizon")
        return cls(
            map=LaneGraph.from_dict(d["map"]),
            history=history,
            dims=dims.reshape(n, 3),
            logged_future=fut,
            logged_actions=acts,
            dt=d["dt"],
            name=d.get("name", ""),
            kind=d.get("kind", "nominal"),
            ego=d.get("ego"),
            scripted=scripted if scripted.any() else None,
        )


def save_scenario(s: Scenario, path: Path) -> None:
    Path(path).write_text(json.dumps(s.to_dict()))


def load_scenario(path: Path) -> Scenario:
    return Scenario.from_dict(json.loads(Path(path).read_text()))


def save_corpus(scenarios: Sequence[Scenario], out: Path, seed: int, config: dict | None = None) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, s in enumerate(scenarios):
        fname = f"scenario_{i:05d}.json"
        save_scenario(s, out / fname)
        files.append({"file": fname, "kind": s.kind, "actors": s.num_actors, "has_merge": s.map.has_merge})
    manifest = {"files": files, "seed": seed, "config": config or {}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_corpus(path: Path) -> list[Scenario]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    return [load_scenario(path / f["file"]) for f in manifest["files"]]


# ---------------------------------------------------------------------------
# reference lane-following controller (log synthesis, scripted actors, external policies)


def lane_path(graph: LaneGraph, pose: Sequence[float], max_nodes: int = 200) -> np.ndarray:
    """Centerline polyline starting near ``pose`` and following successor edges."""
    d = np.hypot(graph.positions[:, 0] - pose[0], graph.positions[:, 1] - pose[1])
    align = np.cos(graph.headings - pose[2]) > math.cos(math.pi / 4)
    d = np.where(align, d, np.inf)
    start = int(np.lexsort((np.arange(len(d)), d))[0])
    # step back one node so the projection is bracketed
    preds = graph.predecessors[start]
    path = [preds[0]] if preds else []
    node = start
    for _ in range(max_nodes):
        path.append(node)
        succ = graph.nodes[node].successors
        if not succ:
            break
        node = succ[0]
    pts = graph.positions[path]
    if len(pts) == 1:
        h = graph.headings[path[0]]
        pts = np.vstack([pts, pts + 50.0 * np.array([math.cos(h), math.sin(h)])])
    # extrapolate past the end so pursuit targets stay defined
    tail = pts[-1] - pts[-2]
    tail = tail / (np.linalg.norm(tail) + 1e-12)
    return np.vstack([pts, pts[-1] + tail * 400.0])


def _project(path: np.ndarray, p: np.ndarray) -> float:
    seg = np.diff(path, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    rel = p - path[:-1]
    tpar = np.clip((rel * seg).sum(1) / np.maximum(seg_len**2, 1e-12), 0.0, 1.0)
    proj = path[:-1] + tpar[:, None] * seg
    k = int(np.argmin(np.linalg.norm(proj - p, axis=1)))
    return float(np.concatenate([[0.0], np.cumsum(seg_len)])[k] + tpar[k] * seg_len[k])


def _point_at(path: np.ndarray, s: float) -> np.ndarray:
    seg = np.diff(path, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    k = int(np.clip(np.searchsorted(cum, s) - 1, 0, len(seg) - 1))
    frac = (s - cum[k]) / max(seg_len[k], 1e-12)
    return path[k] + frac * seg[k]


def pursuit_steer(state: np.ndarray, path: np.ndarray, wheelbase: float, phi_max: float = PHI_MAX) -> float:
    x, y, th, v = state
    look = max(10.0, 1.5 * abs(v))
    target = _point_at(path, _project(path, np.array([x, y])) + look)
    dx, dy = target[0] - x, target[1] - y
    alpha = math.atan2(dy, dx) - th
    alpha = math.atan2(math.sin(alpha), math.cos(alpha))
    phi = math.atan(2.0 * wheelbase * math.sin(alpha) / look)
    return float(np.clip(phi, -phi_max, phi_max))


def idm_accel(v: float, v_des: float, gap: float | None, lead_v: float | None, u_max: float = U_MAX) -> float:
    a_max, b_comf, s0, headway = 2.0, 3.0, 2.0, 1.2
    free = 1.0 - (max(v, 0.0) / max(v_des, 0.1)) ** 4
    inter = 0.0
    if gap is not None:
        s_star = s0 + max(0.0, v * headway + v * (v - lead_v) / (2.0 * math.sqrt(a_max * b_comf)))
        inter = (s_star / max(gap, 0.1)) ** 2
    return float(np.clip(a_max * (free - inter), -u_max, a_max))


def _leader(states: np.ndarray, dims: np.ndarray, i: int, lateral: float = 2.0, ahead: float = 120.0):
    """Closest actor ahead of ``i`` in its own frame (bumper gap and speed), or ``(None, None)``."""
    x, y, th = states[i, :3]
    c, s = math.cos(th), math.sin(th)
    best = (None, None)
    for j in range(len(states)):
        if j == i:
            continue
        ex, ey = states[j, 0] - x, states[j, 1] - y
        dx, dy = c * ex + s * ey, -s * ex + c * ey
        if 0.0 < dx < ahead and abs(dy) < lateral:
            gap = dx - 0.5 * (dims[i, 0] + dims[j, 0])
            if best[0] is None or gap < best[0]:
                best = (gap, float(states[j, 3] * math.cos(states[j, 2] - th)))
    return best


def step_numpy(states: np.ndarray, actions: np.ndarray, wheelbase: np.ndarray, dt: float) -> np.ndarray:
    with torch.no_grad():
        return step_tensor(torch.as_tensor(states), torch.as_tensor(actions), torch.as_tensor(wheelbase), dt).numpy()


@dataclass
class ActorScript:
    """Reference behaviour for one actor during synthesis."""

    path: np.ndarray
    v_des: float
    idm: bool = True
    brake_from: int | None = None  # hard-brake at ``brake_decel`` from this step on
    brake_decel: float = 5.0
    switch_path: np.ndarray | None = None  # lane change target
    switch_at: int | None = None

    def action(self, t: int, states: np.ndarray, dims: np.ndarray, i: int, dt: float) -> tuple[float, float]:
        path = self.path
        if self.switch_at is not None and t >= self.switch_at:
            path = self.switch_path
        phi = pursuit_steer(states[i], path, dims[i, 2])
        v = states[i, 3]
        if self.brake_from is not None and t >= self.brake_from:
            return max(-self.brake_decel, -v / dt), phi
        if self.idm:
            gap, lead_v = _leader(states, dims, i)
            return idm_accel(v, self.v_des, gap, lead_v), phi
        return 0.0, phi


def synthesize(
    graph: LaneGraph,
    init: np.ndarray,
    dims: np.ndarray,
    scripts: Sequence[ActorScript],
    history: int,
    horizon: int,
    dt: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Run reference scripts from ``init`` (state at the first history step).

    Returns ``states`` of length ``history + horizon - 1`` and the actions between them.
    """
    n_steps = history + horizon - 2
    states = [init.copy()]
    actions = []
    for t in range(n_steps):
        s = states[-1]
        a = np.array([scripts[i].action(t - (history - 1), s, dims, i, dt) for i in range(len(s))])
        actions.append(a)
        states.append(step_numpy(s, a, dims[:, 2], dt))
    return np.stack(states), np.stack(actions)


def _random_dims(rng: np.random.Generator, n: int) -> np.ndarray:
    length = rng.uniform(4.3, 4.8, n)
    width = rng.uniform(1.9, 2.0, n)
    wheelbase = 0.6 * length
    return np.stack([length, width, wheelbase], axis=1)


def make_map(rng: np.random.Generator, preset: str) -> LaneGraph:
    if preset == "mixed":
        preset = ("straight", "curved", "merge")[int(rng.integers(0, 3))]
    lanes = int(rng.integers(2, 4))
    length = 420.0
    if preset == "straight":
        return build_highway_map(lanes, length, 0.0, _NODE_SPACING)
    if preset == "curved":
        kappa = float(rng.uniform(0.001, 0.003)) * (1 if rng.random() < 0.5 else -1)
        return build_highway_map(lanes, length, kappa, _NODE_SPACING)
    if preset == "merge":
        return build_highway_map(lanes, length, 0.0, _NODE_SPACING, merge=MergeSpec(start=140.0, taper=80.0, ramp_length=100.0))
    raise ValueError(f"unknown map preset {preset!r}")


def _exact_log_collisions(states: np.ndarray, dims: np.ndarray) -> bool:
    from asymplay.objectives import exact_collision

    return bool(exact_collision(states, dims).any())


def generate_scenario(
    rng: np.random.Generator,
    n_actors: int,
    preset: str = "mixed",
    history: int = 3,
    horizon: int = 12,
    dt: float = DT_DEFAULT,
    name: str = "",
    max_tries: int = 200,
) -> Scenario:
    """Random highway scene whose log comes from the reference lane follower.

    Actors start on random main lanes with bumper gaps of at least 8 m and
    speeds in [15, 30] m/s; logs with any collision or offroad box are rejected.
    """
    spacing = _NODE_SPACING
    for attempt in range(max_tries):
        if attempt % 50 == 0:
            # a crowded single-lane map may never fit; redraw the map now and then
            graph = make_map(rng, preset)
            main_lanes = _main_lane_count(graph)
            stations_per_lane = _stations_per_lane(graph)
        dims = _random_dims(rng, n_actors)
        speed = rng.uniform(15.0, 30.0, n_actors)
        lane_of = rng.integers(0, main_lanes, n_actors)
        on_ramp = np.zeros(n_actors, dtype=bool)
        if graph.has_merge and n_actors > 1 and rng.random() < 0.7:
            on_ramp[int(rng.integers(0, n_actors))] = True
        station = rng.uniform(20.0, 150.0, n_actors)
        ok = True
        for i in range(n_actors):
            for j in range(i):
                if lane_of[i] == lane_of[j] and on_ramp[i] == on_ramp[j]:
                    if abs(station[i] - station[j]) < 8.0 + 0.5 * (dims[i, 0] + dims[j, 0]) + 2.0:
                        ok = False
        # front to back in each lane, cap a follower's speed so it can shed the
        # difference to its leader at a firm 4 m/s^2 before closing the gap
        for i in np.argsort(-station):
            ahead = [j for j in range(n_actors) if lane_of[j] == lane_of[i] and on_ramp[j] == on_ramp[i] and station[j] > station[i]]
            if ahead:
                j = min(ahead, key=lambda j: station[j])
                room = station[j] - station[i] - 0.5 * (dims[i, 0] + dims[j, 0]) - 4.0
                speed[i] = min(speed[i], speed[j] + math.sqrt(8.0 * max(room, 0.0)))
        ok = ok and bool((speed >= 15.0).all())
        if not ok:
            continue
        init = np.zeros((n_actors, 4))
        scripts = []
        for i in range(n_actors):
            if on_ramp[i]:
                base = len(graph.nodes) - _ramp_nodes(graph)
                ramp_ids = np.arange(base, len(graph.nodes))
                k = ramp_ids[np.argmin(np.abs(graph.positions[ramp_ids, 0] - min(station[i], 100.0)))]
                node = graph.nodes[int(k)]
            else:
                j = int(np.clip(round(station[i] / spacing), 0, stations_per_lane - 2))
                node = graph.nodes[int(lane_of[i]) * stations_per_lane + j]
            v = float(speed[i])
            x0, y0 = node.position
            h = node.heading
            # initial state is placed at the first history step
            init[i] = [x0, y0, h, v]
            scripts.append(ActorScript(path=lane_path(graph, init[i, :3]), v_des=v))
        states, actions = synthesize(graph, init, dims, scripts, history, horizon, dt)
        if _exact_log_collisions(states, dims) or _log_offroad(graph, states, dims):
            continue
        return Scenario(
            map=graph,
            history=states[:history],
            dims=dims,
            logged_future=states[history - 1 :],
            logged_actions=actions[history - 1 :],
            dt=dt,
            name=name,
        )
    raise RuntimeError("could not place a collision-free scenario; relax the actor count")


def _main_lane_count(graph: LaneGraph) -> int:
    n_st = _stations_per_lane(graph)
    return (len(graph.nodes) - _ramp_nodes(graph)) // n_st


def _stations_per_lane(graph: LaneGraph) -> int:
    k = 0
    node = 0
    while True:
        k += 1
        succ = graph.nodes[node].successors
        if not succ or succ[0] != node + 1:
            return k
        node = succ[0]


def _ramp_nodes(graph: LaneGraph) -> int:
    n_st = _stations_per_lane(graph)
    return len(graph.nodes) % n_st if graph.has_merge else 0


def _log_offroad(graph: LaneGraph, states: np.ndarray, dims: np.ndarray) -> bool:
    from asymplay.dynamics import box_corners

    corners = box_corners(states[..., 0], states[..., 1], states[..., 2], dims[:, 0], dims[:, 1], dims[:, 2])
    return not bool(graph.contains_points(corners).all())


def generate_corpus(
    n_scenarios: int,
    seed: int,
    actors_min: int = 4,
    actors_max: int = 8,
    preset: str = "mixed",
    history: int = 3,
    horizon: int = 12,
    dt: float = DT_DEFAULT,
) -> list[Scenario]:
    if actors_min < 1 or actors_max < actors_min:
        raise ValueError("need 1 <= actors_min <= actors_max")
    if preset not in MAP_PRESETS:
        raise ValueError(f"unknown map preset {preset!r}")
    rng = np.random.default_rng([seed, 0xC0])
    out = []
    for k in range(n_scenarios):
        n = int(rng.integers(actors_min, actors_max + 1))
        out.append(generate_scenario(rng, n, preset, history, horizon, dt, name=f"s{seed}_{k:05d}"))
    return out


# ---------------------------------------------------------------------------
# partitions


@dataclass(frozen=True)
class Partition:
    teacher_set: frozenset[int]
    student_set: frozenset[int]
    targets: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.teacher_set & self.student_set:
            raise ValueError("teacher and student sets overlap")
        for i, j in self.targets.items():
            if i not in self.teacher_set:
                raise ValueError(f"target given for non-teacher actor {i}")
            if j in self.teacher_set:
                raise ValueError("targets must not be teacher-set actors")


def sample_partition(n: int, rng: np.random.Generator, teacher_frac: float = 0.3) -> Partition:
    if n < 2:
        raise ValueError("need at least two actors to partition")
    while True:
        in_t = rng.random(n) < teacher_frac
        if 0 < in_t.sum() < n:
            break
    t_set = [i for i in range(n) if in_t[i]]
    s_set = [i for i in range(n) if not in_t[i]]
    targets = {i: int(s_set[int(rng.integers(0, len(s_set)))]) for i in t_set}
    return Partition(frozenset(t_set), frozenset(s_set), targets)


def ego_partition(n: int, ego: int, rng: np.random.Generator, teacher_frac: float = 0.3) -> Partition:
    """Partition with ``ego`` forced into the student set and targeted by every teacher actor."""
    if n < 2:
        raise ValueError("need at least two actors to partition")
    while True:
        in_t = rng.random(n) < teacher_frac
        in_t[ego] = False
        if in_t.sum() > 0:
            break
    t_set = frozenset(i for i in range(n) if in_t[i])
    return Partition(t_set, frozenset(range(n)) - t_set, {i: ego for i in t_set})


# ---------------------------------------------------------------------------
# batching


@dataclass
class SceneBatch:
    hist: torch.Tensor  # (B, H, N, 4)
    dims: torch.Tensor  # (B, N, 3)
    actor_mask: torch.Tensor  # (B, N)
    log_future: torch.Tensor  # (B, T, N, 4)
    log_actions: torch.Tensor  # (B, T - 1, N, 2)
    node_pose: torch.Tensor  # (B, K, 3)
    node_width: torch.Tensor  # (B, K)
    node_mask: torch.Tensor  # (B, K)
    nbr_idx: torch.Tensor  # (B, K, Q)
    nbr_mask: torch.Tensor  # (B, K, Q)
    scripted_mask: torch.Tensor  # (B, N) actors that replay their log
    scenarios: list[Scenario]
    dt: float
    teacher_mask: torch.Tensor | None = None  # (B, N)
    targets: torch.Tensor | None = None  # (B, N), -1 where undefined

    @property
    def size(self) -> int:
        return self.hist.shape[0]

    @property
    def num_actors(self) -> int:
        return self.hist.shape[2]

    @property
    def horizon(self) -> int:
        return self.log_future.shape[1]

    @property
    def student_mask(self) -> torch.Tensor:
        return self.actor_mask & ~self.teacher_mask

    def with_partitions(self, parts: Sequence[Partition]) -> "SceneBatch":
        b, n = self.size, self.num_actors
        tm = torch.zeros(b, n, dtype=torch.bool)
        tg = torch.full((b, n), -1, dtype=torch.long)
        for k, p in enumerate(parts):
            for i in p.teacher_set:
                tm[k, i] = True
                tg[k, i] = p.targets[i]
        return replace(self, teacher_mask=tm, targets=tg)

    def select(self, idx: Sequence[int]) -> "SceneBatch":
        return make_batch([self.scenarios[i] for i in idx])


def make_batch(scenarios: Sequence[Scenario]) -> SceneBatch:
    if not scenarios:
        raise ValueError("empty batch")
    b = len(scenarios)
    n = max(s.num_actors for s in scenarios)
    k = max(len(s.map) for s in scenarios)
    h = scenarios[0].history.shape[0]
    t = scenarios[0].horizon
    dt = scenarios[0].dt
    if any(s.history.shape[0] != h or s.horizon != t or s.dt != dt for s in scenarios):
        raise ValueError("scenarios in a batch must share history length, horizon and dt")
    q = 5
    hist = np.zeros((b, h, n, 4))
    dims = np.tile(np.array([4.5, 2.0, 2.7]), (b, n, 1))
    amask = np.zeros((b, n), dtype=bool)
    scripted = np.zeros((b, n), dtype=bool)
    fut = np.zeros((b, t, n, 4))
    acts = np.zeros((b, t - 1, n, 2))
    npose = np.zeros((b, k, 3))
    nwidth = np.full((b, k), LANE_WIDTH)
    nmask = np.zeros((b, k), dtype=bool)
    nbr = np.zeros((b, k, q), dtype=np.int64)
    nbm = np.zeros((b, k, q), dtype=bool)
    for i, s in enumerate(scenarios):
        m = s.num_actors
        hist[i, :, :m] = s.history
        dims[i, :m] = s.dims
        amask[i, :m] = True
        if s.scripted is not None:
            scripted[i, :m] = s.scripted
        fut[i, :, :m] = s.logged_future
        acts[i, :, :m] = s.logged_actions
        # padding actors are parked far away, spaced so they never interact
        for j in range(m, n):
            park = np.array([_PAD_X + 100.0 * j, _PAD_X, 0.0, 0.0])
            hist[i, :, j] = park
            fut[i, :, j] = park
        kk = len(s.map)
        npose[i, :kk] = s.map.poses
        nwidth[i, :kk] = s.map.widths
        nmask[i, :kk] = True
        npose[i, kk:] = np.array([-_PAD_X, -_PAD_X, 0.0])
        idx, msk = s.map.neighborhood(q)
        nbr[i, :kk] = idx
        nbm[i, :kk] = msk
        nbr[i, kk:, 0] = np.arange(kk, k)
        nbm[i, kk:, 0] = True
    tt = lambda a: torch.as_tensor(a)
    return SceneBatch(
        hist=tt(hist),
        dims=tt(dims),
        actor_mask=tt(amask),
        log_future=tt(fut),
        log_actions=tt(acts),
        node_pose=tt(npose),
        node_width=tt(nwidth),
        node_mask=tt(nmask),
        nbr_idx=tt(nbr),
        nbr_mask=tt(nbm),
        scripted_mask=tt(scripted),
        scenarios=list(scenarios),
        dt=dt,
    )


# ---------------------------------------------------------------------------
# controllers


class Controller(Protocol):
    def __call__(self, hist: torch.Tensor, t: int, batch: SceneBatch) -> torch.Tensor:
        """Actions ``(B, N, 2)`` for every actor given the history window ``hist`` (B, H, N, 4)."""


class PolicyController:
    """Binds a ``DrivingPolicy``; map features are encoded once per rollout."""

    def __init__(self, policy, use_targets: bool = False):
        self.policy = policy
        self.use_targets = use_targets
        self._map = None

    def reset(self, batch: SceneBatch) -> None:
        self._map = self.policy.encode_map(batch.node_pose, batch.node_width, batch.nbr_idx, batch.nbr_mask)

    def __call__(self, hist, t, batch):
        tm = batch.teacher_mask if self.use_targets else None
        tg = batch.targets if self.use_targets else None
        return self.policy(hist, batch.dims, batch.actor_mask, self._map, batch.node_pose, batch.node_mask, tm, tg)


class CoastController:
    def __call__(self, hist, t, batch):
        return torch.zeros(hist.shape[0], hist.shape[2], 2)


class LogReplayController:
    def __call__(self, hist, t, batch):
        return batch.log_actions[:, t]


class LaneFollowerController:
    """Scripted external driver: pure-pursuit lane keeping, constant speed or IDM car following."""

    def __init__(self, idm: bool = False):
        self.idm = idm
        self._paths = None

    def reset(self, batch: SceneBatch) -> None:
        self._paths = []
        for k, s in enumerate(batch.scenarios):
            init = s.history[-1]
            self._paths.append([lane_path(s.map, init[i, :3]) for i in range(s.num_actors)])
        self._vdes = batch.hist[:, -1, :, 3].numpy().copy()

    def __call__(self, hist, t, batch):
        cur = hist[:, -1].detach().numpy()
        dims = batch.dims.numpy()
        out = np.zeros(cur.shape[:2] + (2,))
        for k, paths in enumerate(self._paths):
            for i, path in enumerate(paths):
                phi = pursuit_steer(cur[k, i], path, dims[k, i, 2])
                u = 0.0
                if self.idm:
                    m = len(paths)
                    gap, lead_v = _leader(cur[k, :m], dims[k, :m], i)
                    u = idm_accel(cur[k, i, 3], self._vdes[k, i], gap, lead_v)
                out[k, i] = (u, phi)
        return torch.as_tensor(out)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class Rollout:
    states: torch.Tensor  # (B, T, N, 4)
    actions: torch.Tensor  # (B, T - 1, N, 2)
    controlled_mask: torch.Tensor  # (B, N) policy-controlled actors
    replay_mask: torch.Tensor  # (B, N) replayed actors

    def numpy_states(self) -> np.ndarray:
        return self.states.detach().numpy()


Binding = tuple[Controller, torch.Tensor]


def rollout(
    batch: SceneBatch,
    bindings: Sequence[Binding],
    replay: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> Rollout:
    """Closed-loop unroll over the batch horizon.

    ``bindings`` pairs controllers with ``(B, N)`` masks of the actors they
    drive. ``replay`` is ``(actions (B, T-1, N, 2), mask (B, N))``; replayed
    actors execute the stored actions verbatim, as constants.
    """
    b, n, t_len = batch.size, batch.num_actors, batch.horizon
    cover = torch.zeros(b, n, dtype=torch.long)
    for _, m in bindings:
        cover += m.long()
    replay_mask = torch.zeros(b, n, dtype=torch.bool)
    if replay is not None:
        r_actions, replay_mask = replay
        if r_actions.shape != (b, t_len - 1, n, 2):
            raise ValueError(f"replay actions have shape {tuple(r_actions.shape)}, expected {(b, t_len - 1, n, 2)}")
        r_actions = r_actions.detach()
        cover += replay_mask.long()
    if bool((cover[batch.actor_mask] != 1).any()):
        raise ValueError("every actor must be bound to exactly one controller or to replay")

    for ctrl, _ in bindings:
        if hasattr(ctrl, "reset"):
            ctrl.reset(batch)

    hist = batch.hist
    wheelbase = batch.dims[..., 2]
    states = [hist[:, -1]]
    actions = []
    for t in range(t_len - 1):
        a = torch.zeros(b, n, 2)
        for ctrl, m in bindings:
            if bool(m.any()):
                a = torch.where(m.unsqueeze(-1), ctrl(hist, t, batch), a)
        if replay is not None:
            a = torch.where(replay_mask.unsqueeze(-1), r_actions[:, t], a)
        nxt = step_tensor(states[-1], a, wheelbase, batch.dt)
        actions.append(a)
        states.append(nxt)
        hist = torch.cat([hist[:, 1:], nxt.unsqueeze(1)], dim=1)
    controlled = torch.zeros(b, n, dtype=torch.bool)
    for _, m in bindings:
        controlled |= m
    return Rollout(torch.stack(states, 1), torch.stack(actions, 1), controlled & batch.actor_mask, replay_mask)


@dataclass
class RolloutPair:
    demo: Rollout
    mixed: Rollout
    demo_first: bool


def paired_rollouts(
    teacher,
    student,
    batch: SceneBatch,
    coin: float,
    three_player: bool = True,
    replay: bool = True,
) -> RolloutPair:
    """Teacher-only and mixed rollouts from identical initial conditions.

    ``coin < 0.5`` generates the teacher-only rollout first and replays its
    teacher-set actions into the mixed rollout; otherwise the order is
    reversed. With ``replay=False`` both are generated freely.
    """
    if batch.teacher_mask is None:
        raise ValueError("batch has no partition")
    tm, sm = batch.teacher_mask & batch.actor_mask, batch.student_mask
    adv = PolicyController(teacher.adversary, use_targets=True)
    demo_policy = teacher.demonstrator if three_player else teacher.adversary
    dem = PolicyController(demo_policy, use_targets=not three_player)
    stu = PolicyController(student)

    demo_first = coin < 0.5
    if demo_first:
        demo = rollout(batch, [(adv, tm), (dem, sm)])
        if replay:
            mixed = rollout(batch, [(stu, sm)], replay=(demo.actions, tm))
        else:
            mixed = rollout(batch, [(adv, tm), (stu, sm)])
    else:
        mixed = rollout(batch, [(adv, tm), (stu, sm)])
        if replay:
            demo = rollout(batch, [(dem, sm)], replay=(mixed.actions, tm))
        else:
            demo = rollout(batch, [(adv, tm), (dem, sm)])
    return RolloutPair(demo, mixed, demo_first)
