"""Evaluation: realism metrics, safety-style scenarios, zero-shot attacks and Pareto tables.

Every metric is computed per scenario on a batch of one, so results do not
depend on how the corpus is ordered or batched.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from asymplay.diffcore import named_rng
from asymplay.dynamics import DT_DEFAULT, box_center
from asymplay.objectives import exact_collision, offroad_flags
from asymplay.scenegraph import wrap_angle
from asymplay.simkit import (
    ActorScript,
    CoastController,
    PolicyController,
    Scenario,
    _exact_log_collisions,
    _log_offroad,
    _main_lane_count,
    _random_dims,
    _stations_per_lane,
    ego_partition,
    lane_path,
    make_batch,
    make_map,
    rollout,
    synthesize,
)

FEATURES = ("linear_speed", "linear_accel", "angular_speed", "dist_to_road_boundary", "dist_to_closest_actor")
BIN_SPECS = {
    "linear_speed": (0.0, 40.0, 32),
    "linear_accel": (-8.0, 8.0, 32),
    "angular_speed": (-1.0, 1.0, 32),
    "dist_to_road_boundary": (0.0, 10.0, 32),
    "dist_to_closest_actor": (0.0, 50.0, 32),
}
SMOOTHING = 1e-9


# ---------------------------------------------------------------------------
# histograms and JSD


@dataclass
class FeatureHistogram:
    feature: str
    edges: np.ndarray
    counts: np.ndarray
    eps: float = SMOOTHING

    def __post_init__(self):
        if len(self.edges) != len(self.counts) + 1:
            raise ValueError("need len(edges) == len(counts) + 1")
        if (np.asarray(self.counts) < 0).any():
            raise ValueError("histogram counts must be non-negative")

    @property
    def probs(self) -> np.ndarray:
        c = np.asarray(self.counts, dtype=np.float64) + self.eps
        return c / c.sum()


def bin_edges(feature: str) -> np.ndarray:
    lo, hi, n = BIN_SPECS[feature]
    return np.linspace(lo, hi, n + 1)


def histogram(feature: str, values: np.ndarray) -> FeatureHistogram:
    """Fixed-edge histogram; out-of-range values land in the edge bins."""
    edges = bin_edges(feature)
    v = np.clip(np.asarray(values, dtype=np.float64).reshape(-1), edges[0], edges[-1])
    counts, _ = np.histogram(v, bins=edges)
    return FeatureHistogram(feature, edges, counts.astype(np.float64))


def jsd_probs(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats between two probability vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    tot = p + q  # 2m; halving first underflows subnormal entries to zero

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(2.0 * a[nz] / tot[nz])))

    # clamp tiny negative rounding and the ln 2 ceiling
    return min(max(0.5 * kl(p) + 0.5 * kl(q), 0.0), math.log(2.0))


def jsd(p: FeatureHistogram, q: FeatureHistogram) -> float:
    if len(p.edges) != len(q.edges) or not np.array_equal(p.edges, q.edges):
        raise ValueError("histograms have different bin edges")
    return jsd_probs(p.probs, q.probs)


def actor_features(scenario: Scenario, states: np.ndarray, i: int, dt: float) -> dict[str, np.ndarray]:
    """Per-step feature samples for actor ``i`` from states ``(T, N, 4)``."""
    dims = scenario.dims
    v = states[:, i, 3]
    th = states[:, i, 2]
    cx, cy = box_center(states[..., 0], states[..., 1], states[..., 2], dims[:, 2])
    centers = np.stack([cx, cy], axis=-1)  # (T, N, 2)
    out = {
        "linear_speed": v,
        "linear_accel": np.diff(v) / dt,
        "angular_speed": np.array([wrap_angle(a) for a in np.diff(th)]) / dt,
        "dist_to_road_boundary": scenario.map.boundary_distance(centers[:, i]),
    }
    if states.shape[1] > 1:
        d = np.linalg.norm(centers - centers[:, i : i + 1], axis=-1)
        d[:, i] = np.inf
        out["dist_to_closest_actor"] = d.min(axis=1)
    else:
        out["dist_to_closest_actor"] = np.zeros(0)
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    fde: float
    collision_pct: float
    offroad_pct: float
    jsd_composite: float
    jsd_per_feature: dict[str, float]
    num_scenarios: int
    per_scenario: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for name in ("collision_pct", "offroad_pct"):
            if not 0.0 <= getattr(self, name) <= 100.0:
                raise ValueError(f"{name} outside [0, 100]")
        for k, v in self.jsd_per_feature.items():
            if not 0.0 <= v <= math.log(2.0) + 1e-12:
                raise ValueError(f"jsd for {k} outside [0, ln 2]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def flat(self) -> dict:
        row = {
            "fde": self.fde,
            "collision_pct": self.collision_pct,
            "offroad_pct": self.offroad_pct,
            "jsd_composite": self.jsd_composite,
            "num_scenarios": self.num_scenarios,
        }
        row.update({f"jsd_{k}": v for k, v in self.jsd_per_feature.items()})
        return row


def write_report(report: MetricsReport, out: Path, stem: str = "metrics") -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    row = report.flat()
    with open(out / f"{stem}.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(row))
        w.writeheader()
        w.writerow(row)


def metrics_from_rollouts(
    scenarios: Sequence[Scenario],
    states: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    dt: float | None = None,
) -> MetricsReport:
    """Metrics for simulated ``states[k]`` ``(T, N, 4)``; ``masks[k]`` selects the evaluated actors."""
    if not scenarios:
        raise ValueError("empty corpus")
    fde_terms, n_eval, n_col, n_off = [], 0, 0, 0
    per_feat: dict[str, list[float]] = {f: [] for f in FEATURES}
    per_scenario = []
    for sc, st, m in zip(scenarios, states, masks):
        idx = np.flatnonzero(m)
        err = np.linalg.norm(st[-1, idx, :2] - sc.logged_future[-1, idx, :2], axis=-1)
        col = exact_collision(st, sc.dims)[idx]
        off = offroad_flags(sc.map, st, sc.dims)[idx]
        fde_terms.extend(err.tolist())
        n_eval += len(idx)
        n_col += int(col.sum())
        n_off += int(off.sum())
        step = dt or sc.dt
        for i in idx:
            sim_f = actor_features(sc, st, int(i), step)
            gt_f = actor_features(sc, sc.logged_future, int(i), step)
            for f in FEATURES:
                if len(sim_f[f]) and len(gt_f[f]):
                    per_feat[f].append(jsd(histogram(f, sim_f[f]), histogram(f, gt_f[f])))
        per_scenario.append(
            {
                "name": sc.name,
                "actors": int(len(idx)),
                "fde": math.fsum(err.tolist()) / max(len(idx), 1),
                "collisions": int(col.sum()),
                "offroad": int(off.sum()),
            }
        )
    jsd_feat = {f: (math.fsum(v) / len(v) if v else 0.0) for f, v in per_feat.items()}
    return MetricsReport(
        fde=math.fsum(fde_terms) / max(n_eval, 1),
        collision_pct=100.0 * n_col / max(n_eval, 1),
        offroad_pct=100.0 * n_off / max(n_eval, 1),
        jsd_composite=math.fsum(jsd_feat.values()) / len(FEATURES),
        jsd_per_feature=jsd_feat,
        num_scenarios=len(scenarios),
        per_scenario=per_scenario,
    )


# ---------------------------------------------------------------------------
# running policies


def as_controller(policy):
    if isinstance(policy, torch.nn.Module):
        return PolicyController(policy)
    return policy


def simulate(policy, scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Roll out one scenario; ``policy`` drives every non-scripted actor, scripted ones replay the log.

    Returns states ``(T, N, 4)`` and the controlled-actor mask ``(N,)``.
    """
    batch = make_batch([scenario])
    ctrl = as_controller(policy)
    controlled = batch.actor_mask & ~batch.scripted_mask
    replay = (batch.log_actions, batch.scripted_mask) if bool(batch.scripted_mask.any()) else None
    with torch.no_grad():
        out = rollout(batch, [(ctrl, controlled)], replay=replay)
    return out.states[0].numpy(), controlled[0].numpy()


def _simulate_many(policy, corpus: Sequence[Scenario], workers: int) -> list[tuple[np.ndarray, np.ndarray]]:
    if workers <= 1 or len(corpus) < 2:
        return [simulate(policy, sc) for sc in corpus]
    import multiprocessing as mp

    # scenarios are independent; results come back in corpus order
    with mp.get_context("fork").Pool(workers) as pool:
        return pool.starmap(simulate, [(policy, sc) for sc in corpus])


def evaluate(policy, corpus: Sequence[Scenario], dt: float | None = None, workers: int = 1) -> MetricsReport:
    """Closed-loop metrics with ``policy`` controlling all (non-scripted) actors."""
    if not corpus:
        raise ValueError("empty corpus")
    runs = _simulate_many(policy, corpus, workers)
    return metrics_from_rollouts(corpus, [r[0] for r in runs], [r[1] for r in runs], dt)


def collision_rate(policy, corpus: Sequence[Scenario]) -> float:
    """Fraction of controlled actors with an exact collision."""
    return evaluate(policy, corpus).collision_pct / 100.0


# ---------------------------------------------------------------------------
# safety-style scenarios


SAFETY_KINDS = ("hard_brake", "stopped", "cut_in")


def _place(graph, lane: int, station: float, spacing: float = 10.0) -> np.ndarray:
    n_st = _stations_per_lane(graph)
    j = int(np.clip(round(station / spacing), 0, n_st - 2))
    node = graph.nodes[lane * n_st + j]
    return np.array([node.position[0], node.position[1], node.heading])


def generate_safety_scenario(
    rng: np.random.Generator,
    kind: str,
    n_background: int,
    history: int = 3,
    horizon: int = 12,
    dt: float = DT_DEFAULT,
    name: str = "",
    max_tries: int = 200,
) -> Scenario:
    """Ego (actor 0) plus one scripted hazard and scripted background traffic.

    Kept only when the reference car-following ego avoids every collision
    while an ego that simply coasts does not.
    """
    if kind not in SAFETY_KINDS:
        raise ValueError(f"unknown safety kind {kind!r}")
    for _ in range(max_tries):
        graph = make_map(rng, "straight" if rng.random() < 0.6 else "curved")
        lanes = _main_lane_count(graph)
        if kind == "cut_in" and lanes < 2:
            continue
        n = 2 + n_background
        dims = _random_dims(rng, n)
        ego_lane = int(rng.integers(0, lanes))
        v_ego = float(rng.uniform(20.0, 26.0))
        s_ego = float(rng.uniform(40.0, 80.0))
        init = np.zeros((n, 4))
        init[0, :3] = _place(graph, ego_lane, s_ego)
        init[0, 3] = v_ego
        scripts = [ActorScript(path=lane_path(graph, init[0, :3]), v_des=v_ego)]
        if kind == "hard_brake":
            v = v_ego - float(rng.uniform(0.0, 3.0))
            init[1, :3] = _place(graph, ego_lane, s_ego + float(rng.uniform(25.0, 40.0)))
            init[1, 3] = v
            brake = history - 1 + int(rng.integers(0, 3))
            scripts.append(ActorScript(lane_path(graph, init[1, :3]), v, idm=False, brake_from=brake - (history - 1), brake_decel=float(rng.uniform(5.0, 6.0))))
        elif kind == "stopped":
            init[1, :3] = _place(graph, ego_lane, s_ego + float(rng.uniform(90.0, 120.0)))
            init[1, 3] = 0.0
            scripts.append(ActorScript(lane_path(graph, init[1, :3]), 0.0, idm=False))
        else:
            side = ego_lane + (1 if ego_lane + 1 < lanes else -1)
            v = v_ego - float(rng.uniform(6.0, 10.0))
            init[1, :3] = _place(graph, side, s_ego + float(rng.uniform(35.0, 50.0)))
            init[1, 3] = v
            ego_path = lane_path(graph, init[0, :3])
            scripts.append(ActorScript(lane_path(graph, init[1, :3]), v, idm=False, switch_path=ego_path, switch_at=int(rng.integers(0, 2))))
        # background traffic in the other lanes, or far behind the ego
        ok = True
        for i in range(2, n):
            for _ in range(50):
                lane = int(rng.integers(0, lanes))
                st = float(rng.uniform(10.0, 220.0))
                if lane == ego_lane and (lanes > 1 or st > s_ego - 40.0):
                    continue
                init[i, :3] = _place(graph, lane, st)
                if all(np.hypot(*(init[i, :2] - init[j, :2])) >= 15.0 for j in range(i)):
                    break
            else:
                ok = False
                break
            init[i, 3] = float(rng.uniform(18.0, 26.0))
            scripts.append(ActorScript(lane_path(graph, init[i, :3]), float(init[i, 3])))
        if not ok:
            continue
        states, actions = synthesize(graph, init, dims, scripts, history, horizon, dt)
        if _exact_log_collisions(states, dims) or _log_offroad(graph, states, dims):
            continue
        scripted = np.ones(n, dtype=bool)
        scripted[0] = False
        sc = Scenario(
            map=graph,
            history=states[:history],
            dims=dims,
            logged_future=states[history - 1 :],
            logged_actions=actions[history - 1 :],
            dt=dt,
            name=name,
            kind=kind,
            ego=0,
            scripted=scripted,
        )
        coast, _ = simulate(CoastController(), sc)
        if not exact_collision(coast, dims)[0]:
            continue
        return sc
    raise RuntimeError(f"could not build a {kind} scenario")


def generate_safety_corpus(
    n_scenarios: int,
    seed: int,
    actors_min: int = 4,
    actors_max: int = 8,
    history: int = 3,
    horizon: int = 12,
    dt: float = DT_DEFAULT,
) -> list[Scenario]:
    """Scripted hazard scenarios cycling through the safety kinds; never used for training."""
    if actors_min < 2 or actors_max < actors_min:
        raise ValueError("need 2 <= actors_min <= actors_max")
    rng = named_rng(seed, "safety")
    out = []
    for k in range(n_scenarios):
        kind = SAFETY_KINDS[k % len(SAFETY_KINDS)]
        n = int(rng.integers(actors_min, actors_max + 1))
        out.append(generate_safety_scenario(rng, kind, n - 2, history, horizon, dt, name=f"safety{seed}_{k:05d}"))
    return out


# ---------------------------------------------------------------------------
# zero-shot attack


@dataclass(frozen=True)
class ZeroShotConfig:
    teacher_frac: float = 0.3
    seed: int = 0


@dataclass
class AttackOutcome:
    name: str
    ego: int
    teacher_set: list[int]
    ego_collided: bool
    ego_offroad: bool


@dataclass
class ZeroShotResult:
    report: MetricsReport
    outcomes: list[AttackOutcome]

    @property
    def ego_collision_rate(self) -> float:
        return sum(o.ego_collided for o in self.outcomes) / max(len(self.outcomes), 1)


def zero_shot_attack_eval(teacher, external_policy, corpus: Sequence[Scenario], cfg: ZeroShotConfig = ZeroShotConfig()) -> ZeroShotResult:
    """Bind one ego per scenario to ``external_policy`` and let the teacher attack it.

    Every teacher-set adversary targets the ego; the demonstrator drives the
    remaining student-set actors. ``teacher`` is a ``Teacher`` or a self-play
    checkpoint.
    """
    if hasattr(teacher, "params") and not isinstance(teacher, torch.nn.Module):
        from asymplay.trainer import teacher_from_checkpoint

        teacher = teacher_from_checkpoint(teacher)
    rng_ego = named_rng(cfg.seed, "ego")
    rng_part = named_rng(cfg.seed, "partition")
    adv = PolicyController(teacher.adversary, use_targets=True)
    dem = PolicyController(teacher.demonstrator)
    ext = as_controller(external_policy)
    states, masks, outcomes = [], [], []
    for sc in corpus:
        n = sc.num_actors
        ego = sc.ego if sc.ego is not None else int(rng_ego.integers(0, n))
        part = ego_partition(n, ego, rng_part, cfg.teacher_frac)
        assert ego in part.student_set and all(t == ego for t in part.targets.values())
        batch = make_batch([sc]).with_partitions([part])
        ego_mask = torch.zeros(1, batch.num_actors, dtype=torch.bool)
        ego_mask[0, ego] = True
        tm = batch.teacher_mask & batch.actor_mask
        rest = batch.student_mask & ~ego_mask
        with torch.no_grad():
            out = rollout(batch, [(ext, ego_mask), (adv, tm), (dem, rest)])
        st = out.states[0].numpy()
        states.append(st)
        masks.append(np.ones(n, dtype=bool))
        outcomes.append(
            AttackOutcome(
                name=sc.name,
                ego=ego,
                teacher_set=sorted(part.teacher_set),
                ego_collided=bool(exact_collision(st, sc.dims)[ego]),
                ego_offroad=bool(offroad_flags(sc.map, st, sc.dims)[ego]),
            )
        )
    return ZeroShotResult(metrics_from_rollouts(corpus, states, masks), outcomes)


# ---------------------------------------------------------------------------
# Pareto table


@dataclass
class ParetoTable:
    rows: list[dict]
    selfplay_dominated: bool

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["method", "w_col", "nominal_collision_pct", "safety_collision_pct", "dominated"])
            w.writeheader()
            for r in self.rows:
                w.writerow(r)


def _dominates(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return a[0] <= b[0] and a[1] <= b[1] and (a[0] < b[0] or a[1] < b[1])


def pareto_table(points: Sequence[tuple[float, MetricsReport, MetricsReport]], selfplay_point: tuple[MetricsReport, MetricsReport]) -> ParetoTable:
    """(nominal, safety) collision-% pairs per collision weight plus the self-play point.

    ``points`` holds ``(w_col, nominal_report, safety_report)`` per sweep weight.
    """
    if len(points) < 2:
        raise ValueError("need at least two sweep points")
    xy = [(nom.collision_pct, saf.collision_pct) for _, nom, saf in points]
    sp = (selfplay_point[0].collision_pct, selfplay_point[1].collision_pct)
    rows = []
    for (w, _, _), p in zip(points, xy):
        rows.append(
            {
                "method": "trafficsim",
                "w_col": w,
                "nominal_collision_pct": p[0],
                "safety_collision_pct": p[1],
                "dominated": any(_dominates(q, p) for q in xy + [sp] if q is not p),
            }
        )
    dominated = any(_dominates(p, sp) for p in xy)
    rows.append({"method": "selfplay", "w_col": "", "nominal_collision_pct": sp[0], "safety_collision_pct": sp[1], "dominated": dominated})
    return ParetoTable(rows, dominated)
