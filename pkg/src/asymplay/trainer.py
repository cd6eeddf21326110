"""Training loops: asymmetric self-play, closed-loop IL / TrafficSim, curation, KING, checkpoints.

All randomness comes from named sub-streams of one seed (batch, partition,
coin), and their generator states live in the checkpoint, so a resumed run
continues exactly where an uninterrupted one would be.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from asymplay.diffcore import (
    NonFiniteLossError,
    OptState,
    ParamStore,
    clip_grad_norm,
    grads_for,
    locate_non_finite,
    lr_at,
    named_rng,
    optimizer_step,
)
from asymplay.evalkit import collision_rate, simulate
from asymplay.objectives import (
    ObjectiveConfig,
    collision_loss,
    distance_loss,
    exact_collision,
    pair_mask,
    realism_term,
    student_return,
    teacher_return,
)
from asymplay.policy import DrivingPolicy, PolicyConfig, Teacher, make_student
from asymplay.simkit import (
    Partition,
    PolicyController,
    Scenario,
    SceneBatch,
    make_batch,
    paired_rollouts,
    rollout,
    sample_partition,
    step_numpy,
)
from asymplay.scenegraph import build_highway_map

log = logging.getLogger("asymplay.trainer")

MODES = ("selfplay", "il", "trafficsim", "curation")
SELFPLAY_LOG_HEADER = ["step", "loss_teacher", "loss_student", "challenge", "solvable", "realism_demo", "realism_mixed", "col_rate_eval"]
IL_LOG_HEADER = ["step", "loss", "realism", "collision", "col_rate_eval"]


@dataclass
class TrainConfig:
    total_steps: int = 2000
    warmup_steps: int = 100
    batch_size: int = 8
    lr_peak: float = 1e-4
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    teacher_frac: float = 0.3
    seed: int = 0
    eval_every: int = 200
    eval_scenarios: int = 16
    grad_clip: float = 10.0
    weight_decay: float = 0.01
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    # fair-play mechanisms
    three_player: bool = True
    replay: bool = True
    # baselines
    w_col: float = 0.0
    king_steps: int = 200
    king_step_size: float = 1e-2
    king_repair_steps: int = 50
    curation_min_colliding: int = 1
    curation_step_frac: float = 0.2
    curation_lr_frac: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("batch_size and total_steps must be >= 1")
        if self.warmup_steps < 0 or self.lr_peak < 0:
            raise ValueError("warmup_steps and lr_peak must be non-negative")
        if not 0.0 < self.teacher_frac < 1.0:
            raise ValueError("teacher_frac must be in (0, 1)")
        if isinstance(self.objective, dict):
            self.objective = ObjectiveConfig(**self.objective)
        if isinstance(self.policy, dict):
            self.policy = PolicyConfig(**self.policy)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @property
    def effective_warmup(self) -> int:
        return min(self.warmup_steps, self.total_steps - 1)


# ---------------------------------------------------------------------------
# training state and checkpoints

CHECKPOINT_MAGIC = b"ASPT"
CHECKPOINT_VERSION = 1
_RNG_STREAMS = ("batch", "partition", "coin")


@dataclass
class Checkpoint:
    mode: str
    policy_config: dict
    train_config: dict
    params: dict[str, dict[str, torch.Tensor]]  # group -> name -> tensor
    opt: dict[str, dict]  # group -> {"m": {...}, "v": {...}, "step": int}
    rng: dict[str, dict]
    step: int
    version: int = CHECKPOINT_VERSION


class TrainState:
    """Mutable training state: policies, optimizer states, RNG streams and step counter."""

    def __init__(self, mode: str, cfg: TrainConfig):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.cfg = cfg
        init = named_rng(cfg.seed, "init")
        s_seed, t_seed = (int(v) for v in init.integers(0, 2**31, 2))
        self.student = make_student(cfg.policy, seed=s_seed)
        self.teacher = Teacher(cfg.policy, seed=t_seed) if mode == "selfplay" else None
        self.stores = {"student": ParamStore.from_module(self.student)}
        if self.teacher is not None:
            self.stores["teacher"] = ParamStore.from_module(self.teacher)
        hyper = dict(lr_peak=cfg.lr_peak, weight_decay=cfg.weight_decay)
        self.opts = {k: OptState.zeros_like(s, **hyper) for k, s in self.stores.items()}
        self.rngs = {k: named_rng(cfg.seed, k) for k in _RNG_STREAMS}
        self.step = 0

    # -- checkpoint conversion ---------------------------------------------

    def to_checkpoint(self) -> Checkpoint:
        params = {k: {n: p.detach().clone() for n, p in s.items()} for k, s in self.stores.items()}
        opt = {
            k: {"m": {n: t.clone() for n, t in o.m.items()}, "v": {n: t.clone() for n, t in o.v.items()}, "step": o.step}
            for k, o in self.opts.items()
        }
        rng = {k: g.bit_generator.state for k, g in self.rngs.items()}
        return Checkpoint(self.mode, self.cfg.policy.to_dict(), self.cfg.to_dict(), params, opt, rng, self.step)

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint, cfg: TrainConfig | None = None) -> "TrainState":
        cfg = cfg or TrainConfig.from_dict(ck.train_config)
        st = cls(ck.mode, cfg)
        for k, store in st.stores.items():
            if k not in ck.params:
                raise ValueError(f"checkpoint has no parameters for {k!r}")
            with torch.no_grad():
                for n, p in store.items():
                    src = ck.params[k][n]
                    if src.shape != p.shape:
                        raise ValueError(f"shape mismatch for {k}/{n}")
                    p.copy_(src)
            o = st.opts[k]
            o.m = {n: t.clone() for n, t in ck.opt[k]["m"].items()}
            o.v = {n: t.clone() for n, t in ck.opt[k]["v"].items()}
            o.step = int(ck.opt[k]["step"])
        for k, state in ck.rng.items():
            st.rngs[k].bit_generator.state = state
        st.step = ck.step
        return st


def _tensor_entries(ck: Checkpoint) -> list[tuple[str, torch.Tensor]]:
    out = []
    for g in sorted(ck.params):
        out += [(f"params/{g}/{n}", t) for n, t in ck.params[g].items()]
    for g in sorted(ck.opt):
        for kind in ("m", "v"):
            out += [(f"opt/{g}/{kind}/{n}", t) for n, t in ck.opt[g][kind].items()]
    return out


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    entries = _tensor_entries(ck)
    header = {
        "mode": ck.mode,
        "policy_config": ck.policy_config,
        "train_config": ck.train_config,
        "opt_steps": {g: ck.opt[g]["step"] for g in sorted(ck.opt)},
        "rng": ck.rng,
        "step": ck.step,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in entries],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(t.detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes() for _, t in entries)
    body = CHECKPOINT_MAGIC + struct.pack("<II", ck.version, len(hb)) + hb + payload
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(ck: Checkpoint, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ck))
    tmp.replace(path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    payload = memoryview(data)[12 + hlen : -4]
    need = sum(8 * math.prod(e["shape"]) for e in header["tensors"])
    if need != len(payload):
        raise CheckpointError(f"payload has {len(payload)} bytes, header declares {need}")
    params: dict[str, dict] = {}
    opt: dict[str, dict] = {g: {"m": {}, "v": {}, "step": s} for g, s in header["opt_steps"].items()}
    off = 0
    for e in header["tensors"]:
        n = math.prod(e["shape"])
        arr = np.frombuffer(payload[off : off + 8 * n], dtype="<f8").astype(np.float64).reshape(e["shape"])
        off += 8 * n
        t = torch.from_numpy(arr.copy())
        parts = e["name"].split("/")
        if parts[0] == "params":
            params.setdefault(parts[1], {})["/".join(parts[2:])] = t
        else:
            opt[parts[1]][parts[2]]["/".join(parts[3:])] = t
    return Checkpoint(header["mode"], header["policy_config"], header["train_config"], params, opt, header["rng"], header["step"], version)


def _load_into(module: torch.nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    with torch.no_grad():
        for n, p in module.named_parameters():
            p.copy_(tensors[n])


def teacher_from_checkpoint(ck: Checkpoint) -> Teacher:
    if "teacher" not in ck.params:
        raise ValueError("checkpoint holds no teacher")
    t = Teacher(PolicyConfig(**ck.policy_config))
    _load_into(t, ck.params["teacher"])
    return t


def student_from_checkpoint(ck: Checkpoint) -> DrivingPolicy:
    s = make_student(PolicyConfig(**ck.policy_config))
    _load_into(s, ck.params["student"])
    return s


# ---------------------------------------------------------------------------
# shared helpers


def _sample_batch(state: TrainState, corpus: Sequence[Scenario]) -> list[Scenario]:
    rng = state.rngs["batch"]
    n = len(corpus)
    idx = rng.choice(n, size=min(state.cfg.batch_size, n), replace=False)
    return [corpus[int(i)] for i in np.sort(idx)]


def _apply(state: TrainState, group: str, grads: dict[str, torch.Tensor], lr: float) -> float:
    norm = clip_grad_norm(grads, state.cfg.grad_clip)
    optimizer_step(state.stores[group], grads, state.opts[group], lr)
    return norm


def _check_finite(loss: torch.Tensor, what: str, builder) -> None:
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite {what} at step; first non-finite intermediate from '{locate_non_finite(builder)}'")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class CsvLog:
    """Append-only CSV training log; rows are also kept in memory."""

    def __init__(self, header: list[str], path: Path | None = None, append: bool = False):
        self.header = header
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path and not (append and self.path.exists()):
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(",".join(header) + "\n")

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.path:
            with open(self.path, "a") as f:
                f.write(",".join(_fmt(row.get(k)) for k in self.header) + "\n")


def read_log(path: Path) -> list[dict]:
    with open(path) as f:
        return list(csv.DictReader(f))


def _eval_col_rate(policy, corpus: Sequence[Scenario], n: int) -> float:
    return collision_rate(policy, list(corpus[: min(n, len(corpus))]))


def _due_eval(state: TrainState) -> bool:
    cfg = state.cfg
    return cfg.eval_every > 0 and (state.step % cfg.eval_every == 0 or state.step == cfg.total_steps)


@dataclass
class TrainResult:
    state: TrainState
    log: list[dict]

    @property
    def checkpoint(self) -> Checkpoint:
        return self.state.to_checkpoint()


def _run(state, corpus, step_fn, header, out_dir, stop_after, ckpt_every, eval_corpus):
    cfg = state.cfg
    out = Path(out_dir) if out_dir else None
    resumed = state.step > 0
    logger = CsvLog(header, out / "train_log.csv" if out else None, append=resumed)
    end = cfg.total_steps if stop_after is None else min(stop_after, cfg.total_steps)
    eval_corpus = eval_corpus if eval_corpus is not None else corpus
    while state.step < end:
        row = step_fn(state, corpus)
        state.step += 1
        row["step"] = state.step
        row["col_rate_eval"] = _eval_col_rate(state.student, eval_corpus, cfg.eval_scenarios) if _due_eval(state) else None
        logger.write(row)
        log.debug("step %d %s", state.step, row)
        if out and ckpt_every and state.step % ckpt_every == 0:
            save_checkpoint(state.to_checkpoint(), out / f"checkpoint_{state.step:06d}.aspt")
    if out:
        save_checkpoint(state.to_checkpoint(), out / "final.aspt")
    return TrainResult(state, logger.rows)


# ---------------------------------------------------------------------------
# self-play


def _assert_disjoint(state: TrainState) -> None:
    t_ids = {id(p) for p in state.stores["teacher"].tensors()}
    s_ids = {id(p) for p in state.stores["student"].tensors()}
    assert not (t_ids & s_ids), "teacher and student share parameters"


def selfplay_step(state: TrainState, corpus: Sequence[Scenario]) -> dict:
    """One iteration: partition, paired rollouts, teacher and student losses, one update each."""
    cfg = state.cfg
    _assert_disjoint(state)
    scen = _sample_batch(state, corpus)
    parts = [sample_partition(s.num_actors, state.rngs["partition"], cfg.teacher_frac) for s in scen]
    batch = make_batch(scen).with_partitions(parts)
    coin = float(state.rngs["coin"].random())

    def build():
        pair = paired_rollouts(state.teacher, state.student, batch, coin, cfg.three_player, cfg.replay)
        return pair, teacher_return(pair, batch, cfg.objective), student_return(pair.mixed, batch, cfg.objective)

    pair, terms, ls = build()
    lt, ls = terms.loss.mean(), ls.mean()
    _check_finite(lt, "teacher loss", lambda: build()[1].loss.mean())
    _check_finite(ls, "student loss", lambda: build()[2].mean())
    g_t = grads_for(lt, state.stores["teacher"], retain_graph=True)
    g_s = grads_for(ls, state.stores["student"])
    lr = lr_at(state.step, cfg.total_steps, cfg.effective_warmup, cfg.lr_peak)
    _apply(state, "teacher", g_t, lr)
    _apply(state, "student", g_s, lr)
    return {
        "loss_teacher": float(lt.detach()),
        "loss_student": float(ls.detach()),
        "challenge": float(terms.challenge.detach().mean()),
        "solvable": float(terms.solvable.detach().mean()),
        "realism_demo": float(terms.realism_demo.detach().mean()),
        "realism_mixed": float(terms.realism_mixed.detach().mean()),
    }


def selfplay_train(
    corpus: Sequence[Scenario],
    cfg: TrainConfig,
    out_dir: Path | None = None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    ckpt_every: int = 0,
    eval_corpus: Sequence[Scenario] | None = None,
) -> TrainResult:
    """Asymmetric self-play; writes ``train_log.csv`` and checkpoints under ``out_dir``."""
    if not corpus:
        raise ValueError("empty corpus")
    state = TrainState.from_checkpoint(resume, cfg) if resume else TrainState("selfplay", cfg)
    return _run(state, corpus, selfplay_step, SELFPLAY_LOG_HEADER, out_dir, stop_after, ckpt_every, eval_corpus)


# ---------------------------------------------------------------------------
# closed-loop IL / TrafficSim


def il_loss(policy: DrivingPolicy, batch: SceneBatch, w_col: float, delta: float = 1.0, buffer: float = 0.2):
    """Closed-loop imitation loss with ``policy`` on every actor; returns (loss, realism, collision)."""
    am = batch.actor_mask & ~batch.scripted_mask
    replay = (batch.log_actions, batch.scripted_mask) if bool(batch.scripted_mask.any()) else None
    out = rollout(batch, [(PolicyController(policy), am)], replay=replay)
    real = realism_term(out.states, batch.log_future, am, delta).mean()
    col = collision_loss(out.states, batch.dims, batch.actor_mask, pair_mask(batch.actor_mask), buffer).mean()
    return real + w_col * col, real, col


def il_step(state: TrainState, corpus: Sequence[Scenario]) -> dict:
    cfg = state.cfg
    batch = make_batch(_sample_batch(state, corpus))
    loss, real, col = il_loss(state.student, batch, cfg.w_col, cfg.objective.huber_delta, cfg.objective.buffer)
    _check_finite(loss, "IL loss", lambda: il_loss(state.student, batch, cfg.w_col)[0])
    g = grads_for(loss, state.stores["student"])
    _apply(state, "student", g, lr_at(state.step, cfg.total_steps, cfg.effective_warmup, cfg.lr_peak))
    return {"loss": float(loss.detach()), "realism": float(real.detach()), "collision": float(col.detach())}


def il_train(
    corpus: Sequence[Scenario],
    cfg: TrainConfig,
    w_col: float | None = None,
    out_dir: Path | None = None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    ckpt_every: int = 0,
    init_student: DrivingPolicy | None = None,
    mode: str | None = None,
    eval_corpus: Sequence[Scenario] | None = None,
) -> TrainResult:
    """Closed-loop IL (``w_col = 0``) or TrafficSim (``w_col > 0``)."""
    if not corpus:
        raise ValueError("empty corpus")
    if w_col is not None:
        cfg = replace(cfg, w_col=w_col)
    mode = mode or ("trafficsim" if cfg.w_col > 0 else "il")
    if resume:
        state = TrainState.from_checkpoint(resume, cfg)
    else:
        state = TrainState(mode, cfg)
        if init_student is not None:
            state.student.load_state_dict(init_student.state_dict())
    return _run(state, corpus, il_step, IL_LOG_HEADER, out_dir, stop_after, ckpt_every, eval_corpus)


# ---------------------------------------------------------------------------
# curation baseline


def failure_flags(policy, corpus: Sequence[Scenario], min_colliding: int = 1) -> list[bool]:
    flags = []
    for sc in corpus:
        st, m = simulate(policy, sc)
        flags.append(int(exact_collision(st, sc.dims).sum()) >= min_colliding)
    return flags


def curate(corpus: Sequence[Scenario], policy, min_colliding: int = 1) -> list[Scenario]:
    """Scenarios where ``policy`` driving every actor produces at least one collision."""
    flags = failure_flags(policy, corpus, min_colliding)
    picked = [sc for sc, f in zip(corpus, flags) if f]
    if not picked:
        log.info("curation selected no scenarios")
    return picked


def curation_finetune(corpus: Sequence[Scenario], base: DrivingPolicy, cfg: TrainConfig, out_dir: Path | None = None) -> TrainResult | None:
    """Fine-tune ``base`` with closed-loop IL on its failure set (shorter run at reduced lr)."""
    subset = curate(corpus, base, cfg.curation_min_colliding)
    if not subset:
        return None
    steps = max(1, int(round(cfg.curation_step_frac * cfg.total_steps)))
    ft = replace(cfg, total_steps=steps, warmup_steps=min(cfg.warmup_steps, steps - 1), lr_peak=cfg.lr_peak * cfg.curation_lr_frac)
    return il_train(subset, ft, out_dir=out_dir, init_student=base, mode="curation", eval_corpus=corpus)


# ---------------------------------------------------------------------------
# KING attack


class _SequenceController:
    def __init__(self, actions: torch.Tensor):
        self.actions = actions

    def __call__(self, hist, t, batch):
        return self.actions[:, t]


@dataclass
class KingResult:
    actions: torch.Tensor  # (B, T - 1, N, 2), attacked actions of the teacher set
    feasible: list[bool]
    initial_collision: list[float]
    final_collision: list[float]
    states: torch.Tensor  # attacked rollout (B, T, N, 4)


def _clip_actions(a: torch.Tensor, u_max: float, phi_max: float) -> torch.Tensor:
    return torch.stack([a[..., 0].clamp(-u_max, u_max), a[..., 1].clamp(-phi_max, phi_max)], dim=-1)


def _adam_descent(var: torch.Tensor, loss_fn, steps: int, lr: float, project) -> None:
    opt = OptState.zeros_like(ParamStore({"a": var}), lr_peak=lr, weight_decay=0.0)
    store = ParamStore({"a": var})
    for _ in range(steps):
        loss = loss_fn()
        (g,) = torch.autograd.grad(loss, [var])
        optimizer_step(store, {"a": g}, opt, lr)
        with torch.no_grad():
            var.copy_(project(var))


def king_attack_batch(batch: SceneBatch, frozen_policy: DrivingPolicy, cfg: TrainConfig) -> KingResult:
    """Gradient attack on the teacher-set action sequences of a partitioned batch.

    ``L_adv = -10 coll + dist + realism(teacher set)`` is minimised over the
    adversaries' actions (starting from the log) while ``frozen_policy``
    drives the student set. A repair phase then optimises perturbations of
    the student-set actions against collisions to decide feasibility.
    """
    if batch.teacher_mask is None:
        raise ValueError("batch has no partition")
    pc = cfg.policy
    tm, sm = batch.teacher_mask & batch.actor_mask, batch.student_mask
    oc = cfg.objective
    for p in frozen_policy.parameters():
        p.requires_grad_(False)
    try:
        adv = batch.log_actions.clone().requires_grad_(True)
        stu = PolicyController(frozen_policy)

        def attacked():
            return rollout(batch, [(_SequenceController(adv), tm), (stu, sm)])

        def coll(states):
            return collision_loss(states, batch.dims, batch.actor_mask, pair_mask(batch.actor_mask, tm), oc.buffer)

        def l_adv():
            st = attacked().states
            return (-10.0 * coll(st) + distance_loss(st, tm, batch.targets) + realism_term(st, batch.log_future, tm, oc.huber_delta)).sum()

        with torch.no_grad():
            init_col = coll(attacked().states)
        if cfg.king_steps > 0:
            _adam_descent(adv, l_adv, cfg.king_steps, cfg.king_step_size, lambda a: _clip_actions(a, pc.u_max, pc.phi_max))
        with torch.no_grad():
            base = attacked()
        attacked_actions = adv.detach()

        # feasibility repair: perturb student-set actions to remove all collisions
        delta = torch.zeros_like(attacked_actions, requires_grad=True)
        base_actions = base.actions.detach()

        def repaired():
            acts = torch.where(sm[:, None, :, None], _clip_actions(base_actions + delta, pc.u_max, pc.phi_max), attacked_actions)
            return rollout(batch, [(_SequenceController(acts), batch.actor_mask)])

        def l_rep():
            return collision_loss(repaired().states, batch.dims, batch.actor_mask, pair_mask(batch.actor_mask), oc.buffer).sum()

        if cfg.king_repair_steps > 0:
            _adam_descent(delta, l_rep, cfg.king_repair_steps, 0.1, lambda d: d)
        with torch.no_grad():
            rep = repaired().states.numpy()
        feasible = []
        for k, sc in enumerate(batch.scenarios):
            n = sc.num_actors
            feasible.append(not bool(exact_collision(rep[k, :, :n], sc.dims).any()))
        return KingResult(attacked_actions, feasible, init_col.tolist(), coll(base.states).tolist(), base.states.detach())
    finally:
        for p in frozen_policy.parameters():
            p.requires_grad_(True)


def king_attack(scenario: Scenario, frozen_policy: DrivingPolicy, partition: Partition, cfg: TrainConfig) -> tuple[torch.Tensor, bool]:
    """Attack one scenario; returns the attacked teacher-set actions ``(T-1, N, 2)`` and the feasibility verdict."""
    batch = make_batch([scenario]).with_partitions([partition])
    res = king_attack_batch(batch, frozen_policy, cfg)
    return res.actions[0], res.feasible[0]


def attacked_scenarios(batch: SceneBatch, res: KingResult) -> list[Scenario]:
    """Turn a KING result into scripted scenarios: attackers replay their attacked trajectories."""
    out = []
    states = res.states.numpy()
    acts = res.actions.numpy()
    tm = batch.teacher_mask.numpy()
    for k, sc in enumerate(batch.scenarios):
        n = sc.num_actors
        fut = sc.logged_future.copy()
        la = sc.logged_actions.copy()
        scripted = tm[k, :n].copy()
        fut[:, scripted] = states[k, :, :n][:, scripted]
        la[:, scripted] = acts[k, :, :n][:, scripted]
        out.append(replace(sc, logged_future=fut, logged_actions=la, scripted=scripted, kind="adversarial", name=sc.name + "_king"))
    return out


# ---------------------------------------------------------------------------
# gradient check of the full student loss


def gradcheck_scene(seed: int, n_actors: int = 4, horizon: int = 12, history: int = 3) -> Scenario:
    """Small, crowded straight-road scene so collision and realism terms are both active."""
    rng = named_rng(seed, "gradcheck")
    graph = build_highway_map(2, 300.0, 0.0, 10.0)
    init = np.zeros((n_actors, 4))
    init[:, 0] = 50.0 + rng.uniform(0.0, 25.0, n_actors)
    init[:, 1] = rng.choice([0.0, 3.7], n_actors) + rng.normal(0.0, 0.3, n_actors)
    init[:, 2] = rng.normal(0.0, 0.03, n_actors)
    init[:, 3] = rng.uniform(10.0, 20.0, n_actors)
    length = rng.uniform(4.3, 4.8, n_actors)
    dims = np.stack([length, rng.uniform(1.9, 2.0, n_actors), 0.6 * length], axis=1)
    actions = np.zeros((history + horizon - 2, n_actors, 2))
    actions[..., 0] = rng.uniform(-1.0, 1.0, (history + horizon - 2, n_actors))
    actions[..., 1] = rng.uniform(-0.02, 0.02, (history + horizon - 2, n_actors))
    states = [init]
    for a in actions:
        states.append(step_numpy(states[-1], a, dims[:, 2], 0.5))
    states = np.stack(states)
    return Scenario(graph, states[:history], dims, states[history - 1 :], actions[history - 1 :], name=f"gradcheck{seed}")


@dataclass
class GradcheckResult:
    seed: int
    rel_error: float
    loss: float
    num_coords: int


def student_loss_gradcheck(
    seed: int,
    n_coords: int = 8,
    n_dirs: int = 2,
    h: float = 1e-5,
    policy_cfg: PolicyConfig | None = None,
    objective: ObjectiveConfig | None = None,
) -> GradcheckResult:
    """BPTT gradient of the student loss vs central differences on one random partitioned scene.

    Checks ``n_coords`` random parameter coordinates plus ``n_dirs`` random
    directions; the error is norm-wise relative over all checked entries.
    """
    oc = objective or ObjectiveConfig()
    rng = named_rng(seed, "gradcheck_params")
    sc = gradcheck_scene(seed)
    batch = make_batch([sc]).with_partitions([sample_partition(sc.num_actors, rng, 0.5)])
    init = named_rng(seed, "init")
    t_seed, s_seed = (int(v) for v in init.integers(0, 2**31, 2))
    pcfg = policy_cfg or PolicyConfig()
    teacher = Teacher(pcfg, seed=t_seed, zero_init_head=False)
    student = make_student(pcfg, seed=s_seed, zero_init_head=False)
    store = ParamStore.from_module(student)

    # the teacher's part of the mixed rollout is a constant replay of the teacher-only rollout
    with torch.no_grad():
        fixed_demo = paired_rollouts(teacher, student, batch, 0.0).demo

    def loss_fn():
        mixed = rollout(batch, [(PolicyController(student), batch.student_mask)], replay=(fixed_demo.actions, batch.teacher_mask & batch.actor_mask))
        return student_return(mixed, batch, oc).sum()

    loss = loss_fn()
    grads = grads_for(loss, store)
    flat_g = torch.cat([grads[n].reshape(-1) for n in store.names()])
    flat0 = store.flat()
    total = flat0.numel()
    coords = rng.choice(total, size=n_coords, replace=False)
    analytic, numeric = [], []

    def at(x):
        store.load_flat(x)
        with torch.no_grad():
            return float(loss_fn())

    for c in coords:
        e = torch.zeros(total)
        e[int(c)] = h
        numeric.append((at(flat0 + e) - at(flat0 - e)) / (2.0 * h))
        analytic.append(float(flat_g[int(c)]))
    for _ in range(n_dirs):
        d = torch.as_tensor(rng.standard_normal(total))
        d = d / d.norm()
        numeric.append((at(flat0 + h * d) - at(flat0 - h * d)) / (2.0 * h))
        analytic.append(float(flat_g @ d))
    store.load_flat(flat0)
    a, n = np.array(analytic), np.array(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return GradcheckResult(seed, float(np.linalg.norm(a - n) / scale), float(loss.detach()), len(analytic))
