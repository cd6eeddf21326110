"""Command-line interface: ``asymplay {gen-data,train,eval,attack,gradcheck,report}``.

Config files are flat JSON objects whose keys mirror the long flags
(``--lr-peak`` <-> ``lr_peak``). Flags override file values and every run
writes ``resolved_config.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

_TRAIN_KEYS = ("total_steps", "warmup_steps", "batch_size", "lr_peak", "teacher_frac", "seed", "eval_every", "eval_scenarios", "grad_clip", "weight_decay", "w_col", "king_steps", "king_step_size", "king_repair_steps", "curation_min_colliding", "curation_step_frac", "curation_lr_frac")
_OBJECTIVE_KEYS = ("beta", "w_challenge", "w_solvable", "lambda_dist", "huber_delta", "buffer", "student_beta")
_POLICY_KEYS = ("hidden_dim", "num_blocks", "num_heads", "history_len", "knn_k", "ffn_mult", "decoder_hidden", "map_rounds", "init_std")


class UsageError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("SELFPLAY_LOG", "error").lower()
    if level not in ("error", "info", "debug"):
        raise UsageError(f"SELFPLAY_LOG must be one of error, info, debug (got {level!r})")
    logging.basicConfig(level=getattr(logging, level.upper()), format="%(levelname)s %(name)s: %(message)s")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _workers(n: int) -> int:
    if n < 1:
        raise UsageError("--workers must be >= 1")
    if n == 1:
        from asymplay.diffcore import set_single_thread

        set_single_thread()
    return n


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    from asymplay.evalkit import generate_safety_corpus
    from asymplay.simkit import MAP_PRESETS, generate_corpus, save_corpus

    if args.scenarios < 1:
        raise UsageError("--scenarios must be >= 1")
    if args.actors_min < 1 or args.actors_max < args.actors_min:
        raise UsageError("need 1 <= --actors-min <= --actors-max")
    if args.map_preset not in MAP_PRESETS:
        raise UsageError(f"--map-preset must be one of {MAP_PRESETS}")
    _workers(args.workers)
    cfg = {
        "scenarios": args.scenarios,
        "actors_min": args.actors_min,
        "actors_max": args.actors_max,
        "map_preset": args.map_preset,
        "seed": args.seed,
        "kind": args.kind,
        "history": args.history,
        "horizon": args.horizon,
    }
    if args.kind == "safety":
        if args.actors_min < 2:
            raise UsageError("safety scenarios need --actors-min >= 2")
        corpus = generate_safety_corpus(args.scenarios, args.seed, args.actors_min, args.actors_max, args.history, args.horizon)
    else:
        corpus = generate_corpus(args.scenarios, args.seed, args.actors_min, args.actors_max, args.map_preset, args.history, args.horizon)
    out = Path(args.out)
    save_corpus(corpus, out, args.seed, cfg)
    _write_json(out / "resolved_config.json", {"command": "gen-data", **cfg})
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def resolve_train_config(args) -> dict:
    """Merge the JSON config file with explicit flags (flags win)."""
    values: dict = {}
    if args.config:
        values.update(json.loads(Path(args.config).read_text()))
    known = set(_TRAIN_KEYS) | set(_OBJECTIVE_KEYS) | set(_POLICY_KEYS) | {"three_player", "replay", "mode"}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for k in _TRAIN_KEYS + _OBJECTIVE_KEYS + _POLICY_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    if args.ablate_solvable:
        values["w_solvable"] = 0.0
    if args.ablate_realism:
        # teacher-loss ablation: the student keeps its realism weight
        from asymplay.objectives import ObjectiveConfig

        if values.get("student_beta") is None:
            values["student_beta"] = values.get("beta", ObjectiveConfig.beta)
        values["beta"] = 0.0
    if args.fairplay is not None:
        parts = {p for p in args.fairplay.split(",") if p and p != "none"}
        if parts - {"3player", "replay"}:
            raise UsageError("--fairplay takes a comma list from {3player, replay, none}")
        values["three_player"] = "3player" in parts
        values["replay"] = "replay" in parts
    values["mode"] = args.mode
    return values


def build_train_config(values: dict):
    from asymplay.objectives import ObjectiveConfig
    from asymplay.policy import PolicyConfig
    from asymplay.trainer import TrainConfig

    tc = {k: values[k] for k in _TRAIN_KEYS if k in values}
    oc = ObjectiveConfig(**{k: values[k] for k in _OBJECTIVE_KEYS if k in values})
    pc = PolicyConfig(**{k: values[k] for k in _POLICY_KEYS if k in values})
    for k in ("three_player", "replay"):
        if k in values:
            tc[k] = bool(values[k])
    return TrainConfig(objective=oc, policy=pc, **tc)


def cmd_train(args) -> int:
    from asymplay.simkit import load_corpus
    from asymplay.trainer import MODES, curation_finetune, il_train, load_checkpoint, selfplay_train, student_from_checkpoint

    if args.mode not in MODES:
        raise UsageError(f"--mode must be one of {MODES}")
    _workers(args.workers)
    values = resolve_train_config(args)
    if args.mode == "il":
        values["w_col"] = 0.0
    cfg = build_train_config(values)
    out = Path(args.out)
    corpus = load_corpus(Path(args.corpus))
    eval_corpus = load_corpus(Path(args.eval_corpus)) if args.eval_corpus else None
    resume = load_checkpoint(Path(args.resume)) if args.resume else None
    _write_json(out / "resolved_config.json", {"command": "train", "corpus": str(args.corpus), **values, "resolved": cfg.to_dict()})
    if args.mode == "selfplay":
        selfplay_train(corpus, cfg, out_dir=out, resume=resume, ckpt_every=args.ckpt_every, eval_corpus=eval_corpus)
    elif args.mode in ("il", "trafficsim"):
        il_train(corpus, cfg, out_dir=out, resume=resume, ckpt_every=args.ckpt_every, mode=args.mode, eval_corpus=eval_corpus)
    else:
        if not args.base:
            raise UsageError("--mode curation needs --base CHECKPOINT (a trained IL model)")
        base = student_from_checkpoint(load_checkpoint(Path(args.base)))
        if curation_finetune(corpus, base, cfg, out_dir=out) is None:
            logging.getLogger("asymplay.cli").info("curation found no failures; nothing to fine-tune")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / attack


def _policy_from_args(args):
    from asymplay.simkit import CoastController, LaneFollowerController, LogReplayController
    from asymplay.trainer import load_checkpoint, student_from_checkpoint

    scripted = {
        "log-replay": LogReplayController,
        "coast": CoastController,
        "lane-follower": LaneFollowerController,
        "idm": lambda: LaneFollowerController(idm=True),
    }
    if args.checkpoint:
        return student_from_checkpoint(load_checkpoint(Path(args.checkpoint)))
    if args.policy in scripted:
        return scripted[args.policy]()
    raise UsageError("give --checkpoint or --policy {log-replay,coast,lane-follower,idm}")


def cmd_eval(args) -> int:
    from asymplay.evalkit import evaluate, write_report
    from asymplay.simkit import load_corpus

    _workers(args.workers)
    policy = _policy_from_args(args)
    corpus = load_corpus(Path(args.corpus))
    report = evaluate(policy, corpus, workers=args.workers)
    out = Path(args.out)
    write_report(report, out, args.stem)
    _write_json(out / "resolved_config.json", {"command": "eval", "corpus": str(args.corpus), "checkpoint": args.checkpoint, "policy": args.policy, "stem": args.stem})
    return EXIT_OK


def cmd_attack(args) -> int:
    from asymplay.diffcore import named_rng
    from asymplay.evalkit import ZeroShotConfig, write_report, zero_shot_attack_eval
    from asymplay.simkit import load_corpus, make_batch, sample_partition, save_corpus
    from asymplay.trainer import TrainConfig, attacked_scenarios, king_attack_batch, load_checkpoint, student_from_checkpoint

    _workers(args.workers)
    corpus = load_corpus(Path(args.corpus))
    out = Path(args.out)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    if args.kind == "zeroshot":
        if not args.teacher:
            raise UsageError("--kind zeroshot needs --teacher CHECKPOINT")
        res = zero_shot_attack_eval(load_checkpoint(Path(args.teacher)), _policy_from_args(args), corpus, ZeroShotConfig(args.teacher_frac, args.seed))
        write_report(res.report, out, "zeroshot_metrics")
        _write_json(out / "outcomes.json", {"ego_collision_rate": res.ego_collision_rate, "outcomes": [o.__dict__ for o in res.outcomes]})
    else:
        if not args.checkpoint:
            raise UsageError("--kind king needs --checkpoint (the frozen policy to attack)")
        policy = student_from_checkpoint(load_checkpoint(Path(args.checkpoint)))
        cfg = TrainConfig(king_steps=args.steps, king_step_size=args.step_size, king_repair_steps=args.repair_steps, seed=args.seed)
        rng = named_rng(args.seed, "partition")
        parts = [sample_partition(s.num_actors, rng, args.teacher_frac) for s in corpus]
        attacked, verdicts = [], []
        for i in range(0, len(corpus), args.batch_size):
            batch = make_batch(corpus[i : i + args.batch_size]).with_partitions(parts[i : i + args.batch_size])
            res = king_attack_batch(batch, policy, cfg)
            attacked += attacked_scenarios(batch, res)
            verdicts += [
                {"name": sc.name, "feasible": f, "initial_collision": a, "final_collision": b}
                for sc, f, a, b in zip(batch.scenarios, res.feasible, res.initial_collision, res.final_collision)
            ]
        save_corpus(attacked, out / "corpus", args.seed, {"source": str(args.corpus), "attack": "king"})
        _write_json(out / "verdicts.json", verdicts)
    _write_json(out / "resolved_config.json", {"command": "attack", **resolved})
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / report


def cmd_gradcheck(args) -> int:
    from asymplay.trainer import student_loss_gradcheck

    _workers(1)
    results = [student_loss_gradcheck(s) for s in range(args.seed, args.seed + args.seeds)]
    worst = max(r.rel_error for r in results)
    payload = {"tolerance": args.tolerance, "max_rel_error": worst, "results": [r.__dict__ for r in results]}
    if args.out:
        _write_json(Path(args.out) / "gradcheck.json", payload)
        _write_json(Path(args.out) / "resolved_config.json", {"command": "gradcheck", "seeds": args.seeds, "seed": args.seed, "tolerance": args.tolerance})
    print(f"max relative error {worst:.3e} over {len(results)} seeds (tolerance {args.tolerance:g})")
    return EXIT_OK if worst < args.tolerance else EXIT_RUNTIME


def _merge_logs(log_dirs: list[Path], out: Path) -> None:
    rows = []
    for d in log_dirs:
        path = d / "train_log.csv"
        if not path.exists():
            raise FileNotFoundError(path)
        with open(path) as f:
            for r in csv.DictReader(f):
                rows.append({"run": d.name, **r})
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def cmd_report(args) -> int:
    from asymplay.evalkit import MetricsReport, pareto_table

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.logs:
        _merge_logs([Path(p) for p in args.logs], out / "training_curves.csv")
    if args.pareto:
        sweep = Path(args.pareto)
        if not sweep.is_dir():
            raise FileNotFoundError(sweep)

        def load(d: Path):
            return (
                MetricsReport.from_dict(json.loads((d / "nominal_metrics.json").read_text())),
                MetricsReport.from_dict(json.loads((d / "safety_metrics.json").read_text())),
            )

        points = []
        for d in sorted(sweep.glob("w_col_*")):
            nom, saf = load(d)
            points.append((float(d.name[len("w_col_") :]), nom, saf))
        points.sort(key=lambda p: p[0])
        table = pareto_table(points, load(sweep / "selfplay"))
        table.write_csv(out / "pareto.csv")
    _write_json(out / "resolved_config.json", {"command": "report", "logs": args.logs, "pareto": args.pareto})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asymplay", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scenario corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--scenarios", type=int, default=200)
    g.add_argument("--actors-min", type=int, default=4)
    g.add_argument("--actors-max", type=int, default=8)
    g.add_argument("--map-preset", default="mixed")
    g.add_argument("--kind", choices=("nominal", "safety"), default="nominal")
    g.add_argument("--history", type=int, default=3)
    g.add_argument("--horizon", type=int, default=12)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="self-play, closed-loop IL, TrafficSim or curation training")
    t.add_argument("--mode", required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--eval-corpus")
    t.add_argument("--resume")
    t.add_argument("--base", help="IL checkpoint to fine-tune in curation mode")
    t.add_argument("--ckpt-every", type=int, default=0)
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--ablate-solvable", action="store_true")
    t.add_argument("--ablate-realism", action="store_true")
    t.add_argument("--fairplay", help="comma list of enabled mechanisms: 3player,replay (or none)")
    t.add_argument("--w-col", type=float, dest="w_col")
    t.add_argument("--steps", type=int, dest="total_steps")
    t.add_argument("--lr", type=float, dest="lr_peak")
    for k in _TRAIN_KEYS + _OBJECTIVE_KEYS + _POLICY_KEYS:
        if k in ("w_col", "total_steps", "lr_peak"):
            continue
        ints = ("warmup_steps", "batch_size", "seed", "eval_every", "eval_scenarios", "king_steps", "king_repair_steps", "curation_min_colliding")
        typ = int if k in ints + _POLICY_KEYS[:-1] else float
        t.add_argument("--" + k.replace("_", "-"), type=typ, dest=k)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="closed-loop metrics of a checkpoint or scripted policy")
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--policy")
    e.add_argument("--stem", default="metrics")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attack", help="KING attack on a frozen policy, or zero-shot teacher attack")
    a.add_argument("--kind", choices=("king", "zeroshot"), default="king")
    a.add_argument("--corpus", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--checkpoint")
    a.add_argument("--policy", default="lane-follower")
    a.add_argument("--teacher")
    a.add_argument("--steps", type=int, default=200)
    a.add_argument("--step-size", type=float, default=1e-2)
    a.add_argument("--repair-steps", type=int, default=50)
    a.add_argument("--batch-size", type=int, default=16)
    a.add_argument("--teacher-frac", type=float, default=0.3)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--workers", type=int, default=1)
    a.set_defaults(func=cmd_attack)

    c = sub.add_parser("gradcheck", help="BPTT vs finite-difference check of the student loss")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="merge training logs and build the Pareto table")
    r.add_argument("--out", required=True)
    r.add_argument("--logs", nargs="*")
    r.add_argument("--pareto")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        _setup_logging()
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
