"""Shared pieces of the desk-scale experiments: corpora, budgeted training, evaluation."""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import replace
from pathlib import Path

import asymplay  # noqa: F401  (float64 default dtype)
from asymplay.diffcore import named_rng, set_single_thread
from asymplay.objectives import ObjectiveConfig
from asymplay.evalkit import evaluate, generate_safety_corpus, write_report
from asymplay.simkit import generate_corpus, load_corpus, make_batch, sample_partition, save_corpus
from asymplay.trainer import TrainConfig, attacked_scenarios, il_train, king_attack_batch, save_checkpoint, selfplay_train

log = logging.getLogger("experiments")

# corpus seeds are fixed across all experiments so every method sees the same data
TRAIN_SEED, HELDOUT_SEED, SAFETY_SEED, ADV_SEED = 0, 1, 2, 3
N_TRAIN, N_HELDOUT, N_SAFETY = 200, 50, 50

# training budget shared by every method (see the decisions ledger for the choice)
BUDGET = dict(total_steps=400, warmup_steps=40, batch_size=8, lr_peak=3e-4, eval_every=0)
TRAFFICSIM_W_COL = 2.0
# self-play objective overrides on top of the package defaults (none); the ablations start from it too
SELFPLAY_OBJECTIVE: dict = {}
BETA = ObjectiveConfig().beta
OBJECTIVE_KEYS = ("beta", "student_beta", "w_challenge", "w_solvable", "lambda_dist")


def corpora() -> dict:
    return {
        "train": generate_corpus(N_TRAIN, TRAIN_SEED, 4, 8),
        "nominal": generate_corpus(N_HELDOUT, HELDOUT_SEED, 4, 8),
        "safety": generate_safety_corpus(N_SAFETY, SAFETY_SEED, 4, 8),
    }


def adversarial_set(train_corpus, heldout, cache: Path | None, king_steps: int = 50, batch_size: int = 10) -> list:
    """KING-attacked copies of the held-out scenarios, built once and frozen.

    The attacked reference is a closed-loop IL policy trained under the shared
    budget with its own seed, so every evaluated method faces the same scenes.
    """
    if cache is not None and (cache / "manifest.json").exists():
        return load_corpus(cache)
    ref = train("il", ADV_SEED, train_corpus, None).state.student
    cfg = TrainConfig(king_steps=king_steps, king_repair_steps=0, seed=ADV_SEED)
    rng = named_rng(ADV_SEED, "partition")
    parts = [sample_partition(s.num_actors, rng, cfg.teacher_frac) for s in heldout]
    out = []
    for i in range(0, len(heldout), batch_size):
        batch = make_batch(heldout[i : i + batch_size]).with_partitions(parts[i : i + batch_size])
        out += attacked_scenarios(batch, king_attack_batch(batch, ref, cfg))
    if cache is not None:
        save_corpus(out, cache, ADV_SEED, {"attack": "king", "king_steps": king_steps, "reference": "closed-loop IL"})
    return out


def train(method: str, seed: int, corpus, out: Path | None, **overrides):
    """Train one method under the shared budget; returns the ``TrainResult``."""
    cfg = TrainConfig(seed=seed, **BUDGET)
    obj = dict(SELFPLAY_OBJECTIVE) if method == "selfplay" else {}
    obj.update({k: overrides.pop(k) for k in OBJECTIVE_KEYS if k in overrides})
    if obj:
        cfg = replace(cfg, objective=replace(cfg.objective, **obj))
    cfg = replace(cfg, **overrides)
    if method == "selfplay":
        return selfplay_train(corpus, cfg, out_dir=out)
    if method == "il":
        return il_train(corpus, cfg, w_col=0.0, out_dir=out)
    if method == "trafficsim":
        return il_train(corpus, cfg, w_col=cfg.w_col or TRAFFICSIM_W_COL, out_dir=out)
    raise ValueError(method)


def evaluate_sets(policy, sets: dict, out: Path | None) -> dict:
    res = {}
    for name, corpus in sets.items():
        rep = evaluate(policy, corpus)
        if out is not None:
            write_report(rep, out, f"{name}_metrics")
        res[name] = {"fde": rep.fde, "collision_pct": rep.collision_pct, "offroad_pct": rep.offroad_pct, "jsd": rep.jsd_composite}
    return res


def run_method(method: str, seed: int, data: dict, eval_sets: dict, root: Path, reuse: bool = False, **overrides) -> dict:
    """Train (or reuse a finished run) and evaluate; the metrics land in ``root/<method>_s<seed>/``."""
    tag = method + "".join(f"_{k}{v:g}" for k, v in sorted(overrides.items())) + f"_s{seed}"
    out = root / tag
    done = out / "metrics.json"
    if reuse and done.exists():
        row = json.loads(done.read_text())
        if all(k in row for k in eval_sets):
            return row
    t0 = time.time()
    res = train(method, seed, data["train"], out, **overrides)
    train_time = time.time() - t0
    metrics = evaluate_sets(res.state.student, eval_sets, out)
    row = {"method": method, "seed": seed, "overrides": overrides, "train_seconds": train_time, **metrics}
    out.mkdir(parents=True, exist_ok=True)
    done.write_text(json.dumps(row, indent=1, sort_keys=True))
    log.info("%s: %.0f s, %s", tag, train_time, json.dumps(metrics))
    return row


def median(rows: list[dict], split: str, key: str) -> float:
    return statistics.median(r[split][key] for r in rows)


def setup() -> None:
    set_single_thread()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")


def save_checkpoint_of(res, path: Path) -> None:
    save_checkpoint(res.state.to_checkpoint(), path)
