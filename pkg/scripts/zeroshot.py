"""Zero-shot teacher attack on a naive lane follower: trained vs untrained teacher.

The trained teacher comes from a finished self-play run (``--teacher``, or the
seed-0 run under ``--runs`` if present); otherwise one is trained under the
shared budget. Results go to ``<out>/zeroshot.json``.

    python scripts/zeroshot.py --out runs/zeroshot --runs runs/baselines
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from common import HELDOUT_SEED, N_HELDOUT, corpora, setup, train

from asymplay.evalkit import ZeroShotConfig, zero_shot_attack_eval
from asymplay.policy import PolicyConfig, Teacher
from asymplay.simkit import LaneFollowerController, generate_corpus
from asymplay.trainer import load_checkpoint


def run(out: Path, teacher: Path | None = None, runs: Path | None = None, seed: int = 0) -> dict:
    t0 = time.time()
    if teacher is None and runs is not None and (runs / "selfplay_s0" / "final.aspt").exists():
        teacher = runs / "selfplay_s0" / "final.aspt"
    if teacher is None:
        teacher = out / "selfplay_s0" / "final.aspt"
        if not teacher.exists():
            train("selfplay", 0, corpora()["train"], teacher.parent)
    trained = load_checkpoint(teacher)
    untrained = Teacher(PolicyConfig(**trained.policy_config), seed=12345)
    scenarios = generate_corpus(N_HELDOUT, HELDOUT_SEED, 4, 8)
    cfg = ZeroShotConfig(seed=seed)
    rate = {}
    for name, t in (("trained", trained), ("untrained", untrained)):
        rate[name] = zero_shot_attack_eval(t, LaneFollowerController(), scenarios, cfg).ego_collision_rate
    res = {
        "teacher_checkpoint": str(teacher),
        "ego_collision_rate": rate,
        "num_scenarios": len(scenarios),
        "trained_beats_untrained": rate["trained"] > rate["untrained"],
        "wall_seconds": time.time() - t0,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "zeroshot.json").write_text(json.dumps(res, indent=1, sort_keys=True))
    return res


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/zeroshot")
    p.add_argument("--teacher", type=Path)
    p.add_argument("--runs", type=Path, default=Path("runs/baselines"))
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    setup()
    print(json.dumps(run(Path(a.out), a.teacher, a.runs, a.seed), indent=1))


if __name__ == "__main__":
    main()
