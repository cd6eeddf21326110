"""Teacher-loss ablations: drop the solvability term, or drop realism (beta = 0).

Reuses the full self-play runs of ``baselines.py`` when pointed at the same
output root. Judged on seed medians against the full method:
nominal FDE with ``w_solvable = 0`` is at least the full method's, and
safety-set collision rate with ``beta = 0`` is at least the full method's.

    python scripts/ablations.py --out runs/baselines
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from common import BETA, corpora, median, run_method, setup

# both ablations change the teacher loss only; the student keeps its realism weight
VARIANTS = {"full": {}, "no_solvable": {"w_solvable": 0.0}, "no_realism": {"beta": 0.0, "student_beta": BETA}}


def run(out: Path, seeds=(0, 1, 2), reuse: bool = True) -> dict:
    t0 = time.time()
    data = corpora()
    eval_sets = {"nominal": data["nominal"], "safety": data["safety"]}
    rows = {v: [run_method("selfplay", s, data, eval_sets, out, reuse, **o) for s in seeds] for v, o in VARIANTS.items()}
    fde = {v: median(r, "nominal", "fde") for v, r in rows.items()}
    col = {v: median(r, "safety", "collision_pct") for v, r in rows.items()}
    res = {
        "rows": rows,
        "nominal_fde_median": fde,
        "safety_collision_median": col,
        "solvable_ablation_holds": fde["no_solvable"] >= fde["full"],
        "realism_ablation_holds": col["no_realism"] >= col["full"],
        "wall_seconds": time.time() - t0,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablations.json").write_text(json.dumps(res, indent=1, sort_keys=True))
    return res


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/baselines")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--fresh", action="store_true", help="retrain even when a finished run exists")
    a = p.parse_args()
    setup()
    res = run(Path(a.out), tuple(a.seeds), reuse=not a.fresh)
    print(json.dumps({k: v for k, v in res.items() if k != "rows"}, indent=1))


if __name__ == "__main__":
    main()
