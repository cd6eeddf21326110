"""Baseline ordering at desk scale: closed-loop IL vs TrafficSim vs self-play, three seeds.

Judged on seed medians: safety-set collision rate must order
self-play < TrafficSim < IL, and self-play nominal FDE must stay within
1.5x of IL's. Results go to ``<out>/baselines.json``.

    python scripts/baselines.py --out runs/baselines
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from common import adversarial_set, corpora, median, run_method, setup

METHODS = ("il", "trafficsim", "selfplay")


def verdict(rows: list[dict]) -> dict:
    by = {m: [r for r in rows if r["method"] == m] for m in METHODS}
    col = {m: median(by[m], "safety", "collision_pct") for m in METHODS}
    fde = {m: median(by[m], "nominal", "fde") for m in METHODS}
    return {
        "safety_collision_median": col,
        "nominal_fde_median": fde,
        "adversarial_collision_median": {m: median(by[m], "adversarial", "collision_pct") for m in METHODS},
        "ordering_holds": col["selfplay"] < col["trafficsim"] < col["il"],
        "fde_ratio": fde["selfplay"] / fde["il"],
        "fde_within_budget": fde["selfplay"] <= 1.5 * fde["il"],
    }


def run(out: Path, seeds=(0, 1, 2), reuse: bool = False) -> dict:
    t0 = time.time()
    data = corpora()
    eval_sets = {
        "nominal": data["nominal"],
        "safety": data["safety"],
        "adversarial": adversarial_set(data["train"], data["nominal"], out / "adversarial_corpus"),
    }
    rows = [run_method(m, s, data, eval_sets, out, reuse) for s in seeds for m in METHODS]
    res = {"rows": rows, **verdict(rows), "wall_seconds": time.time() - t0}
    out.mkdir(parents=True, exist_ok=True)
    (out / "baselines.json").write_text(json.dumps(res, indent=1, sort_keys=True))
    return res


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/baselines")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--reuse", action="store_true", help="skip runs whose metrics.json already exists")
    a = p.parse_args()
    setup()
    res = run(Path(a.out), tuple(a.seeds), a.reuse)
    print(json.dumps({k: v for k, v in res.items() if k != "rows"}, indent=1))


if __name__ == "__main__":
    main()
