"""Pareto sweep: TrafficSim over collision weights {0, 0.5, 1, 2, 5} against the self-play point.

Writes the sweep layout read by ``asymplay report --pareto`` and the table
itself to ``<out>/pareto.csv``. Optional; not part of the acceptance suite.

    python scripts/pareto.py --out runs/pareto --runs runs/baselines
"""

from __future__ import annotations

import argparse
import json
import shutil
from pathlib import Path

from common import corpora, run_method, setup

from asymplay.evalkit import MetricsReport, pareto_table

WEIGHTS = (0.0, 0.5, 1.0, 2.0, 5.0)


def _load(d: Path):
    return tuple(MetricsReport.from_dict(json.loads((d / f"{s}_metrics.json").read_text())) for s in ("nominal", "safety"))


def run(out: Path, seed: int = 0, runs: Path | None = None) -> dict:
    data = corpora()
    eval_sets = {"nominal": data["nominal"], "safety": data["safety"]}
    root = runs or out
    points = []
    for w in WEIGHTS:
        method = "il" if w == 0 else "trafficsim"
        kw = {} if w == 0 else {"w_col": w}
        run_method(method, seed, data, eval_sets, root, reuse=True, **kw)
        src = root / (method + "".join(f"_{k}{v:g}" for k, v in kw.items()) + f"_s{seed}")
        dst = out / f"w_col_{w:g}"
        dst.mkdir(parents=True, exist_ok=True)
        for s in ("nominal", "safety"):
            shutil.copy(src / f"{s}_metrics.json", dst / f"{s}_metrics.json")
        points.append((w, *_load(dst)))
    run_method("selfplay", seed, data, eval_sets, root, reuse=True)
    sp = out / "selfplay"
    sp.mkdir(parents=True, exist_ok=True)
    for s in ("nominal", "safety"):
        shutil.copy(root / f"selfplay_s{seed}" / f"{s}_metrics.json", sp / f"{s}_metrics.json")
    table = pareto_table(points, _load(sp))
    table.write_csv(out / "pareto.csv")
    return {"rows": table.rows, "selfplay_dominated": table.selfplay_dominated}


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/pareto")
    p.add_argument("--runs", type=Path, help="root holding finished runs to reuse (e.g. runs/baselines)")
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    setup()
    print(json.dumps(run(Path(a.out), a.seed, a.runs), indent=1))


if __name__ == "__main__":
    main()
