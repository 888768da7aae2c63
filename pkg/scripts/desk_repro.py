"""Desk-scale reproduction: gen -> teacher -> plain -> kd -> cm -> table1 summary.

    python scripts/desk_repro.py --config configs/desk.ini --out runs/desk

Each step goes through the ``csi-mimic`` command line, so this doubles as an
end-to-end exercise of the CLI. Finished steps are skipped on rerun.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from csi_mimic.cli import main as cli
from csi_mimic.config import load_config
from csi_mimic.metrics import ExperimentReport, render_table

BUDGET_SECONDS = 30 * 60


def step(name: str, argv: list[str], done: Path, timings: dict) -> None:
    if done.exists():
        print(f"[skip] {name}: {done} exists")
        return
    print(f"[run ] {name}: csi-mimic {' '.join(argv)}", flush=True)
    started = time.perf_counter()
    code = cli(argv)
    timings[name] = time.perf_counter() - started
    if code != 0:
        sys.exit(f"{name} failed with exit code {code}")
    print(f"[done] {name} in {timings[name]:.0f}s", flush=True)


def run(config: str, out: Path, seed: int | None = None) -> dict:
    cfg = load_config(config)
    seed = cfg.seeds[0] if seed is None else seed
    data, teacher = out / "data", out / "teacher"
    out.mkdir(parents=True, exist_ok=True)
    timing_file = out / "timings.json"
    timings: dict = json.loads(timing_file.read_text()) if timing_file.exists() else {}
    common = ["--config", config, "--data", str(data)]
    step("gen-data", ["gen-data", "--config", config, "--out", str(data)], data / "test.csid", timings)
    step("teacher", ["train", *common, "--model", "teacher", "--out", str(teacher)],
         teacher / "report.json", timings)
    for pipeline in ("plain", "kd", "cm"):
        dest = out / f"{pipeline}-s{seed}"
        # plain gets the teacher too, only to report its codeword MSE
        argv = ["train", *common, "--pipeline", pipeline, "--seed", str(seed), "--out", str(dest),
                "--teacher", str(teacher)]
        step(pipeline, argv, dest / "report.json", timings)

    dirs = [teacher] + [out / f"{p}-s{seed}" for p in ("plain", "kd", "cm")]
    reports = [ExperimentReport.from_dict(json.loads((d / "report.json").read_text())) for d in dirs]
    table = render_table(reports, "table1")
    (out / "table1.txt").write_text(table.text() + "\n")
    (out / "table1.csv").write_text(table.csv())
    (out / "table1.json").write_text(table.json())
    print(table.text())
    for r in reports:
        scen = next(iter(r.mse_cm_end))
        v = r.mse_cm_end[scen]
        print(f"{r.label:>10}: mse_cm_end={'n/a' if v is None else f'{v:.4g}'}")
    total = sum(timings.values())
    if timings:
        verdict = "within" if total <= BUDGET_SECONDS else "OVER"
        print(f"wall clock over all steps: {total / 60:.1f} min ({verdict} the 30 min budget)")
    timing_file.write_text(json.dumps(timings, indent=2))
    return timings


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.ini")
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    run(args.config, Path(args.out), args.seed)
