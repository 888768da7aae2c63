"""Desk-scale proportions grid over four seeds, used by the acceptance suite.

    python scripts/acceptance_grid.py --config configs/desk.ini --out results/acceptance

Trains (or reloads) one teacher, then every (T_cm, seed) student of the
proportions grid {0, .1T, .2T, .3T, .5T, T}. T_cm = 0 is the plain benchmark
run and T_cm = 0.2T the default codeword-mimic run, so the same cache also
answers the plain-vs-CM comparison. Each finished run is cached as JSON under
``<out>/runs`` and skipped on restart; the two comparison cells go first.
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

from csi_mimic import runner
from csi_mimic.config import load_config
from csi_mimic.metrics import render_table
from csi_mimic.runner import average_reports, group_by


def main(config: str, out: Path, progress: bool) -> None:
    cfg = load_config(config)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(Path(config).read_text())
    started = time.perf_counter()
    train, test = runner.datasets_for(cfg)
    teacher_dir = out / "teacher"
    if (teacher_dir / "report.json").exists():
        teacher = runner.load_pair(teacher_dir)
    else:
        pair = runner.run_teacher(cfg, train, test, progress=progress)
        runner.save_pair(teacher_dir, pair, runner.make_report(pair, test, cfg))
        teacher = runner.load_pair(teacher_dir)
    print(f"teacher nmse_db={runner.evaluate_nmse(teacher, test):.2f}", flush=True)

    T = cfg.plan.epochs
    first = [0, round(0.2 * T), T]
    reports = runner.run_grid(cfg, "proportions", train, test, teacher, cache_dir=out / "runs",
                              progress=progress, order=first)
    groups = group_by(reports, lambda r: r.plan["mimic_epochs"])
    table = render_table([average_reports(groups[k]) for k in sorted(groups)], "table2")
    for ext, text in (("txt", table.text() + "\n"), ("csv", table.csv()), ("json", table.json())):
        (out / f"table2.{ext}").write_text(text)
    print(table.text())
    print(f"elapsed this invocation: {(time.perf_counter() - started) / 60:.1f} min")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.ini")
    ap.add_argument("--out", default="results/acceptance")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    main(args.config, Path(args.out), args.verbose)
