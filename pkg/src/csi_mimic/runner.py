"""Experiment orchestration shared by the CLI and the scripts.

Turns an ExperimentConfig into datasets, trained networks and
ExperimentReports, and runs the proportion / scheduler grids.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .autodiff import ConfigError
from .checkpoint import load_checkpoint, require_role, save_checkpoint
from .config import ExperimentConfig
from .data import Dataset, build_dataset
from .distill import (TrainedPair, TrainPlan, forward_values, train_student_cm, train_student_kd,
                      train_plain, train_teacher)
from .metrics import ExperimentReport, nmse
from .nn import count_complexity

log = logging.getLogger(__name__)

PIPELINE_ALIASES = {"plain": "plain", "kd": "vanilla_kd", "cm": "codeword_mimic",
                    "vanilla_kd": "vanilla_kd", "codeword_mimic": "codeword_mimic"}
LABELS = {"plain": "BCRNet", "vanilla_kd": "BCRNet-KD", "codeword_mimic": "BCRNet-CM"}


def proportion_grid(epochs: int) -> list[int]:
    """Mimic epochs {0, .1T, .2T, .3T, .5T, T}, scaled from the 1000-epoch grid."""
    return [round(f * epochs) for f in (0.0, 0.1, 0.2, 0.3, 0.5, 1.0)]


def eta_label(M: int, input_dims) -> str:
    frac = Fraction(M, int(np.prod(input_dims)))
    return f"{frac.numerator}/{frac.denominator}"


def datasets_for(cfg: ExperimentConfig, data_dir: str | Path | None = None) -> tuple[Dataset, Dataset]:
    if data_dir is None:
        return build_dataset(cfg.channel, cfg.n_train, cfg.n_test)
    from .data import load_dataset
    data_dir = Path(data_dir)
    return load_dataset(data_dir / "train.csid", "train"), load_dataset(data_dir / "test.csid", "test")


def check_dims(cfg: ExperimentConfig, *datasets: Dataset) -> None:
    for ds in datasets:
        if tuple(ds.x.shape[1:]) != cfg.input_dims:
            raise ConfigError(f"dataset dims {tuple(ds.x.shape[1:])} do not match config dims {cfg.input_dims}")


def evaluate_nmse(pair: TrainedPair, data: Dataset) -> float:
    h_hat = forward_values(pair.decoder, forward_values(pair.encoder, data.x))
    return nmse(data.x, h_hat).db


def make_report(pair: TrainedPair, test: Dataset, cfg: ExperimentConfig, *, label: str | None = None,
                run_id: str | None = None) -> ExperimentReport:
    scen = cfg.channel.scenario
    plan = pair.plan
    config = {"plan": plan.summary(), "channel": {k: getattr(cfg.channel, k) for k in
              ("scenario", "n_subcarriers", "n_delay", "n_antennas", "seed")},
              "codeword_size": cfg.codeword_size, "n_train": cfg.n_train, "n_test": cfg.n_test}
    role = "teacher" if not pair.encoder.spec.binarized else "student"
    label = label or ("CRNet (teacher)" if role == "teacher" else LABELS[plan.pipeline])
    run_id = run_id or f"{role}-{plan.pipeline}-Tcm{plan.mimic_epochs}-{plan.alpha_scheduler}-s{plan.seed}"
    plan_dict = plan.summary()
    if plan.pipeline == "vanilla_kd":
        plan_dict["beta0"] = pair.beta0
    if plan.pipeline == "codeword_mimic" and pair.alpha0 is not None:
        plan_dict["alpha0"] = pair.alpha0
    return ExperimentReport(
        run_id=run_id, label=label, plan=plan_dict, seed=plan.seed,
        nmse_db={scen: evaluate_nmse(pair, test)},
        mse_cm_mid={scen: pair.mse_cm_mid}, mse_cm_end={scen: pair.mse_cm_end},
        complexity=count_complexity(pair.encoder.spec), eta=eta_label(cfg.codeword_size, cfg.input_dims),
        loss_gt=[r.loss_gt for r in pair.history], loss_cm=[r.loss_cm for r in pair.history],
        seconds=pair.seconds, config_hash=_hash(config))


def _hash(config: dict) -> str:
    from .metrics import config_hash
    return config_hash(config)


# ---------------------------------------------------------------- runs

def run_teacher(cfg: ExperimentConfig, train: Dataset, test: Dataset, seed: int | None = None,
                progress: bool = False) -> TrainedPair:
    plan = cfg.plan_for("plain", cfg.teacher_seed if seed is None else seed)
    return train_teacher(plan, train, test, codeword_size=cfg.codeword_size, progress=progress)


def run_student(cfg: ExperimentConfig, pipeline: str, train: Dataset, test: Dataset, seed: int,
                teacher: TrainedPair | None, progress: bool = False, **overrides) -> TrainedPair:
    pipeline = PIPELINE_ALIASES[pipeline]
    plan = cfg.plan_for(pipeline, seed, **overrides)
    if pipeline != "plain" and teacher is None:
        raise ConfigError(f"pipeline {pipeline} needs a teacher")
    if teacher is not None and teacher.encoder.spec.codeword_size != cfg.codeword_size:
        raise ConfigError(f"teacher codeword size M={teacher.encoder.spec.codeword_size} "
                          f"does not match config M={cfg.codeword_size}")
    if pipeline == "plain":
        return train_plain(plan, train, test, codeword_size=cfg.codeword_size,
                           teacher_encoder=teacher.encoder if teacher else None, progress=progress)
    if pipeline == "codeword_mimic":
        return train_student_cm(plan, train, teacher.encoder, test, progress=progress)
    return train_student_kd(plan, train, teacher, test, progress=progress)


def save_pair(out_dir, pair: TrainedPair, report: ExperimentReport | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"plan": pair.plan.summary()}
    save_checkpoint(out / "encoder.csim", pair.encoder, meta)
    save_checkpoint(out / "decoder.csim", pair.decoder, meta)
    if report is not None:
        (out / "report.json").write_text(report.to_json())


def load_pair(path) -> TrainedPair:
    """Load a saved encoder/decoder pair from a directory (or from its encoder file)."""
    path = Path(path)
    base = path if path.is_dir() else path.parent
    enc_path = path if path.is_file() else base / "encoder.csim"
    dec_path = base / "decoder.csim"
    encoder, meta = load_checkpoint(enc_path)
    require_role(encoder, "encoder", enc_path)
    decoder, _ = load_checkpoint(dec_path)
    require_role(decoder, "decoder", dec_path)
    if encoder.spec.codeword_size != decoder.spec.codeword_size:
        raise ConfigError(f"encoder M={encoder.spec.codeword_size} but decoder M={decoder.spec.codeword_size}")
    plan = TrainPlan(**_plan_kwargs(meta.get("plan", {})))
    return TrainedPair(encoder, decoder, plan).freeze()


def _plan_kwargs(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        out[k] = tuple(v) if isinstance(v, list) else v
    return out


# ---------------------------------------------------------------- grids

@dataclass
class GridCell:
    key: object
    overrides: dict


def grid_cells(cfg: ExperimentConfig, grid: str) -> list[GridCell]:
    if grid == "proportions":
        return [GridCell(t, {"mimic_epochs": t}) for t in proportion_grid(cfg.plan.epochs)]
    if grid == "schedulers":
        return [GridCell(k, {"alpha_scheduler": k}) for k in ("const", "linear", "cosine")]
    raise ConfigError(f"grid must be proportions or schedulers, got {grid!r}")


def run_grid(cfg: ExperimentConfig, grid: str, train: Dataset, test: Dataset, teacher: TrainedPair,
             cache_dir: str | Path | None = None, progress: bool = False,
             order: list | None = None) -> list[ExperimentReport]:
    """Run every (cell, seed) of a grid. Finished cells are cached as JSON and reused.

    ``order`` lists cell keys to run first (the rest follow in grid order).
    """
    cells = grid_cells(cfg, grid)
    if order is not None:
        rank = {k: i for i, k in enumerate(order)}
        cells.sort(key=lambda c: rank.get(c.key, len(rank)))
    reports = []
    for cell in cells:
        for seed in cfg.seeds:
            path = None
            if cache_dir is not None:
                path = Path(cache_dir) / f"{grid}-{cell.key}-s{seed}.json"
                if path.exists():
                    reports.append(ExperimentReport.from_dict(json.loads(path.read_text())))
                    continue
            log.info("grid %s cell %s seed %d", grid, cell.key, seed)
            pair = run_student(cfg, "cm", train, test, seed, teacher, progress=progress, **cell.overrides)
            rep = make_report(pair, test, cfg)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(rep.to_json())
            reports.append(rep)
    return reports


def average_reports(reports: list[ExperimentReport]) -> ExperimentReport:
    """Seed-average of reports that share everything but the seed."""
    if not reports:
        raise ValueError("nothing to average")
    first = reports[0]

    def mean_dict(key):
        out = {}
        for s in getattr(first, key):
            vals = [getattr(r, key).get(s) for r in reports]
            if any(v is None for v in vals):
                out[s] = None
            else:
                out[s] = float(np.mean(vals))
        return out

    plan = dict(first.plan)
    plan["seed"] = [r.seed for r in reports]
    return ExperimentReport(
        run_id=first.run_id.rsplit("-s", 1)[0] + "-mean", label=first.label, plan=plan, seed=-1,
        nmse_db=mean_dict("nmse_db"), mse_cm_mid=mean_dict("mse_cm_mid"), mse_cm_end=mean_dict("mse_cm_end"),
        complexity=first.complexity, eta=first.eta,
        loss_gt=list(np.mean([r.loss_gt for r in reports], axis=0)) if first.loss_gt else [],
        seconds=float(np.sum([r.seconds for r in reports])))


def group_by(reports: list[ExperimentReport], key) -> dict:
    groups: dict = {}
    for r in reports:
        groups.setdefault(key(r), []).append(r)
    return groups

