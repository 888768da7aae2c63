"""``csi-mimic`` command line: gen-data, train, ablate, eval.

Exit codes: 0 success, 2 config/validation, 3 I/O, 4 format/version.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .autodiff import ConfigError, DimensionError
from .config import ExperimentConfig, load_config
from .data import FormatError, generate_split, load_dataset, save_dataset, sparsity_diagnostic
from .metrics import codeword_mse_values, nmse, render_table
from .nn import count_complexity

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_FORMAT = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return load_config(path)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _config(args.config)
    channel = cfg.channel if args.seed is None else replace(cfg.channel, seed=args.seed)
    n_train = cfg.n_train if args.train is None else args.train
    n_test = cfg.n_test if args.test is None else args.test
    if n_train <= 0 or n_test <= 0:
        raise ConfigError("train/test: sample counts must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", n_train), ("test", n_test)):
        ds = generate_split(channel, n, split)
        save_dataset(out / f"{split}.csid", ds)
        print(f"{split}: {len(ds)} samples -> {out / f'{split}.csid'}")
    frac = sparsity_diagnostic(channel, n=min(100, n_train))
    print(f"sparsity: {frac:.4f} of energy in the first Nc={channel.n_delay} delay rows")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import runner

    cfg = _config(args.config)
    pipeline = runner.PIPELINE_ALIASES[args.pipeline]
    if pipeline != "plain" and args.teacher is None:
        raise ConfigError(f"--teacher is required for the {args.pipeline} pipeline")
    train, test = runner.datasets_for(cfg, args.data)
    runner.check_dims(cfg, train, test)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    if args.model == "teacher":
        if pipeline != "plain":
            raise ConfigError("pipeline: teachers are trained with the plain pipeline")
        pair = runner.run_teacher(cfg, train, test, seed=seed, progress=args.verbose)
        teacher = None
    else:
        teacher = runner.load_pair(args.teacher) if args.teacher else None
        pair = runner.run_student(cfg, pipeline, train, test, seed, teacher, progress=args.verbose)
    report = runner.make_report(pair, test, cfg)
    runner.save_pair(args.out, pair, report)
    print(f"{report.label}: nmse_db={report.nmse_db[cfg.channel.scenario]:.2f}")
    for key in ("mse_cm_mid", "mse_cm_end"):
        v = getattr(report, key)[cfg.channel.scenario]
        if v is not None:
            print(f"{key}={v:.6g}")
    print(report.complexity.line())
    print(f"wrote {Path(args.out) / 'report.json'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from . import runner

    cfg = _config(args.config)
    if args.teacher is None:
        raise ConfigError("--teacher is required for ablation grids")
    cells = runner.grid_cells(cfg, args.grid)
    train, test = runner.datasets_for(cfg, args.data)
    runner.check_dims(cfg, train, test)
    teacher = runner.load_pair(args.teacher)
    out = Path(args.out)
    reports = runner.run_grid(cfg, args.grid, train, test, teacher, cache_dir=out / "runs", progress=args.verbose)
    key = (lambda r: r.plan["mimic_epochs"]) if args.grid == "proportions" else (lambda r: r.plan["alpha_scheduler"])
    groups = runner.group_by(reports, key)
    averaged = [runner.average_reports(groups[c.key]) for c in cells if c.key in groups]
    layout = "table2" if args.grid == "proportions" else "table3"
    table = render_table(averaged, layout)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{layout}.txt").write_text(table.text() + "\n")
    (out / f"{layout}.csv").write_text(table.csv())
    (out / f"{layout}.json").write_text(table.json())
    print(table.text())
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint, require_role
    from .distill import forward_values

    encoder, _ = load_checkpoint(args.encoder)
    require_role(encoder, "encoder", args.encoder)
    decoder, _ = load_checkpoint(args.decoder)
    require_role(decoder, "decoder", args.decoder)
    m_e, m_d = encoder.spec.codeword_size, decoder.spec.codeword_size
    if m_e != m_d:
        raise DimensionError(f"encoder M={m_e} does not match decoder M={m_d}")
    data = load_dataset(args.data)
    dims = tuple(data.x.shape[1:])
    if dims != encoder.spec.input_dims:
        raise DimensionError(f"data dims {dims} do not match encoder input dims {encoder.spec.input_dims}")
    v = forward_values(encoder, data.x)
    result = nmse(data.x, forward_values(decoder, v))
    print(f"nmse_db={result.db:.2f} nmse_linear={result.linear:.6g} samples={len(data)}")
    if args.teacher_encoder:
        teacher, _ = load_checkpoint(args.teacher_encoder)
        require_role(teacher, "encoder", args.teacher_encoder)
        if teacher.spec.codeword_size != m_e:
            raise DimensionError(f"teacher M={teacher.spec.codeword_size} does not match student M={m_e}")
        print(f"mse_cm={codeword_mse_values(forward_values(teacher, data.x), v):.6g}")
    print(count_complexity(encoder.spec).line())
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csi-mimic", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate train/test CSID files")
    g.add_argument("--config")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--train", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a teacher or a student")
    t.add_argument("--config")
    t.add_argument("--pipeline", choices=["plain", "kd", "cm"], default="plain")
    t.add_argument("--model", choices=["student", "teacher"], default="student")
    t.add_argument("--teacher", help="teacher run directory (or its encoder.csim)")
    t.add_argument("--data", help="directory holding train.csid/test.csid; generated from config if omitted")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="run the proportions or schedulers grid")
    a.add_argument("--config")
    a.add_argument("--grid", choices=["proportions", "schedulers"], required=True)
    a.add_argument("--teacher")
    a.add_argument("--data")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("eval", help="evaluate an encoder/decoder pair on a CSID file")
    e.add_argument("--encoder", required=True)
    e.add_argument("--decoder", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--teacher-encoder")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except FormatError as exc:  # before ValueError: FormatError subclasses it
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ConfigError, DimensionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
