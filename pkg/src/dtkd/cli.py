"""``dtkd`` command-line entry point.

Every subcommand reads one config (``--config``; built-in defaults otherwise)
and writes only under the output directory (``--out``, else ``$DTKD_OUT``,
else ``./dtkd_out``). Failures exit 1 with a one-line JSON error on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from dtkd import analysis, harness, net
from dtkd.config import ConfigError, RunConfig, default_config, format_config, load_config
from dtkd.data import ParseError, load_dataset, store_dataset
from dtkd.numkit import DomainError

log = logging.getLogger("dtkd")

SUBCOMMANDS = ("train-teacher", "distill", "sweep-temp", "sweep-weights", "ablate-dkd",
               "analyze", "gen-data")


class MissingFileError(FileNotFoundError):
    def __init__(self, what: str, path: Path):
        super().__init__(f"{what} not found: {path}")
        self.path = str(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtkd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key/value config file")
        p.add_argument("--out", type=Path, help="output directory (default: $DTKD_OUT or ./dtkd_out)")
        p.add_argument("--seed", type=int, help="overrides schedule.seed and experiment.seeds")
        p.add_argument("--method", choices=harness.METHODS, help="overrides experiment.method")
        p.add_argument("--jobs", type=int, default=1, help="parallel runs for sweeps")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _out_dir(args) -> Path:
    out = args.out or Path(os.environ.get("DTKD_OUT") or "dtkd_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(run: RunConfig, out: Path):
    data = run.experiment.data
    if data.train_path is None:
        train_file, test_file = out / "train.dtks", out / "test.dtks"
        if train_file.exists() and test_file.exists():
            data = replace(data, train_path=str(train_file), test_path=str(test_file))
    return data.load()


def _teacher_path(run: RunConfig, out: Path) -> Path:
    return Path(run.teacher_checkpoint) if run.teacher_checkpoint else out / "teacher.ckpt"


def _load_teacher(run: RunConfig, out: Path) -> net.MlpParams:
    path = _teacher_path(run, out)
    if not path.exists():
        raise MissingFileError("teacher checkpoint", path)
    return net.load_checkpoint(path)


def _student_path(out: Path, exp, seed: int) -> Path:
    return out / f"{exp.experiment_id}_{exp.method}_seed{seed}.ckpt"


def cmd_gen_data(run, out, args):
    train, test = run.experiment.data.load()
    store_dataset(train, out / "train.dtks")
    store_dataset(test, out / "test.dtks")
    # sanity: both files must reload
    load_dataset(out / "train.dtks")
    load_dataset(out / "test.dtks")
    return [out / "train.dtks", out / "test.dtks"]


def cmd_train_teacher(run, out, args):
    exp = run.experiment
    ckpt = out / "teacher.ckpt"
    _, records = harness.train_teacher(exp, ckpt, data=_load_data(run, out))
    metrics = out / f"{exp.experiment_id}_teacher_metrics.csv"
    harness.write_metrics(records, metrics)
    return [ckpt, metrics]


def cmd_distill(run, out, args):
    exp = run.experiment
    teacher = _load_teacher(run, out)
    data = _load_data(run, out)
    written = []
    for seed in exp.seeds:
        cfg = exp.with_seed(seed)
        ckpt = _student_path(out, exp, seed)
        _, records = harness.distill(cfg, teacher, ckpt, data=data)
        metrics = out / f"{exp.experiment_id}_{exp.method}_seed{seed}_metrics.csv"
        harness.write_metrics(records, metrics)
        written += [ckpt, metrics]
    return written


def _write_table(table, path):
    path.write_text(table.to_text())
    return [path]


def cmd_sweep_temp(run, out, args):
    table = harness.sweep_reference_temperature(
        run.experiment, _load_teacher(run, out), run.sweep.taus, run.sweep.methods,
        data=_load_data(run, out), jobs=args.jobs)
    return _write_table(table, analysis.report_path(out, run.experiment.experiment_id, "sweep_temp"))


def cmd_sweep_weights(run, out, args):
    table = harness.sweep_loss_weights(
        run.experiment, _load_teacher(run, out), run.sweep.alphas, run.sweep.betas,
        data=_load_data(run, out), jobs=args.jobs)
    return _write_table(table, analysis.report_path(out, run.experiment.experiment_id, "sweep_weights"))


def cmd_ablate_dkd(run, out, args):
    table = harness.ablate_tckd_nckd(run.experiment, _load_teacher(run, out),
                                     data=_load_data(run, out), jobs=args.jobs)
    return _write_table(table, analysis.report_path(out, run.experiment.experiment_id, "ablate_dkd"))


def cmd_analyze(run, out, args):
    exp = run.experiment
    teacher = _load_teacher(run, out)
    _, test = _load_data(run, out)
    teacher_logits = net.predict(teacher, test.features)
    buckets = analysis.bucket_difficulty(teacher_logits)
    models = {"teacher": teacher}
    student_ckpt = _student_path(out, exp, exp.seeds[0])
    if student_ckpt.exists():
        models["student"] = net.load_checkpoint(student_ckpt)
    else:
        log.warning("no student checkpoint at %s; analysing the teacher only", student_ckpt)

    acc_rows, conf_rows = [], []
    for name, params in models.items():
        for row in analysis.bucket_accuracy_report(params, test, buckets).rows:
            acc_rows.append([name, *row])
        n = min(run.analysis.sample_count, len(test))
        conf_rows.append([name, n, analysis.confidence_summary(params, test, n, run.analysis.seed)])
    written = _write_table(harness.Table(["model", "bucket", "n", "accuracy"], acc_rows),
                           analysis.report_path(out, exp.experiment_id, "bucket_accuracy"))
    written += _write_table(harness.Table(["model", "samples", "mean_max_prob"], conf_rows),
                            analysis.report_path(out, exp.experiment_id, "confidence"))
    if "student" in models:
        student_logits = net.predict(models["student"], test.features)
        table = analysis.bucket_temperature_report(teacher_logits, student_logits,
                                                   exp.distill.tau_ref, buckets,
                                                   exp.distill.epsilon_floor)
        written += _write_table(table, analysis.report_path(out, exp.experiment_id,
                                                            "bucket_temperature"))
    return written


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "sweep-temp": cmd_sweep_temp,
    "sweep-weights": cmd_sweep_weights,
    "ablate-dkd": cmd_ablate_dkd,
    "analyze": cmd_analyze,
}


def _error_line(kind: str, exc: Exception, **extra) -> str:
    payload = {"error": kind, "message": str(exc), **{k: v for k, v in extra.items() if v is not None}}
    return json.dumps(payload, sort_keys=True)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.config is not None:
            cfg = load_config(args.config, args.seed, args.method)
        else:
            cfg = default_config(args.seed, args.method)
        out = _out_dir(args)
        (out / "resolved_config.txt").write_text(format_config(cfg))
        for path in COMMANDS[args.command](cfg, out, args):
            print(path)
    except ConfigError as exc:
        print(_error_line("config", exc, key=exc.key, line=exc.line), file=sys.stderr)
        return 1
    except MissingFileError as exc:
        print(_error_line("missing_file", exc, path=exc.path), file=sys.stderr)
        return 1
    except ParseError as exc:
        print(_error_line("parse", exc, offset=exc.offset, record=exc.record), file=sys.stderr)
        return 1
    except DomainError as exc:
        print(_error_line("domain", exc), file=sys.stderr)
        return 1
    except (OSError, ValueError, FloatingPointError) as exc:
        print(_error_line(type(exc).__name__, exc), file=sys.stderr)
        return 1
    return 0


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
