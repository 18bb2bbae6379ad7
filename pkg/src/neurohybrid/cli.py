"""Command-line front end: ``neurohybrid {generate,train,evaluate,ablate,gradcam}``.

Exit codes: 0 ok, 1 usage or training failure, 2 I/O, 3 missing run
artifacts, 4 model kind cannot serve the request (e.g. Grad-CAM of an
``ml`` run).  ``NEUROHYBRID_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from .cohort import MANIFEST_NAME, ManifestError, NiftiFormatError, PhantomError, PhantomSpec, write_manifest, write_subject
from .cohort.phantom import iter_cohort, with_seed
from .cohort.verify import CohortInvariantError, verify_cohort
from .metrics import ablation_report
from .pipeline import (
    INPUTS,
    MODEL_KINDS,
    TASKS,
    DiskCohort,
    RunConfig,
    RunError,
    desk_architecture,
    desk_training,
    evaluate_run,
    format_report,
    gradcam_run,
    load_run_config,
    run_ablation,
    train_run,
)
from .trainer import TrainingDivergedError

log = logging.getLogger("neurohybrid")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MISSING, EXIT_MODEL = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class MissingArtifact(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not (out / MANIFEST_NAME).is_file():
        raise OSError(f"{out} exists and is not a cohort directory; refusing to overwrite")
    spec = with_seed(PhantomSpec(), args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        rows = []
        for subj in iter_cohort(spec, args.scale):
            rows.append(write_subject(subj, tmp))
        write_manifest(rows, tmp / MANIFEST_NAME)
        (tmp / "cohort.json").write_text(json.dumps({"scale": args.scale, "seed": args.seed}, sort_keys=True) + "\n")
        summary = verify_cohort(tmp, args.scale)
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote {summary['subjects']} subjects to {out}: {summary['counts']}")
    return EXIT_OK


def _run_config(args, model: str, inputs: str) -> RunConfig:
    arch = desk_architecture()
    if args.downsample is not None:
        arch = replace(arch, downsample=args.downsample)
    overrides = {k: v for k, v in (("max_epochs", args.epochs), ("batch_size", args.batch_size),
                                   ("learning_rate", args.lr)) if v is not None}
    training = desk_training(**overrides)
    kw = {}
    if args.folds is not None:
        kw["cv_folds"] = args.folds
    return RunConfig(task=args.task, inputs=inputs, model=model, seed=args.seed, arch=arch.to_dict(),
                     training=asdict(training), l2=args.l2, threshold=args.threshold,
                     precision=args.precision, **kw)


def cmd_train(args) -> int:
    try:
        cfg = _run_config(args, args.model, args.inputs)
    except (RunError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    source = DiskCohort(args.cohort)
    out = train_run(source, cfg, args.out, cohort_ref=str(Path(args.cohort).resolve()))
    print(f"trained {cfg.model} on {cfg.inputs} for {cfg.task}: {out}")
    return EXIT_OK


def _cohort_for_run(run_dir, override) -> DiskCohort:
    try:
        _, ref = load_run_config(run_dir)
    except FileNotFoundError as exc:
        raise MissingArtifact(str(exc)) from exc
    path = override or ref
    if not path:
        raise UsageError("run does not record its cohort; pass --cohort")
    return DiskCohort(path)


def cmd_evaluate(args) -> int:
    source = _cohort_for_run(args.run, args.cohort)
    try:
        report = evaluate_run(source, args.run)
    except FileNotFoundError as exc:
        raise MissingArtifact(str(exc)) from exc
    sys.stdout.write(format_report(report))
    return EXIT_OK


def cmd_ablate(args) -> int:
    try:
        base = _run_config(args, "cnn", "mri+mask")
    except (RunError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    source = DiskCohort(args.cohort)
    out = Path(args.out or f"ablation-{args.task}")
    reports = run_ablation(source, args.task, out, base, cohort_ref=str(Path(args.cohort).resolve()))
    table, text = ablation_report({args.task: list(reports.values())})
    (out / "ablation.json").write_text(json.dumps(table, indent=1, sort_keys=True) + "\n")
    (out / "ablation.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcam(args) -> int:
    try:
        cfg, _ = load_run_config(args.run)
    except FileNotFoundError as exc:
        raise MissingArtifact(str(exc)) from exc
    if cfg.model == "ml":
        print("no CNN to explain: run was trained with model kind 'ml'", file=sys.stderr)
        return EXIT_MODEL
    source = _cohort_for_run(args.run, args.cohort)
    subjects = None if args.subjects == ["all"] else args.subjects
    try:
        pops = gradcam_run(source, args.run, args.out, subjects, target_class=args.target_class)
    except FileNotFoundError as exc:
        raise MissingArtifact(str(exc)) from exc
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    for b, pop in pops.items():
        print(f"{b}: population map over {pop.count} subjects -> {Path(args.out) / f'population_{b}.nii'}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_overrides(p) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, help="maximum epochs per training run")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="initial Adam learning rate")
    p.add_argument("--downsample", type=int, help="block-average factor applied to crops")
    p.add_argument("--folds", type=int, help="cross-validation folds")
    p.add_argument("--l2", type=float, default=1.0, help="stage-two penalty")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="neurohybrid", description="Hybrid CNN + logistic-regression classifier on phantom cohorts.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a phantom cohort")
    g.add_argument("--out", required=True)
    g.add_argument("--scale", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=PhantomSpec().seed)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="split, cross-validate, retrain and fit stage two")
    t.add_argument("--cohort", required=True)
    t.add_argument("--task", required=True, choices=sorted(TASKS))
    t.add_argument("--inputs", required=True, choices=INPUTS)
    t.add_argument("--model", required=True, choices=MODEL_KINDS)
    t.add_argument("--out", required=True)
    _add_overrides(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a run on its held-out test subjects")
    e.add_argument("--run", required=True)
    e.add_argument("--cohort", help="cohort directory (default: the one recorded in run.json)")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and evaluate all seven (model, inputs) rows")
    a.add_argument("--cohort", required=True)
    a.add_argument("--task", required=True, choices=sorted(TASKS))
    a.add_argument("--out")
    _add_overrides(a)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcam", help="attention maps for a trained CNN or hybrid run")
    c.add_argument("--run", required=True)
    c.add_argument("--subjects", nargs="+", default=["all"])
    c.add_argument("--out", required=True)
    c.add_argument("--cohort")
    c.add_argument("--target-class", type=int, choices=(0, 1), default=1,
                   help="1 explains the task's first-named (positive) diagnosis, 0 the other")
    c.set_defaults(func=cmd_gradcam)
    return parser


def _thread_limit():
    raw = os.environ.get("NEUROHYBRID_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"NEUROHYBRID_THREADS must be a positive integer, got {raw!r}") from None
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"neurohybrid: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifact as exc:
        print(f"neurohybrid: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDivergedError as exc:
        print(f"neurohybrid: training failed: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ManifestError, NiftiFormatError, PhantomError, CohortInvariantError) as exc:
        print(f"neurohybrid: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
