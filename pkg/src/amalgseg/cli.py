"""Command-line entry point binding the whole pipeline.

Subcommands: gen-data, pretrain, pretrain-all, amalgamate, infer, eval,
report. Every command is deterministic under a fixed seed. Exit codes:
0 success, 1 usage error, 2 data error, 3 numeric failure.

Config files are flat ``key = value`` lines with ``#`` comments and
``include <path>`` support; command-line flags override file values.
Student and expert architecture knobs use ``student.<field>`` and
``arch.<field>`` keys. ``AMALGSEG_OUT`` provides the default output root
when ``--out`` is omitted.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields

from . import metrics, synthdata
from .experts import ExpertArchConfig
from .foundation import StudentConfig, load_student
from .inference import infer_dataset
from .synthdata import ChecksumError, PromptBox
from .training import NumericError, TrainConfig, run_training

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def parse_shape(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like 32x96x96, got {text!r}")
    if len(parts) != 3 or any(p <= 0 for p in parts):
        raise argparse.ArgumentTypeError(f"shape must be three positive ints, got {text!r}")
    return parts


def parse_config_file(path: str) -> dict:
    """Flat key = value config with # comments and include directives."""
    values: dict[str, object] = {}
    with open(path) as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("include "):
                inc = line[len("include "):].strip()
                inc_path = inc if os.path.isabs(inc) else os.path.join(os.path.dirname(path), inc)
                included = parse_config_file(inc_path)
                included.update(values)  # local keys win over included ones
                values = included
                continue
            if "=" not in line:
                raise ValueError(f"bad config line in {path}: {raw.strip()!r}")
            key, _, val = line.partition("=")
            try:
                values[key.strip()] = json.loads(val.strip())
            except json.JSONDecodeError:
                values[key.strip()] = val.strip()
    return values


def _split_config(values: dict) -> tuple[dict, dict, dict]:
    train, student, arch = {}, {}, {}
    train_fields = {f.name for f in fields(TrainConfig)} | {"lambda"}
    student_fields = {f.name for f in fields(StudentConfig)}
    arch_fields = {f.name for f in fields(ExpertArchConfig)}
    for key, val in values.items():
        if key.startswith("student."):
            name = key[len("student."):]
            if name not in student_fields:
                raise ValueError(f"unknown student config key {key!r}")
            student[name] = tuple(val) if isinstance(val, list) else val
        elif key.startswith("arch."):
            name = key[len("arch."):]
            if name not in arch_fields:
                raise ValueError(f"unknown arch config key {key!r}")
            arch[name] = tuple(val) if isinstance(val, list) else val
        else:
            if key == "lambda":
                key = "lambda_"
            if key not in train_fields and key != "lambda_":
                raise ValueError(f"unknown config key {key!r}")
            train[key] = tuple(val) if isinstance(val, list) else val
    return train, student, arch


def build_train_setup(args, stage: str):
    values = parse_config_file(args.config) if getattr(args, "config", None) else {}
    train_kv, student_kv, arch_kv = _split_config(values)
    for flag in ("lr", "epochs", "batch_size", "seed"):
        v = getattr(args, flag, None)
        if v is not None:
            train_kv[flag] = v
    train_kv["stage"] = stage
    if "roi" in train_kv:
        train_kv["roi"] = tuple(train_kv["roi"])
    cfg = TrainConfig(**train_kv)
    student_cfg = StudentConfig(**student_kv) if student_kv else None
    arch = None
    if arch_kv:
        arch_kv.setdefault("volume_shape", cfg.roi)
        arch = ExpertArchConfig(**arch_kv)
    return cfg, student_cfg, arch


def default_out(args, name: str) -> str:
    if args.out:
        return args.out
    root = os.environ.get("AMALGSEG_OUT")
    if not root:
        raise ValueError("no --out given and AMALGSEG_OUT is not set")
    return os.path.join(root, name)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = default_out(args, "dataset")
    suite = synthdata.gen_task_suite(args.tasks, args.centers, args.seed)
    samples = synthdata.synth_dataset(suite, args.per_center, args.shape, args.seed,
                                      spacing=tuple(args.spacing))
    synthdata.write_dataset(samples, out, suite=suite)
    print(f"wrote {len(samples)} samples to {out}")
    for spec in suite:
        print(f"  {spec.task_id}: labels {set(spec.label_ids)} centers {list(spec.center_ids)}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg, _, arch = build_train_setup(args, "pretrain")
    out = default_out(args, "experts")
    manifest = run_training(cfg, args.data, out, task_id=args.task, arch=arch)
    for e in manifest["experts"]:
        print(f"trained {e['expert_id']} (inval dice "
              f"{e['inval_dice'] if e['inval_dice'] is not None else 'n/a'})")
    print(f"registry: {manifest['registry']}")
    return EXIT_OK


def cmd_pretrain_all(args) -> int:
    args.task = None
    return cmd_pretrain(args)


def cmd_amalgamate(args) -> int:
    cfg, student_cfg, _ = build_train_setup(args, "amalgamate")
    out = default_out(args, "student")
    manifest = run_training(cfg, args.data, out, experts_path=args.experts,
                            student_cfg=student_cfg, resume=args.resume)
    print(f"amalgamation run complete: {manifest['steps']} steps, "
          f"final total {manifest['final_total']:.6f}")
    print(f"student checkpoint: {os.path.join(out, manifest['student_checkpoint'])}")
    return EXIT_OK


def _load_prompt_file(path: str) -> dict[str, PromptBox]:
    with open(path) as f:
        raw = json.load(f)
    return {
        sid: PromptBox(lo=tuple(p["lo"]), hi=tuple(p["hi"]), target_label=p["target_label"])
        for sid, p in raw.items()
    }


def cmd_infer(args) -> int:
    student = load_student(args.model)
    samples = synthdata.read_dataset(args.input)
    if not samples:
        raise FileNotFoundError(f"no samples found in {args.input}")
    prompts = None if args.prompts == "gt" else _load_prompt_file(args.prompts)
    out = default_out(args, "predictions")
    infer_dataset(student, samples, out, prompts=prompts, postprocess=args.postprocess)
    print(f"wrote {len(samples)} predictions to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    split_map = {}
    if args.splits:
        with open(args.splits) as f:
            split_map = json.load(f)
    report = metrics.evaluate_dataset(args.pred, args.gt, split_map)
    csv_path = args.report[:-5] + ".csv" if args.report.endswith(".json") else args.report + ".csv"
    metrics.write_report(report, args.report, csv_path)
    print(metrics.format_generalization_table(report))
    print(f"report: {args.report}")
    if not report["cases"]:
        print("no matched prediction/GT pairs", file=sys.stderr)
        return EXIT_DATA
    if report["unmatched"]:
        print(f"unmatched cases: {report['unmatched']}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _find_reports(run_dir: str) -> dict[str, str]:
    found = {}
    direct = os.path.join(run_dir, "report.json")
    if os.path.exists(direct):
        found[os.path.basename(os.path.normpath(run_dir))] = direct
    for entry in sorted(os.listdir(run_dir)):
        sub = os.path.join(run_dir, entry, "report.json")
        if os.path.exists(sub):
            found[entry] = sub
    return found


def cmd_report(args) -> int:
    from .viz import save_case_overlay

    reports = _find_reports(args.run)
    if not reports:
        raise FileNotFoundError(f"no report.json under {args.run}")
    out = default_out(args, "figures")
    n_png = 0
    for model, report_path in reports.items():
        with open(report_path) as f:
            report = json.load(f)
        gt = {s.sample_id: s for s in synthdata.read_dataset(report["gt_dir"])}
        pred = {s.sample_id: s for s in synthdata.read_dataset(report["pred_dir"])}
        by_task: dict[str, list[dict]] = {}
        for case in report["cases"]:
            by_task.setdefault(case["task_id"], []).append(case)
        for task, cases in sorted(by_task.items()):
            ranked = sorted(cases, key=lambda c: c["mean_dsc"])
            for tag, case in (("worst", ranked[0]), ("best", ranked[-1])):
                sid = case["sample_id"]
                path = os.path.join(out, f"{model}_{task}_{tag}.png")
                save_case_overlay(
                    gt[sid].image, gt[sid].label, pred[sid].label, path,
                    case_title=f"{model} {task} {tag}: {sid} dice={case['mean_dsc']:.3f}")
                n_png += 1
    print(f"wrote {n_png} figures to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> CliParser:
    parser = CliParser(prog="amalgseg",
                       description="Multi-expert knowledge amalgamation for "
                                   "prompt-conditioned volumetric segmentation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-task dataset")
    p.add_argument("--tasks", type=int, required=True)
    p.add_argument("--centers", type=int, required=True)
    p.add_argument("--per-center", type=int, required=True)
    p.add_argument("--shape", type=parse_shape, default=(32, 96, 96),
                   help="DxHxW, D a multiple of 32 (default 32x96x96)")
    p.add_argument("--spacing", type=lambda s: tuple(float(x) for x in s.split(",")),
                   default=(1.0, 1.0, 1.0), help="voxel spacing in mm, e.g. 1,1,1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gen_data)

    for name, func, with_task in (("pretrain", cmd_pretrain, True),
                                  ("pretrain-all", cmd_pretrain_all, False)):
        p = sub.add_parser(name, help=f"stage-1 teacher training ({name})")
        p.add_argument("--data", required=True)
        if with_task:
            p.add_argument("--task", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, dest="batch_size", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("amalgamate", help="stage-2 student training")
    p.add_argument("--data", required=True)
    p.add_argument("--experts", required=True, help="experts.json registry path")
    p.add_argument("--config", default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_amalgamate)

    p = sub.add_parser("infer", help="expert-free universal inference")
    p.add_argument("--model", required=True, help="student checkpoint (.pt)")
    p.add_argument("--input", required=True)
    p.add_argument("--prompts", default="gt",
                   help="'gt' to derive boxes from ground truth, or a JSON file")
    p.add_argument("--postprocess", action="store_true",
                   help="keep only the largest connected component per label")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="DSC/HD evaluation with split aggregation")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--splits", default=None, help="JSON mapping sample/center -> split")
    p.add_argument("--report", required=True, help="output report.json path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="best/worst overlay figures from eval runs")
    p.add_argument("--run", required=True, help="directory containing report.json (or subdirs)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ChecksumError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
