"""Command-line front end: dataset generation, training, evaluation,
ablation sweeps and the gradient verification suite.

Every run prints its fully resolved configuration first, so logs alone
are enough to reproduce it. Exit codes: 0 success, 1 user or IO error,
2 internal invariant violation.
"""
from __future__ import annotations

import argparse
import itertools
import os
import sys
import traceback

import numpy as np

from . import evalkit, gradcheck, model, trainer
from .config import Config, ConfigError
from .io import FormatError, load_tensor
from .synthdata import build_dataset
from .taxonomy import DYNAMIC_SMALL, STATIC, default_taxonomy

# toggle bundles for the component-ablation ladder and the
# mixup-class-selection ladder
VARIANTS = {
    "baseline": {
        "trainer.alpha": "0.0",
        "trainer.beta": "0.0",
        "dsr.enable": "false",
        "fpa.enable": "false",
    },
    "dsr": {"dsr.enable": "true", "dsr.bank_enable": "false", "fpa.enable": "false"},
    "dsr_full": {"dsr.enable": "true", "dsr.bank_enable": "true", "fpa.enable": "false"},
    "dsr_fpa_nw": {
        "dsr.enable": "true",
        "dsr.bank_enable": "true",
        "fpa.enable": "true",
        "fpa.enable_reweight": "false",
    },
    "full": {},
    "fpa_only": {"dsr.enable": "false", "fpa.enable": "true"},
    "random": {
        "dsr.enable": "true",
        "dsr.forced_classes": "none",
        "dsr.bank_enable": "false",
        "fpa.enable": "true",
    },
    "random_small": {
        "dsr.enable": "true",
        "dsr.forced_classes": "small",
        "dsr.bank_enable": "false",
        "fpa.enable": "true",
    },
    "random_dynamic": {
        "dsr.enable": "true",
        "dsr.forced_classes": "dynamic",
        "dsr.bank_enable": "false",
        "fpa.enable": "true",
    },
}

USER_ERRORS = (
    ConfigError,
    FormatError,
    FileNotFoundError,
    NotADirectoryError,
    IsADirectoryError,
    PermissionError,
    OSError,
    ValueError,
    KeyError,
)


def _resolve_config(args):
    if getattr(args, "config", None):
        cfg = Config.from_file(args.config, getattr(args, "set", []) or [])
    else:
        cfg = Config()
        cfg.apply_overrides(getattr(args, "set", []) or [])
    return cfg


def _print_config(cfg):
    print("resolved configuration:")
    for line in cfg.dump_lines():
        print(f"  {line}")


def cmd_gen_data(args):
    cfg = _resolve_config(args)
    for key, value in (
        ("data.seed", args.seed),
        ("data.num_source", args.num_source),
        ("data.num_target", args.num_target),
        ("data.num_test", args.num_test),
    ):
        if value is not None:
            cfg.set(key, value)
    _print_config(cfg)
    manifest = build_dataset(cfg.dataset_config(), args.out)
    print(f"dataset written to {args.out}")
    for key, value in manifest.items():
        print(f"  {key} = {value}")
    return 0


def cmd_train(args):
    cfg = _resolve_config(args)
    _print_config(cfg)
    summary = trainer.run(cfg, args.data, args.out, resume_from=args.resume)
    rep = summary["final_report"]
    print(
        f"finished {len(summary['reports'])} iterations in {summary['seconds']:.1f}s; "
        f"night mIoU {rep.miou:.4f} "
        f"(static {rep.group_miou[STATIC]:.4f}, dynamic/small {rep.group_miou[DYNAMIC_SMALL]:.4f})"
    )
    return 0


def _eval_from_predictions(pred_dir, data, tax):
    cm = evalkit.ConfusionMatrix(len(tax))
    for i, (_, label) in enumerate(data.test):
        pred = load_tensor(os.path.join(pred_dir, f"pred_{i:05d}.dsrt"))
        evalkit.accumulate(cm, pred, label)
    return evalkit.iou(cm, tax, name=pred_dir)


def cmd_eval(args):
    cfg = _resolve_config(args)
    _print_config(cfg)
    if args.split != "night-test":
        raise ConfigError(f"unknown split {args.split!r}; only night-test exists")
    if not args.pred_dir and not args.ckpt:
        raise ConfigError("eval needs --ckpt or --pred-dir")
    tax = default_taxonomy()
    data = trainer.load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    if args.pred_dir:
        report = _eval_from_predictions(args.pred_dir, data, tax)
    else:
        params = model.load_checkpoint(args.ckpt, trainable=False)
        report = trainer.evaluate_student(params, data.test, tax, name=args.ckpt)
        for i, (night_img, _) in enumerate(data.test):
            pred = model.forward(params, night_img).pred()
            evalkit.render_prediction(pred, tax, os.path.join(args.out, f"pred_{i:05d}.ppm"))
    evalkit.write_report(
        report, os.path.join(args.out, "report.csv"), os.path.join(args.out, "report.md")
    )
    print(
        f"night mIoU {report.miou:.4f} "
        f"(static {report.group_miou[STATIC]:.4f}, dynamic/small {report.group_miou[DYNAMIC_SMALL]:.4f})"
    )
    return 0


def _mean_report(name, reports):
    stacked = np.stack([r.iou for r in reports])
    counts = (~np.isnan(stacked)).sum(axis=0)
    iou = np.full(stacked.shape[1], np.nan)
    seen = counts > 0
    iou[seen] = np.nansum(stacked[:, seen], axis=0) / counts[seen]
    return evalkit.EvalReport(
        name=name,
        class_names=reports[0].class_names,
        class_groups=reports[0].class_groups,
        iou=iou,
        miou=float(np.mean([r.miou for r in reports])),
        group_miou={
            STATIC: float(np.mean([r.group_miou[STATIC] for r in reports])),
            DYNAMIC_SMALL: float(np.mean([r.group_miou[DYNAMIC_SMALL] for r in reports])),
        },
        pixels=sum(r.pixels for r in reports),
    )


def _sweep_cells(sweeps):
    keys, value_lists = [], []
    for item in sweeps:
        if "=" not in item:
            raise ConfigError(f"--sweep expects key=v1,v2,..., got {item!r}")
        key, raw = item.split("=", 1)
        keys.append(key.strip())
        value_lists.append([v.strip() for v in raw.split(",") if v.strip()])
    cells = []
    for combo in itertools.product(*value_lists):
        # space-joined so the name stays a single CSV field
        name = " ".join(f"{k.split('.')[-1]}={v}" for k, v in zip(keys, combo))
        cells.append((name, dict(zip(keys, combo))))
    return cells


def cmd_ablate(args):
    base_cfg = _resolve_config(args)
    _print_config(base_cfg)
    os.makedirs(args.out, exist_ok=True)

    if args.sweep:
        cells = _sweep_cells(args.sweep)
    else:
        names = [v.strip() for v in args.variants.split(",") if v.strip()]
        unknown = [n for n in names if n not in VARIANTS]
        if unknown:
            raise ConfigError(f"unknown variants {unknown}; choose from {sorted(VARIANTS)}")
        cells = [(n, VARIANTS[n]) for n in names]

    base_seed = base_cfg["trainer.seed"]
    named_reports = []
    for name, toggles in cells:
        seed_reports = []
        for k in range(args.seeds):
            cfg = base_cfg.copy()
            for key, value in toggles.items():
                cfg.set(key, value)
            cfg.set("trainer.seed", base_seed + k)
            run_dir = os.path.join(args.out, name.replace(" ", "_").replace("=", ""), f"seed{k}")
            print(f"--- {name} seed {base_seed + k} -> {run_dir}")
            summary = trainer.run(cfg, args.data, run_dir)
            seed_reports.append(summary["final_report"])
        named_reports.append((name, _mean_report(name, seed_reports)))

    md, csv = evalkit.compare_runs(named_reports)
    with open(os.path.join(args.out, "ablation.md"), "w", encoding="utf-8") as fh:
        fh.write(md)
    with open(os.path.join(args.out, "ablation.csv"), "w", encoding="utf-8") as fh:
        fh.write(csv)
    print(md)
    return 0


def cmd_gradcheck(args):
    _print_config(Config())
    results = gradcheck.run_all(corrupt=args.corrupt_op, log=print)
    failed = [r for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed in {total:.1f}s")
    if failed:
        print("failed: " + ", ".join(r.name for r in failed))
        return 1
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="nightadapt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file of section.key = value lines")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )

    p = sub.add_parser("gen-data", help="generate the synthetic day/night dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--num-source", type=int)
    p.add_argument("--num-target", type=int)
    p.add_argument("--num-test", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a generated dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="resume from a trainstate checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the sealed night test split")
    common(p)
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="night-test")
    p.add_argument("--pred-dir", help="evaluate saved pred_NNNNN.dsrt dumps instead of a checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare toggle variants")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default="baseline,dsr,dsr_full,dsr_fpa_nw,full")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument(
        "--sweep",
        action="append",
        default=[],
        metavar="KEY=V1,V2",
        help="grid-sweep config keys instead of named variants (repeatable)",
    )
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--corrupt-op", help="fault-injection hook: corrupt one check by name")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # internal invariant violations
        print(f"internal error: {exc}", file=sys.stderr)
        traceback.print_exc()
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
