"""Command-line entry points.

Every command takes ``--config`` (YAML, see ``configs/``), optional
``--seed`` and repeatable ``--override key.path=value``, and writes its
artifacts under ``--out``. Runs get their own directory named
``<timestamp>-seed<N>`` holding ``config.resolved.yaml``, ``metrics.jsonl``,
``checkpoints/`` and ``final_report.csv``.

Exit codes: 0 success, 2 usage, 3 configuration, 4 data, 5 numerical
failure, 6 teacher precondition.
"""
from __future__ import annotations

import argparse
import json
import logging
import pickle
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import config as conf
from . import report as rep
from . import theory as th
from .data import DataError, Dataset, SyntheticTaskSpec, load_image_subset, make_synthetic
from .attacks import AttackError
from .fairness import DegenerateEpochError, per_class_accuracy
from .models import ModelSpec, build_model, freeze
from .trainer import (
    NumericalError,
    derive_seed,
    evaluate,
    init_model,
    load_weights,
    scaled_milestones,
    select_checkpoint,
    train,
)

log = logging.getLogger("absld")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_PRECONDITION = 0, 2, 3, 4, 5, 6


# ---------------------------------------------------------------------------
# shared plumbing


def build_datasets(cfg: dict) -> tuple:
    d = cfg["dataset"]
    if d["name"] == "synthetic":
        s = d["synthetic"]
        try:
            spec = SyntheticTaskSpec(s["means"], s["scales"], s["samples_per_class"])
        except (ValueError, TypeError) as exc:
            raise conf.ConfigError(f"dataset.synthetic: {exc}") from None
        return make_synthetic(spec, s["data_seed"], "train"), make_synthetic(spec, s["data_seed"], "test")
    try:
        return (load_image_subset(d["name"], d["per_class"], "train"),
                load_image_subset(d["name"], d["test_per_class"], "test"))
    except (OSError, KeyError) as exc:
        raise DataError(f"cannot load {d['name']}: {exc}") from None


def save_model(path, model, spec: ModelSpec, ckpt=None, role: str = "student") -> None:
    payload = {"role": role, "model": spec.to_dict(), "state": model.state_dict()}
    if ckpt is not None:
        payload["checkpoint"] = ckpt.to_payload()
    torch.save(payload, path)


def load_model(path):
    """Rebuild a saved model; returns (model, spec, payload)."""
    try:
        payload = torch.load(path, weights_only=True)
    except (OSError, RuntimeError, pickle.UnpicklingError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from None
    try:
        spec = ModelSpec(**payload["model"])
        model = build_model(spec)
        model.load_state_dict(payload["state"])
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise DataError(f"{path} is not a model checkpoint: {exc}") from None
    model.eval()
    return model, spec, payload


def check_compatible(spec: ModelSpec, data: Dataset) -> None:
    if tuple(spec.input_shape) != data.input_shape or spec.num_classes != data.num_classes:
        raise DataError(
            f"checkpoint expects input {tuple(spec.input_shape)} with {spec.num_classes} classes, "
            f"dataset has {data.input_shape} with {data.num_classes}"
        )


def make_run_dir(out, seed: int) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(out) / f"{stamp}-seed{seed}"
    run, n = base, 1
    while run.exists():
        run = base.with_name(f"{base.name}-{n}")
        n += 1
    (run / "checkpoints").mkdir(parents=True)
    return run


def load_teacher(cfg: dict, data: Dataset):
    path = cfg["teacher"]["checkpoint"]
    if path is None:
        raise conf.ConfigError(f"teacher.checkpoint is required for loss {cfg['training']['loss']!r}")
    teacher, spec, _ = load_model(path)
    check_compatible(spec, data)
    return freeze(teacher)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _final_report(run: Path, model, test_set, cfg: dict) -> dict:
    reports = evaluate(model, test_set, tuple(cfg["attack_eval"]["attacks"]), conf.eval_configs(cfg),
                       seed=derive_seed(cfg["seed"], 0xE5A1), q=cfg["training"]["eval_q"])
    rep.write_fairness_csv(reports, run / "final_report.csv")
    return reports


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain_teacher(cfg: dict, out) -> Path:
    """TRADES-train the teacher described by the ``teacher`` section."""
    train_set, test_set = build_datasets(cfg)
    t = cfg["teacher"]
    spec = conf.build_model_spec(cfg, "teacher", train_set.num_classes, train_set.input_shape)
    tcfg = replace(conf.build_training_config(cfg), loss="trades", trades_lambda=t["trades_lambda"], seed=t["seed"])
    if t["epochs"] is not None:
        tcfg = replace(tcfg, max_epochs=t["epochs"], lr_milestones=scaled_milestones(t["epochs"]))
    run = make_run_dir(out, t["seed"])
    conf.dump_config(cfg, run / "config.resolved.yaml")
    model = init_model(lambda: build_model(spec), t["seed"])
    history = train(tcfg, model, None, train_set, test_set, metrics_path=run / "metrics.jsonl", keep_weights=False)
    load_weights(model, history[-1])
    freeze(model)
    save_model(run / "checkpoints" / "teacher.pt", model, spec, role="teacher")
    _final_report(run, model, test_set, cfg)
    task = th.TheoryTask("teacher", train_set, test_set, spec, spec, tcfg)
    try:
        acc = th.check_teacher(model, task)
        ok = True
    except th.PreconditionError as exc:
        log.warning("%s", exc)
        with torch.no_grad():
            pred = model(test_set.x).argmax(1).numpy()
        acc, ok = per_class_accuracy(pred, test_set.y.numpy(), test_set.num_classes), False
    _write_json(run / "teacher_check.json", {"per_class_clean_accuracy": list(map(float, acc)), "all_above_half": ok})
    log.info("teacher written to %s", run / "checkpoints" / "teacher.pt")
    return run


def cmd_train(cfg: dict, out) -> Path:
    train_set, test_set = build_datasets(cfg)
    tcfg = conf.build_training_config(cfg)
    teacher = load_teacher(cfg, train_set) if tcfg.needs_teacher else None
    spec = conf.build_model_spec(cfg, "model", train_set.num_classes, train_set.input_shape)
    run = make_run_dir(out, cfg["seed"])
    conf.dump_config(cfg, run / "config.resolved.yaml")
    student = init_model(lambda: build_model(spec), cfg["seed"])
    history = train(tcfg, student, teacher, train_set, test_set, metrics_path=run / "metrics.jsonl")
    last = history[-1]
    selector = "pgd20" if "pgd20" in tcfg.eval_attacks else tcfg.eval_attacks[0]
    best = select_checkpoint(history, selector, tcfg.select_on)
    save_model(run / "checkpoints" / "last.pt", load_weights(student, last), spec, last)
    save_model(run / "checkpoints" / "best.pt", load_weights(student, best), spec, best)
    _final_report(run, student, test_set, cfg)
    _write_json(run / "run.json", {"seed": cfg["seed"], "selected_epoch": best.epoch, "epochs": len(history)})
    log.info("run written to %s (selected epoch %d)", run, best.epoch)
    return run


def cmd_evaluate(cfg: dict, out, checkpoint, attacks=None) -> Path:
    _, test_set = build_datasets(cfg)
    model, spec, _ = load_model(checkpoint)
    check_compatible(spec, test_set)
    attacks = tuple(attacks or cfg["attack_eval"]["attacks"])
    bad = [a for a in attacks if a not in conf.EVAL_ATTACKS]
    if bad:
        raise conf.ConfigError(f"unknown attacks {bad}; allowed {list(conf.EVAL_ATTACKS)}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    reports = evaluate(model, test_set, attacks, conf.eval_configs(cfg),
                       seed=derive_seed(cfg["seed"], 0xE5A1), q=cfg["training"]["eval_q"])
    path = out / "evaluation.csv"
    rep.write_fairness_csv(reports, path)
    return path


def theory_task(cfg: dict) -> th.TheoryTask:
    train_set, test_set = build_datasets(cfg)
    C = train_set.num_classes
    t = cfg["theory"]
    base = replace(conf.build_training_config(cfg), loss="sat-smooth", smoothing=(t["ssd_gamma"],) * C,
                   eval_attacks=("pgd20",))
    return th.TheoryTask(
        name=cfg["dataset"]["name"],
        train_set=train_set,
        test_set=test_set,
        student=conf.build_model_spec(cfg, "model", C, train_set.input_shape),
        teacher=conf.build_model_spec(cfg, "teacher", C, train_set.input_shape),
        base=base,
    )


def _theory_teacher(cfg: dict, task: th.TheoryTask):
    if cfg["teacher"]["checkpoint"] is not None:
        return load_teacher(cfg, task.train_set)
    return th.pretrain_teacher(task, seed=cfg["teacher"]["seed"], epochs=cfg["teacher"]["epochs"],
                               lambda_trades=cfg["teacher"]["trades_lambda"])


def cmd_theory(cfg: dict, out) -> Path:
    t = cfg["theory"]
    if not t["seeds"]:
        raise conf.ConfigError("theory.seeds is empty")
    if not t["experiments"]:
        raise conf.ConfigError("theory.experiments is empty")
    if "temperature" in t["experiments"] and (not t["tau_hard_grid"] or not t["tau_easy_grid"]):
        raise conf.ConfigError("theory.tau_hard_grid and theory.tau_easy_grid must be non-empty")
    task = theory_task(cfg)
    C = task.num_classes
    run = make_run_dir(out, cfg["seed"])
    conf.dump_config(cfg, run / "config.resolved.yaml")
    hard = th.designate_hard_classes(task, t["designation_seed"])
    summary = {"task": task.name, "hard": list(hard), "seeds": list(t["seeds"])}

    if "ssd_dsd" in t["experiments"]:
        ssd = th.SmoothnessAssignment.ssd(C, t["ssd_gamma"])
        dsd = th.SmoothnessAssignment.dsd(hard, C, t["dsd_gamma_hard"], t["dsd_gamma_easy"])
        res = th.run_ssd_vs_dsd(task, ssd, dsd, t["seeds"])
        rows = [{"arm": arm, **getattr(p, arm.lower()).to_record()} for p in res.pairs for arm in ("SSD", "DSD")]
        _write_dict_rows(run / "ssd_dsd.csv", rows)
        curves = {f"{arm}/seed{p.seed}": getattr(p, arm.lower()).per_class_acc for p in res.pairs for arm in ("SSD", "DSD")}
        for arm in ("SSD", "DSD"):
            curves[f"{arm}/median"] = np.median([getattr(p, arm.lower()).per_class_acc for p in res.pairs], axis=0)
        rep.write_rows(run / "ssd_dsd_series.csv", ["curve", "class", "pgd20_accuracy"], rep.class_series(curves))
        summary["ssd_dsd"] = res.summary()

    if {"temperature", "manual_adaptive"} & set(t["experiments"]):
        teacher = _theory_teacher(cfg, task)
        th.check_teacher(teacher, task)
        if "temperature" in t["experiments"]:
            surface = th.run_temperature_monotonicity(task, teacher, tuple(t["tau_hard_grid"]),
                                                      tuple(t["tau_easy_grid"]), t["seeds"], t["alpha"])
            _write_dict_rows(run / "temperature_gaps.csv", surface.rows())
            rho_h, rho_e = surface.spearman_per_seed("hard"), surface.spearman_per_seed("easy")
            rep.write_rows(run / "temperature_spearman.csv", ["seed", "spearman_tau_hard", "spearman_tau_easy"],
                           [[s, f"{a:.4f}", f"{b:.4f}"] for s, a, b in zip(surface.seeds, rho_h, rho_e)])
            summary["temperature"] = {"spearman_hard": rho_h, "spearman_easy": rho_e,
                                      "teacher_clean_accuracy": list(surface.teacher_acc)}
        if "manual_adaptive" in t["experiments"]:
            table = th.manual_table(task, t["manual_tau_hard"], t["manual_tau_easy"])
            cmp_ = th.run_manual_vs_adaptive(task, teacher, table, t["seeds"], t["alpha"])
            _write_dict_rows(run / "manual_adaptive.csv", cmp_.rows())
            summary["manual_adaptive"] = {"table": list(table), "adaptive_wins": cmp_.adaptive_wins(),
                                          "seeds": len(cmp_.seeds)}
    _write_json(run / "summary.json", summary)
    return run


def _write_dict_rows(path, rows: list) -> None:
    header = list(rows[0].keys()) if rows else []
    rep.write_rows(path, header, [[r.get(k, "") for k in header] for r in rows])


def cmd_report(run_dirs, out) -> dict:
    return rep.aggregate_runs(run_dirs, out)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="absld", description="Per-class temperature adversarial distillation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="run configuration (YAML)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, e.g. scheduler.mode=fixed (repeatable)")
        p.add_argument("--out", default="runs", help="output directory")
        p.add_argument("--workers", type=int, default=1, help="CPU threads for tensor operations")
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("pretrain-teacher", help="TRADES-train a teacher"))
    common(sub.add_parser("train", help="train a student"))
    ev = sub.add_parser("evaluate", help="class-wise robustness table for a checkpoint")
    common(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--attacks", help="comma-separated subset of clean,fgsm,pgd20,cw30")
    common(sub.add_parser("theory", help="run the smoothness/temperature experiments"))
    rp = sub.add_parser("report", help="merge finished runs")
    rp.add_argument("runs", nargs="+", help="run directories")
    rp.add_argument("--out", default="report")
    rp.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "report":
            paths = cmd_report(args.runs, args.out)
            print("\n".join(str(p) for p in paths.values()))
            return EXIT_OK
        if args.workers < 1:
            raise conf.ConfigError("--workers must be positive")
        torch.set_num_threads(args.workers)
        cfg = conf.load_config(args.config, args.override, args.seed)
        if args.command == "pretrain-teacher":
            result = cmd_pretrain_teacher(cfg, args.out)
        elif args.command == "train":
            result = cmd_train(cfg, args.out)
        elif args.command == "evaluate":
            attacks = args.attacks.split(",") if args.attacks else None
            result = cmd_evaluate(cfg, args.out, args.checkpoint, attacks)
        else:
            result = cmd_theory(cfg, args.out)
        print(result)
        return EXIT_OK
    except (conf.ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DegenerateEpochError, rep.ReportError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, AttackError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except th.PreconditionError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())
