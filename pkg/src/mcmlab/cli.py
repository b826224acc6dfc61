"""``mcmlab`` command line: data generation, teacher training, distillation, evaluation, ablations.

Output layout under ``output_dir``::

    data/{lq,hq,reference}/         clip or image .npy files plus manifest.json
    teacher/teacher.ckpt            final teacher weights
    teacher/state.ckpt              resumable training state
    teacher/log.csv
    distill/<run>/student.ckpt      one directory per (motion, lambda_real, lambda_adv, seed)
    distill/<run>/log.csv
    eval/report.json, eval/*.png
    ablate/summary.json, ablate/*.csv, ablate/*.png
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config, parse_steps
from .data import (ParameterError, load_dataset, make_hq_image_dataset, make_lq_video_dataset,
                   make_reference_video_dataset, save_image_dataset, save_video_dataset)
from .diffusion import DivergenceError, train_teacher
from .distillation import DistillConfig, train_mcm
from .evaluation import Evaluator
from .motion import MotionKind
from .schedule import ScheduleError, build_linear_schedule

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

METRICS = ("fvd_proxy", "watermark_energy", "motion_err", "dark_frac")
LOG_FIELDS = ("step", "loss_G", "loss_D", "mcd_real", "mcd_gen", "adv_G", "adv_D")


class OutputExists(OSError):
    pass


# -- small helpers -------------------------------------------------------------

def _schedule(cfg: ExperimentConfig):
    s = cfg.schedule
    return build_linear_schedule(s.num_train_steps, s.beta_min, s.beta_max, s.epsilon_step, s.solver_points)


def _load(directory: Path, what: str):
    try:
        return load_dataset(directory)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"{what} dataset missing at {directory}; run `mcmlab gen-data` first") from exc


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; {hint}")
    return path


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class CsvLog:
    """Append-only CSV: the header is fixed on creation and rows are flushed as they come."""

    def __init__(self, path: Path, fields, fresh: bool = True):
        self.path = Path(path)
        self.fields = list(fields)
        if fresh or not self.path.exists():
            self.path.write_text(",".join(self.fields) + "\n")

    def append(self, row: dict) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(row.get(k)) for k in self.fields])


def metric_columns(steps) -> list[str]:
    return [f"{m}@{k}" for k in steps for m in METRICS]


def run_name(d: DistillConfig) -> str:
    return f"{d.motion_kind}_real{d.lambda_real:g}_adv{d.lambda_adv:g}_seed{d.seed}"


def _plot_losses(rows: list[dict], keys, path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in keys:
        pts = [(r["step"], r[key]) for r in rows if isinstance(r.get(key), float)]
        if pts:
            ax.plot(*zip(*pts), label=key, lw=1)
    ax.set_xlabel("step")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_step_sweep(rows: list[dict], steps, label_key: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(METRICS), figsize=(4 * len(METRICS), 3.2))
    for ax, metric in zip(axes, METRICS):
        for row in rows:
            ax.plot(steps, [row[f"{metric}@{k}"] for k in steps], marker="o", label=str(row[label_key]))
        ax.set_xscale("log", base=2)
        ax.set_xticks(list(steps), [str(k) for k in steps])
        ax.set_xlabel("sampling steps")
        ax.set_title(metric)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, force: bool = False) -> dict[str, Path]:
    root = Path(cfg.output_dir) / "data"
    targets = {"lq": root / "lq", "hq": root / "hq", "reference": root / "reference"}
    existing = [p for p in targets.values() if p.exists()]
    if existing and not force:
        raise OutputExists(f"{existing[0]} already exists; pass --force to overwrite")
    for p in existing:
        shutil.rmtree(p)
    # distinct sub-seeds so the three sets never share a random draw
    seed = cfg.seed
    save_video_dataset(make_lq_video_dataset(cfg.sizes.n_videos, cfg.data, seed), targets["lq"])
    save_image_dataset(make_hq_image_dataset(cfg.sizes.n_images, cfg.data, seed + 1), targets["hq"])
    save_video_dataset(make_reference_video_dataset(cfg.sizes.n_reference, cfg.data, seed + 2), targets["reference"])
    for name, p in targets.items():
        print(f"wrote {name}: {p}")
    return targets


def cmd_train_teacher(cfg: ExperimentConfig, force: bool = False) -> Path:
    out = Path(cfg.output_dir)
    lq = _load(out / "data" / "lq", "low-quality video")
    schedule = _schedule(cfg)
    tdir = out / "teacher"
    tdir.mkdir(parents=True, exist_ok=True)
    state_path, final_path = tdir / "state.ckpt", tdir / "teacher.ckpt"
    tcfg = cfg.teacher

    state = None
    if state_path.exists() and not force:
        state = ckpt.load_teacher_state(state_path, lq, tcfg, schedule)
        print(f"resuming teacher from step {state.step}")

    def write_log(log):
        csv_log = CsvLog(tdir / "log.csv", ("step", "loss"))
        for row in log:
            csv_log.append(row)

    def on_checkpoint(s):
        ckpt.save_teacher_state(state_path, s, schedule, tcfg)
        write_log(s.log)

    from .diffusion import init_teacher_state

    state = state or init_teacher_state(lq, tcfg, schedule)
    model, log = train_teacher(lq, tcfg, schedule, state=state, on_checkpoint=on_checkpoint,
                               checkpoint_every=tcfg.checkpoint_every)
    ckpt.save_teacher_state(state_path, state, schedule, tcfg)
    ckpt.save_teacher(final_path, model, schedule, tcfg.seed, state.step)
    write_log(log)
    _plot_losses(log, ["loss"], tdir / "loss.png", "teacher")
    print(f"teacher: {state.step} steps, final loss {log[-1]['loss']:.4g} -> {final_path}")
    return final_path


def make_evaluator(cfg: ExperimentConfig, steps=None) -> Evaluator:
    ref = _load(Path(cfg.output_dir) / "data" / "reference", "reference video")
    e = cfg.eval
    try:
        return Evaluator(ref, ref.params, n_samples=e.n_samples, steps=steps or e.steps, seed=e.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def distill_run(cfg: ExperimentConfig, dcfg: DistillConfig, run_dir: Path, evaluator: Evaluator | None = None,
                teacher=None, datasets=None) -> dict:
    """Train one student into ``run_dir``; returns the final evaluation row.

    On divergence the parameters from the last finite step are written to
    ``last_good.ckpt`` before the error propagates.
    """
    out = Path(cfg.output_dir)
    if teacher is None:
        teacher, schedule, _ = ckpt.load_teacher(_require(out / "teacher" / "teacher.ckpt",
                                                          "run `mcmlab train-teacher` first"))
    else:
        teacher, schedule = teacher
    lq, hq = datasets or (_load(out / "data" / "lq", "low-quality video"), _load(out / "data" / "hq", "image"))
    evaluator = evaluator or make_evaluator(cfg, dcfg.eval_steps)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(dcfg.to_dict(), indent=2, sort_keys=True))
    log = CsvLog(run_dir / "log.csv", list(LOG_FIELDS) + metric_columns(evaluator.steps))

    def on_step(step, student, D, row):
        log.append(row)

    try:
        result = train_mcm(teacher, lq, hq, dcfg, schedule, evaluator=evaluator, on_step=on_step)
    except DivergenceError as err:
        student, D = err.models
        path = run_dir / "last_good.ckpt"
        ckpt.save_student(path, student, dcfg.seed, err.checkpoint or 0, dcfg.motion_kind,
                          {"distill_config": dcfg.to_dict(), "diverged": True})
        raise DivergenceError(f"{err}; last good student saved to {path}", err.checkpoint) from err

    steps_done = dcfg.total_steps
    ckpt.save_student(run_dir / "student.ckpt", result.student, dcfg.seed, steps_done, dcfg.motion_kind,
                      {"distill_config": dcfg.to_dict()})
    ckpt.save_discriminator(run_dir / "discriminator.ckpt", result.discriminator, schedule, dcfg.seed, steps_done)
    _plot_losses(result.log, ["loss_G", "loss_D", "mcd_real", "mcd_gen", "adv_G"], run_dir / "loss.png",
                 run_name(dcfg))
    final = result.evals[-1] if result.evals else {}
    row = {"run": run_name(dcfg), "motion_kind": dcfg.motion_kind, "lambda_real": dcfg.lambda_real,
           "lambda_adv": dcfg.lambda_adv, "seed": dcfg.seed,
           **{k: v for k, v in final.items() if k != "step"}}
    (run_dir / "final_metrics.json").write_text(json.dumps(row, indent=2, sort_keys=True))
    return row


def cmd_distill(cfg: ExperimentConfig, force: bool = False) -> dict:
    run_dir = Path(cfg.output_dir) / "distill" / run_name(cfg.distill)
    if (run_dir / "student.ckpt").exists() and not force:
        raise OutputExists(f"{run_dir} already holds a trained student; pass --force to retrain")
    row = distill_run(cfg, cfg.distill, run_dir)
    print(_summary_line(row, cfg.distill.eval_steps))
    return row


def _summary_line(row: dict, steps) -> str:
    parts = [row.get("run", row.get("motion_kind", "?"))]
    parts += [f"fvd@{k}={row[f'fvd_proxy@{k}']:.4f}" for k in steps if f"fvd_proxy@{k}" in row]
    return "  ".join(parts)


def evaluate_checkpoint(path: Path, evaluator: Evaluator) -> dict:
    student, header = ckpt.load_student(path)
    metrics = evaluator(student)
    d = header.get("distill_config", {})
    return {"run": path.parent.name, "motion_kind": header["motion_kind"], "lambda_real": d.get("lambda_real"),
            "lambda_adv": d.get("lambda_adv"), "seed": header["seed"], "step": header["step"], **metrics}


def cmd_eval(cfg: ExperimentConfig, motion_given: bool = False) -> dict:
    """Evaluate the students matching the config's lambdas and seed, one row per motion kind.

    With ``--motion`` only that kind is evaluated; otherwise every kind in
    ``eval.motion_kinds`` that has a trained checkpoint.
    """
    out = Path(cfg.output_dir)
    kinds = [cfg.distill.motion_kind] if motion_given else list(cfg.eval.motion_kinds)
    paths = []
    for kind in kinds:
        d = DistillConfig(**{**cfg.distill.to_dict(), "motion_kind": kind})
        p = out / "distill" / run_name(d) / "student.ckpt"
        if p.exists():
            paths.append(p)
    if not paths:
        raise FileNotFoundError(f"no trained students under {out / 'distill'} match this config; "
                                "run `mcmlab distill` first")
    evaluator = make_evaluator(cfg)
    rows = [evaluate_checkpoint(p, evaluator) for p in paths]
    report = {"steps": list(evaluator.steps), "n_samples": evaluator.n, "eval_seed": evaluator.seed,
              "metrics": list(METRICS), "rows": rows}
    edir = out / "eval"
    edir.mkdir(parents=True, exist_ok=True)
    (edir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    _plot_step_sweep(rows, evaluator.steps, "motion_kind", edir / "metrics_vs_steps.png")
    for row in rows:
        print(_summary_line(row, evaluator.steps))
    return report


def ablation_cells(cfg: ExperimentConfig) -> list[tuple[str, str, DistillConfig]]:
    """``(table, label, config)`` for every cell; repeated configs are trained once."""
    base = cfg.distill.to_dict()
    adv = cfg.distill.lambda_adv
    cells = []
    for seed in cfg.ablate.seeds:
        def make(**kw):
            return DistillConfig(**{**base, "seed": seed, **kw})

        if "components" in cfg.ablate.tables:
            cells += [
                ("components", "Adv", make(motion_kind="raw", lambda_adv=adv, lambda_real=1.0)),
                ("components", "Adv+MCD", make(motion_kind="learnable", lambda_adv=adv, lambda_real=1.0)),
                ("components", "Adv+MCD+Mixed", make(motion_kind="learnable", lambda_adv=adv, lambda_real=0.5)),
            ]
        if "lambda_real" in cfg.ablate.tables:
            cells += [("lambda_real", f"lambda_real={lr:g}", make(lambda_real=lr)) for lr in (1.0, 0.5, 0.0)]
        if "motion" in cfg.ablate.tables:
            cells += [("motion", kind.value, make(motion_kind=kind.value)) for kind in MotionKind]
    return cells


def cmd_ablate(cfg: ExperimentConfig, force: bool = False) -> dict:
    out = Path(cfg.output_dir)
    teacher = ckpt.load_teacher(_require(out / "teacher" / "teacher.ckpt", "run `mcmlab train-teacher` first"))[:2]
    datasets = (_load(out / "data" / "lq", "low-quality video"), _load(out / "data" / "hq", "image"))
    evaluator = make_evaluator(cfg, cfg.distill.eval_steps)
    done: dict[str, dict] = {}
    tables: dict[str, list] = {}
    for table, label, dcfg in ablation_cells(cfg):
        name = run_name(dcfg)
        if name not in done:
            run_dir = out / "distill" / name
            cached = _cached_row(run_dir, evaluator.steps) if not force else None
            if cached is not None:
                done[name] = cached
            else:
                done[name] = distill_run(cfg, dcfg, run_dir, evaluator, teacher, datasets)
            print(f"[{table}] {label}: {_summary_line(done[name], evaluator.steps)}")
        tables.setdefault(table, []).append({"label": label, **done[name]})

    adir = out / "ablate"
    adir.mkdir(parents=True, exist_ok=True)
    for table, rows in tables.items():
        cols = ["label", "seed", "run"] + metric_columns(evaluator.steps)
        log = CsvLog(adir / f"table_{table}.csv", cols)
        for row in rows:
            log.append(row)
        _plot_step_sweep(_seed_means(rows, evaluator.steps), evaluator.steps, "label", adir / f"table_{table}.png")
    summary = {"steps": list(evaluator.steps), "seeds": list(cfg.ablate.seeds), "tables": tables}
    (adir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _cached_row(run_dir: Path, steps) -> dict | None:
    """Reuse a finished cell only if it was evaluated at every requested step count."""
    path = run_dir / "final_metrics.json"
    if not (path.exists() and (run_dir / "student.ckpt").exists()):
        return None
    row = json.loads(path.read_text())
    return row if all(c in row for c in metric_columns(steps)) else None


def _seed_means(rows: list[dict], steps) -> list[dict]:
    labels = list(dict.fromkeys(r["label"] for r in rows))
    cols = metric_columns(steps)
    return [{"label": lab, **{c: float(np.mean([r[c] for r in rows if r["label"] == lab])) for c in cols}}
            for lab in labels]


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcmlab", description="Toy-scale motion consistency distillation lab.")
    p.add_argument("command", choices=["gen-data", "train-teacher", "distill", "eval", "ablate"])
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--motion", choices=[k.value for k in MotionKind])
    p.add_argument("--lambda-real", type=float)
    p.add_argument("--lambda-adv", type=float)
    p.add_argument("--steps", help="comma-separated sampling step counts, e.g. 1,2,4,8")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_overrides(load_config(args.config), seed=args.seed, out=args.out, motion=args.motion,
                              lambda_real=args.lambda_real, lambda_adv=args.lambda_adv,
                              steps=parse_steps(args.steps) if args.steps else None)
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.force)
        elif args.command == "train-teacher":
            cmd_train_teacher(cfg, args.force)
        elif args.command == "distill":
            cmd_distill(cfg, args.force)
        elif args.command == "eval":
            cmd_eval(cfg, motion_given=args.motion is not None)
        else:
            cmd_ablate(cfg, args.force)
    except (ConfigError, ParameterError, ScheduleError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
