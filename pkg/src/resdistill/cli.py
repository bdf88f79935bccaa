"""Command-line driver.

Every subcommand reads one config file (defaults when omitted), writes its
artifacts under the output directory and records itself in ``run.lock``.
Running a subcommand again into the same directory needs ``--force``.
Failures print a single ``resdistill: error: <kind>: <message>`` line and exit
with status 2 (status 1 is reserved for a failed gradient check).
"""
from __future__ import annotations

import argparse
import logging
import os
import statistics
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from . import cost, data, distill, evaluation, gradsuite, nn, plots
from . import tensor as T

log = logging.getLogger("resdistill")

LOCK_NAME = "run.lock"
RESOLVED_NAME = "config.resolved"


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# -- file helpers ----------------------------------------------------------------

def write_atomic(path: Path, payload) -> None:
    """Write a whole file via a temporary sibling and an atomic rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload.encode() if isinstance(payload, str) else payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(params: nn.ParameterSet, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        nn.save(params, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Workspace:
    """Output directory guarded by ``run.lock``."""

    def __init__(self, root: Path, cfg: C.ExperimentConfig, command: str, force: bool):
        self.root = root
        self.cfg = cfg
        self.command = command
        self.force = force

    def claim(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        lock = self.root / LOCK_NAME
        done = lock.read_text().split() if lock.exists() else []
        resolved = self.cfg.dump()
        old = self.root / RESOLVED_NAME
        if not self.force:
            if self.command in done:
                raise CliError("occupied", f"{self.root} already holds '{self.command}' output "
                                           f"(see {LOCK_NAME}); pass --force to overwrite")
            if done and old.exists() and old.read_text() != resolved:
                raise CliError("occupied", f"{self.root} was produced with a different config; "
                                           "use another --output or pass --force")
        write_atomic(old, resolved)
        if self.command not in done:
            done.append(self.command)
        write_atomic(lock, "\n".join(done) + "\n")

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def write(self, name, payload) -> Path:
        p = self.path(name)
        write_atomic(p, payload)
        log.info("wrote %s", p)
        return p


# -- data ------------------------------------------------------------------------

def load_data(cfg: C.ExperimentConfig, need_train: bool = True):
    """(train, eval) datasets at their native resolution."""
    if cfg["data.source"] == "synthetic":
        p = cfg.synthetic_params()
        ch = cfg["model.in_channels"]
        train = (data.generate_synthetic(cfg["data.num_ids"], cfg["data.per_id"], cfg["data.base_res"],
                                         ch, cfg["data.seed"], p) if need_train else None)
        ev = data.generate_synthetic(cfg["data.eval_num_ids"], cfg["data.eval_per_id"],
                                     cfg["data.base_res"], ch, cfg["data.eval_seed"], p)
        return train, ev
    train = data.load_dataset(cfg["data.manifest"]) if need_train else None
    if not cfg["data.eval_manifest"]:
        raise CliError("config", "data.eval_manifest is required for evaluation with manifest data")
    return train, data.load_dataset(cfg["data.eval_manifest"])


def _check_base(ds: data.Dataset, resolution: int, what: str) -> None:
    if ds.resolution < resolution:
        raise CliError("data", f"{what} images are {ds.resolution}px, below requested {resolution}px")


def load_params(path: str, cfg: C.ExperimentConfig) -> nn.ParameterSet:
    if not Path(path).exists():
        raise CliError("checkpoint", f"checkpoint not found: {path}")
    return nn.load(path, cfg.model_config())


# -- outputs ---------------------------------------------------------------------

def curve_files(ws: Workspace, prefix: str, report: evaluation.MetricReport) -> None:
    far, tar = report.det_curve
    ws.write(f"{prefix}_det.csv", evaluation.curve_csv(["far", "tar"], far, tar))
    fpir, tpir = report.openset_curve
    ws.write(f"{prefix}_openset.csv", evaluation.curve_csv(["fpir", "tpir"], fpir, tpir))
    ranks = range(1, len(report.cmc) + 1)
    ws.write(f"{prefix}_cmc.csv", evaluation.curve_csv(["rank", "rate"], ranks, report.cmc))


def median_rows(per_seed: list[list[evaluation.MetricRow]]) -> list[evaluation.MetricRow]:
    """Median value (and threshold) of each metric across seeds."""
    groups: dict[tuple, list] = {}
    for rows in per_seed:
        for r in rows:
            groups.setdefault((r.protocol, r.resolution, r.regime, r.target), []).append(r)
    out = []
    for (proto, res, regime, target), rs in groups.items():
        ok = all(r.achievable for r in rs)
        out.append(evaluation.MetricRow(
            proto, res, regime, target, statistics.median(r.threshold for r in rs),
            statistics.median(r.value for r in rs) if ok else float("nan"), ok))
    return evaluation.sort_rows(out)


def write_tables(ws: Workspace, rows: list[evaluation.MetricRow]) -> None:
    ws.write("metrics.csv", evaluation.metrics_csv(rows))
    ws.write("table1.csv", evaluation.metrics_csv([r for r in rows if r.protocol == "open_set_dir"]))
    ws.write("table7.csv", evaluation.metrics_csv([r for r in rows if r.protocol != "open_set_dir"]))


def write_plots(ws: Workspace, labelled_reports: list[tuple[str, evaluation.MetricReport]]) -> None:
    ws.write("det.svg", plots.det_plot([(lab, *rep.det_curve) for lab, rep in labelled_reports]))
    ws.write("cmc.svg", plots.cmc_plot([(lab, rep.cmc) for lab, rep in labelled_reports]))


# -- subcommands -------------------------------------------------------------------

def cmd_train_teacher(args, cfg, ws):
    train, ev = load_data(cfg)
    tc = cfg.train_config()
    res = tc.teacher_resolution
    _check_base(train, res, "training")
    params, tlog = distill.train_teacher(cfg.model_config(), train, tc)
    save_checkpoint(params, ws.path(f"teacher_{res}.rdt"))
    ws.write(f"teacher_{res}_log.csv", tlog.to_csv(cfg["output.timing"]))
    report = evaluation.evaluate(params, data.downsample(ev.images, res), ev.manifest, res,
                                 "teacher", cfg.eval_settings())
    ws.write("metrics.csv", evaluation.metrics_csv(report.rows()))
    print(f"teacher_{res}.rdt DIR@{cfg['eval.far_targets'][0]:g}="
          f"{100 * report.dir_points[0].achieved_metric:.2f}")


def cmd_train_student(args, cfg, ws):
    regime = cfg.regime()
    teacher = load_params(args.teacher, cfg)
    train, ev = load_data(cfg)
    tc = cfg.train_config()
    _check_base(train, tc.teacher_resolution, "training")
    if train.num_classes != teacher.num_classes:
        raise CliError("checkpoint", f"teacher has {teacher.num_classes} classes, "
                                     f"training data has {train.num_classes}")
    student = distill.init_student(regime, cfg.model_config(), teacher,
                                   distill._derive(tc.seed, 2))
    pairs = data.make_pairs(train, tc.teacher_resolution, tc.student_resolution)
    student, slog = distill.train_student(regime, teacher, student, pairs, tc)
    name = f"{regime.kind}_{tc.student_resolution}"
    save_checkpoint(student, ws.path(f"{name}.rdt"))
    ws.write(f"{name}_log.csv", slog.to_csv(cfg["output.timing"]))
    report = evaluation.evaluate(student, data.downsample(ev.images, tc.student_resolution),
                                 ev.manifest, tc.student_resolution, regime.kind, cfg.eval_settings())
    ws.write("metrics.csv", evaluation.metrics_csv(report.rows()))
    print(f"{name}.rdt DIR@{cfg['eval.far_targets'][0]:g}="
          f"{100 * report.dir_points[0].achieved_metric:.2f}")


def cmd_ladder(args, cfg, ws):
    train, ev = load_data(cfg)
    settings = cfg.ladder_settings()
    _check_base(train, settings.resolutions[0], "training")
    _check_base(ev, settings.resolutions[0], "evaluation")
    per_seed: dict[int, list] = {}

    def on_cell(cell):
        sub = f"seed{cell.seed}"
        name = f"{cell.regime}_{cell.resolution}"
        save_checkpoint(cell.params, ws.path(sub, f"{name}.rdt"))
        ws.write(Path(sub, f"{name}_log.csv"), cell.log.to_csv(cfg["output.timing"]))
        curve_files(ws, str(Path(sub, "curves", name)), cell.report)
        per_seed.setdefault(cell.seed, []).append(cell)
        log.info("seed %d %s@%d: DIR=%.2f", cell.seed, cell.regime, cell.resolution,
                 100 * cell.report.dir_points[0].achieved_metric if cell.report.dir_points else float("nan"))

    distill.run_ladder(cfg.model_config(), train, ev, settings, cfg.train_config(),
                       cfg.eval_settings(), on_cell=on_cell)
    for seed, cells in per_seed.items():
        ws.write(Path(f"seed{seed}", "metrics.csv"),
                 evaluation.metrics_csv([r for c in cells for r in c.report.rows()]))
    rows = median_rows([[r for c in cells for r in c.report.rows()] for cells in per_seed.values()])
    write_tables(ws, rows)
    first = per_seed[settings.seeds[0]]
    write_plots(ws, [(f"{c.regime} {c.resolution}", c.report) for c in first])
    teacher = first[0].params
    timing = teacher if cfg["output.timing"] else None
    ws.write("cost.csv", cost.cost_csv(cost.cost_table(cfg.model_config(), settings.resolutions, timing)))
    print(evaluation.metrics_csv([r for r in rows if r.protocol == "open_set_dir"]), end="")


def _resolution(args, cfg, params) -> int:
    return args.resolution or cfg["train.teacher_resolution"]


def cmd_extract(args, cfg, ws):
    params = load_params(args.checkpoint, cfg)
    _, ev = load_data(cfg, need_train=False)
    res = _resolution(args, cfg, params)
    _check_base(ev, res, "evaluation")
    emb = evaluation.extract_embeddings(params, data.downsample(ev.images, res), cfg["eval.flip"])
    lines = ["index,identity," + ",".join(f"e{i}" for i in range(emb.shape[1]))]
    for i, (lab, row) in enumerate(zip(ev.labels, emb)):
        lines.append(f"{i},{lab}," + ",".join(repr(float(v)) for v in row))
    ws.write(f"embeddings_{res}.csv", "\n".join(lines) + "\n")


def cmd_evaluate(args, cfg, ws):
    params = load_params(args.checkpoint, cfg)
    _, ev = load_data(cfg, need_train=False)
    res = _resolution(args, cfg, params)
    _check_base(ev, res, "evaluation")
    regime = args.regime or Path(args.checkpoint).stem.rsplit("_", 1)[0]
    report = evaluation.evaluate(params, data.downsample(ev.images, res), ev.manifest, res, regime,
                                 cfg.eval_settings())
    ws.write("metrics.csv", evaluation.metrics_csv(report.rows()))
    curve_files(ws, f"{regime}_{res}", report)
    write_plots(ws, [(f"{regime} {res}", report)])
    print(evaluation.metrics_csv(report.rows()), end="")


def cmd_cost(args, cfg, ws):
    mc = cfg.model_config()
    params = nn.build(mc, 2, seed=cfg["train.seed"])
    rows = cost.cost_table(mc, cfg["ladder.resolutions"], params, repeats=args.repeats)
    text = cost.cost_csv(rows)
    ws.write("cost.csv", text)
    print(text, end="")


def cmd_gradcheck(args, cfg, ws):
    results = gradsuite.run(seed=cfg["train.seed"])
    lines = ["case,max_rel_error"] + [f"{k},{v:.3e}" for k, v in results.items()]
    ws.write("gradcheck.csv", "\n".join(lines) + "\n")
    for k, v in results.items():
        status = "ok" if v <= gradsuite.TOLERANCE else "FAIL"
        print(f"{k:24s} {v:.3e} {status}")
    if not gradsuite.passed(results):
        worst = max(results, key=results.get)
        print(f"resdistill: error: gradcheck: {worst} relative error {results[worst]:.3e} "
              f"exceeds {gradsuite.TOLERANCE:g}", file=sys.stderr)
        return 1
    return 0


def cmd_report(args, cfg, ws):
    root = ws.root
    seed_dirs = sorted(p for p in root.glob("seed*") if (p / "metrics.csv").exists())
    if seed_dirs:
        per_seed = [evaluation.parse_metrics_csv((p / "metrics.csv").read_text()) for p in seed_dirs]
        rows = median_rows(per_seed)
    elif (root / "metrics.csv").exists():
        rows = evaluation.parse_metrics_csv((root / "metrics.csv").read_text())
    else:
        raise CliError("data", f"no metrics.csv under {root}; run ladder or evaluate first")
    write_tables(ws, rows)
    curves = []
    for det in sorted((seed_dirs[0] / "curves" if seed_dirs else root).glob("*_det.csv")):
        stem = det.name[: -len("_det.csv")]
        cmc_file = det.with_name(f"{stem}_cmc.csv")
        far_tar = np.loadtxt(det, delimiter=",", skiprows=1, ndmin=2)
        cmc = np.loadtxt(cmc_file, delimiter=",", skiprows=1, ndmin=2)[:, 1] if cmc_file.exists() else np.zeros(1)
        curves.append((stem.replace("_", " "), far_tar[:, 0], far_tar[:, 1], cmc))
    if curves:
        ws.write("det.svg", plots.det_plot([(lab, f, t) for lab, f, t, _ in curves]))
        ws.write("cmc.svg", plots.cmc_plot([(lab, c) for lab, _, _, c in curves]))
    print(evaluation.metrics_csv(rows), end="")


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "ladder": cmd_ladder,
    "extract": cmd_extract,
    "evaluate": cmd_evaluate,
    "cost": cmd_cost,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat section.key = value config file")
    common.add_argument("--output", help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=int, help="overrides train.seed")
    common.add_argument("--jobs", type=int, help="concurrent ladder cells (overrides ladder.jobs)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = argparse.ArgumentParser(prog="resdistill",
                                description="Cross-resolution teacher/student training and evaluation.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train-teacher", parents=[common], help="train the teacher at train.teacher_resolution")
    s = sub.add_parser("train-student", parents=[common], help="train one student (train.regime)")
    s.add_argument("--teacher", required=True, help="teacher checkpoint (.rdt)")
    sub.add_parser("ladder", parents=[common], help="teacher plus every (resolution, regime) student")
    for name, text in (("extract", "write eval-set embeddings of a checkpoint"),
                       ("evaluate", "verification and open-set metrics of a checkpoint")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--checkpoint", required=True, help="model checkpoint (.rdt)")
        s.add_argument("--resolution", type=int, help="input resolution (default train.teacher_resolution)")
        if name == "evaluate":
            s.add_argument("--regime", help="label for the metric rows (default from file name)")
    s = sub.add_parser("cost", parents=[common], help="analytic cost table over ladder.resolutions")
    s.add_argument("--repeats", type=int, default=5, help="timed forward passes per resolution (>= 3)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    sub.add_parser("report", parents=[common], help="rebuild tables and plots from an output dir")
    return p


def _setup_logging() -> None:
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    name = os.environ.get("RD_LOG", "info").lower()
    if name not in level:
        raise CliError("config", f"RD_LOG must be quiet, info or debug, got {name!r}")
    logging.basicConfig(level=level[name], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def _resolve_config(args) -> C.ExperimentConfig:
    cfg = C.parse_config(args.config) if args.config else C.default_config()
    overrides = {}
    if args.seed is not None:
        overrides["train__seed"] = args.seed
    if args.jobs is not None:
        overrides["ladder__jobs"] = args.jobs
    if args.output is not None:
        overrides["output__dir"] = args.output
    return cfg.with_overrides(**overrides) if overrides else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        cfg = _resolve_config(args)
        ws = Workspace(Path(cfg["output.dir"]), cfg, args.command, args.force)
        ws.claim()
        return COMMANDS[args.command](args, cfg, ws) or 0
    except CliError as e:
        kind, msg = e.kind, str(e)
    except C.ConfigError as e:
        kind, msg = "config", str(e)
    except T.CheckpointError as e:
        kind, msg = "checkpoint", str(e)
    except T.ShapeError as e:
        kind, msg = "shape", str(e)
    except distill.TrainingDivergedError as e:
        kind, msg = "diverged", str(e)
    except (data.ManifestError, OSError) as e:
        kind, msg = "data", str(e)
    except ValueError as e:
        kind, msg = "invalid", str(e)
    print(f"resdistill: error: {kind}: {' '.join(msg.split())}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
