"""Command-line front end.

Subcommands: ``gfsl``, ``ifsl``, ``ablate``, ``gradcheck`` and ``gen-data``.
Outputs land in ``--output`` or, by default, ``$LCWOF_OUTPUT_ROOT/<command>``
(``runs/<command>`` when the variable is unset). Every file is written to a
temporary name and renamed into place once the whole run has succeeded.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Sequence

from . import gradcheck
from .config import ABLATIONS, LAMBDA_GRID, ExperimentConfig, PhaseConfig, apply_ablation, load_config, to_ini
from .data import DatasetError, generate_synthetic, save_binary, save_csv
from .metrics import METRIC_KEYS, REPORT_FIELDS, MetricsReport
from .protocol import STAGES, GFSLResult, gfsl_data, ifsl_data, run_gfsl, run_ifsl_many, train_phase1

OUTPUT_ENV = "LCWOF_OUTPUT_ROOT"
QUADRANTS = ("default", "no_ce_bn", "no_wc", "neither")


class CliError(Exception):
    pass


# -- config resolution -----------------------------------------------------------

def _parse_value(raw: str) -> Any:
    low = raw.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    for kind in (int, float):
        try:
            return kind(raw)
        except ValueError:
            pass
    return raw


def _override_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    if "." in key:
        phase, name = key.split(".", 1)
        key = f"{phase}__{name}"
    return key


def _check_override(key: str) -> None:
    top = set(ExperimentConfig.__dataclass_fields__)
    if "__" in key:
        phase, name = key.split("__", 1)
        if phase not in ("phase1", "phase2", "phase3") or name not in PhaseConfig.__dataclass_fields__:
            raise CliError(f"unknown config key {key!r}")
    elif key not in top or key in ("phase1", "phase2", "phase3"):
        raise CliError(f"unknown config key {key!r}")


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then the config file, then the ablation delta, then explicit flags."""
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
    except FileNotFoundError as exc:
        raise CliError(f"config file not found: {exc}") from exc
    ablation = getattr(args, "ablation", None)
    if ablation and ablation != "lambda_sweep":
        cfg = apply_ablation(cfg, ablation)
    kw: dict[str, Any] = {}
    if args.data is not None:
        kw["data_path"] = args.data
    if args.synthetic:
        kw["data_path"] = ""
    for flag in ("seed", "episodes", "workers", "k_shot", "n_way"):
        v = getattr(args, flag, None)
        if v is not None:
            kw[flag] = v
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        k = _override_key(k)
        _check_override(k)
        kw[k] = _parse_value(v)
    try:
        return cfg.replace(**kw)
    except (TypeError, ValueError) as exc:
        raise CliError(str(exc)) from exc


def output_dir(args: argparse.Namespace, command: str) -> Path:
    if getattr(args, "output", None):
        return Path(args.output)
    return Path(os.environ.get(OUTPUT_ENV, "runs")) / command


# -- atomic output -----------------------------------------------------------------

def write_outputs(directory: Path, files: dict[str, str]) -> None:
    """Write every file under a temporary name first, then rename them all into place."""
    directory.mkdir(parents=True, exist_ok=True)
    staged: list[tuple[str, Path]] = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=directory)
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            staged.append((tmp, directory / name))
    except BaseException:
        for tmp, _ in staged:
            Path(tmp).unlink(missing_ok=True)
        raise
    for tmp, final in staged:
        os.replace(tmp, final)


def _csv(header: Sequence[str], rows: list[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x: float) -> str:
    return repr(float(x))


# -- rendering -----------------------------------------------------------------------

def episodes_csv(res: GFSLResult) -> str:
    header = ["episode", "seed", "novel_classes", "stage", *METRIC_KEYS, "displacement"]
    rows = []
    for e in res.episodes:
        classes = " ".join(str(c) for c in e.novel_class_ids)
        for stage in STAGES:
            m = e.stages[stage]
            rows.append([e.index, e.seed, classes, stage, *(_num(getattr(m, k)) for k in METRIC_KEYS),
                         _num(e.displacement)])
    return _csv(header, rows)


def curves_csv(res: GFSLResult) -> str:
    rows = [[tag, ep, *(_num(getattr(m, k)) for k in METRIC_KEYS)] for tag, ep, m in res.mean_curve()]
    return _csv(["phase", "epoch", *METRIC_KEYS], rows)


def gfsl_report(res: GFSLResult) -> str:
    return res.report.to_text()


def _metrics_row(m: MetricsReport) -> list[str]:
    return [_num(getattr(m, k)) for k in REPORT_FIELDS]


# -- commands ------------------------------------------------------------------------

def _run_gfsl(cfg: ExperimentConfig, record_curves: bool) -> GFSLResult:
    base, _, pool = gfsl_data(cfg)
    model, _ = train_phase1(base, cfg)
    return run_gfsl(model, base, pool, cfg.episodes, cfg, record_curves=record_curves, workers=cfg.workers)


def cmd_gfsl(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    res = _run_gfsl(cfg, record_curves=not args.no_curves)
    files = {"report.txt": gfsl_report(res), "episodes.csv": episodes_csv(res), "curves.csv": curves_csv(res),
             "config.ini": to_ini(cfg)}
    out = output_dir(args, "gfsl")
    write_outputs(out, files)
    print(files["report.txt"], end="")
    print(f"wrote {', '.join(files)} to {out}")
    return 0


IFSL_COLUMNS = ["task", "joint_dim", *METRIC_KEYS]


def cmd_ifsl(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    n_seq = args.sequences if args.sequences is not None else cfg.episodes
    if n_seq < 1:
        raise CliError("need at least one task sequence")
    base, pool = ifsl_data(cfg)
    model, _ = train_phase1(base, cfg)
    merged, runs = run_ifsl_many(model, base, pool, cfg, n_seq, skip_phase2=args.skip_phase2)
    lines = [" ".join(f"{c:>10s}" for c in IFSL_COLUMNS)]
    for r in merged:
        vals = ["nan" if v != v else f"{100 * v:.2f}" for v in (getattr(r.metrics, k) for k in METRIC_KEYS)]
        lines.append(" ".join(f"{c:>10s}" for c in [str(r.task), str(r.joint_dim), *vals]))
    report = "\n".join(lines) + "\n"
    rows = [[i, r.task, r.joint_dim, *(_num(getattr(r.metrics, k)) for k in METRIC_KEYS)]
            for i, run in enumerate(runs) for r in run]
    files = {"report.txt": report, "tasks.csv": _csv(["sequence", *IFSL_COLUMNS], rows), "config.ini": to_ini(cfg)}
    out = output_dir(args, "ifsl")
    write_outputs(out, files)
    print(report, end="")
    print(f"wrote {', '.join(files)} to {out}")
    return 0


def lambda_sweep(cfg: ExperimentConfig, grid: Sequence[float]) -> list[tuple[float, MetricsReport, float]]:
    """End-of-phase-2 metrics and mean backbone displacement per weight-constraint strength."""
    base, _, pool = gfsl_data(cfg)
    model, _ = train_phase1(base, cfg)
    out = []
    for lam in grid:
        c = cfg.replace(phase2__lam=float(lam), phase3__epochs=0)
        res = run_gfsl(model, base, pool, c.episodes, c, record_curves=False, workers=c.workers)
        disp = sum(e.displacement for e in res.episodes) / len(res.episodes)
        out.append((float(lam), res.stage_reports["phase2"], disp))
    return out


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    names = [a.strip() for a in args.ablations.split(",") if a.strip()]
    unknown = [a for a in names if a not in ABLATIONS]
    if unknown:
        raise CliError(f"unknown ablation(s) {unknown}; choose from {sorted(ABLATIONS)}")
    files: dict[str, str] = {}
    rows = []
    lines = [f"{'ablation':<12s} {'stage':<7s} " + " ".join(f"{k:>9s}" for k in METRIC_KEYS)]
    for name in names:
        if name == "lambda_sweep":
            continue
        res = _run_gfsl(apply_ablation(cfg, name), record_curves=False)
        for stage in STAGES:
            m = res.stage_reports[stage]
            rows.append([name, stage, *_metrics_row(m)])
            vals = ["nan" if v != v else f"{100 * v:.2f}" for v in (getattr(m, k) for k in METRIC_KEYS)]
            lines.append(f"{name:<12s} {stage:<7s} " + " ".join(f"{v:>9s}" for v in vals))
    if rows:
        files["ablation.csv"] = _csv(["ablation", "stage", *REPORT_FIELDS], rows)
    if "lambda_sweep" in names:
        grid = [float(g) for g in args.grid.split(",")] if args.grid else list(LAMBDA_GRID)
        sweep = lambda_sweep(cfg, grid)
        files["lambda_sweep.csv"] = _csv(
            ["lambda", "b_over_b", "n_over_n", "n_over_j", "b_over_j", "displacement"],
            [[_num(lam), _num(m.b_over_b), _num(m.n_over_n), _num(m.n_over_j), _num(m.b_over_j), _num(d)]
             for lam, m, d in sweep])
        lines.append("")
        lines.append(f"{'lambda':>10s} {'b_over_b':>9s} {'n_over_n':>9s} {'n_over_j':>9s}")
        for lam, m, _ in sweep:
            lines.append(f"{lam:>10g} {100 * m.b_over_b:9.2f} {100 * m.n_over_n:9.2f} {100 * m.n_over_j:9.2f}")
    report = "\n".join(lines) + "\n"
    files["report.txt"] = report
    files["config.ini"] = to_ini(cfg)
    out = output_dir(args, "ablate")
    write_outputs(out, files)
    print(report, end="")
    print(f"wrote {', '.join(files)} to {out}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    rows = gradcheck.run_suite(seed=args.seed, corrupt=args.corrupt)
    width = max(len(r.name) for r in rows)
    for r in rows:
        print(f"{r.name:<{width}s}  max_rel_error = {r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in rows)
    print(f"{sum(r.passed for r in rows)}/{len(rows)} checks below {gradcheck.TOLERANCE:g}")
    return 0 if ok else 1


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    n = args.classes or (cfg.n_base + cfg.n_val + cfg.n_pool)
    ds = generate_synthetic(n, cfg.dim, cfg.per_class_train, cfg.per_class_test, cfg.cluster_spread, cfg.data_seed)
    path = Path(args.path)
    fmt = args.format or ("csv" if path.suffix.lower() == ".csv" else "binary")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        (save_csv if fmt == "csv" else save_binary)(ds, tmp)
        os.replace(tmp, path)
    finally:
        Path(tmp).unlink(missing_ok=True)
    print(f"wrote {len(ds)} samples of {n} classes ({fmt}) to {path}")
    return 0


# -- parser --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, experiment: bool = True) -> None:
    p.add_argument("--config", help="INI config file; flags override its values")
    p.add_argument("--data", help="feature file (.csv or binary); default is the synthetic benchmark")
    p.add_argument("--synthetic", action="store_true", help="force the synthetic benchmark")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. phase2.lam=100 or n_base=30 (repeatable)")
    if experiment:
        p.add_argument("--output", help=f"output directory (default ${OUTPUT_ENV}/<command>)")
        p.add_argument("--episodes", type=int, help="episodes (GFSL) or task sequences (IFSL)")
        p.add_argument("--workers", type=int, help="parallel episode workers")
        p.add_argument("--n-way", dest="n_way", type=int)
        p.add_argument("--k-shot", dest="k_shot", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcwof", description="Three-phase generalized and incremental few-shot learning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gfsl", help="episodic generalized few-shot evaluation")
    _common(p)
    p.add_argument("--ablation", choices=sorted(a for a in ABLATIONS if a != "lambda_sweep"), default="default")
    p.add_argument("--no-curves", action="store_true", help="skip per-epoch evaluation")
    p.set_defaults(func=cmd_gfsl)

    p = sub.add_parser("ifsl", help="incremental few-shot task sequences")
    _common(p)
    p.add_argument("--ablation", choices=sorted(a for a in ABLATIONS if a != "lambda_sweep"), default="default")
    p.add_argument("--sequences", type=int, help="number of task sequences (default: episodes)")
    p.add_argument("--skip-phase2", action="store_true", help="add classes without phase 2")
    p.set_defaults(func=cmd_ifsl)

    p = sub.add_parser("ablate", help="run several ablations on paired seeds")
    _common(p)
    p.add_argument("--ablations", default=",".join(QUADRANTS), help="comma list; include lambda_sweep for the table")
    p.add_argument("--grid", help="comma list of lambda values for lambda_sweep")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", choices=sorted(gradcheck.CHECKS), help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write the synthetic benchmark to a file")
    _common(p, experiment=False)
    p.add_argument("path")
    p.add_argument("--format", choices=("csv", "binary"))
    p.add_argument("--classes", type=int, help="number of classes (default n_base + n_val + n_pool)")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, DatasetError, FileNotFoundError, KeyError, ValueError) as exc:
        if isinstance(exc, FileNotFoundError):
            msg = f"file not found: {exc.filename or exc}"
        else:
            msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
