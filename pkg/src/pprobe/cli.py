"""Command-line entry point: ``pprobe <command> [flags]``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

from . import data as D
from . import trainer as T
from .pareto import ADD, REMOVE, frontier_mask
from .plot import axis_labels, scatter_svg

log = logging.getLogger("pprobe")


class CommandError(Exception):
    pass


def _load_config(path) -> T.SweepConfig:
    try:
        return T.SweepConfig.load(path)
    except FileNotFoundError:
        raise CommandError(f"config file not found: {path}") from None
    except ValueError as exc:
        raise CommandError(f"invalid config {path}: {exc}") from None


def _writable_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create {path}: {exc}") from None


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    if args.n <= 0:
        raise CommandError("n must be positive")
    try:
        grammar = D.GrammarConfig.load(args.grammar) if args.grammar else D.default_grammar()
    except (OSError, ValueError) as exc:
        raise CommandError(f"invalid grammar: {exc}") from None
    corpus = D.generate_corpus(grammar, args.n, seed=args.seed)
    try:
        D.write_corpus(args.out, corpus)
    except OSError as exc:
        raise CommandError(f"cannot write {args.out}: {exc}") from None
    tokens = sum(len(r.src) for r in corpus)
    print(f"records={len(corpus)} tokens={tokens} H(s)={D.exact_label_entropy(grammar):.6f}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if not args.reference and not args.lam > 0:
        raise CommandError("lambda must be positive")
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out = Path(cfg.out)
    _writable_dir(out)
    run = T.train_run(cfg, args.lam, seed, reference=args.reference, out_dir=out)
    print(_summary_header())
    print(_summary_row(run, None))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    _writable_dir(Path(cfg.out))
    runs, front = T.run_sweep(cfg, jobs=args.jobs)
    print(_summary_header())
    for r, f in zip(runs, front):
        print(_summary_row(r, f))
    failed = [r for r in runs if r.failed]
    if failed:
        log.warning("%d run(s) failed; see sweep.csv", len(failed))
    print(f"frontier: {sum(front)} of {len(runs)} runs -> {Path(cfg.out) / 'sweep.csv'}")
    return 0


def cmd_baseline(args) -> int:
    cfg = _load_config(args.config)
    if args.k is not None:
        cfg.baseline.k = args.k
    out = Path(cfg.out)
    _writable_dir(out)
    points = T.baseline_checkpoint_probe(cfg, use_bleu=args.use_bleu)
    path = out / "baseline.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "task_loss", "bleu", "probe_ce", "axis1", "axis2"])
        for p in points:
            r = p.payload
            w.writerow([r.step, T._num(r.task_loss), T._num(r.bleu), T._num(r.probe_ce),
                        T._num(p.values[0]), T._num(p.values[1])])
    print(f"{len(points)} checkpoint points -> {path}")
    return 0


FRONTIER_COLUMNS = ["lambda", "mode", "seed", "axis1", "axis2", "on_frontier"]


def cmd_frontier(args) -> int:
    src = Path(args.csv)
    try:
        runs = T.read_sweep_csv(src)
    except FileNotFoundError:
        raise CommandError(f"no such file: {src}") from None
    except (ValueError, KeyError) as exc:
        raise CommandError(f"malformed sweep csv: {exc}") from None
    out = Path(args.out) if args.out else src.parent
    _writable_dir(out)
    runs = [r for r in runs if r.mode in (args.mode, T.REFERENCE)]
    if args.use_bleu and any(r.bleu is None for r in runs if not r.failed):
        raise CommandError("--use-bleu needs a bleu value on every run")
    flags = T.sweep_frontier(runs, args.mode, use_bleu=args.use_bleu)
    rows = []
    for r, f in zip(runs, flags):
        if r.failed:
            a1 = a2 = math.nan
        else:
            a1, a2 = T.orient_run(r, args.mode, args.use_bleu).values
        rows.append((r, a1, a2, f))
    rows.sort(key=lambda row: (row[0].seed, row[0].mode != T.REFERENCE, row[0].lam))
    with open(out / "frontier.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FRONTIER_COLUMNS)
        for r, a1, a2, f in rows:
            w.writerow([T._num(r.lam), r.mode, r.seed, T._num(a1), T._num(a2), str(f).lower()])
    live = [row for row in rows if not row[0].failed]
    x_label, y_label = axis_labels(args.mode, args.use_bleu)
    svg = scatter_svg([(a1, a2) for _, a1, a2, _ in live], [f for *_, f in live],
                      [r.is_reference for r, *_ in live], x_label, y_label, args.mode)
    (out / "frontier.svg").write_text(svg, encoding="utf-8")
    print(f"frontier: {sum(flags)} of {len(runs)} rows -> {out / 'frontier.csv'}")
    return 0


REPORT_COLUMNS = ["run_id", "metric", "mean", "var", "probe_ce_mean", "probe_ce_var",
                  "final_task_loss", "final_probe_ce"]


def report_rows(sweep_dir) -> list[list[str]]:
    """One row per run: window statistics around the best held-out task loss."""
    sweep_dir = Path(sweep_dir)
    try:
        runs = T.read_sweep_csv(sweep_dir / "sweep.csv")
    except FileNotFoundError:
        raise CommandError(f"no sweep.csv in {sweep_dir}") from None
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    rows = []
    for r in runs:
        path = sweep_dir / r.run_id / "curve.csv"
        if not path.exists():
            raise CommandError(f"missing curve file {path}")
        curve = T.read_curve(path)
        losses = [c[1] for c in curve]
        ces = [c[2] for c in curve]
        if len(losses) < 3:
            raise CommandError(f"{path}: fewer than 3 evaluations")
        mean, var = T.window_stats(losses, 3, best="min")
        win = T.window_slice(losses, 3, best="min")
        ce_mean, ce_var = T.window_stats(ces[win], 3)
        rows.append([r.run_id, "task_loss", f"{mean:.6g}", f"{var:.6g}", f"{ce_mean:.6g}", f"{ce_var:.6g}",
                     T._num(r.task_loss), T._num(r.probe_ce)])
    return rows


def cmd_report(args) -> int:
    rows = report_rows(args.sweep_dir)
    widths = [max(len(c), *(len(r[i]) for r in rows)) if rows else len(c) for i, c in enumerate(REPORT_COLUMNS)]
    print("  ".join(c.ljust(w) for c, w in zip(REPORT_COLUMNS, widths)))
    for r in rows:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    return 0


def _summary_header() -> str:
    return f"{'run':<24}{'task_loss':>10}{'bleu':>8}{'probe_ce':>10}{'mi':>8}  frontier"


def _summary_row(r: T.RunResult, front) -> str:
    if r.failed:
        return f"{r.run_id:<24}  FAILED: {r.reason}"
    bleu = f"{r.bleu:8.2f}" if r.bleu is not None else f"{'-':>8}"
    mark = "" if front is None else ("*" if front else "")
    return f"{r.run_id:<24}{r.task_loss:10.4f}{bleu}{r.probe_ce:10.4f}{r.mi:8.4f}  {mark}"


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pprobe", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    p.add_argument("--grammar", default="", help="grammar key=value file (default grammar if omitted)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a single run")
    p.add_argument("--config", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.05)
    p.add_argument("--seed", type=int)
    p.add_argument("--reference", action="store_true", help="standard training, no probe gradient")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run the lambda sweep and extract the frontier")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("baseline", help="probe randomly sampled checkpoints of standard training")
    p.add_argument("--config", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--use-bleu", action="store_true")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("frontier", help="recompute the frontier from a sweep.csv")
    p.add_argument("--csv", required=True)
    p.add_argument("--mode", required=True, choices=[ADD, REMOVE])
    p.add_argument("--out", help="output directory (default: next to the csv)")
    p.add_argument("--use-bleu", action="store_true")
    p.set_defaults(func=cmd_frontier)

    p = sub.add_parser("report", help="window mean/variance table per run")
    p.add_argument("--sweep-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
