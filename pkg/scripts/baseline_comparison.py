"""Checkpoint-probing baseline against an Add-mode lambda sweep.

Trains the full lambda grid for one seed, probes k random checkpoints of a
standard run, and reports for every checkpoint whether some sweep run is at
least as good on both BLEU and probe CE (within the given tolerances).
Writes comparison.svg with checkpoints drawn as reference markers.
"""

import argparse
from pathlib import Path

from pprobe import trainer as T
from pprobe.pareto import ADD, frontier_mask
from pprobe.plot import axis_labels, scatter_svg


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--bleu-tol", type=float, default=0.5)
    ap.add_argument("--ce-tol", type=float, default=0.02)
    ap.add_argument("--out", default="runs/baseline_comparison")
    args = ap.parse_args()

    cfg = T.SweepConfig(seeds=[args.seed], steps=args.steps)
    cfg.baseline.k = args.k
    prep = T.prepare_data(cfg)
    sweep = [T.train_run(cfg, lam, args.seed, prep) for lam in cfg.lambdas]
    base = T.baseline_checkpoint_probe(cfg, prep=prep, use_bleu=True)
    pts = [T.orient_run(r, ADD, use_bleu=True).values for r in sweep if not r.failed]

    for b in base:
        bleu, neg_ce = b.values
        covered = any(s[0] >= bleu - args.bleu_tol and s[1] >= neg_ce - args.ce_tol for s in pts)
        print(f"checkpoint {b.payload.step:>5}  bleu {bleu:6.2f}  probe_ce {-neg_ce:.4f}  "
              f"{'dominated' if covered else 'NOT dominated'}")

    all_pts = pts + [b.values for b in base]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    x_label, y_label = axis_labels(ADD, use_bleu=True)
    svg = scatter_svg(all_pts, list(frontier_mask(all_pts)), [False] * len(pts) + [True] * len(base),
                      x_label, y_label, "lambda sweep (circles) vs sampled checkpoints (triangles)")
    (out / "comparison.svg").write_text(svg, encoding="utf-8")
    print(f"-> {out / 'comparison.svg'}")


if __name__ == "__main__":
    main()
