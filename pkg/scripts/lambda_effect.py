"""Retrained probe CE and task loss across a lambda grid, paired by seed.

    python scripts/lambda_effect.py --mode Add --lambdas 0.01,0.05,0.1 --seeds 1,2,3
    python scripts/lambda_effect.py --mode Remove --lambdas 0.1 --seeds 1,2,3

A reference run (no probe gradient into the encoder) is added for every seed.
"""

import argparse
import csv
import time

from pprobe import trainer as T


def parse_list(text, kind):
    return [kind(x) for x in text.split(",") if x.strip()]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--task", default=T.MT, choices=[T.MT, T.LM])
    ap.add_argument("--mode", default="Add", choices=["Add", "Remove"])
    ap.add_argument("--lambdas", default="0.01,0.05,0.1")
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--csv", help="write one row per run here")
    args = ap.parse_args()

    cfg = T.SweepConfig(task=args.task, mode=args.mode, steps=args.steps, bleu=args.task == T.MT)
    prep = T.prepare_data(cfg)
    lambdas = parse_list(args.lambdas, float)
    rows = []
    start = time.time()
    for seed in parse_list(args.seeds, int):
        ref = T.train_run(cfg, 0.0, seed, prep, reference=True)
        rows.append(ref)
        print(f"seed {seed} {'reference':<14} loss {ref.task_loss:.4f}  probe_ce {ref.probe_ce:.4f}")
        for lam in lambdas:
            r = T.train_run(cfg, lam, seed, prep)
            rows.append(r)
            print(f"seed {seed} {f'{args.mode} {lam:g}':<14} loss {r.task_loss:.4f}  probe_ce {r.probe_ce:.4f}"
                  f"  (ce - ref {r.probe_ce - ref.probe_ce:+.4f})")
    print(f"{len(rows)} runs in {time.time() - start:.0f}s")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run_id", "seed", "lambda", "task_loss", "bleu", "probe_ce", "mi", "failed"])
            for r in rows:
                w.writerow([r.run_id, r.seed, r.lam, r.task_loss, r.bleu, r.probe_ce, r.mi, r.failed])


if __name__ == "__main__":
    main()
