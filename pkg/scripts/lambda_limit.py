"""How far a tiny multiplier drifts from the reference trajectory.

For each optimizer, trains the reference (multiplier 0) and a run with a
small multiplier from the same seed and prints the max-abs parameter gap.
SGD is linear in the gradient, so the gap shrinks with lambda.  Adam rescales
each coordinate by its own gradient history, so coordinates whose task
gradient is near zero take a full-size step for any nonzero probe term.
"""

import argparse

import numpy as np

from pprobe import trainer as T


def gap(cfg, prep, lam, steps, seed):
    ref = T.train_joint(cfg, 0.0, seed, prep, steps=steps, evaluate=False).model.state_dict()
    near = T.train_joint(cfg, lam, seed, prep, steps=steps, evaluate=False).model.state_dict()
    worst = max(ref, key=lambda k: np.abs(ref[k] - near[k]).max())
    return float(np.abs(ref[worst] - near[worst]).max()), worst


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--task", default=T.MT, choices=[T.MT, T.LM])
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--lambdas", default="1e-4,1e-6,1e-8")
    args = ap.parse_args()

    prep = T.prepare_data(T.SweepConfig(task=args.task))
    settings = {"sgd": T.SweepConfig(task=args.task, optimizer="sgd", lr=1.0, probe_lr=1.0),
                "adam": T.SweepConfig(task=args.task)}
    for name, cfg in settings.items():
        for lam in (float(x) for x in args.lambdas.split(",")):
            value, param = gap(cfg, prep, lam, args.steps, args.seed)
            print(f"{name:<5} lambda {lam:<8g} max |dtheta| {value:.3e}  ({param})")


if __name__ == "__main__":
    main()
