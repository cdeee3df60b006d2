"""Scalarised joint training, probe retraining, lambda sweeps and baselines.

One training step on a batch:

1. encode the source into per-token states ``H``;
2. task loss from ``H`` (translation or next-token prediction);
3. probe loss on ``grad_multiply(H, +lam)`` (Add) or ``(H, -lam)`` (Remove);
4. a single backward pass over the sum.  The encoder receives the task
   gradient plus the multiplied probe gradient, the decoder only the task
   gradient, the probe only its plain cross-entropy gradient.

The standard reference run is the same loop with multiplier 0.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import data as D
from . import metrics
from .models import LanguageModel, ModelConfig, ProbeModel, Seq2SeqModel, probe_loss
from .pareto import ADD, REMOVE, ObjectivePoint, frontier_mask, orient

log = logging.getLogger(__name__)

REFERENCE = "Reference"
MT, LM = "MT", "LM"


def default_lambdas() -> list[float]:
    return [round(x, 10) for x in np.linspace(0.01, 0.1, 10)]


@dataclass
class ProbeConfig:
    steps: int = 1500
    eval_interval: int = 50
    patience: int = 5
    batch_size: int = 256
    lr: float = 3e-3
    holdout: float = 0.5


@dataclass
class BaselineConfig:
    k: int = 10
    interval: int = 20


@dataclass
class SweepConfig:
    task: str = MT
    mode: str = ADD
    lambdas: list[float] = field(default_factory=default_lambdas)
    seeds: list[int] = field(default_factory=lambda: [1])
    steps: int = 300
    eval_interval: int = 25
    batch_size: int = 32
    lr: float = 1e-2
    probe_lr: float = 3e-3
    optimizer: str = "adam"
    grammar: str = ""
    corpus: str = ""
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200
    data_seed: int = 0
    bleu: bool = True
    divergence_factor: float = 5.0
    divergence_evals: int = 3
    out: str = "runs"
    jobs: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def validate(self) -> None:
        if self.task not in (MT, LM):
            raise ValueError(f"task: expected MT or LM, got {self.task!r}")
        if self.mode not in (ADD, REMOVE):
            raise ValueError(f"mode: expected Add or Remove, got {self.mode!r}")
        if not self.lambdas or any(not lam > 0 for lam in self.lambdas):
            raise ValueError("lambdas: every value must be positive")
        if self.steps <= 0:
            raise ValueError("steps: must be positive")
        if self.eval_interval <= 0 or self.batch_size <= 0:
            raise ValueError("eval_interval and batch_size must be positive")
        if not self.seeds:
            raise ValueError("seeds: need at least one seed")

    # flat key=value form with dotted sub-sections
    @classmethod
    def loads(cls, text: str) -> "SweepConfig":
        cfg = cls()
        for key, value in D.parse_key_values(text).items():
            _set_key(cfg, key, value)
        env_seed = os.environ.get("PPROBE_SEED")
        if env_seed:
            cfg.seeds = [int(env_seed)]
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "SweepConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    lines.append(f"{f.name}.{sub.name}={_fmt(getattr(value, sub.name))}")
            else:
                lines.append(f"{f.name}={_fmt(value)}")
        return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(kind, value: str):
    if kind is bool:
        low = value.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(value)
        return low in ("true", "1", "yes")
    return kind(value)


def _set_key(cfg, key: str, value: str) -> None:
    target, name = cfg, key
    if "." in key:
        section, name = key.split(".", 1)
        target = getattr(cfg, section, None)
        if not dataclasses.is_dataclass(target):
            raise ValueError(f"unknown config key {key!r}")
    fields = {f.name: f for f in dataclasses.fields(target)}
    if name not in fields or dataclasses.is_dataclass(getattr(target, name)):
        raise ValueError(f"unknown config key {key!r}")
    current = getattr(target, name)
    try:
        if isinstance(current, list):
            elem = float if name == "lambdas" else int
            parsed = [_coerce(elem, v) for v in D._split(value)]
        else:
            parsed = _coerce(type(current), value)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {value!r}") from None
    setattr(target, name, parsed)


# ------------------------------------------------------------------- results

@dataclass(frozen=True)
class RunResult:
    lam: float
    mode: str
    seed: int
    step: int
    task_loss: float
    bleu: float | None
    probe_ce: float
    h_s: float
    mi: float
    mi_clamped: bool = False
    joint_probe_ce: float = math.nan
    checkpoint: str = ""
    curve: str = ""
    failed: bool = False
    reason: str = ""

    @property
    def run_id(self) -> str:
        return run_id(self.mode, self.lam, self.seed)

    @property
    def is_reference(self) -> bool:
        return self.mode == REFERENCE


def run_id(mode: str, lam: float, seed: int) -> str:
    if mode == REFERENCE:
        return f"reference-s{seed}"
    return f"{mode.lower()}-lam{lam:.4f}-s{seed}"


def orient_run(run: RunResult, mode: str, use_bleu: bool = False) -> ObjectivePoint:
    return orient(run.task_loss, run.probe_ce, mode, bleu=run.bleu if use_bleu else None, payload=run)


# ---------------------------------------------------------------------- data

@dataclass
class Prepared:
    train: list
    valid: list
    test: list
    vocabs: D.Vocabs
    valid_batches: list
    test_batches: list
    train_batches: list
    h_s: float
    n_labels: int
    probe_holdout: frozenset = frozenset()


def prepare_data(cfg: SweepConfig) -> Prepared:
    if cfg.corpus:
        corpus = D.read_corpus(cfg.corpus)
        train, valid, test = D.split_corpus(corpus)
    else:
        grammar = D.GrammarConfig.load(cfg.grammar) if cfg.grammar else D.default_grammar()
        corpus = D.generate_corpus(grammar, cfg.n_train + cfg.n_valid + cfg.n_test, seed=cfg.data_seed)
        train = corpus[:cfg.n_train]
        valid = corpus[cfg.n_train:cfg.n_train + cfg.n_valid]
        test = corpus[cfg.n_train + cfg.n_valid:]
    if cfg.task == LM:
        train = [r for r in train if len(r.src) >= 2]
    vocabs = D.Vocabs.from_corpus(train + valid + test)
    return Prepared(
        train=train, valid=valid, test=test, vocabs=vocabs,
        valid_batches=D.batchify(valid, vocabs, 100),
        test_batches=D.batchify(test, vocabs, 100),
        train_batches=D.batchify(train, vocabs, 100),
        h_s=metrics.label_entropy(test),
        n_labels=vocabs.labels.n_real,
        probe_holdout=holdout_words(train, vocabs, cfg.probe.holdout, cfg.data_seed),
    )


def holdout_words(corpus, vocabs: D.Vocabs, fraction: float, seed: int) -> frozenset:
    """Source ids of word types hidden from the retrained probe's training tokens.

    ``fraction`` of the word types of every label are drawn; held-out
    evaluation still covers them, so the probe must generalise through the
    geometry of the representation instead of memorising word identities.
    """
    if fraction <= 0:
        return frozenset()
    by_label: dict[str, set[str]] = {}
    for rec in corpus:
        for w, s in zip(rec.src, rec.labels):
            by_label.setdefault(s, set()).add(w)
    rng = np.random.default_rng([seed, 5])
    out = set()
    for label in sorted(by_label):
        words = sorted(by_label[label])
        k = int(round(fraction * len(words)))
        out.update(vocabs.src.lookup(words[i]) for i in rng.choice(len(words), size=k, replace=False))
    return frozenset(out)


def build_model(cfg: SweepConfig, prep: Prepared, rng: np.random.Generator):
    if cfg.task == MT:
        return Seq2SeqModel(len(prep.vocabs.src), len(prep.vocabs.tgt), cfg.model, rng)
    return LanguageModel(len(prep.vocabs.src), cfg.model, rng)


def evaluate_task_loss(model, batches) -> float:
    """Token-weighted mean task NLL over ``batches``."""
    total = count = 0.0
    with ad.no_grad():
        for b in batches:
            n = float(b.tgt_mask.sum()) if isinstance(model, Seq2SeqModel) else float(b.src_mask[:, 1:].sum())
            total += model.loss(b).item() * n
            count += n
    return total / count


def evaluate_bleu(model: Seq2SeqModel, corpus, vocabs: D.Vocabs, batch_size: int = 100) -> float:
    cands, refs = [], []
    for i in range(0, len(corpus), batch_size):
        chunk = corpus[i:i + batch_size]
        b = D.make_batch(chunk, vocabs)
        max_len = b.tgt_in.shape[1] + 5
        for rec, ids in zip(chunk, model.greedy(b.src, b.src_mask, max_len)):
            cands.append(vocabs.tgt.decode(ids))
            refs.append(list(rec.tgt))
    return metrics.bleu(cands, refs)


# ------------------------------------------------------------------ training

@dataclass
class TrainState:
    model: object
    probe: ProbeModel
    curve: list[tuple[int, float, float]]
    best_step: int
    best_state: dict
    checkpoints: dict[int, dict] = field(default_factory=dict)
    failed: bool = False
    reason: str = ""


def train_joint(cfg: SweepConfig, factor: float, seed: int, prep: Prepared,
                steps: int | None = None, evaluate: bool = True, keep_every: int = 0) -> TrainState:
    """Alternating scalarised training; ``factor`` is the signed probe-gradient multiplier."""
    steps = cfg.steps if steps is None else steps
    rng = np.random.default_rng(seed)
    model = build_model(cfg, prep, rng)
    probe = ProbeModel(model.width, prep.n_labels, cfg.model, rng)
    order_rng = np.random.default_rng([seed, 1])
    drop_rng = np.random.default_rng([seed, 2]) if cfg.model.dropout > 0 else None
    model_params = list(model.params.values())
    probe_params = list(probe.params.values())
    model_opt = ad.OptimizerState(cfg.optimizer, cfg.lr)
    probe_opt = ad.OptimizerState(cfg.optimizer, cfg.probe_lr)

    curve: list[tuple[int, float, float]] = []
    best = (math.inf, 0, model.state_dict())
    checkpoints: dict[int, dict] = {}
    initial = None
    bad = 0

    def record(step):
        nonlocal best, initial, bad
        loss = evaluate_task_loss(model, prep.valid_batches)
        ce = metrics.conditional_entropy(probe, model, prep.valid_batches)
        curve.append((step, loss, ce))
        if initial is None:
            initial = loss
        if not math.isfinite(loss) or loss > cfg.divergence_factor * initial:
            bad += 1
        else:
            bad = 0
        if loss < best[0]:
            best = (loss, step, model.state_dict())
        return bad >= cfg.divergence_evals or not math.isfinite(loss)

    if evaluate:
        record(0)
    batches: list = []
    for step in range(1, steps + 1):
        if not batches:
            perm = order_rng.permutation(len(prep.train))
            batches = D.batchify(prep.train, prep.vocabs, cfg.batch_size, perm)[::-1]
        batch = batches.pop()
        H = model.encode_batch(batch.src, batch.src_mask, drop_rng)
        task = model.loss(batch, H, drop_rng)
        probed = probe_loss(probe, ad.grad_multiply(H, factor), batch.labels, batch.src_mask)
        grads = ad.backward(task + probed)
        ad.optimizer_step(model_opt, model_params, ad.zero_grads_for(model_params, grads))
        ad.optimizer_step(probe_opt, probe_params, ad.zero_grads_for(probe_params, grads))
        if keep_every and step % keep_every == 0:
            checkpoints[step] = model.state_dict()
        if evaluate and (step % cfg.eval_interval == 0 or step == steps):
            if record(step):
                return TrainState(model, probe, curve, best[1], best[2], checkpoints, True,
                                  f"diverged at step {step}: task loss {curve[-1][1]:.4g} "
                                  f"vs initial {initial:.4g}")
    if not evaluate:
        best = (math.nan, steps, model.state_dict())
    return TrainState(model, probe, curve, best[1], best[2], checkpoints)


# ------------------------------------------------------------ probe retraining

def _features(encoder, batches, exclude=frozenset()) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    with ad.no_grad():
        for b in batches:
            H = encoder.encode_batch(b.src, b.src_mask).data
            keep = b.src_mask
            if exclude:
                keep = keep & ~np.isin(b.src, list(exclude))
            xs.append(H[keep])
            ys.append(b.labels[keep])
    return np.concatenate(xs), np.concatenate(ys)


def retrain_probe(encoder, train_batches, valid_batches, test_batches, n_labels: int,
                  model_cfg: ModelConfig, probe_cfg: ProbeConfig, seed: int,
                  holdout=frozenset()) -> float:
    """Fit a fresh probe on frozen encoder states; return held-out cross-entropy.

    Tokens whose source id is in ``holdout`` are dropped from the probe's
    training set only.  Early stopping on ``valid_batches`` with the
    configured patience; the best probe is scored on ``test_batches``.
    """
    x_tr, y_tr = _features(encoder, train_batches, holdout)
    x_va, y_va = _features(encoder, valid_batches)
    x_te, y_te = _features(encoder, test_batches)
    rng = np.random.default_rng([seed, 3])
    probe = ProbeModel(x_tr.shape[1], n_labels, model_cfg, rng)
    params = list(probe.params.values())
    opt = ad.OptimizerState("adam", probe_cfg.lr)

    def score(x, y):
        with ad.no_grad():
            return ad.nll(probe.log_probs(ad.Tensor(x)), y).item()

    best_ce, best_state, waited = score(x_va, y_va), probe.state_dict(), 0
    perm: np.ndarray = np.empty(0, dtype=np.int64)
    for step in range(1, probe_cfg.steps + 1):
        if perm.size == 0:
            perm = rng.permutation(len(x_tr))
        idx, perm = perm[:probe_cfg.batch_size], perm[probe_cfg.batch_size:]
        loss = ad.nll(probe.log_probs(ad.Tensor(x_tr[idx])), y_tr[idx])
        ad.optimizer_step(opt, params, ad.zero_grads_for(params, ad.backward(loss)))
        if step % probe_cfg.eval_interval == 0:
            ce = score(x_va, y_va)
            if ce < best_ce:
                best_ce, best_state, waited = ce, probe.state_dict(), 0
            else:
                waited += 1
                if waited >= probe_cfg.patience:
                    break
    probe.load_state_dict(best_state)
    return score(x_te, y_te)


# ---------------------------------------------------------------- single run

def train_run(cfg: SweepConfig, lam: float, seed: int, prep: Prepared | None = None,
              reference: bool = False, out_dir: str | Path | None = None) -> RunResult:
    """Train one model at ``lam`` (or the standard reference run) and measure it."""
    if not reference and not lam > 0:
        raise ValueError("lambda must be positive")
    prep = prep or prepare_data(cfg)
    mode = REFERENCE if reference else cfg.mode
    lam = 0.0 if reference else float(lam)
    factor = 0.0 if reference else (lam if cfg.mode == ADD else -lam)
    state = train_joint(cfg, factor, seed, prep)
    model = state.model
    model.load_state_dict(state.best_state)

    rid = run_id(mode, lam, seed)
    ckpt_path = curve_path = ""
    if out_dir is not None:
        run_dir = Path(out_dir) / rid
        run_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = str(run_dir / "checkpoint.ppck")
        curve_path = str(run_dir / "curve.csv")
        model.save(ckpt_path)
        write_curve(curve_path, state.curve)

    if state.failed:
        log.warning("%s failed: %s", rid, state.reason)
        return RunResult(lam, mode, seed, state.best_step, math.nan, None, math.nan, prep.h_s, math.nan,
                         checkpoint=ckpt_path, curve=curve_path, failed=True, reason=state.reason)

    task_loss = evaluate_task_loss(model, prep.test_batches)
    bleu = evaluate_bleu(model, prep.test, prep.vocabs) if cfg.task == MT and cfg.bleu else None
    joint_ce = metrics.conditional_entropy(state.probe, model, prep.test_batches)
    ce = retrain_probe(model, prep.train_batches, prep.valid_batches, prep.test_batches,
                       prep.n_labels, cfg.model, cfg.probe, seed, prep.probe_holdout)
    info = metrics.mutual_information(prep.h_s, ce)
    return RunResult(lam, mode, seed, state.best_step, task_loss, bleu, ce, prep.h_s, info.mi,
                     mi_clamped=info.clamped, joint_probe_ce=joint_ce,
                     checkpoint=ckpt_path, curve=curve_path)


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "task_loss", "probe_ce"])
        for step, loss, ce in curve:
            w.writerow([step, _num(loss), _num(ce)])


def read_curve(path) -> list[tuple[int, float, float]]:
    with open(path, newline="") as fh:
        return [(int(r["step"]), float(r["task_loss"]), float(r["probe_ce"])) for r in csv.DictReader(fh)]


def _num(x) -> str:
    if x is None:
        return ""
    return f"{float(x):.10g}"


# --------------------------------------------------------------------- sweep

SWEEP_COLUMNS = ["lambda", "mode", "seed", "step", "task_loss", "bleu", "probe_ce", "h_s", "mi",
                 "on_frontier", "failed", "reason"]


def _job(args):
    cfg, lam, seed, reference, out = args
    return train_run(cfg, lam, seed, prepare_data(cfg), reference=reference, out_dir=out)


def run_sweep(cfg: SweepConfig, jobs: int | None = None, write: bool = True):
    """Every (lambda, seed) run plus one reference run per seed, then the frontier.

    Returns ``(runs, on_frontier)`` where ``on_frontier`` is aligned with ``runs``.
    """
    cfg.validate()
    out = Path(cfg.out)
    if write:
        out.mkdir(parents=True, exist_ok=True)
    tasks = []
    for seed in cfg.seeds:
        tasks += [(cfg, lam, seed, False, out if write else None) for lam in cfg.lambdas]
        tasks.append((cfg, 0.0, seed, True, out if write else None))
    jobs = cfg.jobs if jobs is None else jobs
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_job, tasks))
    else:
        prep = prepare_data(cfg)
        runs = []
        for c, lam, seed, ref, o in tasks:
            runs.append(train_run(c, lam, seed, prep, reference=ref, out_dir=o))
            log.info("finished %s", runs[-1].run_id)
    on_front = sweep_frontier(runs, cfg.mode, use_bleu=False)
    if write:
        write_sweep_csv(out / "sweep.csv", runs, on_front)
        from .plot import frontier_svg
        (out / "frontier.svg").write_text(
            frontier_svg(runs, on_front, cfg.mode, use_bleu=False, task=cfg.task), encoding="utf-8")
    return runs, on_front


def sweep_frontier(runs: Sequence[RunResult], mode: str, use_bleu: bool = False) -> list[bool]:
    """Frontier flags for ``runs``; failed runs are never on it."""
    ok = [i for i, r in enumerate(runs) if not r.failed]
    flags = [False] * len(runs)
    if ok:
        pts = [orient_run(runs[i], mode, use_bleu).values for i in ok]
        for i, keep in zip(ok, frontier_mask(pts)):
            flags[i] = bool(keep)
    return flags


def write_sweep_csv(path, runs: Sequence[RunResult], on_front: Sequence[bool]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r, f in zip(runs, on_front):
            w.writerow([_num(r.lam), r.mode, r.seed, r.step, _num(r.task_loss), _num(r.bleu),
                        _num(r.probe_ce), _num(r.h_s), _num(r.mi), str(bool(f)).lower(),
                        str(r.failed).lower(), r.reason])


def read_sweep_csv(path) -> list[RunResult]:
    runs = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SWEEP_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, 2):
            try:
                runs.append(RunResult(
                    lam=float(row["lambda"]), mode=row["mode"], seed=int(row["seed"]), step=int(row["step"]),
                    task_loss=float(row["task_loss"]), bleu=float(row["bleu"]) if row["bleu"] else None,
                    probe_ce=float(row["probe_ce"]), h_s=float(row["h_s"]), mi=float(row["mi"]),
                    failed=row["failed"] == "true", reason=row["reason"] or ""))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}: row {lineno}: {exc}") from None
            if row["mode"] not in (ADD, REMOVE, REFERENCE):
                raise ValueError(f"{path}: row {lineno}: unknown mode {row['mode']!r}")
    return runs


# ------------------------------------------------------------------ baseline

def baseline_checkpoint_probe(cfg: SweepConfig, seed: int | None = None, prep: Prepared | None = None,
                              use_bleu: bool = False) -> list[ObjectivePoint]:
    """Probe ``k`` randomly sampled checkpoints of one standard training run (Add orientation)."""
    seed = cfg.seeds[0] if seed is None else seed
    prep = prep or prepare_data(cfg)
    state = train_joint(cfg, 0.0, seed, prep, evaluate=False, keep_every=cfg.baseline.interval)
    steps = sorted(state.checkpoints)
    k = min(cfg.baseline.k, len(steps))
    rng = np.random.default_rng([seed, 4])
    chosen = sorted(rng.choice(steps, size=k, replace=False).tolist())
    model = state.model
    points = []
    for step in chosen:
        model.load_state_dict(state.checkpoints[step])
        task_loss = evaluate_task_loss(model, prep.test_batches)
        bleu = evaluate_bleu(model, prep.test, prep.vocabs) if use_bleu else None
        ce = retrain_probe(model, prep.train_batches, prep.valid_batches, prep.test_batches,
                           prep.n_labels, cfg.model, cfg.probe, seed, prep.probe_holdout)
        info = metrics.mutual_information(prep.h_s, ce)
        run = RunResult(0.0, REFERENCE, seed, step, task_loss, bleu, ce, prep.h_s, info.mi,
                        mi_clamped=info.clamped)
        points.append(orient_run(run, ADD, use_bleu))
    return points


# ------------------------------------------------------------ window stats

def window_stats(series: Sequence[float], window: int = 3, best: str = "max") -> tuple[float, float]:
    """Mean and population variance of ``window`` values centred on the best entry.

    ``best`` is ``"max"`` for scores such as BLEU and ``"min"`` for losses.
    The window is shifted inward at the ends of the series.
    """
    values = np.asarray(series, dtype=np.float64)
    if window <= 0 or len(values) < window:
        raise ValueError(f"series of length {len(values)} is shorter than window {window}")
    i = int(np.argmax(values) if best == "max" else np.argmin(values))
    start = min(max(i - window // 2, 0), len(values) - window)
    chunk = values[start:start + window]
    return float(chunk.mean()), float(chunk.var())


def window_slice(series: Sequence[float], window: int = 3, best: str = "max") -> slice:
    values = np.asarray(series, dtype=np.float64)
    i = int(np.argmax(values) if best == "max" else np.argmin(values))
    start = min(max(i - window // 2, 0), len(values) - window)
    return slice(start, start + window)


