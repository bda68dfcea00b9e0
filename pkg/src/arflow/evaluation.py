"""Held-out evaluation and parameter sweeps."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .generation import generate_batch
from .tasks import make_examples, oracle_metrics

EVAL_COLUMNS = ("setting", "nfe", "w", "sigma2", "mse", "corr", "mode_acc", "len_err", "model")
SWEEP_AXES = ("nfe", "cfg", "sigma2", "netscale", "prior", "mechanism")
WORKERS_ENV = "ARFLOW_WORKERS"


@dataclass
class EvalResult:
    setting: str
    nfe: int
    w: float
    sigma2: float
    mse: float
    corr: float
    mode_acc: float
    len_err: float
    len_within1: float
    model: str = ""
    n: int = 0

    def row(self):
        return {c: getattr(self, c) for c in EVAL_COLUMNS}


def evaluate_examples(model, examples, spec, nfe=3, w=1.6, sigma2=0.1, seed=0, threshold=0.5,
                      max_len_factor=4, setting=None, label="", chunk=256):
    """Generate every example and average the oracle metrics."""
    rng = np.random.default_rng(seed)
    recs = []
    for lo in range(0, len(examples), chunk):
        part = examples[lo:lo + chunk]
        outs = generate_batch(model, part, nfe=nfe, cfg_scale=w, sigma2=sigma2, threshold=threshold,
                              max_len_factor=max_len_factor, rng=rng)
        recs.extend(oracle_metrics(o, e, spec) for o, e in zip(outs, part))
    len_err = np.array([r.len_err for r in recs], dtype=float)
    return EvalResult(
        setting=setting or (examples[0].setting if examples else ""),
        nfe=nfe, w=w, sigma2=sigma2,
        mse=float(np.mean([r.mse for r in recs])),
        corr=float(np.mean([r.corr for r in recs])),
        mode_acc=float(np.mean([r.mode_acc for r in recs])),
        len_err=float(len_err.mean()),
        len_within1=float(np.mean(len_err <= 1)),
        model=label, n=len(recs),
    )


def run_eval(model, instances, spec, nfe=3, w=1.6, sigma2=0.1, settings=("continuation", "cross"), seed=0,
             csv_path=None, label="", threshold=0.5, max_len_factor=4):
    """Continuation and cross-style evaluation; rows are appended to ``csv_path`` if given."""
    results = []
    for setting in settings:
        examples = make_examples(spec, instances, setting, seed=seed)
        results.append(evaluate_examples(model, examples, spec, nfe, w, sigma2, seed, threshold,
                                         max_len_factor, setting, label))
    if csv_path:
        append_eval_csv(csv_path, results)
    return results


def append_eval_csv(path, results):
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        wr = csv.writer(fh)
        if new:
            wr.writerow(EVAL_COLUMNS)
        for r in results:
            wr.writerow([_fmt(v) for v in r.row().values()])


def read_eval_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (v if k in ("setting", "model") else float(v)) for k, v in r.items()})
    return out


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def worker_count():
    env = os.environ.get(WORKERS_ENV)
    n = int(env) if env else (os.cpu_count() or 1)
    return max(1, n)


def _sweep_point(args):
    from .training import load_model
    from .tasks import load_corpus

    ckpt, corpus_dir, setting, nfe, w, sigma2, seed, label = args
    model, cfg = load_model(ckpt)
    spec, instances, _ = load_corpus(corpus_dir)
    res = run_eval(model, instances, spec, nfe=nfe, w=w, sigma2=sigma2, settings=(setting,), seed=seed,
                   label=label, threshold=cfg.gen.threshold, max_len_factor=cfg.gen.max_len_factor)
    return res[0]


def sweep_points(axis, checkpoints, grid, defaults):
    """Expand an axis into (checkpoint, nfe, w, sigma2, label) jobs.

    ``nfe``/``cfg``/``sigma2`` vary an inference setting of every checkpoint;
    ``netscale``/``prior``/``mechanism`` compare checkpoints, each evaluated at
    every NFE in ``grid`` (or the default NFE when ``grid`` is empty).
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    nfe, w, s2 = defaults
    jobs = []
    for ck, label in checkpoints:
        if axis == "nfe":
            jobs += [(ck, int(g), w, s2, label) for g in grid]
        elif axis == "cfg":
            jobs += [(ck, nfe, float(g), s2, label) for g in grid]
        elif axis == "sigma2":
            jobs += [(ck, nfe, w, float(g), label) for g in grid]
        else:
            jobs += [(ck, int(g), w, s2, label) for g in (grid or [nfe])]
    return jobs


def run_sweep(axis, checkpoints, grid, corpus_dir, out_csv, settings=("continuation",), defaults=(3, 1.6, 0.1),
              seed=0, workers=None):
    """Evaluate every grid point (in a process pool) and write one CSV row per point and setting."""
    jobs = [
        (ck, str(corpus_dir), setting, nfe, w, s2, seed, label)
        for ck, nfe, w, s2, label in sweep_points(axis, checkpoints, grid, defaults)
        for setting in settings
    ]
    workers = min(worker_count() if workers is None else workers, len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]
    out_csv = Path(out_csv)
    if out_csv.exists():
        out_csv.unlink()
    append_eval_csv(out_csv, results)
    return results
