"""Model assembly, the combined objective and the optimisation loop."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .c2f import MECHANISMS, PRIORS, FlowHead
from .conditioner import Conditioner, DecodeItem, DecoderConfig
from .params import ParamStore, adam_step, load_checkpoint, read_checkpoint, save_checkpoint
from .tasks import TaskSpec, continuation_example, cross_example

METRIC_COLUMNS = ("step", "loss_c2f", "loss_cond", "loss_stop", "loss_total", "sec")


class TrainingDiverged(NonFiniteError):
    pass


@dataclass
class ModelConfig:
    n_blocks: int = 2
    n_heads: int = 4
    embed_dim: int = 64
    ffn_dim: int = 256
    max_len: int = 256
    fm_hidden: int = 96
    fm_blocks: int = 3
    mechanism: str = "c2f"
    prior: str = "previous"
    match_params: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"model.mechanism must be one of {MECHANISMS}")
        if self.prior not in PRIORS:
            raise ValueError(f"model.prior must be one of {PRIORS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("model.dtype must be float32 or float64")


@dataclass
class TrainConfig:
    cond_weight: float = 0.1
    stop_weight: float = 0.01
    sigma2: float = 0.1
    p_drop: float = 0.1
    lr: float = 1e-3
    warmup: int = 100
    lr_decay: str = "cosine"
    lr_min_ratio: float = 0.05
    batch_size: int = 16
    steps: int = 3000
    cross_fraction: float = 0.5
    seed: int = 0
    log_every: int = 10
    ckpt_every: int = 1000
    log_wall_time: bool = True

    def __post_init__(self):
        for k in ("cond_weight", "stop_weight", "sigma2", "lr"):
            if getattr(self, k) < 0:
                raise ValueError(f"train.{k} must be non-negative")
        for k in ("p_drop", "cross_fraction"):
            if not 0 <= getattr(self, k) <= 1:
                raise ValueError(f"train.{k} must lie in [0, 1]")
        if self.lr_decay not in ("cosine", "constant"):
            raise ValueError("train.lr_decay must be 'cosine' or 'constant'")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("train.batch_size must be >= 1 and train.steps >= 0")


@dataclass
class GenConfig:
    nfe: int = 3
    cfg_scale: float = 1.6
    sigma2: float = 0.1
    threshold: float = 0.5
    max_len_factor: int = 4

    def __post_init__(self):
        if self.nfe < 1:
            raise ValueError("gen.nfe must be >= 1")


@dataclass
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gen: GenConfig = field(default_factory=GenConfig)

    def to_dict(self):
        return {"task": asdict(self.task), "model": asdict(self.model),
                "train": asdict(self.train), "gen": asdict(self.gen)}

    @classmethod
    def from_dict(cls, d):
        return cls(TaskSpec(**d.get("task", {})), ModelConfig(**d.get("model", {})),
                   TrainConfig(**d.get("train", {})), GenConfig(**d.get("gen", {})))


# model ---------------------------------------------------------------------


def _head_params(task, mcfg, mechanism, hidden):
    rng = np.random.default_rng(0)
    store = ParamStore(np.float32)
    FlowHead(store, task.frame_dim, task.frame_dim, hidden, rng, mechanism, mcfg.prior, mcfg.fm_blocks)
    return len(store) and store.num_parameters()


def matched_hidden(task, mcfg):
    """Hidden width giving this mechanism about the parameter count of the c2f head."""
    if mcfg.mechanism != "hfm" or not mcfg.match_params:
        return mcfg.fm_hidden
    target = _head_params(task, mcfg, "c2f", mcfg.fm_hidden)
    return min(range(8, 4 * mcfg.fm_hidden + 1),
               key=lambda h: abs(_head_params(task, mcfg, "hfm", h) - target))


class Model:
    """Conditioner + flow head sharing one ParamStore."""

    def __init__(self, task, mcfg=None, seed=0):
        self.task = task
        self.mcfg = mcfg or ModelConfig()
        self.store = ParamStore(np.dtype(self.mcfg.dtype).type)
        rng = np.random.default_rng(seed)
        dcfg = DecoderConfig(self.mcfg.n_blocks, self.mcfg.n_heads, self.mcfg.embed_dim, self.mcfg.ffn_dim,
                             task.frame_dim, task.vocab_size, self.mcfg.max_len)
        self.lm = Conditioner(self.store, dcfg, rng)
        self.head = FlowHead(self.store, task.frame_dim, task.frame_dim, matched_hidden(task, self.mcfg), rng,
                             self.mcfg.mechanism, self.mcfg.prior, self.mcfg.fm_blocks)


def build_model(cfg, seed=None):
    return Model(cfg.task, cfg.model, cfg.train.seed if seed is None else seed)


# losses --------------------------------------------------------------------


def cond_loss(z, x):
    """Per-row ``||z - x||_1 + ||z - x||_2^2``, averaged over rows."""
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    x = np.asarray(x, dtype=z.dtype)
    if z.shape != x.shape:
        raise ValueError(f"cond_loss: shape {z.shape} != {x.shape}")
    d = z - Tensor(x)
    per_row = ad.abs_(d).sum(axis=-1) + ad.square(d).sum(axis=-1)
    return per_row.mean()


def stop_labels(lengths):
    labels = []
    for n in lengths:
        lab = np.zeros(n)
        lab[-1] = 1.0
        labels.append(lab)
    return np.concatenate(labels)


def stop_loss(stop_logits, oracle_len):
    """BCE with label 1 on the last step only, averaged over steps.

    ``oracle_len`` may be a list of lengths for a concatenation of sequences;
    the result is then the mean of the per-sequence losses.
    """
    logits = stop_logits if isinstance(stop_logits, Tensor) else Tensor(np.asarray(stop_logits, dtype=np.float64))
    lengths = [oracle_len] if np.isscalar(oracle_len) else list(oracle_len)
    if logits.shape != (sum(lengths),):
        raise ValueError(f"stop_loss: {logits.shape[0]} logits for lengths {lengths}")
    weights = np.concatenate([np.full(n, 1.0 / (n * len(lengths))) for n in lengths])
    per_step = ad.bce_with_logits(logits, stop_labels(lengths))
    return (per_step * weights.astype(logits.dtype)).sum()


# batches -------------------------------------------------------------------


@dataclass
class Batch:
    examples: list
    masked: np.ndarray


def sample_batch(task, instances, by_style, tcfg, rng):
    """Mixed continuation / cross examples; each prompt is masked with probability ``p_drop``."""
    examples = []
    for _ in range(tcfg.batch_size):
        i = int(rng.integers(len(instances)))
        inst = instances[i]
        if rng.uniform() < tcfg.cross_fraction:
            pool = by_style[inst.style]
            j = pool[int(rng.integers(len(pool)))]
            examples.append(cross_example(task, instances[j], inst))
        else:
            examples.append(continuation_example(task, inst))
    masked = rng.uniform(size=len(examples)) < tcfg.p_drop
    return Batch(examples, masked)


def batch_losses(model, batch, tcfg, rng):
    """Returns ``(total, parts)``: the objective Tensor and the three component Tensors."""
    items = [DecodeItem(e.text, e.prompt, e.target[:-1], masked=bool(m)) for e, m in zip(batch.examples, batch.masked)]
    z, stop, counts = model.lm.forward(items)
    target = np.concatenate([e.target for e in batch.examples])
    prev = np.concatenate([np.vstack([np.zeros((1, e.target.shape[1])), e.target[:-1]]) for e in batch.examples])
    has_prev = np.concatenate([np.arange(len(e.target)) > 0 for e in batch.examples])
    l_fm = model.head.loss(target, prev, z, has_prev, tcfg.sigma2, rng)
    l_cond = cond_loss(z, target)
    l_stop = stop_loss(stop, counts)
    total = l_fm + tcfg.cond_weight * l_cond + tcfg.stop_weight * l_stop
    return total, (l_fm, l_cond, l_stop)


def lr_at(step, tcfg):
    """Linear warmup over ``warmup`` steps, then constant or cosine decay to ``lr_min_ratio * lr`` at ``steps``."""
    if tcfg.warmup > 0 and step < tcfg.warmup:
        return tcfg.lr * (step + 1) / tcfg.warmup
    if tcfg.lr_decay == "constant" or tcfg.steps <= tcfg.warmup:
        return tcfg.lr
    frac = min(1.0, (step - tcfg.warmup) / (tcfg.steps - tcfg.warmup))
    lo = tcfg.lr * tcfg.lr_min_ratio
    return lo + 0.5 * (tcfg.lr - lo) * (1.0 + math.cos(math.pi * frac))


# logging -------------------------------------------------------------------


class MetricLog:
    """Append-only training records, mirrored to a CSV file when ``path`` is set."""

    def __init__(self, path=None, append=False):
        self.records = []
        self.path = Path(path) if path else None
        if self.path and not append:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)

    def append(self, rec):
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise ValueError("metric steps must increase")
        self.records.append(rec)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(rec[c]) for c in METRIC_COLUMNS])

    def column(self, name):
        return np.array([r[name] for r in self.records])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]


# loop ----------------------------------------------------------------------


class Trainer:
    def __init__(self, cfg, instances, out_dir=None, model=None):
        self.cfg = cfg
        self.task = cfg.task
        self.instances = instances
        self.by_style = {}
        for i, inst in enumerate(instances):
            self.by_style.setdefault(inst.style, []).append(i)
        self.model = model or build_model(cfg)
        self.rng = np.random.default_rng(cfg.train.seed + 1)
        self.step = 0
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.last_checkpoint = None
        self.log = MetricLog(self.out_dir / "metrics.csv" if self.out_dir else None)

    def train_step(self, batch=None):
        tcfg = self.cfg.train
        batch = batch or sample_batch(self.task, self.instances, self.by_style, tcfg, self.rng)
        t0 = time.perf_counter()
        where = f"at step {self.step}; last good checkpoint: {self.last_checkpoint}"
        try:
            total, (l_fm, l_cond, l_stop) = batch_losses(self.model, batch, tcfg, self.rng)
            vals = [float(l_fm.item()), float(l_cond.item()), float(l_stop.item())]
            total.backward()
            adam_step(self.model.store, lr_at(self.step, tcfg))
        except NonFiniteError as exc:
            raise TrainingDiverged(f"{exc} {where}") from exc
        self.step += 1
        rec = {
            "step": self.step,
            "loss_c2f": vals[0],
            "loss_cond": vals[1],
            "loss_stop": vals[2],
            "loss_total": vals[0] + tcfg.cond_weight * vals[1] + tcfg.stop_weight * vals[2],
            "sec": time.perf_counter() - t0 if tcfg.log_wall_time else 0.0,
        }
        return rec

    def fit(self, steps=None, callback=None):
        tcfg = self.cfg.train
        end = tcfg.steps if steps is None else self.step + steps
        while self.step < end:
            rec = self.train_step()
            if self.step % tcfg.log_every == 0 or self.step == end:
                self.log.append(rec)
            if callback:
                callback(self, rec)
            if self.out_dir and tcfg.ckpt_every and self.step % tcfg.ckpt_every == 0:
                self.save(self.out_dir / f"step{self.step:06d}.ckpt")
        if self.out_dir:
            self.save(self.out_dir / "final.ckpt")
        return self.log

    def save(self, path):
        meta = {
            "config": self.cfg.to_dict(),
            "step": self.step,
            "rng_state": self.rng.bit_generator.state,
        }
        save_checkpoint(path, self.model.store, meta)
        self.last_checkpoint = str(path)
        return path

    @classmethod
    def resume(cls, path, instances, out_dir=None):
        """Continue a run from a checkpoint: parameters, Adam moments, RNG and step."""
        header, _ = read_checkpoint(path)
        cfg = RunConfig.from_dict(header["meta"]["config"])
        tr = cls(cfg, instances, out_dir=None)
        load_checkpoint(path, tr.model.store)
        tr.step = header["meta"]["step"]
        tr.rng.bit_generator.state = _decode_state(header["meta"]["rng_state"])
        tr.out_dir = Path(out_dir) if out_dir else None
        if tr.out_dir:
            tr.out_dir.mkdir(parents=True, exist_ok=True)
            path_csv = tr.out_dir / "metrics.csv"
            kept = [r for r in read_metrics(path_csv) if r["step"] <= tr.step] if path_csv.exists() else []
            tr.log = MetricLog(path_csv)
            for r in kept:
                tr.log.append(r)
        tr.last_checkpoint = str(path)
        return tr


def _decode_state(state):
    # JSON turns the big ints of PCG64 state back into ints already; keep as-is
    return state


def load_model(path):
    """Model and run config from a checkpoint written by :class:`Trainer`."""
    header, _ = read_checkpoint(path)
    cfg = RunConfig.from_dict(header["meta"]["config"])
    model = build_model(cfg)
    load_checkpoint(path, model.store, with_optimizer=False)
    return model, cfg


def config_fields():
    """Every accepted ``section.key`` name with its default value."""
    out = {}
    for section, cls in (("task", TaskSpec), ("model", ModelConfig), ("train", TrainConfig), ("gen", GenConfig)):
        for f in fields(cls):
            default = f.default if f.default is not f.default_factory else f.default_factory()
            out[f"{section}.{f.name}"] = default
    return out
