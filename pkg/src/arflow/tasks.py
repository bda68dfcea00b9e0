"""Synthetic spectrogram-like sequences with exact oracles.

Each symbol is drawn as a smooth envelope over the feature axis: two Gaussian
bumps whose positions depend on the symbol, shifted by the style's pitch
offset, with the second bump's position picked from one of ``n_modes``
equally likely renderings. Frames relax towards the current symbol's
envelope with AR(1) smoothing, so neighbouring frames are strongly
correlated, and each symbol lasts exactly ``frames_per_symbol`` frames.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CORPUS_VERSION = 1


class CorpusError(IOError):
    pass


@dataclass(frozen=True)
class Style:
    offset: int
    width: float
    gain: float


@dataclass(frozen=True)
class TaskSpec:
    vocab_size: int = 8
    frame_dim: int = 16
    frames_per_symbol: int = 4
    n_styles: int = 4
    noise: float = 0.01
    n_modes: int = 2
    min_symbols: int = 3
    max_symbols: int = 6
    prompt_symbols: int = 1
    smoothing: float = 0.6
    second_height: float = 0.7

    def __post_init__(self):
        for k in ("vocab_size", "frame_dim", "frames_per_symbol", "n_styles", "n_modes", "min_symbols"):
            if getattr(self, k) < 1:
                raise ValueError(f"TaskSpec.{k} must be >= 1")
        if self.frame_dim % 2:
            raise ValueError("TaskSpec.frame_dim must be even")
        if self.max_symbols < self.min_symbols:
            raise ValueError("max_symbols < min_symbols")
        if self.min_symbols <= self.prompt_symbols:
            raise ValueError("every instance needs at least one symbol after the prompt")
        if not 0 <= self.smoothing < 1:
            raise ValueError("smoothing must lie in [0, 1)")

    def style(self, s):
        """Style ``s``: even/odd styles differ by one bin of pitch; pairs alternate width and gain."""
        wide = (s // 2) % 2
        return Style(offset=s % 2, width=1.0 + 0.3 * wide, gain=1.1 - 0.2 * wide)

    def centers(self, symbol, mode):
        first = 2 * (symbol % 4)
        gap = 4 + 3 * ((symbol // 4) % 2)
        shift = 2 * mode - (self.n_modes - 1)
        return first, first + gap + shift

    def envelope(self, symbol, style, mode):
        st = self.style(style) if isinstance(style, (int, np.integer)) else style
        c1, c2 = self.centers(symbol, mode)
        h2 = self.second_height * (1.0 - 0.3 * ((symbol // 8) % 2))
        j = np.arange(self.frame_dim)
        return st.gain * (np.exp(-0.5 * ((j - c1 - st.offset) / st.width) ** 2)
                          + h2 * np.exp(-0.5 * ((j - c2 - st.offset) / st.width) ** 2))


@dataclass
class TaskInstance:
    symbols: np.ndarray
    style: int
    modes: np.ndarray
    frames: np.ndarray
    seed: int = 0

    @property
    def length(self):
        return len(self.frames)


@dataclass
class Example:
    """A model-facing view: text, prompt frames and the frames to generate."""

    text: np.ndarray
    prompt: np.ndarray
    target: np.ndarray
    target_symbols: np.ndarray
    style: int
    start_prev: np.ndarray | None
    setting: str = "continuation"
    meta: dict = field(default_factory=dict)

    @property
    def length(self):
        return len(self.target)


def smooth_segment(spec, env, prev, k, rng=None):
    """``k`` frames relaxing from ``prev`` (or starting at ``env`` if None) towards ``env``."""
    out = np.empty((k, spec.frame_dim))
    rho = spec.smoothing
    x = prev
    for r in range(k):
        x = env if x is None else rho * x + (1 - rho) * env
        if rng is not None and spec.noise > 0:
            x = x + spec.noise * rng.standard_normal(spec.frame_dim)
        out[r] = x
    return out


def render(spec, y, style, rng, modes=None, seed=0):
    """Render symbols ``y`` in ``style``; ``modes`` are drawn from ``rng`` unless given."""
    y = np.asarray(y, dtype=np.int64)
    if y.ndim != 1 or len(y) == 0 or y.min() < 0 or y.max() >= spec.vocab_size:
        raise ValueError("invalid symbol sequence")
    if modes is None:
        modes = rng.integers(spec.n_modes, size=len(y))
    modes = np.asarray(modes, dtype=np.int64)
    k = spec.frames_per_symbol
    frames = np.empty((k * len(y), spec.frame_dim))
    prev = None
    for n, (sym, m) in enumerate(zip(y, modes)):
        seg = smooth_segment(spec, spec.envelope(sym, style, m), prev, k, rng)
        frames[n * k:(n + 1) * k] = seg
        prev = seg[-1]
    return TaskInstance(y, int(style), modes, frames, seed)


def sample_instance(spec, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(spec.min_symbols, spec.max_symbols + 1))
    y = rng.integers(spec.vocab_size, size=n)
    style = int(rng.integers(spec.n_styles))
    return render(spec, y, style, rng, seed=seed)


def instance_seeds(seed, n):
    return [int(s.generate_state(1, dtype=np.uint64)[0] >> 1) for s in np.random.SeedSequence(seed).spawn(n)]


def make_corpus(spec, n, seed):
    return [sample_instance(spec, s) for s in instance_seeds(seed, n)]


# examples ------------------------------------------------------------------


def continuation_example(spec, inst):
    kp = spec.frames_per_symbol * spec.prompt_symbols
    return Example(
        text=inst.symbols.copy(),
        prompt=inst.frames[:kp],
        target=inst.frames[kp:],
        target_symbols=inst.symbols[spec.prompt_symbols:],
        style=inst.style,
        start_prev=inst.frames[kp - 1],
        setting="continuation",
    )


def cross_example(spec, prompt_inst, target_inst):
    """Prompt taken from ``prompt_inst``; the whole of ``target_inst`` is generated."""
    if prompt_inst.style != target_inst.style:
        raise ValueError("cross examples pair instances of the same style")
    p = spec.prompt_symbols
    kp = spec.frames_per_symbol * p
    return Example(
        text=np.concatenate([prompt_inst.symbols[:p], target_inst.symbols]),
        prompt=prompt_inst.frames[:kp],
        target=target_inst.frames,
        target_symbols=target_inst.symbols,
        style=target_inst.style,
        start_prev=None,
        setting="cross",
    )


def cross_pairs(instances, rng):
    """For each instance pick a different instance of the same style as its prompt source."""
    by_style = {}
    for i, inst in enumerate(instances):
        by_style.setdefault(inst.style, []).append(i)
    pairs = []
    for i, inst in enumerate(instances):
        pool = [j for j in by_style[inst.style] if j != i] or [i]
        pairs.append((pool[int(rng.integers(len(pool)))], i))
    return pairs


def make_examples(spec, instances, setting, seed=0):
    if setting == "continuation":
        return [continuation_example(spec, inst) for inst in instances]
    if setting == "cross":
        rng = np.random.default_rng(seed)
        return [cross_example(spec, instances[a], instances[b]) for a, b in cross_pairs(instances, rng)]
    raise ValueError(f"unknown setting {setting!r}")


# metrics -------------------------------------------------------------------


@dataclass
class MetricRecord:
    len_err: int
    mse: float
    corr: float
    mode_acc: float


def _pearson_rows(a, b):
    a = a - a.mean(axis=-1, keepdims=True)
    b = b - b.mean(axis=-1, keepdims=True)
    den = np.sqrt((a * a).sum(-1) * (b * b).sum(-1))
    return np.where(den > 0, (a * b).sum(-1) / np.where(den > 0, den, 1.0), 0.0)


def oracle_metrics(generated, example, spec):
    """Length error, aligned per-frame MSE, mean per-frame Pearson correlation and symbol accuracy.

    Symbol accuracy: a target symbol counts as recovered when its generated
    frames are closer (MSE) to the noiseless rendering of that symbol than to
    the rendering of any other symbol, each taking its best mode and relaxing
    from the true preceding frame.
    """
    generated = np.asarray(generated, dtype=np.float64)
    target = np.asarray(example.target, dtype=np.float64)
    if generated.ndim != 2 or len(generated) == 0 or len(target) == 0:
        raise ValueError("oracle_metrics needs nonempty frame sequences")
    n = min(len(generated), len(target))
    g, tgt = generated[:n], target[:n]
    mse = float(np.mean((g - tgt) ** 2))
    corr = float(np.mean(_pearson_rows(g, tgt)))
    k = spec.frames_per_symbol
    hits = 0
    for j, sym in enumerate(example.target_symbols):
        lo, hi = j * k, min((j + 1) * k, n)
        if hi <= lo:
            continue
        prev = example.start_prev if j == 0 else target[lo - 1]
        best_sym, best = -1, np.inf
        for v in range(spec.vocab_size):
            for m in range(spec.n_modes):
                cand = smooth_segment(spec, spec.envelope(v, example.style, m), prev, k)[: hi - lo]
                err = np.mean((generated[lo:hi] - cand) ** 2)
                if err < best:
                    best_sym, best = v, err
        hits += best_sym == sym
    return MetricRecord(
        len_err=abs(len(generated) - len(target)),
        mse=mse,
        corr=corr,
        mode_acc=hits / len(example.target_symbols),
    )


# corpus on disk ------------------------------------------------------------


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_corpus(out_dir, spec, instances, seed, force=False):
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty (use force)")
        shutil.rmtree(out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, inst in enumerate(instances):
        rel = f"frames/{i:06d}.csv"
        np.savetxt(out / rel, inst.frames, fmt="%.17g", delimiter=",")
        entries.append({
            "id": i,
            "file": rel,
            "sha256": _sha256(out / rel),
            "symbols": [int(s) for s in inst.symbols],
            "style": int(inst.style),
            "modes": [int(m) for m in inst.modes],
            "seed": int(inst.seed),
            "length": int(inst.length),
        })
    manifest = {"format_version": CORPUS_VERSION, "seed": int(seed), "spec": asdict(spec), "instances": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out / "manifest.json"


def load_corpus(corpus_dir):
    root = Path(corpus_dir)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, ValueError) as exc:
        raise CorpusError(f"{mpath}: {exc}") from exc
    if manifest.get("format_version") != CORPUS_VERSION:
        raise CorpusError(f"{mpath}: unsupported corpus version")
    spec = TaskSpec(**manifest["spec"])
    instances = []
    for e in manifest["instances"]:
        path = root / e["file"]
        try:
            if _sha256(path) != e["sha256"]:
                raise CorpusError(f"{path}: checksum mismatch (corrupted shard)")
            frames = np.loadtxt(path, delimiter=",", ndmin=2)
        except OSError as exc:
            raise CorpusError(f"{path}: {exc}") from exc
        except ValueError as exc:
            raise CorpusError(f"{path}: unreadable frames ({exc})") from exc
        if frames.shape != (e["length"], spec.frame_dim):
            raise CorpusError(f"{path}: expected shape {(e['length'], spec.frame_dim)}, got {frames.shape}")
        instances.append(TaskInstance(np.array(e["symbols"]), e["style"], np.array(e["modes"]), frames, e["seed"]))
    return spec, instances, manifest
