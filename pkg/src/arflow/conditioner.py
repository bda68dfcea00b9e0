"""Causal transformer decoder producing a per-step condition vector and stop logit.

The input sequence of one item is::

    [text tokens] [sep] [prompt frames | null] [previous frames]

where the separator only appears when some acoustic position follows it.
The state for step ``i`` is read from the position just before frame ``i``
would be appended, so a teacher-forced pass over ``L`` frames yields ``L``
states and step ``i`` never sees frames ``>= i``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LayerNorm, Linear, MLP


@dataclass
class DecoderConfig:
    n_blocks: int = 2
    n_heads: int = 4
    embed_dim: int = 64
    ffn_dim: int = 256
    frame_dim: int = 16
    vocab_size: int = 8
    max_len: int = 256

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v <= 0:
                raise ValueError(f"DecoderConfig.{k} must be positive, got {v}")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")


@dataclass
class SymbolSequence:
    symbols: np.ndarray
    vocab_size: int

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.int64)
        if self.symbols.ndim != 1 or len(self.symbols) == 0:
            raise ValueError("symbol sequence must be a nonempty 1-D list")
        if self.symbols.min() < 0 or self.symbols.max() >= self.vocab_size:
            raise ValueError(f"symbols must lie in [0, {self.vocab_size})")


@dataclass
class StylePrompt:
    frames: np.ndarray | None
    masked: bool = False


@dataclass
class ConditionState:
    z: np.ndarray
    stop_logit: float
    step: int

    @property
    def stop_probability(self):
        return stop_probability(self.stop_logit)


def stop_probability(stop_logit):
    return ad._sigmoid(np.atleast_1d(np.asarray(stop_logit, dtype=np.float64))).reshape(np.shape(stop_logit))


@dataclass
class DecodeItem:
    """One sequence to encode: text ids, optional prompt (or masked prompt) and history frames."""

    text: np.ndarray
    prompt: np.ndarray | None
    frames: np.ndarray
    masked: bool = False


class Conditioner:
    def __init__(self, store, cfg, rng, name="lm"):
        self.cfg = cfg
        E, D = cfg.embed_dim, cfg.frame_dim
        self.tok = store.add(f"{name}.tok_emb", rng.normal(0, 0.02, (cfg.vocab_size, E)))
        self.sep = store.add(f"{name}.sep_emb", rng.normal(0, 0.02, (1, E)))
        self.null = store.add(f"{name}.null_prompt", rng.normal(0, 0.02, (1, E)))
        self.pos = store.add(f"{name}.pos_emb", rng.normal(0, 0.02, (cfg.max_len, E)))
        self.prenet = MLP(store, f"{name}.prenet", [D, E, E, E], rng, act="relu")
        self.blocks = []
        for i in range(cfg.n_blocks):
            p = f"{name}.block{i}"
            self.blocks.append({
                "ln1": LayerNorm(store, f"{p}.ln1", E),
                "q": Linear(store, f"{p}.q", E, E, rng),
                "k": Linear(store, f"{p}.k", E, E, rng),
                "v": Linear(store, f"{p}.v", E, E, rng),
                "o": Linear(store, f"{p}.o", E, E, rng),
                "ln2": LayerNorm(store, f"{p}.ln2", E),
                "ff1": Linear(store, f"{p}.ff1", E, cfg.ffn_dim, rng),
                "ff2": Linear(store, f"{p}.ff2", cfg.ffn_dim, E, rng),
            })
        self.ln_f = LayerNorm(store, f"{name}.ln_f", E)
        self.z_proj = Linear(store, f"{name}.z_proj", E, D, rng)
        self.stop_proj = Linear(store, f"{name}.stop_proj", E, 1, rng)
        self.dtype = self.tok.dtype
        self.last_attention = None

    def prenet_embed(self, frames):
        frames = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=self.dtype))
        if frames.shape[-1] != self.cfg.frame_dim:
            raise ValueError(f"frame width {frames.shape[-1]} != {self.cfg.frame_dim}")
        return self.prenet(frames)

    def _layout(self, items, pad_to):
        """Index of every input position into the embedding table, plus state positions."""
        V = self.cfg.vocab_size
        SEP, NULL, FRAME0 = V, V + 1, V + 2
        rows, frame_blocks, state_pos = [], [], []
        n_frames = 0
        for it in items:
            text = np.asarray(it.text, dtype=np.int64)
            if len(text) == 0:
                raise ValueError("empty text")
            if text.min() < 0 or text.max() >= V:
                raise ValueError(f"symbols must lie in [0, {V})")
            idx = list(text)
            acoustic = []
            if it.masked:
                acoustic.append(NULL)
            elif it.prompt is not None and len(it.prompt):
                acoustic.extend(range(FRAME0 + n_frames, FRAME0 + n_frames + len(it.prompt)))
                frame_blocks.append(np.asarray(it.prompt))
                n_frames += len(it.prompt)
            n_hist = len(it.frames)
            if n_hist:
                acoustic.extend(range(FRAME0 + n_frames, FRAME0 + n_frames + n_hist))
                frame_blocks.append(np.asarray(it.frames))
                n_frames += n_hist
            n_prompt = len(acoustic) - n_hist
            if acoustic:
                idx.append(SEP)
                idx.extend(acoustic)
            # state i sits on the position right before frame i would be appended;
            # without a prompt, state 0 reads the last text token (the separator comes later)
            first_frame = len(text) + 1 + n_prompt
            state0 = first_frame - 1 if n_prompt else len(text) - 1
            pos = [state0] + [first_frame + j for j in range(n_hist)]
            rows.append(idx)
            state_pos.append(pos)
        T = max(len(r) for r in rows)
        if pad_to is not None:
            if pad_to < T:
                raise ValueError(f"pad_to={pad_to} shorter than sequence length {T}")
            T = pad_to
        if T > self.cfg.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len={self.cfg.max_len}")
        idx = np.full((len(items), T), SEP, dtype=np.int64)
        valid = np.zeros((len(items), T), dtype=bool)
        for b, r in enumerate(rows):
            idx[b, :len(r)] = r
            valid[b, :len(r)] = True
        frames = np.concatenate(frame_blocks) if frame_blocks else np.zeros((0, self.cfg.frame_dim))
        return idx, valid, frames, state_pos

    def forward(self, items, pad_to=None, last_only=False):
        """Encode ``items``; returns ``(z, stop_logits, counts)``.

        ``z`` is (R, D), ``stop_logits`` is (R,), rows grouped per item in order,
        ``counts[b]`` states per item (``len(frames) + 1``, or 1 with ``last_only``).
        """
        cfg = self.cfg
        idx, valid, frames, state_pos = self._layout(items, pad_to)
        B, T = idx.shape
        parts = [self.tok, self.sep, self.null]
        if pad_to is not None:
            # fixed prenet batch shape, so per-row results cannot depend on how many frames exist
            frames = np.concatenate([frames, np.zeros((B * T - len(frames), cfg.frame_dim))])
        if len(frames):
            parts.append(self.prenet_embed(frames))
        table = ad.concat(parts, axis=0)
        h = ad.take(table, idx) + self.pos[:T]
        allowed = np.tril(np.ones((T, T), dtype=bool))[None, None] & valid[:, None, None, :]
        H = cfg.n_heads
        dh = cfg.embed_dim // H
        scale = 1.0 / np.sqrt(dh)
        for blk in self.blocks:
            a = blk["ln1"](h)
            q = blk["q"](a).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            k = blk["k"](a).reshape(B, T, H, dh).transpose(0, 2, 3, 1)
            v = blk["v"](a).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            att = ad.softmax(ad.matmul(q, k) * scale, mask=allowed)
            self.last_attention = att.data
            ctx = ad.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, T, cfg.embed_dim)
            h = h + blk["o"](ctx)
            h = h + blk["ff2"](ad.relu(blk["ff1"](blk["ln2"](h))))
        if last_only:
            state_pos = [p[-1:] for p in state_pos]
        flat = np.concatenate([b * T + np.asarray(p) for b, p in enumerate(state_pos)])
        # project every position, then gather: keeps matrix shapes independent of the state count
        out = self.ln_f(h.reshape(B * T, cfg.embed_dim))
        z = ad.take(self.z_proj(out), flat)
        stop = ad.take(self.stop_proj(out), flat).reshape(len(flat))
        return z, stop, [len(p) for p in state_pos]

    def decode_step(self, y, prompt, prev_frames, pad_to=None):
        """Condition state for the next frame given text, prompt and the frames so far."""
        prev_frames = np.zeros((0, self.cfg.frame_dim)) if prev_frames is None else np.asarray(prev_frames)
        item = DecodeItem(_symbols(y), None if prompt is None else prompt.frames, prev_frames,
                          masked=prompt is not None and prompt.masked)
        with ad.no_grad():
            z, stop, _ = self.forward([item], pad_to=pad_to, last_only=True)
        return ConditionState(z.data[0].astype(np.float64), float(stop.data[0]), len(prev_frames))

    def teacher_forced(self, y, prompt, target, pad_to=None):
        """All ``len(target)`` condition states in one pass (history = ``target[:-1]``)."""
        target = np.asarray(target)
        item = DecodeItem(_symbols(y), None if prompt is None else prompt.frames, target[:-1],
                          masked=prompt is not None and prompt.masked)
        with ad.no_grad():
            z, stop, _ = self.forward([item], pad_to=pad_to)
        return [ConditionState(z.data[i].astype(np.float64), float(stop.data[i]), i) for i in range(len(target))]


def _symbols(y):
    return y.symbols if isinstance(y, SymbolSequence) else np.asarray(y, dtype=np.int64)
