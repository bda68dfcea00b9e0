"""Autoregressive two-stage generation and frame-sequence export (CSV, PGM)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import autodiff as ad
from .conditioner import DecodeItem, stop_probability


class SessionClosed(RuntimeError):
    pass


class GenerationSession:
    """Generation state for a batch of sequences sharing frozen parameters.

    Holds, per sequence, the text, the prompt, the frames emitted so far and
    whether the sequence is still running. ``prev`` is the last emitted frame:
    the only history the flow head sees.
    """

    def __init__(self, model, texts, prompts, nfe=3, cfg_scale=1.6, sigma2=0.1, threshold=0.5,
                 max_len=None, max_len_factor=4, rng=None, pad_to=None):
        self.model = model
        self.texts = [np.asarray(t, dtype=np.int64) for t in texts]
        self.prompts = list(prompts)
        n = len(self.texts)
        self.nfe, self.cfg_scale, self.sigma2, self.threshold = nfe, cfg_scale, sigma2, threshold
        if max_len is None:
            self.max_len = [max_len_factor * len(t) for t in self.texts]
        else:
            self.max_len = [max_len] * n if np.isscalar(max_len) else list(max_len)
        if min(self.max_len) < 1:
            raise ValueError("max_len must be >= 1")
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.pad_to = pad_to
        D = model.task.frame_dim
        self.frames = [[] for _ in range(n)]
        self.prev = np.zeros((n, D))
        self.has_prev = np.zeros(n, dtype=bool)
        self.active = np.ones(n, dtype=bool)
        self.stop_override = None

    @property
    def done(self):
        return not self.active.any()

    def condition(self, rows=None, masked=False):
        """(z, stop_logit) for the next frame of each row in ``rows`` (default: active rows)."""
        rows = np.flatnonzero(self.active) if rows is None else np.asarray(rows)
        D = self.model.task.frame_dim
        items = [
            DecodeItem(self.texts[r], self.prompts[r],
                       np.array(self.frames[r]) if self.frames[r] else np.zeros((0, D)), masked=masked)
            for r in rows
        ]
        with ad.no_grad():
            z, stop, _ = self.model.lm.forward(items, pad_to=self.pad_to, last_only=True)
        return z.data.astype(np.float64), stop.data.astype(np.float64)

    def generate_token(self, z, z_uncond=None, rows=None):
        """Emit one frame for each row in ``rows`` (default: active rows) from conditions ``z``."""
        rows = np.flatnonzero(self.active) if rows is None else np.asarray(rows)
        if len(rows) == 0 or not self.active[rows].all():
            raise SessionClosed("generate_token called on a finished sequence")
        out = self.model.head.generate(
            z, self.prev[rows], self.has_prev[rows], self.rng, nfe=self.nfe, sigma2=self.sigma2,
            z_uncond=z_uncond, w=self.cfg_scale,
        )
        for r, frame in zip(rows, out):
            self.frames[r].append(frame)
        self.prev[rows] = out
        self.has_prev[rows] = True
        return out

    def step(self):
        """One autoregressive step for every active row; returns the emitted frames."""
        rows = np.flatnonzero(self.active)
        if len(rows) == 0:
            raise SessionClosed("session finished")
        z, stop_logit = self.condition(rows)
        if self.stop_override is not None:
            stop_logit = np.asarray(self.stop_override(rows, [len(self.frames[r]) for r in rows]), dtype=np.float64)
        z_uncond = None
        if self.cfg_scale != 1.0:
            z_uncond, _ = self.condition(rows, masked=True)
        out = self.generate_token(z, z_uncond, rows)
        stop = stop_probability(stop_logit) > self.threshold
        for r, s in zip(rows, stop):
            if s or len(self.frames[r]) >= self.max_len[r]:
                self.active[r] = False
        return out

    def run(self):
        while not self.done:
            self.step()
        return [np.array(f) for f in self.frames]


def generate_sequence(model, text, prompt, **kwargs):
    """Generate one frame sequence for ``text`` given ``prompt`` frames (None for no prompt)."""
    return GenerationSession(model, [text], [prompt], **kwargs).run()[0]


def generate_batch(model, examples, **kwargs):
    session = GenerationSession(model, [e.text for e in examples], [e.prompt for e in examples], **kwargs)
    return session.run()


# export --------------------------------------------------------------------


def write_csv(path, frames):
    frames = np.asarray(frames, dtype=np.float64)
    np.savetxt(path, frames, fmt="%.9g", delimiter=",")
    return Path(path)


def write_pgm(path, frames, lo=None, hi=None):
    """Binary 8-bit PGM, one column per frame, feature 0 at the bottom row."""
    frames = np.asarray(frames, dtype=np.float64)
    lo = frames.min() if lo is None else lo
    hi = frames.max() if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.clip(np.rint((frames - lo) * scale), 0, 255).astype(np.uint8).T[::-1]
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img).tobytes())
    return Path(path)


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
