"""Parameter storage, the Adam optimizer and the checkpoint file format."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, Tensor, default_dtype

CHECKPOINT_MAGIC = b"ARFLOWCK"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    pass


class ParamStore:
    """Named trainable tensors plus Adam moments, kept in insertion order."""

    def __init__(self, dtype=None):
        self.dtype = np.dtype(dtype or default_dtype()).type
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def num_parameters(self, prefix=""):
        return sum(t.data.size for n, t in self.params.items() if n.startswith(prefix))

    def grad(self, name):
        """Gradient of ``name``; zeros when nothing reached it."""
        t = self.params[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def arrays(self):
        return {n: t.data for n, t in self.params.items()}

    def load_arrays(self, arrays, strict=True):
        """Copy arrays into the existing tensors in place (layer references stay valid)."""
        missing = [n for n in self.params if n not in arrays]
        extra = [n for n in arrays if n not in self.params]
        if strict and (missing or extra):
            raise CheckpointError(f"parameter mismatch: missing={missing} unexpected={extra}")
        for name, t in self.params.items():
            if name not in arrays:
                continue
            a = np.asarray(arrays[name])
            if a.shape != t.data.shape:
                raise CheckpointError(f"{name}: shape {a.shape} != expected {t.data.shape}")
            t.data[...] = a


def adam_step(store, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update over every parameter with a gradient, then clear gradients."""
    for name, t in store.params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = betas
    store.step += 1
    bc1 = 1.0 - b1**store.step
    bc2 = 1.0 - b2**store.step
    for name, t in store.params.items():
        g = t.grad
        if g is None:
            continue
        m, v = store.m[name], store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        t.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(t.data.dtype)
        t.grad = None


def save_checkpoint(path, store, meta=None, with_optimizer=True):
    """Write parameters (and optionally Adam state) to ``path``.

    Layout: magic, little-endian uint64 header length, a sorted-key JSON header
    (format version, entry table, user metadata), then raw little-endian
    buffers. The same inputs always produce the same bytes.
    """
    arrays = {f"param/{n}": t.data for n, t in store.params.items()}
    if with_optimizer:
        arrays.update({f"adam_m/{n}": a for n, a in store.m.items()})
        arrays.update({f"adam_v/{n}": a for n, a in store.v.items()})
    entries = []
    offset = 0
    blobs = []
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "adam_step": store.step,
        "entries": entries,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)
    return path


def read_checkpoint(path):
    """Return ``(header, arrays)``; raises :class:`CheckpointError` naming the file."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        (hlen,) = struct.unpack("<Q", buf[8:16])
        header = json.loads(buf[16:16 + hlen])
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    body = memoryview(buf)[16 + hlen:]
    arrays = {}
    for e in header["entries"]:
        end = e["offset"] + e["nbytes"]
        if end > len(body):
            raise CheckpointError(f"{path}: truncated data for {e['name']}")
        a = np.frombuffer(body[e["offset"]:end], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = a.reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path, store, with_optimizer=True):
    """Restore ``store`` in place from ``path``; returns the user metadata."""
    header, arrays = read_checkpoint(path)
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    try:
        store.load_arrays(params)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if with_optimizer and any(k.startswith("adam_m/") for k in arrays):
        for name in store.params:
            store.m[name][...] = arrays[f"adam_m/{name}"]
            store.v[name][...] = arrays[f"adam_v/{name}"]
        store.step = header["adam_step"]
    return header["meta"]
