"""Small layers built on :mod:`arflow.autodiff`, each registering its weights in a ParamStore."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def xavier_uniform(rng, n_in, n_out):
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


class Linear:
    def __init__(self, store, name, n_in, n_out, rng, bias=True):
        self.n_in, self.n_out = n_in, n_out
        self.w = store.add(f"{name}.weight", xavier_uniform(rng, n_in, n_out))
        self.b = store.add(f"{name}.bias", np.zeros(n_out)) if bias else None

    def __call__(self, x):
        return ad.linear(x, self.w, self.b)


class LayerNorm:
    def __init__(self, store, name, dim):
        self.gain = store.add(f"{name}.gain", np.ones(dim))
        self.bias = store.add(f"{name}.bias", np.zeros(dim))

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)


class MLP:
    """Stack of Linear layers with an activation between them (none after the last)."""

    def __init__(self, store, name, sizes, rng, act="silu"):
        self.layers = [
            Linear(store, f"{name}.{i}", a, b, rng) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.act = act

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            if i:
                x = ad.activation(x, self.act)
            x = layer(x)
        return x


def sinusoidal_features(t, dim):
    """Half sine, half cosine features of ``t`` with frequencies geometric in [1, 1e4]."""
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("timestep must lie in [0, 1]")
    half = dim // 2
    freqs = np.geomspace(1.0, 1e4, half)
    arg = t[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


class TimestepEmbedding:
    """Sinusoidal features of t passed through Linear -> SiLU -> Linear."""

    def __init__(self, store, name, out_dim, rng, feat_dim=32):
        if feat_dim % 2:
            raise ValueError("feat_dim must be even")
        self.feat_dim = feat_dim
        self.out_dim = out_dim
        self.mlp = MLP(store, name, [feat_dim, out_dim, out_dim], rng, act="silu")

    def __call__(self, t):
        feats = sinusoidal_features(t, self.feat_dim).astype(self.mlp.layers[0].w.dtype)
        return self.mlp(Tensor(feats))
