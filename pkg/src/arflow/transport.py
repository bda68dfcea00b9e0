"""Two-dimensional transport check: flow matching from N(0, I) to a ring of Gaussians.

``exact_field`` is the closed-form marginal field of the linear path with an
independent coupling, E[x1 - x0 | x_t = x]. Integrating it with many Euler
steps gives the best sampler any trained field could approach and serves as
the reference for the trained network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import VectorFieldNet, cfm_loss, euler_sample, make_path_sample, InformativePrior
from .params import ParamStore, adam_step


@dataclass(frozen=True)
class Ring:
    n_modes: int = 8
    radius: float = 3.0
    std: float = 0.1

    def centers(self):
        ang = 2 * np.pi * np.arange(self.n_modes) / self.n_modes
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def sample(self, n, rng):
        k = rng.integers(self.n_modes, size=n)
        return self.centers()[k] + self.std * rng.standard_normal((n, 2))


def exact_field(ring, x, t):
    """E[x1 - x0 | x_t = x] for x0 ~ N(0, I) and x1 drawn from ``ring`` independently."""
    x = np.asarray(x, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape[:-1])[..., None]
    c = ring.centers()
    s2 = ring.std ** 2
    var = (1 - t) ** 2 + t ** 2 * s2                     # per-axis variance of x_t given the mode
    cov = t * s2 - (1 - t)                               # Cov(x1 - x0, x_t) given the mode
    diff = x[..., None, :] - t[..., None] * c            # (..., K, 2)
    logw = -0.5 * (diff ** 2).sum(-1) / var
    w = np.exp(logw - logw.max(-1, keepdims=True))
    w /= w.sum(-1, keepdims=True)
    per_mode = c + (cov / var)[..., None] * diff
    return (w[..., None] * per_mode).sum(-2)


def fraction_near_modes(ring, x, tol=0.5):
    d = np.linalg.norm(np.asarray(x)[:, None, :] - ring.centers(), axis=-1)
    return float(np.mean(d.min(axis=1) <= tol))


def sample_exact(ring, n, nfe, rng):
    return euler_sample(lambda x, t, c: exact_field(ring, x, t), rng.standard_normal((n, 2)), nfe)


def train_field(ring, steps, seed=0, hidden=128, n_blocks=3, batch=256, lr=2e-3, warmup=100, dtype=np.float32):
    """Fit a VectorFieldNet by conditional flow matching; returns the net."""
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    net = VectorFieldNet(store, "ring", 2, 0, hidden, rng, n_blocks=n_blocks)
    prior = InformativePrior(None)
    for step in range(steps):
        x1 = ring.sample(batch, rng)
        sample = make_path_sample(x1, prior, rng.uniform(size=batch), rng)
        loss = cfm_loss(net, sample)
        loss.backward()
        frac = step / max(1, steps)
        scale = min(1.0, (step + 1) / warmup) * 0.5 * (1 + np.cos(np.pi * frac))
        adam_step(store, lr * max(scale, 0.02))
    return net


def sample_trained(net, n, nfe, rng):
    return euler_sample(net, rng.standard_normal((n, 2)), nfe)
