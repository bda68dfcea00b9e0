"""Linear-path conditional flow matching: priors, path samples, the loss, Euler sampling and CFG."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LayerNorm, Linear, MLP, TimestepEmbedding


@dataclass
class InformativePrior:
    """Gaussian prior centred on a previous-token statistic.

    ``mean`` is ``None`` (or a row of ``has_prev`` is False) where no previous
    token exists; those rows fall back to a standard normal.
    """

    mean: np.ndarray | None
    sigma2: float = 0.1
    has_prev: np.ndarray | None = None


@dataclass
class FlowSample:
    x_t: np.ndarray
    t: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    u: np.ndarray


@dataclass
class GuidanceSpec:
    """Classifier-free guidance: blend the field under ``cond`` with the field under ``uncond``."""

    scale: float
    cond: object = None
    uncond: object = None


def sample_prior(prev_stat, sigma2, rng, size=None, has_prev=None):
    """Draw ``prev_stat + sqrt(sigma2) * eps``; rows without a previous token get ``eps``.

    With ``prev_stat=None`` the result is a standard normal draw of shape ``size``.
    """
    if sigma2 < 0:
        raise ValueError(f"sigma2 must be non-negative, got {sigma2}")
    if prev_stat is None:
        return rng.standard_normal(size)
    prev_stat = np.asarray(prev_stat, dtype=np.float64)
    eps = rng.standard_normal(prev_stat.shape)
    x0 = prev_stat + np.sqrt(sigma2) * eps
    if has_prev is not None:
        has_prev = np.asarray(has_prev, dtype=bool).reshape((-1,) + (1,) * (prev_stat.ndim - 1))
        x0 = np.where(has_prev, x0, eps)
    return x0


def interpolate(x0, x1, t):
    """Point on the straight path from ``x0`` to ``x1``; exact at both endpoints."""
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    tt = t.reshape(t.shape + (1,) * (np.ndim(x1) - t.ndim))
    x_t = (1.0 - tt) * x0 + tt * x1
    # (1-t)*x0 + t*x1 can miss x1 by an ulp at t=1; pin the endpoints
    x_t = np.where(tt == 0, x0, np.where(tt == 1, x1, x_t))
    return x_t


def make_path_sample(x1, prior, t, rng):
    """Draw ``x0`` from ``prior`` and return the path point at time ``t`` with its target field."""
    x1 = np.asarray(x1, dtype=np.float64)
    if prior.mean is None:
        x0 = sample_prior(None, prior.sigma2, rng, size=x1.shape)
    else:
        x0 = sample_prior(prior.mean, prior.sigma2, rng, has_prev=prior.has_prev)
    t = np.asarray(t, dtype=np.float64)
    return FlowSample(x_t=interpolate(x0, x1, t), t=t, x0=x0, x1=x1, u=x1 - x0)


class VectorFieldNet:
    """Residual MLP field ``v(x, t, c)``.

    Input, time embedding and projected condition are summed into a hidden
    state, refined by pre-norm residual blocks (LayerNorm, Linear, SiLU,
    Linear), and read out to the data dimension. ``cond_layers=2`` gives the
    condition a two-layer projection (used by the fine stage); ``out_mask``
    pins chosen output components to zero.
    """

    def __init__(self, store, name, dim, cond_dim, hidden, rng, n_blocks=3, cond_layers=1, temb_dim=32,
                 out_mask=None):
        self.dim, self.cond_dim, self.hidden = dim, cond_dim, hidden
        self.inp = Linear(store, f"{name}.in", dim, hidden, rng)
        self.temb = TimestepEmbedding(store, f"{name}.temb", hidden, rng, feat_dim=temb_dim)
        self.cond = None
        if cond_dim:
            sizes = [cond_dim] + [hidden] * cond_layers
            self.cond = MLP(store, f"{name}.cond", sizes, rng, act="silu")
        self.blocks = []
        for i in range(n_blocks):
            self.blocks.append((
                LayerNorm(store, f"{name}.block{i}.ln", hidden),
                Linear(store, f"{name}.block{i}.fc1", hidden, hidden, rng),
                Linear(store, f"{name}.block{i}.fc2", hidden, hidden, rng),
            ))
        self.ln_out = LayerNorm(store, f"{name}.ln_out", hidden)
        self.out = Linear(store, f"{name}.out", hidden, dim, rng)
        self.dtype = self.inp.w.dtype
        # fixed 0/1 mask on the output components (structural zeros stay zero)
        self.out_mask = None if out_mask is None else np.asarray(out_mask, dtype=self.dtype)

    def __call__(self, x, t, cond=None):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.shape[-1] != self.dim:
            raise ValueError(f"field input width {x.shape[-1]} != {self.dim}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape[:-1])
        h = self.inp(x) + self.temb(t)
        if self.cond is not None:
            if cond is None:
                raise ValueError("this field needs a condition")
            cond = cond if isinstance(cond, Tensor) else Tensor(np.asarray(cond, dtype=self.dtype))
            h = h + self.cond(cond)
        for ln, fc1, fc2 in self.blocks:
            h = h + fc2(ad.silu(fc1(ln(h))))
        v = self.out(self.ln_out(h))
        return v if self.out_mask is None else v * Tensor(self.out_mask)

    def numpy_field(self, cond=None):
        """Gradient-free ``(x, t) -> v`` closure for the sampler."""

        def field(x, t):
            with ad.no_grad():
                return self(x, t, cond).data.astype(np.float64)

        return field


def cfm_loss(net, sample, cond=None, weights=None):
    """Mean over samples of ``||u - v(x_t, t, cond)||^2``.

    ``weights`` optionally reweights samples (they are normalised to sum to one).
    """
    n = sample.x_t.shape[0]
    if n == 0:
        raise ValueError("cfm_loss needs a nonempty batch")
    v = net(sample.x_t.astype(net.dtype), sample.t, cond)
    diff = v - Tensor(sample.u.astype(net.dtype))
    per_sample = ad.square(diff).sum(axis=-1)
    if weights is None:
        return per_sample.mean()
    w = np.asarray(weights, dtype=net.dtype)
    return (per_sample * (w / w.sum())).sum()


def blend_guidance(v_cond, v_uncond, w):
    return w * v_cond + (1 - w) * v_uncond


def euler_sample(field, x0, nfe, guidance=None, cond=None):
    """Integrate ``dx/dt = v(x, t)`` from t=0 to t=1 with ``nfe`` uniform Euler steps.

    ``field`` is either a :class:`VectorFieldNet` (called with ``cond``) or a
    plain ``(x, t, cond) -> v`` callable. With ``guidance`` every step uses
    ``blend_guidance`` of the field under ``guidance.cond`` and ``guidance.uncond``.
    """
    if nfe < 1:
        raise ValueError(f"nfe must be >= 1, got {nfe}")
    x = np.array(x0, dtype=np.float64)
    dt = 1.0 / nfe
    for k in range(nfe):
        t = np.full(x.shape[:-1], k / nfe)
        if guidance is None:
            v = _eval(field, x, t, cond)
        else:
            v = blend_guidance(_eval(field, x, t, guidance.cond), _eval(field, x, t, guidance.uncond), guidance.scale)
        x = x + dt * v
    return x


def _eval(field, x, t, cond):
    if isinstance(field, VectorFieldNet):
        with ad.no_grad():
            return field(x, t, cond).data.astype(np.float64)
    return np.asarray(field(x, t, cond), dtype=np.float64)
