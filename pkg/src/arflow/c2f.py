"""Coarse-to-fine split of a frame along its feature axis and the two-stage flow head.

The coarse part of a frame is its even-indexed features; the fine part is what
remains after zero-inserting the coarse part back to full width. A coarse
field generates the even features first; a fine field, conditioned on the
coarse result, generates the residual. The ``hfm`` (one full-width stage) and
``dfm`` (fine stage blind to the coarse part) variants exist for ablations.
"""

from __future__ import annotations

import numpy as np

from . import flow
from .autodiff import Tensor, concat

MECHANISMS = ("c2f", "dfm", "hfm")
PRIORS = ("previous", "vanilla")


def downsample(frame):
    frame = np.asarray(frame)
    if frame.shape[-1] % 2:
        raise ValueError(f"feature dimension must be even, got {frame.shape[-1]}")
    return frame[..., 0::2]


def upsample(coarse):
    coarse = np.asarray(coarse)
    out = np.zeros(coarse.shape[:-1] + (2 * coarse.shape[-1],), dtype=coarse.dtype)
    out[..., 0::2] = coarse
    return out


def decompose(frame):
    """Return ``(coarse, fine)`` with ``upsample(coarse) + fine == frame`` exactly."""
    coarse = downsample(frame)
    fine = np.asarray(frame) - upsample(coarse)
    return coarse, fine


def reconstruct(coarse, fine):
    return upsample(coarse) + fine


def frame_prior(prev_frame, has_prev, sigma2, rng, prior_kind="previous"):
    """Full-width prior sample: ``N(prev_frame, sigma2 I)``, or ``N(0, I)`` for rows
    without a previous frame and everywhere under the vanilla prior."""
    prev_frame = np.asarray(prev_frame, dtype=np.float64)
    if prior_kind == "vanilla":
        return flow.sample_prior(None, sigma2, rng, size=prev_frame.shape)
    return flow.sample_prior(prev_frame, sigma2, rng, has_prev=has_prev)


def split_prior(prev_frame, has_prev, sigma2, rng, prior_kind="previous"):
    """Coarse and fine prior samples: one full-width draw split like a frame.

    The coarse part centres on ``downsample(prev_frame)`` and the fine part on
    the fine residual of ``prev_frame``; the fine part has zeros at even
    indices like every fine residual.
    """
    return decompose(frame_prior(prev_frame, has_prev, sigma2, rng, prior_kind))


def fine_mask(frame_dim):
    """1 on odd features: the support of a fine residual."""
    return (np.arange(frame_dim) % 2).astype(np.float64)


def c2f_loss(coarse_net, fine_net, frame, prev_frame, z, rng, sigma2=0.1, has_prev=None,
             prior="previous", blind_fine=False, return_parts=False):
    """Summed coarse and fine CFM losses for a batch of frames (teacher-forced coarse condition).

    ``frame``, ``prev_frame``: (n, D); ``z``: (n, D) condition (array or Tensor).
    Rows with ``has_prev`` False use a standard normal prior. Each stage draws
    its own t. ``blind_fine`` zeroes the coarse input of the fine condition.
    """
    frame = np.asarray(frame, dtype=np.float64)
    n = frame.shape[0]
    if has_prev is None:
        has_prev = np.ones(n, dtype=bool)
    x1c, x1f = decompose(frame)
    x0c, x0f = split_prior(prev_frame, has_prev, sigma2, rng, prior)
    t_c = rng.uniform(size=n)
    t_f = rng.uniform(size=n)
    s_c = path_sample(x0c, x1c, t_c)
    s_f = path_sample(x0f, x1f, t_f)
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=coarse_net.dtype))
    loss_c = flow.cfm_loss(coarse_net, s_c, z)
    loss_f = flow.cfm_loss(fine_net, s_f, fine_condition(z, x1c, blind_fine, fine_net.dtype))
    total = loss_c + loss_f
    if return_parts:
        return total, loss_c, loss_f, (s_c, s_f)
    return total


def path_sample(x0, x1, t):
    return flow.FlowSample(x_t=flow.interpolate(x0, x1, t), t=np.asarray(t, dtype=np.float64), x0=x0, x1=x1,
                           u=x1 - x0)


def fine_condition(z, coarse, blind, dtype):
    coarse = np.zeros_like(coarse) if blind else coarse
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=dtype))
    return concat([z, Tensor(np.asarray(coarse, dtype=dtype))], axis=-1)


class FlowHead:
    """The per-token generator: coarse + fine fields (or one field for ``hfm``)."""

    def __init__(self, store, frame_dim, cond_dim, hidden, rng, mechanism="c2f", prior="previous",
                 n_blocks=3, name="fm"):
        if mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}")
        if prior not in PRIORS:
            raise ValueError(f"prior must be one of {PRIORS}")
        if frame_dim % 2:
            raise ValueError("frame_dim must be even")
        self.mechanism, self.prior, self.frame_dim = mechanism, prior, frame_dim
        if mechanism == "hfm":
            self.full = flow.VectorFieldNet(store, f"{name}.full", frame_dim, cond_dim, hidden, rng, n_blocks)
            self.coarse = self.fine = None
        else:
            self.full = None
            self.coarse = flow.VectorFieldNet(store, f"{name}.coarse", frame_dim // 2, cond_dim, hidden, rng, n_blocks)
            self.fine = flow.VectorFieldNet(store, f"{name}.fine", frame_dim, cond_dim + frame_dim // 2,
                                            hidden, rng, n_blocks, cond_layers=2, out_mask=fine_mask(frame_dim))

    def loss(self, frame, prev_frame, z, has_prev, sigma2, rng):
        """Returns the flow-matching loss (a scalar Tensor) for a batch of target frames."""
        if self.mechanism == "hfm":
            frame = np.asarray(frame, dtype=np.float64)
            x0 = frame_prior(prev_frame, has_prev, sigma2, rng, self.prior)
            t = rng.uniform(size=frame.shape[0])
            return flow.cfm_loss(self.full, path_sample(x0, frame, t), z)
        return c2f_loss(self.coarse, self.fine, frame, prev_frame, z, rng, sigma2, has_prev,
                        self.prior, blind_fine=self.mechanism == "dfm")

    def fine_field_input_condition(self, z, coarse):
        return fine_condition(z, coarse, self.mechanism == "dfm", self.fine.dtype)

    def generate(self, z, prev_frame, has_prev, rng, nfe=3, sigma2=0.1, z_uncond=None, w=1.0):
        """Generate one frame per row; CFG is applied when ``z_uncond`` is given."""
        z = np.asarray(z)
        n = z.shape[0]
        prev_frame = np.zeros((n, self.frame_dim)) if prev_frame is None else np.asarray(prev_frame, dtype=np.float64)
        has_prev = np.zeros(n, dtype=bool) if has_prev is None else np.asarray(has_prev, dtype=bool)

        def run(net, x0, cond, cond_u):
            guidance = None if z_uncond is None else flow.GuidanceSpec(w, cond, cond_u)
            return flow.euler_sample(net, x0, nfe, guidance=guidance, cond=cond)

        if self.mechanism == "hfm":
            return run(self.full, frame_prior(prev_frame, has_prev, sigma2, rng, self.prior), z, z_uncond)
        x0c, x0f = split_prior(prev_frame, has_prev, sigma2, rng, self.prior)
        coarse = run(self.coarse, x0c, z, z_uncond)
        cond = self.fine_field_input_condition(z, coarse)
        cond_u = None if z_uncond is None else self.fine_field_input_condition(z_uncond, coarse)
        fine = run(self.fine, x0f, cond, cond_u)
        return reconstruct(coarse, fine)
