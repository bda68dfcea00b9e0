import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from arflow import autodiff as ad
from arflow.c2f import FlowHead, c2f_loss, decompose, downsample, fine_mask, reconstruct, split_prior, upsample
from arflow.flow import cfm_loss
from arflow.params import ParamStore
from helpers import RTOL, check_params

even_frames = st.integers(1, 16).flatmap(
    lambda h: hnp.arrays(np.float64, (3, 2 * h), elements=st.floats(-1e6, 1e6, allow_subnormal=True)))


def test_examples():
    np.testing.assert_array_equal(downsample([1, 2, 3, 4]), [1, 3])
    np.testing.assert_array_equal(upsample(np.array([1, 3])), [1, 0, 3, 0])
    c, f = decompose(np.array([1.0, 2.0, 3.0, 4.0]))
    np.testing.assert_array_equal(c, [1, 3])
    np.testing.assert_array_equal(f, [0, 2, 0, 4])
    np.testing.assert_array_equal(downsample(np.full(6, 2.5)), np.full(3, 2.5))
    np.testing.assert_array_equal(upsample(np.zeros(3)), np.zeros(6))
    _, f = decompose(np.array([1.0, 0.0, -2.0, 0.0]))
    np.testing.assert_array_equal(f, 0)


def test_odd_width_rejected():
    with pytest.raises(ValueError):
        downsample(np.ones(5))


@settings(max_examples=100, deadline=None)
@given(x=even_frames)
def test_round_trip_bit_exact(x):
    c, f = decompose(x)
    np.testing.assert_array_equal(reconstruct(c, f), x)
    np.testing.assert_array_equal(upsample(downsample(x)) + (x - upsample(downsample(x))), x)
    np.testing.assert_array_equal(f[..., 0::2], 0)
    np.testing.assert_array_equal(downsample(upsample(c)), c)
    # zero insertion preserves energy (up to summation order)
    assert np.sum(upsample(c) ** 2) == pytest.approx(np.sum(c**2), rel=1e-12)


def test_round_trip_ten_thousand_frames():
    x = np.random.default_rng(0).standard_normal((10_000, 16)) * 10.0 ** np.random.default_rng(1).integers(-8, 8, (10_000, 1))
    np.testing.assert_array_equal(reconstruct(*decompose(x)), x)


def _head(mechanism, prior="previous", dtype=np.float64, D=8, hidden=16, seed=0):
    store = ParamStore(dtype)
    return FlowHead(store, D, D, hidden, np.random.default_rng(seed), mechanism, prior), store


def test_split_prior_components():
    prev = np.tile(np.arange(8.0), (50_000, 1))
    c, f = split_prior(prev, np.ones(50_000, bool), 0.1, np.random.default_rng(0))
    np.testing.assert_allclose(c.mean(0), [0, 2, 4, 6], atol=0.01)
    np.testing.assert_allclose(f.mean(0), [0, 1, 0, 3, 0, 5, 0, 7], atol=0.01)
    np.testing.assert_allclose(f[:, 1::2].var(0), 0.1, atol=0.005)
    np.testing.assert_array_equal(f[:, 0::2], 0)
    c0, _ = split_prior(prev, np.zeros(50_000, bool), 0.1, np.random.default_rng(0))
    np.testing.assert_allclose(c0.var(0), 1.0, atol=0.03)


def test_c2f_loss_zero_for_true_fields():
    class Oracle:
        dtype = np.float64

        def __init__(self):
            self.u = None

        def __call__(self, x, t, cond=None):
            return ad.Tensor(self.u)

    rng = np.random.default_rng(0)
    frame, prev, z = rng.standard_normal((3, 5, 8))
    # first pass records the drawn targets, second pass replays them with the same seed
    coarse, fine = Oracle(), Oracle()
    coarse.u, fine.u = np.zeros((5, 4)), np.zeros((5, 8))
    _, _, _, (s_c, s_f) = c2f_loss(coarse, fine, frame, prev, z, np.random.default_rng(1), return_parts=True)
    coarse.u, fine.u = s_c.u, s_f.u
    assert c2f_loss(coarse, fine, frame, prev, z, np.random.default_rng(1)).item() == 0.0


def test_c2f_loss_is_sum_of_stage_losses():
    head, _ = _head("c2f")
    rng = np.random.default_rng(2)
    frame, prev, z = rng.standard_normal((3, 6, 8))
    with ad.precision(np.float64):
        total, lc, lf, (s_c, s_f) = c2f_loss(head.coarse, head.fine, frame, prev, z, np.random.default_rng(3),
                                             return_parts=True)
        c_alone = cfm_loss(head.coarse, s_c, z)
        f_alone = cfm_loss(head.fine, s_f, head.fine_field_input_condition(z, decompose(frame)[0]))
    assert total.item() == lc.item() + lf.item()
    assert lc.item() == c_alone.item() and lf.item() == f_alone.item()


def test_independent_times_per_stage():
    head, _ = _head("c2f")
    rng = np.random.default_rng(4)
    frame, prev, z = rng.standard_normal((3, 64, 8))
    *_, (s_c, s_f) = c2f_loss(head.coarse, head.fine, frame, prev, z, rng, return_parts=True)
    assert not np.array_equal(s_c.t, s_f.t)


def test_fine_stage_consumes_coarse_condition():
    head, store = _head("c2f")
    rng = np.random.default_rng(5)
    frame, prev, z = rng.standard_normal((3, 6, 8))
    with ad.precision(np.float64):
        c2f_loss(head.coarse, head.fine, frame, prev, z, np.random.default_rng(6)).backward()
        g = store.grad("fm.fine.cond.0.weight")
        # rows of the first condition layer that read the coarse part
        assert np.abs(g[8:]).sum() > 0
        x = rng.standard_normal((6, 8))
        coarse_a, coarse_b = rng.standard_normal((2, 6, 4))
        va = head.fine(x, 0.4, head.fine_field_input_condition(z, coarse_a)).data
        vb = head.fine(x, 0.4, head.fine_field_input_condition(z, coarse_b)).data
    assert not np.array_equal(va, vb)


def test_blind_fine_stage_is_invariant_to_coarse():
    head, store = _head("dfm")
    rng = np.random.default_rng(7)
    x, z = rng.standard_normal((2, 6, 8))
    coarse_a, coarse_b = rng.standard_normal((2, 6, 4))
    va = head.fine(x, 0.4, head.fine_field_input_condition(z, coarse_a)).data
    vb = head.fine(x, 0.4, head.fine_field_input_condition(z, coarse_b)).data
    np.testing.assert_array_equal(va, vb)


@pytest.mark.parametrize("mechanism", ["c2f", "hfm"])
def test_head_loss_gradients(mechanism):
    rng = np.random.default_rng(8)
    with ad.precision(np.float64):
        head, store = _head(mechanism, hidden=10)
        frame, prev, z = rng.standard_normal((3, 5, 8))
        has_prev = np.array([False, True, True, True, True])
        loss = lambda: head.loss(frame, prev, z, has_prev, 0.1, np.random.default_rng(9))
        assert check_params(loss, store, per_tensor=4) < RTOL


def test_generated_fine_residual_has_zero_even_entries():
    # a frozen coarse stage and a noiseless prior: even features can only come from the coarse stage
    head, store = _head("c2f", dtype=np.float32)
    for n, p in store.items():
        if n.startswith("fm.coarse.out."):
            p.data[...] = 0
    rng = np.random.default_rng(10)
    z, prev = rng.standard_normal((2, 4, 8))
    out = head.generate(z, prev, np.ones(4, bool), rng, nfe=3, sigma2=0.0)
    np.testing.assert_array_equal(out[:, 0::2], prev[:, 0::2])
    assert not np.array_equal(out[:, 1::2], prev[:, 1::2])


def test_zero_fields_and_zero_noise_copy_previous_frame():
    for mechanism in ("c2f", "dfm", "hfm"):
        head, store = _head(mechanism, dtype=np.float32)
        for n, p in store.items():
            if n.endswith(".out.weight") or n.endswith(".out.bias"):
                p.data[...] = 0
        prev = np.random.default_rng(11).standard_normal((3, 8))
        out = head.generate(np.zeros((3, 8)), prev, np.ones(3, bool), np.random.default_rng(0), nfe=3, sigma2=0.0)
        np.testing.assert_array_equal(out, prev)


def test_first_token_draws_standard_normal_priors():
    head, store = _head("c2f", dtype=np.float32)
    for n, p in store.items():
        if ".out." in n:
            p.data[...] = 0
    out = head.generate(np.zeros((20_000, 8)), np.full((20_000, 8), 9.0), np.zeros(20_000, bool),
                        np.random.default_rng(1), nfe=1, sigma2=0.1)
    np.testing.assert_allclose(out.mean(0), 0.0, atol=0.05)
    np.testing.assert_allclose(out.var(0), 1.0, atol=0.05)


def test_vanilla_prior_ignores_previous_frame():
    head, store = _head("c2f", prior="vanilla", dtype=np.float32)
    for n, p in store.items():
        if ".out." in n:
            p.data[...] = 0
    out = head.generate(np.zeros((20_000, 8)), np.full((20_000, 8), 9.0), np.ones(20_000, bool),
                        np.random.default_rng(2), nfe=1, sigma2=0.1)
    np.testing.assert_allclose(out.mean(0), 0.0, atol=0.05)


def test_fine_mask():
    np.testing.assert_array_equal(fine_mask(6), [0, 1, 0, 1, 0, 1])
