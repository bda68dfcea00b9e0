import numpy as np
import pytest

from arflow import autodiff as ad
from arflow.autodiff import NonFiniteError, Tensor
from arflow.layers import MLP, LayerNorm, Linear, TimestepEmbedding, sinusoidal_features
from arflow.params import CheckpointError, ParamStore, adam_step, load_checkpoint, read_checkpoint, save_checkpoint
from helpers import RTOL, check_params


def reference_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-loop Adam (Kingma & Ba, algorithm 1) used as an oracle."""
    theta = np.array(theta, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        for i in range(theta.size):
            m.flat[i] = b1 * m.flat[i] + (1 - b1) * g.flat[i]
            v.flat[i] = b2 * v.flat[i] + (1 - b2) * g.flat[i] ** 2
            mhat = m.flat[i] / (1 - b1**t)
            vhat = v.flat[i] / (1 - b2**t)
            theta.flat[i] -= lr * mhat / (np.sqrt(vhat) + eps)
    return theta


def test_adam_matches_reference():
    rng = np.random.default_rng(1)
    store = ParamStore(np.float64)
    p = store.add("w", rng.standard_normal((3, 2)))
    start = p.data.copy()
    grads = [rng.standard_normal((3, 2)) for _ in range(5)]
    for g in grads:
        p.grad = g.copy()
        adam_step(store, lr=0.01)
    np.testing.assert_allclose(p.data, reference_adam(start, grads, 0.01), rtol=1e-12, atol=1e-14)
    assert p.grad is None and store.step == 5


def test_adam_first_step_is_lr_times_sign():
    store = ParamStore(np.float64)
    p = store.add("w", np.zeros(4))
    p.grad = np.array([3.0, -0.5, 1e-3, -7.0])
    adam_step(store, lr=0.1)
    np.testing.assert_allclose(p.data, -0.1 * np.sign([3.0, -0.5, 1e-3, -7.0]), rtol=1e-4)


def test_adam_skips_params_without_grad():
    store = ParamStore(np.float64)
    a = store.add("a", np.ones(2))
    b = store.add("b", np.ones(2))
    a.grad = np.ones(2)
    adam_step(store, lr=0.1)
    np.testing.assert_array_equal(b.data, np.ones(2))
    assert not np.array_equal(a.data, np.ones(2))


def test_adam_rejects_nan_gradient_by_name():
    store = ParamStore(np.float64)
    p = store.add("layer.weight", np.ones(2))
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NonFiniteError, match="layer.weight"):
        adam_step(store, lr=0.1)
    np.testing.assert_array_equal(p.data, np.ones(2))


def test_adam_minimises_quadratic():
    store = ParamStore(np.float64)
    x = store.add("x", np.array([5.0, -3.0]))
    with ad.precision(np.float64):
        for _ in range(2000):
            ad.square(x - Tensor(np.array([1.0, 2.0]))).sum().backward()
            adam_step(store, lr=0.05)
    np.testing.assert_allclose(x.data, [1.0, 2.0], atol=1e-3)


def test_duplicate_parameter_name():
    store = ParamStore()
    store.add("a", np.zeros(1))
    with pytest.raises(KeyError):
        store.add("a", np.zeros(1))


def _store_with_state():
    rng = np.random.default_rng(0)
    store = ParamStore(np.float32)
    MLP(store, "mlp", [3, 5, 2], rng)
    for t in store.params.values():
        t.grad = rng.standard_normal(t.shape).astype(np.float32)
    adam_step(store, 1e-2)
    return store


def test_checkpoint_round_trip(tmp_path):
    store = _store_with_state()
    path = save_checkpoint(tmp_path / "a.ckpt", store, {"step": 7, "note": "x"})
    other = ParamStore(np.float32)
    MLP(other, "mlp", [3, 5, 2], np.random.default_rng(99))
    meta = load_checkpoint(path, other)
    assert meta == {"step": 7, "note": "x"}
    assert other.step == store.step
    for n in store:
        np.testing.assert_array_equal(other[n].data, store[n].data)
        np.testing.assert_array_equal(other.m[n], store.m[n])
        np.testing.assert_array_equal(other.v[n], store.v[n])


def test_checkpoint_bytes_deterministic(tmp_path):
    a = save_checkpoint(tmp_path / "a.ckpt", _store_with_state(), {"k": 1})
    b = save_checkpoint(tmp_path / "b.ckpt", _store_with_state(), {"k": 1})
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes()[:8] == b"ARFLOWCK"


def test_checkpoint_errors_name_the_file(tmp_path):
    bad = tmp_path / "junk.ckpt"
    bad.write_bytes(b"hello world")
    with pytest.raises(CheckpointError, match="junk.ckpt"):
        read_checkpoint(bad)
    good = save_checkpoint(tmp_path / "t.ckpt", _store_with_state())
    (tmp_path / "cut.ckpt").write_bytes(good.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="cut.ckpt"):
        read_checkpoint(tmp_path / "cut.ckpt")
    mismatch = ParamStore(np.float32)
    MLP(mismatch, "mlp", [3, 4, 2], np.random.default_rng(0))
    with pytest.raises(CheckpointError, match="t.ckpt"):
        load_checkpoint(good, mismatch)


def test_layer_gradients():
    rng = np.random.default_rng(0)
    with ad.precision(np.float64):
        store = ParamStore(np.float64)
        lin = Linear(store, "lin", 4, 6, rng)
        ln = LayerNorm(store, "ln", 6)
        mlp = MLP(store, "mlp", [6, 5, 3], rng, act="silu")
        temb = TimestepEmbedding(store, "temb", 3, rng, feat_dim=8)
        x = Tensor(rng.standard_normal((5, 4)))
        t = rng.uniform(size=5)
        proj = rng.standard_normal((5, 3))
        # nonzero LayerNorm affine parameters so their gradients are generic
        store["ln.gain"].data[:] = rng.uniform(0.5, 1.5, 6)
        store["ln.bias"].data[:] = rng.standard_normal(6)

        def loss():
            return ((mlp(ln(lin(x))) + temb(t)) * Tensor(proj)).sum()

        assert check_params(loss, store, per_tensor=8) < RTOL


def test_sinusoidal_features_range_check():
    f = sinusoidal_features(np.array([0.0, 1.0]), 8)
    assert f.shape == (2, 8)
    np.testing.assert_array_equal(f[0], [0, 0, 0, 0, 1, 1, 1, 1])
    with pytest.raises(ValueError):
        sinusoidal_features(np.array([1.5]), 8)
