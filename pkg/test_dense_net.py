#!/usr/bin/env python3
"""
Test script for the dense network substrate

Forward and backward passes are checked against scalar re-implementations
and central finite differences; Adamax against a scalar optimizer trace.
"""

import math

import numpy as np
import pytest
from dotenv import load_dotenv

from dense_net import (
    Adamax,
    AdamaxState,
    DenseNet,
    adamax_step,
    clip_grad_norm,
    global_norm,
    load_parameters,
    save_parameters,
)

# Load environment variables
load_dotenv()


def _scalar_forward(net: DenseNet, x):
    a = [float(v) for v in x]
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        out = []
        for j in range(w.shape[1]):
            z = float(b[j])
            for i in range(w.shape[0]):
                z += a[i] * float(w[i, j])
            last = layer == net.n_layers - 1
            out.append(z if (last and net.output == "identity") else math.tanh(z))
        a = out
    return np.array(a)


def _finite_difference(params, loss, h=1e-5):
    grads = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + h
            up = loss()
            p[idx] = keep - h
            down = loss()
            p[idx] = keep
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def _max_relative_error(analytic, numeric, floor=1e-4):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor))))
    return worst


def test_zero_network_outputs_zero():
    print("🧪 Testing all-zero network")
    net = DenseNet([4, 8, 3]).zero_()
    assert np.all(net.forward(np.arange(4.0)) == 0.0)


def test_identity_layer():
    net = DenseNet([3, 3])
    net.weights[0][...] = np.eye(3)
    x = np.array([0.5, -2.0, 7.0])
    assert np.array_equal(net.forward(x), x)


def test_forward_matches_scalar_reference():
    print("🧪 Testing forward pass against a scalar reference")
    rng = np.random.default_rng(0)
    for output in ("identity", "tanh"):
        net = DenseNet([5, 7, 6, 3], rng, output=output)
        x = rng.normal(size=5)
        assert np.max(np.abs(net.forward(x) - _scalar_forward(net, x))) <= 1e-12


def test_batch_forward_matches_rows():
    rng = np.random.default_rng(1)
    net = DenseNet([4, 6, 2], rng)
    xs = rng.normal(size=(5, 4))
    batch = net.forward(xs)
    for i in range(5):
        assert np.allclose(batch[i], net.forward(xs[i]), rtol=0, atol=1e-14)


def test_zero_upstream_gives_zero_gradients():
    net = DenseNet([4, 8, 3], np.random.default_rng(2))
    net.forward(np.ones(4))
    grads, g_in = net.backward(np.zeros(3))
    assert all(np.all(g == 0.0) for g in grads)
    assert np.all(g_in == 0.0)


def test_backward_matches_finite_differences():
    print("🧪 Testing backward pass against finite differences")
    rng = np.random.default_rng(3)
    net = DenseNet([4, 8, 3], rng)
    x = rng.normal(size=(6, 4))
    upstream = rng.normal(size=(6, 3))

    def loss():
        return float(np.sum(net.forward(x) * upstream))

    net.forward(x)
    grads, g_in = net.backward(upstream)
    numeric = _finite_difference(net.parameters(), loss)
    assert _max_relative_error(grads, numeric) <= 1e-4

    x_param = [x]
    numeric_in = _finite_difference(x_param, loss)
    net.forward(x)
    _, g_in = net.backward(upstream)
    assert _max_relative_error([g_in], numeric_in) <= 1e-4


def test_gradient_is_linear_in_upstream():
    rng = np.random.default_rng(4)
    net = DenseNet([4, 8, 3], rng)
    x = rng.normal(size=4)
    u1, u2 = rng.normal(size=3), rng.normal(size=3)
    a, b = 0.7, -1.9
    net.forward(x)
    g1, _ = net.backward(u1)
    g2, _ = net.backward(u2)
    g12, _ = net.backward(a * u1 + b * u2)
    for x12, x1, x2 in zip(g12, g1, g2):
        assert np.max(np.abs(x12 - (a * x1 + b * x2))) <= 1e-10


def test_flat_parameters_round_trip():
    net = DenseNet([3, 4, 2], np.random.default_rng(5))
    other = DenseNet([3, 4, 2], np.random.default_rng(6))
    other.set_flat(net.flat())
    assert np.array_equal(other.flat(), net.flat())
    clone = net.copy()
    clone.weights[0][0, 0] += 1.0
    assert clone.weights[0][0, 0] != net.weights[0][0, 0]


def test_initialisation_is_seeded():
    a = DenseNet([6, 10, 2], np.random.default_rng(42))
    b = DenseNet([6, 10, 2], np.random.default_rng(42))
    assert np.array_equal(a.flat(), b.flat())
    bound = 1.0 / math.sqrt(6)
    assert np.all(np.abs(a.weights[0]) <= bound)
    assert np.all(a.biases[0] == 0.0)


def test_adamax_zero_gradient_keeps_parameters():
    print("🧪 Testing Adamax first step")
    p = np.array([1.0, -2.0, 3.0])
    adamax_step([p], [np.zeros(3)], AdamaxState.fresh([p]), lr=0.01)
    assert p.tolist() == [1.0, -2.0, 3.0]


def test_adamax_first_step_is_signed_learning_rate():
    p = np.array([1.0, -2.0, 3.0])
    g = np.array([0.3, -5.0, 1e-3])
    adamax_step([p], [g], AdamaxState.fresh([p]), lr=0.01)
    assert p == pytest.approx(np.array([1.0, -2.0, 3.0]) - 0.01 * np.sign(g), rel=1e-12, abs=1e-15)


def test_adamax_matches_scalar_trace():
    rng = np.random.default_rng(7)
    grads = rng.normal(size=(10, 3))
    p = np.array([0.5, -0.25, 2.0])
    opt = Adamax([p], lr=0.002)

    ref = [0.5, -0.25, 2.0]
    m, u = [0.0] * 3, [0.0] * 3
    for t in range(1, 11):
        opt.step([grads[t - 1]])
        for i in range(3):
            g = float(grads[t - 1, i])
            m[i] = 0.9 * m[i] + (1.0 - 0.9) * g
            u[i] = max(0.999 * u[i], abs(g))
            ref[i] -= (0.002 / (1.0 - 0.9 ** t)) * m[i] / u[i]
        assert np.max(np.abs(p - np.array(ref))) <= 1e-12


def test_clip_grad_norm():
    print("🧪 Testing gradient clipping")
    small = [np.array([0.3, 0.4])]
    clipped, norm = clip_grad_norm(small, 1.0)
    assert norm == pytest.approx(0.5)
    assert np.array_equal(clipped[0], small[0])

    big = [np.array([2.0, 0.0]), np.array([[0.0, 2.0], [2.0, 2.0]])]
    clipped, norm = clip_grad_norm(big, 1.0)
    assert norm == pytest.approx(4.0)
    assert abs(global_norm(clipped) - 1.0) <= 1e-12
    assert np.allclose(clipped[1], big[1] * 0.25)
    before = np.concatenate([g.ravel() for g in big])
    after = np.concatenate([g.ravel() for g in clipped])
    assert np.dot(before, after) / (np.linalg.norm(before) * np.linalg.norm(after)) == pytest.approx(1.0)


def test_checkpoint_round_trip(tmp_path):
    print("🧪 Testing weight checkpoints")
    net = DenseNet([3, 5, 2], np.random.default_rng(8))
    arrays = {'w0': net.weights[0], 'b0': net.biases[0], 'w1': net.weights[1]}
    path = save_parameters(tmp_path / "net.bin", arrays, {'note': 'test'})
    loaded, meta = load_parameters(path)
    assert meta == {'note': 'test'}
    assert set(loaded) == set(arrays)
    for name, arr in arrays.items():
        assert np.array_equal(loaded[name], arr)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "other.bin"
    header = b'{"format": "something-else", "arrays": []}'
    path.write_bytes(len(header).to_bytes(8, 'little') + header)
    with pytest.raises(ValueError):
        load_parameters(path)


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    passed = 0
    for name, fn in tests:
        try:
            if fn.__code__.co_argcount:
                with tempfile.TemporaryDirectory() as tmp:
                    fn(Path(tmp))
            else:
                fn()
            print(f"✅ {name}")
            passed += 1
        except Exception as e:
            print(f"❌ {name}: {e}")
    print(f"\nOverall: {passed}/{len(tests)} tests passed")
