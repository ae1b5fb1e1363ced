import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from partition_hrl.nncore import (CHECKPOINT_MAGIC, LayerSpec, Network, load_checkpoint, make_optimizer,
                                  optimizer_step, polyak_update, read_checkpoint, save_checkpoint, softmax)

finite = st.floats(-50, 50, allow_nan=False)


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.array([1.0, 1.0, 1.0])), [1 / 3] * 3)
    np.testing.assert_allclose(softmax(np.array([np.log(2.0), 0.0])), [2 / 3, 1 / 3])
    big = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300


@given(st.lists(finite, min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_is_a_distribution_and_shift_invariant(logits, c):
    x = np.array(logits)
    p = softmax(x)
    assert np.all((p >= 0) & (p <= 1))
    assert abs(p.sum() - 1) < 1e-6
    np.testing.assert_allclose(softmax(x + c), p, atol=1e-9)


@given(st.sampled_from(["conv:32:7:1", "conv:16:1:2", "fc:64", "bn", "relu", "selu"]))
def test_layer_spec_round_trip(text):
    assert str(LayerSpec.parse(text)) == text


def test_identity_and_zero_networks():
    net = Network((2,), ["fc:2"], dtype=np.float64)
    w, b = net.params()
    w.copy_(torch.eye(2, dtype=w.dtype))
    b.zero_()
    np.testing.assert_array_equal(net.forward(np.array([[1.0, 2.0]])), [[1.0, 2.0]])
    for p in net.params():
        p.zero_()
    assert not net.forward(np.random.default_rng(0).normal(size=(5, 2))).any()


def test_worker_architecture_shape():
    net = Network((5, 10, 10), ["conv:32:7:1", "relu", "fc:32", "relu", "fc:32", "relu", "fc:4"])
    assert net.output_shape == (4,)
    assert net.forward(np.zeros((3, 5, 10, 10), np.float32)).shape == (3, 4)


def test_forward_rejects_wrong_shape():
    net = Network((4,), ["fc:3"])
    with pytest.raises(ValueError):
        net.forward(np.zeros((2, 5)))
    with pytest.raises(ValueError):
        net.forward(np.zeros(4))


def test_backward_requires_train_forward():
    net = Network((4,), ["fc:1"])
    with pytest.raises(RuntimeError):
        net.backward(np.ones((1, 1)))
    net.forward(np.ones((1, 4)), "eval")
    with pytest.raises(RuntimeError):
        net.backward(np.ones((1, 1)))


def test_scalar_linear_gradient():
    net = Network((1,), ["fc:1"], dtype=np.float64)
    net.forward(np.array([[3.0]]), "train")
    gw, gb = net.backward(np.array([[1.0]]))
    assert gw.item() == pytest.approx(3.0) and gb.item() == pytest.approx(1.0)


def test_zero_upstream_gives_zero_gradients():
    net = Network((4,), ["fc:8", "selu", "fc:2"], seed=3)
    net.forward(np.ones((2, 4)), "train")
    assert all(not g.any() for g in net.backward(np.zeros((2, 2))))


def _finite_difference(net, x, up, h=1e-5):
    out = []
    for p in net.params():
        g = torch.zeros_like(p)
        flat, gflat = p.view(-1), g.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            fp = float((net.forward(x, "train") * up).sum())
            flat[i] = old - h
            fm = float((net.forward(x, "train") * up).sum())
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    net._out = None
    return out


@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    layers = [["fc:6", "selu", "fc:3"], ["fc:5", "bn", "relu", "fc:2"], ["fc:4", "bn", "selu", "fc:4"]][seed % 3]
    net = Network((4,), layers, seed=seed, dtype=np.float64)
    x = rng.normal(size=(6, 4))
    up = rng.normal(size=(6,) + net.output_shape)
    net.forward(x, "train")
    analytic = [g.clone() for g in net.backward(up)]
    numeric = _finite_difference(net, x, up)
    num = max(float((a - n).abs().max()) for a, n in zip(analytic, numeric))
    den = max(float(n.abs().max()) for n in numeric)
    assert num / max(den, 1e-12) < 1e-4


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    net = Network((2, 5, 5), ["conv:3:3:1", "bn", "selu", "conv:2:1:2", "fc:2"], seed=1, dtype=np.float64)
    x = rng.normal(size=(4, 2, 5, 5))
    up = rng.normal(size=(4, 2))
    net.forward(x, "train")
    analytic = [g.clone() for g in net.backward(up)]
    numeric = _finite_difference(net, x, up)
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a.numpy(), n.numpy(), rtol=1e-4, atol=1e-7)


def test_eval_forward_is_pure():
    net = Network((3, 6, 6), ["conv:4:3:1", "bn", "selu", "fc:5"], seed=0)
    x = np.random.default_rng(0).normal(size=(2, 3, 6, 6)).astype(np.float32)
    np.testing.assert_array_equal(net.forward(x), net.forward(x))


def test_batchnorm_uses_batch_stats_in_train_and_running_in_eval():
    net = Network((2,), ["bn"], dtype=np.float64)
    x = np.array([[1.0, 10.0], [3.0, 30.0]])
    out = net.forward(x, "train")
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-12)
    mean, var = net.buffers()
    np.testing.assert_allclose(mean.numpy(), 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(var.numpy(), 0.9 + 0.1 * x.var(axis=0, ddof=1))
    np.testing.assert_allclose(net.forward(x, "eval"), (x - mean.numpy()) / np.sqrt(var.numpy() + 1e-5))


# ---------------------------------------------------------------- optimizers


def test_adamw_zero_gradient_is_pure_decay():
    p = [torch.ones(1, dtype=torch.float64)]
    optimizer_step(make_optimizer("adamw", 0.001, 0.01), p, [torch.zeros(1, dtype=torch.float64)])
    assert p[0].item() == pytest.approx(0.99999, abs=1e-15)


@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3))
def test_adam_first_step_moves_by_lr(g):
    p = [torch.zeros(1, dtype=torch.float64)]
    optimizer_step(make_optimizer("adam", 0.001), p, [torch.full((1,), g, dtype=torch.float64)])
    assert p[0].item() == pytest.approx(-0.001 * np.sign(g), rel=1e-4)


def test_two_steps_decrease_quadratic():
    p = [torch.tensor([2.0], dtype=torch.float64)]
    opt = make_optimizer("adam", 0.1)
    values = [p[0].item() ** 2]
    for _ in range(2):
        optimizer_step(opt, p, [2 * p[0].clone()])
        values.append(p[0].item() ** 2)
    assert values[0] > values[1] > values[2]


@pytest.mark.parametrize("kind,wd", [("adam", 0.0), ("adamw", 0.01), ("adamw", 0.3)])
def test_optimizer_matches_torch_reference(kind, wd):
    rng = np.random.default_rng(5)
    mine = [torch.tensor(rng.normal(size=(3, 2))), torch.tensor(rng.normal(size=4))]
    ref = [torch.nn.Parameter(t.clone()) for t in mine]
    cls = torch.optim.Adam if kind == "adam" else torch.optim.AdamW
    topt = cls(ref, lr=0.01, weight_decay=wd)
    state = make_optimizer(kind, 0.01, wd)
    for _ in range(25):
        grads = [torch.tensor(rng.normal(size=t.shape)) for t in mine]
        optimizer_step(state, mine, grads)
        for r, g in zip(ref, grads):
            r.grad = g.clone()
        topt.step()
    for a, b in zip(mine, ref):
        np.testing.assert_allclose(a.numpy(), b.detach().numpy(), rtol=1e-10, atol=1e-12)


def test_adamw_without_decay_equals_adam():
    rng = np.random.default_rng(2)
    a = [torch.tensor(rng.normal(size=5))]
    b = [a[0].clone()]
    sa, sb = make_optimizer("adam", 0.01), make_optimizer("adamw", 0.01, 0.0)
    for _ in range(10):
        g = [torch.tensor(rng.normal(size=5))]
        optimizer_step(sa, a, g)
        optimizer_step(sb, b, g)
    assert torch.equal(a[0], b[0])


def test_unknown_optimizer_rejected():
    with pytest.raises(ValueError):
        make_optimizer("sgd", 0.1)


def test_polyak_examples():
    t = [torch.zeros(1, dtype=torch.float64)]
    polyak_update(t, [torch.ones(1, dtype=torch.float64)], 0.05)
    assert t[0].item() == pytest.approx(0.05)
    with pytest.raises(ValueError):
        polyak_update(t, t, 1.5)


@given(st.lists(finite, min_size=1, max_size=8), st.lists(finite, min_size=1, max_size=8))
def test_polyak_extremes_are_exact(a, b):
    n = min(len(a), len(b))
    online = [torch.tensor(a[:n], dtype=torch.float64)]
    target = [torch.tensor(b[:n], dtype=torch.float64)]
    keep = target[0].clone()
    polyak_update(target, online, 0.0)
    assert torch.equal(target[0], keep)
    polyak_update(target, online, 1.0)
    assert torch.equal(target[0], online[0])


@settings(max_examples=30)
@given(st.floats(0.0, 1.0), st.lists(st.floats(-5, 5), min_size=1, max_size=15), st.floats(-5, 5))
def test_polyak_geometric_mixture(tau, snapshots, start):
    target = [torch.tensor([start], dtype=torch.float64)]
    for s in snapshots:
        polyak_update(target, [torch.tensor([s], dtype=torch.float64)], tau)
    n = len(snapshots)
    closed = (1 - tau) ** n * start + sum(tau * (1 - tau) ** (n - 1 - k) * s for k, s in enumerate(snapshots))
    assert target[0].item() == pytest.approx(closed, abs=1e-9)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    net = Network((5, 9, 9), ["conv:4:3:1", "bn", "selu", "fc:6"], seed=1)
    net.forward(np.random.default_rng(0).normal(size=(4, 5, 9, 9)).astype(np.float32), "train")
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    assert path.read_bytes()[:4] == CHECKPOINT_MAGIC
    other = Network((5, 9, 9), ["conv:4:3:1", "bn", "selu", "fc:6"], seed=2)
    load_checkpoint(other, path)
    for a, b in zip(net.state(), other.state()):
        assert torch.equal(a, b)
    x = np.ones((1, 5, 9, 9), np.float32)
    np.testing.assert_array_equal(net.forward(x), other.forward(x))


def test_checkpoint_header_layout(tmp_path):
    net = Network((3,), ["fc:2"])
    save_checkpoint(net, tmp_path / "a.ckpt")
    raw = (tmp_path / "a.ckpt").read_bytes()
    version, count = struct.unpack_from("<II", raw, 4)
    assert (version, count) == (1, 2)
    ndim, = struct.unpack_from("<I", raw, 12)
    assert ndim == 2 and struct.unpack_from("<II", raw, 16) == (2, 3)
    assert len(read_checkpoint(tmp_path / "a.ckpt")) == 2


def test_checkpoint_corruption_is_diagnosed(tmp_path):
    net = Network((3,), ["fc:2"])
    path = tmp_path / "a.ckpt"
    save_checkpoint(net, path)
    raw = path.read_bytes()
    for bad in (b"XXXX" + raw[4:], raw[:-3], raw + b"\0"):
        path.write_bytes(bad)
        with pytest.raises(ValueError):
            load_checkpoint(net, path)
    path.write_bytes(raw)
    with pytest.raises(ValueError):
        load_checkpoint(Network((4,), ["fc:2"]), path)
