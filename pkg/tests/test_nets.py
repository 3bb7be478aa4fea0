import numpy as np
import pytest

from oracles import central_difference, rel_err
from wkd import feature_dist
from wkd.errors import ShapeMismatch, StaleForward, ValidationError
from wkd.interrelation import cost_matrix
from wkd.logit_loss import LogitLossConfig, cross_entropy, kd_kl, wkd_l
from wkd.harness.dataset import DatasetSpec, gen_dataset
from wkd.nets import ConvNet, ConvNetSpec, load_checkpoint, save_checkpoint, sgd_step
from wkd.numerics import prng

TINY = ConvNetSpec(1, 6, 6, ((3, 1), (4, 2)), 3, projector=2)


def naive_forward(net, x):
    """Direct loops: zero-padded 3x3 cross-correlation, ReLU, mean pool, linear."""
    h = x
    for i, (filters, stride) in enumerate(net.spec.stages):
        w, b = net.params[f"conv{i}.w"], net.params[f"conv{i}.b"]
        bsz, c, hh, ww = h.shape
        ho, wo = (hh - 1) // stride + 1, (ww - 1) // stride + 1
        pad = np.zeros((bsz, c, hh + 2, ww + 2))
        pad[:, :, 1:-1, 1:-1] = h
        out = np.zeros((bsz, filters, ho, wo))
        for n in range(bsz):
            for f in range(filters):
                for y in range(ho):
                    for xx in range(wo):
                        patch = pad[n, :, y * stride:y * stride + 3, xx * stride:xx * stride + 3]
                        out[n, f, y, xx] = np.sum(patch * w[f]) + b[f]
        h = np.maximum(out, 0.0)
    pooled = h.mean(axis=(2, 3))
    return pooled @ net.params["fc.w"].T + net.params["fc.b"], h


def test_forward_matches_naive_loops():
    net = ConvNet(ConvNetSpec(2, 7, 5, ((3, 2), (4, 1), (2, 2)), 4, projector=3), seed=1)
    x = prng(2).normal(size=(3, 2, 7, 5))
    z, taps = net.forward(x)
    z_ref, last = naive_forward(net, x)
    np.testing.assert_allclose(z, z_ref, atol=1e-12)
    np.testing.assert_allclose(taps["last"], last, atol=1e-12)
    np.testing.assert_allclose(taps["projected"],
                               np.einsum("tc,bchw->bthw", net.params["proj.w"], last)
                               + net.params["proj.b"][None, :, None, None], atol=1e-12)
    assert net.spec.feature_shape() == last.shape[1:]


def test_zero_weights_zero_logits():
    net = ConvNet(TINY, seed=0)
    for v in net.params.values():
        v[...] = 0.0
    z, _ = net.forward(prng(0).normal(size=(2, 1, 6, 6)))
    np.testing.assert_array_equal(z, np.zeros((2, 3)))


def test_duplicated_example_identical_rows():
    net = ConvNet(TINY, seed=0)
    x = np.repeat(prng(1).normal(size=(1, 1, 6, 6)), 4, axis=0)
    z, _ = net.forward(x)
    for row in z[1:]:
        np.testing.assert_array_equal(row, z[0])


def test_bitwise_determinism():
    x = prng(3).normal(size=(2, 1, 6, 6))
    a, _ = ConvNet(TINY, seed=5).forward(x)
    b, _ = ConvNet(TINY, seed=5).forward(x)
    assert a.tobytes() == b.tobytes()


def _param_fd(net, loss, names=None):
    """Central differences of ``loss()`` in every (or the listed) parameter coordinate."""
    out = {}
    for name in names or net.params:
        def fun(v, name=name):
            old = net.params[name]
            net.params[name] = v
            val = loss()
            net.params[name] = old
            return val
        out[name] = central_difference(fun, net.params[name])
    return out


def test_cross_entropy_backward_finite_differences():
    net = ConvNet(TINY, seed=7)
    x = prng(8).normal(size=(4, 1, 6, 6))
    y = np.array([0, 2, 1, 2])

    def loss():
        return cross_entropy(net.forward(x)[0], y)[0]

    z, _ = net.forward(x)
    grads = net.backward(cross_entropy(z, y)[1])
    for name, num in _param_fd(net, loss, [k for k in net.params if not k.startswith("proj")]).items():
        assert rel_err(grads[name], num) < 1e-4, name


def test_backward_linearity_and_zero():
    net = ConvNet(TINY, seed=9)
    rng = prng(10)
    net.forward(rng.normal(size=(3, 1, 6, 6)))
    gl = rng.normal(size=(3, 3))
    gp = rng.normal(size=(3, 2, 3, 3))
    both = net.backward(gl, {"projected": gp})
    only_l = net.backward(gl)
    only_p = net.backward(None, {"projected": gp})
    for k in both:
        np.testing.assert_allclose(both[k], only_l[k] + only_p[k], atol=1e-10)
    zero = net.backward(np.zeros((3, 3)), {"projected": np.zeros_like(gp)})
    assert all(not np.any(v) for v in zero.values())


def test_backward_errors():
    net = ConvNet(TINY, seed=0)
    with pytest.raises(StaleForward):
        net.backward(np.zeros((1, 3)))
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros((1, 1, 5, 6)))
    net.forward(np.zeros((2, 1, 6, 6)))
    with pytest.raises(StaleForward):
        net.backward(np.zeros((3, 3)))
    with pytest.raises(StaleForward):
        net.backward(None, {"projected": np.zeros((2, 2, 4, 4))})
    plain = ConvNet(ConvNetSpec(1, 6, 6, ((3, 1),), 3), seed=0)
    plain.forward(np.zeros((1, 1, 6, 6)))
    with pytest.raises(ValidationError):
        plain.backward(None, {"projected": np.zeros((1, 2, 6, 6))})


@pytest.mark.parametrize("kind", ["ce", "kd", "wkd-l", "wd-diag", "kl-diag", "spatial-2nd", "channel-2nd"])
def test_end_to_end_total_loss_gradient(kind):
    """CE plus one distillation loss, through the whole net, at 20 random coordinates."""
    net = ConvNet(TINY, seed=11)
    assert net.n_params() <= 500
    rng = prng(12)
    x = rng.normal(size=(3, 1, 6, 6))
    y = np.array([1, 0, 2])
    zt = rng.normal(size=(3, 3))
    ft = rng.normal(size=(3, 2, 3, 3))
    a = rng.uniform(size=(3, 3))
    cost = cost_matrix(0.5 * (a + a.T)).values
    wcfg = LogitLossConfig(lam=3.0, eta=0.1, iters=5000, tol=1e-14)

    def total(with_grad=False):
        z, taps = net.forward(x)
        loss, gz = cross_entropy(z, y)
        gtaps = {}
        if kind == "kd":
            l, g = kd_kl(zt, z, 2.0)
            loss, gz = loss + 4.0 * l, gz + 4.0 * g
        elif kind == "wkd-l":
            r = wkd_l(zt, z, cost, wcfg, target=y)
            loss, gz = loss + r.loss, gz + r.grad
        elif kind != "ce":
            l, g = feature_dist.feature_loss(kind, ft, taps["projected"])
            loss, gtaps = loss + 0.1 * l, {"projected": 0.1 * g}
        if with_grad:
            return loss, net.backward(gz, gtaps)
        return loss

    _, grads = total(True)
    names = list(net.params)
    h = 1e-6
    for name in (names[i] for i in rng.integers(len(names), size=20)):
        idx = tuple(int(rng.integers(d)) for d in net.params[name].shape)
        old = net.params[name][idx]
        net.params[name][idx] = old + h
        lp = total()
        net.params[name][idx] = old - h
        lm = total()
        net.params[name][idx] = old
        num = (lp - lm) / (2 * h)
        assert abs(num - grads[name][idx]) <= 1e-4 * max(abs(num), abs(grads[name][idx]), 1e-6), (name, idx)


def test_sgd_lr_zero():
    params = {"w": np.array([1.0, -2.0])}
    sgd_step(params, {"w": np.array([5.0, 5.0])}, {}, lr=0.0, weight_decay=0.1)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_sgd_quadratic_by_hand():
    # f(w) = w², gradient 2w; w0 = 3, lr 0.1, momentum 0.9
    params = {"w": np.array([3.0])}
    vel = {}
    sgd_step(params, {"w": 2 * params["w"]}, vel, lr=0.1)
    assert params["w"][0] == pytest.approx(3.0 - 0.1 * 6.0)  # 2.4, v = 6
    sgd_step(params, {"w": 2 * params["w"]}, vel, lr=0.1)
    assert params["w"][0] == pytest.approx(2.4 - 0.1 * (0.9 * 6.0 + 4.8))


def test_sgd_weight_decay_shrinks():
    params = {"w": np.array([2.0, -4.0])}
    sgd_step(params, {"w": np.zeros(2)}, {}, lr=0.5, weight_decay=0.1)
    np.testing.assert_allclose(params["w"], [2.0 * 0.95, -4.0 * 0.95])
    with pytest.raises(ShapeMismatch):
        sgd_step(params, {"w": np.zeros(3)}, {}, lr=0.1)


def test_checkpoint_bit_exact(tmp_path):
    net = ConvNet(TINY, seed=13)
    path = save_checkpoint(tmp_path / "net.ckpt", net.params)
    back = load_checkpoint(path)
    assert list(back) == list(net.params)
    for k in net.params:
        assert back[k].tobytes() == net.params[k].tobytes()
    head = path.read_bytes().split(b"END\n")[0].decode()
    assert head.splitlines()[0] == "conv0.w,3x1x3x3"
    path.write_bytes(path.read_bytes() + b"\0" * 8)
    with pytest.raises(ValidationError):
        load_checkpoint(path)


def test_teacher_fits_separable_data():
    spec = DatasetSpec(n_classes=4, n_super=2, height=8, width=8, train_per_class=30, test_per_class=5,
                       noise=0.1, seed=3)
    data = gen_dataset(spec)
    net = ConvNet(ConvNetSpec(1, 8, 8, ((8, 1), (8, 2)), 4), seed=0)
    vel = {}
    rng = prng(0)
    for _ in range(200):
        order = rng.permutation(len(data.y_train))
        for i in range(0, len(order), 20):
            b = order[i:i + 20]
            z, _ = net.forward(data.x_train[b])
            _, g = cross_entropy(z, data.y_train[b])
            sgd_step(net.params, net.backward(g), vel, lr=0.05)
        acc = np.mean(np.argmax(net.forward(data.x_train)[0], 1) == data.y_train)
        if acc >= 0.99:
            break
    assert acc >= 0.99
