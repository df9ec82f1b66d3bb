import math

import numpy as np
import pytest

from nca_amt import autodiff as ad

SEEDS = range(20)
TOL = 1e-5


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_op(build, inputs, rng, h=1e-6):
    """``build(*tensors) -> Tensor``; compare analytic grads of <out, R> with finite differences."""
    tensors = [ad.parameter(x.copy()) for x in inputs]
    out = build(*tensors)
    r = rng.normal(size=out.shape)
    out.backward(r)
    worst = 0.0
    for t in tensors:
        def f():
            fresh = [ad.Tensor(u.data) for u in tensors]
            return float((build(*fresh).data * r).sum())
        num = ad.numerical_grad(f, t.data, h)
        worst = max(worst, rel_err(t.grad, num))
    return worst


def shapes(rng):
    return int(rng.integers(2, 6)), int(rng.integers(1, 5)), int(rng.integers(1, 5))


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradcheck(seed):
    rng = np.random.default_rng(seed)
    n, d, k = shapes(rng)
    assert check_op(ad.linear, [rng.normal(size=(n, d)), rng.normal(size=(d, k)),
                                rng.normal(size=k)], rng) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_batchnorm_train_gradcheck(seed):
    rng = np.random.default_rng(seed)
    n, d, _ = shapes(rng)
    n = max(n, 3)                       # a batch of two has an exactly zero input gradient

    def build(x, g, b):
        bn = ad.BatchNorm1d(d)
        bn.gamma, bn.beta = g, b
        return bn(x)

    inputs = [rng.normal(size=(n, d)) * 2 + 1, rng.normal(size=d), rng.normal(size=d)]
    assert check_op(build, inputs, rng) < TOL


def test_batchnorm_train_pair_input_gradient_is_eps_small():
    # two rows normalize to about +-1, so d out / d x only comes from eps
    x = ad.parameter(np.array([[0.0, 5.0], [2.0, 1.0]]))
    bn = ad.BatchNorm1d(2)
    bn(x).backward(np.ones((2, 2)) * np.array([[1.0], [-1.0]]))
    half = np.array([1.0, 2.0])              # half the row difference per column
    expected = 2 * bn.eps / (half ** 2 + bn.eps) ** 1.5 / 2
    assert np.allclose(np.abs(x.grad), expected, rtol=1e-6)


@pytest.mark.parametrize("seed", SEEDS)
def test_batchnorm_eval_gradcheck(seed):
    rng = np.random.default_rng(seed)
    n, d, _ = shapes(rng)
    mean, var = rng.normal(size=d), rng.uniform(0.5, 2.0, d)

    def build(x, g, b):
        bn = ad.BatchNorm1d(d)
        bn.gamma, bn.beta = g, b
        bn.set_population_stats(mean, var)
        bn.training = False
        return bn(x)

    inputs = [rng.normal(size=(n, d)), rng.normal(size=d), rng.normal(size=d)]
    assert check_op(build, inputs, rng) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_gradcheck(seed):
    rng = np.random.default_rng(seed)
    n, d, _ = shapes(rng)
    x = rng.normal(size=(n, d))
    x[np.abs(x) < 1e-3] = 0.5          # keep clear of the kink
    assert check_op(ad.relu, [x], rng) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_add_scale_reverse_gradcheck(seed):
    rng = np.random.default_rng(seed)
    n, d, _ = shapes(rng)
    c = float(rng.normal())
    s = float(rng.uniform(0, 2))
    assert check_op(ad.add, [rng.normal(size=(n, d)), rng.normal(size=(n, d))], rng) < TOL
    assert check_op(lambda x: ad.scale(x, c), [rng.normal(size=(n, d))], rng) < TOL
    # grad_reverse is not the gradient of its forward map, so compare with -s times identity
    x = ad.parameter(rng.normal(size=(n, d)))
    r = rng.normal(size=(n, d))
    ad.grad_reverse(x, s).backward(r)
    assert np.array_equal(x.grad, -s * r)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_xent_gradcheck(seed):
    rng = np.random.default_rng(seed)
    n, _, k = shapes(rng)
    k = max(k, 2)
    labels = rng.integers(0, k, n)
    z = ad.parameter(rng.normal(size=(n, k)) * 3)
    ad.softmax_xent(z, labels).backward()
    num = ad.numerical_grad(lambda: ad.softmax_xent_forward(z.data, labels)[0], z.data)
    assert rel_err(z.grad, num) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_sigmoid_bce_gradcheck(seed):
    rng = np.random.default_rng(seed)
    n, _, k = shapes(rng)
    t = (rng.random((n, k)) < 0.4).astype(float)
    z = ad.parameter(rng.normal(size=(n, k)) * 3)
    ad.sigmoid_bce(z, t).backward()
    num = ad.numerical_grad(lambda: ad.sigmoid_bce_forward(z.data, t)[0], z.data)
    assert rel_err(z.grad, num) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_composed_network_gradcheck(seed):
    """Linear -> batchnorm -> relu -> linear, two losses, one reversed branch."""
    rng = np.random.default_rng(seed)
    n, d = 6, 3
    x = rng.normal(size=(n, d))
    y = rng.integers(0, 3, n)
    t = (rng.random((n, 2)) < 0.5).astype(float)
    params = [rng.normal(size=(d, 4)), rng.normal(size=4), rng.uniform(0.5, 1.5, 4),
              rng.normal(size=4), rng.normal(size=(4, 3)), rng.normal(size=3),
              rng.normal(size=(4, 2)), rng.normal(size=2)]

    def loss(ps, reverse):
        w1, b1, g, be, w2, b2, w3, b3 = ps
        bn = ad.BatchNorm1d(4)
        bn.gamma, bn.beta = g, be
        h = ad.relu(bn(ad.linear(ad.Tensor(x), w1, b1)))
        side = ad.grad_reverse(h, 1.0) if reverse else h
        a = ad.softmax_xent(ad.linear(h, w2, b2), y)
        b = ad.sigmoid_bce(ad.linear(side, w3, b3), t)
        return ad.add(a, ad.scale(b, 0.5))

    ps = [ad.parameter(p.copy()) for p in params]
    loss(ps, reverse=False).backward()
    # batchnorm cancels the first bias, so its true gradient is exactly zero
    assert np.abs(ps[1].grad).max() < 1e-12
    for p in ps[:1] + ps[2:]:
        num = ad.numerical_grad(lambda: loss([ad.Tensor(q.data) for q in ps], False).item(),
                                p.data)
        assert rel_err(p.grad, num) < TOL


def test_grad_reverse_negates_forward_path_exactly():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(3, 2))
    b = rng.normal(size=2)
    r = rng.normal(size=(5, 2))
    for s in (0.0, 0.5, 1.0, 3.0):
        plain = ad.parameter(x.copy())
        ad.linear(plain, ad.Tensor(w), ad.Tensor(b)).backward(r)
        rev = ad.parameter(x.copy())
        ad.linear(ad.grad_reverse(rev, s), ad.Tensor(w), ad.Tensor(b)).backward(r)
        assert np.array_equal(rev.grad, -s * plain.grad)


def test_grad_reverse_scale_zero_blocks():
    x = ad.parameter(np.ones((2, 2)))
    ad.grad_reverse(x, 0.0).backward(np.ones((2, 2)))
    assert np.all(x.grad == 0)


def test_double_reversal_scales_by_product():
    rng = np.random.default_rng(1)
    r = rng.normal(size=(3, 4))
    for a, b in ((0.5, 2.0), (1.0, 1.0), (0.3, 0.7)):
        x = ad.parameter(np.zeros((3, 4)))
        ad.grad_reverse(ad.grad_reverse(x, a), b).backward(r)
        assert np.allclose(x.grad, a * b * r, rtol=1e-15, atol=0)


def test_grad_reverse_rejects_negative_scale():
    with pytest.raises(ValueError):
        ad.grad_reverse(ad.Tensor(np.ones((1, 1))), -1.0)


def test_linear_hand_example():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    y = ad.linear_forward(x, np.eye(2), np.ones(2))
    assert y.tolist() == [[2.0, 3.0], [4.0, 5.0]]
    assert np.array_equal(ad.linear_forward(x, np.eye(2), np.zeros(2)), x)
    with pytest.raises(ValueError):
        ad.linear_forward(x, np.eye(3), np.zeros(3))


def test_batchnorm_examples():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(50, 3))
    x = (x - x.mean(0)) / x.std(0)
    y, *_ = ad.batchnorm_forward(x, np.ones(3), np.zeros(3))
    assert np.allclose(y, x, atol=1e-5)
    y, *_ = ad.batchnorm_forward(x, np.zeros(3), np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(y, np.tile([1.0, 2.0, 3.0], (50, 1)))
    with pytest.raises(ValueError):
        ad.batchnorm_forward(x[:1], np.ones(3), np.zeros(3))


def test_batchnorm_running_stats_and_eval_batch_of_one():
    bn = ad.BatchNorm1d(2, momentum=0.5)
    x = np.array([[0.0, 2.0], [2.0, 6.0]])
    bn(ad.Tensor(x))
    assert np.allclose(bn.running_mean, [0.5, 2.0])
    assert np.allclose(bn.running_var, [1.0, 2.5])
    bn.training = False
    assert bn(ad.Tensor(x[:1])).shape == (1, 2)


def test_softmax_examples():
    loss, _ = ad.softmax_xent_forward(np.zeros((3, 4)), [0, 1, 2])
    assert loss == pytest.approx(math.log(4), abs=1e-15)
    z = np.zeros((1, 3))
    z[0, 1] = 60.0
    assert ad.softmax_xent_forward(z, [1])[0] < 1e-20
    with pytest.raises(ValueError):
        ad.softmax_xent_forward(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ValueError):
        ad.softmax_xent_forward(np.zeros((2, 1)), [0, 0])


def test_sigmoid_bce_examples():
    loss, _ = ad.sigmoid_bce_forward(np.zeros((2, 3)), np.array([[0, 1, 0], [1, 1, 0]]))
    assert loss == pytest.approx(3 * math.log(2), abs=1e-15)
    assert ad.sigmoid_bce_forward(np.full((1, 1), 40.0), np.ones((1, 1)))[0] < 1e-15
    big = ad.sigmoid_bce_forward(np.array([[-800.0, 800.0]]), np.array([[1.0, 0.0]]))[0]
    assert math.isfinite(big) and big == pytest.approx(1600.0)
    with pytest.raises(ValueError):
        ad.sigmoid_bce_forward(np.zeros((1, 2)), np.array([[0.5, 1.0]]))


def test_forward_is_deterministic():
    def run():
        rng = np.random.default_rng(9)
        layer = ad.Linear(4, 3, rng)
        bn = ad.BatchNorm1d(3)
        return ad.relu(bn(layer(ad.Tensor(np.random.default_rng(1).normal(size=(5, 4)))))).data
    assert np.array_equal(run(), run())


def test_shared_node_accumulates():
    x = ad.parameter(np.array([[1.0, -2.0]]))
    y = ad.add(x, x)
    y.backward(np.ones((1, 2)))
    assert np.array_equal(x.grad, [[2.0, 2.0]])


def test_checkpoint_round_trip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1.5]), "c": np.eye(2)}
    ad.save_checkpoint(tmp_path / "ck", arrays, {"note": "x"})
    raw = (tmp_path / "ck.bin").read_bytes()
    assert len(raw) == 8 * (6 + 1 + 4)
    assert np.frombuffer(raw[:16], dtype="<f8").tolist() == [0.0, 1.0]
    back, meta = ad.load_checkpoint(tmp_path / "ck")
    assert meta == {"note": "x"}
    assert all(np.array_equal(back[k], arrays[k]) for k in arrays)


def test_checkpoint_size_mismatch(tmp_path):
    ad.save_checkpoint(tmp_path / "ck", {"a": np.ones(3)})
    (tmp_path / "ck.bin").write_bytes(b"\0" * 16)
    with pytest.raises(ValueError):
        ad.load_checkpoint(tmp_path / "ck")
