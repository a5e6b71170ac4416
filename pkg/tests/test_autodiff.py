import numpy as np
import pytest

from advknn.core import autodiff as ad
from advknn.core.exceptions import ContractError, DimensionError, NumericError

TOLERANCE = 1e-4
SEEDS = range(100)


def _grad(build, *arrays):
    """Analytic gradients of scalar build(*tensors) with respect to every input array."""
    with ad.Graph() as graph:
        leaves = [graph.leaf(a, dtype=np.float64) for a in arrays]
        out = build(*leaves)
        grads = ad.backward(out, leaves)
    return [grads[leaf.node_id].numpy() for leaf in leaves]


def _value(build, *arrays):
    with ad.inference():
        return build(*[ad.Tensor(a, dtype=np.float64) for a in arrays]).item()


def _check(build, *arrays):
    analytic = _grad(build, *arrays)
    for i, array in enumerate(arrays):
        def fn(x, i=i):
            args = list(arrays)
            args[i] = x
            return _value(build, *args)
        numeric = ad.numerical_gradient(fn, array)
        assert ad.relative_error(analytic[i], numeric) < TOLERANCE


def _weighted_sum(t: ad.Tensor, seed: int) -> ad.Tensor:
    weights = np.random.default_rng(seed + 1000).standard_normal(t.shape)
    return ad.reduce_sum(ad.mul(t, weights))


@pytest.mark.parametrize("seed", SEEDS)
def test_affine_gradient(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3)), rng.standard_normal(3)
    _check(lambda x, w, b: _weighted_sum(ad.affine(x, w, b), seed), x, w, b)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_gradient(seed):
    rng = np.random.default_rng(seed)
    x, k, b = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    _check(lambda x, k, b: _weighted_sum(ad.conv2d(x, k, b), seed), x, k, b)


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_pool_flatten_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 4, 6))
    _check(lambda x: _weighted_sum(ad.flatten(ad.maxpool2x2(ad.relu(x))), seed), x)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((5, 4))
    target = ad.one_hot(rng.integers(0, 4, 5), 4, dtype=np.float64)
    _check(lambda z: ad.cross_entropy(ad.softmax(z), target), logits)


@pytest.mark.parametrize("seed", SEEDS)
def test_kl_div_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((3, 5))
    p = rng.dirichlet(np.ones(5), size=3)
    p[0, 1] = 0.0
    p[0] /= p[0].sum()
    _check(lambda z: ad.kl_div(p, ad.softmax(z), reduction="sum"), logits)


@pytest.mark.parametrize("seed", SEEDS)
def test_add_mul_log_reduce_mean_gradient(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 2.0, (3, 4))
    b = rng.uniform(0.5, 2.0, (4,))
    _check(lambda a, b: ad.reduce_mean(ad.log(ad.add(ad.mul(a, b), a))), a, b)


def _two_layer_loss(x, w1, b1, w2, b2, labels):
    hidden = ad.relu(ad.affine(x, w1, b1))
    return ad.cross_entropy(ad.softmax(ad.affine(hidden, w2, b2)), ad.one_hot(labels, 3, dtype=np.float64))


@pytest.mark.parametrize("seed", SEEDS)
def test_two_layer_network_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 6))
    w1, b1 = rng.standard_normal((6, 5)), rng.standard_normal(5)
    w2, b2 = rng.standard_normal((5, 3)), rng.standard_normal(3)
    labels = rng.integers(0, 3, 4)
    _check(lambda *params: _two_layer_loss(*params, labels), x, w1, b1, w2, b2)


def test_backward_is_bit_identical_across_runs():
    rng = np.random.default_rng(7)
    x, k, b = rng.standard_normal((2, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    w = rng.standard_normal((27, 4))
    target = ad.one_hot([1, 3], 4, dtype=np.float64)

    def build(x, k, b):
        features = ad.flatten(ad.maxpool2x2(ad.relu(ad.conv2d(x, k, b))))
        logits = ad.affine(features, ad.constant(w, dtype=np.float64), ad.constant(np.zeros(4), dtype=np.float64))
        return ad.cross_entropy(ad.softmax(logits), target)

    with ad.Graph() as graph:
        leaves = [graph.leaf(a, dtype=np.float64) for a in (x, k, b)]
        root = build(*leaves)
        first = ad.backward(root, leaves)
        again = ad.backward(root, leaves)
    rebuilt = _grad(build, x, k, b)
    for i, leaf in enumerate(leaves):
        np.testing.assert_array_equal(first[leaf.node_id].numpy(), again[leaf.node_id].numpy())
        np.testing.assert_array_equal(first[leaf.node_id].numpy(), rebuilt[i])


def test_shared_subexpression_accumulates():
    x = np.array([1.5, -2.0, 3.0])
    grads = _grad(lambda t: ad.reduce_sum(ad.mul(t, t)), x)
    np.testing.assert_allclose(grads[0], 2 * x)


def test_disconnected_leaf_gets_zero_gradient():
    with ad.Graph() as graph:
        used = graph.leaf(np.ones(3), dtype=np.float64)
        unused = graph.leaf(np.ones((2, 2)), dtype=np.float64)
        grads = ad.backward(ad.reduce_sum(used))
    np.testing.assert_array_equal(grads[unused.node_id].numpy(), np.zeros((2, 2)))


def test_constant_inputs_receive_no_gradient():
    with ad.Graph() as graph:
        x = graph.leaf(np.array([2.0]), dtype=np.float64)
        c = ad.constant(np.array([3.0]), dtype=np.float64)
        grads = ad.backward(ad.mul(x, c))
    assert list(grads) == [x.node_id]
    np.testing.assert_allclose(grads[x.node_id].numpy(), [3.0])


def test_backward_needs_a_scalar_root():
    with ad.Graph() as graph:
        x = graph.leaf(np.ones(3), dtype=np.float64)
        with pytest.raises(ContractError):
            ad.backward(ad.relu(x))


def test_inference_records_nothing():
    with ad.Graph() as graph:
        x = graph.leaf(np.ones((1, 2)), dtype=np.float64)
        with ad.inference():
            ad.relu(x)
    assert len(graph.nodes) == 1


def test_affine_shape_mismatch_names_the_axes():
    with pytest.raises(DimensionError) as info:
        ad.affine(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 2))), ad.Tensor(np.ones(2)))
    assert info.value.operation == "affine"
    assert "axis 1" in str(info.value)


def test_conv2d_rejects_even_kernels():
    with pytest.raises(DimensionError):
        ad.conv2d(ad.Tensor(np.ones((1, 1, 4, 4))), ad.Tensor(np.ones((1, 1, 2, 2))), ad.Tensor(np.ones(1)))


def test_maxpool_of_one_pixel_is_a_dimension_error():
    with pytest.raises(DimensionError):
        ad.maxpool2x2(ad.Tensor(np.ones((1, 1, 1, 1))))


def test_maxpool_routes_gradient_to_first_maximum():
    x = np.array([[[[1.0, 1.0], [1.0, 1.0]]]])
    grads = _grad(lambda t: ad.reduce_sum(ad.maxpool2x2(t)), x)
    np.testing.assert_array_equal(grads[0], [[[[1.0, 0.0], [0.0, 0.0]]]])


def test_conv2d_same_padding_keeps_spatial_size():
    out = ad.conv2d(ad.Tensor(np.ones((2, 1, 5, 7))), ad.Tensor(np.ones((4, 1, 3, 3))), ad.Tensor(np.zeros(4)))
    assert out.shape == (2, 4, 5, 7)
    assert out.numpy()[0, 0, 2, 3] == 9.0
    assert out.numpy()[0, 0, 0, 0] == 4.0


def test_softmax_survives_large_logits():
    probs = ad.softmax(ad.Tensor(np.array([[1000.0, 0.0, -1000.0]]))).numpy()
    assert np.all(np.isfinite(probs))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)


def test_log_without_floor_rejects_zero():
    with pytest.raises(NumericError):
        ad.log(ad.Tensor(np.array([0.0, 1.0])))
    clamped = ad.log(ad.Tensor(np.array([0.0, 1.0])), floor=1e-12).numpy()
    np.testing.assert_allclose(clamped, [np.log(1e-12), 0.0])


def test_cross_entropy_reductions_agree():
    rng = np.random.default_rng(0)
    probs = ad.Tensor(rng.dirichlet(np.ones(3), size=4))
    target = ad.one_hot([0, 1, 2, 0], 3, dtype=np.float64)
    rows = ad.cross_entropy(probs, target, reduction="none").numpy()
    assert rows.shape == (4,)
    assert ad.cross_entropy(probs, target, reduction="sum").item() == pytest.approx(rows.sum())
    assert ad.cross_entropy(probs, target, reduction="mean").item() == pytest.approx(rows.mean())


def test_dtype_is_preserved_through_operations():
    x = ad.Tensor(np.ones((2, 3), dtype=np.float32))
    w = ad.Tensor(np.ones((3, 2), dtype=np.float32))
    b = ad.Tensor(np.zeros(2, dtype=np.float32))
    assert ad.softmax(ad.affine(x, w, b)).dtype == np.float32


def test_unsupported_dtype_is_rejected():
    with pytest.raises(ContractError):
        ad.Tensor(np.ones(2), dtype=np.int32)
