import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dprobfl.tensor import (
    Dataset,
    DimensionError,
    ModelSpec,
    add,
    coordinate,
    dot,
    init_params,
    l2_norm,
    loss_and_accuracy,
    make_rng,
    per_example_loss,
    per_sample_gradients,
    scale,
)
from oracles import finite_difference

SPECS = [ModelSpec("logistic", 4, num_classes=3), ModelSpec("mlp2", 4, hidden_dim=5, num_classes=3)]


def random_instance(spec, rng, n=6):
    params = rng.standard_normal(spec.num_params) * 0.5
    data = Dataset(rng.standard_normal((n, spec.input_dim)), rng.integers(spec.num_classes, size=n))
    return params, data


def test_same_stream_same_draws():
    assert np.array_equal(make_rng(3, 1, 2).standard_normal(5), make_rng(3, 1, 2).standard_normal(5))
    assert not np.array_equal(make_rng(3, 1).standard_normal(5), make_rng(3, 2).standard_normal(5))


def test_param_counts():
    assert ModelSpec("logistic", 64, num_classes=10).num_params == 650
    assert ModelSpec("mlp2", 4, hidden_dim=5, num_classes=3).num_params == 5 * 4 + 5 + 3 * 5 + 3


def test_unpack_returns_views():
    spec = SPECS[1]
    params = np.zeros(spec.num_params)
    w1, b1, w2, b2 = spec.unpack(params)
    b2[...] = 7.0
    assert params[-1] == 7.0


def test_bad_specs():
    with pytest.raises(ValueError):
        ModelSpec("cnn", 4)
    with pytest.raises(ValueError):
        ModelSpec("mlp2", 4, hidden_dim=0)
    with pytest.raises(DimensionError):
        SPECS[0].unpack(np.zeros(3))


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.architecture)
def test_gradients_match_finite_differences(spec):
    rng = make_rng(11)
    for _ in range(10):
        params, data = random_instance(spec, rng)
        grads = per_sample_gradients(spec, params, data)
        for j in range(len(data)):
            one = data.subset([j])
            fd = finite_difference(lambda w: per_example_loss(spec, w, one)[0], params)
            np.testing.assert_allclose(grads[j], fd, rtol=1e-4, atol=1e-7)


def test_mean_gradient_is_gradient_of_mean_loss():
    spec = SPECS[1]
    params, data = random_instance(spec, make_rng(2), n=9)
    fd = finite_difference(lambda w: per_example_loss(spec, w, data).mean(), params)
    np.testing.assert_allclose(per_sample_gradients(spec, params, data).mean(axis=0), fd, rtol=1e-4, atol=1e-7)


def test_relu_kink_has_zero_derivative():
    spec = ModelSpec("mlp2", 1, hidden_dim=1, num_classes=2)
    params = np.array([1.0, 0.0, 1.0, -1.0, 0.0, 0.0])
    grads = per_sample_gradients(spec, params, Dataset(np.zeros((1, 1)), np.array([0])))
    assert grads[0, 0] == 0.0 and grads[0, 1] == 0.0


def test_softmax_is_stable_for_large_logits():
    spec = SPECS[0]
    params = np.full(spec.num_params, 400.0)
    data = Dataset(np.ones((2, 4)), np.array([0, 2]))
    assert np.all(np.isfinite(per_sample_gradients(spec, params, data)))
    assert np.all(np.isfinite(per_example_loss(spec, params, data)))


def test_zero_params_give_uniform_loss():
    spec = ModelSpec("logistic", 3, num_classes=4)
    loss, _ = loss_and_accuracy(spec, init_params(spec), Dataset(np.ones((5, 3)), np.zeros(5)))
    assert loss == pytest.approx(np.log(4))


def test_mlp_init_is_seeded():
    spec = SPECS[1]
    assert np.array_equal(init_params(spec, make_rng(0)), init_params(spec, make_rng(0)))


def test_shape_errors():
    spec = SPECS[0]
    with pytest.raises(DimensionError):
        per_sample_gradients(spec, np.zeros(spec.num_params), Dataset(np.zeros((2, 5)), np.zeros(2)))
    with pytest.raises(DimensionError):
        per_sample_gradients(spec, np.zeros(spec.num_params), Dataset(np.zeros((2, 4)), np.array([0, 3])))
    with pytest.raises(DimensionError):
        Dataset(np.zeros((2, 4)), np.zeros(3))
    with pytest.raises(DimensionError):
        add(np.zeros(2), np.zeros(3))


vectors = st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8)


@given(vectors, st.floats(-10, 10))
def test_vector_helpers(v, a):
    v = np.array(v)
    assert np.array_equal(add(v, np.zeros_like(v)), v)
    assert np.allclose(scale(v, a), a * v)
    assert dot(v, v) == pytest.approx(l2_norm(v) ** 2, rel=1e-12, abs=1e-12)
    assert coordinate(v, 0) == v[0]
