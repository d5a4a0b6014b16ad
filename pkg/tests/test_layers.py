import warnings

import numpy as np
import pytest

from sve import tensor as T
from sve.layers import SveConfig, diversity_report, overhead_stats, project_nonneg, wrap
from sve.rng import Rng
from sve.tensor import Tensor, grad_check


def make_layer(m=6, n=4, members=3, sigma_init=0.05, seed=0):
    rng = Rng(seed)
    w = rng.normal((m, n))
    b = rng.normal(m)
    return w, b, wrap(w, b, SveConfig(members, sigma_init), rng.split("wrap"), name="fc")


def test_zero_noise_members_reproduce_weight():
    w, b, layer = make_layer(sigma_init=0.0)
    x = Rng(1).normal((4, 5))
    for k in range(layer.n_members):
        np.testing.assert_allclose(layer.weight(k), w, atol=1e-12)
        out = layer.forward(k, Tensor(x)).data
        np.testing.assert_allclose(out, w @ x + b[:, None], atol=1e-12)
    s0 = layer.sigma_members[0].data
    assert all(np.array_equal(s.data, s0) for s in layer.sigma_members)


def test_noise_is_multiplicative_and_per_member():
    _, _, layer = make_layer(sigma_init=0.05)
    ratios = [s.data / layer.sigma_pretrained - 1.0 for s in layer.sigma_members]
    assert not np.allclose(ratios[0], ratios[1])
    assert max(np.abs(r).max() for r in ratios) < 0.5


def test_member_noise_depends_only_on_name_and_index():
    _, _, a = make_layer(members=2, seed=3)
    _, _, b = make_layer(members=4, seed=3)
    np.testing.assert_array_equal(a.sigma_members[1].data, b.sigma_members[1].data)


def test_trainable_parameters_are_sigmas_only():
    _, _, layer = make_layer(m=6, n=4, members=3)
    params = layer.parameters()
    assert len(params) == 3 and all(p.shape == (4,) for p in params)
    assert layer.u.shape == (6, 4) and layer.vt.shape == (4, 4)


def test_frozen_factors_read_only():
    _, _, layer = make_layer()
    with pytest.raises(AttributeError):
        layer.u = np.zeros((6, 4))


def test_factored_and_materialised_forward_agree():
    _, _, layer = make_layer()
    x = Tensor(Rng(2).normal((4, 7)))
    a = layer.forward(1, x).data
    layer.factored = False
    b = layer.forward(1, x).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_member_index_checked():
    _, _, layer = make_layer(members=2)
    with pytest.raises(IndexError):
        layer.forward(2, Tensor(np.ones((4, 1))))


def test_projection_clamps_negatives():
    _, _, layer = make_layer()
    layer.sigma_members[0].data[:] = [-1.0, 0.5, -0.0, 2.0]
    project_nonneg(layer)
    np.testing.assert_array_equal(layer.sigma_members[0].data, [0.0, 0.5, 0.0, 2.0])


def test_sigma_gradient_check():
    _, _, layer = make_layer(members=2)
    x = Tensor(Rng(4).normal((4, 5)))
    f = lambda: T.sum_all(T.mul(layer.forward(1, x), layer.forward(1, x)))  # noqa: E731
    assert grad_check(f, layer.parameters(), n_probe=8) <= 1e-7


def test_config_validation():
    with pytest.raises(ValueError):
        SveConfig(0, 0.01)
    with pytest.raises(ValueError):
        SveConfig(2, 1.0)
    with pytest.warns(UserWarning):
        SveConfig(2, 0.7)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        SveConfig(2, 0.01)
    assert SveConfig(2, 0.0, ("fc*",)).targets("fc2")
    assert not SveConfig(2, 0.0, ("q", "k")).targets("fc1")


class TestOverhead:
    def test_integer_count(self):
        shapes = [(8, 4), (4, 8), (5, 5)]
        stats = overhead_stats(shapes, d=4, n_members=3, heads=(4, 2))
        assert stats["trainable_per_member"] == 4 + 4 + 5
        assert stats["trainable_total"] == 3 * 13 + 3 * (4 * 2 + 2)

    def test_transformer_layer_approximation(self):
        d = 768
        shapes = [(d, d)] * 4 + [(4 * d, d), (d, 4 * d)]
        stats = overhead_stats(shapes, d=d, n_members=4, heads=(d, 10))
        assert stats["overhead_approx"] == pytest.approx(3 / 1536)
        assert round(100 * stats["overhead_approx"], 3) == 0.195
        assert stats["overhead_fraction"] == pytest.approx(3 * 6 * d / (12 * d * d))

    def test_single_member_has_no_overhead(self):
        assert overhead_stats([(3, 3)], 3, 1, (3, 2))["overhead_fraction"] == 0.0


def test_diversity_report_percentages():
    _, _, layer = make_layer(members=2, sigma_init=0.0)
    layer.sigma_members[1].data[0] *= 1.1
    table = diversity_report(layer, top_k=2)
    np.testing.assert_allclose(table.percent[:, 0], [0.0, 0.0], atol=1e-12)
    assert table.percent[0, 1] == pytest.approx(10.0)
    with pytest.raises(ValueError):
        diversity_report(layer, top_k=9)
