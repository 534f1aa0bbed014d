"""Tests for network assembly: shapes, initialization determinism,
closed-form parameter counts, and eval-mode invariances."""

import numpy as np
import pytest

from semloc.engine import ShapeMismatch
from semloc.models import ArchConfig, Model, build

ARCH = ArchConfig(conv_channels=[2, 3, 3, 4], mlp_widths_reg=[8, 6, 3],
                  mlp_widths_cls=[8, 6, 3], input_shape=(1, 16, 32))


def param_count_oracle(arch):
    """Hand-derived count: conv blocks have w + bn(gamma, beta); hidden
    linear blocks have w + bn; output layers have w + bias."""
    total = 0
    c_in = arch.input_shape[0]
    for c_out in arch.conv_channels:
        total += c_out * c_in * 9 + 2 * c_out
        c_in = c_out
    for widths in (arch.mlp_widths_reg, arch.mlp_widths_cls):
        d = arch.feature_dim()
        for i, w in enumerate(widths):
            total += d * w
            total += 2 * w if i < len(widths) - 1 else w
            d = w
    return total


def test_forward_shapes():
    model = Model(ARCH, seed=0)
    x = np.random.default_rng(0).random((5, 1, 16, 32))
    out = model.forward(x, train=True)
    assert out.features.shape == (5, ARCH.feature_dim())
    assert out.coords.shape == (5, 3)
    assert out.logits.shape == (5, 3)
    assert out.probs.shape == (5, 3)
    np.testing.assert_allclose(out.probs.data.sum(axis=1), 1.0, atol=1e-12)


def test_features_are_nonnegative():
    model = Model(ARCH, seed=1)
    x = np.random.default_rng(1).normal(size=(6, 1, 16, 32))
    out = model.forward(x, train=True)
    assert out.features.data.min() >= 0.0


def test_seeded_init_is_deterministic():
    a, b = Model(ARCH, seed=3), Model(ARCH, seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    c = Model(ARCH, seed=4)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data)
               for k in a.params)


def test_param_count_closed_form():
    assert Model(ARCH, seed=0).param_count() == param_count_oracle(ARCH)
    default = ArchConfig()
    assert Model(default, seed=0).param_count() == param_count_oracle(default)


def test_glorot_ranges():
    model = Model(ARCH, seed=0)
    w = model.params["theta1.conv0.w"].data
    limit = np.sqrt(6.0 / (9 * 1 + 9 * 2))
    assert np.all(np.abs(w) <= limit)
    lin = model.params["theta2.lin0.w"].data
    limit = np.sqrt(6.0 / (ARCH.feature_dim() + 8))
    assert np.all(np.abs(lin) <= limit)
    # bn starts as identity, heads start at zero output offset
    np.testing.assert_array_equal(model.params["theta1.conv0.bn.gamma"].data, 1.0)
    np.testing.assert_array_equal(model.params["theta1.conv0.bn.beta"].data, 0.0)
    np.testing.assert_array_equal(model.params["theta2.lin2.b"].data, 0.0)


def test_eval_mode_is_per_sample():
    # eval-mode forward must not couple samples through batch statistics
    model = Model(ARCH, seed=5)
    rng = np.random.default_rng(5)
    # train once so running stats are non-trivial
    model.forward(rng.random((8, 1, 16, 32)), train=True)
    x = rng.random((4, 1, 16, 32))
    full = model.forward(x, train=False).coords.data
    perm = np.array([2, 0, 3, 1])
    permuted = model.forward(x[perm], train=False).coords.data
    np.testing.assert_allclose(permuted, full[perm], atol=1e-12)
    single = model.forward(x[1:2], train=False).coords.data
    np.testing.assert_allclose(single, full[1:2], atol=1e-12)


def test_train_mode_updates_running_stats():
    model = Model(ARCH, seed=6)
    before = {k: v.copy() for k, v in model.running.items()}
    model.forward(np.random.default_rng(6).random((8, 1, 16, 32)), train=True)
    assert any(not np.array_equal(before[k], model.running[k])
               for k in before)
    after = {k: v.copy() for k, v in model.running.items()}
    model.forward(np.random.default_rng(7).random((8, 1, 16, 32)), train=False)
    for k in after:  # eval mode must not touch them
        np.testing.assert_array_equal(after[k], model.running[k])


def test_state_dict_round_trip():
    a = Model(ARCH, seed=7)
    a.forward(np.random.default_rng(8).random((4, 1, 16, 32)), train=True)
    state = a.state_dict()
    b = Model(ARCH, seed=99)
    b.load_state_dict(state)
    x = np.random.default_rng(9).random((3, 1, 16, 32))
    np.testing.assert_array_equal(a.forward(x).coords.data,
                                  b.forward(x).coords.data)


def test_input_shape_validation():
    model = Model(ARCH, seed=0)
    with pytest.raises(ShapeMismatch):
        model.forward(np.zeros((2, 1, 16, 16)))  # wrong W
    with pytest.raises(ShapeMismatch):
        ArchConfig(conv_channels=[4, 4, 4, 4], input_shape=(1, 20, 32))


def test_arch_round_trip_and_describe():
    d = ARCH.to_dict()
    again = ArchConfig.from_dict(d)
    assert again.to_dict() == d
    text = build(ARCH, seed=0).describe()
    assert "theta1.conv0" in text and "total parameters" in text


def test_classifier_width_follows_n_classes():
    arch = ArchConfig(conv_channels=[2, 2, 2, 2], mlp_widths_reg=[8, 3],
                      mlp_widths_cls=[8, 3], n_classes=2,
                      input_shape=(1, 16, 16))
    model = Model(arch, seed=0)
    out = model.forward(np.zeros((2, 1, 16, 16)), train=True)
    assert out.probs.shape == (2, 2)
