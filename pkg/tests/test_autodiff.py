"""Engine-level tests: forward semantics, backward rules, optimizer,
RNG streams, and checkpoint round trips."""

import numpy as np
import pytest

from nsatp import autodiff as ad


def rng():
    return np.random.default_rng(42)


# -- forward semantics ------------------------------------------------


def test_add_mul_forward():
    a = ad.constant([[1.0, 2.0], [3.0, 4.0]])
    b = ad.constant([[10.0, 20.0], [30.0, 40.0]])
    assert np.array_equal(ad.add(a, b).values, [[11.0, 22.0], [33.0, 44.0]])
    assert np.array_equal(ad.mul(a, b).values, [[10.0, 40.0], [90.0, 160.0]])


def test_operator_sugar():
    x = ad.parameter([2.0, 3.0])
    y = (-x) * 2.0 + 1.0
    assert np.array_equal(y.values, [-3.0, -5.0])
    z = x - 1.0
    assert np.array_equal(z.values, [1.0, 2.0])


def test_matmul_matches_numpy():
    r = rng()
    a, b = r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 5))
    out = ad.matmul(ad.constant(a), ad.constant(b))
    np.testing.assert_allclose(out.values, a @ b, atol=1e-12)


def test_linear_matches_numpy():
    r = rng()
    x, w, b = r.normal(size=(5, 3)), r.normal(size=(3, 4)), r.normal(size=4)
    out = ad.linear(ad.constant(x), ad.constant(w), ad.constant(b))
    np.testing.assert_allclose(out.values, x @ w + b, atol=1e-12)


def test_conv1d_same_padding_oracle():
    r = rng()
    x = r.normal(size=(6, 2))
    k = r.normal(size=(3, 2, 4))
    out = ad.conv1d(ad.constant(x), ad.constant(k)).values
    padded = np.concatenate([np.zeros((1, 2)), x, np.zeros((1, 2))])
    expected = np.zeros((6, 4))
    for t in range(6):
        for tap in range(3):
            expected[t] += padded[t + tap] @ k[tap]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_conv1d_even_kernel_rejected():
    with pytest.raises(ValueError, match="odd"):
        ad.conv1d(ad.constant(np.zeros((4, 2))), ad.constant(np.zeros((2, 2, 2))))


def test_conv1d_pointwise_kernel_is_linear():
    r = rng()
    x = r.normal(size=(5, 3))
    w = r.normal(size=(3, 2))
    out = ad.conv1d(ad.constant(x), ad.constant(w[None]))
    np.testing.assert_allclose(out.values, x @ w, atol=1e-12)


def test_conv2d_same_padding_oracle():
    r = rng()
    x = r.normal(size=(4, 5, 2))
    k = r.normal(size=(3, 3, 2, 3))
    out = ad.conv2d(ad.constant(x), ad.constant(k)).values
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    expected = np.zeros((4, 5, 3))
    for i in range(4):
        for j in range(5):
            for di in range(3):
                for dj in range(3):
                    expected[i, j] += padded[i + di, j + dj] @ k[di, dj]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_relu_forward_and_subgradient_at_zero():
    x = ad.parameter([-2.0, 0.0, 3.0])
    y = ad.relu(x)
    assert np.array_equal(y.values, [0.0, 0.0, 3.0])
    ad.backward(ad.mse_loss(y, ad.constant([0.0, 0.0, 0.0])))
    # d/dx mse = 2/3 * relu(x) * relu'(x); at x=0 the subgradient is 0
    np.testing.assert_allclose(x.grad, [0.0, 0.0, 2.0], atol=1e-12)


def test_exp_reciprocal_forward():
    x = ad.constant([0.0, 1.0])
    np.testing.assert_allclose(ad.exp(x).values, [1.0, np.e], atol=1e-12)
    y = ad.constant([2.0, -4.0])
    np.testing.assert_allclose(ad.reciprocal(y).values, [0.5, -0.25], atol=1e-15)


def test_softmax_rows_constant_row_uniform():
    out = ad.softmax_rows(ad.constant([[7.0, 7.0, 7.0, 7.0]]))
    np.testing.assert_allclose(out.values, [[0.25] * 4], atol=1e-15)


def test_softmax_rows_sum_to_one():
    out = ad.softmax_rows(ad.constant(rng().normal(size=(3, 6, 5))))
    np.testing.assert_allclose(out.values.sum(axis=-1), np.ones((3, 6)), atol=1e-12)


def test_layer_norm_standardizes_rows():
    r = rng()
    x = r.normal(size=(4, 8)) * 3.0 + 2.0
    out = ad.layer_norm(
        ad.constant(x), ad.constant(np.ones(8)), ad.constant(np.zeros(8))
    ).values
    np.testing.assert_allclose(out.mean(axis=-1), np.zeros(4), atol=1e-12)
    np.testing.assert_allclose(out.std(axis=-1), np.ones(4), atol=1e-4)


def test_mlp_forward_single_layer_is_linear():
    r = rng()
    x, w, b = r.normal(size=(3, 4)), r.normal(size=(4, 2)), r.normal(size=2)
    out = ad.mlp_forward(ad.constant(x), [(ad.constant(w), ad.constant(b))])
    np.testing.assert_allclose(out.values, x @ w + b, atol=1e-12)


def test_mlp_forward_rejects_empty():
    with pytest.raises(ValueError, match="no layers"):
        ad.mlp_forward(ad.constant(np.zeros((2, 2))), [])


def test_mse_loss_value_and_shape_check():
    pred = ad.constant([1.0, 3.0])
    target = ad.constant([0.0, 1.0])
    assert float(ad.mse_loss(pred, target).values) == pytest.approx((1 + 4) / 2)
    with pytest.raises(ValueError):
        ad.mse_loss(pred, ad.constant([[0.0, 1.0]]))


def test_structural_ops_match_numpy():
    r = rng()
    x = r.normal(size=(2, 4, 3))
    t = ad.constant(x)
    assert np.array_equal(ad.reshape(t, (8, 3)).values, x.reshape(8, 3))
    assert np.array_equal(ad.transpose(t, (1, 0, 2)).values, x.transpose(1, 0, 2))
    assert np.array_equal(
        ad.concat([t, t], axis=-1).values, np.concatenate([x, x], axis=-1)
    )
    assert np.array_equal(
        ad.pad_rows(t, 2).values, np.pad(x, ((0, 0), (0, 2), (0, 0)))
    )
    assert np.array_equal(ad.take_rows(t, 1, 3).values, x[:, 1:3, :])


def test_grid_ops_match_numpy():
    r = rng()
    x = r.normal(size=(2, 3, 4, 2))
    t = ad.constant(x)
    assert np.array_equal(
        ad.pad_grid(t, 5, 6).values, np.pad(x, ((0, 0), (0, 2), (0, 2), (0, 0)))
    )
    assert np.array_equal(ad.crop_grid(t, 2, 3).values, x[:, :2, :3, :])
    assert np.array_equal(
        ad.roll_grid(t, 1, -1).values, np.roll(x, (1, -1), axis=(1, 2))
    )


# -- backward machinery -----------------------------------------------


def test_backward_accumulates_shared_parent():
    x = ad.parameter([1.5])
    y = ad.add(x, x)
    ad.backward(ad.reshape(y, ()))
    np.testing.assert_allclose(x.grad, [2.0])


def test_backward_unbroadcasts_row_vector():
    x = ad.parameter(np.zeros((3, 2)))
    row = ad.parameter([1.0, 2.0])
    out = ad.add(x, row)
    ad.backward(ad.mse_loss(out, ad.constant(np.zeros((3, 2)))))
    # each row contributes 2*(row)/6; summed over the 3 rows
    np.testing.assert_allclose(row.grad, [3 * 2 * 1.0 / 6, 3 * 2 * 2.0 / 6])


def test_backward_requires_scalar_loss():
    x = ad.parameter([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.mul(x, 2.0))


def test_graph_is_single_use():
    x = ad.parameter([2.0])
    loss = ad.mse_loss(ad.mul(x, x), ad.constant([0.0]))
    ad.backward(loss)
    with pytest.raises(RuntimeError, match="consumed"):
        ad.backward(loss)


def test_interior_gradients_are_dropped():
    x = ad.parameter([3.0])
    mid = ad.mul(x, 2.0)
    ad.backward(ad.mse_loss(mid, ad.constant([0.0])))
    assert mid.grad is None
    assert x.grad is not None


def test_numerical_gradient_of_quadratic():
    x = ad.parameter([1.0, -2.0, 0.5])

    def f():
        return float(np.sum(x.values ** 2))

    grad = ad.numerical_gradient(f, x)
    np.testing.assert_allclose(grad, 2 * x.values, atol=1e-6)
    assert ad.max_relative_error(grad, 2 * x.values) < 1e-6


# -- optimizer --------------------------------------------------------


def test_adam_first_step_oracle():
    x = ad.parameter([10.0])
    opt = ad.Adam({"x": x}, lr=0.1)
    x.grad = np.array([4.0])
    opt.step()
    # bias-corrected first step: m_hat = g, v_hat = g^2
    expected = 10.0 - 0.1 * 4.0 / (np.sqrt(16.0) + 1e-8)
    np.testing.assert_allclose(x.values, [expected], atol=1e-12)


def test_adam_skips_missing_gradients():
    x = ad.parameter([1.0])
    y = ad.parameter([2.0])
    opt = ad.Adam({"x": x, "y": y}, lr=0.1)
    x.grad = np.array([1.0])
    opt.step()
    assert y.values[0] == 2.0
    assert x.values[0] != 1.0


def test_adam_zero_grad():
    x = ad.parameter([1.0])
    opt = ad.Adam({"x": x})
    x.grad = np.array([1.0])
    opt.zero_grad()
    assert x.grad is None


# -- rng and init -----------------------------------------------------


def test_seeded_rng_reproducible_and_name_keyed():
    a = ad.seeded_rng(7, "alpha").normal(size=4)
    b = ad.seeded_rng(7, "alpha").normal(size=4)
    c = ad.seeded_rng(7, "beta").normal(size=4)
    d = ad.seeded_rng(8, "alpha").normal(size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_glorot_uniform_bounds():
    r = ad.seeded_rng(0, "glorot")
    w = ad.glorot_uniform(r, (20, 30))
    limit = np.sqrt(6.0 / 50.0)
    assert w.shape == (20, 30)
    assert np.abs(w).max() <= limit
    # convolution kernels scale fans by the receptive field
    k = ad.glorot_uniform(r, (3, 3, 4, 5))
    limit_k = np.sqrt(6.0 / (9 * 4 + 9 * 5))
    assert np.abs(k).max() <= limit_k


# -- checkpoints ------------------------------------------------------


def test_checkpoint_roundtrip_exact(tmp_path):
    r = rng()
    params = {
        "w": ad.parameter(r.normal(size=(3, 2)) * 1e-7),
        "b": ad.parameter(np.array([1e300, -1e-300, 0.0, np.pi])),
    }
    path = tmp_path / "ckpt.json"
    ad.save_checkpoint(path, params, config={"kind": "test", "n": 3})
    loaded, config = ad.load_checkpoint(path)
    assert config == {"kind": "test", "n": 3}
    assert set(loaded) == {"w", "b"}
    for name in params:
        assert np.array_equal(loaded[name].values, params[name].values)


def test_checkpoint_schema_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"schema": "other/9", "params": {}}')
    with pytest.raises(ValueError, match="schema"):
        ad.load_checkpoint(path)


# -- finite-value guards ----------------------------------------------


def test_non_finite_inputs_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        ad.relu(ad.constant([np.inf, 1.0]))
    with pytest.raises(ValueError, match="non-finite"):
        ad.mse_loss(ad.constant([np.nan]), ad.constant([0.0]))
