"""Attention backbone: score recovery algebra, window tiling, block
identities, and equivalence with the plain variant at initialization."""

import numpy as np
import pytest

from nsatp import autodiff as ad
from nsatp.model_base import SampleBatch
from nsatp.stationarization import normalize, normalize_batch
from nsatp.swin import (
    SwinCompensation,
    SwinModelConfig,
    SwinPredictor,
    destationary_attention,
    window_combine,
    window_partition,
)

from test_cnn import make_samples


def small_config(**overrides):
    base = dict(n_past=8, n_future=4, d_model=6, n_blocks=1, n_periods=2,
                window=2, mlp_hidden=8)
    base.update(overrides)
    return SwinModelConfig(**base)


def softmax(rows):
    e = np.exp(rows - rows.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# -- configuration ----------------------------------------------------


def test_config_validation_and_defaults():
    cfg = small_config()
    assert cfg.d_k == cfg.d_model
    assert cfg.ffn_hidden == 2 * cfg.d_model
    with pytest.raises(ValueError, match="window"):
        small_config(window=1)
    with pytest.raises(ValueError, match="head"):
        small_config(heads=2)
    with pytest.raises(ValueError, match="d_k"):
        small_config(d_k=12)
    with pytest.raises(ValueError, match="T/2"):
        small_config(n_periods=7)
    with pytest.raises(TypeError):
        SwinPredictor(config=object())


def test_compensation_validation():
    with pytest.raises(ValueError, match="positive"):
        SwinCompensation(
            attention_scale=ad.constant(0.0),
            attention_shift=None,
            output_scale=None,
            output_shift=None,
        )
    with pytest.raises(ValueError, match="vector"):
        SwinCompensation(
            attention_scale=None,
            attention_shift=ad.constant(np.zeros((2, 2))),
            output_scale=None,
            output_shift=None,
        )


# -- attention --------------------------------------------------------


def test_plain_attention_matches_numpy():
    rng = np.random.default_rng(1)
    q, k, v = (rng.normal(size=(3, 5, 4)) for _ in range(3))
    out = destationary_attention(q, k, v).values
    weights = softmax(q @ k.transpose(0, 2, 1) / 2.0)
    np.testing.assert_allclose(out, weights @ v, atol=1e-12)


def test_neutral_factors_equal_plain():
    rng = np.random.default_rng(2)
    q, k, v = (rng.normal(size=(5, 4)) for _ in range(3))
    plain = destationary_attention(q, k, v).values
    neutral = destationary_attention(q, k, v, scale=ad.constant(1.0),
                                     shift=ad.constant(np.zeros(5))).values
    np.testing.assert_allclose(neutral, plain, atol=1e-12)


def test_attention_shape_check():
    with pytest.raises(ValueError, match="mismatch"):
        destationary_attention(np.zeros((4, 3)), np.zeros((4, 3)), np.zeros((5, 3)))


def test_attention_linear_in_values():
    rng = np.random.default_rng(3)
    q, k = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    v1, v2 = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    combined = destationary_attention(q, k, 2.0 * v1 - 3.0 * v2).values
    separate = (2.0 * destationary_attention(q, k, v1).values
                - 3.0 * destationary_attention(q, k, v2).values)
    np.testing.assert_allclose(combined, separate, atol=1e-10)


def test_scalar_scale_recovery_oracle():
    """Raw-window attention weights are reproducible from the
    standardized window when the gain is the squared scale and the shift
    is the raw keys projected onto the mean query."""
    rng = np.random.default_rng(4)
    n = d = 6
    z = rng.normal(size=(n, d))
    z = (z - z.mean(axis=0)) / z.std(axis=0)  # exactly standardized
    sigma = 3.7
    mu = rng.normal(size=d) * 10.0
    raw = sigma * z + mu
    w_q, w_k = rng.normal(size=(d, d)), rng.normal(size=(d, d))

    raw_weights = destationary_attention(raw @ w_q, raw @ w_k, np.eye(n)).values

    k_raw = raw @ w_k
    mu_query = (raw @ w_q).mean(axis=0)
    recovered = destationary_attention(
        z @ w_q, z @ w_k, np.eye(n),
        scale=ad.constant(sigma ** 2),
        shift=ad.constant(k_raw @ mu_query),
    ).values
    np.testing.assert_allclose(recovered, raw_weights, atol=1e-10)


# -- window tiling ----------------------------------------------------


def test_partition_combine_roundtrip():
    rng = np.random.default_rng(5)
    for rows, cols, window, shift in [(4, 6, 2, False), (5, 7, 2, True), (3, 5, 3, True)]:
        x = rng.normal(size=(rows, cols, 3))
        tiles, layout = window_partition(x, window, shift=shift)
        assert len(tiles) == layout.n_windows
        assert all(t.shape == (window * window, 3) for t in tiles)
        back = window_combine(tiles, layout)
        np.testing.assert_allclose(back.values, x, atol=1e-12)


def test_partition_tiles_match_rolled_grid():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 4, 2))
    tiles, layout = window_partition(x, 2, shift=True)
    rolled = np.roll(x, (-1, -1), axis=(0, 1))
    first = rolled[0:2, 0:2, :].reshape(4, 2)
    np.testing.assert_allclose(tiles[0].values, first, atol=1e-12)


def test_combine_count_check():
    x = np.zeros((4, 4, 2))
    tiles, layout = window_partition(x, 2)
    with pytest.raises(ValueError, match="windows"):
        window_combine(tiles[:-1], layout)


def test_partition_requires_grid():
    with pytest.raises(ValueError, match="f x p x d"):
        window_partition(np.zeros((4, 4)), 2)


# -- block algebra ----------------------------------------------------


def test_block_with_zeroed_value_and_ffn_doubles_input():
    # both attention sublayers reduce to the identity, so each branch
    # returns its residual input twice: unfold(grid) + x = 2x
    model = SwinPredictor(small_config(), seed=0)
    values = model.export_values()
    for name in values:
        if name.endswith(".value") or name.endswith(".ffn.w1"):
            values[name] = np.zeros_like(values[name])
    model.load_values(values)
    x = np.random.default_rng(7).normal(size=(2, 12, 6))
    out = model.swin_block(ad.constant(x), 0, comp=None)
    np.testing.assert_allclose(out.values, 2.0 * x, atol=1e-12)


def test_projections_are_bias_free():
    model = SwinPredictor(small_config(), seed=0)
    for name in model.params:
        assert not name.endswith("query.bias")
        assert not name.endswith("key.bias")
        assert not name.endswith("value.bias")
    assert "block0.win.query" in model.params
    assert "block0.win.out_bias" in model.params


# -- recovery factors -------------------------------------------------


def test_fresh_factors_are_neutral():
    model = SwinPredictor(small_config(), seed=0)
    window = make_samples(1)[0].past_features
    _, stats = normalize(window)
    comp = model.estimate_compensation(window, stats)
    assert float(comp.attention_scale.values) == 1.0
    assert np.all(comp.attention_shift.values == 0.0)
    assert float(comp.output_scale.values) == 1.0
    assert np.all(comp.output_shift.values == 0.0)


def test_factors_disabled_pieces():
    model = SwinPredictor(small_config(inner_compensation=False), seed=0)
    window = make_samples(1)[0].past_features
    _, stats = normalize(window)
    comp = model.estimate_compensation(window, stats)
    assert comp.attention_scale is None and comp.attention_shift is None
    assert comp.output_scale is not None
    both_off = SwinPredictor(
        small_config(inner_compensation=False, outer_compensation=False), seed=0
    )
    with pytest.raises(ValueError, match="disabled"):
        both_off.estimate_compensation(window, stats)


def test_gains_positive_for_random_inputs():
    # output layers get random weights small enough that the log-gain
    # stays inside exp's float64 range; the gains themselves still swing
    # orders of magnitude around 1
    model = SwinPredictor(small_config(), seed=1)
    rng = np.random.default_rng(8)
    values = model.export_values()
    for name in values:
        if name.startswith("recover.") and (".w2" in name or ".b2" in name):
            values[name] = rng.normal(scale=1e-3, size=values[name].shape)
    model.load_values(values)
    raw = np.stack([s.past_features for s in make_samples(1000, seed=9)])
    _, mu, sigma = normalize_batch(raw)
    comp = model._compensation(raw, mu, sigma)
    assert np.all(comp.attn_scale.values > 0.0)
    assert np.all(comp.out_scale.values > 0.0)
    assert comp.attn_scale.values.max() > comp.attn_scale.values.min()


# -- outer pipeline ---------------------------------------------------


def test_forward_shapes():
    batch = SampleBatch.from_samples(make_samples(3))
    model = SwinPredictor(small_config(), seed=0)
    assert model.forward_batch(batch).shape == (3, 4)


def test_neutral_model_matches_plain_twin():
    batch = SampleBatch.from_samples(make_samples(5, seed=21))
    nsatp = SwinPredictor(small_config(), seed=2)
    plain = SwinPredictor(
        small_config(inner_compensation=False, outer_compensation=False), seed=2
    )
    assert np.array_equal(nsatp.predict_batch(batch), plain.predict_batch(batch))


def test_spectral_plan_pins_forward():
    batch = SampleBatch.from_samples(make_samples(4, seed=23))
    model = SwinPredictor(small_config(), seed=0)
    plan = model.spectral_plan(batch)
    free = model.forward_batch(batch).values
    assert np.array_equal(free, model.forward_batch(batch, plan=plan).values)


def test_training_loss_backward_touches_all_parameter_groups():
    batch = SampleBatch.from_samples(make_samples(4, seed=25))
    model = SwinPredictor(small_config(), seed=1)
    ad.backward(model.training_loss(batch))
    for name in ("embed.kernels", "block0.win.query", "block0.shifted.ffn.w0",
                 "recover.attention_scale.w2", "recover.output_shift.w2"):
        grad = model.params[name].grad
        assert grad is not None and np.any(grad != 0.0), name
