"""Finite-difference verification of the autodiff engine.

Every differentiable operation, and both full predictors, are checked by
comparing backpropagated gradients against central differences.  Inputs
are drawn away from non-smooth points (the ReLU kink, reciprocal poles)
so the comparison is meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .cnn import CnnModelConfig, CnnPredictor
from .model_base import SampleBatch
from .stationarization import N_CONTEXT, N_FEATURES, TemporalSample
from .swin import SwinModelConfig, SwinPredictor

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def ok(self):
        return self.max_error < self.tolerance


def _away_from_zero(rng, shape, low=0.2, high=1.5):
    """Uniform magnitudes in [low, high] with random signs."""
    magnitude = rng.uniform(low, high, size=shape)
    sign = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return magnitude * sign


def _compare(name, build_loss, leaves, tolerance):
    for leaf in leaves:
        leaf.grad = None
    ad.backward(build_loss())
    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros_like(leaf.values) if leaf.grad is None else leaf.grad.copy()
        leaf.grad = None
        numeric = ad.numerical_gradient(lambda: float(build_loss().values), leaf)
        worst = max(worst, ad.max_relative_error(analytic, numeric))
    return CheckResult(name, worst, tolerance)


def check_operations(seed=0, tolerance=OP_TOLERANCE):
    """One finite-difference check per differentiable operation."""
    rng = ad.seeded_rng(seed, "gradcheck.ops")
    results = []

    def scalarize(expr_fn, *leaves):
        # reduce to a scalar through mse against a fixed target
        target = None

        def build():
            nonlocal target
            out = expr_fn()
            if target is None:
                target = ad.constant(rng.normal(size=out.shape))
            return ad.mse_loss(out, target)

        return build, leaves

    def run(name, expr_fn, *leaves):
        build, tensors = scalarize(expr_fn, *leaves)
        results.append(_compare(name, build, tensors, tolerance))

    a = ad.parameter(rng.normal(size=(3, 4)))
    b = ad.parameter(rng.normal(size=(3, 4)))
    row = ad.parameter(rng.normal(size=(4,)))
    run("add", lambda: ad.add(a, b), a, b)
    run("add broadcast", lambda: ad.add(a, row), a, row)
    run("mul", lambda: ad.mul(a, b), a, b)
    scale = ad.parameter(rng.normal(size=(3, 1)))
    run("mul broadcast", lambda: ad.mul(a, scale), a, scale)

    m1 = ad.parameter(rng.normal(size=(2, 3, 4)))
    m2 = ad.parameter(rng.normal(size=(2, 4, 5)))
    run("matmul", lambda: ad.matmul(m1, m2), m1, m2)

    x = ad.parameter(rng.normal(size=(2, 5, 3)))
    weight = ad.parameter(rng.normal(size=(3, 4)))
    bias = ad.parameter(rng.normal(size=(4,)))
    run("linear", lambda: ad.linear(x, weight, bias), x, weight, bias)

    k1 = ad.parameter(rng.normal(size=(3, 3, 4)))
    run("conv1d", lambda: ad.conv1d(x, k1), x, k1)

    grid = ad.parameter(rng.normal(size=(2, 4, 5, 3)))
    k2 = ad.parameter(rng.normal(size=(3, 3, 3, 2)))
    run("conv2d", lambda: ad.conv2d(grid, k2), grid, k2)

    r = ad.parameter(_away_from_zero(rng, (3, 4)))
    run("relu", lambda: ad.relu(r), r)

    e = ad.parameter(rng.uniform(-2.0, 2.0, size=(3, 4)))
    run("exp", lambda: ad.exp(e), e)

    inv = ad.parameter(_away_from_zero(rng, (3, 4), low=0.5, high=2.0))
    run("reciprocal", lambda: ad.reciprocal(inv), inv)

    s = ad.parameter(rng.normal(size=(2, 3, 4)))
    run("softmax_rows", lambda: ad.softmax_rows(s), s)

    ln_x = ad.parameter(rng.normal(size=(2, 5, 4)))
    ln_g = ad.parameter(rng.uniform(0.5, 1.5, size=(4,)))
    ln_b = ad.parameter(rng.normal(size=(4,)))
    run("layer_norm", lambda: ad.layer_norm(ln_x, ln_g, ln_b), ln_x, ln_g, ln_b)

    mlp_x = ad.parameter(rng.normal(size=(3, 4)))
    w0 = ad.parameter(rng.normal(size=(4, 6)))
    b0 = ad.parameter(rng.normal(size=(6,)))
    w1 = ad.parameter(rng.normal(size=(6, 2)))
    b1 = ad.parameter(rng.normal(size=(2,)))
    run("mlp_forward", lambda: ad.mlp_forward(mlp_x, [(w0, b0), (w1, b1)]),
        mlp_x, w0, w1, b1)

    p = ad.parameter(rng.normal(size=(3, 4)))
    t = ad.constant(rng.normal(size=(3, 4)))
    results.append(_compare("mse_loss", lambda: ad.mse_loss(p, t), [p], tolerance))

    run("reshape", lambda: ad.reshape(a, (4, 3)), a)
    run("transpose", lambda: ad.transpose(m1, (1, 0, 2)), m1)
    c1 = ad.parameter(rng.normal(size=(3, 2)))
    c2 = ad.parameter(rng.normal(size=(3, 5)))
    run("concat", lambda: ad.concat([c1, c2], axis=-1), c1, c2)
    run("pad_rows", lambda: ad.pad_rows(x, 3), x)
    run("take_rows", lambda: ad.take_rows(x, 1, 4), x)
    run("pad_grid", lambda: ad.pad_grid(grid, 6, 6), grid)
    run("crop_grid", lambda: ad.crop_grid(grid, 3, 4), grid)
    run("roll_grid", lambda: ad.roll_grid(grid, 1, 2), grid)
    return results


def _synthetic_batch(rng, n_samples, n_past, n_future):
    """Plausible hand-built samples; no simulator involved."""
    samples = []
    for _ in range(n_samples):
        n_stops = n_past + n_future
        features = np.zeros((n_past, N_FEATURES))
        features[:, 0] = rng.uniform(300.0, 900.0, size=n_past)
        features[:, 1] = rng.uniform(30.0, 90.0, size=n_past)
        features[:, 2] = rng.uniform(-60.0, 240.0, size=n_past)
        features[:, 3] = (rng.uniform(size=n_past) < 0.4).astype(np.float64)
        features[:, 4] = rng.uniform(30.0, 90.0, size=n_past)
        context = (rng.uniform(size=(n_stops, N_CONTEXT)) < 0.5).astype(np.float64)
        schedule = 30000.0 + np.cumsum(rng.uniform(40.0, 80.0, size=n_future))
        delay = rng.uniform(-60.0, 240.0, size=n_future)
        samples.append(TemporalSample(
            past_features=features,
            context=context,
            future_schedule=schedule,
            future_delay_truth=delay,
            future_arrival_truth=schedule + delay,
        ))
    return SampleBatch.from_samples(samples)


def check_models(seed=0, tolerance=MODEL_TOLERANCE):
    """Finite-difference check of every parameter of both predictors."""
    rng = ad.seeded_rng(seed, "gradcheck.models")
    batch = _synthetic_batch(rng, n_samples=2, n_past=8, n_future=4)
    cnn = CnnPredictor(CnnModelConfig(
        n_past=8, n_future=4, d_model=4, n_blocks=1, n_periods=2, n_kernels=2,
        mlp_hidden=8, compensation=True, compensation_placement="inside_each_block",
        stationarize=True, revin=True,
    ), seed=seed)
    swin = SwinPredictor(SwinModelConfig(
        n_past=8, n_future=4, d_model=4, window=2, n_blocks=1, n_periods=2,
        mlp_hidden=8, inner_compensation=True, outer_compensation=True,
    ), seed=seed)
    results = []
    for name, model in (("cnn predictor", cnn), ("swin predictor", swin)):
        # pin the per-block period choices: they are discrete and their
        # recombination weights deliberately carry no gradient, so the
        # difference quotient must hold them fixed too
        plan = model.spectral_plan(batch)
        leaves = [model.params[key] for key in sorted(model.params)]
        results.append(_compare(
            name,
            lambda model=model, plan=plan: model.training_loss(batch, plan=plan),
            leaves,
            tolerance,
        ))
    return results


def run_all(seed=0):
    return check_operations(seed=seed) + check_models(seed=seed)
