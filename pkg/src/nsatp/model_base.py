"""Shared pipeline of the two arrival-time predictors.

Both backbones run the same outer loop: standardize each observed past
window, embed past rows plus zero future placeholders with a kernel-3
temporal convolution, push the sequence through a stack of
period-folded 2D blocks (backbone-specific), project back to a single
channel, and undo the normalization on the delay channel.  The learned
recovery factors that counteract the information loss of per-window
standardization are estimated from the raw window and its statistics
by small MLPs; their output layers start at zero, so a freshly
initialized model is exactly the plain backbone.

Every parameter draws from its own named random stream, which keeps
shared weights identical across model variants that differ only in
which extra parameters they own.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .stationarization import DELAY_CHANNEL, N_CONTEXT, N_FEATURES, normalize_batch

EMBED_KERNEL_SIZE = 3


@dataclass(frozen=True)
class SampleBatch:
    """Stacked sample arrays with a leading batch axis."""

    past_features: np.ndarray    # [B x N_p x C], raw scale
    context: np.ndarray          # [B x (N_p + N_f) x N_c]
    future_schedule: np.ndarray  # [B x N_f]
    future_delay_truth: np.ndarray
    future_arrival_truth: np.ndarray

    @classmethod
    def from_samples(cls, samples):
        if not samples:
            raise ValueError("batch: no samples")
        n_past = samples[0].n_past
        n_future = samples[0].n_future
        for s in samples:
            if s.n_past != n_past or s.n_future != n_future:
                raise ValueError("batch: samples must share window sizes")
        return cls(
            past_features=np.stack([s.past_features for s in samples]),
            context=np.stack([s.context for s in samples]),
            future_schedule=np.stack([s.future_schedule for s in samples]),
            future_delay_truth=np.stack([s.future_delay_truth for s in samples]),
            future_arrival_truth=np.stack([s.future_arrival_truth for s in samples]),
        )

    def take(self, indices):
        indices = np.asarray(indices, dtype=np.intp)
        return SampleBatch(
            past_features=self.past_features[indices],
            context=self.context[indices],
            future_schedule=self.future_schedule[indices],
            future_delay_truth=self.future_delay_truth[indices],
            future_arrival_truth=self.future_arrival_truth[indices],
        )

    def __len__(self):
        return self.past_features.shape[0]

    @property
    def n_past(self):
        return self.past_features.shape[1]

    @property
    def n_future(self):
        return self.future_schedule.shape[1]


class ArrivalPredictor:
    """Base class: owns the parameter table and the outer pipeline.

    Subclasses register their block parameters in ``_register_backbone``
    and implement ``_backbone`` / ``_compensation``.
    """

    def __init__(self, config, seed=0):
        self.config = config
        self.seed = int(seed)
        self.params = {}
        in_channels = N_FEATURES + N_CONTEXT
        self._add_param("embed.kernels", (EMBED_KERNEL_SIZE, in_channels, config.d_model))
        self._add_param("embed.bias", (config.d_model,), init="zeros")
        self._add_param("project.weight", (config.d_model, 1))
        self._add_param("project.bias", (1,), init="zeros")
        if config.revin:
            self._add_param("revin.gain", (N_FEATURES,), init="ones")
            self._add_param("revin.bias", (N_FEATURES,), init="zeros")
        self._register_backbone()

    # -- parameter registration ---------------------------------------

    def _add_param(self, name, shape, init="glorot"):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if init == "zeros":
            values = np.zeros(shape)
        elif init == "ones":
            values = np.ones(shape)
        else:
            values = ad.glorot_uniform(ad.seeded_rng(self.seed, name), shape)
        self.params[name] = ad.parameter(values)
        return self.params[name]

    def _add_mlp(self, prefix, in_dim, out_dim):
        """Two ReLU hidden layers; the output layer starts at zero so the
        stack is the constant 0 until trained."""
        hidden = self.config.mlp_hidden
        dims = (in_dim, hidden, hidden, out_dim)
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            self._add_param(
                f"{prefix}.w{i}", (dims[i], dims[i + 1]), init="zeros" if last else "glorot"
            )
            self._add_param(f"{prefix}.b{i}", (dims[i + 1],), init="zeros")

    def _mlp_layers(self, prefix):
        layers = []
        i = 0
        while f"{prefix}.w{i}" in self.params:
            layers.append((self.params[f"{prefix}.w{i}"], self.params[f"{prefix}.b{i}"]))
            i += 1
        return layers

    def n_parameters(self):
        return sum(p.values.size for p in self.params.values())

    # -- state snapshots (early stopping, checkpoints) ----------------

    def export_values(self):
        return {name: p.values.copy() for name, p in self.params.items()}

    def load_values(self, values):
        if set(values) != set(self.params):
            missing = sorted(set(self.params) - set(values))
            extra = sorted(set(values) - set(self.params))
            raise ValueError(f"parameter name mismatch: missing {missing}, extra {extra}")
        for name, p in self.params.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != p.values.shape:
                raise ValueError(
                    f"parameter {name!r}: shape {arr.shape} != expected {p.values.shape}"
                )
            p.values = arr.copy()

    # -- subclass hooks -----------------------------------------------

    def _register_backbone(self):
        raise NotImplementedError

    def _backbone(self, x, comp, plan=None, record=None):
        raise NotImplementedError

    def _compensation(self, raw_past, mu, sigma):
        """Model-specific recovery factors for a raw batch, or None."""
        raise NotImplementedError

    # -- shared forward pieces ----------------------------------------

    def _compensation_inputs(self, raw_past, mu, sigma):
        """MLP inputs: the flattened raw window joined with its stats."""
        flat = raw_past.reshape(raw_past.shape[0], -1)
        scale_in = ad.constant(np.concatenate([flat, sigma], axis=1))
        shift_in = ad.constant(np.concatenate([flat, mu], axis=1))
        return scale_in, shift_in

    def embed_batch(self, model_input, context):
        """Conv1d feature embedding over [B x T x (C + N_c)].

        model_input: [B x N_p x C] (normalized unless standardization is
        off); future rows enter as zero placeholders while their context
        rows stay real.
        """
        cfg = self.config
        b, n_past, channels = model_input.shape
        t = cfg.n_past + cfg.n_future
        feat = np.zeros((b, t, channels))
        feat[:, :n_past, :] = model_input
        x = ad.constant(feat)
        if cfg.revin:
            x = ad.add(ad.mul(x, self.params["revin.gain"]), self.params["revin.bias"])
        x = ad.concat([x, ad.constant(context)], axis=-1)
        x = ad.conv1d(x, self.params["embed.kernels"])
        return ad.add(x, self.params["embed.bias"])

    def embed(self, normalized_past, context):
        """Single-window embedding: [N_p x C], [T x N_c] -> [T x d_model]."""
        normalized_past = np.asarray(normalized_past, dtype=np.float64)
        context = np.asarray(context, dtype=np.float64)
        out = self.embed_batch(normalized_past[None], context[None])
        return ad.reshape(out, out.shape[1:])

    def _revin_restore(self, y):
        """Invert the learned per-feature affine on the delay channel."""
        gain = ad.reshape(self.params["revin.gain"], (N_FEATURES, 1))
        bias = ad.reshape(self.params["revin.bias"], (N_FEATURES, 1))
        g = ad.reshape(ad.take_rows(gain, DELAY_CHANNEL, DELAY_CHANNEL + 1), (1,))
        b = ad.reshape(ad.take_rows(bias, DELAY_CHANNEL, DELAY_CHANNEL + 1), (1,))
        return ad.mul(ad.add(y, ad.mul(b, -1.0)), ad.reciprocal(g))

    def forward_batch(self, batch, plan=None, record=None):
        """Predicted delays on the model scale (normalized unless
        standardization is off): Tensor [B x N_f].

        ``plan`` pins the per-block period decompositions (see
        :meth:`spectral_plan`); ``record`` is a list that collects the
        decompositions each block actually used.
        """
        cfg = self.config
        if batch.n_past != cfg.n_past or batch.n_future != cfg.n_future:
            raise ValueError(
                f"batch windows ({batch.n_past}, {batch.n_future}) do not match the "
                f"model ({cfg.n_past}, {cfg.n_future})"
            )
        raw = batch.past_features
        normalized, mu, sigma = normalize_batch(raw, cfg.epsilon)
        model_input = normalized if cfg.stationarize else raw
        comp = self._compensation(raw, mu, sigma)
        x = self.embed_batch(model_input, batch.context)
        x = self._backbone(x, comp, plan=plan, record=record)
        y = ad.linear(x, self.params["project.weight"], self.params["project.bias"])
        y = ad.take_rows(y, cfg.n_past, cfg.n_past + cfg.n_future)
        y = ad.reshape(y, (len(batch), cfg.n_future))
        if cfg.revin:
            y = self._revin_restore(y)
        return y

    def delay_target(self, batch):
        """Training target on the same scale as ``forward_batch``."""
        if not self.config.stationarize:
            return batch.future_delay_truth
        _, mu, sigma = normalize_batch(batch.past_features, self.config.epsilon)
        col = [DELAY_CHANNEL]
        return (batch.future_delay_truth - mu[:, col]) / sigma[:, col]

    def training_loss(self, batch, plan=None):
        pred = self.forward_batch(batch, plan=plan)
        return ad.mse_loss(pred, ad.constant(self.delay_target(batch)))

    def spectral_plan(self, batch):
        """Period decompositions each block picks for this batch.

        Period selection and the recombination weights derived from it
        are discrete/stop-gradient quantities.  Passing the returned
        plan back into :meth:`forward_batch` holds them fixed, which is
        what a finite-difference comparison against backpropagation
        needs: backward differentiates the forward pass with these
        quantities frozen at their recorded values.
        """
        recorded = []
        self.forward_batch(batch, record=recorded)
        return recorded

    def predict_batch(self, batch):
        """Predicted arrival times in seconds: ndarray [B x N_f]."""
        out = self.forward_batch(batch).values
        if not np.all(np.isfinite(out)):
            raise RuntimeError("diverged")
        if self.config.stationarize:
            _, mu, sigma = normalize_batch(batch.past_features, self.config.epsilon)
            col = [DELAY_CHANNEL]
            delay = sigma[:, col] * out + mu[:, col]
        else:
            delay = out
        return delay + batch.future_schedule

    def forward(self, sample):
        """Predicted arrival times for one sample: ndarray [N_f]."""
        return self.predict_batch(SampleBatch.from_samples([sample]))[0]
