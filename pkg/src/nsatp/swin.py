"""Shifted-window attention backbone over period-folded sequences.

Each block folds its input into one grid per detected period and runs
two pre-norm attention halves over it: plain window tiles first, then
the same structure after a cyclic half-window roll so neighboring tiles
exchange information.  Attention scores can carry learned recovery
factors inside the softmax (a positive scalar gain on the logits and a
per-key-position shift) so the score distribution of the raw,
unstandardized window can be reproduced from normalized inputs.  A
second gain/shift pair acts on the backbone output as a whole.

Query/key/value projections are bias-free; that keeps the projections
strictly linear, which is what makes the in-softmax recovery exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from . import spectral
from .model_base import ArrivalPredictor
from .stationarization import N_FEATURES


@dataclass(frozen=True)
class SwinModelConfig:
    n_past: int
    n_future: int = 5
    d_model: int = 16
    d_k: Optional[int] = None        # defaults to d_model
    window: int = 2
    heads: int = 1
    n_blocks: int = 2
    n_periods: int = 3
    ffn_hidden: Optional[int] = None  # defaults to 2 * d_model
    mlp_hidden: int = 128
    inner_compensation: bool = True
    outer_compensation: bool = True
    stationarize: bool = True
    revin: bool = False
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.d_k is None:
            object.__setattr__(self, "d_k", self.d_model)
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", 2 * self.d_model)
        for name in ("n_past", "n_future", "d_model", "d_k", "n_blocks", "n_periods",
                     "ffn_hidden", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"config: {name} must be positive")
        if self.d_k > self.d_model:
            raise ValueError("config: d_k must not exceed d_model")
        if self.window < 2:
            raise ValueError("config: window must be >= 2")
        if self.heads != 1:
            raise ValueError("config: only a single attention head is supported")
        t = self.n_past + self.n_future
        if not self.n_periods < t / 2:
            raise ValueError(f"config: n_periods must be < T/2 = {t / 2}")
        if self.revin and not self.stationarize:
            raise ValueError("config: the learnable-affine variant requires stationarize")
        if self.epsilon <= 0:
            raise ValueError("config: epsilon must be positive")


@dataclass(frozen=True)
class SwinCompensation:
    """Recovery factors for one window; disabled pieces are None.

    attention_scale/_shift act inside the softmax (shift has one entry
    per window position); output_scale/_shift act on the final
    [T x d_model] sequence.
    """

    attention_scale: Optional[ad.Tensor]  # scalar, > 0
    attention_shift: Optional[ad.Tensor]  # [window^2]
    output_scale: Optional[ad.Tensor]     # scalar, > 0
    output_shift: Optional[ad.Tensor]     # [d_model]

    def __post_init__(self):
        for name in ("attention_scale", "output_scale"):
            tensor = getattr(self, name)
            if tensor is not None and float(tensor.values) <= 0:
                raise ValueError(f"factors: {name} must be positive")
        for name in ("attention_shift", "output_shift"):
            tensor = getattr(self, name)
            if tensor is not None and tensor.values.ndim != 1:
                raise ValueError(f"factors: {name} must be a vector")


class _BatchComp(NamedTuple):
    attn_scale: Optional[ad.Tensor]  # [B x 1 x 1 x 1]
    attn_shift: Optional[ad.Tensor]  # [B x 1 x 1 x window^2]
    out_scale: Optional[ad.Tensor]   # [B x 1 x 1]
    out_shift: Optional[ad.Tensor]   # [B x 1 x d_model]


# ---------------------------------------------------------------------------
# attention


def destationary_attention(query, key, value, scale=None, shift=None):
    """Row-softmax attention with recovery factors on the logits.

    query/key/value: [.. x n x d_k] with matching shapes.  Scores are
    scale * Q K^T plus a per-key-position shift broadcast down the rows,
    all divided by sqrt(d_k); scale=None / shift=None give the plain
    attention of the base model.  A 1-D shift of length n is treated as
    one row; higher-rank tensors must already broadcast against the
    [.. x n x n] score array.
    """
    query = query if isinstance(query, ad.Tensor) else ad.constant(query)
    key = key if isinstance(key, ad.Tensor) else ad.constant(key)
    value = value if isinstance(value, ad.Tensor) else ad.constant(value)
    if not (query.shape == key.shape == value.shape):
        raise ValueError(
            f"attention: shape mismatch {query.shape} / {key.shape} / {value.shape}"
        )
    d_k = query.shape[-1]
    swap = tuple(range(key.ndim - 2)) + (key.ndim - 1, key.ndim - 2)
    scores = ad.matmul(query, ad.transpose(key, swap))
    if scale is not None:
        scores = ad.mul(scores, scale)
    if shift is not None:
        shift = shift if isinstance(shift, ad.Tensor) else ad.constant(shift)
        if shift.ndim == 1:
            shift = ad.reshape(shift, (1, shift.shape[0]))
        scores = ad.add(scores, shift)
    weights = ad.softmax_rows(ad.mul(scores, 1.0 / math.sqrt(d_k)))
    return ad.matmul(weights, value)


# ---------------------------------------------------------------------------
# window tiling


@dataclass(frozen=True)
class WindowLayout:
    rows: int
    cols: int
    window: int
    shift: bool
    padded_rows: int
    padded_cols: int

    @property
    def n_windows(self):
        return (self.padded_rows // self.window) * (self.padded_cols // self.window)


def _tile(grid, window):
    """[.. x H x W x d] -> [.. x nW x window^2 x d], row-major tiles."""
    *lead, h, w, d = grid.shape
    k = len(lead)
    g = ad.reshape(grid, (*lead, h // window, window, w // window, window, d))
    g = ad.transpose(g, tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
    return ad.reshape(g, (*lead, (h // window) * (w // window), window * window, d))


def _untile(tiles, h, w, window):
    """Inverse of :func:`_tile` for a padded (h, w) grid."""
    *lead, _, _, d = tiles.shape
    k = len(lead)
    g = ad.reshape(tiles, (*lead, h // window, w // window, window, window, d))
    g = ad.transpose(g, tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
    return ad.reshape(g, (*lead, h, w, d))


def window_partition(x, window, shift=False):
    """Split [f x p x d] into non-overlapping [window^2 x d] tiles.

    The grid is zero-padded up to window multiples; with shift=True the
    padded grid is first rolled cyclically by -floor(window/2) on both
    axes.  Returns (windows, layout); :func:`window_combine` inverts the
    whole operation exactly.
    """
    x = x if isinstance(x, ad.Tensor) else ad.constant(x)
    if x.ndim != 3:
        raise ValueError(f"window_partition: expected [f x p x d], got shape {x.shape}")
    rows, cols, d = x.shape
    padded_rows = -(-rows // window) * window
    padded_cols = -(-cols // window) * window
    layout = WindowLayout(rows, cols, window, bool(shift), padded_rows, padded_cols)
    grid = ad.pad_grid(x, padded_rows, padded_cols)
    if shift:
        s = window // 2
        grid = ad.roll_grid(grid, -s, -s)
    tiles = _tile(grid, window)
    n = window * window
    flat = ad.reshape(tiles, (layout.n_windows * n, d))
    return [ad.take_rows(flat, i * n, (i + 1) * n) for i in range(layout.n_windows)], layout


def window_combine(windows, layout):
    """Reassemble :func:`window_partition` output, dropping pad and shift."""
    if len(windows) != layout.n_windows:
        raise ValueError(
            f"window_combine: got {len(windows)} windows, layout holds {layout.n_windows}"
        )
    n = layout.window * layout.window
    d = windows[0].shape[-1]
    flat = ad.concat(windows, axis=-2)
    tiles = ad.reshape(flat, (layout.n_windows, n, d))
    grid = _untile(tiles, layout.padded_rows, layout.padded_cols, layout.window)
    if layout.shift:
        s = layout.window // 2
        grid = ad.roll_grid(grid, s, s)
    return ad.crop_grid(grid, layout.rows, layout.cols)


# ---------------------------------------------------------------------------
# predictor


class SwinPredictor(ArrivalPredictor):
    def __init__(self, config, seed=0):
        if not isinstance(config, SwinModelConfig):
            raise TypeError("SwinPredictor needs a SwinModelConfig")
        super().__init__(config, seed)

    def _register_backbone(self):
        cfg = self.config
        d, dk = cfg.d_model, cfg.d_k
        for layer in range(cfg.n_blocks):
            for half in ("win", "shifted"):
                prefix = f"block{layer}.{half}"
                self._add_param(f"{prefix}.norm1.gain", (d,), init="ones")
                self._add_param(f"{prefix}.norm1.bias", (d,), init="zeros")
                # bias-free q/k/v keeps the projections linear
                self._add_param(f"{prefix}.query", (d, dk))
                self._add_param(f"{prefix}.key", (d, dk))
                self._add_param(f"{prefix}.value", (d, dk))
                self._add_param(f"{prefix}.out", (dk, d))
                self._add_param(f"{prefix}.out_bias", (d,), init="zeros")
                self._add_param(f"{prefix}.norm2.gain", (d,), init="ones")
                self._add_param(f"{prefix}.norm2.bias", (d,), init="zeros")
                self._add_param(f"{prefix}.ffn.w0", (d, cfg.ffn_hidden))
                self._add_param(f"{prefix}.ffn.b0", (cfg.ffn_hidden,), init="zeros")
                self._add_param(f"{prefix}.ffn.w1", (cfg.ffn_hidden, d))
                self._add_param(f"{prefix}.ffn.b1", (d,), init="zeros")
        in_dim = cfg.n_past * N_FEATURES + N_FEATURES
        if cfg.inner_compensation:
            self._add_mlp("recover.attention_scale", in_dim, 1)
            self._add_mlp("recover.attention_shift", in_dim, cfg.window * cfg.window)
        if cfg.outer_compensation:
            self._add_mlp("recover.output_scale", in_dim, 1)
            self._add_mlp("recover.output_shift", in_dim, d)

    # -- recovery factors ---------------------------------------------

    def _compensation(self, raw_past, mu, sigma):
        cfg = self.config
        if not (cfg.inner_compensation or cfg.outer_compensation):
            return None
        scale_in, shift_in = self._compensation_inputs(raw_past, mu, sigma)
        b = raw_past.shape[0]
        attn_scale = attn_shift = out_scale = out_shift = None
        if cfg.inner_compensation:
            log_scale = ad.mlp_forward(scale_in, self._mlp_layers("recover.attention_scale"))
            attn_scale = ad.reshape(ad.exp(log_scale), (b, 1, 1, 1))
            shift = ad.mlp_forward(shift_in, self._mlp_layers("recover.attention_shift"))
            attn_shift = ad.reshape(shift, (b, 1, 1, cfg.window * cfg.window))
        if cfg.outer_compensation:
            log_scale = ad.mlp_forward(scale_in, self._mlp_layers("recover.output_scale"))
            out_scale = ad.reshape(ad.exp(log_scale), (b, 1, 1))
            shift = ad.mlp_forward(shift_in, self._mlp_layers("recover.output_shift"))
            out_shift = ad.reshape(shift, (b, 1, cfg.d_model))
        return _BatchComp(attn_scale, attn_shift, out_scale, out_shift)

    def estimate_compensation(self, raw_past, stats):
        """Recovery factors for one raw window and its statistics."""
        cfg = self.config
        if not (cfg.inner_compensation or cfg.outer_compensation):
            raise ValueError("recovery factors are disabled in this configuration")
        raw = np.asarray(raw_past, dtype=np.float64)
        comp = self._compensation(raw[None], stats.mu[None], stats.sigma[None])

        def scalar(t):
            return None if t is None else ad.reshape(t, ())

        def vector(t):
            return None if t is None else ad.reshape(t, (t.shape[-1],))

        return SwinCompensation(
            attention_scale=scalar(comp.attn_scale),
            attention_shift=vector(comp.attn_shift),
            output_scale=scalar(comp.out_scale),
            output_shift=vector(comp.out_shift),
        )

    # -- backbone ------------------------------------------------------

    def _sublayer(self, part, prefix, comp):
        """Pre-norm attention + feed-forward over tiles [.. x n x d]."""
        p = self.params
        normed = ad.layer_norm(part, p[f"{prefix}.norm1.gain"], p[f"{prefix}.norm1.bias"])
        q = ad.matmul(normed, p[f"{prefix}.query"])
        k = ad.matmul(normed, p[f"{prefix}.key"])
        v = ad.matmul(normed, p[f"{prefix}.value"])
        if comp is not None and comp.attn_scale is not None:
            attended = destationary_attention(q, k, v, comp.attn_scale, comp.attn_shift)
        else:
            attended = destationary_attention(q, k, v)
        attended = ad.linear(attended, p[f"{prefix}.out"], p[f"{prefix}.out_bias"])
        z = ad.add(part, attended)
        normed = ad.layer_norm(z, p[f"{prefix}.norm2.gain"], p[f"{prefix}.norm2.bias"])
        ffn = ad.mlp_forward(
            normed,
            [(p[f"{prefix}.ffn.w0"], p[f"{prefix}.ffn.b0"]),
             (p[f"{prefix}.ffn.w1"], p[f"{prefix}.ffn.b1"])],
        )
        return ad.add(z, ffn)

    def swin_block(self, x, block_index, comp=None, decomposition=None):
        """One folded-grid block; [.. x T x d_model] in and out."""
        cfg = self.config
        t = x.shape[-2]
        w = cfg.window
        s = w // 2
        decomp = decomposition
        if decomp is None:
            decomp = spectral.top_k_periods(x, cfg.n_periods)
        branches = []
        for f, p in zip(decomp.freqs, decomp.periods):
            f, p = int(f), int(p)
            grid = spectral.fold_2d(x, f, p)
            h_pad = -(-f // w) * w
            w_pad = -(-p // w) * w
            grid = ad.pad_grid(grid, h_pad, w_pad)
            part = _tile(grid, w)
            part = self._sublayer(part, f"block{block_index}.win", comp)
            grid = _untile(part, h_pad, w_pad, w)
            grid = ad.roll_grid(grid, -s, -s)
            part = _tile(grid, w)
            part = self._sublayer(part, f"block{block_index}.shifted", comp)
            grid = _untile(part, h_pad, w_pad, w)
            grid = ad.roll_grid(grid, s, s)
            grid = ad.crop_grid(grid, f, p)
            branches.append(ad.add(spectral.unfold_1d(grid, t), x))
        return spectral.weighted_recombine(branches, decomp.amplitudes)

    def _backbone(self, x, comp, plan=None, record=None):
        for layer in range(self.config.n_blocks):
            decomp = plan[layer] if plan is not None else spectral.top_k_periods(
                x, self.config.n_periods
            )
            if record is not None:
                record.append(decomp)
            x = self.swin_block(x, layer, comp, decomposition=decomp)
        if comp is not None and comp.out_scale is not None:
            x = ad.add(ad.mul(x, comp.out_scale), comp.out_shift)
        return x
