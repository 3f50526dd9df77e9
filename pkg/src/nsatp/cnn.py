"""Convolutional backbone over period-folded sequences.

Each block re-detects the dominant periods of its input, folds the
sequence into one grid per period, and runs two inception-style layers
over each grid: parallel square convolutions with odd sizes 1, 3, ...,
2*n_kernels - 1 whose outputs are averaged (keeping the channel count),
sharing one bias, with a ReLU between the two layers.  Unfolded grids
re-enter as residuals and the per-period branches are blended with
softmax weights over the detected amplitudes.

The learned recovery pair is a positive scalar gain plus an elementwise
shift over the whole [T x d_model] sequence, applied either at the end
of every block or once after the last one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import spectral
from .model_base import ArrivalPredictor
from .stationarization import N_FEATURES

PLACEMENTS = ("inside_each_block", "after_last_block")


@dataclass(frozen=True)
class CnnModelConfig:
    n_past: int
    n_future: int = 5
    d_model: int = 16
    n_blocks: int = 2
    n_periods: int = 3
    n_kernels: int = 6
    mlp_hidden: int = 128
    compensation: bool = True
    compensation_placement: str = "after_last_block"
    stationarize: bool = True
    revin: bool = False
    epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("n_past", "n_future", "d_model", "n_blocks", "n_periods",
                     "n_kernels", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"config: {name} must be positive")
        if self.compensation_placement not in PLACEMENTS:
            raise ValueError(
                f"config: unknown compensation placement {self.compensation_placement!r}"
            )
        t = self.n_past + self.n_future
        if not self.n_periods < t / 2:
            raise ValueError(f"config: n_periods must be < T/2 = {t / 2}")
        if self.revin and not self.stationarize:
            raise ValueError("config: the learnable-affine variant requires stationarize")
        if self.epsilon <= 0:
            raise ValueError("config: epsilon must be positive")


@dataclass(frozen=True)
class CompensationFactors:
    """Recovery pair for one window: scalar gain, elementwise shift."""

    tau: ad.Tensor    # scalar, > 0
    delta: ad.Tensor  # [T x d_model]

    def __post_init__(self):
        if self.tau.values.size != 1:
            raise ValueError("factors: tau must be scalar")
        if float(self.tau.values) <= 0:
            raise ValueError("factors: tau must be positive")
        if self.delta.values.ndim != 2:
            raise ValueError("factors: delta must be [T x d_model]")


class CnnPredictor(ArrivalPredictor):
    def __init__(self, config, seed=0):
        if not isinstance(config, CnnModelConfig):
            raise TypeError("CnnPredictor needs a CnnModelConfig")
        super().__init__(config, seed)

    def _register_backbone(self):
        cfg = self.config
        d = cfg.d_model
        for layer in range(cfg.n_blocks):
            for half in (0, 1):
                prefix = f"block{layer}.inception{half}"
                for j in range(cfg.n_kernels):
                    size = 2 * j + 1
                    self._add_param(f"{prefix}.kernel{j}", (size, size, d, d))
                self._add_param(f"{prefix}.bias", (d,), init="zeros")
        if cfg.compensation:
            in_dim = cfg.n_past * N_FEATURES + N_FEATURES
            self._add_mlp("recover.scale", in_dim, 1)
            self._add_mlp("recover.shift", in_dim, (cfg.n_past + cfg.n_future) * d)

    # -- recovery factors ---------------------------------------------

    def _compensation(self, raw_past, mu, sigma):
        cfg = self.config
        if not cfg.compensation:
            return None
        scale_in, shift_in = self._compensation_inputs(raw_past, mu, sigma)
        b = raw_past.shape[0]
        t = cfg.n_past + cfg.n_future
        log_tau = ad.mlp_forward(scale_in, self._mlp_layers("recover.scale"))
        tau = ad.reshape(ad.exp(log_tau), (b, 1, 1))
        shift = ad.mlp_forward(shift_in, self._mlp_layers("recover.shift"))
        delta = ad.reshape(shift, (b, t, cfg.d_model))
        return tau, delta

    def estimate_compensation(self, raw_past, stats):
        """Recovery factors for one raw window and its statistics."""
        if not self.config.compensation:
            raise ValueError("recovery factors are disabled in this configuration")
        raw = np.asarray(raw_past, dtype=np.float64)
        tau_b, delta_b = self._compensation(raw[None], stats.mu[None], stats.sigma[None])
        return CompensationFactors(
            tau=ad.reshape(tau_b, ()),
            delta=ad.reshape(delta_b, delta_b.shape[1:]),
        )

    @staticmethod
    def _apply_compensation(x, comp):
        tau, delta = comp
        return ad.add(ad.mul(x, tau), delta)

    # -- backbone ------------------------------------------------------

    def _inception(self, grid, prefix):
        cfg = self.config
        total = None
        for j in range(cfg.n_kernels):
            y = ad.conv2d(grid, self.params[f"{prefix}.kernel{j}"])
            total = y if total is None else ad.add(total, y)
        mean = ad.mul(total, 1.0 / cfg.n_kernels)
        return ad.add(mean, self.params[f"{prefix}.bias"])

    def block_2d(self, x, block_index, decomposition=None):
        """One folded-grid block; [.. x T x d_model] in and out."""
        cfg = self.config
        t = x.shape[-2]
        decomp = decomposition
        if decomp is None:
            decomp = spectral.top_k_periods(x, cfg.n_periods)
        branches = []
        for f, p in zip(decomp.freqs, decomp.periods):
            grid = spectral.fold_2d(x, int(f), int(p))
            grid = self._inception(grid, f"block{block_index}.inception0")
            grid = ad.relu(grid)
            grid = self._inception(grid, f"block{block_index}.inception1")
            branches.append(ad.add(spectral.unfold_1d(grid, t), x))
        return spectral.weighted_recombine(branches, decomp.amplitudes)

    def _backbone(self, x, comp, plan=None, record=None):
        cfg = self.config
        inside = cfg.compensation_placement == "inside_each_block"
        for layer in range(cfg.n_blocks):
            decomp = plan[layer] if plan is not None else spectral.top_k_periods(
                x, cfg.n_periods
            )
            if record is not None:
                record.append(decomp)
            x = self.block_2d(x, layer, decomposition=decomp)
            if comp is not None and inside:
                x = self._apply_compensation(x, comp)
        if comp is not None and not inside:
            x = self._apply_compensation(x, comp)
        return x
