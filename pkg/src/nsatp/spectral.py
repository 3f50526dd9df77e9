"""Period detection and 1D-to-2D sequence folding.

A length-T feature sequence is scanned for its dominant periodicities via
the discrete Fourier transform; for each selected frequency f the
sequence is folded row-major into an [f x p] grid so that positions
within one period and positions across periods become the two axes of an
image.  Folding and unfolding are exact inverses and differentiable; the
amplitude weights used to recombine per-period branches are treated as
constants (no gradient through the spectrum).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class PeriodDecomposition:
    """Top-k periodicities of a sequence.

    freqs: distinct DFT bin indices f_i >= 1, sorted by descending amplitude
    periods: p_i = ceil(T / f_i)
    amplitudes: channel-mean DFT magnitude at each f_i
    """

    freqs: np.ndarray
    periods: np.ndarray
    amplitudes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "freqs", np.asarray(self.freqs, dtype=np.int64))
        object.__setattr__(self, "periods", np.asarray(self.periods, dtype=np.int64))
        object.__setattr__(self, "amplitudes", np.asarray(self.amplitudes, dtype=np.float64))
        if not (self.freqs.shape == self.periods.shape == self.amplitudes.shape):
            raise ValueError("decomposition: freqs, periods, amplitudes must align")
        if self.freqs.size == 0:
            raise ValueError("decomposition: empty")
        if np.any(self.freqs < 1) or len(set(self.freqs.tolist())) != self.freqs.size:
            raise ValueError("decomposition: freqs must be distinct and >= 1")
        if np.any(self.amplitudes[:-1] < self.amplitudes[1:] - 1e-12):
            raise ValueError("decomposition: amplitudes must be descending")


def dft(x):
    """Naive O(T^2) discrete Fourier transform of a vector.

    Y[k] = sum_t x[t] * exp(-2*pi*i*k*t / T).
    """
    x = np.asarray(x)
    t = x.shape[0]
    idx = np.arange(t)
    twiddle = np.exp(-2j * np.pi * np.outer(idx, idx) / t)
    return twiddle @ x.astype(np.complex128)


def _dft_columns(values):
    """DFT of every channel of [T x d] (or [B x T x d], per batch element)."""
    t = values.shape[-2]
    idx = np.arange(t)
    twiddle = np.exp(-2j * np.pi * np.outer(idx, idx) / t)
    return np.einsum("kt,...td->...kd", twiddle, values.astype(np.complex128))


def amplitude_spectrum(values):
    """Channel-mean DFT magnitude per non-DC bin, up to the folding limit.

    values: [T x d] or [B x T x d]; batched input is averaged over the
    batch as well, giving one spectrum.  Returns (bins, amps) with bins
    = 1 .. floor(T/2).
    """
    values = np.asarray(values, dtype=np.float64)
    t = values.shape[-2]
    mags = np.abs(_dft_columns(values))
    axes = tuple(i for i in range(mags.ndim) if i != mags.ndim - 2)
    per_bin = mags.mean(axis=axes)
    bins = np.arange(1, t // 2 + 1)
    return bins, per_bin[1 : t // 2 + 1]


def top_k_periods(x, k):
    """Select the k strongest periodicities of a sequence.

    x: Tensor or array [T x d_model] (a leading batch axis is allowed and
    averaged into one shared spectrum).  Amplitude per bin is the mean
    DFT magnitude over channels; the DC bin is excluded; ties break
    toward the lower frequency.  Requires 1 <= k < T/2.
    """
    values = x.values if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)
    t = values.shape[-2]
    if not 1 <= k < t / 2:
        raise ValueError(f"top_k_periods: need 1 <= k < T/2, got k={k}, T={t}")
    bins, amps = amplitude_spectrum(values)
    order = np.argsort(-amps, kind="stable")[:k]
    freqs = bins[order]
    periods = -(-t // freqs)  # ceil(T / f)
    return PeriodDecomposition(freqs=freqs, periods=periods, amplitudes=amps[order])


def fold_2d(x, f, p):
    """Fold [.. x T x d] row-major into [.. x f x p x d], zero-padding to f*p.

    Element (r, c) of the grid is x[p*r + c]; positions past T are zero.
    """
    x = x if isinstance(x, ad.Tensor) else ad.constant(x)
    t, d = x.shape[-2], x.shape[-1]
    if f * p < t:
        raise ValueError(f"fold_2d: f*p = {f * p} < T = {t}")
    padded = ad.pad_rows(x, f * p - t)
    return ad.reshape(padded, x.shape[:-2] + (f, p, d))


def unfold_1d(grid, t):
    """Inverse of :func:`fold_2d`: flatten the grid and drop the padding."""
    grid = grid if isinstance(grid, ad.Tensor) else ad.constant(grid)
    f, p, d = grid.shape[-3], grid.shape[-2], grid.shape[-1]
    if f * p < t:
        raise ValueError(f"unfold_1d: grid holds {f * p} rows < T = {t}")
    flat = ad.reshape(grid, grid.shape[:-3] + (f * p, d))
    return ad.take_rows(flat, 0, t)


def weighted_recombine(branches, amplitudes):
    """Weighted sum of per-period branches.

    Weights are softmax(amplitudes) computed outside the autodiff graph;
    gradients flow only through the branches.
    """
    if len(branches) == 0:
        raise ValueError("weighted_recombine: no branches")
    amplitudes = np.asarray(amplitudes, dtype=np.float64)
    if amplitudes.shape != (len(branches),):
        raise ValueError("weighted_recombine: one amplitude per branch required")
    shapes = {b.shape for b in branches}
    if len(shapes) != 1:
        raise ValueError(f"weighted_recombine: branch shapes differ: {shapes}")
    shifted = amplitudes - amplitudes.max()
    e = np.exp(shifted)
    weights = e / e.sum()
    out = ad.mul(branches[0], float(weights[0]))
    for branch, w in zip(branches[1:], weights[1:]):
        out = ad.add(out, ad.mul(branch, float(w)))
    return out
