"""Per-window feature standardization along the time axis.

Each sliding window is normalized independently: every feature column is
shifted by its own mean and scaled by its own standard deviation, both
computed over the window's rows.  The saved statistics invert the map on
the delay channel when predictions come back out of the network.

Collapsing each window onto zero mean / unit variance also collapses
genuinely different operating conditions onto the same input; the
``collision_score`` helper quantifies that loss of distinguishability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# feature column layout for one stop:
#   0 link length into the stop (m)
#   1 observed travel time over that link (s)
#   2 arrival delay at the stop (s)
#   3 signalized-intersection flag
#   4 mean travel time over that link in the training data (s)
FEATURE_NAMES = ("link_length_m", "travel_time_s", "delay_s", "signal_flag", "mean_travel_time_s")
N_FEATURES = len(FEATURE_NAMES)
DELAY_CHANNEL = 2

# context column layout (not normalized, never denormalized)
CONTEXT_NAMES = ("peak_flag", "weekday_flag")
N_CONTEXT = len(CONTEXT_NAMES)

DEFAULT_EPSILON = 1e-5


@dataclass(frozen=True)
class StationarizationStats:
    """Per-feature window statistics needed to undo the normalization.

    sigma is floored at epsilon, so near-constant columns divide by
    epsilon instead of blowing up.
    """

    mu: np.ndarray
    sigma: np.ndarray
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=np.float64))
        if self.mu.ndim != 1 or self.sigma.shape != self.mu.shape:
            raise ValueError("stats: mu and sigma must be equal-length vectors")
        if self.epsilon <= 0:
            raise ValueError("stats: epsilon must be positive")
        if np.any(self.sigma < self.epsilon):
            raise ValueError("stats: sigma below epsilon floor")


@dataclass(frozen=True)
class TemporalSample:
    """One training window: observed past stops and the future to predict.

    past_features:        [N_p x C] raw per-stop features (layout above)
    context:              [(N_p + N_f) x N_c] binary flags per stop
                          (column 0 peak hour, column 1 weekday)
    future_schedule:      [N_f] scheduled arrival times, s since service midnight
    future_delay_truth:   [N_f] true delays (s)
    future_arrival_truth: [N_f] true arrival times (s), schedule + delay
    """

    past_features: np.ndarray
    context: np.ndarray
    future_schedule: np.ndarray
    future_delay_truth: np.ndarray
    future_arrival_truth: np.ndarray

    def __post_init__(self):
        for name in (
            "past_features",
            "context",
            "future_schedule",
            "future_delay_truth",
            "future_arrival_truth",
        ):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.past_features.ndim != 2:
            raise ValueError("sample: past_features must be [N_p x C]")
        n_f = self.future_schedule.shape[0]
        if self.future_delay_truth.shape != (n_f,) or self.future_arrival_truth.shape != (n_f,):
            raise ValueError("sample: future vectors must share length N_f")
        if self.context.shape != (self.past_features.shape[0] + n_f, N_CONTEXT):
            raise ValueError("sample: context must be [(N_p + N_f) x N_c]")
        if not np.all((self.context == 0.0) | (self.context == 1.0)):
            raise ValueError("sample: context flags must be binary")
        if not np.allclose(
            self.future_arrival_truth, self.future_schedule + self.future_delay_truth, atol=1e-6
        ):
            raise ValueError("sample: arrival truth must equal schedule + delay truth")

    @property
    def n_past(self):
        return self.past_features.shape[0]

    @property
    def n_future(self):
        return self.future_schedule.shape[0]


def normalize(window, epsilon=DEFAULT_EPSILON):
    """Standardize each feature column of a window over its rows.

    Returns (normalized, stats).  Means and variances are taken over the
    window's N_p rows (population variance).  Columns whose raw standard
    deviation falls below ``epsilon`` are scaled by ``epsilon`` instead.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise ValueError(f"normalize: expected [N_p x C] window, got shape {window.shape}")
    if window.shape[0] == 0:
        raise ValueError("normalize: empty window")
    mu = window.mean(axis=0)
    sigma = np.maximum(window.std(axis=0), epsilon)
    normalized = (window - mu) / sigma
    return normalized, StationarizationStats(mu=mu, sigma=sigma, epsilon=epsilon)


def normalize_batch(windows, epsilon=DEFAULT_EPSILON):
    """Vectorized :func:`normalize` over a batch.

    windows: [B x N_p x C].  Returns (normalized, mu [B x C], sigma [B x C]).
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[1] == 0:
        raise ValueError(f"normalize_batch: expected [B x N_p x C], got shape {windows.shape}")
    mu = windows.mean(axis=1)
    sigma = np.maximum(windows.std(axis=1), epsilon)
    normalized = (windows - mu[:, None, :]) / sigma[:, None, :]
    return normalized, mu, sigma


def denormalize_delay(predicted, stats):
    """Map normalized delay predictions back to seconds.

    predicted: [N_f] on the normalized scale.  Applies the delay
    channel's saved scale and shift.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    return stats.sigma[DELAY_CHANNEL] * predicted + stats.mu[DELAY_CHANNEL]


def collision_score(window_a, window_b, epsilon=DEFAULT_EPSILON):
    """Frobenius distance between two windows after each is standardized.

    A score near zero for raw windows that are far apart means the
    normalization has erased the difference between them; affine copies
    a * X + b of the same window collide exactly.
    """
    a = np.asarray(window_a, dtype=np.float64)
    b = np.asarray(window_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"collision_score: shape mismatch {a.shape} vs {b.shape}")
    norm_a, _ = normalize(a, epsilon)
    norm_b, _ = normalize(b, epsilon)
    return float(np.linalg.norm(norm_a - norm_b))
