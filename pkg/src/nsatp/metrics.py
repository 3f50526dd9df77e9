"""Stationarity testing and prediction-error metrics.

The augmented Dickey-Fuller regression

    dy_t = alpha + beta*t + gamma*y_{t-1} + sum_i delta_i * dy_{t-i} + e_t

is fit by ordinary least squares for every lag order p up to a bound,
the lag is chosen by AIC on a common sample, and the reported statistic
is gamma_hat / SE(gamma_hat): more negative means more stationary.

Error metrics are RMSE, MAE, and MAPE (percent) on arrival times, with
per-horizon breakdowns whose aggregates reproduce the totals exactly.
The ADF ratio divides the statistic of a predicted sequence by that of
the matching ground-truth sequence; values above 1 mean the prediction
is more stationary than reality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

REGRESSION_KINDS = ("constant", "constant_and_trend")
MIN_ADF_OBSERVATIONS = 20


@dataclass(frozen=True)
class AdfResult:
    statistic: float
    gamma_hat: float
    lags: int
    aic: float
    regression_kind: str

    def __post_init__(self):
        if self.lags < 0:
            raise ValueError("adf result: lags must be >= 0")
        if self.regression_kind not in REGRESSION_KINDS:
            raise ValueError(f"adf result: unknown regression kind {self.regression_kind!r}")


@dataclass(frozen=True)
class MetricsReport:
    """Totals plus per-step breakdowns over the prediction horizon."""

    rmse_s: float
    mae_s: float
    mape_pct: float
    rmse_per_horizon: np.ndarray
    mae_per_horizon: np.ndarray
    mape_per_horizon: np.ndarray

    def __post_init__(self):
        for name in ("rmse_per_horizon", "mae_per_horizon", "mape_per_horizon"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if min(self.rmse_s, self.mae_s, self.mape_pct) < 0:
            raise ValueError("metrics: totals must be non-negative")

    @property
    def n_future(self):
        return self.rmse_per_horizon.shape[0]


# ---------------------------------------------------------------------------
# ordinary least squares via normal equations


def _ols(design, target):
    """Solve min ||X b - y||^2 through the normal equations.

    Returns (beta, ssr, xtx_inv).  A rank-deficient design raises
    "collinear".
    """
    n, k = design.shape
    if np.linalg.matrix_rank(design) < k:
        raise ValueError("collinear design matrix")
    xtx = design.T @ design
    beta = np.linalg.solve(xtx, design.T @ target)
    resid = target - design @ beta
    ssr = float(resid @ resid)
    xtx_inv = np.linalg.inv(xtx)
    return beta, ssr, xtx_inv


def _adf_design(y, p, kind, offset):
    """Design matrix and target for lag order p, rows starting at ``offset``.

    Columns: [1, trend, y_{t-1}, dy_{t-1}, ..., dy_{t-p}]; the level
    coefficient gamma sits right after the deterministic terms.
    """
    dy = np.diff(y)
    rows = np.arange(offset, dy.shape[0])
    n_det = 2 if kind == "constant_and_trend" else 1
    cols = [np.ones(rows.shape[0])]
    if kind == "constant_and_trend":
        cols.append(rows.astype(np.float64) + 1.0)
    cols.append(y[rows])  # y_{t-1} for target dy[t]
    for i in range(1, p + 1):
        cols.append(dy[rows - i])
    return np.column_stack(cols), dy[rows], n_det


def default_max_lag(n, kind="constant_and_trend"):
    """Schwert bound, capped so the regression keeps spare degrees of
    freedom."""
    schwert = int(np.floor(12.0 * (n / 100.0) ** 0.25))
    n_det = 2 if kind == "constant_and_trend" else 1
    return max(0, min(schwert, n // 2 - n_det - 1))


def adf_test(y, max_lag=None, kind="constant_and_trend"):
    """Augmented Dickey-Fuller statistic with AIC lag selection.

    Lag candidates 0..max_lag are compared on a common sample (so their
    AICs are commensurable), then the chosen order is refit on its own
    maximal sample.  AIC = n*ln(SSR/n) + 2*(number of parameters).
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = y.shape[0]
    if kind not in REGRESSION_KINDS:
        raise ValueError(f"adf_test: unknown regression kind {kind!r}")
    if n < MIN_ADF_OBSERVATIONS:
        raise ValueError(f"adf_test: need at least {MIN_ADF_OBSERVATIONS} observations, got {n}")
    if max_lag is None:
        max_lag = default_max_lag(n, kind)
    if max_lag < 0 or max_lag >= n - 2:
        raise ValueError(f"adf_test: max_lag {max_lag} out of range for n={n}")

    best_p = 0
    best_aic = np.inf
    for p in range(max_lag + 1):
        design, target, n_det = _adf_design(y, p, kind, offset=max_lag)
        _, ssr, _ = _ols(design, target)
        n_obs = target.shape[0]
        k_params = n_det + 1 + p
        aic = n_obs * np.log(ssr / n_obs) + 2.0 * k_params
        if aic < best_aic:
            best_aic = aic
            best_p = p

    design, target, n_det = _adf_design(y, best_p, kind, offset=best_p)
    beta, ssr, xtx_inv = _ols(design, target)
    n_obs, k_params = design.shape
    dof = n_obs - k_params
    if dof <= 0:
        raise ValueError("adf_test: no residual degrees of freedom")
    sigma2 = ssr / dof
    gamma_index = n_det
    se_gamma = float(np.sqrt(sigma2 * xtx_inv[gamma_index, gamma_index]))
    if se_gamma <= 0:
        raise ValueError("adf_test: degenerate standard error")
    aic = n_obs * np.log(ssr / n_obs) + 2.0 * k_params
    return AdfResult(
        statistic=float(beta[gamma_index] / se_gamma),
        gamma_hat=float(beta[gamma_index]),
        lags=best_p,
        aic=float(aic),
        regression_kind=kind,
    )


# ---------------------------------------------------------------------------
# prediction-error metrics


def metrics(pred_arrivals, true_arrivals):
    """RMSE / MAE / MAPE for one predicted horizon.

    Arrival times are seconds since service midnight and must be
    nonzero for MAPE to exist.
    """
    pred = np.asarray(pred_arrivals, dtype=np.float64).reshape(1, -1)
    true = np.asarray(true_arrivals, dtype=np.float64).reshape(1, -1)
    return metrics_over_set(pred, true)


def metrics_over_set(pred_arrivals, true_arrivals):
    """Metrics pooled over a set of horizons.

    pred_arrivals, true_arrivals: [B x N_f].  Per-horizon entries
    aggregate over the B samples; totals pool every (sample, step) pair,
    so rmse_s**2 equals the mean of the squared per-horizon entries.
    """
    pred = np.asarray(pred_arrivals, dtype=np.float64)
    true = np.asarray(true_arrivals, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"metrics: shape mismatch {pred.shape} vs {true.shape}")
    if pred.ndim != 2 or pred.size == 0:
        raise ValueError("metrics: expected non-empty [B x N_f] arrays")
    if np.any(true == 0.0):
        raise ValueError("MAPE undefined at zero true arrival")
    err = pred - true
    sq = err * err
    ape = np.abs(err / true)
    return MetricsReport(
        rmse_s=float(np.sqrt(sq.mean())),
        mae_s=float(np.abs(err).mean()),
        mape_pct=float(100.0 * ape.mean()),
        rmse_per_horizon=np.sqrt(sq.mean(axis=0)),
        mae_per_horizon=np.abs(err).mean(axis=0),
        mape_per_horizon=100.0 * ape.mean(axis=0),
    )


def adf_ratio(pred_sequence, truth_sequence, max_lag=None, kind="constant_and_trend"):
    """ADF statistic of the predicted sequence over that of the truth.

    Both sequences are (history + horizon) concatenations of the same
    length.  A ratio above 1 means the prediction looks more stationary
    than the data it should mimic.
    """
    pred = np.asarray(pred_sequence, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth_sequence, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError(f"adf_ratio: length mismatch {pred.shape} vs {truth.shape}")
    truth_stat = adf_test(truth, max_lag=max_lag, kind=kind).statistic
    if abs(truth_stat) < 1e-9:
        raise ValueError("ill-conditioned ratio: truth statistic is numerically zero")
    pred_stat = adf_test(pred, max_lag=max_lag, kind=kind).statistic
    return pred_stat / truth_stat
