"""Experiment orchestration: configs, training, evaluation, ablations.

A TOML file describes one experiment ([experiment] plus optional
[model] overrides) and, for data generation, one simulator setup
([sim]).  Runs are deterministic for a fixed seed: parameter draws and
epoch shuffles all come from named random streams.  Reports are written
as JSON plus an aligned text table; checkpoints carry the full
experiment config so evaluation can rebuild the model.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - Python < 3.11
    import tomli as tomllib

from . import __version__
from . import autodiff as ad
from . import sim
from .cnn import PLACEMENTS, CnnModelConfig, CnnPredictor
from .metrics import adf_ratio, adf_test, metrics_over_set
from .model_base import SampleBatch
from .stationarization import DELAY_CHANNEL
from .swin import SwinModelConfig, SwinPredictor

REPORT_SCHEMA = "nsatp-report/1"

TRAINABLE_MODELS = ("nsatp_cnn", "nsatp_swin", "arrivalnet_cnn", "arrivalnet_swin")
BASELINE_MODELS = ("persistence", "schedule_only")
MODEL_KINDS = TRAINABLE_MODELS + BASELINE_MODELS

ADF_POOL_SAMPLES = 400


class ConfigError(Exception):
    """Invalid experiment or simulator configuration."""


class DivergenceError(Exception):
    """Training or evaluation produced non-finite values."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    dataset: str
    epochs: int = 20
    batch_size: int = 256
    lr: float = 0.001
    seed: int = 0
    patience: int = 5
    stationarize: bool = True
    revin: bool = False
    d_model: int = 16
    n_blocks: int = 2
    n_periods: int = 3
    mlp_hidden: int = 128
    n_kernels: int = 6
    compensation_placement: str = "after_last_block"
    window: int = 2
    d_k: Optional[int] = None
    ffn_hidden: Optional[int] = None
    inner_compensation: bool = True
    outer_compensation: bool = True
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"unknown model {self.model!r}; choose one of {MODEL_KINDS}")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("epochs, batch_size, and patience must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.model in BASELINE_MODELS and self.revin:
            raise ConfigError(f"{self.model} takes no learnable affine toggle")
        if self.compensation_placement not in PLACEMENTS:
            raise ConfigError(
                f"unknown compensation placement {self.compensation_placement!r}"
            )

    @property
    def trainable(self):
        return self.model in TRAINABLE_MODELS


# keys accepted in TOML, by model family
_COMMON_KEYS = {"model", "dataset", "epochs", "batch_size", "lr", "seed", "patience",
                "epsilon"}
_TRAINABLE_KEYS = {"stationarize", "revin", "d_model", "n_blocks", "n_periods",
                   "mlp_hidden"}
_CNN_KEYS = {"n_kernels", "compensation_placement"}
_SWIN_KEYS = {"window", "d_k", "ffn_hidden"}
_NSATP_SWIN_KEYS = {"inner_compensation", "outer_compensation"}


def _allowed_keys(model):
    keys = set(_COMMON_KEYS)
    if model in TRAINABLE_MODELS:
        keys |= _TRAINABLE_KEYS
        if model.endswith("_cnn"):
            keys |= _CNN_KEYS
        else:
            keys |= _SWIN_KEYS
        if model == "nsatp_swin":
            keys |= _NSATP_SWIN_KEYS
    return keys


def _read_toml(path):
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_experiment_config(path, seed=None):
    """Build an ExperimentConfig from [experiment] (+ [model]) sections."""
    doc = _read_toml(path)
    if "experiment" not in doc:
        raise ConfigError(f"{path}: missing [experiment] section")
    merged = {**doc["experiment"], **doc.get("model", {})}
    model = merged.get("model")
    if model not in MODEL_KINDS:
        raise ConfigError(f"unknown model {model!r}; choose one of {MODEL_KINDS}")
    unknown = set(merged) - _allowed_keys(model)
    if unknown:
        raise ConfigError(f"config keys not valid for {model}: {sorted(unknown)}")
    if "dataset" not in merged:
        raise ConfigError("config must name a dataset file")
    if seed is not None:
        merged["seed"] = int(seed)
    return ExperimentConfig(**merged)


_PROCESS_KEYS = ("ar_coeff", "noise_std_s", "peak_surcharge_s", "signal_delay_mean_s",
                 "daily_period_amplitude_s", "initial_delay_s")


@dataclass(frozen=True)
class SimConfig:
    n_stops: int = 40
    n_days: int = 20
    n_past: int = 10
    n_future: int = 5
    seed: int = 0
    route_seed: Optional[int] = None
    first_departure_s: float = 6 * 3600.0
    last_departure_s: float = 21.5 * 3600.0
    headway_s: float = 1800.0
    process: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.n_stops, self.n_days, self.n_past, self.n_future) < 1:
            raise ConfigError("n_stops, n_days, n_past, n_future must be positive")
        unknown = set(self.process) - set(_PROCESS_KEYS)
        if unknown:
            raise ConfigError(f"unknown delay-process keys: {sorted(unknown)}")

    def route(self):
        seed = self.seed if self.route_seed is None else self.route_seed
        return sim.make_route(n_stops=self.n_stops, seed=seed)

    def process_params(self):
        return sim.DelayProcessParams(seed=self.seed, **self.process)

    def departures(self):
        return sim.default_departures(
            self.first_departure_s, self.last_departure_s, self.headway_s
        )


def load_sim_config(path, seed=None):
    doc = _read_toml(path)
    if "sim" not in doc:
        raise ConfigError(f"{path}: missing [sim] section")
    section = dict(doc["sim"])
    scalar_keys = {"n_stops", "n_days", "n_past", "n_future", "seed", "route_seed",
                   "first_departure_s", "last_departure_s", "headway_s"}
    unknown = set(section) - scalar_keys - set(_PROCESS_KEYS)
    if unknown:
        raise ConfigError(f"unknown [sim] keys: {sorted(unknown)}")
    process = {k: section.pop(k) for k in list(section) if k in _PROCESS_KEYS}
    if seed is not None:
        section["seed"] = int(seed)
    return SimConfig(process=process, **section)


def config_hash(config):
    payload = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# model construction


def build_model(config, n_past, n_future):
    if not config.trainable:
        raise ConfigError(f"{config.model} has no trainable model")
    if config.model.endswith("_cnn"):
        model_config = CnnModelConfig(
            n_past=n_past,
            n_future=n_future,
            d_model=config.d_model,
            n_blocks=config.n_blocks,
            n_periods=config.n_periods,
            n_kernels=config.n_kernels,
            mlp_hidden=config.mlp_hidden,
            compensation=config.model == "nsatp_cnn",
            compensation_placement=config.compensation_placement,
            stationarize=config.stationarize,
            revin=config.revin,
            epsilon=config.epsilon,
        )
        return CnnPredictor(model_config, seed=config.seed)
    nsatp = config.model == "nsatp_swin"
    model_config = SwinModelConfig(
        n_past=n_past,
        n_future=n_future,
        d_model=config.d_model,
        d_k=config.d_k,
        window=config.window,
        n_blocks=config.n_blocks,
        n_periods=config.n_periods,
        ffn_hidden=config.ffn_hidden,
        mlp_hidden=config.mlp_hidden,
        inner_compensation=nsatp and config.inner_compensation,
        outer_compensation=nsatp and config.outer_compensation,
        stationarize=config.stationarize,
        revin=config.revin,
        epsilon=config.epsilon,
    )
    return SwinPredictor(model_config, seed=config.seed)


# ---------------------------------------------------------------------------
# dataset and prediction plumbing


def _load_dataset(path):
    try:
        return sim.read_dataset(path)
    except FileNotFoundError:
        raise
    except ValueError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc


def _batches(n, size):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


def _mean_loss(model, batch, batch_size):
    """Forward-only full-set loss (exact MSE, chunked for memory)."""
    total = 0.0
    for idx in _batches(len(batch), batch_size):
        part = batch.take(idx)
        total += float(model.training_loss(part).values) * len(part)
    return total / len(batch)


def _predict_chunked(predict_fn, batch, batch_size=256):
    parts = [predict_fn(batch.take(idx)) for idx in _batches(len(batch), batch_size)]
    return np.concatenate(parts, axis=0)


def predict_persistence(batch):
    """Repeat the last observed delay across the whole horizon."""
    last = batch.past_features[:, -1, DELAY_CHANNEL][:, None]
    return batch.future_schedule + last


def predict_schedule_only(batch):
    """Assume zero delay everywhere."""
    return batch.future_schedule.copy()


def _evaluate_predictions(batch, pred_arrivals):
    """Test metrics plus the pooled unit-root ratio.

    The ratio compares long delay sequences built from non-overlapping
    test windows (stride = window length, so consecutive stretches never
    re-tread the same stops): observed past delays followed by predicted
    (resp. true) future delays, concatenated window after window, up to
    ADF_POOL_SAMPLES windows.
    """
    report = metrics_over_set(pred_arrivals, batch.future_arrival_truth)
    stride = batch.n_past + batch.n_future
    pool = np.arange(0, len(batch), stride)[:ADF_POOL_SAMPLES]
    past_delays = batch.past_features[pool][:, :, DELAY_CHANNEL]
    pred_delays = pred_arrivals[pool] - batch.future_schedule[pool]
    true_delays = batch.future_delay_truth[pool]
    pred_seq = np.concatenate([past_delays, pred_delays], axis=1).reshape(-1)
    true_seq = np.concatenate([past_delays, true_delays], axis=1).reshape(-1)
    ratio = None
    note = None
    try:
        ratio = adf_ratio(pred_seq, true_seq)
    except ValueError as exc:
        note = str(exc)
    test = {
        "rmse_s": report.rmse_s,
        "mae_s": report.mae_s,
        "mape_pct": report.mape_pct,
        "rmse_per_horizon": report.rmse_per_horizon.tolist(),
        "mae_per_horizon": report.mae_per_horizon.tolist(),
        "mape_per_horizon": report.mape_per_horizon.tolist(),
    }
    return test, ratio, note


# ---------------------------------------------------------------------------
# reports


def _base_report(config, dataset):
    return {
        "schema": REPORT_SCHEMA,
        "model": config.model,
        "config": asdict(config),
        "config_hash": config_hash(config),
        "provenance": f"nsatp-{__version__} {config.model}@{config_hash(config)} "
                      f"seed={config.seed}",
        "status": "ok",
        "n_train": len(dataset.indices("train")),
        "n_val": len(dataset.indices("val")),
        "n_test": len(dataset.indices("test")),
        "history": {"train_loss": [], "val_loss": []},
        "best_epoch": None,
        "test": None,
        "adf_ratio": None,
        "adf_note": None,
        "wall_time_s": 0.0,
    }


def format_report(report):
    """Aligned text table: one row per horizon step plus the totals."""
    lines = [
        f"model: {report['model']}   seed: {report['config']['seed']}   "
        f"config: {report['config_hash']}",
        f"status: {report['status']}   best epoch: {report['best_epoch']}   "
        f"wall time: {report['wall_time_s']:.1f} s",
    ]
    test = report.get("test")
    if test is not None:
        lines.append("")
        lines.append(f"{'horizon':>8}  {'RMSE (s)':>10}  {'MAE (s)':>10}  {'MAPE (%)':>10}")
        rows = zip(test["rmse_per_horizon"], test["mae_per_horizon"],
                   test["mape_per_horizon"])
        for step, (rmse, mae, mape) in enumerate(rows, start=1):
            lines.append(f"{'+' + str(step):>8}  {rmse:>10.3f}  {mae:>10.3f}  {mape:>10.4f}")
        lines.append(
            f"{'total':>8}  {test['rmse_s']:>10.3f}  {test['mae_s']:>10.3f}  "
            f"{test['mape_pct']:>10.4f}"
        )
        ratio = report.get("adf_ratio")
        lines.append("")
        if ratio is not None:
            lines.append(f"unit-root ratio (pred/true): {ratio:.4f}")
        else:
            lines.append(f"unit-root ratio unavailable: {report.get('adf_note')}")
    return "\n".join(lines) + "\n"


def write_report(out_dir, report):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    with open(out_dir / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(format_report(report))


# ---------------------------------------------------------------------------
# training and evaluation


def train(config, out_dir):
    """Train (or directly evaluate a baseline) and write checkpoint + report."""
    start = time.perf_counter()
    dataset = _load_dataset(config.dataset)
    report = _base_report(config, dataset)

    test_samples = dataset.subset("test")
    if not test_samples:
        raise ConfigError("dataset has no test samples")
    test_batch = SampleBatch.from_samples(test_samples)

    if config.model in BASELINE_MODELS:
        predict = predict_persistence if config.model == "persistence" else predict_schedule_only
        pred = predict(test_batch)
        report["test"], report["adf_ratio"], report["adf_note"] = _evaluate_predictions(
            test_batch, pred
        )
        report["wall_time_s"] = time.perf_counter() - start
        write_report(out_dir, report)
        return report

    train_samples = dataset.subset("train")
    if not train_samples:
        raise ConfigError("dataset has no training samples")
    train_batch = SampleBatch.from_samples(train_samples)
    val_samples = dataset.subset("val")
    val_batch = SampleBatch.from_samples(val_samples) if val_samples else None

    model = build_model(config, dataset.n_past, dataset.n_future)
    optimizer = ad.Adam(model.params, lr=config.lr)

    def watched_loss():
        if val_batch is not None:
            return _mean_loss(model, val_batch, config.batch_size)
        return _mean_loss(model, train_batch, config.batch_size)

    history_train = report["history"]["train_loss"]
    history_val = report["history"]["val_loss"]
    try:
        # epoch 0: forward pass at initialization, no updates
        history_train.append(_mean_loss(model, train_batch, config.batch_size))
        history_val.append(watched_loss())
        best_val = history_val[0]
        best_values = model.export_values()
        best_epoch = 0
        stale = 0
        for epoch in range(1, config.epochs + 1):
            order = ad.seeded_rng(config.seed, f"train.shuffle.{epoch}").permutation(
                len(train_batch)
            )
            total = 0.0
            for idx in _batches(len(train_batch), config.batch_size):
                part = train_batch.take(order[idx])
                loss = model.training_loss(part)
                total += float(loss.values) * len(part)
                ad.backward(loss)
                optimizer.step()
                optimizer.zero_grad()
            history_train.append(total / len(train_batch))
            history_val.append(watched_loss())
            if history_val[-1] < best_val:
                best_val = history_val[-1]
                best_values = model.export_values()
                best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
        model.load_values(best_values)
        pred = _predict_chunked(model.predict_batch, test_batch, config.batch_size)
    except (ValueError, RuntimeError) as exc:
        message = str(exc)
        if "non-finite" not in message and "diverged" not in message:
            raise
        report["status"] = "diverged"
        report["wall_time_s"] = time.perf_counter() - start
        write_report(out_dir, report)
        raise DivergenceError(message, report=report) from exc

    report["best_epoch"] = best_epoch
    report["test"], report["adf_ratio"], report["adf_note"] = _evaluate_predictions(
        test_batch, pred
    )
    report["wall_time_s"] = time.perf_counter() - start

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(
        out_dir / "checkpoint.json",
        model.params,
        config={
            "experiment": asdict(config),
            "n_past": dataset.n_past,
            "n_future": dataset.n_future,
        },
    )
    write_report(out_dir, report)
    return report


def evaluate_checkpoint(checkpoint_path, dataset_path, horizon=None):
    """Rebuild the checkpointed model and score it on the test split."""
    start = time.perf_counter()
    try:
        params, stored = ad.load_checkpoint(checkpoint_path)
    except ValueError as exc:
        raise OSError(f"cannot read checkpoint {checkpoint_path}: {exc}") from exc
    if not stored or "experiment" not in stored:
        raise OSError(f"checkpoint {checkpoint_path} carries no experiment config")
    config = ExperimentConfig(**stored["experiment"])
    n_past, n_future = int(stored["n_past"]), int(stored["n_future"])
    if horizon is not None and int(horizon) != n_future:
        raise ConfigError(
            f"horizon {horizon} does not match the checkpoint horizon {n_future}"
        )
    dataset = _load_dataset(dataset_path)
    if dataset.n_past != n_past or dataset.n_future != n_future:
        raise ConfigError(
            f"dataset windows ({dataset.n_past}, {dataset.n_future}) do not match "
            f"the checkpoint ({n_past}, {n_future})"
        )
    test_samples = dataset.subset("test")
    if not test_samples:
        raise ConfigError("dataset has no test samples")
    test_batch = SampleBatch.from_samples(test_samples)

    model = build_model(config, n_past, n_future)
    model.load_values({name: p.values for name, p in params.items()})
    try:
        pred = _predict_chunked(model.predict_batch, test_batch, config.batch_size)
    except RuntimeError as exc:
        raise DivergenceError(str(exc)) from exc

    report = _base_report(config, dataset)
    report["test"], report["adf_ratio"], report["adf_note"] = _evaluate_predictions(
        test_batch, pred
    )
    report["wall_time_s"] = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# ablation grid


def _ablation_rows(config):
    if config.model == "nsatp_cnn":
        return [
            (f"standardize={'w/' if ss else 'w/o'} placement="
             f"{'inside' if pl == 'inside_each_block' else 'after_last'}",
             replace(config, stationarize=ss, compensation_placement=pl))
            for ss in (True, False)
            for pl in PLACEMENTS
        ]
    rows = []
    for ss in (True, False):
        for label, inner, outer in (("attention-only", True, False),
                                    ("output-only", False, True),
                                    ("both", True, True)):
            rows.append((
                f"standardize={'w/' if ss else 'w/o'} recovery={label}",
                replace(config, stationarize=ss, inner_compensation=inner,
                        outer_compensation=outer),
            ))
    return rows


def ablate(config, out_dir):
    """Train every switch combination of the grid and tabulate results."""
    if config.model not in ("nsatp_cnn", "nsatp_swin"):
        raise ConfigError(f"ablation grid is defined for nsatp models, not {config.model}")
    out_dir = Path(out_dir)
    rows = []
    for index, (label, row_config) in enumerate(_ablation_rows(config)):
        report = train(row_config, out_dir / f"row{index}")
        rows.append({"label": label, "config_hash": report["config_hash"],
                     "report": report})
    summary = {
        "schema": REPORT_SCHEMA,
        "kind": "ablation",
        "model": config.model,
        "rows": [
            {
                "label": row["label"],
                "config_hash": row["config_hash"],
                "rmse_s": row["report"]["test"]["rmse_s"],
                "mae_s": row["report"]["test"]["mae_s"],
                "mape_pct": row["report"]["test"]["mape_pct"],
                "adf_ratio": row["report"]["adf_ratio"],
            }
            for row in rows
        ],
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    with open(out_dir / "ablation.txt", "w", encoding="utf-8") as fh:
        fh.write(format_ablation(summary))
    return summary


def format_ablation(summary):
    width = max(len(r["label"]) for r in summary["rows"])
    width = max(width, len("row"))
    lines = [f"{'row':<{width}}  {'RMSE (s)':>10}  {'MAE (s)':>10}  {'MAPE (%)':>10}"]
    for row in summary["rows"]:
        lines.append(
            f"{row['label']:<{width}}  {row['rmse_s']:>10.3f}  {row['mae_s']:>10.3f}  "
            f"{row['mape_pct']:>10.4f}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# simulator front end and the standardization study


def simulate(sim_config, out_path):
    """Generate a dataset file; returns a small summary dict."""
    dataset = sim.build_dataset(
        sim_config.route(),
        sim_config.process_params(),
        n_days=sim_config.n_days,
        n_past=sim_config.n_past,
        n_future=sim_config.n_future,
        departures_s=sim_config.departures(),
    )
    sim.write_dataset(out_path, dataset)
    return {
        "path": str(out_path),
        "n_samples": len(dataset),
        "n_train": len(dataset.indices("train")),
        "n_val": len(dataset.indices("val")),
        "n_test": len(dataset.indices("test")),
        "skipped_trips": dataset.skipped_trips,
    }


@dataclass(frozen=True)
class AdfStudy:
    n_windows: int
    window_len: int
    mean_before: float
    mean_after: float


def stationarization_adf_study(sequences, window_len=30, stride=10, n_windows=500,
                               epsilon=1e-5):
    """Unit-root shift caused by per-window standardization.

    ``before`` is the mean ADF statistic over raw windows slid along the
    given sequences.  ``after`` re-slices windows of the same length
    from the concatenation of the individually standardized windows,
    offset by half a window so every slice crosses a boundary between
    segments, the view a model consuming standardized windows sees.
    More negative means more stationary.
    """
    windows = []
    needed = n_windows + 1
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.float64)
        for start in range(0, seq.shape[0] - window_len + 1, stride):
            windows.append(seq[start : start + window_len])
            if len(windows) == needed:
                break
        if len(windows) == needed:
            break
    if len(windows) < needed:
        raise ValueError(
            f"need {needed} windows of length {window_len}, found {len(windows)}"
        )
    before = float(np.mean([adf_test(w).statistic for w in windows[:n_windows]]))
    standardized = [
        (w - w.mean()) / max(w.std(), epsilon) for w in windows
    ]
    pooled = np.concatenate(standardized)
    offset = window_len // 2
    after_stats = [
        adf_test(pooled[start : start + window_len]).statistic
        for start in range(offset, offset + n_windows * window_len, window_len)
    ]
    after = float(np.mean(after_stats))
    return AdfStudy(
        n_windows=n_windows,
        window_len=window_len,
        mean_before=before,
        mean_after=after,
    )


def adf_study_from_sim(sim_config, window_len=30, stride=10, n_windows=500):
    """Run the standardization study on freshly simulated trips."""
    route = sim_config.route()
    params = sim_config.process_params()
    departures = sim_config.departures()
    sequences = []
    for day in range(sim_config.n_days):
        for trip in sim.simulate_day(route, params, day, departures):
            sequences.append(trip.delays_s)
    try:
        return stationarization_adf_study(
            sequences, window_len=window_len, stride=stride, n_windows=n_windows
        )
    except ValueError as exc:
        # the simulated trips cannot support the requested study
        raise ConfigError(str(exc)) from exc
