"""Synthetic transit route, schedule, and delay-process generator.

A fixed route is served by a set of scheduled trips per day.  Delay
propagates along each trip as a first-order autoregression with additive
structure: a rush-hour surcharge on weekday mornings and late
afternoons, extra dwell at signalized intersections, a slow sinusoidal
time-of-day component, and Gaussian noise.  Delays are clamped to
[-300, 1000] s.  Everything derives from per-day random streams keyed
by (seed, day index), so day generation is order-independent and
bit-reproducible.

Simulated days are sliced into sliding-window samples, split into
train/val/test by service day, and serialized as JSON lines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .stationarization import DELAY_CHANNEL, N_FEATURES, TemporalSample

DATASET_SCHEMA = "nsatp-ds/1"

DELAY_MIN_S = -300.0
DELAY_MAX_S = 1000.0

# weekday rush hours: 7-9 in the morning, 16-19 in the afternoon
PEAK_WINDOWS_S = ((7 * 3600.0, 9 * 3600.0), (16 * 3600.0, 19 * 3600.0))
SECONDS_PER_DAY = 86400.0


@dataclass(frozen=True)
class RouteSpec:
    """A fixed stop sequence; link j is the approach into stop j."""

    n_stops: int
    link_length_m: np.ndarray
    scheduled_link_time_s: np.ndarray
    signalized: np.ndarray

    def __post_init__(self):
        for name in ("link_length_m", "scheduled_link_time_s", "signalized"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.n_stops < 2:
            raise ValueError("route: need at least 2 stops")
        for name in ("link_length_m", "scheduled_link_time_s", "signalized"):
            if getattr(self, name).shape != (self.n_stops,):
                raise ValueError(f"route: {name} must have one entry per stop")
        if np.any(self.link_length_m <= 0) or np.any(self.scheduled_link_time_s <= 0):
            raise ValueError("route: lengths and times must be positive")
        if not np.all((self.signalized == 0.0) | (self.signalized == 1.0)):
            raise ValueError("route: signalized must be 0/1 flags")


@dataclass(frozen=True)
class DelayProcessParams:
    """Knobs of the stop-to-stop delay recursion."""

    ar_coeff: float = 0.72
    noise_std_s: float = 9.0
    peak_surcharge_s: float = 16.0
    signal_delay_mean_s: float = 7.0
    daily_period_amplitude_s: float = 12.0
    seed: int = 0
    initial_delay_s: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.ar_coeff < 1.0:
            raise ValueError("params: ar_coeff must be in [0, 1)")
        if self.noise_std_s < 0:
            raise ValueError("params: noise_std_s must be >= 0")


@dataclass(frozen=True)
class TripRecord:
    """One route traversal: per-stop scheduled and actual arrival times."""

    day_index: int
    start_s: float
    schedule_s: np.ndarray
    actual_s: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "schedule_s", np.asarray(self.schedule_s, dtype=np.float64))
        object.__setattr__(self, "actual_s", np.asarray(self.actual_s, dtype=np.float64))

    @property
    def n_stops(self):
        return self.schedule_s.shape[0]

    @property
    def delays_s(self):
        return self.actual_s - self.schedule_s

    def stop_pairs(self):
        """Per-stop (schedule, actual) arrival pairs."""
        return list(zip(self.schedule_s.tolist(), self.actual_s.tolist()))


@dataclass
class Dataset:
    """Sliced windows with per-sample split tags (by service day)."""

    samples: list
    splits: list
    n_past: int
    n_future: int
    skipped_trips: int = 0

    def __post_init__(self):
        if len(self.samples) != len(self.splits):
            raise ValueError("dataset: one split tag per sample required")
        bad = set(self.splits) - {"train", "val", "test"}
        if bad:
            raise ValueError(f"dataset: unknown split tags {sorted(bad)}")

    def indices(self, split):
        return [i for i, s in enumerate(self.splits) if s == split]

    def subset(self, split):
        return [self.samples[i] for i in self.indices(split)]

    def __len__(self):
        return len(self.samples)


def make_route(n_stops=40, seed=0):
    """A plausible urban route: varied link lengths, a signal roughly
    every third stop."""
    rng = np.random.default_rng(np.random.SeedSequence((int(seed) & (2**63 - 1), 0x526F757465)))
    lengths = rng.uniform(250.0, 750.0, size=n_stops)
    # scheduled running time ~ 5 m/s plus dwell, rounded to 5 s like real timetables
    times = np.round((lengths / 5.0 + rng.uniform(15.0, 35.0, size=n_stops)) / 5.0) * 5.0
    signalized = np.zeros(n_stops)
    signalized[rng.permutation(n_stops)[: n_stops // 3]] = 1.0
    return RouteSpec(
        n_stops=n_stops,
        link_length_m=lengths,
        scheduled_link_time_s=times,
        signalized=signalized,
    )


def is_weekday(day_index):
    return day_index % 7 < 5


def in_peak(time_of_day_s):
    tod = time_of_day_s % SECONDS_PER_DAY
    return any(lo <= tod < hi for lo, hi in PEAK_WINDOWS_S)


def _trip_rng(params, day_index, trip_index):
    return np.random.default_rng(
        np.random.SeedSequence((int(params.seed) & (2**63 - 1), int(day_index), int(trip_index)))
    )


def simulate_trip(route, params, day_index, start_s, trip_index=0):
    """Run the delay recursion along one trip.

    The trip leaves its origin at ``start_s`` carrying
    ``params.initial_delay_s``.  At each later stop j the delay is
    ar_coeff * delay(j-1), plus the weekday rush-hour surcharge when the
    departure from stop j-1 falls in a peak window, plus a random
    signal-dwell term when stop j is signalized, plus a slow sinusoidal
    time-of-day term and Gaussian noise; the sum is clamped to
    [-300, 1000] s.
    """
    rng = _trip_rng(params, day_index, trip_index)
    weekday = is_weekday(day_index)
    schedule = start_s + np.cumsum(route.scheduled_link_time_s)
    delays = np.empty(route.n_stops)
    noise = rng.normal(0.0, 1.0, size=route.n_stops) * params.noise_std_s
    signal_dwell = rng.exponential(1.0, size=route.n_stops) * params.signal_delay_mean_s
    delays[0] = np.clip(params.initial_delay_s + noise[0], DELAY_MIN_S, DELAY_MAX_S)
    for j in range(1, route.n_stops):
        d = params.ar_coeff * delays[j - 1]
        if weekday and in_peak(schedule[j - 1]):
            d += params.peak_surcharge_s
        d += signal_dwell[j] * route.signalized[j]
        d += params.daily_period_amplitude_s * np.sin(
            2.0 * np.pi * (schedule[j] % SECONDS_PER_DAY) / SECONDS_PER_DAY
        )
        d += noise[j]
        delays[j] = np.clip(d, DELAY_MIN_S, DELAY_MAX_S)
    return TripRecord(
        day_index=day_index,
        start_s=float(start_s),
        schedule_s=schedule,
        actual_s=schedule + delays,
    )


def default_departures(first_s=6 * 3600.0, last_s=21.5 * 3600.0, headway_s=1800.0):
    return np.arange(first_s, last_s + 1.0, headway_s)


def simulate_day(route, params, day_index, departures_s=None):
    """All trips of one service day, each a per-stop (schedule, actual)
    arrival sequence.  Days are independent: the random stream is keyed
    by (seed, day_index, trip index)."""
    if departures_s is None:
        departures_s = default_departures()
    return [
        simulate_trip(route, params, day_index, start_s, trip_index=i)
        for i, start_s in enumerate(departures_s)
    ]


# ---------------------------------------------------------------------------
# window slicing


def _trip_features(trip, route, mean_travel_time_s):
    """Per-stop feature rows [n_stops x C] for one trip."""
    previous_actual = np.concatenate(([trip.start_s], trip.actual_s[:-1]))
    travel_time = trip.actual_s - previous_actual
    rows = np.empty((trip.n_stops, N_FEATURES))
    rows[:, 0] = route.link_length_m
    rows[:, 1] = travel_time
    rows[:, DELAY_CHANNEL] = trip.delays_s
    rows[:, 3] = route.signalized
    rows[:, 4] = mean_travel_time_s
    return rows


def _train_mean_travel_times(days, train_day_count, route):
    """Per-link mean observed travel time over the training days only."""
    total = np.zeros(route.n_stops)
    count = 0
    for day in days[:train_day_count]:
        for trip in day:
            previous_actual = np.concatenate(([trip.start_s], trip.actual_s[:-1]))
            total += trip.actual_s - previous_actual
            count += 1
    if count == 0:
        return route.scheduled_link_time_s.copy()
    return total / count


def split_day_counts(n_days, fractions=(0.7, 0.1, 0.2)):
    """Contiguous 70/10/20 day split; every non-empty corpus keeps a test day."""
    n_train = int(n_days * fractions[0])
    n_val = int(n_days * fractions[1])
    n_test = n_days - n_train - n_val
    return n_train, n_val, n_test


def slice_samples(days, n_past, n_future, route=None):
    """Slide stride-1 windows over every trip and tag samples by day split.

    days: list of simulated days (each a list of TripRecord).  Trips
    shorter than n_past + n_future are skipped and counted.  The mean
    travel-time feature is computed from the training days only.
    """
    if route is None:
        raise ValueError("slice_samples: route required for link features")
    window = n_past + n_future
    n_train, n_val, _ = split_day_counts(len(days))
    mean_tt = _train_mean_travel_times(days, n_train, route)

    samples = []
    splits = []
    skipped = 0
    for day_pos, day in enumerate(days):
        if day_pos < n_train:
            split = "train"
        elif day_pos < n_train + n_val:
            split = "val"
        else:
            split = "test"
        for trip in day:
            if trip.n_stops < window:
                skipped += 1
                continue
            rows = _trip_features(trip, route, mean_tt)
            weekday_flag = 1.0 if is_weekday(trip.day_index) else 0.0
            peak_flags = np.fromiter(
                (1.0 if in_peak(t) else 0.0 for t in trip.schedule_s), dtype=np.float64
            )
            for a in range(trip.n_stops - window + 1):
                ctx = np.column_stack(
                    (peak_flags[a : a + window], np.full(window, weekday_flag))
                )
                future = slice(a + n_past, a + window)
                samples.append(
                    TemporalSample(
                        past_features=rows[a : a + n_past],
                        context=ctx,
                        future_schedule=trip.schedule_s[future],
                        future_delay_truth=trip.delays_s[future],
                        future_arrival_truth=trip.actual_s[future],
                    )
                )
                splits.append(split)
    return Dataset(
        samples=samples,
        splits=splits,
        n_past=n_past,
        n_future=n_future,
        skipped_trips=skipped,
    )


def build_dataset(route, params, n_days, n_past, n_future, departures_s=None):
    """Simulate ``n_days`` service days and slice them into a Dataset."""
    if route.n_stops < n_past + n_future + 1:
        raise ValueError(
            f"route too short: {route.n_stops} stops < n_past + n_future + 1 = "
            f"{n_past + n_future + 1}"
        )
    days = [simulate_day(route, params, d, departures_s) for d in range(n_days)]
    return slice_samples(days, n_past, n_future, route=route)


# ---------------------------------------------------------------------------
# JSONL serialization


def write_dataset(path, dataset):
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "schema": DATASET_SCHEMA,
            "n_past": dataset.n_past,
            "n_future": dataset.n_future,
            "skipped_trips": dataset.skipped_trips,
        }
        fh.write(json.dumps(header) + "\n")
        for sample, split in zip(dataset.samples, dataset.splits):
            record = {
                "split": split,
                "past_features": sample.past_features.tolist(),
                "context": sample.context.tolist(),
                "future_schedule": sample.future_schedule.tolist(),
                "future_delay_truth": sample.future_delay_truth.tolist(),
                "future_arrival_truth": sample.future_arrival_truth.tolist(),
            }
            fh.write(json.dumps(record) + "\n")


def read_dataset(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != DATASET_SCHEMA:
            raise ValueError(f"unsupported dataset schema: {header.get('schema')!r}")
        samples = []
        splits = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            samples.append(
                TemporalSample(
                    past_features=rec["past_features"],
                    context=rec["context"],
                    future_schedule=rec["future_schedule"],
                    future_delay_truth=rec["future_delay_truth"],
                    future_arrival_truth=rec["future_arrival_truth"],
                )
            )
            splits.append(rec["split"])
    return Dataset(
        samples=samples,
        splits=splits,
        n_past=int(header["n_past"]),
        n_future=int(header["n_future"]),
        skipped_trips=int(header.get("skipped_trips", 0)),
    )
