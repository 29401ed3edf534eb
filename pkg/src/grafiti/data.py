"""Datasets of forecasting instances: synthetic generation, CSV I/O, task slicing.

CSV layout (one row per observed cell, missing cells are absent)::

    instance,time,channel,value
    0,0.5,2,-0.31

A dataset directory holds ``data.csv`` plus a ``data.json`` sidecar with the
channel count, the forecasting window and the generator settings.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import ForecastQuery, GraphError, TimeSeries

log = logging.getLogger(__name__)

SIDECAR_VERSION = 1


class DataError(ValueError):
    pass


class InsufficientFutureError(DataError):
    pass


@dataclass(frozen=True, eq=False)
class Instance:
    series: TimeSeries
    query: ForecastQuery
    answer: np.ndarray

    def __post_init__(self):
        answer = np.array(self.answer, dtype=np.float64)
        answer.flags.writeable = False
        object.__setattr__(self, "answer", answer)
        if answer.shape != (len(self.query),):
            raise DataError(f"{answer.size} answers for {len(self.query)} query items")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            self.series == other.series
            and self.query == other.query
            and np.array_equal(self.answer, other.answer)
        )

    def full_series(self) -> TimeSeries:
        """Observations and answered query cells merged into one series."""
        return merge_cells(
            self.series.channel_count,
            [_cells(self.series), zip(self.query.times.tolist(), self.query.channels.tolist(), self.answer.tolist())],
        )


@dataclass
class Dataset:
    instances: list[Instance]
    channel_count: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.instances)

    def __getitem__(self, i) -> Instance:
        return self.instances[i]

    def __iter__(self):
        return iter(self.instances)

    def subset(self, ids: Iterable[int]) -> "Dataset":
        return Dataset([self.instances[i] for i in ids], self.channel_count, dict(self.meta))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.channel_count == other.channel_count and self.instances == other.instances


def _cells(ts: TimeSeries):
    n, c = np.nonzero(ts.observed)
    return zip(ts.times[n].tolist(), c.tolist(), ts.values[n, c].tolist())


def merge_cells(channel_count: int, groups) -> TimeSeries:
    """Series from ``(time, channel, value)`` cells; equal timestamps form one event."""
    table: dict[float, dict[int, float]] = {}
    for cells in groups:
        for t, c, v in cells:
            row = table.setdefault(float(t), {})
            if c in row:
                raise DataError(f"duplicate cell at time {t}, channel {c}")
            row[int(c)] = float(v)
    times = sorted(table)
    values = np.zeros((len(times), channel_count))
    observed = np.zeros((len(times), channel_count), dtype=bool)
    for n, t in enumerate(times):
        for c, v in table[t].items():
            values[n, c] = v
            observed[n, c] = True
    return TimeSeries(np.array(times), values, observed)


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Settings of the synthetic generator.

    Each instance is driven by ``components`` latent sinusoids with random
    amplitude, frequency and phase; channel ``c`` sees a fixed mixture of
    them (shared across the dataset) plus a per-channel offset, so channels
    are correlated.  Observed values get Gaussian noise; answers come from
    the noiseless signal.
    """

    instances: int = 500
    channels: int = 8
    sparsity: float = 0.8
    noise_std: float = 0.1
    observe_until: float = 36.0
    forecast_steps: int = 3
    min_events: int = 60
    max_events: int = 100
    components: int = 2
    amplitude_range: tuple[float, float] = (0.5, 1.5)
    period_range: tuple[float, float] = (72.0, 144.0)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError(f"sparsity must lie in [0, 1), got {self.sparsity}")
        if self.channels * (1.0 - self.sparsity) < 1.0 - 1e-12:
            raise ValueError(
                f"sparsity {self.sparsity} leaves fewer than one observed channel per event "
                f"with {self.channels} channels (need sparsity <= {1 - 1 / self.channels:.4g})"
            )
        if self.instances < 1 or self.channels < 1 or self.components < 1:
            raise ValueError("instances, channels and components must be positive")
        if not 1 <= self.min_events <= self.max_events:
            raise ValueError("need 1 <= min_events <= max_events")
        if self.forecast_steps < 1 or self.observe_until <= 0:
            raise ValueError("forecast_steps and observe_until must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass(frozen=True)
class LatentSignal:
    """Noiseless per-instance signal: ``offset + mixing @ (a * sin(2*pi*t/period + phase))``."""

    offset: np.ndarray  # [C]
    mixing: np.ndarray  # [C, J]
    amplitude: np.ndarray  # [J]
    period: np.ndarray  # [J]
    phase: np.ndarray  # [J]

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        z = self.amplitude * np.sin(2 * np.pi * t[:, None] / self.period + self.phase)  # [n, J]
        return self.offset + z @ self.mixing.T


def _observation_mask(rng: np.random.Generator, n: int, channels: int, sparsity: float) -> np.ndarray:
    """Each event keeps one uniform channel plus each other channel independently.

    The extra-keep probability is chosen so that every cell is observed with
    marginal probability ``1 - sparsity`` while no event is empty.
    """
    if channels == 1:
        return np.ones((n, 1), dtype=bool)
    extra = (channels * (1.0 - sparsity) - 1.0) / (channels - 1)
    mask = rng.random((n, channels)) < max(extra, 0.0)
    mask[np.arange(n), rng.integers(0, channels, size=n)] = True
    return mask


def _dataset_structure(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 0])
    mixing = rng.normal(size=(spec.channels, spec.components)) / np.sqrt(spec.components)
    offset = rng.uniform(-1.0, 1.0, size=spec.channels)
    return offset, mixing


def latent_signal(spec: SyntheticSpec, i: int) -> LatentSignal:
    offset, mixing = _dataset_structure(spec)
    rng = _instance_rng(spec, i)
    J = spec.components
    return LatentSignal(
        offset=offset,
        mixing=mixing,
        amplitude=rng.uniform(*spec.amplitude_range, size=J),
        period=rng.uniform(*spec.period_range, size=J),
        phase=rng.uniform(0.0, 2 * np.pi, size=J),
    )


def _instance_rng(spec: SyntheticSpec, i: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, 1, i])


def generate_instance(spec: SyntheticSpec, i: int) -> Instance:
    signal = latent_signal(spec, i)
    rng = np.random.default_rng([spec.seed, 2, i])
    n = int(rng.integers(spec.min_events, spec.max_events + 1))
    times = np.sort(rng.uniform(0.0, spec.observe_until, size=n))
    times = np.unique(times)
    gaps = rng.exponential(spec.observe_until / n, size=spec.forecast_steps)
    future = spec.observe_until + np.cumsum(np.maximum(gaps, 1e-6))

    C = spec.channels
    obs_mask = _observation_mask(rng, times.size, C, spec.sparsity)
    noise = rng.normal(0.0, spec.noise_std, size=(times.size, C)) if spec.noise_std > 0 else 0.0
    values = np.where(obs_mask, signal(times) + noise, 0.0)
    series = TimeSeries(times, values, obs_mask)

    q_mask = _observation_mask(rng, future.size, C, spec.sparsity)
    qn, qc = np.nonzero(q_mask)
    query = ForecastQuery(future[qn], qc)
    answer = signal(future)[qn, qc]
    return Instance(series, query, answer)


def generate(spec: SyntheticSpec) -> Dataset:
    """Deterministic synthetic dataset; instance ``i`` depends only on (seed, i)."""
    instances = [generate_instance(spec, i) for i in range(spec.instances)]
    meta = {
        "source": "synthetic",
        "seed": spec.seed,
        "window": {"observe_until": spec.observe_until, "forecast_steps": spec.forecast_steps},
        "generator": asdict(spec),
    }
    return Dataset(instances, spec.channels, meta)


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------


def sparsify_asts(dataset: Dataset, retrieve_fraction: float, seed: int = 0) -> Dataset:
    """Asynchronous variant: one observed channel per event, then restore a fraction.

    Each event keeps one of its observed channels (chosen uniformly); then
    ``round(retrieve_fraction * removed)`` of all removed cells, chosen
    uniformly over the dataset, are put back.  Queries and answers are kept.
    """
    if not 0.0 <= retrieve_fraction <= 1.0:
        raise ValueError(f"retrieve_fraction must lie in [0, 1], got {retrieve_fraction}")
    rng = np.random.default_rng(seed)
    masks = []
    removed = []  # (instance, event, channel)
    for i, inst in enumerate(dataset):
        obs = inst.series.observed
        keep = np.zeros_like(obs)
        for n in range(obs.shape[0]):
            chans = np.flatnonzero(obs[n])
            kept = chans[rng.integers(chans.size)]
            keep[n, kept] = True
            removed.extend((i, n, int(c)) for c in chans if c != kept)
        masks.append(keep)
    n_back = int(round(retrieve_fraction * len(removed)))
    for j in rng.choice(len(removed), size=n_back, replace=False):
        i, n, c = removed[j]
        masks[i][n, c] = True
    out = []
    for inst, mask in zip(dataset, masks):
        s = inst.series
        out.append(Instance(TimeSeries(s.times, s.values, mask), inst.query, inst.answer))
    meta = dict(dataset.meta, asts={"retrieve_fraction": retrieve_fraction, "seed": seed, "removed": len(removed), "restored": n_back})
    return Dataset(out, dataset.channel_count, meta)


@dataclass(frozen=True)
class TaskWindow:
    """Observe events up to ``observe_until``; forecast the next
    ``forecast_steps`` event times, or everything within ``forecast_horizon``."""

    observe_until: float
    forecast_steps: int | None = None
    forecast_horizon: float | None = None

    def __post_init__(self):
        if (self.forecast_steps is None) == (self.forecast_horizon is None):
            raise ValueError("give exactly one of forecast_steps or forecast_horizon")
        if self.forecast_steps is not None and self.forecast_steps < 1:
            raise ValueError("forecast_steps must be positive")
        if self.forecast_horizon is not None and self.forecast_horizon <= 0:
            raise ValueError("forecast_horizon must be positive")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def slice_task(ts: TimeSeries, window: TaskWindow) -> Instance:
    """Split a full series into observed part, forecasting query and answer."""
    past = ts.times <= window.observe_until
    future_idx = np.flatnonzero(~past)
    if not past.any():
        raise InsufficientFutureError(f"no observation at or before {window.observe_until}")
    if window.forecast_steps is not None:
        if future_idx.size < window.forecast_steps:
            raise InsufficientFutureError(
                f"{future_idx.size} event times after {window.observe_until}, need {window.forecast_steps}"
            )
        future_idx = future_idx[: window.forecast_steps]
    else:
        future_idx = future_idx[ts.times[future_idx] <= window.observe_until + window.forecast_horizon]
        if future_idx.size == 0:
            raise InsufficientFutureError(f"no events within the forecast horizon after {window.observe_until}")
    series = TimeSeries(ts.times[past], ts.values[past], ts.observed[past])
    qn, qc = np.nonzero(ts.observed[future_idx])
    rows = future_idx[qn]
    return Instance(series, ForecastQuery(ts.times[rows], qc), ts.values[rows, qc])


def make_tasks(series: Sequence[TimeSeries], window: TaskWindow, channel_count: int, meta: dict | None = None) -> Dataset:
    """Slice every series; series without enough future events are skipped."""
    instances, skipped = [], 0
    for ts in series:
        try:
            instances.append(slice_task(ts, window))
        except InsufficientFutureError:
            skipped += 1
    if skipped:
        log.warning("skipped %d of %d series without a complete forecast window", skipped, len(series))
    meta = dict(meta or {}, window=window.to_dict(), skipped=skipped)
    return Dataset(instances, channel_count, meta)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetStats:
    samples: int
    channels: int
    max_length: int
    max_observations: int
    sparsity: float  # percent of missing (event, channel) cells

    def to_dict(self) -> dict:
        return asdict(self)


def stats(data: Dataset | Sequence[TimeSeries], channel_count: int | None = None) -> DatasetStats:
    if isinstance(data, Dataset):
        series = [inst.full_series() for inst in data]
        channel_count = data.channel_count
    else:
        series = list(data)
        channel_count = channel_count or (series[0].channel_count if series else 0)
    events = sum(len(s) for s in series)
    observed = sum(s.nnz for s in series)
    cells = channel_count * events
    return DatasetStats(
        samples=len(series),
        channels=channel_count,
        max_length=max((len(s) for s in series), default=0),
        max_observations=max((s.nnz for s in series), default=0),
        sparsity=100.0 * (1.0 - observed / cells) if cells else 0.0,
    )


# ---------------------------------------------------------------------------
# CSV and sidecar
# ---------------------------------------------------------------------------

HEADER = ["instance", "time", "channel", "value"]


def read_csv(path, channel_count: int | None = None) -> tuple[list[str], list[TimeSeries], int]:
    """Parse a long-format CSV into ``(instance ids, series, channel count)``."""
    path = Path(path)
    cells: dict[str, dict[tuple[float, int], float]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        if [h.strip() for h in header] != HEADER:
            raise DataError(f"{path}:1: expected header {','.join(HEADER)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not x.strip() for x in row):
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            inst, t_s, c_s, v_s = (x.strip() for x in row)
            if not v_s or v_s.lower() == "nan":
                continue  # explicit missing marker
            try:
                t, c, v = float(t_s), int(c_s), float(v_s)
            except ValueError:
                raise DataError(f"{path}:{lineno}: cannot parse {row}") from None
            if not np.isfinite(t) or not np.isfinite(v):
                raise DataError(f"{path}:{lineno}: non-finite time or value")
            if c < 0 or (channel_count is not None and c >= channel_count):
                raise DataError(f"{path}:{lineno}: channel {c} out of range")
            slot = cells.setdefault(inst, {})
            if (t, c) in slot:
                raise DataError(f"{path}:{lineno}: duplicate cell (instance {inst}, time {t}, channel {c})")
            slot[(t, c)] = v
    if not cells:
        raise DataError(f"{path}: no observations")
    if channel_count is None:
        channel_count = 1 + max(c for slot in cells.values() for _, c in slot)
    ids = list(cells)
    series = [merge_cells(channel_count, [((t, c, v) for (t, c), v in cells[i].items())]) for i in ids]
    return ids, series, channel_count


def write_csv(path, series: Sequence[TimeSeries], ids: Sequence[str] | None = None) -> None:
    ids = list(ids) if ids is not None else [str(i) for i in range(len(series))]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for inst, ts in zip(ids, series):
            for t, c, v in _cells(ts):
                w.writerow([inst, repr(t), c, repr(v)])


def save_dataset(directory, dataset: Dataset) -> Path:
    """Write ``data.csv`` (full series incl. answered future cells) and ``data.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_csv(directory / "data.csv", [inst.full_series() for inst in dataset])
    sidecar = {
        "version": SIDECAR_VERSION,
        "channel_count": dataset.channel_count,
        "time_unit": "abstract units (hours in the medical benchmarks)",
        **{k: v for k, v in dataset.meta.items() if k not in ("skipped",)},
    }
    (directory / "data.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(path, window: TaskWindow | None = None) -> Dataset:
    """Load a dataset directory (or bare CSV) and slice it into forecasting tasks."""
    path = Path(path)
    csv_path = path / "data.csv" if path.is_dir() else path
    side_path = csv_path.with_suffix(".json")
    sidecar = json.loads(side_path.read_text()) if side_path.exists() else {}
    if not csv_path.exists():
        raise DataError(f"{csv_path}: no such file")
    _, series, C = read_csv(csv_path, sidecar.get("channel_count"))
    if window is None:
        if "window" not in sidecar:
            raise DataError(f"{csv_path}: no forecasting window given and no sidecar defines one")
        window = TaskWindow(**sidecar["window"])
    meta = {k: v for k, v in sidecar.items() if k not in ("version", "channel_count", "time_unit")}
    return make_tasks(series, window, C, meta)
