"""Flow-series I/O, normalization, windowing, splits, and the HA baseline.

On-disk formats:

* STDNF flow binary (little-endian): magic ``STDN``, u8 version (1), u8 dtype
  tag (0 = float32), u16 reserved (0), then six u32 fields: T_total, N, C,
  steps_per_day, start_day_of_week, start_slot_of_day. 32-byte header, then
  T_total*N*C float32 values, row-major with t outermost, then n, then c.
* Edge list CSV with header ``from,to,cost``; 0-based node ids.
* Whitespace/CSV matrix dumps (one time step per line) convert to STDNF.
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DataSizeError, DimensionError, FormatError
from .graph import Edge, GraphSpec, build_graph

MAGIC = b"STDN"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sBBH6I")
HEADER_SIZE = _HEADER.size  # 32


@dataclass
class FlowSeries:
    """A full traffic series with calendar anchoring and normalization stats.

    values has shape (T_total, N, C); mean/std are per-channel, shape (C,),
    and stay None until fit_normalizer runs. Treat instances as immutable
    once fitted.
    """

    values: np.ndarray
    steps_per_day: int
    start_day_of_week: int = 0
    start_slot_of_day: int = 0
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3 or min(v.shape) < 1:
            raise DimensionError(
                f"flow values must be (T_total, N, C) with positive dims, got {v.shape}")
        if self.steps_per_day < 1:
            raise ContractError("steps_per_day must be positive")
        if not 0 <= self.start_day_of_week <= 6:
            raise ContractError("start_day_of_week must be in [0, 6]")
        if not 0 <= self.start_slot_of_day < self.steps_per_day:
            raise ContractError("start_slot_of_day must be in [0, steps_per_day)")
        self.values = v

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass
class SampleWindow:
    """One training sample: T normalized input steps, T' raw-scale targets.

    Calendar indices cover both ranges and continue consecutively from input
    to output. mean/std are carried along so raw-scale views of x (e.g. the
    HA baseline) stay available.
    """

    x: np.ndarray           # (T, N, C) normalized
    y: np.ndarray           # (T', N, C) raw scale
    tod_in: np.ndarray      # (T,) ints in [0, steps_per_day)
    dow_in: np.ndarray      # (T,) ints in [0, 7)
    tod_out: np.ndarray     # (T',)
    dow_out: np.ndarray     # (T',)
    mean: np.ndarray        # (C,)
    std: np.ndarray         # (C,)


@dataclass
class DatasetSplits:
    train: list[SampleWindow]
    val: list[SampleWindow]
    test: list[SampleWindow]


# -- STDNF binary -------------------------------------------------------------

def write_flow_binary(path, series: FlowSeries) -> None:
    t_total, n, c = series.shape
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, 0, t_total, n, c,
                          series.steps_per_day, series.start_day_of_week,
                          series.start_slot_of_day)
    payload = np.ascontiguousarray(series.values, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_flow_binary(path) -> FlowSeries:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"flow file shorter than {HEADER_SIZE}-byte header",
                          offset=len(raw))
    magic, version, dtype, _reserved, t_total, n, c, spd, dow, slot = \
        _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype tag {dtype}", offset=5)
    if min(t_total, n, c) < 1:
        raise FormatError(f"non-positive dimensions ({t_total}, {n}, {c})", offset=8)
    expected = HEADER_SIZE + 4 * t_total * n * c
    if len(raw) < expected:
        raise FormatError(
            f"payload truncated: expected {expected} bytes, file has {len(raw)}",
            offset=len(raw))
    if len(raw) > expected:
        raise FormatError(f"{len(raw) - expected} trailing bytes after payload",
                          offset=expected)
    values = np.frombuffer(raw, dtype="<f4", count=t_total * n * c,
                           offset=HEADER_SIZE).reshape(t_total, n, c)
    try:
        return FlowSeries(values=values.copy(), steps_per_day=spd,
                          start_day_of_week=dow, start_slot_of_day=slot)
    except (ContractError, DimensionError) as exc:
        raise FormatError(f"invalid header fields: {exc}", offset=8) from exc


# -- edge list CSV ------------------------------------------------------------

def write_edge_csv(path, edges: Sequence[Edge]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["from", "to", "cost"])
        for i, j, cost in edges:
            writer.writerow([i, j, repr(float(cost))])


def read_edge_csv(path) -> list[Edge]:
    edges: list[Edge] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["from", "to", "cost"]:
            raise FormatError(f"edge CSV must start with 'from,to,cost', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise FormatError(f"line {lineno}: expected 3 fields, got {len(row)}")
            try:
                edges.append((int(row[0]), int(row[1]), float(row[2])))
            except ValueError as exc:
                raise FormatError(f"line {lineno}: {exc}") from exc
    return edges


# -- matrix dump converter ----------------------------------------------------

def read_matrix_dump(path, steps_per_day: int, channels: int = 1,
                     start_day_of_week: int = 0,
                     start_slot_of_day: int = 0) -> FlowSeries:
    """Parse a text dump (one time step per line, comma or whitespace
    separated, N*C values each) into a FlowSeries."""
    rows: list[list[float]] = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",") if "," in line else line.split()
            try:
                row = [float(p) for p in parts]
            except ValueError as exc:
                raise FormatError(f"line {lineno}: {exc}") from exc
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise FormatError(
                    f"line {lineno}: expected {width} values, got {len(row)}")
            rows.append(row)
    if not rows:
        raise FormatError("matrix dump contains no data rows")
    if width % channels != 0:
        raise FormatError(f"row width {width} not divisible by channels {channels}")
    values = np.array(rows, dtype=np.float32).reshape(len(rows), width // channels,
                                                      channels)
    return FlowSeries(values=values, steps_per_day=steps_per_day,
                      start_day_of_week=start_day_of_week,
                      start_slot_of_day=start_slot_of_day)


# -- normalization ------------------------------------------------------------

def fit_normalizer(series: FlowSeries, train_fraction: float = 0.6) -> FlowSeries:
    """Fit per-channel z-score stats on the leading train_fraction of steps.

    Population std; zero-variance channels fall back to std 1 with a warning.
    """
    t_train = int(series.shape[0] * train_fraction)
    if t_train < 1:
        raise DataSizeError("training portion is empty; series too short")
    head = series.values[:t_train].astype(np.float64)
    mean = head.mean(axis=(0, 1))
    std = head.std(axis=(0, 1))
    flat = std == 0.0
    if flat.any():
        warnings.warn(
            f"channels {np.flatnonzero(flat).tolist()} have zero variance on the "
            "training portion; std clamped to 1", RuntimeWarning, stacklevel=2)
        std = np.where(flat, 1.0, std)
    series.mean = mean
    series.std = std
    return series


def normalize(series: FlowSeries, values: np.ndarray) -> np.ndarray:
    if series.mean is None or series.std is None:
        raise ContractError("normalizer not fitted; call fit_normalizer first")
    return (values - series.mean) / series.std


def denormalize(series: FlowSeries, values: np.ndarray) -> np.ndarray:
    if series.mean is None or series.std is None:
        raise ContractError("normalizer not fitted; call fit_normalizer first")
    return values * series.std + series.mean


# -- windowing and splits -----------------------------------------------------

def calendar_indices(series: FlowSeries, start: int,
                     length: int) -> tuple[np.ndarray, np.ndarray]:
    """(time-of-day, day-of-week) index arrays for ``length`` steps from
    absolute step ``start``."""
    steps = start + np.arange(length)
    abs_slot = series.start_slot_of_day + steps
    tod = abs_slot % series.steps_per_day
    dow = (series.start_day_of_week + abs_slot // series.steps_per_day) % 7
    return tod.astype(np.int64), dow.astype(np.int64)


def make_windows(series: FlowSeries, t_in: int = 12,
                 t_out: int = 12) -> list[SampleWindow]:
    """Stride-1 sliding windows: T normalized inputs, T' raw targets."""
    t_total = series.shape[0]
    count = t_total - t_in - t_out + 1
    if count < 1:
        raise DataSizeError(
            f"series of {t_total} steps cannot fit one {t_in}+{t_out} window")
    if series.mean is None:
        raise ContractError("normalizer not fitted; call fit_normalizer first")
    norm = normalize(series, series.values.astype(np.float64))
    mean = series.mean.copy()
    std = series.std.copy()
    windows = []
    for i in range(count):
        tod_in, dow_in = calendar_indices(series, i, t_in)
        tod_out, dow_out = calendar_indices(series, i + t_in, t_out)
        windows.append(SampleWindow(
            x=norm[i:i + t_in],
            y=series.values[i + t_in:i + t_in + t_out].astype(np.float64),
            tod_in=tod_in, dow_in=dow_in, tod_out=tod_out, dow_out=dow_out,
            mean=mean, std=std))
    return windows


def split_622(samples: Sequence[SampleWindow]) -> DatasetSplits:
    """Contiguous 6:2:2 split preserving time order."""
    n = len(samples)
    if n < 5:
        raise DataSizeError(f"need at least 5 samples to split 6:2:2, got {n}")
    n_train = int(n * 0.6)
    n_val = int(n * 0.2)
    samples = list(samples)
    return DatasetSplits(train=samples[:n_train],
                         val=samples[n_train:n_train + n_val],
                         test=samples[n_train + n_val:])


# -- synthetic data -----------------------------------------------------------

def synth_generate(n_nodes: int, days: int, seed: int, trend_amp: float = 8.0,
                   season_amp: float = 50.0, noise_std: float = 1.0,
                   steps_per_day: int = 288,
                   ) -> tuple[FlowSeries, GraphSpec]:
    """Deterministic synthetic traffic on a ring-plus-chords graph.

    Per-node signal: base level + two daily harmonics + weekly modulation and
    a slow drift (both scaled by trend_amp) + Gaussian noise, with each node
    blending a lagged copy of its ring predecessor so neighbors correlate.
    Values are clamped at 0. With trend_amp=0 and noise_std=0 the series is
    exactly periodic with period steps_per_day.
    """
    if n_nodes < 2:
        raise ContractError("need at least 2 nodes")
    if days < 1:
        raise ContractError("need at least 1 day")
    rng = np.random.default_rng(seed)
    t_total = days * steps_per_day
    step = np.arange(t_total, dtype=np.float64)
    day_phase = 2.0 * np.pi * step / steps_per_day
    week_phase = 2.0 * np.pi * step / (7.0 * steps_per_day)

    base = 100.0 + rng.uniform(-10.0, 10.0, size=n_nodes)
    phase1 = rng.uniform(0.0, 2.0 * np.pi, size=n_nodes)
    phase2 = rng.uniform(0.0, 2.0 * np.pi, size=n_nodes)
    amp1 = season_amp * rng.uniform(0.8, 1.2, size=n_nodes)
    amp2 = 0.35 * season_amp * rng.uniform(0.8, 1.2, size=n_nodes)
    noise = rng.normal(0.0, noise_std, size=(t_total, n_nodes)) if noise_std > 0 \
        else np.zeros((t_total, n_nodes))

    daily = (amp1[None, :] * np.sin(day_phase[:, None] + phase1[None, :])
             + amp2[None, :] * np.sin(2.0 * day_phase[:, None] + phase2[None, :]))
    weekly = trend_amp * np.sin(week_phase)[:, None] * np.ones((1, n_nodes))
    drift = trend_amp * (step / max(t_total - 1, 1))[:, None] * np.ones((1, n_nodes))
    signal = base[None, :] + daily + weekly + drift + noise

    # each node blends in its ring predecessor, lagged by a few steps; the
    # lag wraps circularly (t_total is a whole number of days) so noiseless
    # series stay exactly periodic
    lag = max(1, steps_per_day // 96)
    prev = np.roll(np.arange(n_nodes), 1)
    mixed = 0.7 * signal + 0.3 * np.roll(signal, lag, axis=0)[:, prev]
    values = np.maximum(mixed, 0.0)[:, :, None].astype(np.float32)

    edges: list[Edge] = []
    for i in range(n_nodes):
        j = (i + 1) % n_nodes
        edges.append((i, j, 1.0))
    n_chords = max(1, n_nodes // 4)
    for _ in range(n_chords):
        i, j = rng.integers(0, n_nodes, size=2)
        if i != j:
            edges.append((int(i), int(j), float(rng.uniform(1.0, 3.0))))

    series = FlowSeries(values=values, steps_per_day=steps_per_day,
                        start_day_of_week=0, start_slot_of_day=0)
    graph = build_graph(edges, n_nodes, mode="binary",
                        k_r=min(32, max(1, n_nodes - 1)))
    return series, graph


# -- historical average baseline ----------------------------------------------

def ha_baseline(window: SampleWindow) -> np.ndarray:
    """Predict the raw-scale mean of the input window, repeated over T' steps."""
    raw_x = window.x * window.std + window.mean
    level = raw_x.mean(axis=0, keepdims=True)
    return np.broadcast_to(level, window.y.shape).copy()
