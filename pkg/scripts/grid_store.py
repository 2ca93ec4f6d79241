"""Gridded SST series: the .sstgrid file format, synthetic generators, regions and windows."""

import logging
import math
import os
import struct
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from errors import ConfigError, FormatError, InvariantError, IoError, RangeError
from phase_space import build_delay_attractor

logger = logging.getLogger(__name__)

MAGIC = b"SSTG"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIIIdddddd")
PAYLOAD_DTYPE = np.dtype("<f4")
SYNTHETIC_KINDS = ("advecting_wave", "eddy", "seasonal")
DEFAULT_T0_EPOCH_DAYS = 19358.0  # 2023-01-01


@dataclass(frozen=True, eq=False)
class GridSeries:
    data: np.ndarray
    lat0: float = 0.0
    lon0: float = 0.0
    dlat: float = 0.25
    dlon: float = 0.25
    t0: float = DEFAULT_T0_EPOCH_DAYS
    dt_days: float = 1.0

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise InvariantError(f"GridSeries data must be T x H x W, got shape {data.shape}")
        if min(data.shape) < 1:
            raise InvariantError(f"GridSeries sizes must be >= 1, got {data.shape}")
        for name in ("lat0", "lon0", "dlat", "dlon", "t0", "dt_days"):
            if not math.isfinite(float(getattr(self, name))):
                raise InvariantError(f"GridSeries {name} must be finite, got {getattr(self, name)!r}")
        if self.dt_days <= 0 or self.dlat <= 0 or self.dlon <= 0:
            raise InvariantError(
                f"GridSeries spacing must be positive (dlat={self.dlat}, dlon={self.dlon}, dt_days={self.dt_days})"
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def T(self) -> int:
        return int(self.data.shape[0])

    @property
    def H(self) -> int:
        return int(self.data.shape[1])

    @property
    def W(self) -> int:
        return int(self.data.shape[2])

    @property
    def N(self) -> int:
        return self.H * self.W

    def metadata(self) -> Dict[str, float]:
        return {
            "lat0": self.lat0,
            "lon0": self.lon0,
            "dlat": self.dlat,
            "dlon": self.dlon,
            "t0": self.t0,
            "dt_days": self.dt_days,
        }

    def point_series(self, target_index: int) -> np.ndarray:
        row, col = divmod(int(target_index), self.W)
        return self.data[:, row, col].astype(np.float64)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GridSeries):
            return NotImplemented
        return (
            self.data.shape == other.data.shape
            and self.metadata() == other.metadata()
            and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32))
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class SamplingConfig:
    M: int = 30
    L: int = 30
    t_gap: int = 5
    delta_t: int = 1
    split_ratio: float = 0.5

    def __post_init__(self) -> None:
        if self.M < 2:
            raise ConfigError(f"M must be >= 2, got {self.M}")
        if self.L < 1:
            raise ConfigError(f"L must be >= 1, got {self.L}")
        if self.t_gap < 1:
            raise ConfigError(f"t_gap must be >= 1, got {self.t_gap}")
        if self.delta_t < 1:
            raise ConfigError(f"delta_t must be >= 1, got {self.delta_t}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"split_ratio must be in (0, 1), got {self.split_ratio}")

    @property
    def span(self) -> int:
        return self.M + self.L - 1

    @classmethod
    def from_config(cls, section: Dict[str, Any]) -> "SamplingConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in (section or {}).items():
            if key not in known or value is None:
                continue
            kwargs[key] = float(value) if key == "split_ratio" else int(value)
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True, eq=False)
class WindowSample:
    input_frames: np.ndarray
    target_index: int
    delay_target: np.ndarray
    window_start: int
    land_mask: Optional[np.ndarray] = field(default=None)
    region: str = ""

    @property
    def M(self) -> int:
        return int(self.input_frames.shape[0])

    @property
    def L(self) -> int:
        return int(self.delay_target.shape[0])

    @property
    def forecast_truth(self) -> np.ndarray:
        """Last column of the delay attractor: x_k over [start+M-1, start+M+L-1)."""
        return self.delay_target[:, -1]

    @property
    def last_observed(self) -> float:
        """The observation one step before the first forecast time."""
        return float(self.delay_target[0, -2])


def _check_finite_header(values: Tuple[float, ...]) -> None:
    if not all(math.isfinite(v) for v in values):
        raise FormatError(f"Non-finite header value in {values}")


def load_grid_series(path: str) -> GridSeries:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise IoError(f"Cannot read {path}: {exc}") from exc

    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: file too short for a .sstgrid header ({len(raw)} bytes)")
    magic, version, T, H, W, lat0, lon0, dlat, dlon, t0, dt_days = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}, expected {FORMAT_VERSION}")
    _check_finite_header((lat0, lon0, dlat, dlon, t0, dt_days))
    if min(T, H, W) < 1:
        raise FormatError(f"{path}: invalid sizes T={T} H={H} W={W}")

    expected = T * H * W * PAYLOAD_DTYPE.itemsize
    payload = raw[HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")

    data = np.frombuffer(payload, dtype=PAYLOAD_DTYPE).reshape(T, H, W).astype(np.float32)
    try:
        return GridSeries(data, lat0=lat0, lon0=lon0, dlat=dlat, dlon=dlon, t0=t0, dt_days=dt_days)
    except InvariantError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_grid_series(series: GridSeries, path: str) -> None:
    if not isinstance(series, GridSeries):
        raise InvariantError(f"Expected a GridSeries, got {type(series).__name__}")
    header = HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        series.T,
        series.H,
        series.W,
        series.lat0,
        series.lon0,
        series.dlat,
        series.dlon,
        series.t0,
        series.dt_days,
    )
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(header)
            f.write(series.data.astype(PAYLOAD_DTYPE, copy=False).tobytes(order="C"))
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"Cannot write {path}: {exc}") from exc


def generate_synthetic(
    seed: int,
    T: int,
    H: int,
    W: int,
    kind: str = "advecting_wave",
    *,
    base: float = 20.0,
    amplitude: float = 2.0,
    shift: Tuple[float, float] = (1.0, 0.0),
    period: float = 60.0,
    noise: float = 0.0,
    lat0: float = 20.0,
    lon0: float = -40.0,
    dlat: float = 0.25,
    dlon: float = 0.25,
    t0: float = DEFAULT_T0_EPOCH_DAYS,
    dt_days: float = 1.0,
) -> GridSeries:
    """Deterministic stand-in fields for desk-scale runs.

    advecting_wave: two superposed plane waves translated by ``shift`` cells per step,
    so frame t+1 equals frame t displaced by (shift_i, shift_j).
    eddy: a Gaussian warm-core bump moving by the integer ``shift`` along a straight track that
    wraps around the grid edges, so it stays in view for any T.
    seasonal: a period-``period`` oscillation over a meridional/zonal gradient.
    """
    if kind not in SYNTHETIC_KINDS:
        allowed = ", ".join(SYNTHETIC_KINDS)
        raise ConfigError(f"Unknown synthetic kind '{kind}'. Supported values: {allowed}.")
    if min(T, H, W) < 1:
        raise ConfigError(f"Synthetic sizes must be >= 1, got T={T} H={H} W={W}")

    rng = np.random.default_rng(seed)
    t = np.arange(T, dtype=np.float64)[:, None, None]
    i = np.arange(H, dtype=np.float64)[None, :, None]
    j = np.arange(W, dtype=np.float64)[None, None, :]
    s_i, s_j = float(shift[0]), float(shift[1])

    if kind == "advecting_wave":
        field = np.full((T, H, W), base, dtype=np.float64)
        for weight in (1.0, 0.5):
            k_i, k_j = rng.uniform(2.0 * np.pi / 24.0, 2.0 * np.pi / 10.0, size=2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            field = field + weight * amplitude * np.sin(k_i * (i - s_i * t) + k_j * (j - s_j * t) + phase)
    elif kind == "eddy":
        sigma = max(1.0, min(H, W) / 6.0)
        c_i = float(rng.integers(0, max(1, H // 4) + 1)) + round(sigma)
        c_j = float(rng.integers(0, max(1, W // 4) + 1)) + round(sigma)
        step_i, step_j = round(s_i), round(s_j)
        # periodic track: the bump re-enters on the opposite edge instead of leaving the grid
        d_i = np.mod(i - (c_i + step_i * t) + H / 2.0, H) - H / 2.0
        d_j = np.mod(j - (c_j + step_j * t) + W / 2.0, W) - W / 2.0
        r2 = d_i**2 + d_j**2
        field = base + amplitude * np.exp(-r2 / (2.0 * sigma**2))
    else:
        grad_i, grad_j = rng.uniform(-0.2, 0.2, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        spatial = grad_i * i + grad_j * j
        field = base + spatial + amplitude * np.sin(2.0 * np.pi * t / period + phase + 0.05 * i)

    field = np.broadcast_to(field, (T, H, W)).astype(np.float64)
    if noise > 0:
        field = field + rng.normal(0.0, noise, size=field.shape)
    return GridSeries(
        field.astype(np.float32), lat0=lat0, lon0=lon0, dlat=dlat, dlon=dlon, t0=t0, dt_days=dt_days
    )


def region_bounds(
    series: GridSeries, center_lat: float, center_lon: float, span_deg: float
) -> Tuple[int, int, int, int]:
    """(row0, col0, rows, cols) of the span_deg box centered on (center_lat, center_lon)."""
    rows = int(math.floor(span_deg / series.dlat + 1e-9))
    cols = int(math.floor(span_deg / series.dlon + 1e-9))
    if rows < 1 or cols < 1:
        raise RangeError(f"Span {span_deg} deg is smaller than one grid cell ({series.dlat} x {series.dlon})")
    row0 = int(math.floor((center_lat - series.lat0) / series.dlat - rows / 2.0 + 0.5 + 1e-9))
    col0 = int(math.floor((center_lon - series.lon0) / series.dlon - cols / 2.0 + 0.5 + 1e-9))
    if row0 < 0 or col0 < 0 or row0 + rows > series.H or col0 + cols > series.W:
        raise RangeError(
            f"Box of {span_deg} deg at ({center_lat}, {center_lon}) covers rows [{row0}, {row0 + rows}) "
            f"cols [{col0}, {col0 + cols}), outside the {series.H} x {series.W} extent"
        )
    return row0, col0, rows, cols


def cell_center(series: GridSeries, row: int, col: int) -> Tuple[float, float]:
    return series.lat0 + (row + 0.5) * series.dlat, series.lon0 + (col + 0.5) * series.dlon


def extent_center(series: GridSeries) -> Tuple[float, float]:
    return series.lat0 + series.H * series.dlat / 2.0, series.lon0 + series.W * series.dlon / 2.0


def extract_region(series: GridSeries, center_lat: float, center_lon: float, span_deg: float) -> GridSeries:
    row0, col0, rows, cols = region_bounds(series, center_lat, center_lon, span_deg)
    return replace(
        series,
        data=series.data[:, row0:row0 + rows, col0:col0 + cols],
        lat0=series.lat0 + row0 * series.dlat,
        lon0=series.lon0 + col0 * series.dlon,
    )


def temporal_split(series: GridSeries, split_ratio: float) -> Tuple[GridSeries, GridSeries]:
    if series.T < 2:
        raise RangeError(f"temporal_split needs T >= 2, got T={series.T}")
    if not 0.0 < split_ratio < 1.0:
        raise ConfigError(f"split_ratio must be in (0, 1), got {split_ratio}")
    n_train = min(series.T - 1, max(1, int(math.ceil(split_ratio * series.T - 1e-12))))
    train = replace(series, data=series.data[:n_train])
    test = replace(series, data=series.data[n_train:], t0=series.t0 + n_train * series.dt_days)
    return train, test


def subsample(series: GridSeries, delta_t: int) -> GridSeries:
    if delta_t < 1:
        raise ConfigError(f"delta_t must be >= 1, got {delta_t}")
    if delta_t == 1:
        return series
    return replace(series, data=series.data[::delta_t], dt_days=series.dt_days * delta_t)


def slice_time(series: GridSeries, start: int, stop: Optional[int] = None) -> GridSeries:
    stop = series.T if stop is None else min(series.T, stop)
    if not 0 <= start < stop:
        raise RangeError(f"Time slice [{start}, {stop}) is empty for T={series.T}")
    return replace(series, data=series.data[start:stop], t0=series.t0 + start * series.dt_days)


def default_target_index(H: int, W: int) -> int:
    return (H // 2) * W + (W // 2)


def sample_windows(
    series: GridSeries,
    cfg: SamplingConfig,
    target_index: Optional[int] = None,
    region: str = "",
) -> List[WindowSample]:
    series = subsample(series, cfg.delta_t)
    if target_index is None:
        target_index = default_target_index(series.H, series.W)
    if not 0 <= target_index < series.N:
        raise RangeError(f"target_index {target_index} outside [0, {series.N})")
    if series.T < cfg.span:
        raise RangeError(
            f"Series has {series.T} frames after delta_t={cfg.delta_t}; need at least M+L-1={cfg.span}"
        )

    frames = series.data.astype(np.float64)
    target = series.point_series(target_index)
    samples: List[WindowSample] = []
    dropped = 0
    for start in range(0, series.T - cfg.span + 1, cfg.t_gap):
        segment = target[start:start + cfg.span]
        if not np.all(np.isfinite(segment)):
            dropped += 1
            continue
        window = frames[start:start + cfg.M]
        land = ~np.isfinite(window).all(axis=0)
        samples.append(
            WindowSample(
                input_frames=np.where(np.isfinite(window), window, 0.0),
                target_index=int(target_index),
                delay_target=build_delay_attractor(segment, cfg.M, cfg.L, target_index).matrix,
                window_start=start,
                land_mask=land,
                region=region,
            )
        )
    if dropped:
        logger.info("Dropped %d window(s) with NaN at target index %d", dropped, target_index)
    return samples
