"""Training, metrics and experiment harnesses for OptFormer.

A run splits a series in time, samples windows from each half, trains on the first
and reports RMSE/MAPE (in °C and percent) on the second, next to a persistence
baseline. ``parallel_evaluate``, ``run_sweep`` and ``run_ablation`` repeat runs over
spatial windows, configuration axes and component toggles.
"""

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timedelta, timezone
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, DivergenceError, RangeError, ShapeError
from flow_farneback import FlowParams, FlowSequence, estimate_flow_sequence
from grid_store import (
    GridSeries,
    SamplingConfig,
    WindowSample,
    cell_center,
    extent_center,
    extract_region,
    region_bounds,
    sample_windows,
    slice_time,
    temporal_split,
)
from optformer_model import ModelConfig, OptFormer, with_ablation
from phase_space import embedding_dimension_ok, extract_forecast, normalize_extract_mode
from tensor_autodiff import Tensor, as_tensor, backward, mean, mul, sub
from utils import EPOCH, config_section, day_of_year, epoch_days_to_datetime, write_csv

logger = logging.getLogger(__name__)

MAPE_GUARD = 1e-6
CONVERGENCE_TOLERANCE = 0.05
SWEEP_AXES = ("area", "delta_t", "horizon", "season")
DEFAULT_SEASONS = {"spring": 80, "summer": 172, "autumn": 266, "winter": 355}
ABLATIONS = (
    ("full", True, True, True),
    ("-optical_attention", False, True, True),
    ("-inception", True, False, True),
    ("-autocorrelation", True, True, False),
)

FlowCache = Dict[Tuple[str, int], FlowSequence]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 30
    epochs: int = 220
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    normalize: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")

    @classmethod
    def from_config(cls, section: Dict[str, Any]) -> "TrainConfig":
        kwargs: Dict[str, Any] = {}
        for f in fields(cls):
            value = (section or {}).get(f.name)
            if value is None:
                continue
            if f.name in ("batch_size", "epochs", "seed"):
                kwargs[f.name] = int(value)
            elif f.name == "normalize":
                kwargs[f.name] = bool(value)
            else:
                kwargs[f.name] = float(value)
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class EvaluationConfig:
    extract_mode: str = "last_column"
    target_index: Optional[int] = None
    eval_span: float = 1.0
    window_span: float = 2.0
    area_spans: Tuple[float, ...] = (1.0, 2.0, 4.0)
    delta_ts: Tuple[int, ...] = (1, 3, 5)
    horizons: Tuple[int, ...] = (15, 30, 45)
    seasons: Tuple[Tuple[str, int], ...] = tuple(DEFAULT_SEASONS.items())
    season_frames: int = 240
    ablation_seeds: int = 5
    workers: int = 1
    box_dimension: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "extract_mode", normalize_extract_mode(self.extract_mode))
        if self.eval_span <= 0 or self.window_span <= 0:
            raise ConfigError(f"eval_span and window_span must be > 0, got {self.eval_span}, {self.window_span}")
        if self.season_frames < 2:
            raise ConfigError(f"season_frames must be >= 2, got {self.season_frames}")
        if self.ablation_seeds < 1:
            raise ConfigError(f"ablation_seeds must be >= 1, got {self.ablation_seeds}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.box_dimension is not None and not self.box_dimension > 0:
            raise ConfigError(f"box_dimension must be > 0, got {self.box_dimension}")
        for name, day in self.seasons:
            if not 1 <= int(day) <= 366:
                raise ConfigError(f"Season '{name}' offset must be a day of year in [1, 366], got {day}")

    @classmethod
    def from_config(cls, section: Dict[str, Any]) -> "EvaluationConfig":
        section = section or {}
        kwargs: Dict[str, Any] = {}
        for name in ("extract_mode",):
            if section.get(name) is not None:
                kwargs[name] = str(section[name])
        for name in ("target_index", "season_frames", "ablation_seeds", "workers"):
            if section.get(name) is not None:
                kwargs[name] = int(section[name])
        for name in ("eval_span", "window_span", "box_dimension"):
            if section.get(name) is not None:
                kwargs[name] = float(section[name])
        if section.get("area_spans") is not None:
            kwargs["area_spans"] = tuple(float(v) for v in section["area_spans"])
        for name in ("delta_ts", "horizons"):
            if section.get(name) is not None:
                kwargs[name] = tuple(int(v) for v in section[name])
        if section.get("seasons") is not None:
            kwargs["seasons"] = tuple((str(k), int(v)) for k, v in dict(section["seasons"]).items())
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in ("area_spans", "delta_ts", "horizons"):
            out[name] = list(out[name])
        out["seasons"] = dict(self.seasons)
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    flow: FlowParams = field(default_factory=FlowParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> "ExperimentConfig":
        return cls(
            sampling=SamplingConfig.from_config(config_section(config, "sampling")),
            flow=FlowParams.from_config(config_section(config, "flow")),
            model=ModelConfig.from_config(config_section(config, "model")),
            train=TrainConfig.from_config(config_section(config, "train")),
            evaluation=EvaluationConfig.from_config(config_section(config, "evaluation")),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sampling": self.sampling.to_dict(),
            "flow": self.flow.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "evaluation": self.evaluation.to_dict(),
        }


REPORT_TRAIN_FIELDS = ("learning_rate", "beta1", "beta2", "eps", "batch_size", "epochs", "normalize")
REPORT_MODEL_FIELDS = ("d_model", "d_ff", "kernel_sizes", "top_k")


def report_metadata(exp: ExperimentConfig, seed: int) -> Dict[str, Any]:
    """Config fields written above the header row of every report CSV."""
    meta: Dict[str, Any] = {"seed": seed, "optimizer": "adam"}
    meta.update((name, getattr(exp.train, name)) for name in REPORT_TRAIN_FIELDS)
    meta.update(exp.sampling.to_dict())
    meta.update((name, getattr(exp.model, name)) for name in REPORT_MODEL_FIELDS)
    meta.update((f"flow.{name}", value) for name, value in exp.flow.to_dict().items())
    meta["extract_mode"] = exp.evaluation.extract_mode
    return meta


@dataclass
class WindowMetrics:
    region: str
    window_start: Optional[int]
    target_index: int
    rmse: float
    mape: float


@dataclass
class EvalReport:
    rmse: float
    mape: float
    windows: List[WindowMetrics] = field(default_factory=list)
    loss_curve: List[float] = field(default_factory=list)

    @property
    def convergence_epoch(self) -> Optional[int]:
        return convergence_epoch(self.loss_curve) if self.loss_curve else None


class TrainResult(NamedTuple):
    params: Dict[str, Tensor]
    loss_curve: List[float]


class RunOutcome(NamedTuple):
    model: OptFormer
    report: EvalReport
    baseline: EvalReport


@dataclass(frozen=True)
class Normalizer:
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, samples: Sequence[WindowSample]) -> "Normalizer":
        """Pooled z-score statistics over ocean cells and delay targets of the given samples."""
        pooled = []
        for s in samples:
            ocean = s.input_frames if s.land_mask is None else s.input_frames[:, ~s.land_mask]
            pooled.append(ocean.ravel())
            pooled.append(s.delay_target.ravel())
        values = np.concatenate(pooled) if pooled else np.zeros(1)
        std = float(values.std())
        return cls(mean=float(values.mean()), std=std if std > 0 else 1.0)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


class Forecaster:
    """Wraps a model with its normalization and a flow cache keyed by (region, window_start)."""

    def __init__(self, model: OptFormer, flow_params: FlowParams, cache: Optional[FlowCache] = None) -> None:
        self.model = model
        self.flow_params = flow_params
        self.cache: FlowCache = {} if cache is None else cache

    @property
    def normalizer(self) -> Normalizer:
        return Normalizer(self.model.norm_mean, self.model.norm_std)

    def prepare_frames(self, frames: np.ndarray, land_mask: Optional[np.ndarray] = None) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        land = ~np.isfinite(frames).all(axis=0) if land_mask is None else land_mask
        prepared = self.normalizer.normalize(np.where(np.isfinite(frames), frames, 0.0))
        prepared[:, land] = 0.0
        return prepared

    def flows_for(self, key: Tuple[str, int], prepared: np.ndarray) -> Optional[FlowSequence]:
        if not self.model.config.use_optical_attention:
            return None
        flows = self.cache.get(key)
        if flows is None:
            flows = estimate_flow_sequence(prepared, self.flow_params)
            self.cache[key] = flows
        return flows

    def prepare(self, samples: Sequence[WindowSample]) -> Tuple[np.ndarray, Optional[List[FlowSequence]]]:
        X = np.stack([self.prepare_frames(s.input_frames, s.land_mask) for s in samples])
        flows = [self.flows_for((s.region, s.window_start), X[i]) for i, s in enumerate(samples)]
        return X, (None if flows[0] is None else flows)

    def predict_prepared(self, X: np.ndarray, flows: Optional[List[FlowSequence]]) -> np.ndarray:
        D_hat = self.model.forward(Tensor(X), flows).values
        return self.normalizer.denormalize(D_hat)

    def predict(self, samples: Sequence[WindowSample]) -> np.ndarray:
        """Predicted delay attractors, Batch x L x M, in °C."""
        X, flows = self.prepare(samples)
        return self.predict_prepared(X, flows)


class PersistencePredictor:
    def predict(self, samples: Sequence[WindowSample]) -> np.ndarray:
        return np.stack([np.full((s.L, s.M), s.last_observed) for s in samples])


class OraclePredictor:
    def predict(self, samples: Sequence[WindowSample]) -> np.ndarray:
        return np.stack([s.delay_target for s in samples])


class Adam:
    def __init__(self, params: Sequence[Tensor], cfg: TrainConfig) -> None:
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c = self.cfg
        bias1 = 1.0 - c.beta1**self.t
        bias2 = 1.0 - c.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= c.beta1
            m += (1.0 - c.beta1) * p.grad
            v *= c.beta2
            v += (1.0 - c.beta2) * p.grad**2
            p.values -= c.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + c.eps)


def mse_loss(pred: Tensor, truth: Tensor) -> Tensor:
    pred, truth = as_tensor(pred), as_tensor(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"mse_loss: shape mismatch {pred.shape} vs {truth.shape}")
    diff = sub(pred, truth)
    return mean(mul(diff, diff))


def _paired(pred: Iterable[float], truth: Iterable[float], op: str) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ShapeError(f"{op}: length mismatch {p.size} vs {t.size}")
    if p.size == 0:
        raise RangeError(f"{op}: empty input")
    return p, t


def rmse(pred: Iterable[float], truth: Iterable[float]) -> float:
    p, t = _paired(pred, truth, "rmse")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mape(pred: Iterable[float], truth: Iterable[float]) -> float:
    p, t = _paired(pred, truth, "mape")
    if np.any(np.abs(t) <= MAPE_GUARD):
        raise RangeError(f"mape: truth values must satisfy |truth| > {MAPE_GUARD}")
    return float(np.mean(np.abs((p - t) / t)) * 100.0)


def convergence_epoch(loss_curve: Sequence[float], tolerance: float = CONVERGENCE_TOLERANCE) -> int:
    """First epoch (1-based) whose loss is within ``tolerance`` of the final loss."""
    if not loss_curve:
        raise RangeError("convergence_epoch: empty loss curve")
    final = float(loss_curve[-1])
    for epoch, loss in enumerate(loss_curve, start=1):
        if abs(float(loss) - final) <= tolerance * abs(final):
            return epoch
    return len(loss_curve)


def train(
    model: OptFormer,
    samples: Sequence[WindowSample],
    flow_params: FlowParams,
    cfg: TrainConfig,
    cache: Optional[FlowCache] = None,
) -> TrainResult:
    if not samples:
        raise RangeError("train: no training samples")
    shapes = {(s.M, s.L) + s.input_frames.shape[1:] for s in samples}
    expected = (model.config.M, model.config.L, model.config.H, model.config.W)
    if shapes != {expected}:
        raise ShapeError(f"train: sample shapes {sorted(shapes)} do not match model (M, L, H, W)={expected}")

    normalizer = Normalizer.fit(samples) if cfg.normalize else Normalizer()
    model.norm_mean, model.norm_std = normalizer.mean, normalizer.std
    forecaster = Forecaster(model, flow_params, cache)
    X_all, flows_all = forecaster.prepare(samples)
    D_all = normalizer.normalize(np.stack([s.delay_target for s in samples]))

    optimizer = Adam(model.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    n = len(samples)
    loss_curve: List[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            flows = None if flows_all is None else [flows_all[i] for i in idx]
            optimizer.zero_grad()
            loss = mse_loss(model.forward(Tensor(X_all[idx]), flows), Tensor(D_all[idx]))
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, value)
            backward(loss)
            optimizer.step()
            total += value * len(idx)
        loss_curve.append(total / n)
        logger.debug("epoch %d loss %.6g", epoch + 1, loss_curve[-1])
    logger.info("Trained %d epoch(s) on %d window(s): loss %.4g -> %.4g", cfg.epochs, n, loss_curve[0], loss_curve[-1])
    return TrainResult(params=model.params, loss_curve=loss_curve)


def evaluate(predictor: Any, samples: Sequence[WindowSample], extract_mode: str = "last_column") -> EvalReport:
    """Pooled RMSE/MAPE over every step of every window; ``predictor.predict`` returns B x L x M in °C."""
    if not samples:
        raise RangeError("evaluate: empty test set")
    mode = normalize_extract_mode(extract_mode)
    forecasts = extract_forecast(predictor.predict(samples), mode)
    truths = np.stack([s.forecast_truth for s in samples])
    windows = [
        WindowMetrics(
            region=s.region,
            window_start=s.window_start,
            target_index=s.target_index,
            rmse=rmse(forecasts[i], truths[i]),
            mape=mape(forecasts[i], truths[i]),
        )
        for i, s in enumerate(samples)
    ]
    return EvalReport(rmse=rmse(forecasts, truths), mape=mape(forecasts, truths), windows=windows)


def persistence_baseline(samples: Sequence[WindowSample]) -> EvalReport:
    return evaluate(PersistencePredictor(), samples, "last_column")


def split_samples(
    series: GridSeries, sampling: SamplingConfig, target_index: Optional[int] = None, region: str = ""
) -> Tuple[List[WindowSample], List[WindowSample]]:
    train_series, test_series = temporal_split(series, sampling.split_ratio)
    return (
        sample_windows(train_series, sampling, target_index, region=f"{region}:train"),
        sample_windows(test_series, sampling, target_index, region=f"{region}:test"),
    )


def check_embedding(exp: ExperimentConfig) -> Optional[bool]:
    """L > 2 * d_o when a box-counting dimension is configured; None otherwise."""
    if exp.evaluation.box_dimension is None:
        return None
    return embedding_dimension_ok(exp.sampling.L, exp.evaluation.box_dimension)


def run_experiment(
    series: GridSeries,
    exp: ExperimentConfig,
    seed: int,
    target_index: Optional[int] = None,
    region: str = "",
    cache: Optional[FlowCache] = None,
) -> RunOutcome:
    """Train on the first split and evaluate the model and persistence on the second."""
    check_embedding(exp)
    if target_index is None:
        target_index = exp.evaluation.target_index
    train_samples, test_samples = split_samples(series, exp.sampling, target_index, region)
    if not train_samples or not test_samples:
        raise RangeError(
            f"Split of {series.T} frames yields {len(train_samples)} train / {len(test_samples)} test window(s)"
        )
    model_cfg = replace(exp.model, M=exp.sampling.M, L=exp.sampling.L, H=series.H, W=series.W, seed=seed)
    model = OptFormer(model_cfg)
    cache = {} if cache is None else cache
    result = train(model, train_samples, exp.flow, replace(exp.train, seed=seed), cache)
    report = evaluate(Forecaster(model, exp.flow, cache), test_samples, exp.evaluation.extract_mode)
    report.loss_curve = list(result.loss_curve)
    return RunOutcome(model=model, report=report, baseline=persistence_baseline(test_samples))


def _evaluate_window(task: Tuple[GridSeries, ExperimentConfig, int, int, str]) -> Tuple[float, float]:
    box, exp, seed, target_index, label = task
    outcome = run_experiment(box, exp, seed, target_index=target_index, region=label)
    return outcome.report.rmse, outcome.report.mape


def parallel_evaluate(
    series: GridSeries,
    exp: ExperimentConfig,
    seed: int,
    eval_span: Optional[float] = None,
    window_span: Optional[float] = None,
    workers: Optional[int] = None,
) -> EvalReport:
    """Mean metrics over window_span boxes centered on every grid point of the central eval_span region."""
    eval_span = exp.evaluation.eval_span if eval_span is None else eval_span
    window_span = exp.evaluation.window_span if window_span is None else window_span
    workers = exp.evaluation.workers if workers is None else workers

    row0, col0, rows, cols = region_bounds(series, *extent_center(series), eval_span)
    tasks = []
    labels = []
    for r in range(row0, row0 + rows):
        for c in range(col0, col0 + cols):
            lat, lon = cell_center(series, r, c)
            b_row, b_col, b_rows, b_cols = region_bounds(series, lat, lon, window_span)
            box = replace(
                series,
                data=series.data[:, b_row:b_row + b_rows, b_col:b_col + b_cols],
                lat0=series.lat0 + b_row * series.dlat,
                lon0=series.lon0 + b_col * series.dlon,
            )
            target = (r - b_row) * b_cols + (c - b_col)
            label = f"lat={lat:.4f},lon={lon:.4f}"
            tasks.append((box, exp, seed + len(tasks), target, label))
            labels.append((label, target))

    logger.info("Evaluating %d spatial window(s) with %d worker(s)", len(tasks), workers)
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_evaluate_window, tasks))
    else:
        results = [_evaluate_window(task) for task in tasks]

    windows = [
        WindowMetrics(region=label, window_start=None, target_index=target, rmse=r, mape=m)
        for (label, target), (r, m) in zip(labels, results)
    ]
    return EvalReport(
        rmse=float(np.mean([w.rmse for w in windows])),
        mape=float(np.mean([w.mape for w in windows])),
        windows=windows,
    )


@dataclass
class SweepRow:
    axis: str
    value: str
    N: int
    M: int
    L: int
    delta_t: int
    rmse: float
    mape: float
    baseline_rmse: float
    baseline_mape: float
    convergence_epoch: int

    @property
    def rmse_change_pct(self) -> float:
        return relative_change(self.baseline_rmse, self.rmse)

    @property
    def mape_change_pct(self) -> float:
        return relative_change(self.baseline_mape, self.mape)


SWEEP_HEADER = (
    "axis",
    "value",
    "N",
    "M",
    "L",
    "delta_t",
    "rmse",
    "mape",
    "baseline_rmse",
    "baseline_mape",
    "rmse_change_pct",
    "mape_change_pct",
    "convergence_epoch",
)


def relative_change(baseline: float, model: float) -> float:
    """(baseline - model) / model in percent."""
    if model == 0:
        return 0.0 if baseline == 0 else math.inf
    return (baseline - model) / model * 100.0


def season_start_index(series: GridSeries, day_of_year: int) -> int:
    """Index of the first frame on or after the next occurrence of ``day_of_year``."""
    origin = epoch_days_to_datetime(series.t0)
    for year in (origin.year, origin.year + 1):
        start = datetime(year, 1, 1, tzinfo=timezone.utc) + timedelta(days=int(day_of_year) - 1)
        start_days = (start - EPOCH).total_seconds() / 86400.0
        if start_days >= series.t0 - 1e-9:
            break
    index = int(math.ceil((start_days - series.t0) / series.dt_days - 1e-9))
    if index >= series.T:
        raise RangeError(f"Season day {day_of_year} starts at frame {index}, beyond T={series.T}")
    return index


def _sweep_value_label(axis: str, value: Any) -> str:
    if axis == "area":
        return f"{float(value):g}°×{float(value):g}°"
    if axis == "delta_t":
        return f"Δt = {int(value)}"
    if axis == "horizon":
        return f"L = {int(value)}"
    return str(value).capitalize()


def default_sweep_values(axis: str, evaluation: EvaluationConfig) -> List[Any]:
    if axis == "area":
        return list(evaluation.area_spans)
    if axis == "delta_t":
        return list(evaluation.delta_ts)
    if axis == "horizon":
        return list(evaluation.horizons)
    if axis == "season":
        return [name for name, _ in evaluation.seasons]
    raise ConfigError(f"Unsupported sweep axis '{axis}'. Supported values: {', '.join(SWEEP_AXES)}.")


def run_sweep(
    series: GridSeries, axis: str, values: Optional[Sequence[Any]], exp: ExperimentConfig, seed: int
) -> List[SweepRow]:
    """One run per value along ``axis``; every other setting stays at the base config."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"Unsupported sweep axis '{axis}'. Supported values: {', '.join(SWEEP_AXES)}.")
    values = default_sweep_values(axis, exp.evaluation) if not values else list(values)
    seasons = dict(exp.evaluation.seasons)

    rows: List[SweepRow] = []
    for value in values:
        run_series, run_exp = series, exp
        if axis == "area":
            run_series = extract_region(series, *extent_center(series), float(value))
        elif axis == "delta_t":
            run_exp = replace(exp, sampling=replace(exp.sampling, delta_t=int(value)))
        elif axis == "horizon":
            run_exp = replace(exp, sampling=replace(exp.sampling, L=int(value)))
        else:
            if value not in seasons:
                raise ConfigError(f"Unknown season '{value}'. Supported values: {', '.join(seasons)}.")
            start = season_start_index(series, seasons[value])
            stop = start + exp.evaluation.season_frames
            if stop > series.T:
                raise RangeError(
                    f"Season {value} needs frames [{start}, {stop}) but the series has T={series.T}"
                )
            run_series = slice_time(series, start, stop)
            logger.debug("season %s starts at frame %d (day %d of year)", value, start, day_of_year(run_series.t0))

        outcome = run_experiment(run_series, run_exp, seed, region=f"{axis}={value}")
        rows.append(
            SweepRow(
                axis=axis,
                value=str(value),
                N=run_series.N,
                M=run_exp.sampling.M,
                L=run_exp.sampling.L,
                delta_t=run_exp.sampling.delta_t,
                rmse=outcome.report.rmse,
                mape=outcome.report.mape,
                baseline_rmse=outcome.baseline.rmse,
                baseline_mape=outcome.baseline.mape,
                convergence_epoch=convergence_epoch(outcome.report.loss_curve),
            )
        )
        logger.info("sweep %s=%s: rmse %.4f (persistence %.4f)", axis, value, rows[-1].rmse, rows[-1].baseline_rmse)
    return rows


def write_sweep_tables(
    rows: Sequence[SweepRow], out_dir: str, axis: str, meta: Optional[Dict[str, Any]] = None
) -> Tuple[str, str]:
    """Long CSV with every field, plus a wide table: one column per swept value, Model x Metric rows."""
    long_path = os.path.join(out_dir, f"sweep_{axis}.csv")
    write_csv(
        long_path,
        SWEEP_HEADER,
        (
            [
                r.axis,
                r.value,
                r.N,
                r.M,
                r.L,
                r.delta_t,
                f"{r.rmse:.6f}",
                f"{r.mape:.6f}",
                f"{r.baseline_rmse:.6f}",
                f"{r.baseline_mape:.6f}",
                f"{r.rmse_change_pct:.3f}",
                f"{r.mape_change_pct:.3f}",
                r.convergence_epoch,
            ]
            for r in rows
        ),
        meta=meta,
    )
    table_path = os.path.join(out_dir, f"table_{axis}.csv")
    header = ["Model", "Metric"] + [_sweep_value_label(axis, r.value) for r in rows]
    table = [
        ["OptFormer", "RMSE"] + [f"{r.rmse:.4f}" for r in rows],
        ["OptFormer", "MAPE"] + [f"{r.mape:.4f}" for r in rows],
        ["Persistence", "RMSE"] + [f"{r.baseline_rmse:.4f}" for r in rows],
        ["Persistence", "MAPE"] + [f"{r.baseline_mape:.4f}" for r in rows],
        ["Average Change (%)", "RMSE"] + [f"{r.rmse_change_pct:.2f}" for r in rows],
        ["Average Change (%)", "MAPE"] + [f"{r.mape_change_pct:.2f}" for r in rows],
    ]
    write_csv(table_path, header, table, meta=meta)
    return long_path, table_path


@dataclass
class AblationRow:
    name: str
    optical_attention: bool
    inception: bool
    autocorrelation: bool
    rmse: float
    mape: float
    seed_rmse: List[float] = field(default_factory=list)


ABLATION_HEADER = ("Optical_Attention", "Inception", "AutoCorrelation", "RMSE", "MAPE")


def run_ablation(series: GridSeries, exp: ExperimentConfig, seed: int, seeds: Optional[int] = None) -> List[AblationRow]:
    """Full model and each single-component ablation, median metrics over ``seeds`` runs."""
    seeds = exp.evaluation.ablation_seeds if seeds is None else int(seeds)
    if seeds < 1:
        raise ConfigError(f"seeds must be >= 1, got {seeds}")
    cache: FlowCache = {}
    rows: List[AblationRow] = []
    for name, optical, inception, autocorr in ABLATIONS:
        run_exp = replace(exp, model=with_ablation(exp.model, optical, inception, autocorr))
        reports = [run_experiment(series, run_exp, seed + s, region="ablation", cache=cache).report for s in range(seeds)]
        rows.append(
            AblationRow(
                name=name,
                optical_attention=optical,
                inception=inception,
                autocorrelation=autocorr,
                rmse=float(np.median([r.rmse for r in reports])),
                mape=float(np.median([r.mape for r in reports])),
                seed_rmse=[r.rmse for r in reports],
            )
        )
        logger.info("ablation %s: median rmse %.4f over %d seed(s)", name, rows[-1].rmse, seeds)
    return rows


def write_ablation_table(rows: Sequence[AblationRow], path: str, meta: Optional[Dict[str, Any]] = None) -> None:
    mark = {True: "✓", False: "×"}
    write_csv(
        path,
        ABLATION_HEADER,
        (
            [mark[r.optical_attention], mark[r.inception], mark[r.autocorrelation], f"{r.rmse:.4f}", f"{r.mape:.4f}"]
            for r in rows
        ),
        meta=meta,
    )


def write_loss_curve(path: str, loss_curve: Sequence[float], meta: Optional[Dict[str, Any]] = None) -> None:
    write_csv(
        path,
        ("epoch", "loss"),
        ([epoch, f"{loss:.10g}"] for epoch, loss in enumerate(loss_curve, start=1)),
        meta=meta,
    )


def write_window_metrics(path: str, report: EvalReport, meta: Optional[Dict[str, Any]] = None) -> None:
    write_csv(
        path,
        ("region", "window_start", "target_index", "rmse", "mape"),
        (
            [w.region, "" if w.window_start is None else w.window_start, w.target_index, f"{w.rmse:.6f}", f"{w.mape:.6f}"]
            for w in report.windows
        ),
        meta=meta,
    )
