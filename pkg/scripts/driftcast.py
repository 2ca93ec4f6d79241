import argparse
import os
import sys
from dataclasses import replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import DriftcastError, RangeError, ShapeError
from flow_farneback import FlowParams, estimate_flow_sequence, write_flow_dumps
from grid_store import (
    SYNTHETIC_KINDS,
    SamplingConfig,
    default_target_index,
    generate_synthetic,
    load_grid_series,
    save_grid_series,
    slice_time,
    subsample,
)
from optformer_model import ModelConfig, OptFormer, load_checkpoint, save_checkpoint
from phase_space import EXTRACT_MODE_ALIASES, extract_forecast, normalize_extract_mode
from train_eval import (
    SWEEP_AXES,
    EvaluationConfig,
    ExperimentConfig,
    Forecaster,
    TrainConfig,
    check_embedding,
    convergence_epoch,
    evaluate,
    parallel_evaluate,
    persistence_baseline,
    report_metadata,
    run_ablation,
    run_sweep,
    split_samples,
    train,
    write_ablation_table,
    write_loss_curve,
    write_sweep_tables,
    write_window_metrics,
)
from utils import (
    _deep_merge,
    configure_logging,
    ensure_dir,
    load_config,
    package_versions,
    resolve_seed,
    utc_now,
    write_csv,
    write_json,
)

CHECKPOINT_NAME = "checkpoint.bin"
SYNTHETIC_NAME = "synthetic.sstgrid"
RUN_MANIFEST = "run.json"

# config section -> (flag, config key, type) for every mirrored field
SECTION_FLAGS = {
    "sampling": [
        ("--M", "M", int),
        ("--L", "L", int),
        ("--t-gap", "t_gap", int),
        ("--delta-t", "delta_t", int),
        ("--split-ratio", "split_ratio", float),
    ],
    "flow": [
        ("--pyramid-levels", "pyramid_levels", int),
        ("--window-radius", "window_radius", int),
        ("--gaussian-sigma", "gaussian_sigma", float),
        ("--smoothness-lambda", "smoothness_lambda", float),
        ("--iterations", "iterations", int),
        ("--post-smoothing-sigma", "post_smoothing_sigma", float),
    ],
    "model": [
        ("--d-model", "d_model", int),
        ("--d-ff", "d_ff", int),
        ("--top-k", "top_k", int),
    ],
    "train": [
        ("--epochs", "epochs", int),
        ("--learning-rate", "learning_rate", float),
        ("--beta1", "beta1", float),
        ("--beta2", "beta2", float),
        ("--eps", "eps", float),
    ],
    "evaluation": [
        ("--target-index", "target_index", int),
        ("--eval-span", "eval_span", float),
        ("--window-span", "window_span", float),
        ("--season-frames", "season_frames", int),
        ("--workers", "workers", int),
        ("--box-dimension", "box_dimension", float),
    ],
}

SECTION_DEFAULTS = {
    "sampling": SamplingConfig(),
    "flow": FlowParams(),
    "model": ModelConfig(),
    "train": TrainConfig(),
    "evaluation": EvaluationConfig(),
}


def _default_of(section: str, key: str) -> Any:
    value = getattr(SECTION_DEFAULTS[section], key)
    if section == "model" and key == "top_k" and value is None:
        return "ceil(ln M)"
    if section == "evaluation" and key == "target_index" and value is None:
        return "grid center"
    if section == "evaluation" and key == "box_dimension" and value is None:
        return "unset"
    return value


def _add_section_flags(parser: argparse.ArgumentParser, sections: Sequence[str]) -> None:
    for section in sections:
        group = parser.add_argument_group(section)
        for flag, key, kind in SECTION_FLAGS[section]:
            group.add_argument(flag, type=kind, default=None, help=f"(default: {_default_of(section, key)})")
        if section == "model":
            group.add_argument(
                "--kernel-sizes",
                type=int,
                nargs="+",
                default=None,
                help=f"Inception branch kernel sizes (default: {list(ModelConfig().kernel_sizes)})",
            )
        if section == "train":
            group.add_argument(
                "--batch-size", "--batch", dest="batch_size", type=int, default=None,
                help=f"(default: {TrainConfig().batch_size})",
            )
            group.add_argument(
                "--normalize",
                action=argparse.BooleanOptionalAction,
                default=None,
                help=f"z-score inputs and targets with training-split statistics (default: {TrainConfig().normalize})",
            )
        if section == "evaluation":
            group.add_argument(
                "--extract-mode",
                choices=sorted(EXTRACT_MODE_ALIASES),
                default=None,
                help=f"(default: {EvaluationConfig().extract_mode})",
            )


def _add_common(parser: argparse.ArgumentParser, out_default: str) -> None:
    parser.add_argument("--config", default=None, help="Extra YAML merged over config.yaml (default: none)")
    parser.add_argument("--out", default=out_default, help=f"Output directory (default: {out_default})")
    parser.add_argument("--seed", type=int, default=None, help="Run seed; DRIFTCAST_SEED overrides it (default: 0)")
    parser.add_argument("--log-level", default=None, help="Logging level (default: INFO)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="driftcast", description="SST forecasting with optical flow and phase-space attractors")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Write a synthetic .sstgrid series")
    _add_common(synth, "data")
    synth.add_argument("--kind", choices=SYNTHETIC_KINDS, default="advecting_wave", help="(default: advecting_wave)")
    synth.add_argument("--T", type=int, default=240, help="(default: 240)")
    synth.add_argument("--H", type=int, default=8, help="(default: 8)")
    synth.add_argument("--W", type=int, default=8, help="(default: 8)")
    synth.add_argument("--amplitude", type=float, default=2.0, help="(default: 2.0)")
    synth.add_argument("--shift", type=float, nargs=2, default=[1.0, 0.0], metavar=("DI", "DJ"), help="Cells per step (default: 1.0 0.0)")
    synth.add_argument("--period", type=float, default=60.0, help="Seasonal period in steps (default: 60.0)")
    synth.add_argument("--noise", type=float, default=0.0, help="Gaussian noise std in °C (default: 0.0)")
    synth.add_argument("--lat0", type=float, default=20.0, help="(default: 20.0)")
    synth.add_argument("--lon0", type=float, default=-40.0, help="(default: -40.0)")

    flow = sub.add_parser("flow", help="Estimate and dump flow fields for a run of frames")
    _add_common(flow, os.path.join("runs", "flow"))
    flow.add_argument("--input", required=True, help=".sstgrid series")
    flow.add_argument("--start", type=int, default=0, help="First frame (default: 0)")
    flow.add_argument("--frames", type=int, default=None, help="Frame count (default: M)")
    _add_section_flags(flow, ["sampling", "flow"])

    for name, help_text in (
        ("train", "Train on the first temporal split and write a checkpoint"),
        ("sweep", "Sweep one axis (area, delta_t, horizon, season)"),
        ("ablate", "Full model versus single-component ablations"),
        ("parallel-eval", "Spatially parallel sliding-window evaluation"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        _add_common(cmd, os.path.join("runs", name))
        cmd.add_argument("--input", required=True, help=".sstgrid series")
        _add_section_flags(cmd, ["sampling", "flow", "model", "train", "evaluation"])
        if name == "sweep":
            cmd.add_argument("--axis", choices=SWEEP_AXES, required=True)
            cmd.add_argument("--values", nargs="+", default=None, help="Swept values (default: from config)")
        if name == "ablate":
            cmd.add_argument("--seeds", type=int, default=None, help=f"(default: {EvaluationConfig().ablation_seeds})")

    for name, help_text in (
        ("predict", "Forecast from the last input window of a series"),
        ("evaluate", "Evaluate a checkpoint on the second temporal split"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        _add_common(cmd, os.path.join("runs", name))
        cmd.add_argument("--checkpoint", required=True, help="Checkpoint written by 'train'")
        cmd.add_argument("--input", required=True, help=".sstgrid series")
        cmd.add_argument(
            "--extract-mode",
            choices=sorted(EXTRACT_MODE_ALIASES),
            default=None,
            help="(default: the mode stored in the checkpoint)",
        )
    return parser


def _flag_overrides(args: argparse.Namespace) -> Dict[str, Dict[str, Any]]:
    overrides: Dict[str, Dict[str, Any]] = {}
    for section, flags in SECTION_FLAGS.items():
        names = [key for _, key, _ in flags]
        if section == "model":
            names.append("kernel_sizes")
        if section == "train":
            names += ["batch_size", "normalize"]
        if section == "evaluation":
            names.append("extract_mode")
        values = {key: getattr(args, key) for key in names if getattr(args, key, None) is not None}
        if values:
            overrides[section] = values
    return overrides


def resolve_experiment(args: argparse.Namespace) -> Tuple[Dict[str, Any], ExperimentConfig, int]:
    config = _deep_merge(load_config(args.config), _flag_overrides(args))
    seed = resolve_seed(args.seed, default=int(config.get("seed", 0) or 0))
    return config, ExperimentConfig.from_config(config), seed


def write_manifest(out_dir: str, command: str, resolved: Dict[str, Any], seed: int, argv: Sequence[str]) -> None:
    write_json(
        os.path.join(out_dir, RUN_MANIFEST),
        {
            "subcommand": command,
            "config": resolved,
            "seed": seed,
            "package_versions": package_versions(),
            "argv": list(argv),
            "created_at": utc_now().isoformat(),
        },
    )


def cmd_synth(args: argparse.Namespace, seed: int) -> Dict[str, Any]:
    series = generate_synthetic(
        seed,
        args.T,
        args.H,
        args.W,
        args.kind,
        amplitude=args.amplitude,
        shift=tuple(args.shift),
        period=args.period,
        noise=args.noise,
        lat0=args.lat0,
        lon0=args.lon0,
    )
    path = os.path.join(args.out, SYNTHETIC_NAME)
    save_grid_series(series, path)
    print(f"Wrote {series.T} x {series.H} x {series.W} {args.kind} series to {path}")
    return {
        "synthetic": {
            "kind": args.kind,
            "T": args.T,
            "H": args.H,
            "W": args.W,
            "amplitude": args.amplitude,
            "shift": list(args.shift),
            "period": args.period,
            "noise": args.noise,
            "lat0": args.lat0,
            "lon0": args.lon0,
        }
    }


def cmd_flow(args: argparse.Namespace, exp: ExperimentConfig) -> None:
    series = subsample(load_grid_series(args.input), exp.sampling.delta_t)
    count = args.frames if args.frames is not None else exp.sampling.M
    window = slice_time(series, args.start, args.start + count)
    frames = window.data.astype(np.float64)
    frames = np.where(np.isfinite(frames), frames, 0.0)
    written = write_flow_dumps(estimate_flow_sequence(frames, exp.flow), args.out)
    print(f"Wrote {len(written)} flow dump file(s) for {window.T} frame(s) to {args.out}")


def _target_for(exp: ExperimentConfig, H: int, W: int) -> int:
    target = exp.evaluation.target_index
    return default_target_index(H, W) if target is None else int(target)


def cmd_train(args: argparse.Namespace, exp: ExperimentConfig, seed: int) -> None:
    check_embedding(exp)
    series = load_grid_series(args.input)
    target = _target_for(exp, series.H, series.W)
    train_samples, _ = split_samples(series, exp.sampling, target, region="train")
    if not train_samples:
        raise RangeError(f"No training windows in the first split of {series.T} frames")
    model_cfg = ModelConfig.from_config(
        exp.model.to_dict(), M=exp.sampling.M, L=exp.sampling.L, H=series.H, W=series.W, seed=seed
    )
    model = OptFormer(model_cfg)
    train_cfg = TrainConfig.from_config({**exp.train.to_dict(), "seed": seed})
    result = train(model, train_samples, exp.flow, train_cfg)
    checkpoint = os.path.join(args.out, CHECKPOINT_NAME)
    save_checkpoint(
        checkpoint,
        model,
        {
            "sampling": exp.sampling.to_dict(),
            "flow": exp.flow.to_dict(),
            "target_index": target,
            "extract_mode": exp.evaluation.extract_mode,
            "train": train_cfg.to_dict(),
            "seed": seed,
        },
    )
    write_loss_curve(
        os.path.join(args.out, "loss_curve.csv"), result.loss_curve, meta=report_metadata(replace(exp, train=train_cfg), seed)
    )
    print(
        f"Trained {len(result.loss_curve)} epoch(s) on {len(train_samples)} window(s): "
        f"loss {result.loss_curve[0]:.4g} -> {result.loss_curve[-1]:.4g} "
        f"(converged by epoch {convergence_epoch(result.loss_curve)}); wrote {checkpoint}"
    )


def _load_for_inference(args: argparse.Namespace):
    model, meta = load_checkpoint(args.checkpoint)
    series = load_grid_series(args.input)
    if (series.H, series.W) != (model.config.H, model.config.W):
        raise ShapeError(
            f"Series grid {series.H} x {series.W} does not match checkpoint grid {model.config.H} x {model.config.W}"
        )
    sampling = SamplingConfig.from_config(meta.get("sampling", {}))
    flow = FlowParams.from_config(meta.get("flow", {}))
    mode = normalize_extract_mode(args.extract_mode or meta.get("extract_mode", "last_column"))
    stamped = ExperimentConfig(
        sampling=sampling,
        flow=flow,
        model=model.config,
        train=TrainConfig.from_config(meta.get("train", {})),
        evaluation=EvaluationConfig(extract_mode=mode),
    )
    report_meta = report_metadata(stamped, int(meta.get("seed", 0)))
    return model, meta, series, sampling, flow, mode, report_meta


def cmd_predict(args: argparse.Namespace) -> Dict[str, Any]:
    model, meta, series, sampling, flow_params, mode, report_meta = _load_for_inference(args)
    series = subsample(series, sampling.delta_t)
    M = model.config.M
    if series.T < M:
        raise RangeError(f"Series has {series.T} frame(s) after delta_t={sampling.delta_t}; need M={M}")
    forecaster = Forecaster(model, flow_params)
    X = forecaster.prepare_frames(series.data[-M:])
    flows = forecaster.flows_for(("predict", series.T - M), X)
    D_hat = forecaster.predict_prepared(X[None], None if flows is None else [flows])
    forecast = extract_forecast(D_hat[0], mode)
    last_time = series.t0 + (series.T - 1) * series.dt_days
    path = os.path.join(args.out, "forecast.csv")
    write_csv(
        path,
        ("step", "time_days", "value"),
        ([i, f"{last_time + i * series.dt_days:.6f}", f"{v:.6f}"] for i, v in enumerate(forecast)),
        meta=report_meta,
    )
    print(f"Wrote {len(forecast)}-step forecast at target {meta.get('target_index')} to {path}")
    return {"checkpoint": args.checkpoint, "extract_mode": mode, "checkpoint_metadata": meta}


def cmd_evaluate(args: argparse.Namespace) -> Dict[str, Any]:
    model, meta, series, sampling, flow_params, mode, report_meta = _load_for_inference(args)
    target = int(meta.get("target_index", default_target_index(series.H, series.W)))
    _, test_samples = split_samples(series, sampling, target, region="evaluate")
    report = evaluate(Forecaster(model, flow_params), test_samples, mode)
    baseline = persistence_baseline(test_samples)
    write_csv(
        os.path.join(args.out, "evaluation.csv"),
        ("model", "rmse", "mape", "windows"),
        [
            ["OptFormer", f"{report.rmse:.6f}", f"{report.mape:.6f}", len(report.windows)],
            ["Persistence", f"{baseline.rmse:.6f}", f"{baseline.mape:.6f}", len(baseline.windows)],
        ],
        meta=report_meta,
    )
    write_window_metrics(os.path.join(args.out, "windows.csv"), report, meta=report_meta)
    print(
        f"Evaluated {len(test_samples)} window(s): rmse {report.rmse:.4f} °C, mape {report.mape:.3f}% "
        f"(persistence rmse {baseline.rmse:.4f} °C)"
    )
    return {"checkpoint": args.checkpoint, "extract_mode": mode, "checkpoint_metadata": meta}


def cmd_sweep(args: argparse.Namespace, exp: ExperimentConfig, seed: int) -> None:
    values: Optional[List[Any]] = args.values
    if values and args.axis == "area":
        values = [float(v) for v in values]
    elif values and args.axis in ("delta_t", "horizon"):
        values = [int(v) for v in values]
    rows = run_sweep(load_grid_series(args.input), args.axis, values, exp, seed)
    long_path, table_path = write_sweep_tables(rows, args.out, args.axis, meta=report_metadata(exp, seed))
    print(f"Wrote {len(rows)} sweep row(s) to {long_path} and {table_path}")


def cmd_ablate(args: argparse.Namespace, exp: ExperimentConfig, seed: int) -> None:
    rows = run_ablation(load_grid_series(args.input), exp, seed, args.seeds)
    path = os.path.join(args.out, "ablation.csv")
    write_ablation_table(rows, path, meta=report_metadata(exp, seed))
    print(f"Wrote {len(rows)} ablation row(s) to {path}")


def cmd_parallel_eval(args: argparse.Namespace, exp: ExperimentConfig, seed: int) -> None:
    report = parallel_evaluate(load_grid_series(args.input), exp, seed)
    meta = report_metadata(exp, seed)
    write_window_metrics(os.path.join(args.out, "windows.csv"), report, meta=meta)
    write_csv(
        os.path.join(args.out, "parallel_eval.csv"),
        ("rmse", "mape", "windows"),
        [[f"{report.rmse:.6f}", f"{report.mape:.6f}", len(report.windows)]],
        meta=meta,
    )
    print(f"Averaged {len(report.windows)} window(s): rmse {report.rmse:.4f} °C, mape {report.mape:.3f}%")


EXPERIMENT_COMMANDS: Dict[str, Callable[[argparse.Namespace, ExperimentConfig, int], None]] = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "parallel-eval": cmd_parallel_eval,
}


def run(args: argparse.Namespace, argv: Sequence[str]) -> int:
    config, exp, seed = resolve_experiment(args)
    configure_logging(args.log_level or str((config.get("logging") or {}).get("level", "INFO")))
    ensure_dir(args.out)
    resolved: Dict[str, Any] = exp.to_dict()

    if args.command == "synth":
        resolved.update(cmd_synth(args, seed))
    elif args.command == "flow":
        cmd_flow(args, exp)
        resolved["flow_window"] = {"input": args.input, "start": args.start, "frames": args.frames}
    elif args.command == "predict":
        resolved.update(cmd_predict(args))
    elif args.command == "evaluate":
        resolved.update(cmd_evaluate(args))
    else:
        EXPERIMENT_COMMANDS[args.command](args, exp, seed)
        resolved["input"] = args.input

    write_manifest(args.out, args.command, resolved, seed, argv)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return run(args, argv)
    except (DriftcastError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
