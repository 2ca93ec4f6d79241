"""OptFormer: Inception features gated by optical flow, a linear phase-space encoder,
one auto-correlation block, and a linear decoder to the L x M delay attractor.

Every stage is a free function over an ordered parameter mapping so that tests and
grad checks can swap single tensors; ``OptFormer`` bundles a config with its params.
"""

import json
import logging
import math
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, FormatError, IoError, ShapeError
from flow_farneback import FlowSequence
from tensor_autodiff import (
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    conv2d,
    gather,
    matmul,
    mean,
    mul,
    parameter,
    relu,
    reshape,
    roll,
    softmax,
    transpose,
)

logger = logging.getLogger(__name__)

Flows = Union[None, FlowSequence, Sequence[FlowSequence]]

CHECKPOINT_VERSION = 1
CHECKPOINT_LENGTH = struct.Struct("<I")
PARAM_DTYPE = np.dtype("<f8")


def default_top_k(M: int) -> int:
    return max(1, int(math.ceil(math.log(M)))) if M > 1 else 1


@dataclass(frozen=True)
class ModelConfig:
    M: int = 30
    L: int = 30
    H: int = 8
    W: int = 8
    d_model: int = 128
    d_ff: int = 256
    kernel_sizes: Tuple[int, ...] = (1, 3, 5)
    top_k: Optional[int] = None
    seed: int = 0
    use_optical_attention: bool = True
    use_inception: bool = True
    use_autocorrelation: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        for name in ("M", "L", "H", "W", "d_model", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.kernel_sizes:
            raise ConfigError("kernel_sizes must name at least one branch")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigError(f"kernel_sizes must be odd and positive, got {list(self.kernel_sizes)}")
        if self.top_k is not None and not 1 <= self.top_k <= self.M:
            raise ConfigError(f"top_k must be in [1, M={self.M}], got {self.top_k}")

    @property
    def N(self) -> int:
        return self.H * self.W

    @property
    def resolved_top_k(self) -> int:
        return self.top_k if self.top_k is not None else min(self.M, default_top_k(self.M))

    @classmethod
    def from_config(cls, section: Dict[str, Any], **overrides: Any) -> "ModelConfig":
        merged = {**(section or {}), **{k: v for k, v in overrides.items() if v is not None}}
        kwargs: Dict[str, Any] = {}
        for f in fields(cls):
            value = merged.get(f.name)
            if value is None:
                continue
            if f.name == "kernel_sizes":
                kwargs[f.name] = tuple(int(k) for k in value)
            elif f.name.startswith("use_"):
                kwargs[f.name] = bool(value)
            else:
                kwargs[f.name] = int(value)
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["kernel_sizes"] = list(self.kernel_sizes)
        return out


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def param_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[Tuple[int, ...], int]]":
    """Name -> (shape, fan_in) in checkpoint order. Ablated components own no parameters."""
    M, N, d, f = config.M, config.N, config.d_model, config.d_ff
    shapes: "OrderedDict[str, Tuple[Tuple[int, ...], int]]" = OrderedDict()
    if config.use_inception:
        for k in config.kernel_sizes:
            shapes[f"inception.branch{k}.weight"] = ((M, M, k, k), M * k * k)
            shapes[f"inception.branch{k}.bias"] = ((M,), M * k * k)
        width = M * len(config.kernel_sizes)
        shapes["inception.reduce.weight"] = ((M, width, 1, 1), width)
        shapes["inception.reduce.bias"] = ((M,), width)
    shapes["fusion.weight"] = ((2 * N, N), 2 * N)
    shapes["fusion.bias"] = ((N,), 2 * N)
    shapes["encoder.weight"] = ((N, d), N)
    shapes["encoder.bias"] = ((d,), N)
    if config.use_autocorrelation:
        for proj in ("query", "key", "value"):
            shapes[f"autocorr.{proj}.weight"] = ((d, d), d)
            shapes[f"autocorr.{proj}.bias"] = ((d,), d)
    shapes["ff.in.weight"] = ((d, f), d)
    shapes["ff.in.bias"] = ((f,), d)
    shapes["ff.out.weight"] = ((f, d), f)
    shapes["ff.out.bias"] = ((d,), f)
    shapes["decoder.weight"] = ((d, config.L), d)
    shapes["decoder.bias"] = ((config.L,), d)
    return shapes


def init_params(config: ModelConfig) -> "OrderedDict[str, Tensor]":
    rng = np.random.default_rng(config.seed)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, (shape, fan_in) in param_shapes(config).items():
        params[name] = parameter(_uniform(rng, shape, fan_in), name=name)
    return params


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    out = matmul(x, weight)
    return add(out, broadcast_to(bias, out.shape))


def _check_frames(X: Tensor, config: ModelConfig, op: str) -> None:
    expected = (config.M, config.H, config.W)
    if X.values.ndim != 4 or X.shape[1:] != expected:
        raise ShapeError(f"{op}: expected Batch x {' x '.join(map(str, expected))} frames, got {X.shape}")


def inception_forward(X: Tensor, params: Dict[str, Tensor], config: ModelConfig) -> Tensor:
    X = as_tensor(X)
    _check_frames(X, config, "inception_forward")
    B = X.shape[0]
    if not config.use_inception:
        return reshape(X, (B, config.M, config.N))
    branches = [
        conv2d(X, params[f"inception.branch{k}.weight"], params[f"inception.branch{k}.bias"])
        for k in config.kernel_sizes
    ]
    merged = concat(branches, axis=1)
    reduced = conv2d(merged, params["inception.reduce.weight"], params["inception.reduce.bias"])
    return reshape(add(reduced, X), (B, config.M, config.N))


def flow_gates(flows: Flows, batch: int, config: ModelConfig) -> Tuple[np.ndarray, np.ndarray]:
    """(alpha_x, alpha_y) as Batch x M x N arrays; all-ones when optical attention is ablated."""
    shape = (batch, config.M, config.N)
    if not config.use_optical_attention:
        return np.ones(shape), np.ones(shape)
    if flows is None:
        raise ShapeError("optical_attention: flows are required when optical attention is enabled")
    items = [flows] * batch if isinstance(flows, FlowSequence) else list(flows)
    if len(items) != batch:
        raise ShapeError(f"optical_attention: got {len(items)} flow sequences for a batch of {batch}")
    ax, ay = [], []
    for seq in items:
        if len(seq) != config.M:
            raise ShapeError(f"optical_attention: FlowSequence length {len(seq)} != M={config.M}")
        if seq.flows[0].shape != (config.H, config.W):
            raise ShapeError(f"optical_attention: flow shape {seq.flows[0].shape} != frame {(config.H, config.W)}")
        ax.append(seq.alpha_x.reshape(config.M, config.N))
        ay.append(seq.alpha_y.reshape(config.M, config.N))
    return np.stack(ax), np.stack(ay)


def optical_attention(X: Tensor, flows: Flows, params: Dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Gate Inception features by the flow components, concatenate, compress 2N -> N."""
    V = inception_forward(X, params, config)
    alpha_x, alpha_y = flow_gates(flows, V.shape[0], config)
    integral = concat([mul(Tensor(alpha_x), V), mul(Tensor(alpha_y), V)], axis=-1)
    return linear(integral, params["fusion.weight"], params["fusion.bias"])


def encode(O: Tensor, params: Dict[str, Tensor], config: ModelConfig) -> Tensor:
    O = as_tensor(O)
    if O.values.ndim != 3 or O.shape[-1] != config.N:
        raise ShapeError(f"encode: expected Batch x M x {config.N}, got {O.shape}")
    return linear(O, params["encoder.weight"], params["encoder.bias"])


def autocorrelation_scores(q: Tensor, k: Tensor) -> Tensor:
    """R[b, tau] = mean over (t, c) of q[b, t, c] * k[b, (t - tau) mod M, c]."""
    q, k = as_tensor(q), as_tensor(k)
    if q.shape != k.shape or q.values.ndim != 3:
        raise ShapeError(f"autocorrelation_scores: shape mismatch {q.shape} vs {k.shape}")
    B, M, _ = q.shape
    per_lag = [reshape(mean(mul(q, roll(k, tau, axis=1)), axis=(1, 2)), (B, 1)) for tau in range(M)]
    return concat(per_lag, axis=-1)


def select_lags(scores: np.ndarray, top_k: int) -> np.ndarray:
    """Indices of the top_k lags by batch-mean score; ties keep the smaller lag."""
    pooled = np.asarray(scores, dtype=np.float64).reshape(-1, scores.shape[-1]).mean(axis=0)
    return np.argsort(-pooled, kind="stable")[:top_k]


def feed_forward(h: Tensor, params: Dict[str, Tensor]) -> Tensor:
    hidden = relu(linear(h, params["ff.in.weight"], params["ff.in.bias"]))
    return linear(hidden, params["ff.out.weight"], params["ff.out.bias"])


def autocorrelation_block(Z: Tensor, params: Dict[str, Tensor], config: ModelConfig) -> Tensor:
    Z = as_tensor(Z)
    top_k = config.resolved_top_k
    if top_k > config.M:
        raise ConfigError(f"top_k={top_k} exceeds M={config.M}")
    if not config.use_autocorrelation:
        return add(Z, feed_forward(Z, params))

    B, M, d = Z.shape
    q = linear(Z, params["autocorr.query.weight"], params["autocorr.query.bias"])
    k = linear(Z, params["autocorr.key.weight"], params["autocorr.key.bias"])
    v = linear(Z, params["autocorr.value.weight"], params["autocorr.value.bias"])
    scores = autocorrelation_scores(q, k)
    lags = select_lags(scores.values, top_k)
    weights = softmax(gather(scores, lags, axis=-1))

    aggregated = None
    for j, tau in enumerate(lags):
        w_j = broadcast_to(reshape(gather(weights, [j], axis=-1), (B, 1, 1)), (B, M, d))
        term = mul(w_j, roll(v, int(tau), axis=1))
        aggregated = term if aggregated is None else add(aggregated, term)
    h = add(Z, aggregated)
    return add(h, feed_forward(h, params))


def decode(Z: Tensor, params: Dict[str, Tensor], config: ModelConfig) -> Tensor:
    Z = as_tensor(Z)
    if Z.values.ndim != 3 or Z.shape[-1] != config.d_model:
        raise ShapeError(f"decode: expected Batch x M x {config.d_model}, got {Z.shape}")
    return transpose(linear(Z, params["decoder.weight"], params["decoder.bias"]))


def forward(X: Tensor, flows: Flows, params: Dict[str, Tensor], config: ModelConfig) -> Tensor:
    O = optical_attention(X, flows, params, config)
    Z = encode(O, params, config)
    return decode(autocorrelation_block(Z, params, config), params, config)


class OptFormer:
    def __init__(self, config: ModelConfig, params: Optional["OrderedDict[str, Tensor]"] = None) -> None:
        self.config = config
        self.params = params if params is not None else init_params(config)
        self.norm_mean = 0.0
        self.norm_std = 1.0
        expected = param_shapes(config)
        if list(self.params) != list(expected):
            raise ShapeError(f"OptFormer: parameter names {list(self.params)} do not match {list(expected)}")
        for name, (shape, _) in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"OptFormer: {name} has shape {self.params[name].shape}, expected {shape}")

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def forward(self, X: Union[Tensor, np.ndarray], flows: Flows) -> Tensor:
        return forward(as_tensor(X), flows, self.params, self.config)

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.params.items()}


def save_checkpoint(path: str, model: OptFormer, metadata: Optional[Dict[str, Any]] = None) -> None:
    """Version byte, u32 LE header length, JSON header, then LE f64 buffers in header order."""
    header = {
        "config": model.config.to_dict(),
        "normalization": {"mean": float(model.norm_mean), "std": float(model.norm_std)},
        "params": [{"name": name, "shape": list(p.shape)} for name, p in model.params.items()],
        "metadata": metadata or {},
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(bytes([CHECKPOINT_VERSION]))
            f.write(CHECKPOINT_LENGTH.pack(len(encoded)))
            f.write(encoded)
            for p in model.params.values():
                f.write(p.values.astype(PARAM_DTYPE).tobytes(order="C"))
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"Cannot write {path}: {exc}") from exc


def load_checkpoint(path: str) -> Tuple[OptFormer, Dict[str, Any]]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise IoError(f"Cannot read {path}: {exc}") from exc

    prefix = 1 + CHECKPOINT_LENGTH.size
    if len(raw) < prefix:
        raise FormatError(f"{path}: file too short for a checkpoint")
    if raw[0] != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {raw[0]}, expected {CHECKPOINT_VERSION}")
    (length,) = CHECKPOINT_LENGTH.unpack_from(raw, 1)
    try:
        header = json.loads(raw[prefix:prefix + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint header ({exc})") from exc

    try:
        config = ModelConfig.from_config(header["config"])
    except (KeyError, ConfigError) as exc:
        raise FormatError(f"{path}: invalid model config in header ({exc})") from exc
    offset = prefix + length
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for entry in header.get("params", []):
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * PARAM_DTYPE.itemsize
        if end > len(raw):
            raise FormatError(f"{path}: truncated buffer for {entry['name']}")
        values = np.frombuffer(raw[offset:end], dtype=PARAM_DTYPE).reshape(shape)
        params[entry["name"]] = parameter(values, name=entry["name"])
        offset = end
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after parameter buffers")

    try:
        model = OptFormer(config, params)
    except ShapeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    norm = header.get("normalization", {})
    model.norm_mean = float(norm.get("mean", 0.0))
    model.norm_std = float(norm.get("std", 1.0))
    return model, header.get("metadata", {})


def with_ablation(config: ModelConfig, optical_attention: bool, inception: bool, autocorrelation: bool) -> ModelConfig:
    return replace(
        config,
        use_optical_attention=optical_attention,
        use_inception=inception,
        use_autocorrelation=autocorrelation,
    )
