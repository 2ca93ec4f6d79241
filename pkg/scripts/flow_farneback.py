"""Dense optical flow between SST frames.

Each frame is approximated around every pixel by a quadratic xᵀAx + bᵀx + c fitted with
Gaussian-weighted least squares over a truncated window. The displacement d = [u, v]
(u along rows, v along columns) minimizes the windowed data term Σ w (b̄ᵀd − ΔX)² with
b̄ the mean linear coefficient of both frames, iterated with warping, and blended with
the confidence-weighted neighborhood flow to realize the λ‖∇d‖² smoothness term.
A Gaussian pyramid carries large displacements from coarse to fine levels.
"""

import logging
import os
import re
from dataclasses import dataclass, fields
from functools import lru_cache
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.ndimage import correlate, gaussian_filter, map_coordinates

from errors import ConfigError, FormatError, NumericError, RangeError, ShapeError

logger = logging.getLogger(__name__)

PYRAMID_BLUR_SIGMA = 1.0
MIN_PYRAMID_SIZE = 2
RIDGE = 1e-9
RELATIVE_RIDGE = 1e-3
PINV_RCOND = 1e-10
PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


@dataclass(frozen=True)
class FlowParams:
    pyramid_levels: int = 4
    window_radius: int = 5
    gaussian_sigma: float = 1.5
    smoothness_lambda: float = 0.15
    iterations: int = 3
    post_smoothing_sigma: float = 1.0

    def __post_init__(self) -> None:
        if self.pyramid_levels < 1:
            raise ConfigError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        if self.window_radius < 1:
            raise ConfigError(f"window_radius must be >= 1, got {self.window_radius}")
        if self.gaussian_sigma <= 0:
            raise ConfigError(f"gaussian_sigma must be > 0, got {self.gaussian_sigma}")
        if self.smoothness_lambda < 0:
            raise ConfigError(f"smoothness_lambda must be >= 0, got {self.smoothness_lambda}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.post_smoothing_sigma < 0:
            raise ConfigError(f"post_smoothing_sigma must be >= 0, got {self.post_smoothing_sigma}")

    @classmethod
    def from_config(cls, section: Dict[str, Any]) -> "FlowParams":
        ints = {"pyramid_levels", "window_radius", "iterations"}
        kwargs = {}
        for f in fields(cls):
            value = (section or {}).get(f.name)
            if value is not None:
                kwargs[f.name] = int(value) if f.name in ints else float(value)
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True, eq=False)
class PolyExpansion:
    A: np.ndarray  # H, W, 2, 2
    b: np.ndarray  # H, W, 2
    c: np.ndarray  # H, W

    def reconstruct(self, di: float, dj: float) -> np.ndarray:
        """Model value at offset (di, dj) from every pixel."""
        x = np.array([di, dj], dtype=np.float64)
        return np.einsum("i,hwij,j->hw", x, self.A, x) + self.b @ x + self.c


@dataclass(frozen=True, eq=False)
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.shape != v.shape or u.ndim != 2:
            raise ShapeError(f"FlowField: u {u.shape} and v {v.shape} must be equal 2-D shapes")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise NumericError("FlowField: non-finite displacement")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.u.shape)

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)

    def mean(self, mask: Optional[np.ndarray] = None) -> Tuple[float, float]:
        if mask is None:
            return float(self.u.mean()), float(self.v.mean())
        return float(self.u[mask].mean()), float(self.v[mask].mean())

    def total_variation(self) -> float:
        tv = 0.0
        for comp in (self.u, self.v):
            tv += float(np.abs(np.diff(comp, axis=0)).sum() + np.abs(np.diff(comp, axis=1)).sum())
        return tv

    @classmethod
    def zeros(cls, shape: Tuple[int, int]) -> "FlowField":
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass(frozen=True, eq=False)
class FlowSequence:
    flows: Tuple[FlowField, ...]

    def __len__(self) -> int:
        return len(self.flows)

    @property
    def alpha_x(self) -> np.ndarray:
        return np.stack([f.u for f in self.flows])

    @property
    def alpha_y(self) -> np.ndarray:
        return np.stack([f.v for f in self.flows])

    @property
    def flow_data(self) -> np.ndarray:
        """M x H x W x 2 stack of [u, v]."""
        return np.stack([self.alpha_x, self.alpha_y], axis=-1)

    @classmethod
    def ones(cls, M: int, shape: Tuple[int, int]) -> "FlowSequence":
        unit = FlowField(np.ones(shape), np.ones(shape))
        return cls(tuple(unit for _ in range(M)))


def _window_kernel(radius: int, sigma: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    a, b = np.meshgrid(offsets, offsets, indexing="ij")
    w = np.exp(-(a**2 + b**2) / (2.0 * sigma**2))
    return w, a, b


@lru_cache(maxsize=64)
def _expansion_operator(shape: Tuple[int, int], radius: int, sigma: float) -> Tuple[np.ndarray, np.ndarray]:
    """Basis kernels and per-pixel pseudo-inverse of the truncated-window normal matrix."""
    w, a, b = _window_kernel(radius, sigma)
    basis = [np.ones_like(a), a, b, a**2, b**2, a * b]
    kernels = np.stack([w * phi for phi in basis])
    ones = np.ones(shape)
    gram = np.empty(shape + (6, 6))
    for p in range(6):
        for q in range(p, 6):
            gram[..., p, q] = correlate(ones, w * basis[p] * basis[q], mode="constant", cval=0.0)
            gram[..., q, p] = gram[..., p, q]
    return kernels, np.linalg.pinv(gram, rcond=PINV_RCOND)


def _check_frame(frame: np.ndarray, name: str) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D field, got shape {frame.shape}")
    if not np.all(np.isfinite(frame)):
        raise NumericError(f"{name}: non-finite cells; fill land NaN before estimating flow")
    return frame


def polynomial_expansion(frame: np.ndarray, params: FlowParams = FlowParams()) -> PolyExpansion:
    frame = _check_frame(frame, "polynomial_expansion")
    kernels, pinv = _expansion_operator(frame.shape, params.window_radius, float(params.gaussian_sigma))
    moments = np.stack([correlate(frame, k, mode="constant", cval=0.0) for k in kernels])
    r = np.einsum("hwpq,qhw->hwp", pinv, moments)
    off = r[..., 5] / 2.0
    A = np.stack([np.stack([r[..., 3], off], axis=-1), np.stack([off, r[..., 4]], axis=-1)], axis=-2)
    return PolyExpansion(A=A, b=r[..., 1:3].copy(), c=r[..., 0].copy())


def _solve2x2(a11, a12, a22, r1, r2) -> Tuple[np.ndarray, np.ndarray]:
    det = a11 * a22 - a12 * a12
    safe = np.where(np.abs(det) > 1e-300, det, np.inf)
    return (a22 * r1 - a12 * r2) / safe, (a11 * r2 - a12 * r1) / safe


def _clip_update(du: np.ndarray, dv: np.ndarray, limit: float) -> Tuple[np.ndarray, np.ndarray]:
    """Scale corrections longer than ``limit`` cells back onto that radius."""
    length = np.hypot(du, dv)
    scale = np.where(length > limit, limit / np.maximum(length, 1e-300), 1.0)
    return du * scale, dv * scale


def _normalized_pair(f1: np.ndarray, f2: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    both = np.concatenate([f1.ravel(), f2.ravel()])
    scale = float(both.std())
    if scale <= 0.0:
        return f1 - both.mean(), f2 - both.mean()
    return (f1 - both.mean()) / scale, (f2 - both.mean()) / scale


def estimate_flow_pair(
    f1: np.ndarray,
    f2: np.ndarray,
    init: Optional[FlowField] = None,
    params: FlowParams = FlowParams(),
) -> FlowField:
    f1 = _check_frame(f1, "estimate_flow_pair")
    f2 = _check_frame(f2, "estimate_flow_pair")
    if f1.shape != f2.shape:
        raise ShapeError(f"estimate_flow_pair: frame shapes differ {f1.shape} vs {f2.shape}")
    if init is not None and init.shape != f1.shape:
        raise ShapeError(f"estimate_flow_pair: init shape {init.shape} does not match frames {f1.shape}")

    g1, g2 = _normalized_pair(f1, f2)
    u0 = np.zeros(f1.shape) if init is None else init.u.copy()
    v0 = np.zeros(f1.shape) if init is None else init.v.copy()
    u, v = u0, v0
    reach = float(params.window_radius)
    window, _, _ = _window_kernel(params.window_radius, float(params.gaussian_sigma))
    wsum = correlate(np.ones(f1.shape), window, mode="constant", cval=0.0)
    h, w = f1.shape
    rows, cols = np.meshgrid(np.arange(f1.shape[0], dtype=np.float64), np.arange(f1.shape[1], dtype=np.float64), indexing="ij")
    lam = float(params.smoothness_lambda)

    def local(x: np.ndarray) -> np.ndarray:
        return correlate(x, window, mode="constant", cval=0.0) / wsum

    e1 = polynomial_expansion(g1, params)
    for _ in range(params.iterations):
        warped = map_coordinates(g2, [rows + u, cols + v], order=1, mode="nearest")
        # samples warped in from outside the frame carry no data
        inside = ((rows + u >= 0) & (rows + u <= h - 1) & (cols + v >= 0) & (cols + v <= w - 1)).astype(np.float64)
        e2 = polynomial_expansion(warped, params)
        bi = 0.5 * (e1.b[..., 0] + e2.b[..., 0])
        bj = 0.5 * (e1.b[..., 1] + e2.b[..., 1])
        diff = e1.c - e2.c
        n11, n12, n22 = local(inside * bi * bi), local(inside * bi * bj), local(inside * bj * bj)
        # near-singular normal matrices (aperture, flat patches) only move along the gradient
        ridge = RELATIVE_RIDGE * (n11 + n22) + RIDGE
        du, dv = _solve2x2(n11 + ridge, n12, n22 + ridge, local(inside * bi * diff), local(inside * bj * diff))
        u_data, v_data = u + du, v + dv
        if lam > 0.0:
            confidence = n11 + n22
            weight = local(confidence) + RIDGE
            u_bar = local(confidence * u_data) / weight
            v_bar = local(confidence * v_data) / weight
            u, v = _solve2x2(
                n11 + lam,
                n12,
                n22 + lam,
                n11 * u_data + n12 * v_data + lam * u_bar,
                n12 * u_data + n22 * v_data + lam * v_bar,
            )
        else:
            u, v = u_data, v_data
        du, dv = _clip_update(u - u0, v - v0, reach)
        u, v = u0 + du, v0 + dv

    if params.post_smoothing_sigma > 0:
        u = gaussian_filter(u, params.post_smoothing_sigma, mode="nearest")
        v = gaussian_filter(v, params.post_smoothing_sigma, mode="nearest")
    return FlowField(u, v)


def build_pyramid(frame: np.ndarray, levels: int) -> List[np.ndarray]:
    """Level 0 is the frame; each next level is blurred then subsampled by 2 (floor sizes).

    Levels that would drop below 2 cells in either axis are clamped away.
    """
    if levels < 1:
        raise RangeError(f"build_pyramid: levels must be >= 1, got {levels}")
    pyramid = [np.asarray(frame, dtype=np.float64)]
    for level in range(1, levels):
        current = pyramid[-1]
        h, w = current.shape[0] // 2, current.shape[1] // 2
        if h < MIN_PYRAMID_SIZE or w < MIN_PYRAMID_SIZE:
            logger.debug("Pyramid clamped to %d level(s) for a %s frame", level, pyramid[0].shape)
            break
        blurred = gaussian_filter(current, PYRAMID_BLUR_SIGMA, mode="nearest")
        pyramid.append(blurred[0:2 * h:2, 0:2 * w:2])
    return pyramid


def _upsample_flow(flow: FlowField, shape: Tuple[int, int]) -> FlowField:
    rows, cols = np.meshgrid(np.arange(shape[0]) / 2.0, np.arange(shape[1]) / 2.0, indexing="ij")
    up_u = map_coordinates(flow.u, [rows, cols], order=1, mode="nearest")
    up_v = map_coordinates(flow.v, [rows, cols], order=1, mode="nearest")
    return FlowField(2.0 * up_u, 2.0 * up_v)


def min_fit_size(params: FlowParams) -> int:
    return 2 * params.window_radius + 1


def fit_start_level(pyramid: List[np.ndarray], params: FlowParams) -> int:
    """Coarsest level whose frame still holds a full fit window; level 0 is always refined."""
    level = 0
    for index, frame in enumerate(pyramid):
        if min(frame.shape) >= min_fit_size(params):
            level = index
    return level


def estimate_flow_pyramidal(f1: np.ndarray, f2: np.ndarray, params: FlowParams = FlowParams()) -> FlowField:
    f1 = _check_frame(f1, "estimate_flow_pyramidal")
    f2 = _check_frame(f2, "estimate_flow_pyramidal")
    if f1.shape != f2.shape:
        raise ShapeError(f"estimate_flow_pyramidal: frame shapes differ {f1.shape} vs {f2.shape}")
    p1 = build_pyramid(f1, params.pyramid_levels)
    p2 = build_pyramid(f2, params.pyramid_levels)
    coarsest = fit_start_level(p1, params)
    if coarsest < len(p1) - 1:
        logger.debug(
            "Skipping %d pyramid level(s) smaller than the %d-cell fit window", len(p1) - 1 - coarsest, min_fit_size(params)
        )
    flow: Optional[FlowField] = None
    for level in reversed(range(coarsest + 1)):
        init = None if flow is None else _upsample_flow(flow, p1[level].shape)
        flow = estimate_flow_pair(p1[level], p2[level], init=init, params=params)
    return flow


def estimate_flow_sequence(frames: np.ndarray, params: FlowParams = FlowParams()) -> FlowSequence:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise ShapeError(f"estimate_flow_sequence: expected M x H x W frames, got {frames.shape}")
    if frames.shape[0] < 2:
        raise RangeError(f"estimate_flow_sequence: need M >= 2 frames, got {frames.shape[0]}")
    flows = [estimate_flow_pyramidal(frames[m], frames[m + 1], params) for m in range(frames.shape[0] - 1)]
    last = flows[-1]
    flows.append(FlowField(last.u.copy(), last.v.copy()))
    return FlowSequence(tuple(flows))


def _write_pgm(path: str, image: np.ndarray) -> None:
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.astype(np.uint8).tobytes())


def magnitude_to_gray(magnitude: np.ndarray) -> np.ndarray:
    peak = float(magnitude.max()) if magnitude.size else 0.0
    if peak <= 0.0:
        return np.zeros(magnitude.shape, dtype=np.uint8)
    return np.rint(magnitude / peak * 255.0).astype(np.uint8)


def write_flow_dumps(sequence: FlowSequence, out_dir: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    written: List[str] = []
    for m, flow in enumerate(sequence.flows):
        for name, comp in (("u", flow.u), ("v", flow.v)):
            path = os.path.join(out_dir, f"flow_{name}_{m}.csv")
            np.savetxt(path, comp, delimiter=",", fmt="%.10g")
            written.append(path)
        path = os.path.join(out_dir, f"flow_mag_{m}.pgm")
        _write_pgm(path, magnitude_to_gray(flow.magnitude()))
        written.append(path)
    return written


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    match = PGM_HEADER.match(raw)
    if match is None:
        raise FormatError(f"{path}: not a binary PGM")
    w, h = int(match.group(1)), int(match.group(2))
    return np.frombuffer(raw[match.end():match.end() + w * h], dtype=np.uint8).reshape(h, w)


def flow_sequences_close(a: FlowSequence, b: FlowSequence, atol: float = 0.0) -> bool:
    if len(a) != len(b):
        return False
    return all(
        np.allclose(x.u, y.u, rtol=0.0, atol=atol) and np.allclose(x.v, y.v, rtol=0.0, atol=atol)
        for x, y in zip(a.flows, b.flows)
    )
