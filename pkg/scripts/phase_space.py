import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.linalg import hankel

from errors import ConfigError, RangeError, ShapeError

logger = logging.getLogger(__name__)

EXTRACT_MODES = ("last_column", "antidiagonal_mean")
EXTRACT_MODE_ALIASES = {
    "last": "last_column",
    "last_column": "last_column",
    "antidiag": "antidiagonal_mean",
    "antidiagonal_mean": "antidiagonal_mean",
}


@dataclass(frozen=True, eq=False)
class OriginalAttractor:
    matrix: np.ndarray
    frame_shape: Tuple[int, int]

    @property
    def M(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def N(self) -> int:
        return int(self.matrix.shape[1])

    def unflatten(self, m: int) -> np.ndarray:
        return self.matrix[m].reshape(self.frame_shape)


@dataclass(frozen=True, eq=False)
class DelayAttractor:
    matrix: np.ndarray
    target_index: int = -1

    @property
    def L(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def M(self) -> int:
        return int(self.matrix.shape[1])

    def is_hankel(self, atol: float = 0.0) -> bool:
        D = self.matrix
        if D.shape[0] < 2 or D.shape[1] < 2:
            return True
        return bool(np.allclose(D[1:, :-1], D[:-1, 1:], rtol=0.0, atol=atol))


def normalize_extract_mode(value: str) -> str:
    mode = EXTRACT_MODE_ALIASES.get(str(value or "").strip().lower())
    if mode is None:
        allowed = ", ".join(sorted(EXTRACT_MODE_ALIASES))
        raise ConfigError(f"Unsupported extract mode '{value}'. Supported values: {allowed}.")
    return mode


def build_original_attractor(frames: np.ndarray) -> OriginalAttractor:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 1:
        raise ShapeError(f"build_original_attractor: expected M x H x W frames with M >= 1, got {frames.shape}")
    M, H, W = frames.shape
    return OriginalAttractor(matrix=frames.reshape(M, H * W), frame_shape=(H, W))


def build_delay_attractor(series: Sequence[float], M: int, L: int, target_index: int = -1) -> DelayAttractor:
    """D[i][m] = series[m + i]; column m is the length-L trajectory segment starting at m."""
    values = np.asarray(series, dtype=np.float64).ravel()
    if M < 1 or L < 1:
        raise RangeError(f"build_delay_attractor: M and L must be >= 1, got M={M} L={L}")
    if values.size < M + L - 1:
        raise RangeError(f"build_delay_attractor: need {M + L - 1} values for M={M} L={L}, got {values.size}")
    matrix = hankel(values[:L], values[L - 1:L - 1 + M])
    return DelayAttractor(matrix=matrix, target_index=target_index)


def extract_forecast(D_hat: np.ndarray, mode: str = "last_column") -> np.ndarray:
    """Point forecast of length L from an L x M (or batched B x L x M) predicted delay attractor.

    antidiagonal_mean averages every entry predicting the same physical time, i.e. all
    D_hat[r][c] with r + c == (M - 1) + i.
    """
    mode = normalize_extract_mode(mode)
    D = np.asarray(D_hat, dtype=np.float64)
    if D.ndim not in (2, 3) or D.shape[-1] < 1:
        raise ShapeError(f"extract_forecast: expected L x M or B x L x M, got {D.shape}")
    if mode == "last_column":
        return D[..., -1].copy()
    if D.ndim == 3:
        return np.stack([extract_forecast(item, mode) for item in D])
    flipped = np.fliplr(D)
    return np.array([flipped.diagonal(-i).mean() for i in range(D.shape[0])])


def embedding_dimension_ok(L: int, d_o: float) -> bool:
    if not d_o > 0:
        raise ConfigError(f"Box-counting dimension d_o must be positive, got {d_o}")
    ok = L > 2.0 * d_o
    if not ok:
        logger.warning("Embedding length L=%d does not exceed 2*d_o=%g; reconstruction may fold the attractor", L, 2.0 * d_o)
    return ok
