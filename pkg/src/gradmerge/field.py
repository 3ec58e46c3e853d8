"""Token feature grids and first-order gradient energy."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._backend import kernels
from .errors import ShapeError, ZeroNormError

GRADIENT_METHODS = ("central", "sobel")
_METHOD_CODE = {"central": 0, "sobel": 1}


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """An H x W grid of C-dimensional tokens, stored as an (H, W, C) float64 array."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ShapeError(f"expected a non-empty (H, W, C) array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ShapeError("feature grid contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def H(self) -> int:
        return self.values.shape[0]

    @property
    def W(self) -> int:
        return self.values.shape[1]

    @property
    def C(self) -> int:
        return self.values.shape[2]

    @property
    def n_tokens(self) -> int:
        return self.H * self.W

    def tokens(self) -> np.ndarray:
        """Row-major (H*W, C) view of the tokens."""
        return self.values.reshape(self.n_tokens, self.C)

    @classmethod
    def from_flat(cls, H: int, W: int, C: int, values) -> FeatureGrid:
        flat = np.asarray(values, dtype=np.float64).ravel()
        if flat.size != H * W * C:
            raise ShapeError(f"{flat.size} values do not fill a {H}x{W}x{C} grid")
        return cls(flat.reshape(H, W, C))

    @classmethod
    def from_tokens(cls, tokens, H: int, W: int) -> FeatureGrid:
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] != H * W:
            raise ShapeError(f"{tokens.shape} tokens do not fill a {H}x{W} grid")
        return cls(tokens.reshape(H, W, tokens.shape[1]))

    def __add__(self, other):
        return FeatureGrid(self.values + other.values)

    def __mul__(self, scalar):
        return FeatureGrid(self.values * float(scalar))

    __rmul__ = __mul__

    # serialization

    def to_dict(self) -> dict:
        return {"H": self.H, "W": self.W, "C": self.C, "values": self.values.ravel().tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> FeatureGrid:
        return cls.from_flat(int(d["H"]), int(d["W"]), int(d["C"]), d["values"])

    def to_bytes(self) -> bytes:
        """Little-endian: three uint32 (H, W, C) followed by float64 values row-major."""
        header = struct.pack("<3I", self.H, self.W, self.C)
        return header + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> FeatureGrid:
        H, W, C = struct.unpack_from("<3I", blob)
        flat = np.frombuffer(blob, dtype="<f8", offset=12)
        return cls.from_flat(H, W, C, flat)

    def save(self, path) -> None:
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(json.dumps(self.to_dict()))
        else:
            path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> FeatureGrid:
        path = Path(path)
        if path.suffix == ".json":
            return cls.from_dict(json.loads(path.read_text()))
        return cls.from_bytes(path.read_bytes())


@dataclass(frozen=True, eq=False)
class GradientField:
    """Nonnegative per-token energy on an H x W grid."""

    magnitudes: np.ndarray

    def __post_init__(self):
        m = np.array(self.magnitudes, dtype=np.float64)
        if m.ndim != 2:
            raise ShapeError(f"expected an (H, W) array, got shape {m.shape}")
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            raise ShapeError("gradient magnitudes must be finite and nonnegative")
        m.setflags(write=False)
        object.__setattr__(self, "magnitudes", m)

    @property
    def H(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def W(self) -> int:
        return self.magnitudes.shape[1]

    def flat(self) -> np.ndarray:
        return self.magnitudes.ravel()

    def to_csv(self, path) -> None:
        """H rows by W columns, 12 significant digits."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in self.magnitudes:
                writer.writerow([format(x, ".12g") for x in row])


def _replicate_pad(values: np.ndarray) -> np.ndarray:
    return np.pad(values, ((1, 1), (1, 1), (0, 0)), mode="edge")


def central_diff_gradients(grid: FeatureGrid) -> tuple[np.ndarray, np.ndarray]:
    """Clamped central differences along w (gx) and h (gy), per channel."""
    p = _replicate_pad(grid.values)
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    return gx, gy


def sobel_gradients(grid: FeatureGrid) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized 3x3 Sobel responses (correlation form) with replicate padding."""
    p = _replicate_pad(grid.values)
    left = p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2]
    right = p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:]
    top = p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:]
    bottom = p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:]
    return right - left, bottom - top


def gradient_magnitude(gx: np.ndarray, gy: np.ndarray) -> GradientField:
    gx = np.asarray(gx, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    if gx.shape != gy.shape or gx.ndim != 3:
        raise ShapeError(f"gradient shapes differ or are not (H, W, C): {gx.shape}, {gy.shape}")
    return GradientField(np.sqrt(np.sum(gx * gx, axis=-1) + np.sum(gy * gy, axis=-1)))


def gradient_energy(grid: FeatureGrid, method: str = "sobel") -> GradientField:
    """Fused gradient magnitude through the selected kernel backend."""
    if method not in _METHOD_CODE:
        raise ValueError(f"unknown gradient method {method!r}; expected one of {GRADIENT_METHODS}")
    return GradientField(kernels.gradient_energy(grid.values, _METHOD_CODE[method]))


def pairwise_energy(grid: FeatureGrid) -> GradientField:
    """Mean cosine similarity of each token to all tokens (itself included).

    Fully-connected surrogate used only for comparison maps and cost accounting.
    """
    x = grid.tokens()
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ZeroNormError("pairwise energy needs nonzero tokens")
    u = x / norms[:, None]
    energy = (u @ u.T).mean(axis=1)
    # cosine is clipped into [-1, 1]; negative means are floored so the field stays nonnegative
    return GradientField(np.clip(energy, 0.0, None).reshape(grid.H, grid.W))
