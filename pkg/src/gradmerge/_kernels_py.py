"""Pure numpy implementations of the hot kernels.

Same signatures as the compiled ``_kernels`` module; used when the extension is
not built or when ``GRADMERGE_PURE=1``.
"""
import numpy as np

CENTRAL = 0
SOBEL = 1

AGG_MAX = 0
AGG_MEAN = 1


def _padded(values):
    return np.pad(values, ((1, 1), (1, 1), (0, 0)), mode="edge")


def gradient_energy(values, method):
    """Per-token gradient magnitude of an (H, W, C) float64 array."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    p = _padded(values)
    if method == CENTRAL:
        gx = p[1:-1, 2:] - p[1:-1, :-2]
        gy = p[2:, 1:-1] - p[:-2, 1:-1]
    elif method == SOBEL:
        left = p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2]
        right = p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:]
        top = p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:]
        bottom = p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:]
        gx = right - left
        gy = bottom - top
    else:
        raise ValueError(f"unknown gradient method {method!r}")
    return np.sqrt(np.sum(gx * gx + gy * gy, axis=-1))


def cell_reduce(energy, cells, agg, sigma):
    """Flatness score and destination token for every cell.

    ``energy`` is the flat (H*W,) gradient field and ``cells`` an (M, k) int64
    array of token indices, each row ascending. Returns ``(scores, dst)`` where
    ``scores[m] = -agg(energy[cells[m]])`` and ``dst[m]`` is the first token of
    the row maximising ``sigma * energy``.
    """
    energy = np.asarray(energy, dtype=np.float64)
    cells = np.asarray(cells, dtype=np.int64)
    vals = energy[cells]
    if agg == AGG_MAX:
        scores = -vals.max(axis=1)
    elif agg == AGG_MEAN:
        scores = -vals.mean(axis=1)
    else:
        raise ValueError(f"unknown aggregation {agg!r}")
    # argmax returns the first maximiser, i.e. the smallest token index
    pick = np.argmax(sigma * vals, axis=1)
    dst = cells[np.arange(len(cells)), pick]
    return scores, dst
