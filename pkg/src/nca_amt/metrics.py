"""Dependence and accuracy metrics, plus the flat binary matrix format."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

_HEADER = struct.Struct("<QQ")


def _as_2d(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"{name} must be 1-D or 2-D")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def double_centered(d: np.ndarray) -> np.ndarray:
    """Subtract row and column means and add back the grand mean."""
    return d - d.mean(axis=0, keepdims=True) - d.mean(axis=1, keepdims=True) + d.mean()


def dcov_stats(x, y) -> tuple[float, float, float]:
    """Squared distance covariance and the two squared distance variances (V-statistics)."""
    x = _as_2d(x, "x")
    y = _as_2d(y, "y")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("need at least two samples")
    a = double_centered(cdist(x, x))
    b = double_centered(cdist(y, y))
    # np.mean reduces pairwise, so the result does not depend on blocking
    return float(np.mean(a * b)), float(np.mean(a * a)), float(np.mean(b * b))


def dcorr2(x, y) -> float:
    """Squared distance correlation between paired samples ``x`` and ``y``.

    Uses the biased (V-statistic) estimator: both distance matrices are
    double-centered and the squared covariance is the mean of their elementwise
    product. Returns 0 when either input is constant across rows. The value is
    clipped to [0, 1] to absorb round-off.
    """
    dcov, dvar_x, dvar_y = dcov_stats(x, y)
    denom = dvar_x * dvar_y
    if denom <= 0.0:
        return 0.0
    return float(min(1.0, max(0.0, dcov / np.sqrt(denom))))


def one_hot(labels, k: int | None = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if k is None:
        k = int(labels.max()) + 1 if labels.size else 0
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def top1_accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax equals the label; ties resolve to the lowest index."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] < 1:
        raise ValueError("logits must be n x k with k >= 1")
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match {logits.shape[0]} rows")
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def write_matrix(path, a) -> None:
    """Little-endian f64 rows preceded by two little-endian u64 dims."""
    a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
    if a.ndim != 2:
        raise ValueError("only 2-D matrices can be written")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*a.shape))
        fh.write(a.tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    rows, cols = _HEADER.unpack_from(raw)
    body = raw[_HEADER.size:]
    if len(body) != rows * cols * 8:
        raise ValueError(f"{path}: expected {rows}x{cols} f64 payload, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


def load_features(path) -> np.ndarray:
    """Read features from the flat binary format, ``.npy``, or CSV."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    if path.suffix == ".csv":
        return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2))
    return read_matrix(path)


def load_labels(path) -> np.ndarray:
    """Labels CSV: one integer class per line, or one row per sample of a 0/1 matrix."""
    a = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    if a.shape[1] == 1:
        return one_hot(a[:, 0].astype(np.int64))
    return a
