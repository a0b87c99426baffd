"""Full-reference quality metrics and prediction-error statistics.

All moment accumulation happens in float64. PSNR and SSIM return
``UNDEFINED`` (NaN) where the metric has no value (zero MSE, zero range);
label CSV files write those cells empty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError

UNDEFINED = math.nan


def is_defined(x: float) -> bool:
    return not math.isnan(x)


def compression_ratio(original_bytes: int, compressed_bytes: int) -> float:
    """original/compressed; both sizes must be positive."""
    if original_bytes <= 0 or compressed_bytes <= 0:
        raise ArgumentError(
            f"byte sizes must be positive, got {original_bytes}/{compressed_bytes}"
        )
    return original_bytes / compressed_bytes


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ArgumentError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ArgumentError("mse of empty sequences")
    d = a - b
    return float(np.mean(d * d))


def psnr_value(data_range: float, mean_sq_err: float) -> float:
    """PSNR in dB from a range and an MSE; UNDEFINED when either is zero."""
    if data_range <= 0 or mean_sq_err <= 0:
        return UNDEFINED
    return 20.0 * math.log10(data_range) - 10.0 * math.log10(mean_sq_err)


def psnr(original, reconstruction) -> float:
    """Peak signal-to-noise ratio; range is taken from the original data."""
    orig = np.asarray(original, dtype=np.float64).ravel()
    rec = np.asarray(reconstruction, dtype=np.float64).ravel()
    if orig.size != rec.size:
        raise ArgumentError(f"length mismatch: {orig.size} vs {rec.size}")
    r = float(orig.max() - orig.min())
    return psnr_value(r, mse(orig, rec))


def _window_sums(a: np.ndarray, w: int) -> np.ndarray:
    """Sums of all stride-1 w^3 windows fully inside ``a`` (integral volume)."""
    c = np.cumsum(a, axis=0, dtype=np.float64)
    c = np.cumsum(c, axis=1)
    c = np.cumsum(c, axis=2)
    c = np.pad(c, ((1, 0), (1, 0), (1, 0)))
    return (
        c[w:, w:, w:]
        - c[:-w, w:, w:]
        - c[w:, :-w, w:]
        - c[w:, w:, :-w]
        + c[:-w, :-w, w:]
        + c[:-w, w:, :-w]
        + c[w:, :-w, :-w]
        - c[:-w, :-w, :-w]
    )


def ssim3d(original, reconstruction, window: int = 7, k1: float = 0.01,
           k2: float = 0.03, data_range: float | None = None) -> float:
    """Mean 3D SSIM over all stride-1 window positions.

    Uniform windows, population variances (divide by window volume), no
    Gaussian weighting. The dynamic range defaults to max-min of the original
    volume; pass ``data_range`` to pin it (e.g. for symmetry checks).
    """
    x = np.asarray(original, dtype=np.float64)
    y = np.asarray(reconstruction, dtype=np.float64)
    if x.shape != y.shape:
        raise ArgumentError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim != 3:
        raise ArgumentError(f"ssim3d expects 3D volumes, got shape {x.shape}")
    if any(window > d for d in x.shape):
        raise ArgumentError(f"window {window} exceeds volume shape {x.shape}")
    if window < 1:
        raise ArgumentError(f"window must be >= 1, got {window}")

    if data_range is None:
        L = float(x.max() - x.min())
        if L == 0.0:
            return 1.0 if np.array_equal(x, y) else UNDEFINED
    else:
        L = float(data_range)
        if L <= 0.0:
            return 1.0 if np.array_equal(x, y) else UNDEFINED

    n = float(window) ** 3
    sx = _window_sums(x, window)
    sy = _window_sums(y, window)
    sxx = _window_sums(x * x, window)
    syy = _window_sums(y * y, window)
    sxy = _window_sums(x * y, window)

    mx = sx / n
    my = sy / n
    vx = sxx / n - mx * mx
    vy = syy / n - my * my
    cxy = sxy / n - mx * my

    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2
    num = (2.0 * mx * my + c1) * (2.0 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def percentage_error(orig: float, pred: float) -> float:
    """Signed percentage error (orig - pred) / orig * 100."""
    if orig == 0:
        raise ArgumentError("percentage error undefined for orig == 0")
    return (orig - pred) / orig * 100.0


def mape(pairs) -> float:
    """Mean absolute percentage error over (orig, pred) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ArgumentError("mape of an empty pair list")
    return float(np.mean([abs(percentage_error(o, p)) for o, p in pairs]))


# --- label rows and their CSV form ------------------------------------------

LABEL_COLUMNS = (
    "field", "timestep", "block_id", "codec", "eb_rel", "eb_abs",
    "cr", "psnr_db", "ssim", "block_min", "block_max",
)


@dataclass
class QualityLabel:
    """One ground-truth row of the compression-quality table."""

    field_name: str
    timestep: int
    block_id: int
    codec: str
    eb_rel: float
    eb_abs: float
    cr: float
    psnr_db: float  # UNDEFINED (NaN) when reconstruction is lossless
    ssim: float  # UNDEFINED on degenerate blocks
    block_min: float
    block_max: float


def _cell(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def format_label_row(row: QualityLabel) -> str:
    return ",".join(
        [
            row.field_name,
            str(row.timestep),
            str(row.block_id),
            row.codec,
            repr(float(row.eb_rel)),
            repr(float(row.eb_abs)),
            repr(float(row.cr)),
            _cell(row.psnr_db),
            _cell(row.ssim),
            repr(float(row.block_min)),
            repr(float(row.block_max)),
        ]
    )


def write_label_csv(rows, path) -> None:
    lines = [",".join(LABEL_COLUMNS)]
    lines.extend(format_label_row(r) for r in rows)
    Path(path).write_text("\n".join(lines) + "\n")


def read_label_csv(path) -> list[QualityLabel]:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != ",".join(LABEL_COLUMNS):
        raise ArgumentError(f"{path}: missing or unexpected label CSV header")
    rows = []
    for line in text[1:]:
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(LABEL_COLUMNS):
            raise ArgumentError(f"{path}: malformed row {line!r}")
        rows.append(
            QualityLabel(
                field_name=parts[0],
                timestep=int(parts[1]),
                block_id=int(parts[2]),
                codec=parts[3],
                eb_rel=float(parts[4]),
                eb_abs=float(parts[5]),
                cr=float(parts[6]),
                psnr_db=float(parts[7]) if parts[7] else UNDEFINED,
                ssim=float(parts[8]) if parts[8] else UNDEFINED,
                block_min=float(parts[9]),
                block_max=float(parts[10]),
            )
        )
    return rows
