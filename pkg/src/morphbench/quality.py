"""Reference-based perceptual quality of morphs against both parents.

PSNR and single-scale SSIM are computed against each parent image and
averaged. Identical images have infinite PSNR; the value is kept as
``math.inf`` in memory, rendered as the string ``INF`` in CSV output and
excluded (with a count) from confidence intervals. Confidence intervals
use the normal approximation mean ± 1.96·sd/sqrt(n); the method is
recorded in report metadata so alternatives can be compared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .autodiff import ShapeError, Tensor
from .losses import MsSsimParams, ssim_components

ImageLike = Union[np.ndarray, Sequence]

#: CSV rendering of an infinite PSNR
INF_SENTINEL = "INF"

CI_METHOD = "normal-approximation z=1.96"
_Z95 = 1.96


@dataclass(frozen=True)
class QualityRecord:
    morph_id: str
    psnr_avg: float  # dB; math.inf for identical images
    ssim_avg: float

    def psnr_text(self) -> str:
        return INF_SENTINEL if math.isinf(self.psnr_avg) else repr(self.psnr_avg)


@dataclass(frozen=True)
class CiSummary:
    mean: float
    halfwidth: float
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"confidence interval needs n >= 2, got {self.n}")
        if self.halfwidth < 0:
            raise ValueError("halfwidth must be non-negative")


def psnr(x: ImageLike, ref: ImageLike, peak: float = 1.0) -> float:
    """10·log10(peak² / MSE); +inf for identical images."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {ref.shape}")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim_global(x: ImageLike, y: ImageLike, params: MsSsimParams = MsSsimParams()) -> float:
    """Mean over windows of l·c·s (single-scale SSIM). Multi-channel
    images are scored per channel and averaged."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 3:
        return float(np.mean([ssim_global(x[c], y[c], params) for c in range(x.shape[0])]))
    lum, con, struct = ssim_components(Tensor(x), Tensor(y), params)
    return float((lum.data * con.data * struct.data).mean())


def morph_quality(
    morph_id: str,
    im: ImageLike,
    parent1: ImageLike,
    parent2: ImageLike,
    params: MsSsimParams = MsSsimParams(),
    peak: float = 1.0,
) -> QualityRecord:
    """Average PSNR/SSIM of the morph against both parent images."""
    p1 = psnr(im, parent1, peak)
    p2 = psnr(im, parent2, peak)
    s1 = ssim_global(im, parent1, params)
    s2 = ssim_global(im, parent2, params)
    return QualityRecord(
        morph_id=morph_id,
        psnr_avg=(p1 + p2) / 2.0,
        ssim_avg=(s1 + s2) / 2.0,
    )


def summarize_ci(values: Sequence[float]) -> CiSummary:
    """mean ± 1.96·sd/sqrt(n) with the sample standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise ValueError(f"confidence interval needs at least 2 values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("confidence interval over non-finite values")
    mean = float(arr.mean())
    sd = float(arr.std(ddof=1))
    return CiSummary(mean=mean, halfwidth=_Z95 * sd / math.sqrt(arr.size), n=int(arr.size))
