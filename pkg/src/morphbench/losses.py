"""Loss terms for identity-preserving morph optimization.

Four ingredients, each differentiable w.r.t. the morph branch:

* feature-space (perceptual) loss over a stack of tapped conv layers,
* identity loss: mean cosine distance of the morph embedding to both
  contributing subjects' embeddings,
* identity-difference loss: L1 penalty on the imbalance between the two
  cosine distances,
* multi-scale structural similarity loss over a dyadic image pyramid,

combined into one weighted objective by :func:`composite_loss`.

Embeddings are plain 1-D tensors; a zero-norm embedding is rejected
wherever a cosine is taken. Images handed to the structural-similarity
ops are (h, w) or (c, h, w) with values on a known dynamic range
(default [0, 1]).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Union

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    as_tensor,
    clamped_pow,
    conv_bank,
    downsample2x,
    pad_reflect2d,
    reshape,
)

VectorLike = Union[Tensor, np.ndarray, list]


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights of the four composite-loss terms."""

    lambda1: float = 0.0002  # perceptual
    lambda2: float = 10.0  # identity
    lambda3: float = 1.0  # ms-ssim
    lambda4: float = 1.0  # identity difference

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0.0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
            object.__setattr__(self, name, v)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)


#: published per-scale exponents for the 5-level pyramid; they sum to
#: 1.0001 and are renormalized to exactly 1 at construction.
DEFAULT_MSSSIM_EXPONENTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class MsSsimParams:
    """Multi-scale SSIM configuration.

    A single exponent per scale plays the role of the luminance,
    contrast and structure exponents alike (they are tied). Exponents
    may arrive off unit sum by up to 1e-3 and are renormalized,
    preserving their ratios.
    """

    scales: int = 5
    exponents: tuple[float, ...] = DEFAULT_MSSSIM_EXPONENTS
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.scales < 1:
            raise ValueError(f"scales must be >= 1, got {self.scales}")
        if len(self.exponents) != self.scales:
            raise ValueError(f"need {self.scales} exponents, got {len(self.exponents)}")
        if any(e <= 0 for e in self.exponents):
            raise ValueError("exponents must be positive")
        total = float(sum(self.exponents))
        if abs(total - 1.0) > 1e-3:
            raise ValueError(f"exponents sum to {total}, outside the 1e-3 acceptance band around 1")
        object.__setattr__(self, "exponents", tuple(float(e) / total for e in self.exponents))
        for name in ("k1", "k2"):
            v = float(getattr(self, name))
            if not (0.0 < v < 0.1):
                raise ValueError(f"{name} must lie in (0, 0.1), got {v}")
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and >= 3, got {self.window_size}")
        if self.window_sigma <= 0 or self.dynamic_range <= 0:
            raise ValueError("window_sigma and dynamic_range must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2.0


@dataclass(frozen=True)
class FeatureLayer:
    """One tapped layer: its id, the feature tensor, and its element count."""

    layer_id: int
    features: Tensor
    count: int

    def __post_init__(self):
        if self.count != self.features.size:
            raise ValueError(
                f"layer {self.layer_id}: declared count {self.count} != tensor size {self.features.size}"
            )


@dataclass(frozen=True)
class FeatureStack:
    """Ordered taps of a feature extractor, layer ids strictly increasing."""

    layers: tuple[FeatureLayer, ...]

    def __post_init__(self):
        ids = [layer.layer_id for layer in self.layers]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError(f"layer ids must be strictly increasing, got {ids}")

    @classmethod
    def from_tensors(cls, tagged: list[tuple[int, Tensor]]) -> "FeatureStack":
        return cls(tuple(FeatureLayer(i, t, t.size) for i, t in tagged))

    @property
    def layer_ids(self) -> tuple[int, ...]:
        return tuple(layer.layer_id for layer in self.layers)


# ---------------------------------------------------------------------------
# feature-space loss


def perceptual_loss(f1: FeatureStack, f2: FeatureStack, fm: FeatureStack) -> Tensor:
    """Half the per-layer mean squared feature gap of the morph to each
    subject, summed over layers:

        1/2 sum_i ||F_i(1) - F_i(m)||^2 / N_i  +  1/2 sum_i ||F_i(2) - F_i(m)||^2 / N_i
    """
    if not (f1.layer_ids == f2.layer_ids == fm.layer_ids):
        raise ValueError(
            "feature stacks disagree on layer ids: "
            f"{f1.layer_ids} vs {f2.layer_ids} vs {fm.layer_ids}"
        )
    total: Optional[Tensor] = None
    for l1, l2, lm in zip(f1.layers, f2.layers, fm.layers):
        if l1.features.shape != lm.features.shape or l2.features.shape != lm.features.shape:
            raise ShapeError(
                f"layer {lm.layer_id}: feature shapes {l1.features.shape}/"
                f"{l2.features.shape}/{lm.features.shape} differ"
            )
        d1 = l1.features - lm.features
        d2 = l2.features - lm.features
        term = ((d1 * d1).sum() + (d2 * d2).sum()) * (0.5 / lm.count)
        total = term if total is None else total + term
    assert total is not None
    return total


# ---------------------------------------------------------------------------
# cosine identity losses


def _embedding(v: VectorLike, name: str) -> Tensor:
    t = as_tensor(v)
    if t.data.ndim != 1:
        raise ShapeError(f"{name} must be a 1-D embedding, got shape {t.data.shape}")
    norm = float(np.linalg.norm(t.data))
    if not math.isfinite(norm) or norm == 0.0:
        raise ValueError(f"{name} has zero or non-finite norm")
    return t


def _cosine(u: Tensor, w: Tensor) -> Tensor:
    dot = (u * w).sum()
    nu = (u * u).sum().sqrt()
    nw = (w * w).sum().sqrt()
    return dot / (nu * nw)


def identity_loss(v1: VectorLike, v2: VectorLike, vm: VectorLike) -> Tensor:
    """Mean cosine distance of the morph embedding to both subjects,
    in [0, 2]; differentiable w.r.t. the morph embedding."""
    v1, v2, vm = _embedding(v1, "v1"), _embedding(v2, "v2"), _embedding(vm, "vm")
    if not (v1.shape == v2.shape == vm.shape):
        raise ShapeError(f"embedding dimensions differ: {v1.shape}, {v2.shape}, {vm.shape}")
    return ((1.0 - _cosine(v1, vm)) + (1.0 - _cosine(v2, vm))) * 0.5


def id_diff_loss(v1: VectorLike, v2: VectorLike, vm: VectorLike) -> Tensor:
    """L1 gap between the two cosine distances; zero when the morph sits
    "between" the subjects at equal cosine distance."""
    v1, v2, vm = _embedding(v1, "v1"), _embedding(v2, "v2"), _embedding(vm, "vm")
    if not (v1.shape == v2.shape == vm.shape):
        raise ShapeError(f"embedding dimensions differ: {v1.shape}, {v2.shape}, {vm.shape}")
    return ((1.0 - _cosine(v1, vm)) - (1.0 - _cosine(v2, vm))).abs()


def identity_loss_grad_closed_form(v1: VectorLike, v2: VectorLike, vm: VectorLike) -> np.ndarray:
    """Fixed closed-form per-dimension expression for the identity-loss
    derivative, evaluated exactly as it was originally printed:

        1 - (x_d/(2|v1|) + y_d/(2|v2|)) * sum_{d'!=d} z_{d'}^2 / |vm|^3

    Caution: this expression is NOT the exact gradient of
    :func:`identity_loss` -- it carries a spurious additive constant 1
    and omits cross-dimension terms. It is kept verbatim as a
    cross-check target; use autodiff for the true gradient.
    """
    v1, v2, vm = _embedding(v1, "v1"), _embedding(v2, "v2"), _embedding(vm, "vm")
    x, y, z = v1.data, v2.data, vm.data
    if not (x.shape == y.shape == z.shape):
        raise ShapeError(f"embedding dimensions differ: {x.shape}, {y.shape}, {z.shape}")
    n1 = np.linalg.norm(x)
    n2 = np.linalg.norm(y)
    nm_sq = float(z @ z)
    rest = nm_sq - z * z  # sum over the other dimensions
    return 1.0 - (x / (2.0 * n1) + y / (2.0 * n2)) * rest / nm_sq**1.5


# ---------------------------------------------------------------------------
# windowed structural similarity


@lru_cache(maxsize=8)
def _gaussian_taps(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    taps = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return taps / taps.sum()


def _filter_separable(img: Tensor, taps: np.ndarray) -> Tensor:
    """Valid separable 2-D filtering of an (h, w) tensor."""
    k = taps.size
    h, w = img.shape
    x = reshape(img, (1, h, w))
    x = conv_bank(x, Tensor(taps.reshape(1, 1, k, 1)), 1)
    x = conv_bank(x, Tensor(taps.reshape(1, 1, 1, k)), 1)
    return reshape(x, (h - k + 1, w - k + 1))


def _window_stats(x: Tensor, y: Tensor, params: MsSsimParams):
    taps = _gaussian_taps(params.window_size, params.window_sigma)
    mu_x = _filter_separable(x, taps)
    mu_y = _filter_separable(y, taps)
    ex2 = _filter_separable(x * x, taps)
    ey2 = _filter_separable(y * y, taps)
    exy = _filter_separable(x * y, taps)
    var_x = ex2 - mu_x * mu_x
    var_y = ey2 - mu_y * mu_y
    cov = exy - mu_x * mu_y
    return mu_x, mu_y, var_x, var_y, cov


def _check_pair_2d(x: Tensor, y: Tensor, params: MsSsimParams) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"images differ in shape: {x.shape} vs {y.shape}")
    if x.data.ndim != 2:
        raise ShapeError(f"expected 2-D images, got shape {x.shape}")
    h, w = x.shape
    if h < params.window_size or w < params.window_size:
        raise ShapeError(f"image {h}x{w} smaller than the {params.window_size}-tap window")


def ssim_components(
    x: VectorLike, y: VectorLike, params: MsSsimParams = MsSsimParams()
) -> tuple[Tensor, Tensor, Tensor]:
    """Per-window luminance, contrast and structure maps:

        l = (2 mu_x mu_y + C1) / (mu_x^2 + mu_y^2 + C1)
        c = (2 s_x s_y + C2) / (s_x^2 + s_y^2 + C2)
        s = (cov + C3) / (s_x s_y + C3),   C3 = C2 / 2

    Statistics are taken under a Gaussian window over the valid region.
    The stabilizers keep flat-image comparisons at exactly 1.
    """
    x, y = as_tensor(x), as_tensor(y)
    _check_pair_2d(x, y, params)
    mu_x, mu_y, var_x, var_y, cov = _window_stats(x, y, params)
    c1, c2, c3 = params.c1, params.c2, params.c3
    # max(var, 0)^0.5 absorbs the tiny negative round-off of E[x^2]-mu^2
    sd_x = clamped_pow(var_x, 0.5)
    sd_y = clamped_pow(var_y, 0.5)
    lum = (2.0 * (mu_x * mu_y) + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    con = (2.0 * (sd_x * sd_y) + c2) / (var_x + var_y + c2)
    struct = (cov + c3) / (sd_x * sd_y + c3)
    return lum, con, struct


def _luminance_and_cs(x: Tensor, y: Tensor, params: MsSsimParams) -> tuple[Tensor, Tensor]:
    """Luminance map and the fused contrast*structure map

        cs = (2 cov + C2) / (var_x + var_y + C2)

    which equals c*s exactly when C3 = C2/2, and avoids the standard
    deviations (hence square-root gradients) in the optimization path.
    """
    mu_x, mu_y, var_x, var_y, cov = _window_stats(x, y, params)
    c1, c2 = params.c1, params.c2
    lum = (2.0 * (mu_x * mu_y) + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    cs = (2.0 * cov + c2) / (var_x + var_y + c2)
    return lum, cs


#: anti-alias taps applied before each 2x pooling step of the pyramid
_PYRAMID_TAPS = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _pyramid_reduce(img: Tensor) -> Tensor:
    """Binomial low-pass (reflect padded, size preserving) then 2x pooling."""
    k = _PYRAMID_TAPS.size
    h, w = img.shape
    x = pad_reflect2d(img, k // 2)
    x = reshape(x, (1, h + k - 1, w + k - 1))
    x = conv_bank(x, Tensor(_PYRAMID_TAPS.reshape(1, 1, k, 1)), 1)
    x = conv_bank(x, Tensor(_PYRAMID_TAPS.reshape(1, 1, 1, k)), 1)
    return downsample2x(reshape(x, (h, w)))


def feasible_scales(height: int, width: int, params: MsSsimParams) -> int:
    """Largest dyadic scale count whose coarsest image still fits the window."""
    side = min(height, width)
    j = 0
    while side // (2**j) >= params.window_size:
        j += 1
    return j


def _scale_exponents(params: MsSsimParams, j: int) -> tuple[float, ...]:
    kept = params.exponents[:j]
    total = sum(kept)
    return tuple(e / total for e in kept)


def ms_ssim(x: VectorLike, y: VectorLike, params: MsSsimParams = MsSsimParams()) -> Tensor:
    """Multi-scale structural similarity.

    Contrast*structure is pooled (window mean) per scale, luminance only
    at the coarsest scale, and the pooled factors are combined as

        prod_j mean(cs_j)^e_j * mean(l_J)^e_J

    Scales halve through a low-passed 2x pyramid. When the image cannot
    support the configured number of scales, the count drops to the
    largest feasible value and the retained exponents are renormalized.
    Negative pooled factors are clamped at 0 before the fractional
    powers, so the result lives in [0, 1].
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"images differ in shape: {x.shape} vs {y.shape}")
    if x.data.ndim == 3:
        per_channel = [
            ms_ssim(_slice_channel(x, c), _slice_channel(y, c), params) for c in range(x.shape[0])
        ]
        total = per_channel[0]
        for t in per_channel[1:]:
            total = total + t
        return total * (1.0 / len(per_channel))
    _check_pair_2d(x, y, params)

    j_max = feasible_scales(x.shape[0], x.shape[1], params)
    n_scales = min(params.scales, j_max)
    exps = _scale_exponents(params, n_scales)

    cur_x, cur_y = x, y
    result: Optional[Tensor] = None
    for j in range(n_scales):
        lum, cs = _luminance_and_cs(cur_x, cur_y, params)
        factor = clamped_pow(cs.mean(), exps[j])
        result = factor if result is None else result * factor
        if j == n_scales - 1:
            result = result * clamped_pow(lum.mean(), exps[j])
        else:
            cur_x = _pyramid_reduce(cur_x)
            cur_y = _pyramid_reduce(cur_y)
    assert result is not None
    return result


def ms_ssim_loss(
    i1: VectorLike,
    i2: VectorLike,
    im: VectorLike,
    params: MsSsimParams = MsSsimParams(),
) -> Tensor:
    """Structural dissimilarity of the morph to both subjects:

        (1 - MS-SSIM(i1, im))/2 + (1 - MS-SSIM(i2, im))/2

    Multi-channel images are scored per channel and averaged. The morph
    image may be a graph node; subject images are treated as constants.
    """
    i1, i2, im = as_tensor(i1), as_tensor(i2), as_tensor(im)
    if not (i1.shape == i2.shape == im.shape):
        raise ShapeError(f"image shapes differ: {i1.shape}, {i2.shape}, {im.shape}")
    if im.data.ndim == 2:
        m1 = ms_ssim(i1, im, params)
        m2 = ms_ssim(i2, im, params)
        return (1.0 - m1) * 0.5 + (1.0 - m2) * 0.5
    if im.data.ndim != 3:
        raise ShapeError(f"expected (h,w) or (c,h,w) images, got {im.shape}")
    channels = im.shape[0]
    total: Optional[Tensor] = None
    for c in range(channels):
        im_c = _slice_channel(im, c)
        m1 = ms_ssim(Tensor(i1.data[c]), im_c, params)
        m2 = ms_ssim(Tensor(i2.data[c]), im_c, params)
        term = (1.0 - m1) * 0.5 + (1.0 - m2) * 0.5
        total = term if total is None else total + term
    assert total is not None
    return total * (1.0 / channels)


def _slice_channel(img: Tensor, c: int) -> Tensor:
    """Differentiable single-channel view of a (c,h,w) tensor."""
    channels, h, w = img.shape
    data = img.data[c]

    def bwd(g: np.ndarray):
        dx = np.zeros_like(img.data)
        dx[c] = g
        return (dx,)

    return Tensor._node(data, "channel", (img,), bwd)


# ---------------------------------------------------------------------------
# composite objective


_PART_ORDER = ("perceptual", "identity", "ms_ssim", "id_diff")


def composite_loss(parts: dict, weights: LossWeights) -> Tensor:
    """Weighted sum  l1*perceptual + l2*identity + l3*ms_ssim + l4*id_diff.

    ``parts`` maps each term name to its scalar tensor; a part may be
    ``None`` only when its weight is zero (the term then contributes
    nothing and, by linearity, the sum equals the remaining weighted
    parts).
    """
    unknown = set(parts) - set(_PART_ORDER)
    if unknown:
        raise ValueError(f"unknown loss parts: {sorted(unknown)}")
    total: Optional[Tensor] = None
    for name, lam in zip(_PART_ORDER, weights.as_tuple()):
        part = parts.get(name)
        if part is None:
            if lam != 0.0:
                raise ValueError(f"part {name!r} missing but its weight is {lam}")
            continue
        if lam == 0.0:
            continue
        part = as_tensor(part)
        if part.size != 1:
            raise ShapeError(f"part {name!r} must be scalar, got shape {part.shape}")
        term = part * lam
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)
