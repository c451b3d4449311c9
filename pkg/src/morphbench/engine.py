"""Latent-code optimization: schedule, Adam, and the end-to-end loop.

The loop averages the two subjects' latent codes, then repeatedly
renders the morph, scores it with the composite loss against cached
reference features/embeddings, backpropagates to the latent (the only
optimized variable; model weights never change) and applies a
bias-corrected Adam update under an exponentially decayed learning
rate. Terms with zero weight are skipped entirely, so their trace
columns are identically zero.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .autodiff import Tensor, backward
from .losses import (
    LossWeights,
    MsSsimParams,
    composite_loss,
    id_diff_loss,
    identity_loss,
    ms_ssim_loss,
    perceptual_loss,
)
from .models import ModelBundle

log = logging.getLogger(__name__)

LatentLike = Union["LatentCode", np.ndarray]


class NonFiniteGradientError(RuntimeError):
    """Adam received a gradient with NaN/inf entries."""

    def __init__(self, step: int):
        super().__init__(f"non-finite gradient at optimizer step {step}")
        self.step = step


class OptimizationDiverged(RuntimeError):
    """The composite loss left the finite domain; carries the partial trace."""

    def __init__(self, iteration: int, trace: list["TraceRow"]):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.trace = trace


@dataclass(frozen=True)
class LatentCode:
    """A (layers, dims) generator input; the object being optimized."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"latent must be 2-D (layers, dims), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("latent contains non-finite values")
        object.__setattr__(self, "values", arr)

    @property
    def layers(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class OptimizerConfig:
    """Loop hyper-parameters; the defaults follow the reference recipe
    (150 iterations, lr 0.03 decayed by 0.95 every 6 iterations, Adam
    with betas 0.9/0.999 and eps 1e-8)."""

    iterations: int = 150
    lr0: float = 0.03
    decay: float = 0.95
    decay_every: int = 6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not (0.0 < self.decay <= 1.0):
            raise ValueError(f"decay must lie in (0, 1], got {self.decay}")
        if self.decay_every < 1:
            raise ValueError(f"decay_every must be >= 1, got {self.decay_every}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not (0.0 <= b < 1.0):
                raise ValueError(f"{name} must lie in [0, 1), got {b}")
        if self.lr0 <= 0 or self.eps <= 0:
            raise ValueError("lr0 and eps must be positive")


@dataclass
class TraceRow:
    """Weighted loss contributions of one iteration (a disabled term
    stays exactly 0.0)."""

    iteration: int
    lr: float
    loss_total: float
    loss_perceptual: float
    loss_identity: float
    loss_ms_ssim: float
    loss_id_diff: float

    FIELDS = ("iteration", "lr", "loss_total", "loss_perceptual", "loss_identity", "loss_ms_ssim", "loss_id_diff")

    def as_tuple(self) -> tuple:
        return (
            self.iteration,
            self.lr,
            self.loss_total,
            self.loss_perceptual,
            self.loss_identity,
            self.loss_ms_ssim,
            self.loss_id_diff,
        )


@dataclass
class MorphResult:
    latent: np.ndarray
    image: np.ndarray
    trace: list[TraceRow]
    wall_time_s: float


def average_latents(l1: LatentLike, l2: LatentLike, w1: float = 1.0, w2: float = 1.0) -> LatentCode:
    """(w1*l1 + w2*l2) / 2 -- with unit weights, the arithmetic mean."""
    a = l1.values if isinstance(l1, LatentCode) else np.asarray(l1, dtype=np.float64)
    b = l2.values if isinstance(l2, LatentCode) else np.asarray(l2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"latent shapes differ: {a.shape} vs {b.shape}")
    if not (math.isfinite(w1) and math.isfinite(w2)):
        raise ValueError(f"weights must be finite, got {w1}, {w2}")
    return LatentCode((w1 * a + w2 * b) / 2.0)


def lr_at(iteration: int, cfg: OptimizerConfig) -> float:
    """lr0 * decay^floor(iteration / decay_every)."""
    if not (0 <= iteration < cfg.iterations):
        raise ValueError(f"iteration {iteration} outside [0, {cfg.iterations})")
    return cfg.lr0 * cfg.decay ** (iteration // cfg.decay_every)


@dataclass
class AdamState:
    """First/second moment buffers plus the step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: np.ndarray, cfg: OptimizerConfig) -> "AdamState":
        return cls(
            m=np.zeros_like(params),
            v=np.zeros_like(params),
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
        )


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state``, returns the new
    parameter array (the input array is left untouched)."""
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, moments {state.m.shape}"
        )
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradientError(state.step)
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def _as_latent_array(latent: LatentLike, expected: tuple[int, int], name: str) -> np.ndarray:
    arr = latent.values if isinstance(latent, LatentCode) else np.asarray(latent, dtype=np.float64)
    if arr.shape != expected:
        raise ValueError(f"{name}: latent shape {arr.shape} != generator's {expected}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: latent contains non-finite values")
    return arr


def optimize_morph(
    i1: np.ndarray,
    i2: np.ndarray,
    models: ModelBundle,
    cfg: OptimizerConfig = OptimizerConfig(),
    latent1: Optional[LatentLike] = None,
    latent2: Optional[LatentLike] = None,
    w1: float = 1.0,
    w2: float = 1.0,
    ms_params: MsSsimParams = MsSsimParams(),
) -> MorphResult:
    """Optimize a morph of two subject images.

    Latents may be supplied; otherwise they come from the bundle's
    predictor. Reference features and embeddings are extracted once and
    cached -- only the morph branch is re-evaluated per iteration. A
    non-finite loss aborts with :class:`OptimizationDiverged` carrying
    the trace collected so far.
    """
    i1 = np.asarray(i1, dtype=np.float64)
    i2 = np.asarray(i2, dtype=np.float64)
    for name, img in (("i1", i1), ("i2", i2)):
        if img.shape != models.image_shape:
            raise ValueError(f"{name}: image shape {img.shape} != model's {models.image_shape}")

    l1 = _as_latent_array(latent1 if latent1 is not None else models.predict_latent(i1), models.latent_shape, "latent1")
    l2 = _as_latent_array(latent2 if latent2 is not None else models.predict_latent(i2), models.latent_shape, "latent2")
    lat = average_latents(l1, l2, w1, w2).values

    ref1, ref2 = Tensor(i1), Tensor(i2)
    lam = cfg.weights
    feats1 = models.perceptual(ref1) if lam.lambda1 else None
    feats2 = models.perceptual(ref2) if lam.lambda1 else None
    emb1 = models.embedder(ref1) if (lam.lambda2 or lam.lambda4) else None
    emb2 = models.embedder(ref2) if (lam.lambda2 or lam.lambda4) else None

    state = AdamState.for_params(lat, cfg)
    trace: list[TraceRow] = []
    started = time.perf_counter()

    for it in range(cfg.iterations):
        lr = lr_at(it, cfg)
        leaf = Tensor(lat, requires_grad=True)
        morph = models.generator(leaf)

        parts: dict[str, Optional[Tensor]] = {
            "perceptual": None,
            "identity": None,
            "ms_ssim": None,
            "id_diff": None,
        }
        if lam.lambda2 or lam.lambda4:
            emb_m = models.embedder(morph)
        if lam.lambda1:
            parts["perceptual"] = perceptual_loss(feats1, feats2, models.perceptual(morph))
        if lam.lambda2:
            parts["identity"] = identity_loss(emb1, emb2, emb_m)
        if lam.lambda3:
            parts["ms_ssim"] = ms_ssim_loss(ref1, ref2, morph, ms_params)
        if lam.lambda4:
            parts["id_diff"] = id_diff_loss(emb1, emb2, emb_m)

        total = composite_loss(parts, lam)

        def weighted(name: str, weight: float) -> float:
            part = parts[name]
            return weight * part.item() if part is not None and weight != 0.0 else 0.0

        row = TraceRow(
            iteration=it,
            lr=lr,
            loss_total=total.item(),
            loss_perceptual=weighted("perceptual", lam.lambda1),
            loss_identity=weighted("identity", lam.lambda2),
            loss_ms_ssim=weighted("ms_ssim", lam.lambda3),
            loss_id_diff=weighted("id_diff", lam.lambda4),
        )
        trace.append(row)
        if not math.isfinite(row.loss_total):
            raise OptimizationDiverged(it, trace)

        backward(total)
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(lat)
        try:
            lat = adam_step(lat, grad, state, lr)
        except NonFiniteGradientError:
            raise OptimizationDiverged(it, trace) from None
        log.debug("iter %d lr %.6f total %.6f", it, lr, row.loss_total)

    final_image = models.generator(Tensor(lat)).data
    return MorphResult(
        latent=lat,
        image=final_image,
        trace=trace,
        wall_time_s=time.perf_counter() - started,
    )
