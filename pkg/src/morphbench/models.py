"""Pluggable differentiable models and their on-disk weight container.

A :class:`ModelBundle` wires three callables over the tensor engine:

* ``generator``  -- latent (layers, dims) -> image (3, side, side)
* ``embedder``   -- image -> embedding vector (not normalized; cosine
  handles the norm)
* ``perceptual`` -- image -> :class:`~morphbench.losses.FeatureStack`

The bundled toy models are deterministic, fixed-seed stand-ins for the
large pretrained networks this pipeline usually drives: the generator
mixes the latent rows affinely into a low-resolution map and upsamples
it smoothly; the embedder is a strided conv stack with a linear head;
the perceptual net taps three conv layers of decreasing resolution.
A least-squares inversion of the generator's linear map doubles as the
latent predictor.

Weight container layout: 8-byte magic ``MBWT0001``, one line of JSON
manifest (``{"version": 1, "meta": {...}, "tensors": [{"name", "shape"},
...]}``, newline-terminated), then the raw little-endian float64 payload
concatenated in manifest order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .autodiff import Tensor, conv_bank, matmul, reshape
from .losses import FeatureStack

MAGIC = b"MBWT0001"
CONTAINER_VERSION = 1

#: side of the generator's low-resolution base map
BASE_SIDE = 8


class ContainerError(ValueError):
    """Malformed weight container."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class ShapeManifestError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


@dataclass
class ModelBundle:
    """Immutable set of models sharing latent/image/embedding contracts."""

    generator: Callable[[Tensor], Tensor]
    embedder: Callable[[Tensor], Tensor]
    perceptual: Callable[[Tensor], FeatureStack]
    latent_shape: tuple[int, int]
    image_shape: tuple[int, int, int]
    embed_dim: int
    weights: dict[str, np.ndarray]
    meta: dict
    _predictor: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)

    def predict_latent(self, image: np.ndarray) -> np.ndarray:
        """Estimate a latent whose generated image approximates ``image``."""
        if self._predictor is None:
            raise NotImplementedError("this bundle has no latent predictor")
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.image_shape:
            raise ValueError(f"image shape {image.shape} != expected {self.image_shape}")
        return self._predictor(image)


def _upsample_matrix(side: int) -> np.ndarray:
    """(side, BASE_SIDE) bilinear interpolation weights along one axis."""
    u = np.zeros((side, BASE_SIDE))
    for i in range(side):
        src = (i + 0.5) * BASE_SIDE / side - 0.5
        src = min(max(src, 0.0), BASE_SIDE - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, BASE_SIDE - 1)
        frac = src - lo
        u[i, lo] += 1.0 - frac
        u[i, hi] += frac
    return u


def _sigmoid(x: Tensor) -> Tensor:
    return 1.0 / ((-x).exp() + 1.0)


def _toy_weight_shapes(side: int, latent: tuple[int, int], embed_dim: int) -> dict[str, tuple]:
    layers, dims = latent
    e1 = (side - 5) // 2 + 1
    e2 = (e1 - 5) // 2 + 1
    p1 = side - 2
    p2 = (p1 - 3) // 2 + 1
    p3 = (p2 - 3) // 2 + 1
    return {
        "gen.mix": (layers * dims, 3 * BASE_SIDE * BASE_SIDE),
        "gen.bias": (3 * BASE_SIDE * BASE_SIDE,),
        "emb.conv1": (8, 3, 5, 5),
        "emb.bias1": (8,),
        "emb.conv2": (16, 8, 5, 5),
        "emb.bias2": (16,),
        "emb.head": (16 * e2 * e2, embed_dim),
        "emb.head_bias": (embed_dim,),
        "per.conv1": (4, 3, 3, 3),
        "per.bias1": (4,),
        "per.conv2": (8, 4, 3, 3),
        "per.bias2": (8,),
        "per.conv3": (8, 8, 3, 3),
        "per.bias3": (8,),
    }


def make_toy_models(
    seed: int,
    image_side: int = 64,
    latent: tuple[int, int] = (18, 512),
    embed_dim: int = 64,
) -> ModelBundle:
    """Deterministic fixed-seed bundle; same seed gives bit-identical weights."""
    if image_side < 32:
        raise ValueError(f"image_side must be >= 32, got {image_side}")
    if embed_dim < 8:
        raise ValueError(f"embed_dim must be >= 8, got {embed_dim}")
    layers, dims = latent
    if layers < 1 or dims < 1:
        raise ValueError(f"latent shape must be positive, got {latent}")

    rng = np.random.default_rng(seed)
    shapes = _toy_weight_shapes(image_side, latent, embed_dim)
    weights: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name == "gen.mix":
            scale = 2.0 / np.sqrt(layers * dims)
        elif name == "gen.bias":
            scale = 0.5
        elif name == "emb.head":
            scale = 1.0 / np.sqrt(shape[0])
        elif "bias" in name:
            scale = 0.05
        else:  # conv banks: unit-ish gain through tanh
            scale = 1.5 / np.sqrt(int(np.prod(shape[1:])))
        weights[name] = rng.normal(0.0, scale, shape)

    meta = {
        "kind": "toy",
        "seed": int(seed),
        "image_side": int(image_side),
        "latent_layers": int(layers),
        "latent_dims": int(dims),
        "embed_dim": int(embed_dim),
    }
    return _bundle_from_weights(weights, meta)


def _bundle_from_weights(weights: dict[str, np.ndarray], meta: dict) -> ModelBundle:
    side = int(meta["image_side"])
    latent = (int(meta["latent_layers"]), int(meta["latent_dims"]))
    embed_dim = int(meta["embed_dim"])
    expected = _toy_weight_shapes(side, latent, embed_dim)
    for name, shape in expected.items():
        if name not in weights:
            raise ShapeManifestError(f"weight {name!r} missing from container")
        if tuple(weights[name].shape) != shape:
            raise ShapeManifestError(
                f"weight {name!r} has shape {tuple(weights[name].shape)}, "
                f"manifest metadata implies {shape}"
            )
    extra = set(weights) - set(expected)
    if extra:
        raise ShapeManifestError(f"unexpected weights in container: {sorted(extra)}")

    layers, dims = latent
    u2 = np.kron(_upsample_matrix(side), _upsample_matrix(side))  # (side^2, BASE^2)

    w_mix = Tensor(weights["gen.mix"])
    b_mix = Tensor(weights["gen.bias"].reshape(1, -1))
    up_t = Tensor(u2.T)

    def generator(latent_code: Tensor) -> Tensor:
        if latent_code.shape != (layers, dims):
            raise ValueError(f"latent shape {latent_code.shape} != expected {(layers, dims)}")
        flat = reshape(latent_code, (1, layers * dims))
        base = matmul(flat, w_mix) + b_mix
        base = reshape(base, (3, BASE_SIDE * BASE_SIDE))
        img = reshape(matmul(base, up_t), (3, side, side))
        return _sigmoid(img)

    def _conv_block(x: Tensor, kernel: np.ndarray, bias: np.ndarray, stride: int) -> Tensor:
        out = conv_bank(x, Tensor(kernel), stride)
        full_bias = np.broadcast_to(bias[:, None, None], out.shape).copy()
        return (out + Tensor(full_bias)).tanh()

    def embedder(image: Tensor) -> Tensor:
        # center the [0,1] image so embeddings are not dominated by the
        # shared mean-level response (keeps impostor cosines moderate)
        h = _conv_block(image - 0.5, weights["emb.conv1"], weights["emb.bias1"], 2)
        h = _conv_block(h, weights["emb.conv2"], weights["emb.bias2"], 2)
        flat = reshape(h, (1, h.size))
        out = matmul(flat, Tensor(weights["emb.head"])) + Tensor(weights["emb.head_bias"].reshape(1, -1))
        return reshape(out, (embed_dim,))

    def perceptual(image: Tensor) -> FeatureStack:
        t1 = _conv_block(image - 0.5, weights["per.conv1"], weights["per.bias1"], 1)
        t2 = _conv_block(t1, weights["per.conv2"], weights["per.bias2"], 2)
        t3 = _conv_block(t2, weights["per.conv3"], weights["per.bias3"], 2)
        return FeatureStack.from_tensors([(1, t1), (2, t2), (3, t3)])

    # lazy pseudo-inverses for the latent predictor
    inv_cache: dict[str, np.ndarray] = {}

    def predictor(image: np.ndarray) -> np.ndarray:
        if "u2_pinv" not in inv_cache:
            inv_cache["u2_pinv"] = np.linalg.pinv(u2)
            inv_cache["mix_pinv_t"] = np.linalg.pinv(weights["gen.mix"]).T
        p = np.clip(image, 1e-6, 1.0 - 1e-6)
        logits = np.log(p / (1.0 - p)).reshape(3, -1)
        base = (inv_cache["u2_pinv"] @ logits.T).T.reshape(-1)
        target = base - weights["gen.bias"]
        return (inv_cache["mix_pinv_t"] @ target).reshape(layers, dims)

    return ModelBundle(
        generator=generator,
        embedder=embedder,
        perceptual=perceptual,
        latent_shape=latent,
        image_shape=(3, side, side),
        embed_dim=embed_dim,
        weights=weights,
        meta=dict(meta),
        _predictor=predictor,
    )


# ---------------------------------------------------------------------------
# container i/o


def save_model_weights(bundle: ModelBundle, path: Union[str, Path]) -> None:
    manifest = {
        "version": CONTAINER_VERSION,
        "meta": bundle.meta,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in bundle.weights.items()],
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for arr in bundle.weights.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model_weights(path: Union[str, Path]) -> ModelBundle:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:len(MAGIC)]!r}, expected {MAGIC!r}")
    rest = blob[len(MAGIC) :]
    newline = rest.find(b"\n")
    if newline < 0:
        raise TruncatedPayloadError(f"{path}: missing manifest terminator")
    try:
        manifest = json.loads(rest[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unparsable manifest: {exc}") from exc
    version = manifest.get("version")
    if version != CONTAINER_VERSION:
        raise VersionError(f"{path}: unknown container version {version!r}")
    tensors = manifest.get("tensors")
    meta = manifest.get("meta")
    if not isinstance(tensors, list) or not isinstance(meta, dict):
        raise ContainerError(f"{path}: manifest lacks tensors/meta")

    payload = rest[newline + 1 :]
    expected_bytes = sum(int(np.prod(t["shape"])) * 8 for t in tensors)
    if len(payload) < expected_bytes:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(payload)} bytes, manifest requires {expected_bytes}"
        )
    if len(payload) > expected_bytes:
        raise ContainerError(f"{path}: {len(payload) - expected_bytes} trailing bytes after payload")

    weights: dict[str, np.ndarray] = {}
    offset = 0
    for entry in tensors:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape))
        chunk = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        weights[entry["name"]] = chunk.reshape(shape).astype(np.float64)
        offset += count * 8
    return _bundle_from_weights(weights, meta)
