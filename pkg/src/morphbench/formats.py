"""File formats shared by the CLI: 8-bit PNG images and pair lists.

Images travel as float64 channel-first arrays in [0, 1]; PNGs are
quantized to 8 bits on save and rescaled by 1/255 on load.
Pair list CSV: ``morph_id,subject1_image,subject2_image``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

PAIRS_HEADER = ["morph_id", "subject1_image", "subject2_image"]


class PairListError(ValueError):
    pass


@dataclass(frozen=True)
class MorphPair:
    morph_id: str
    subject1_image: Path
    subject2_image: Path


def load_image(path: Union[str, Path]) -> np.ndarray:
    """PNG -> (c, h, w) float64 in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB") if img.mode not in ("L", "RGB") else img)
    arr = arr.astype(np.float64) / 255.0
    if arr.ndim == 2:
        return arr[None, :, :]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path: Union[str, Path], image: np.ndarray) -> None:
    """(c, h, w) or (h, w) float array in [0, 1] -> 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    quantized = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if quantized.ndim == 3:
        if quantized.shape[0] == 1:
            pil = Image.fromarray(quantized[0], mode="L")
        elif quantized.shape[0] == 3:
            pil = Image.fromarray(quantized.transpose(1, 2, 0), mode="RGB")
        else:
            raise ValueError(f"cannot save image with {quantized.shape[0]} channels")
    elif quantized.ndim == 2:
        pil = Image.fromarray(quantized, mode="L")
    else:
        raise ValueError(f"expected (c,h,w) or (h,w), got shape {arr.shape}")
    pil.save(path, format="PNG")


def load_pairs_csv(path: Union[str, Path]) -> list[MorphPair]:
    base = Path(path).parent
    pairs: list[MorphPair] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != PAIRS_HEADER:
            raise PairListError(f"bad header {header}, expected {PAIRS_HEADER}")
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise PairListError(f"line {line_no}: expected 3 fields, got {len(row)}")
            morph_id, p1, p2 = (f.strip() for f in row)
            if not morph_id:
                raise PairListError(f"line {line_no}: empty morph_id")
            pairs.append(
                MorphPair(
                    morph_id=morph_id,
                    subject1_image=(base / p1) if not Path(p1).is_absolute() else Path(p1),
                    subject2_image=(base / p2) if not Path(p2).is_absolute() else Path(p2),
                )
            )
    seen: set[str] = set()
    for pair in pairs:
        if pair.morph_id in seen:
            raise PairListError(f"duplicate morph_id {pair.morph_id!r}")
        seen.add(pair.morph_id)
    return pairs
