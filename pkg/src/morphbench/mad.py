"""Morph-detection evaluation: APCER, BPCER, D-EER and the grid report.

Detector scores are attack-oriented (higher = more attack-like) and the
classification rule is ``score > theta -> attack``; ties fall to bona
fide. APCER is the fraction of attack scores classified bona fide
(score <= theta), BPCER the fraction of bona fide scores classified
attack (score > theta).

The equal-error rate sweeps thresholds over the merged score values and
linearly interpolates between the two adjacent operating points where
apcer - bpcer changes sign; an exact plateau crossing reports the
midpoint of the plateau interval.

MAD score CSV: ``class,score,generation_method,medium,split`` with
class in {attack, bonafide}. Metrics are computed on split == test
rows; the training method of the detector that produced a file is
inferred from the generation methods of its split == train attack rows.

A deliberately trivial baseline detector (mean absolute residual after
3x3 median filtering) is included so the full pipeline can run on toy
images end to end.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class MadError(ValueError):
    """Malformed or degenerate detector-score data."""


@dataclass
class MadScoreSet:
    """Attack and bona fide detector scores with descriptive tags."""

    attack: np.ndarray
    bonafide: np.ndarray
    tags: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.attack = np.asarray(self.attack, dtype=np.float64)
        self.bonafide = np.asarray(self.bonafide, dtype=np.float64)
        if self.attack.size == 0 or self.bonafide.size == 0:
            raise MadError("both score classes must be non-empty")
        if not (np.all(np.isfinite(self.attack)) and np.all(np.isfinite(self.bonafide))):
            raise MadError("scores must be finite")


def apcer_bpcer_at(scores: MadScoreSet, theta: float) -> tuple[float, float]:
    """Error rates at a fixed threshold under the score > theta rule."""
    apcer = float(np.mean(scores.attack <= theta))
    bpcer = float(np.mean(scores.bonafide > theta))
    return apcer, bpcer


def _operating_points(scores: MadScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Candidate thresholds (a below-minimum sentinel plus every distinct
    score) with their apcer/bpcer; apcer is non-decreasing and bpcer
    non-increasing along the sweep."""
    merged = np.unique(np.concatenate([scores.attack, scores.bonafide]))
    thetas = np.concatenate([[merged[0] - 1.0], merged])
    att = np.sort(scores.attack)
    bon = np.sort(scores.bonafide)
    apcer = np.searchsorted(att, thetas, side="right") / att.size
    bpcer = (bon.size - np.searchsorted(bon, thetas, side="right")) / bon.size
    return thetas, apcer, bpcer


def d_eer(scores: MadScoreSet) -> tuple[float, float]:
    """Detection equal-error rate and its threshold."""
    thetas, apcer, bpcer = _operating_points(scores)
    diff = apcer - bpcer
    # diff is non-decreasing: starts at -1 (nothing classified bona fide,
    # everything flagged) and ends at +1
    idx = int(np.searchsorted(diff > 0, True))  # first strictly positive
    zero_mask = diff == 0.0
    if np.any(zero_mask):
        lo = int(np.argmax(zero_mask))
        hi = int(len(diff) - 1 - np.argmax(zero_mask[::-1]))
        eer = float(apcer[lo])
        return eer, float((thetas[lo] + thetas[hi]) / 2.0)
    if idx == 0:  # positive from the start: degenerate, no crossing to the left
        return float(apcer[0]), float(thetas[0])
    a0, a1 = apcer[idx - 1], apcer[idx]
    b0, b1 = bpcer[idx - 1], bpcer[idx]
    t = (b0 - a0) / ((a1 - a0) - (b1 - b0))
    eer = float(a0 + t * (a1 - a0))
    theta = float(thetas[idx - 1] + t * (thetas[idx] - thetas[idx - 1]))
    return eer, theta


def bpcer_at_apcer(scores: MadScoreSet, target: float) -> float:
    """Smallest BPCER subject to APCER <= target, scanning the empirical
    operating points."""
    if not (0.0 < target < 1.0):
        raise ValueError(f"target must lie in (0, 1), got {target}")
    thetas, apcer, bpcer = _operating_points(scores)
    feasible = apcer <= target
    if not np.any(feasible):  # unreachable: apcer at the sentinel is 0
        raise MadError(f"no threshold achieves apcer <= {target}")
    return float(bpcer[feasible].min())


# ---------------------------------------------------------------------------
# grid report


@dataclass
class MadCell:
    train_method: str
    test_method: str
    medium: str
    d_eer: float
    eer_threshold: float
    bpcer_at_apcer5: float
    bpcer_at_apcer10: float


@dataclass
class MadReport:
    cells: list[MadCell]
    absent: list[dict]
    policy: dict

    def to_csv_text(self) -> str:
        lines = ["train_method,test_method,medium,d_eer,bpcer_at_apcer5,bpcer_at_apcer10"]
        for c in self.cells:
            lines.append(
                f"{c.train_method},{c.test_method},{c.medium},"
                f"{c.d_eer!r},{c.bpcer_at_apcer5!r},{c.bpcer_at_apcer10!r}"
            )
        return "\n".join(lines) + "\n"

    def to_json_text(self) -> str:
        payload = {
            "cells": [vars(c) for c in self.cells],
            "absent": self.absent,
            "policy": self.policy,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def mad_grid_report(cells: Sequence[MadScoreSet]) -> MadReport:
    """Evaluate every labeled cell; cells that raise (e.g. an empty
    class) would have failed construction already, so absence is simply
    a missing entry in the input."""
    rows: list[MadCell] = []
    for cell in cells:
        eer, theta = d_eer(cell)
        rows.append(
            MadCell(
                train_method=cell.tags.get("train_method", "unspecified"),
                test_method=cell.tags.get("generation_method", "unspecified"),
                medium=cell.tags.get("medium", "unspecified"),
                d_eer=eer,
                eer_threshold=theta,
                bpcer_at_apcer5=bpcer_at_apcer(cell, 0.05),
                bpcer_at_apcer10=bpcer_at_apcer(cell, 0.10),
            )
        )
    rows.sort(key=lambda c: (c.train_method, c.test_method, c.medium))
    return MadReport(
        cells=rows,
        absent=[],
        policy={
            "decision_rule": "attack iff score > theta; ties fall to bona fide",
            "eer": "linear interpolation between adjacent operating points; plateau reports its midpoint",
        },
    )


# ---------------------------------------------------------------------------
# CSV i/o

MAD_CSV_HEADER = ["class", "score", "generation_method", "medium", "split"]


def load_mad_csv(path: Union[str, Path]) -> list[MadScoreSet]:
    """Group test-split rows into (generation_method, medium) cells; the
    detector's training method is inferred from train-split attack rows."""
    train_methods: set[str] = set()
    buckets: dict[tuple[str, str], dict[str, list[float]]] = {}

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MAD_CSV_HEADER:
            raise MadError(f"bad header {header}, expected {MAD_CSV_HEADER}")
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(MAD_CSV_HEADER):
                raise MadError(f"line {line_no}: expected {len(MAD_CSV_HEADER)} fields, got {len(row)}")
            cls, score_text, method, medium, split = (f.strip() for f in row)
            if cls not in ("attack", "bonafide"):
                raise MadError(f"line {line_no}: unknown class {cls!r}")
            if split not in ("train", "test"):
                raise MadError(f"line {line_no}: unknown split {split!r}")
            try:
                score = float(score_text)
            except ValueError as exc:
                raise MadError(f"line {line_no}: bad score {score_text!r}") from exc
            if not math.isfinite(score):
                raise MadError(f"line {line_no}: non-finite score")
            if split == "train":
                if cls == "attack":
                    train_methods.add(method)
                continue
            bucket = buckets.setdefault((method, medium), {"attack": [], "bonafide": []})
            bucket[cls].append(score)

    train_label = "+".join(sorted(train_methods)) if train_methods else "unspecified"
    cells = []
    for (method, medium), pools in sorted(buckets.items()):
        if not pools["attack"] or not pools["bonafide"]:
            raise MadError(f"cell ({method}, {medium}) lacks one score class")
        cells.append(
            MadScoreSet(
                attack=np.array(pools["attack"]),
                bonafide=np.array(pools["bonafide"]),
                tags={"train_method": train_label, "generation_method": method, "medium": medium},
            )
        )
    if not cells:
        raise MadError("no test-split rows found")
    return cells


# ---------------------------------------------------------------------------
# baseline detector


def median3x3(image: np.ndarray) -> np.ndarray:
    """3x3 median filter with reflect padding (size preserving)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        padded = np.pad(image, 1, mode="reflect")
        return np.median(sliding_window_view(padded, (3, 3)), axis=(2, 3))
    if image.ndim == 3:
        return np.stack([median3x3(ch) for ch in image])
    raise ValueError(f"expected (h,w) or (c,h,w) image, got shape {image.shape}")


def baseline_detector_score(image: np.ndarray) -> float:
    """Mean absolute residual after 3x3 median filtering: a crude
    high-frequency-noise score, higher = more attack-like."""
    image = np.asarray(image, dtype=np.float64)
    return float(np.mean(np.abs(image - median3x3(image))))
