"""Verification-system vulnerability metrics over morph comparison scores.

Scores are similarity-oriented (higher = stronger match) and the match
decision is strictly ``score > tau`` everywhere. The operating
threshold comes from the empirical impostor quantile at a target false
match rate; a fixed vendor threshold can be passed instead.

Per-morph rates:

* ``mmpmr``  -- a morph counts when, for every contributing subject, its
  best attempt clears the threshold (min over subjects of max over
  attempts).
* ``fmmpmr`` -- stricter, attempt-paired: a (morph, attempt) pair counts
  only when every subject clears the threshold within that same
  attempt; normalized by the total number of (morph, attempt) pairs.
* ``rmmr``   -- 1 + rate - (1 - FNMR), which collapses to the rate when
  FNMR is 0.

Score CSV format (header row required)::

    kind,morph_id,subject_index,attempt_index,score,group_gender,group_medium

with ``kind`` one of mated_morph/genuine/impostor; subject and attempt
indices are blank for non-mated rows. An optional leading comment
``# polarity: similarity|distance`` declares the score orientation;
distance scores are negated on load.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

GROUP_KEYS = ("gender", "medium")
COMBINED_LABEL = "combined"

CSV_HEADER = [
    "kind",
    "morph_id",
    "subject_index",
    "attempt_index",
    "score",
    "group_gender",
    "group_medium",
]


class ScoreSetError(ValueError):
    """Malformed or inconsistent score data."""


@dataclass
class ScoreSet:
    """Mated-morph scores indexed by morph -> subject -> attempt, plus
    genuine and impostor pools and per-morph group tags."""

    mated: dict[str, dict[int, dict[int, float]]]
    genuine: np.ndarray
    impostor: np.ndarray
    tags: dict[str, dict[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64)
        self.impostor = np.asarray(self.impostor, dtype=np.float64)
        for pool_name, pool in (("genuine", self.genuine), ("impostor", self.impostor)):
            if pool.size and not np.all(np.isfinite(pool)):
                raise ScoreSetError(f"{pool_name} pool contains non-finite scores")
        for morph_id, subjects in self.mated.items():
            if len(subjects) < 2:
                raise ScoreSetError(f"morph {morph_id!r} has {len(subjects)} subject(s), needs >= 2")
            for k, attempts in subjects.items():
                if not attempts:
                    raise ScoreSetError(f"morph {morph_id!r} subject {k} has no attempts")
                if not all(math.isfinite(s) for s in attempts.values()):
                    raise ScoreSetError(f"morph {morph_id!r} subject {k} has non-finite scores")

    @property
    def morph_ids(self) -> list[str]:
        return sorted(self.mated)

    def subset(self, morph_ids: Sequence[str]) -> "ScoreSet":
        wanted = set(morph_ids)
        return ScoreSet(
            mated={m: s for m, s in self.mated.items() if m in wanted},
            genuine=self.genuine,
            impostor=self.impostor,
            tags={m: t for m, t in self.tags.items() if m in wanted},
        )


def threshold_at_fmr(impostor: Sequence[float], fmr: float) -> float:
    """Smallest observed impostor score tau such that the fraction of
    impostor scores strictly above tau is <= fmr."""
    scores = np.asarray(impostor, dtype=np.float64)
    if scores.size == 0:
        raise ScoreSetError("empty impostor pool")
    if not (0.0 < fmr < 1.0):
        raise ValueError(f"fmr must lie in (0, 1), got {fmr}")
    ordered = np.sort(scores)
    n = ordered.size
    candidates = np.unique(ordered)
    above = n - np.searchsorted(ordered, candidates, side="right")
    feasible = candidates[above / n <= fmr]
    # the maximum score is always feasible (nothing is strictly above it)
    return float(feasible[0])


def empirical_fmr(impostor: Sequence[float], tau: float) -> float:
    scores = np.asarray(impostor, dtype=np.float64)
    if scores.size == 0:
        raise ScoreSetError("empty impostor pool")
    return float(np.mean(scores > tau))


def fnmr_at(genuine: Sequence[float], tau: float) -> float:
    """Fraction of genuine scores at or below the threshold."""
    scores = np.asarray(genuine, dtype=np.float64)
    if scores.size == 0:
        raise ScoreSetError("empty genuine pool")
    return float(np.mean(scores <= tau))


def _paired_attempts(subjects: dict[int, dict[int, float]], morph_id: str):
    """Attempt indices shared by all subjects of one morph; warns via the
    returned flag when subjects had unequal attempt sets."""
    attempt_sets = [set(attempts) for attempts in subjects.values()]
    common = sorted(set.intersection(*attempt_sets))
    truncated = any(len(s) != len(common) for s in attempt_sets)
    if not common:
        raise ScoreSetError(f"morph {morph_id!r}: no attempt index shared by all subjects")
    return common, truncated


def fmmpmr(scores: ScoreSet, tau: float) -> float:
    rate, _ = fmmpmr_with_warnings(scores, tau)
    return rate


def fmmpmr_with_warnings(scores: ScoreSet, tau: float) -> tuple[float, list[str]]:
    """Attempt-paired rate: count (morph, attempt) pairs where every
    subject's score clears tau, over all (morph, attempt) pairs."""
    if not scores.mated:
        raise ScoreSetError("no mated-morph scores")
    hits = 0
    pairs = 0
    warnings: list[str] = []
    for morph_id in scores.morph_ids:
        subjects = scores.mated[morph_id]
        common, truncated = _paired_attempts(subjects, morph_id)
        if truncated:
            warnings.append(
                f"morph {morph_id}: unequal attempt sets, truncated to {len(common)} paired attempt(s)"
            )
        for attempt in common:
            pairs += 1
            if all(subjects[k][attempt] > tau for k in subjects):
                hits += 1
    return hits / pairs, warnings


def mmpmr(scores: ScoreSet, tau: float) -> float:
    """Fraction of morphs whose weakest subject still matches on its best
    attempt: min over subjects of (max over attempts) > tau."""
    if not scores.mated:
        raise ScoreSetError("no mated-morph scores")
    hits = 0
    for morph_id in scores.morph_ids:
        subjects = scores.mated[morph_id]
        if min(max(attempts.values()) for attempts in subjects.values()) > tau:
            hits += 1
    return hits / len(scores.mated)


def rmmr(rate: float, fnmr: float) -> float:
    """1 + rate - (1 - fnmr), evaluated in its reduced form rate + fnmr
    (the literal form drops the last bit in floating point and would
    break the exact rmmr(rate, 0) == rate identity)."""
    for name, v in (("rate", rate), ("fnmr", fnmr)):
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    return rate + fnmr


# ---------------------------------------------------------------------------
# grouped reporting


@dataclass
class GroupRates:
    group: str
    n_morphs: int
    mmpmr: float
    fmmpmr: float
    rmmr_mmpmr: float
    rmmr_fmmpmr: float


@dataclass
class VulnReport:
    tau: float
    fmr_target: float
    empirical_fmr: float
    fnmr: float
    groups: list[GroupRates]
    warnings: list[str]
    policy: dict

    def to_csv_text(self) -> str:
        lines = ["group,n_morphs,mmpmr,fmmpmr,rmmr_mmpmr,rmmr_fmmpmr"]
        for g in self.groups:
            lines.append(
                f"{g.group},{g.n_morphs},{g.mmpmr!r},{g.fmmpmr!r},{g.rmmr_mmpmr!r},{g.rmmr_fmmpmr!r}"
            )
        return "\n".join(lines) + "\n"

    def to_json_text(self) -> str:
        payload = {
            "tau": self.tau,
            "fmr_target": self.fmr_target,
            "empirical_fmr": self.empirical_fmr,
            "fnmr": self.fnmr,
            "groups": [vars(g) for g in self.groups],
            "warnings": self.warnings,
            "policy": self.policy,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _group_label(tags: dict[str, str], keys: Sequence[str]) -> str:
    return "/".join(tags.get(k, "?") for k in keys)


def vulnerability_report(
    scores: ScoreSet,
    fmr_target: float = 0.001,
    group_by: Sequence[str] = GROUP_KEYS,
    tau: Optional[float] = None,
) -> VulnReport:
    """Threshold once on the full impostor pool, then rate every tag
    group and the combined set. Groups with no usable morphs are omitted
    with a warning entry."""
    threshold_policy = "empirical impostor quantile" if tau is None else "supplied fixed tau"
    if tau is None:
        tau = threshold_at_fmr(scores.impostor, fmr_target)
    fnmr = fnmr_at(scores.genuine, tau)
    warnings: list[str] = []

    by_group: dict[str, list[str]] = {}
    for morph_id in scores.morph_ids:
        label = _group_label(scores.tags.get(morph_id, {}), group_by)
        by_group.setdefault(label, []).append(morph_id)

    groups: list[GroupRates] = []
    for label in [COMBINED_LABEL] + sorted(by_group):
        ids = scores.morph_ids if label == COMBINED_LABEL else by_group[label]
        if not ids:
            warnings.append(f"group {label}: no morphs, omitted")
            continue
        sub = scores.subset(ids)
        m = mmpmr(sub, tau)
        f, truncation_warnings = fmmpmr_with_warnings(sub, tau)
        if label == COMBINED_LABEL:
            warnings.extend(truncation_warnings)
        groups.append(
            GroupRates(
                group=label,
                n_morphs=len(ids),
                mmpmr=m,
                fmmpmr=f,
                rmmr_mmpmr=rmmr(m, fnmr),
                rmmr_fmmpmr=rmmr(f, fnmr),
            )
        )

    return VulnReport(
        tau=tau,
        fmr_target=fmr_target,
        empirical_fmr=empirical_fmr(scores.impostor, tau),
        fnmr=fnmr,
        groups=groups,
        warnings=warnings,
        policy={
            "decision_rule": "match iff score > tau",
            "mmpmr": "min over subjects of max over attempts",
            "fmmpmr": "attempt-paired conjunction over subjects, truncated to shared attempt indices",
            "threshold": threshold_policy,
            "group_by": list(group_by),
        },
    )


# ---------------------------------------------------------------------------
# CSV i/o


def load_score_csv(path: Union[str, Path]) -> ScoreSet:
    """Parse the score CSV; see the module docstring for the format."""
    polarity = "similarity"
    mated: dict[str, dict[int, dict[int, float]]] = {}
    genuine: list[float] = []
    impostor: list[float] = []
    tags: dict[str, dict[str, str]] = {}

    with open(path, newline="") as fh:
        first = fh.readline()
        if first.startswith("#"):
            stripped = first.lstrip("#").strip()
            if stripped.startswith("polarity"):
                polarity = stripped.split(":", 1)[1].strip()
                if polarity not in ("similarity", "distance"):
                    raise ScoreSetError(f"unknown polarity {polarity!r}")
            header_line = fh.readline()
        else:
            header_line = first
        header = [h.strip() for h in header_line.strip().split(",")]
        if header != CSV_HEADER:
            raise ScoreSetError(f"bad header {header}, expected {CSV_HEADER}")
        reader = csv.reader(fh)
        sign = -1.0 if polarity == "distance" else 1.0
        for line_no, row in enumerate(reader, start=3 if first.startswith("#") else 2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(CSV_HEADER):
                raise ScoreSetError(f"line {line_no}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            kind, morph_id, subject_idx, attempt_idx, score_text, gender, medium = (
                f.strip() for f in row
            )
            try:
                score = sign * float(score_text)
            except ValueError as exc:
                raise ScoreSetError(f"line {line_no}: bad score {score_text!r}") from exc
            if not math.isfinite(score):
                raise ScoreSetError(f"line {line_no}: non-finite score")
            if kind == "genuine":
                genuine.append(score)
            elif kind == "impostor":
                impostor.append(score)
            elif kind == "mated_morph":
                try:
                    k = int(subject_idx)
                    p = int(attempt_idx)
                except ValueError as exc:
                    raise ScoreSetError(f"line {line_no}: mated row needs integer indices") from exc
                attempts = mated.setdefault(morph_id, {}).setdefault(k, {})
                if p in attempts:
                    raise ScoreSetError(f"line {line_no}: duplicate attempt {p} for morph {morph_id!r} subject {k}")
                attempts[p] = score
                tags.setdefault(morph_id, {})
                if gender:
                    tags[morph_id]["gender"] = gender
                if medium:
                    tags[morph_id]["medium"] = medium
            else:
                raise ScoreSetError(f"line {line_no}: unknown kind {kind!r}")

    return ScoreSet(mated=mated, genuine=np.array(genuine), impostor=np.array(impostor), tags=tags)
