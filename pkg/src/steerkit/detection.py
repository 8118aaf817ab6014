"""Concept-detection scoring: token scores, pooling, normalisation, AUROC, F1."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import ActivationDataset
from .errors import DimensionMismatch, EmptySequence, MissingClass
from .learners import ConceptSubspace

POOLING = ("max", "mean")


def token_detection_scores(sub: ConceptSubspace, ds: ActivationDataset) -> np.ndarray:
    """One score per row of `ds` under the subspace's declared activation."""
    if ds.rows.shape[1] != len(sub.w):
        raise DimensionMismatch(f"rows have dim {ds.rows.shape[1]}, direction has {len(sub.w)}")
    return sub.scores(ds.rows)


def pool_sequence_score(token_scores, mode: str = "max") -> float:
    s = np.asarray(token_scores, dtype=np.float64)
    if s.size == 0:
        raise EmptySequence("cannot pool an empty sequence")
    if mode == "max":
        return float(s.max())
    if mode == "mean":
        return float(s.mean())
    raise ValueError(f"pooling must be one of {POOLING}")


def pooled_scores(token_scores: np.ndarray, ds: ActivationDataset, mode: str = "max") -> np.ndarray:
    return np.array(
        [pool_sequence_score(token_scores[o : o + c], mode) for o, c in zip(ds.offsets, ds.counts)]
    )


def minmax_normalize(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


def _split(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not (y == 1).any() or not (y == 0).any():
        raise MissingClass("need at least one positive and one negative")
    return s, y


def auroc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted 1/2.

    Computed from midranks: AUC = (R+ - P(P+1)/2) / (P N).
    """
    s, y = _split(scores, labels)
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s))
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    P = int((y == 1).sum())
    N = len(y) - P
    # every term is a multiple of 1/2, so the numerator is exact
    return float((ranks[y == 1].sum() - P * (P + 1) / 2.0) / (P * N))


def auroc_bruteforce(scores, labels) -> float:
    s, y = _split(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (len(pos) * len(neg)))


@dataclass
class F1Result:
    threshold: float
    f1: float
    precision: float
    recall: float


def f1_sweep(
    scores,
    labels,
    extra_negatives: int = 0,
    negative_pool: Sequence[float] | None = None,
    seed: int = 0,
) -> F1Result:
    """Best-F1 threshold (predict positive iff score > threshold).

    Candidates are midpoints between adjacent distinct scores plus -inf/+inf.
    In imbalanced mode, `extra_negatives` scores are drawn from
    `negative_pool` (without replacement when the pool is large enough).
    """
    s, y = _split(scores, labels)
    if extra_negatives:
        if negative_pool is None or len(negative_pool) == 0:
            raise ValueError("imbalanced mode needs a negative pool")
        pool = np.asarray(negative_pool, dtype=np.float64)
        rng = np.random.default_rng(seed)
        extra = rng.choice(pool, size=extra_negatives, replace=extra_negatives > len(pool))
        s = np.concatenate([s, extra])
        y = np.concatenate([y, np.zeros(extra_negatives, dtype=int)])
    uniq = np.unique(s)
    cands = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2.0, [np.inf]])
    P = int(y.sum())
    best = None
    for t in cands:
        pred = s > t
        tp = int((pred & (y == 1)).sum())
        fp = int((pred & (y == 0)).sum())
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / P
        f1 = 2 * tp / (2 * tp + fp + (P - tp)) if tp else 0.0
        # strict improvement keeps the lowest threshold on ties
        if best is None or f1 > best.f1:
            best = F1Result(float(t), f1, prec, rec)
    return best


@dataclass
class DetectionReport:
    concept_id: str
    method: str
    pooling: str
    raw_scores: list[float]
    normalized_scores: list[float]
    labels: list[int]
    sequence_labels: list[str]
    auroc: float
    f1_balanced: F1Result
    f1_imbalanced: F1Result | None = None
    max_activation: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "concept_id": self.concept_id,
            "method": self.method,
            "pooling": self.pooling,
            "raw_scores": self.raw_scores,
            "normalized_scores": self.normalized_scores,
            "labels": self.labels,
            "sequence_labels": self.sequence_labels,
            "auroc": self.auroc,
            "f1_balanced": vars(self.f1_balanced),
            "f1_imbalanced": vars(self.f1_imbalanced) if self.f1_imbalanced else None,
            "max_activation": self.max_activation,
        }


def evaluate_detection(
    token_scores: np.ndarray,
    ds: ActivationDataset,
    method: str,
    pooling: str = "max",
    negative_pool_scores: np.ndarray | None = None,
    extra_negatives: int = 0,
) -> DetectionReport:
    """Pool, normalise and score one concept's eval set.

    `max_activation` is the raw token-level maximum over the eval set (the
    magnitude reference for steering). Pool scores for imbalanced F1 are
    normalised with the eval set's min and max so both share one scale.
    """
    raw = pooled_scores(token_scores, ds, pooling)
    norm = minmax_normalize(raw)
    y = ds.y
    imb = None
    if extra_negatives and negative_pool_scores is not None and len(negative_pool_scores):
        lo, hi = raw.min(), raw.max()
        pool = (np.asarray(negative_pool_scores) - lo) / (hi - lo) if hi > lo else np.zeros(len(negative_pool_scores))
        imb = f1_sweep(norm, y, extra_negatives, pool)
    return DetectionReport(
        concept_id=ds.concept_id,
        method=method,
        pooling=pooling,
        raw_scores=raw.tolist(),
        normalized_scores=norm.tolist(),
        labels=y.tolist(),
        sequence_labels=list(ds.labels),
        auroc=auroc(norm, y),
        f1_balanced=f1_sweep(norm, y),
        f1_imbalanced=imb,
        max_activation=float(np.max(token_scores)) if len(token_scores) else 0.0,
    )


def write_reports(reports: Sequence[DetectionReport], jsonl_path: str | Path, csv_path: str | Path) -> None:
    """JSONL (one record per concept) + CSV summary with a fixed column order."""
    reports = sorted(reports, key=lambda r: (r.method, r.concept_id))
    with open(jsonl_path, "w") as f:
        for r in reports:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["concept_id", "method", "auroc", "f1_balanced", "f1_imbalanced"])
        for r in reports:
            imb = r.f1_imbalanced.f1 if r.f1_imbalanced else ""
            w.writerow([r.concept_id, r.method, repr(r.auroc), repr(r.f1_balanced.f1), repr(imb) if imb != "" else ""])
