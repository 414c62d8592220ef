"""Association metrics: AP, FPR-95, precision / recall / accuracy and IPAA-X.

Ground truth comes from detection identities.  For every evaluated frame and
view pair ``(i, j)`` with ``i < j`` a *decision* is made per person appearing
in either view: a person seen in both views is correct when their two boxes
are matched to each other, a person seen in only one view is correct when
their box is left unmatched.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .association import confidence_scores, fuse, pairwise_distances

PairKey = tuple[int, int, int]  # (frame, camera_i, camera_j)


@dataclass(frozen=True)
class PairLabel:
    frame: int
    camera_i: int
    camera_j: int
    index_i: int
    index_j: int
    score: float
    positive: bool


def score_pairs(dataset, features: Mapping[tuple[int, int], Sequence], alpha: float = 0.1) -> list[PairLabel]:
    """Confidence score for every cross-view instance pair, labelled by identity.

    ``features[(frame, camera)]`` holds the instance features of that image in
    detection order.
    """
    if not dataset.has_identities:
        raise ValueError("score_pairs needs ground-truth identities")
    labels = []
    for p in dataset.frame_ids:
        for ci, cj in combinations(range(dataset.cameras), 2):
            di, dj = dataset.view(p, ci), dataset.view(p, cj)
            if not di or not dj:
                continue
            d_a, d_g = pairwise_distances(features[(p, ci)], features[(p, cj)])
            s = confidence_scores(fuse(d_a, d_g, alpha if d_a is not None else 0.0))
            for a, da in enumerate(di):
                for b, db in enumerate(dj):
                    labels.append(PairLabel(p, ci, cj, a, b, float(s[a, b]), da.identity == db.identity))
    return labels


def _score_label(labels) -> tuple[np.ndarray, np.ndarray]:
    scores, pos = [], []
    for item in labels:
        if isinstance(item, PairLabel):
            scores.append(item.score)
            pos.append(item.positive)
        else:
            scores.append(float(item[0]))
            pos.append(bool(item[1]))
    return np.asarray(scores, dtype=np.float64), np.asarray(pos, dtype=bool)


def average_precision(labels) -> float | None:
    """Mean over positives of the precision at their rank (descending score,
    ties in input order).  ``None`` without positives."""
    scores, pos = _score_label(labels)
    if not pos.any():
        return None
    order = np.argsort(-scores, kind="stable")
    hits = pos[order]
    ranks = np.arange(1, len(hits) + 1)
    precision = np.cumsum(hits) / ranks
    return float(precision[hits].mean())


def fpr_at_95_recall(labels, recall_level: float = 0.95, min_positives: int = 20) -> float | None:
    """False-positive rate at the strictest score threshold whose recall reaches 95%.

    Pairs with ``score >= threshold`` are predicted positive.  ``None`` when
    there are fewer than ``min_positives`` positives or no negatives.
    """
    scores, pos = _score_label(labels)
    n_pos = int(pos.sum())
    n_neg = int((~pos).sum())
    if n_pos < min_positives or n_neg == 0:
        return None
    for t in np.unique(scores)[::-1]:
        admitted = scores >= t
        if (admitted & pos).sum() >= recall_level * n_pos:
            return float((admitted & ~pos).sum() / n_neg)
    return 1.0


def pr_curve(labels) -> list[tuple[float, float, float]]:
    """``(threshold, precision, recall)`` at every distinct score, descending."""
    scores, pos = _score_label(labels)
    n_pos = int(pos.sum())
    out = []
    for t in np.unique(scores)[::-1]:
        admitted = scores >= t
        tp = int((admitted & pos).sum())
        out.append((float(t), tp / int(admitted.sum()), tp / n_pos if n_pos else 0.0))
    return out


# --------------------------------------------------------------------------
# Decision-level metrics on association results
# --------------------------------------------------------------------------


def group_matches(records: Iterable) -> dict[PairKey, set[tuple[int, int]]]:
    """Report records ``(frame, ci, cj, ii, jj, conf)`` grouped per image pair."""
    out: dict[PairKey, set[tuple[int, int]]] = defaultdict(set)
    for frame, ci, cj, ii, jj, *_ in records:
        if ci > cj:
            ci, cj, ii, jj = cj, ci, jj, ii
        out[(frame, ci, cj)].add((ii, jj))
    return out


@dataclass
class PairCounts:
    predicted: int = 0
    true_positive: int = 0
    gt_matches: int = 0
    correct: int = 0
    decisions: int = 0

    @property
    def accuracy(self) -> float | None:
        return self.correct / self.decisions if self.decisions else None


def pair_counts(records, dataset) -> dict[PairKey, PairCounts]:
    """Counts per (frame, camera_i, camera_j) over every image pair of ``dataset``."""
    if not dataset.has_identities:
        raise ValueError("evaluation needs ground-truth identities")
    grouped = group_matches(records)
    out = {}
    for p in dataset.frame_ids:
        for ci, cj in combinations(range(dataset.cameras), 2):
            ids_i = [d.identity for d in dataset.view(p, ci)]
            ids_j = [d.identity for d in dataset.view(p, cj)]
            pred = grouped.get((p, ci, cj), set())
            pos_j = {ident: k for k, ident in enumerate(ids_j)}
            truth = {(a, pos_j[ident]) for a, ident in enumerate(ids_i) if ident in pos_j}
            matched_i = {a for a, _ in pred}
            matched_j = {b for _, b in pred}
            c = PairCounts(predicted=len(pred), true_positive=len(pred & truth), gt_matches=len(truth))
            c.correct = sum(1 for t in truth if t in pred)
            both_i = {a for a, _ in truth}
            both_j = {b for _, b in truth}
            c.correct += sum(1 for a in range(len(ids_i)) if a not in both_i and a not in matched_i)
            c.correct += sum(1 for b in range(len(ids_j)) if b not in both_j and b not in matched_j)
            c.decisions = len(set(ids_i) | set(ids_j))
            out[(p, ci, cj)] = c
    return out


def prf_acc(records, dataset) -> tuple[float | None, float | None, float | None]:
    """Aggregate (precision, recall, accuracy); each ``None`` when its denominator is 0."""
    counts = pair_counts(records, dataset).values()
    pred = sum(c.predicted for c in counts)
    tp = sum(c.true_positive for c in counts)
    gt = sum(c.gt_matches for c in counts)
    correct = sum(c.correct for c in counts)
    decisions = sum(c.decisions for c in counts)
    return (
        tp / pred if pred else None,
        tp / gt if gt else None,
        correct / decisions if decisions else None,
    )


def ipaa_from_counts(counts: Iterable[PairCounts], x: float) -> float | None:
    if not 0 < x <= 100:
        raise ValueError("X must lie in (0, 100]")
    usable = [c for c in counts if c.decisions]
    if not usable:
        return None
    return sum(1 for c in usable if c.correct * 100 >= x * c.decisions) / len(usable)


def ipaa_from_accuracies(accuracies: Sequence[float], x: float) -> float:
    if not 0 < x <= 100:
        raise ValueError("X must lie in (0, 100]")
    return sum(1 for a in accuracies if a * 100 >= x) / len(accuracies)


def ipaa(records, dataset, x: float) -> float | None:
    """Fraction of image pairs whose decision accuracy is at least X%."""
    return ipaa_from_counts(pair_counts(records, dataset).values(), x)


def evaluate(records, dataset, labels: Sequence[PairLabel] | None = None) -> dict:
    """Full metric set, plus a per-view-pair accuracy breakdown."""
    counts = pair_counts(records, dataset)
    p, r, acc = prf_acc(records, dataset)
    out = {
        "precision": p,
        "recall": r,
        "acc": acc,
        "ipaa_100": ipaa_from_counts(counts.values(), 100),
        "ipaa_90": ipaa_from_counts(counts.values(), 90),
        "ipaa_80": ipaa_from_counts(counts.values(), 80),
        "ap": None,
        "fpr_95": None,
        "image_pairs": sum(1 for c in counts.values() if c.decisions),
    }
    if labels is not None:
        out["ap"] = average_precision(labels)
        out["fpr_95"] = fpr_at_95_recall(labels)
    by_view: dict[str, PairCounts] = defaultdict(PairCounts)
    for (_, ci, cj), c in counts.items():
        agg = by_view[f"{ci}-{cj}"]
        agg.predicted += c.predicted
        agg.true_positive += c.true_positive
        agg.gt_matches += c.gt_matches
        agg.correct += c.correct
        agg.decisions += c.decisions
    out["per_view_pair"] = {
        k: {
            "precision": v.true_positive / v.predicted if v.predicted else None,
            "recall": v.true_positive / v.gt_matches if v.gt_matches else None,
            "acc": v.accuracy,
        }
        for k, v in sorted(by_view.items())
    }
    return out


def write_metrics(metrics: dict, path, header: dict | None = None) -> None:
    doc = {"schema": "mvsync-metrics/1", **(header or {}), "metrics": metrics}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_pr_table(curve: Sequence[tuple[float, float, float]], path) -> None:
    lines = ["threshold,precision,recall"] + [f"{t!r},{p!r},{r!r}" for t, p, r in curve]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
