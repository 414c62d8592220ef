import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvsync.encoder import InstanceFeatures
from mvsync.metrics import (
    average_precision,
    evaluate,
    fpr_at_95_recall,
    ipaa,
    ipaa_from_accuracies,
    pair_counts,
    pr_curve,
    prf_acc,
    score_pairs,
    write_metrics,
    write_pr_table,
)
from mvsync.scene import Dataset, Detection


def make_dataset(frames):
    """``frames`` is a list of per-camera identity lists (two cameras)."""
    dets = []
    for p, views in enumerate(frames):
        for c, ids in enumerate(views):
            for k, ident in enumerate(ids):
                x = 0.05 + 0.1 * k
                dets.append(Detection(p, c, (x, 0.2, x + 0.05, 0.5), ident))
    return Dataset(2, 100, 100, len(frames), 0, dets)


def brute_fpr(scores, pos, level=0.95):
    scores, pos = np.asarray(scores), np.asarray(pos)
    best = None
    for t in sorted(set(scores.tolist())):
        adm = scores >= t
        if (adm & pos).sum() >= level * pos.sum():
            best = t
    adm = scores >= best
    return (adm & ~pos).sum() / (~pos).sum()


# ---- AP ---------------------------------------------------------------------


def test_ap_examples():
    assert average_precision([(0.9, True), (0.8, True), (0.1, False)]) == 1.0
    assert average_precision([(0.9, True), (0.8, False), (0.7, True)]) == pytest.approx((1 + 2 / 3) / 2)
    k = 5
    assert average_precision([(1.0, False)] * k + [(0.0, True)]) == pytest.approx(1 / (k + 1))
    assert average_precision([(0.5, False)]) is None


def test_ap_ties_follow_input_order():
    assert average_precision([(0.5, True), (0.5, False)]) == 1.0
    assert average_precision([(0.5, False), (0.5, True)]) == 0.5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=1, max_size=30))
def test_ap_invariant_under_increasing_transform(labels):
    if not any(p for _, p in labels):
        return
    # Integer scores keep the transform exact, so no ties are created or broken.
    warped = [(float(s**3 + 7), p) for s, p in labels]
    assert average_precision(warped) == pytest.approx(average_precision(labels), abs=1e-12)


# ---- FPR-95 ---------------------------------------------------------------------


def test_fpr_examples():
    perfect = [(0.9, True)] * 20 + [(0.1, False)] * 20
    assert fpr_at_95_recall(perfect) == 0.0
    flat = [(0.5, True)] * 20 + [(0.5, False)] * 20
    assert fpr_at_95_recall(flat) == 1.0
    assert fpr_at_95_recall([(0.9, True)] * 19 + [(0.1, False)]) is None


def test_fpr_constructed_40_pairs():
    # 19 positives at 0.95 reach 95% recall; the stray positive at 0.05 need not be admitted.
    # Negatives above 0.95: two of twenty, so FPR = 0.1.
    labels = [(0.95, True)] * 19 + [(0.05, True)] + [(0.97, False)] * 2 + [(0.5, False)] * 18
    assert fpr_at_95_recall(labels) == pytest.approx(0.1)
    scores, pos = zip(*labels)
    assert fpr_at_95_recall(labels) == pytest.approx(brute_fpr(scores, pos))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(20, 40), st.integers(1, 40))
def test_fpr_matches_threshold_scan(seed, n_pos, n_neg):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.uniform(size=n_pos + n_neg), 2)
    pos = np.array([True] * n_pos + [False] * n_neg)
    labels = list(zip(scores.tolist(), pos.tolist()))
    assert fpr_at_95_recall(labels) == pytest.approx(brute_fpr(scores, pos))


def test_pr_curve_rows(tmp_path):
    curve = pr_curve([(0.9, True), (0.8, False), (0.7, True)])
    assert curve == [(0.9, 1.0, 0.5), (0.8, 0.5, 0.5), (0.7, 2 / 3, 1.0)]
    path = tmp_path / "pr.csv"
    write_pr_table(curve, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "threshold,precision,recall" and len(lines) == 4


# ---- P / R / ACC / IPAA ----------------------------------------------------------


def test_three_person_two_view_fixture():
    # View 0 sees A(0), B(1); view 1 sees C(2), B(1).  Only B is matchable.
    ds = make_dataset([[[0, 1], [2, 1]]])
    forced = [(0, 0, 1, 0, 0, 0.3), (0, 0, 1, 1, 1, 0.9)]
    assert prf_acc(forced, ds) == (0.5, 1.0, pytest.approx(1 / 3))
    assert ipaa(forced, ds, 30) == 1.0 and ipaa(forced, ds, 40) == 0.0
    filtered = [(0, 0, 1, 1, 1, 0.9)]
    assert prf_acc(filtered, ds) == (1.0, 1.0, 1.0)
    assert ipaa(filtered, ds, 100) == 1.0
    swapped = [(0, 0, 1, 1, 0, 0.5)]
    assert prf_acc(swapped, ds) == (0.0, 0.0, pytest.approx(1 / 3))  # A correctly unmatched only


def test_two_frame_fixture():
    ds = make_dataset([
        [[0, 1, 2], [0, 1, 2]],  # all matchable
        [[0, 1], [1, 3]],  # 1 matchable; 0 and 3 single
    ])
    records = [
        (0, 0, 1, 0, 0, 1.0), (0, 0, 1, 1, 2, 1.0), (0, 0, 1, 2, 1, 1.0),  # one right, two swapped
        (1, 0, 1, 1, 0, 1.0),  # right
    ]
    p, r, acc = prf_acc(records, ds)
    assert p == pytest.approx(2 / 4)
    assert r == pytest.approx(2 / 4)
    # frame 0: 1 correct of 3; frame 1: B right, A and D correctly unmatched, 3 of 3.
    assert acc == pytest.approx(4 / 6)
    counts = pair_counts(records, ds)
    assert [(c.correct, c.decisions) for c in counts.values()] == [(1, 3), (3, 3)]
    assert ipaa(records, ds, 100) == 0.5


def test_perfect_and_empty_predictions():
    ds = make_dataset([[[0, 1, 2], [2, 0]], [[4], [4, 5]]])
    perfect = [(0, 0, 1, 0, 1, 1.0), (0, 0, 1, 2, 0, 1.0), (1, 0, 1, 0, 0, 1.0)]
    assert prf_acc(perfect, ds) == (1.0, 1.0, 1.0)
    assert ipaa(perfect, ds, 100) == 1.0
    p, r, acc = prf_acc([], ds)
    assert p is None and r == 0.0
    assert acc == pytest.approx(2 / 5)  # persons 1 and 5 are genuinely unmatchable


def test_records_in_reversed_camera_order_are_accepted():
    ds = make_dataset([[[0, 1], [1, 0]]])
    assert prf_acc([(0, 1, 0, 1, 0, 1.0), (0, 1, 0, 0, 1, 1.0)], ds) == (1.0, 1.0, 1.0)


def test_ipaa_from_accuracies_examples():
    accs = [1.0, 0.95, 0.80, 0.50]
    assert ipaa_from_accuracies(accs, 90) == 0.5
    assert ipaa_from_accuracies(accs, 100) == 0.25
    assert ipaa_from_accuracies(accs, 80) == 0.75
    with pytest.raises(ValueError):
        ipaa_from_accuracies(accs, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_ranges_and_ipaa_monotone(seed):
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(3):
        frames.append([list(rng.choice(6, size=rng.integers(1, 5), replace=False)) for _ in range(2)])
    ds = make_dataset(frames)
    records = []
    for p, (a, b) in enumerate(frames):
        cols = rng.permutation(len(b))
        for r in range(min(len(a), len(b))):
            if rng.random() < 0.7:
                records.append((p, 0, 1, r, int(cols[r]), 1.0))
    p, r, acc = prf_acc(records, ds)
    for v in (p, r, acc):
        assert v is None or 0.0 <= v <= 1.0
    values = [ipaa(records, ds, x) for x in (10, 50, 80, 90, 100)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_recall_is_one_when_all_truth_predicted():
    ds = make_dataset([[[0, 1, 2], [2, 1]]])
    records = [(0, 0, 1, 2, 0, 1.0), (0, 0, 1, 1, 1, 1.0)]
    assert prf_acc(records, ds)[1] == 1.0


# ---- score_pairs / evaluate -------------------------------------------------------


def test_score_pairs_covers_every_cross_pair_once():
    ds = make_dataset([[[0, 1], [1, 0, 2]], [[3], [3]]])
    feats = {}
    for p in ds.frame_ids:
        for c in range(2):
            feats[(p, c)] = [InstanceFeatures(np.array([float(d.identity)])) for d in ds.view(p, c)]
    labels = score_pairs(ds, feats)
    keys = [(l.frame, l.index_i, l.index_j) for l in labels]
    assert len(keys) == len(set(keys)) == 2 * 3 + 1
    assert all(l.positive == (l.score == 1.0) for l in labels)
    assert average_precision(labels) == 1.0


def test_evaluate_and_report(tmp_path):
    ds = make_dataset([[[0, 1], [1, 0]]])
    metrics = evaluate([(0, 0, 1, 0, 1, 1.0), (0, 0, 1, 1, 0, 1.0)], ds)
    assert metrics["acc"] == 1.0 and metrics["ipaa_100"] == 1.0
    assert metrics["per_view_pair"]["0-1"]["acc"] == 1.0
    path = tmp_path / "m.json"
    write_metrics(metrics, path, {"seed": 3})
    doc = json.loads(path.read_text())
    assert doc["seed"] == 3 and doc["metrics"]["acc"] == 1.0
