"""Inference over whole datasets: encode, associate every view pair, score."""

from __future__ import annotations

from itertools import combinations

import numpy as np

from .association import DEFAULT_ALPHA, associate
from .checkpoint import Model
from .encoder import InstanceFeatures, bind, encode_nodes
from .metrics import evaluate, score_pairs
from .scene import Dataset


def encode_dataset(model: Model, dataset: Dataset, use_appearance: bool = True,
                   chunk: int = 4096) -> dict[tuple[int, int], list[InstanceFeatures]]:
    """Features for every (frame, camera) image, in detection order."""
    keys, boxes, cams, apps = [], [], [], []
    for p in dataset.frame_ids:
        for c in range(dataset.cameras):
            for k, det in enumerate(dataset.view(p, c)):
                keys.append((p, c))
                boxes.append(det.box)
                cams.append(c)
                apps.append(det.appearance if use_appearance else None)
    out: dict[tuple[int, int], list[InstanceFeatures]] = {
        (p, c): [] for p in dataset.frame_ids for c in range(dataset.cameras)
    }
    if not keys:
        return out
    tensors = model.tensors()
    boxes_arr = np.asarray(boxes, dtype=np.float64)
    cams_arr = np.asarray(cams)
    feats = []
    for lo in range(0, len(keys), chunk):
        nodes = bind(tensors)
        feats.append(encode_nodes(nodes, boxes_arr[lo:lo + chunk], cams_arr[lo:lo + chunk]).value)
    geo = np.concatenate(feats)
    for k, key in enumerate(keys):
        app = None if apps[k] is None else np.asarray(apps[k], dtype=np.float64)
        out[key].append(InstanceFeatures(geo[k], app))
    return out


def associate_dataset(model: Model, dataset: Dataset, alpha: float = DEFAULT_ALPHA,
                      threshold: float = 0.0, use_appearance: bool = True,
                      features=None) -> list[tuple[int, int, int, int, int, float]]:
    """Report records ``(frame, cam_i, cam_j, idx_i, idx_j, confidence)`` for i < j."""
    if features is None:
        features = encode_dataset(model, dataset, use_appearance)
    records = []
    for p in dataset.frame_ids:
        for ci, cj in combinations(range(dataset.cameras), 2):
            fi, fj = features[(p, ci)], features[(p, cj)]
            if not fi or not fj:
                continue
            res = associate(fi, fj, alpha, threshold)
            records.extend((p, ci, cj, r, c, conf) for r, c, conf in res.matches)
    return records


def evaluate_model(model: Model, dataset: Dataset, alpha: float = DEFAULT_ALPHA,
                   threshold: float = 0.0, use_appearance: bool = True, with_scores: bool = False) -> dict:
    feats = encode_dataset(model, dataset, use_appearance)
    records = associate_dataset(model, dataset, alpha, threshold, use_appearance, features=feats)
    labels = score_pairs(dataset, feats, alpha) if with_scores else None
    return evaluate(records, dataset, labels)
