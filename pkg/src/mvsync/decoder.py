"""Per-view linear re-projection of geometric features back to box corners."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .encoder import encode_nodes, glorot


@dataclass
class ViewDecoders:
    weights: list[np.ndarray]  # per camera, 4 x G
    biases: list[np.ndarray]  # per camera, 1 x 4

    @property
    def cameras(self) -> int:
        return len(self.weights)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for c, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"dec.w{c}"] = w
            out[f"dec.b{c}"] = b
        return out

    @classmethod
    def from_tensors(cls, t: Mapping[str, np.ndarray]) -> "ViewDecoders":
        n = sum(1 for k in t if k.startswith("dec.w"))
        return cls([t[f"dec.w{c}"] for c in range(n)], [t[f"dec.b{c}"] for c in range(n)])


def init_decoders(cameras: int, feature_dim: int, seed: int = 0) -> ViewDecoders:
    rng = np.random.default_rng(seed)
    weights = [glorot(rng, feature_dim, 4).T.copy() for _ in range(cameras)]
    biases = [np.full((1, 4), 0.5) for _ in range(cameras)]
    return ViewDecoders(weights, biases)


def decode_nodes(nodes: Mapping[str, dc.Node], feats: dc.Node, camera: int) -> dc.Node:
    """Estimated corners (n x 4) for features that all come from ``camera``."""
    key = f"dec.w{camera}"
    if key not in nodes:
        raise IndexError(f"no decoder for camera {camera}")
    return dc.add_row(dc.matmul(feats, dc.transpose(nodes[key])), nodes[f"dec.b{camera}"])


def decode(f_g, camera: int, decoders: ViewDecoders):
    """``W f_g + B`` for one feature vector, returned as ``(v_l*, v_r*)``."""
    if not 0 <= camera < decoders.cameras:
        raise IndexError(f"camera {camera} out of range for {decoders.cameras} decoders")
    out = decoders.weights[camera] @ np.asarray(f_g, dtype=np.float64) + decoders.biases[camera][0]
    return out[:2], out[2:]


def reprojection_nodes(nodes: Mapping[str, dc.Node], feats: dc.Node, boxes: np.ndarray, cameras) -> dc.Node:
    """Mean over instances of L1(v_l*, v_l) + L1(v_r*, v_r), each L1 a per-coordinate mean.

    ``feats`` rows line up with ``boxes`` rows and ``cameras``.
    """
    cams = np.asarray(cameras, dtype=np.intp)
    n = len(cams)
    terms = []
    for c in np.unique(cams):
        rows = np.flatnonzero(cams == c)
        sub = feats if len(rows) == n else dc.take_rows(feats, rows)
        est = decode_nodes(nodes, sub, int(c))
        # l1_loss averages over 4 coords; per instance we want 2 x that, weighted by group size.
        terms.append(dc.scale(dc.l1_loss(est, boxes[rows]), 2.0 * len(rows) / n))
    total = terms[0]
    for t in terms[1:]:
        total = dc.add(total, t)
    return total


def reprojection_loss(detections, encoder_tensors: Mapping[str, np.ndarray], decoders: ViewDecoders):
    """Re-projection loss node over one set of detections (e.g. one frame).

    Returns ``(loss_node, empty)``; an empty input yields a zero loss with
    ``empty=True`` and a warning.
    """
    if not detections:
        warnings.warn("reprojection_loss on an empty frame; returning 0", RuntimeWarning, stacklevel=2)
        return dc.const(0.0), True
    nodes = {k: dc.leaf(v, name=k) for k, v in {**encoder_tensors, **decoders.tensors()}.items()}
    boxes = np.array([d.box for d in detections], dtype=np.float64)
    cams = [d.camera for d in detections]
    feats = encode_nodes(nodes, boxes, cams)
    return reprojection_nodes(nodes, feats, boxes, cams), False
