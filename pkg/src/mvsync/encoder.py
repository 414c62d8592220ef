"""Geometric encoder: learnable Fourier box encoding + camera embedding + FC stack."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .association import DataError

TWO_PI = 2.0 * math.pi


@dataclass
class InstanceFeatures:
    geometric: np.ndarray
    appearance: np.ndarray | None = None


@dataclass
class EncoderParams:
    freqs: np.ndarray  # N x 2 Fourier frequencies
    cam_embed: np.ndarray  # C x V
    weights: list[np.ndarray]  # per block, fan_in x fan_out
    gains: list[np.ndarray]  # per block, 1 x fan_out
    biases: list[np.ndarray]

    @property
    def n_freqs(self) -> int:
        return self.freqs.shape[0]

    @property
    def cameras(self) -> int:
        return self.cam_embed.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.cam_embed.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def block_spec(self) -> list[int]:
        return [w.shape[1] for w in self.weights]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"enc.freqs": self.freqs, "enc.cam_embed": self.cam_embed}
        for k, (w, g, b) in enumerate(zip(self.weights, self.gains, self.biases)):
            out[f"enc.w{k}"] = w
            out[f"enc.ln_gain{k}"] = g
            out[f"enc.ln_bias{k}"] = b
        return out

    @classmethod
    def from_tensors(cls, t: Mapping[str, np.ndarray]) -> "EncoderParams":
        n_blocks = sum(1 for k in t if k.startswith("enc.w"))
        return cls(
            t["enc.freqs"],
            t["enc.cam_embed"],
            [t[f"enc.w{k}"] for k in range(n_blocks)],
            [t[f"enc.ln_gain{k}"] for k in range(n_blocks)],
            [t[f"enc.ln_bias{k}"] for k in range(n_blocks)],
        )


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(cameras: int, n_freqs: int = 128, embed_dim: int = 64, out_dim: int = 256,
                hidden: Sequence[int] = (256, 256), seed: int = 0) -> EncoderParams:
    """Fresh encoder parameters; ``hidden`` lists the widths before the output block."""
    if min(cameras, n_freqs, embed_dim, out_dim, *hidden) < 1:
        raise ValueError("all encoder dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    freqs = rng.normal(0.0, 1.0, size=(n_freqs, 2))
    cam_embed = rng.normal(0.0, 0.1, size=(cameras, embed_dim))
    widths = [4 * n_freqs + embed_dim, *hidden, out_dim]
    weights = [glorot(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]
    gains = [np.ones((1, b)) for b in widths[1:]]
    biases = [np.zeros((1, b)) for b in widths[1:]]
    return EncoderParams(freqs, cam_embed, weights, gains, biases)


def bind(tensors: Mapping[str, np.ndarray]) -> dict[str, dc.Node]:
    """Wrap parameter arrays as fresh leaf nodes for one forward/backward pass."""
    return {k: dc.leaf(v, name=k) for k, v in tensors.items()}


def fourier(points: dc.Node, freqs: dc.Node) -> dc.Node:
    """Rows of ``points`` (n x 2) -> [sin f_1, cos f_1, ..., sin f_N, cos f_N]."""
    phase = dc.scale(dc.matmul(points, dc.transpose(freqs)), TWO_PI)
    s, c = dc.sin_cos(phase)
    return dc.interleave_cols(s, c)


def positional_encode(v, params: EncoderParams) -> np.ndarray:
    """The 2N-vector encoding of one normalised 2-d point."""
    out = fourier(dc.const(np.asarray(v, dtype=np.float64).reshape(1, 2)), dc.const(params.freqs))
    return out.value[0]


def encode_nodes(nodes: Mapping[str, dc.Node], boxes, cameras) -> dc.Node:
    """Geometric features (n x G) of boxes ``(x_l, y_l, x_r, y_r)`` seen by ``cameras``.

    ``boxes`` may be an array or a node (to differentiate w.r.t. corners).
    """
    box = boxes if isinstance(boxes, dc.Node) else dc.const(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    n = box.shape[0]
    cams = np.asarray(cameras, dtype=np.intp).reshape(-1)
    if cams.shape[0] != n:
        raise dc.DimensionError(f"{n} boxes but {cams.shape[0]} camera indices")
    n_cams = nodes["enc.cam_embed"].shape[0]
    if n and (cams.min() < 0 or cams.max() >= n_cams):
        raise IndexError(f"camera index out of range for {n_cams} cameras")
    # Both corners share one Fourier pass: rows [v_l; v_r].
    gamma = fourier(dc.concat_rows(dc.slice_cols(box, 0, 2), dc.slice_cols(box, 2, 4)), nodes["enc.freqs"])
    x = dc.concat_cols(
        dc.slice_rows(gamma, 0, n),
        dc.slice_rows(gamma, n, 2 * n),
        dc.take_rows(nodes["enc.cam_embed"], cams),
    )
    n_blocks = sum(1 for k in nodes if k.startswith("enc.w"))
    for k in range(n_blocks):
        x = dc.matmul(x, nodes[f"enc.w{k}"])
        x = dc.layer_norm(x, nodes[f"enc.ln_gain{k}"], nodes[f"enc.ln_bias{k}"])
        if k < n_blocks - 1:
            x = dc.relu(x)
    return x


def encode(box, camera: int, params: EncoderParams) -> np.ndarray:
    if not 0 <= camera < params.cameras:
        raise IndexError(f"camera {camera} out of range for {params.cameras} cameras")
    return encode_nodes(bind(params.tensors()), np.asarray(box).reshape(1, 4), [camera]).value[0]


def encode_batch(detections, params: EncoderParams) -> list[InstanceFeatures]:
    """Features for a list of detections, in order; appearance is passed through."""
    if not detections:
        return []
    apps = [d.appearance for d in detections]
    present = [a is not None for a in apps]
    if any(present):
        if not all(present) or len({len(a) for a in apps}) != 1:
            raise DataError("appearance vectors are missing or ragged")
    boxes = np.array([d.box for d in detections], dtype=np.float64)
    cams = [d.camera for d in detections]
    geo = encode_nodes(bind(params.tensors()), boxes, cams).value
    return [
        InstanceFeatures(geo[k], None if apps[k] is None else np.asarray(apps[k], dtype=np.float64))
        for k in range(len(detections))
    ]
