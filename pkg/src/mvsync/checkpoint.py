"""Model bundle (encoder + per-view decoders) and its on-disk checkpoint."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decoder import ViewDecoders, init_decoders
from .encoder import EncoderParams, init_params

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Model:
    encoder: EncoderParams
    decoders: ViewDecoders

    @classmethod
    def create(cls, cameras: int, n_freqs: int = 128, embed_dim: int = 64, out_dim: int = 256,
               hidden=(256, 256), seed: int = 0) -> "Model":
        enc = init_params(cameras, n_freqs, embed_dim, out_dim, hidden, seed)
        dec = init_decoders(cameras, out_dim, seed=seed + 1)
        return cls(enc, dec)

    @property
    def cameras(self) -> int:
        return self.encoder.cameras

    def tensors(self) -> dict[str, np.ndarray]:
        return {**self.encoder.tensors(), **self.decoders.tensors()}

    @classmethod
    def from_tensors(cls, t) -> "Model":
        return cls(EncoderParams.from_tensors(t), ViewDecoders.from_tensors(t))

    def copy(self) -> "Model":
        return Model.from_tensors({k: v.copy() for k, v in self.tensors().items()})

    def meta(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "cameras": self.cameras,
            "n_freqs": self.encoder.n_freqs,
            "embed_dim": self.encoder.embed_dim,
            "out_dim": self.encoder.out_dim,
            "blocks": self.encoder.block_spec,
        }

    def equals(self, other: "Model") -> bool:
        a, b = self.tensors(), other.tensors()
        return a.keys() == b.keys() and all(
            a[k].shape == b[k].shape and np.array_equal(a[k], b[k]) for k in a
        )


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    meta = model.meta()
    if extra:
        meta["extra"] = extra
    arrays = dict(model.tensors())
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[Model, dict]:
    try:
        with np.load(Path(path), allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            tensors = {k: data[k].copy() for k in data.files if k != "__meta__"}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    model = Model.from_tensors(tensors)
    if (model.cameras, model.encoder.n_freqs, model.encoder.embed_dim, model.encoder.out_dim,
            model.encoder.block_spec) != (meta["cameras"], meta["n_freqs"], meta["embed_dim"],
                                          meta["out_dim"], meta["blocks"]):
        raise CheckpointError("checkpoint tensors disagree with their header")
    return model, meta
