"""Finite-difference audit of every differentiable op and of the full training loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .checkpoint import Model
from .pretext import TrainConfig, Triplet, batch_loss
from .scene import Dataset, Detection

Build = Callable[[list[dc.Node]], dc.Node]

# name -> (graph builder, input shapes)
OP_CASES: dict[str, tuple[Build, list[tuple[int, int]]]] = {
    "matmul": (lambda n: dc.sum_all(dc.matmul(n[0], n[1])), [(3, 4), (4, 2)]),
    "add": (lambda n: dc.sum_all(dc.matmul(dc.add(n[0], n[1]), dc.transpose(n[1]))), [(2, 3), (2, 3)]),
    "sub": (lambda n: dc.l2_distance(dc.sub(n[0], n[1]), dc.scale(n[0], 0.3)), [(2, 3), (2, 3)]),
    "scale": (lambda n: dc.sum_all(dc.matmul(dc.scale(n[0], -1.7), n[1])), [(2, 2), (2, 1)]),
    "add_row": (lambda n: dc.l1_loss(dc.add_row(n[0], n[1]), np.full((3, 2), 5.0)), [(3, 2), (1, 2)]),
    "transpose": (lambda n: dc.sum_all(dc.matmul(dc.transpose(n[0]), n[1])), [(3, 2), (3, 2)]),
    "concat_cols": (lambda n: dc.sum_all(dc.matmul(dc.concat_cols(n[0], n[1]), n[2])), [(2, 2), (2, 1), (3, 2)]),
    "concat_rows": (lambda n: dc.sum_all(dc.matmul(dc.concat_rows(n[0], n[1]), n[2])), [(1, 3), (2, 3), (3, 2)]),
    "slice": (lambda n: dc.sum_all(dc.matmul(dc.slice_rows(n[0], 1, 3), dc.slice_cols(n[1], 0, 2))), [(3, 4), (4, 3)]),
    "interleave_cols": (lambda n: dc.l2_distance(dc.interleave_cols(n[0], n[1]), dc.const(np.ones((2, 4)))), [(2, 2), (2, 2)]),
    "take_rows": (lambda n: dc.sum_all(dc.matmul(dc.take_rows(n[0], [0, 2, 0]), n[1])), [(3, 2), (2, 2)]),
    "relu": (lambda n: dc.sum_all(dc.matmul(dc.relu(n[0]), n[1])), [(3, 3), (3, 1)]),
    "layer_norm": (lambda n: dc.sum_all(dc.matmul(dc.layer_norm(n[0], n[1], n[2]), n[3])), [(3, 5), (1, 5), (1, 5), (5, 2)]),
    "sin_cos": (lambda n: dc.sum_all(dc.matmul(dc.interleave_cols(*dc.sin_cos(n[0])), n[1])), [(2, 3), (6, 1)]),
    "sum_all": (lambda n: dc.sum_all(dc.matmul(n[0], n[0])), [(3, 3)]),
    "mean_all": (lambda n: dc.mean_all(dc.matmul(n[0], n[1])), [(2, 3), (3, 2)]),
    "l1_loss": (lambda n: dc.l1_loss(n[0], np.full((2, 3), 10.0)), [(2, 3)]),
    "l2_distance": (lambda n: dc.l2_distance(n[0], n[1]), [(1, 4), (1, 4)]),
    "row_distances": (lambda n: dc.sum_all(dc.row_distances(n[0], n[1])), [(3, 4), (3, 4)]),
    "pairwise_distances": (lambda n: dc.sum_all(dc.matmul(dc.pairwise_distances(n[0], n[1]), n[2])), [(3, 4), (2, 4), (2, 1)]),
    "max_normalize": (lambda n: dc.sum_all(dc.matmul(dc.max_normalize(dc.pairwise_distances(n[0], n[1])), n[2])),
                      [(3, 2), (3, 2), (3, 1)]),
    "gather": (lambda n: dc.mean_all(dc.gather(dc.matmul(n[0], n[1]), [0, 1, 1], [2, 0, 2])), [(2, 3), (3, 3)]),
    "hinge": (lambda n: dc.hinge(dc.sum_all(n[0]), 100.0), [(2, 2)]),
}


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool


def toy_triplet(seed: int) -> tuple[Dataset, Triplet]:
    """Two cameras, three people, two frames; anchor view 0, negative frame 1."""
    rng = np.random.default_rng(seed)
    dets = []
    for frame in range(2):
        for cam in range(2):
            for ident in range(3):
                x, y = rng.uniform(0.1, 0.8), rng.uniform(0.2, 0.6)
                w, h = rng.uniform(0.03, 0.08), rng.uniform(0.15, 0.3)
                dets.append(Detection(frame, cam, (x, y, x + w, y + h), ident))
    return Dataset(2, 1080, 1920, 2, 0, dets), Triplet(0, 1, 0, 1)


def check_ops(seed: int = 0, step: float = 1e-5, tol: float = 1e-4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (build, shapes) in OP_CASES.items():
        params = [rng.uniform(-2.0, 2.0, size=s) for s in shapes]
        rep = dc.gradient_check(build, params, step=step, tol=tol)
        out.append(CheckResult(name, max(rep["max_rel_error"]), rep["passed"]))
    return out


def check_full_loss(seed: int = 0, step: float = 1e-5, tol: float = 1e-4,
                    n_freqs: int = 8, embed_dim: int = 4, hidden=(12, 12), out_dim: int = 8) -> list[CheckResult]:
    """Every parameter tensor of the full three-term loss on a frozen toy triplet."""
    dataset, triplet = toy_triplet(seed)
    model = Model.create(2, n_freqs, embed_dim, out_dim, hidden, seed=seed)
    cfg = TrainConfig(n_freqs=n_freqs, embed_dim=embed_dim, hidden=tuple(hidden), out_dim=out_dim)
    tensors = model.tensors()
    names = list(tensors)

    def build(nodes):
        return batch_loss(dict(zip(names, nodes)), dataset, [triplet], cfg).total

    rep = dc.gradient_check(build, list(tensors.values()), step=step, tol=tol)
    return [CheckResult(f"loss:{n}", e, e <= tol) for n, e in zip(names, rep["max_rel_error"])]


def run(seed: int = 0, step: float = 1e-5, tol: float = 1e-4) -> dict:
    start = time.perf_counter()
    results = check_ops(seed, step, tol) + check_full_loss(seed, step, tol)
    return {
        "seed": seed,
        "step": step,
        "tolerance": tol,
        "passed": all(r.passed for r in results),
        "seconds": time.perf_counter() - start,
        "checks": [{"name": r.name, "max_rel_error": r.max_rel_error, "passed": r.passed} for r in results],
    }
