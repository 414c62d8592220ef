"""Self-supervised training from cross-view synchronisation.

A triplet is an anchor image (view i, frame p), the synchronised image of
another view (view j, frame p) and a non-synchronised one (view j, frame q).
The image-level distance between two images is the mean fused instance
distance over a Hungarian matching; matched indices are constants of the
forward pass, so gradients flow only through the selected entries.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .association import DEFAULT_ALPHA, hungarian
from .checkpoint import Model
from .decoder import reprojection_nodes
from .encoder import bind, encode_nodes
from .scene import ConfigError, Dataset

log = logging.getLogger(__name__)

SUPERVISION_MODES = ("self", "identity")


@dataclass
class TrainConfig:
    alpha: float = DEFAULT_ALPHA
    margin: float = 1.0
    t_min: int = 5
    t_max: int = 20
    lr: float = 1e-4
    lr_final: float = 1e-5
    decay_epoch: int = 150
    epochs: int = 200
    seed: int = 0
    sync: bool = True
    reprojection: bool = True
    edge: bool = True
    appearance: bool = False
    supervision: str = "self"
    edge_cap: int | None = None
    triplets_per_step: int = 1
    frames_per_step: int | None = None  # when set, a step takes every triplet of this many frames
    n_freqs: int = 128
    embed_dim: int = 64
    hidden: tuple[int, ...] = (256, 256)
    out_dim: int = 256
    holdout_fraction: float = 0.1
    val_threshold: float = 0.0

    def validate(self) -> None:
        if self.t_min < 1 or self.t_max < self.t_min:
            raise ConfigError("need 1 <= t_min <= t_max")
        if self.margin < 0:
            raise ConfigError("margin must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if not (self.sync or self.reprojection or self.edge):
            raise ConfigError("enable at least one loss component")
        if self.supervision not in SUPERVISION_MODES:
            raise ConfigError(f"supervision must be one of {SUPERVISION_MODES}")
        if self.epochs < 0 or self.decay_epoch < 0:
            raise ConfigError("epochs and decay_epoch must be non-negative")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ConfigError("learning rates must be positive")
        if self.triplets_per_step < 1:
            raise ConfigError("triplets_per_step must be >= 1")
        if self.frames_per_step is not None:
            if self.frames_per_step < 1:
                raise ConfigError("frames_per_step must be >= 1 when set")
            if self.triplets_per_step != 1:
                raise ConfigError("set either triplets_per_step or frames_per_step, not both")
        if self.edge_cap is not None and self.edge_cap < 1:
            raise ConfigError("edge_cap must be >= 1 when set")
        if not 0.0 <= self.val_threshold <= 1.0:
            raise ConfigError("val_threshold must lie in [0, 1]")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.decay_epoch else self.lr_final

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(int(x) for x in d["hidden"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class Triplet:
    anchor_view: int
    pos_view: int
    frame: int
    neg_frame: int


# --------------------------------------------------------------------------
# Triplet sampling
# --------------------------------------------------------------------------


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def sample_triplets(dataset: Dataset, t_min: int, t_max: int,
                    rng: np.random.Generator) -> tuple[list[Triplet], int]:
    """One triplet per (frame, ordered view pair); returns (triplets, skipped).

    The negative frame is uniform over offsets of either sign with
    ``t_min <= |q - p| <= t_max`` that stay inside the dataset and whose view
    has at least one detection.
    """
    first, last = dataset.first_frame, dataset.first_frame + dataset.frames - 1
    offsets = [d for t in range(t_min, t_max + 1) for d in (-t, t)]
    out: list[Triplet] = []
    skipped = 0
    for p in dataset.frame_ids:
        for i in range(dataset.cameras):
            if not dataset.view(p, i):
                continue
            for j in range(dataset.cameras):
                if j == i:
                    continue
                if not dataset.view(p, j):
                    skipped += 1
                    continue
                valid = sorted(p + d for d in offsets if first <= p + d <= last and dataset.view(p + d, j))
                if not valid:
                    skipped += 1
                    continue
                q = valid[int(rng.integers(len(valid)))]
                out.append(Triplet(i, j, p, q))
    return out, skipped


def step_batches(triplets: Sequence[Triplet], config: TrainConfig,
                 rng: np.random.Generator) -> list[list[Triplet]]:
    """Shuffle an epoch's triplets into optimisation steps.

    By default steps hold ``triplets_per_step`` triplets in random order.  With
    ``frames_per_step`` set, frames are shuffled and each step holds every
    triplet of that many frames, so images are shared within a step.
    """
    if config.frames_per_step is None:
        order = rng.permutation(len(triplets))
        shuffled = [triplets[k] for k in order]
        n = config.triplets_per_step
        return [shuffled[k:k + n] for k in range(0, len(shuffled), n)]
    by_frame: dict[int, list[Triplet]] = {}
    for t in triplets:
        by_frame.setdefault(t.frame, []).append(t)
    frames = sorted(by_frame)
    order = [frames[k] for k in rng.permutation(len(frames))]
    n = config.frames_per_step
    return [[t for f in order[k:k + n] for t in by_frame[f]] for k in range(0, len(order), n)]


def pseudo_edges(boxes) -> list[tuple[int, int, np.ndarray]]:
    """Corner-wise midpoints of every unordered pair of boxes in one view."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return [(u, v, 0.5 * (boxes[u] + boxes[v])) for u, v in combinations(range(len(boxes)), 2)]


# --------------------------------------------------------------------------
# Loss graph
# --------------------------------------------------------------------------


@dataclass
class LossParts:
    total: dc.Node
    sync: float = 0.0
    pro: float = 0.0
    edge: float = 0.0
    used: int = 0
    edge_skipped: int = 0
    matches: dict = field(default_factory=dict)


def _image_key(view: int, frame: int) -> tuple[int, int]:
    return (view, frame)


class _Graph:
    """Shared encodings for one optimisation step over a group of triplets."""

    def __init__(self, nodes: dict[str, dc.Node], dataset: Dataset, config: TrainConfig,
                 rng: np.random.Generator | None = None):
        self.nodes = nodes
        self.dataset = dataset
        self.config = config
        self.rng = rng
        self.rows: dict[tuple[int, int], tuple[int, int]] = {}
        self.boxes: list[np.ndarray] = []
        self.cams: list[np.ndarray] = []
        self.feats: dc.Node | None = None
        self._slices: dict[tuple[int, int], dc.Node] = {}
        self._pro: dict[tuple[int, int], dc.Node] = {}
        self._app: dict[tuple[int, int], np.ndarray | None] = {}

    def add_image(self, view: int, frame: int) -> None:
        key = _image_key(view, frame)
        if key in self.rows:
            return
        dets = self.dataset.view(frame, view)
        start = sum(len(b) for b in self.boxes)
        self.rows[key] = (start, start + len(dets))
        self.boxes.append(np.array([d.box for d in dets], dtype=np.float64).reshape(-1, 4))
        self.cams.append(np.full(len(dets), view, dtype=np.intp))

    def encode(self) -> None:
        boxes = np.concatenate(self.boxes)
        cams = np.concatenate(self.cams)
        self.all_boxes, self.all_cams = boxes, cams
        self.feats = encode_nodes(self.nodes, boxes, cams)

    def image(self, view: int, frame: int) -> dc.Node:
        key = _image_key(view, frame)
        if key not in self._slices:
            lo, hi = self.rows[key]
            self._slices[key] = dc.slice_rows(self.feats, lo, hi)
        return self._slices[key]

    def image_boxes(self, view: int, frame: int) -> np.ndarray:
        lo, hi = self.rows[_image_key(view, frame)]
        return self.all_boxes[lo:hi]

    def reprojection(self, view: int, frame: int) -> dc.Node:
        key = _image_key(view, frame)
        if key not in self._pro:
            self._pro[key] = reprojection_nodes(
                self.nodes, self.image(view, frame), self.image_boxes(view, frame),
                np.full(self.rows[key][1] - self.rows[key][0], view),
            )
        return self._pro[key]

    def distance_matrix(self, a: tuple[int, int], b: tuple[int, int]) -> dc.Node:
        """Fused, max-normalised instance distances between images a and b."""
        d_g = dc.max_normalize(dc.pairwise_distances(self.image(*a), self.image(*b)))
        if not self.config.appearance or self.config.alpha == 0.0:
            return d_g
        app_a, app_b = self.appearance(*a), self.appearance(*b)
        if app_a is None or app_b is None:
            return d_g
        diff = app_a[:, None, :] - app_b[None, :, :]
        d_a = np.sqrt((diff**2).sum(axis=2))
        top = d_a.max()
        alpha = self.config.alpha
        if top == 0:
            return dc.scale(d_g, 1.0 - alpha)
        return dc.add(dc.scale(d_g, 1.0 - alpha), dc.const(alpha * d_a / top))

    def appearance(self, view: int, frame: int) -> np.ndarray | None:
        key = _image_key(view, frame)
        if key not in self._app:
            self._app[key] = _appearance(self.dataset.view(frame, view))
        return self._app[key]

    def matches(self, a: tuple[int, int], b: tuple[int, int], d: dc.Node) -> list[tuple[int, int]]:
        if self.config.supervision == "identity":
            ids_b = {det.identity: k for k, det in enumerate(self.dataset.view(b[1], b[0]))}
            return [(r, ids_b[det.identity]) for r, det in enumerate(self.dataset.view(a[1], a[0]))
                    if det.identity is not None and det.identity in ids_b]
        if not np.all(np.isfinite(d.value)):
            raise NonFiniteLoss("non-finite feature distances")
        return hungarian(d.value)


def _appearance(dets) -> np.ndarray | None:
    if not dets or any(d.appearance is None for d in dets):
        return None
    return np.array([d.appearance for d in dets], dtype=np.float64)


def _mean(terms: Sequence[dc.Node]) -> dc.Node:
    total = terms[0]
    for t in terms[1:]:
        total = dc.add(total, t)
    return dc.scale(total, 1.0 / len(terms))


def image_distance_node(d: dc.Node, matches: Sequence[tuple[int, int]]) -> dc.Node:
    rows = [r for r, _ in matches]
    cols = [c for _, c in matches]
    return dc.mean_all(dc.gather(d, rows, cols))


def _edge_pairs(matches, cap, rng) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    pairs = list(combinations(matches, 2))
    if cap is not None and len(pairs) > cap:
        gen = rng if rng is not None else np.random.default_rng(0)
        keep = np.sort(gen.choice(len(pairs), size=cap, replace=False))
        pairs = [pairs[k] for k in keep]
    return pairs


def batch_loss(nodes: dict[str, dc.Node], dataset: Dataset, triplets: Sequence[Triplet],
               config: TrainConfig, rng: np.random.Generator | None = None) -> LossParts:
    """Mean total loss over ``triplets`` as one graph, plus component means."""
    g = _Graph(nodes, dataset, config, rng)
    for t in triplets:
        g.add_image(t.anchor_view, t.frame)
        g.add_image(t.pos_view, t.frame)
        g.add_image(t.pos_view, t.neg_frame)
    g.encode()

    # Stage 1: node association on both pairs of every triplet.
    plans = []
    for t in triplets:
        anchor = (t.anchor_view, t.frame)
        pos = (t.pos_view, t.frame)
        neg = (t.pos_view, t.neg_frame)
        d_pos = g.distance_matrix(anchor, pos)
        d_neg = g.distance_matrix(anchor, neg)
        m_pos = g.matches(anchor, pos, d_pos)
        m_neg = g.matches(anchor, neg, d_neg)
        plans.append((t, anchor, pos, neg, d_pos, d_neg, m_pos, m_neg))

    # Stage 2: pseudo-edge boxes for every matched node pair-of-pairs, encoded together.
    edge_rows: dict[tuple[int, int, int, int], int] = {}
    edge_boxes: list[np.ndarray] = []
    edge_cams: list[int] = []

    def edge_row(img: tuple[int, int], u: int, v: int) -> int:
        u, v = min(u, v), max(u, v)
        key = (img[0], img[1], u, v)
        if key not in edge_rows:
            boxes = g.image_boxes(*img)
            edge_rows[key] = len(edge_boxes)
            edge_boxes.append(0.5 * (boxes[u] + boxes[v]))
            edge_cams.append(img[0])
        return edge_rows[key]

    edge_index = []
    for t, anchor, pos, neg, _, _, m_pos, m_neg in plans:
        if not config.edge or len(m_pos) < 2 or len(m_neg) < 2:
            edge_index.append(None)
            continue
        sides = []
        for other, matches in ((pos, m_pos), (neg, m_neg)):
            pairs = _edge_pairs(matches, config.edge_cap, rng)
            rows_i = [edge_row(anchor, a[0], b[0]) for a, b in pairs]
            rows_j = [edge_row(other, a[1], b[1]) for a, b in pairs]
            sides.append((rows_i, rows_j))
        edge_index.append(sides)
    edge_feats = None
    if edge_boxes:
        edge_feats = encode_nodes(nodes, np.array(edge_boxes), edge_cams)

    totals = []
    sync_vals, pro_vals, edge_vals = [], [], []
    edge_skipped = 0
    matches_out = {}
    for plan, sides in zip(plans, edge_index):
        t, anchor, pos, neg, d_pos, d_neg, m_pos, m_neg = plan
        if not m_pos or not m_neg:
            continue
        matches_out[t] = (m_pos, m_neg)
        terms = []
        if config.sync:
            h_pos = image_distance_node(d_pos, m_pos)
            h_neg = image_distance_node(d_neg, m_neg)
            l_syn = dc.hinge(dc.sub(h_pos, h_neg), config.margin)
            terms.append(l_syn)
            sync_vals.append(l_syn.item())
        if config.reprojection:
            l_pro = dc.scale(dc.add(g.reprojection(*anchor), g.reprojection(*pos)), 0.5)
            terms.append(l_pro)
            pro_vals.append(l_pro.item())
        if config.edge:
            if sides is None:
                edge_skipped += 1
                edge_vals.append(0.0)
            else:
                (pi, pj), (ni, nj) = sides
                h_pos = dc.mean_all(dc.row_distances(dc.take_rows(edge_feats, pi), dc.take_rows(edge_feats, pj)))
                h_neg = dc.mean_all(dc.row_distances(dc.take_rows(edge_feats, ni), dc.take_rows(edge_feats, nj)))
                l_edge = dc.hinge(dc.sub(h_pos, h_neg), config.margin)
                terms.append(l_edge)
                edge_vals.append(l_edge.item())
        if terms:
            totals.append(terms[0] if len(terms) == 1 else _sum(terms))

    total = _mean(totals) if totals else dc.const(0.0)
    return LossParts(
        total,
        float(np.mean(sync_vals)) if sync_vals else 0.0,
        float(np.mean(pro_vals)) if pro_vals else 0.0,
        float(np.mean(edge_vals)) if edge_vals else 0.0,
        len(totals),
        edge_skipped,
        matches_out,
    )


def _sum(terms: Sequence[dc.Node]) -> dc.Node:
    total = terms[0]
    for t in terms[1:]:
        total = dc.add(total, t)
    return total


def _single(model: Model, dataset: Dataset, triplet: Triplet, config: TrainConfig, **switches) -> LossParts:
    cfg = TrainConfig(**{**config.to_dict(), "hidden": tuple(config.hidden), **switches})
    return batch_loss(bind(model.tensors()), dataset, [triplet], cfg)


def sync_loss(triplet: Triplet, model: Model, dataset: Dataset, config: TrainConfig) -> dc.Node:
    return _single(model, dataset, triplet, config, sync=True, reprojection=False, edge=False).total


def edge_loss(triplet: Triplet, model: Model, dataset: Dataset, config: TrainConfig) -> dc.Node:
    return _single(model, dataset, triplet, config, sync=False, reprojection=False, edge=True).total


def total_loss(triplet: Triplet, model: Model, dataset: Dataset, config: TrainConfig) -> dc.Node:
    return batch_loss(bind(model.tensors()), dataset, [triplet], config).total


def edge_distance(matches: Sequence[tuple[int, int]], boxes_i, boxes_j, cam_i: int, cam_j: int,
                  model: Model) -> float | None:
    """Mean feature distance between matched pseudo edges of two views (``None`` if m < 2)."""
    if len(matches) < 2:
        return None
    boxes_i = np.asarray(boxes_i, dtype=np.float64)
    boxes_j = np.asarray(boxes_j, dtype=np.float64)
    pairs = list(combinations(matches, 2))
    ei = np.array([0.5 * (boxes_i[a[0]] + boxes_i[b[0]]) for a, b in pairs])
    ej = np.array([0.5 * (boxes_j[a[1]] + boxes_j[b[1]]) for a, b in pairs])
    nodes = bind(model.tensors())
    fi = encode_nodes(nodes, ei, [cam_i] * len(pairs))
    fj = encode_nodes(nodes, ej, [cam_j] * len(pairs))
    return dc.mean_all(dc.row_distances(fi, fj)).item()


# --------------------------------------------------------------------------
# Optimiser and training loop
# --------------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class NonFiniteLoss(ArithmeticError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Model, history: list[dict]):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    skipped_triplets: int = 0


def train(dataset: Dataset, config: TrainConfig, validation: Dataset | None = None,
          model: Model | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimise encoder + decoders with Adam; one history record per epoch."""
    from .pipeline import evaluate_model  # local: pipeline depends on this module

    config.validate()
    if dataset.frames < config.t_max + 1:
        raise ConfigError(f"dataset has {dataset.frames} frames; need at least t_max + 1 = {config.t_max + 1}")
    if model is None:
        model = Model.create(dataset.cameras, config.n_freqs, config.embed_dim, config.out_dim,
                             config.hidden, seed=config.seed)
    if model.cameras != dataset.cameras:
        raise ConfigError(f"model has {model.cameras} cameras, dataset {dataset.cameras}")
    params = model.tensors()
    opt = Adam(params)
    history: list[dict] = []
    skipped_total = 0
    last_good = model.copy()

    for epoch in range(config.epochs):
        rng = epoch_rng(config.seed, epoch)
        triplets, skipped = sample_triplets(dataset, config.t_min, config.t_max, rng)
        skipped_total += skipped
        batches = step_batches(triplets, config, rng)
        lr = config.lr_at(epoch)
        sums = {"sync": 0.0, "pro": 0.0, "edge": 0.0, "total": 0.0}
        steps = 0
        for group in batches:
            nodes = bind(params)
            try:
                parts = batch_loss(nodes, dataset, group, config, rng)
            except NonFiniteLoss as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}", last_good, history) from None
            if parts.used == 0:
                continue
            value = parts.total.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good, history)
            dc.backward(parts.total)
            opt.step({k: n.grad for k, n in nodes.items()}, lr)
            if not all(np.isfinite(p).all() for p in params.values()):
                raise TrainingDiverged(f"non-finite parameters at epoch {epoch}", last_good, history)
            sums["sync"] += parts.sync
            sums["pro"] += parts.pro
            sums["edge"] += parts.edge
            sums["total"] += value
            steps += 1
        record = {"epoch": epoch, "lr": lr, "steps": steps}
        for k, v in sums.items():
            record[k] = v / steps if steps else 0.0
        record["val_acc"] = None
        if validation is not None and validation.has_identities:
            record["val_acc"] = evaluate_model(
                model, validation, alpha=config.alpha, threshold=config.val_threshold,
                use_appearance=config.appearance,
            )["acc"]
        history.append(record)
        last_good = model.copy()
        log.info("epoch %d loss %.5f syn %.4f pro %.4f edge %.4f val_acc %s", epoch, record["total"],
                 record["sync"], record["pro"], record["edge"], record["val_acc"])
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(model, history, skipped_total)


def write_history(history: Sequence[dict], path, header: str | None = None) -> None:
    """Line records ``epoch L_syn L_pro L_edge val_ACC`` (``nan`` when absent)."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for r in history:
            acc = r.get("val_acc")
            fh.write(f"{r['epoch']} {r['sync']!r} {r['pro']!r} {r['edge']!r} "
                     f"{'nan' if acc is None else repr(acc)}\n")
