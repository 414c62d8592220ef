"""Instance distances, Hungarian matching and confidence-filtered association."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .diffcore import DimensionError

DEFAULT_ALPHA = 0.1


class DataError(ValueError):
    """Inconsistent instance data (e.g. appearance present for only some)."""


@dataclass
class AssociationResult:
    matches: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_rows: list[int] = field(default_factory=list)
    unmatched_cols: list[int] = field(default_factory=list)

    def pairs(self) -> set[tuple[int, int]]:
        return {(r, c) for r, c, _ in self.matches}


def _euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


def _max_normalize(d: np.ndarray) -> np.ndarray:
    top = d.max() if d.size else 0.0
    return d / top if top > 0 else d


def pairwise_distances(feats_i, feats_j):
    """Max-normalised Euclidean distance matrices ``(D_a, D_g)``.

    ``feats_*`` are sequences of :class:`~mvsync.encoder.InstanceFeatures`.
    ``D_a`` is ``None`` when no instance carries an appearance vector.
    """
    if not feats_i or not feats_j:
        raise DataError("pairwise_distances needs non-empty instance lists")
    g_i = np.stack([f.geometric for f in feats_i])
    g_j = np.stack([f.geometric for f in feats_j])
    d_g = _max_normalize(_euclidean(g_i, g_j))
    has_app = [f.appearance is not None for f in (*feats_i, *feats_j)]
    if not any(has_app):
        return None, d_g
    if not all(has_app):
        raise DataError("appearance vectors present for only some instances")
    a_i = np.stack([f.appearance for f in feats_i])
    a_j = np.stack([f.appearance for f in feats_j])
    return _max_normalize(_euclidean(a_i, a_j)), d_g


def fuse(d_a: np.ndarray | None, d_g: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Weighted sum ``alpha * D_a + (1 - alpha) * D_g``; alpha is 0 without D_a."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if d_a is None:
        return np.array(d_g, dtype=np.float64)
    if d_a.shape != d_g.shape:
        raise DimensionError(f"fuse: D_a {d_a.shape} vs D_g {d_g.shape}")
    if alpha == 0.0:
        return np.array(d_g, dtype=np.float64)
    if alpha == 1.0:
        return np.array(d_a, dtype=np.float64)
    return alpha * d_a + (1.0 - alpha) * d_g


# --------------------------------------------------------------------------
# Hungarian matching
# --------------------------------------------------------------------------


def _solve_square(cost: list[list[float]], k: int):
    """Shortest-augmenting-path Hungarian on a k x k list matrix.

    Returns (row_to_col, u, v) with dual potentials u + v <= cost, tight on
    the matching.
    """
    inf = math.inf
    u = [0.0] * (k + 1)
    v = [0.0] * (k + 1)
    p = [0] * (k + 1)  # p[j]: row (1-based) matched to column j
    way = [0] * (k + 1)
    for i in range(1, k + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (k + 1)
        used = [False] * (k + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = cost[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, k + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(k + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = [0] * k
    for j in range(1, k + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _lexicographic(tight: list[list[bool]], match: list[int], n_rows: int, n_cols: int) -> list[int]:
    """Rewire a perfect tight-graph matching into the lexicographically smallest
    one over the real rows; padding columns rank after every real column."""
    k = len(match)
    owner = [0] * k
    for r, c in enumerate(match):
        owner[c] = r
    fixed = [False] * k

    def find_path(row: int, target: int, seen: list[bool], path: list[tuple[int, int]]) -> bool:
        for c in range(k):
            if tight[row][c] and not seen[c]:
                seen[c] = True
                nxt = owner[c]
                if c == target or (not fixed[nxt] and find_path(nxt, target, seen, path)):
                    path.append((row, c))
                    return True
        return False

    for i in range(n_rows):
        cur = match[i]
        for c in range(min(cur, n_cols)):
            if not tight[i][c] or fixed[owner[c]]:
                continue
            fixed[i] = True
            seen = [False] * k
            seen[c] = True
            path: list[tuple[int, int]] = []
            if find_path(owner[c], cur, seen, path):
                match[i], owner[c] = c, i
                for r, col in path:
                    match[r], owner[col] = col, r
                break
            fixed[i] = False
        fixed[i] = True
    return match


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment of the smaller side into the larger.

    Returns ``min(n_rows, n_cols)`` pairs ``(row, col)`` sorted by row.  Among
    equally optimal assignments, the lexicographically smallest pair sequence
    is returned.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise DimensionError(f"hungarian expects a matrix, got shape {c.shape}")
    n, m = c.shape
    if n == 0 or m == 0:
        return []
    if not np.all(np.isfinite(c)):
        raise ValueError("hungarian: costs must be finite")
    k = max(n, m)
    padded = np.zeros((k, k))
    padded[:n, :m] = c
    rows = padded.tolist()
    match, u, v = _solve_square(rows, k)
    tol = 1e-9 * max(1.0, float(np.abs(c).max()))
    slack = padded - np.asarray(u)[:, None] - np.asarray(v)[None, :]
    tight_arr = slack <= tol
    # Fast exit: every real row already sits on its smallest tight column.
    real = tight_arr[:n, :m]
    first = np.where(real.any(axis=1), real.argmax(axis=1), np.asarray(match[:n]))
    if np.any(first != np.asarray(match[:n])):
        match = _lexicographic(tight_arr.tolist(), match, n, m)
    return [(i, match[i]) for i in range(n) if match[i] < m]


def assignment_cost(cost, pairs: Iterable[tuple[int, int]]) -> float:
    c = np.asarray(cost, dtype=np.float64)
    return float(sum(c[r, col] for r, col in pairs))


def image_distance(d, matches: Sequence[tuple[int, int]]) -> float | None:
    """Mean matched instance distance; ``None`` when nothing can be matched."""
    d = np.asarray(d, dtype=np.float64)
    m = min(d.shape) if d.ndim == 2 else 0
    if m == 0 or not matches:
        return None
    return float(sum(d[r, c] for r, c in matches[:m]) / m)


def confidence_scores(d) -> np.ndarray:
    """``1 - D / max D``; an all-zero matrix scores 1 everywhere."""
    d = np.asarray(d, dtype=np.float64)
    top = d.max() if d.size else 0.0
    if top <= 0:
        return np.ones_like(d)
    return 1.0 - d / top


def associate(feats_i, feats_j, alpha: float = DEFAULT_ALPHA, threshold: float = 0.0) -> AssociationResult:
    """Hungarian matching on fused distances, dropping low-confidence matches."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    n_i, n_j = len(feats_i), len(feats_j)
    if n_i == 0 or n_j == 0:
        return AssociationResult([], list(range(n_i)), list(range(n_j)))
    d_a, d_g = pairwise_distances(feats_i, feats_j)
    d = fuse(d_a, d_g, alpha)
    scores = confidence_scores(d)
    kept = [(r, c, float(scores[r, c])) for r, c in hungarian(d) if scores[r, c] >= threshold]
    rows = {r for r, _, _ in kept}
    cols = {c for _, c, _ in kept}
    return AssociationResult(
        kept,
        [r for r in range(n_i) if r not in rows],
        [c for c in range(n_j) if c not in cols],
    )


# --------------------------------------------------------------------------
# Report file: ``frame camera_i camera_j idx_i idx_j confidence`` per line
# --------------------------------------------------------------------------


def write_report(path, records: Iterable[tuple[int, int, int, int, int, float]], header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for frame, ci, cj, ii, jj, conf in records:
            fh.write(f"{frame} {ci} {cj} {ii} {jj} {conf!r}\n")


def read_report(path) -> list[tuple[int, int, int, int, int, float]]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        try:
            frame, ci, cj, ii, jj = (int(x) for x in parts[:5])
            conf = float(parts[5])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        records.append((frame, ci, cj, ii, jj, conf))
    return records
