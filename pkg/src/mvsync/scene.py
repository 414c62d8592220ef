"""Synthetic multi-view scenes: agents walking on a ground plane, seen by
static pinhole cameras arranged on a ring.

Also the line-oriented dataset file format used for both synthetic and
externally detected boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

APPEARANCE_MODES = ("none", "identical", "per-identity")
FORMAT_TAG = "mvsync-dataset"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    rotation: np.ndarray  # world -> camera; rows are the camera x (right), y (down), z (forward) axes
    focal: float
    principal: tuple[float, float]
    image_size: tuple[int, int]  # (H, W)

    def __post_init__(self):
        if self.focal <= 0:
            raise ConfigError("focal length must be positive")
        r = np.asarray(self.rotation, dtype=np.float64)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ConfigError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, position, target, focal, image_size) -> "Camera":
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        h, w = image_size
        return cls(position, np.stack([right, down, forward]), focal, (w / 2.0, h / 2.0), image_size)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (n x 2) and depths (n,) of world points (n x 3)."""
        cam = (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation.T
        depth = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = self.focal * cam[:, :2] / depth[:, None] + np.asarray(self.principal)
        return uv, depth


def project_agent(ground_xy, height: float, width: float, camera: Camera):
    """Normalised box ``(x_l, y_l, x_r, y_r)`` of a standing agent, or ``None``.

    The agent is a vertical segment of the given height whose horizontal
    extent, ``width``, is taken along the camera's right axis.  ``None`` when
    any extreme point lies behind the camera or the box centre is off-image.
    """
    x, y = float(ground_xy[0]), float(ground_xy[1])
    right = camera.rotation[0].copy()
    right[2] = 0.0
    norm = np.linalg.norm(right)
    right = right / norm if norm > 0 else np.array([1.0, 0.0, 0.0])
    half = 0.5 * width * right
    base = np.array([x, y, 0.0])
    top = np.array([x, y, height])
    pts = np.stack([base - half, base + half, top - half, top + half])
    uv, depth = camera.project(pts)
    if np.any(depth <= 0):
        return None
    h, w = camera.image_size
    x_l, y_l = uv[:, 0].min() / w, uv[:, 1].min() / h
    x_r, y_r = uv[:, 0].max() / w, uv[:, 1].max() / h
    cx, cy = 0.5 * (x_l + x_r), 0.5 * (y_l + y_r)
    if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
        return None
    return (float(x_l), float(y_l), float(x_r), float(y_r))


@dataclass
class SceneConfig:
    cameras: int = 3
    agents: int = 8
    frames: int = 600
    noise: float = 0.005
    dropout: float = 0.15
    appearance: str = "none"
    appearance_dim: int = 16
    appearance_noise: float = 0.05
    arena: float = 5.0  # half side of the square walking area, metres
    ring_radius: float = 18.0
    camera_height: float = 6.0
    focal: float = 1200.0
    image_size: tuple[int, int] = (1080, 1920)
    fps: float = 5.0
    max_speed: float = 1.5
    accel: float = 1.0

    def validate(self) -> None:
        if self.cameras < 2:
            raise ConfigError("need at least two cameras")
        if self.agents < 1:
            raise ConfigError("need at least one agent")
        if self.frames < 1:
            raise ConfigError("need at least one frame")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if self.appearance not in APPEARANCE_MODES:
            raise ConfigError(f"appearance must be one of {APPEARANCE_MODES}")
        if self.appearance != "none" and self.appearance_dim < 1:
            raise ConfigError("appearance_dim must be positive")
        if self.max_speed <= 0 or self.fps <= 0:
            raise ConfigError("max_speed and fps must be positive")


@dataclass
class AgentTrack:
    identity: int
    positions: np.ndarray  # frames x 2
    height: float
    width: float


@dataclass(frozen=True)
class Detection:
    frame: int
    camera: int
    box: tuple[float, float, float, float]
    identity: int | None = None
    appearance: tuple[float, ...] | None = None


@dataclass
class MultiViewFrame:
    frame: int
    views: list[list[Detection]]


@dataclass
class Dataset:
    cameras: int
    height: int
    width: int
    frames: int
    appearance_dim: int
    detections: list[Detection]
    first_frame: int = 0
    seed: int | None = None
    tracks: list[AgentTrack] | None = field(default=None, compare=False, repr=False)
    _index: dict = field(default=None, compare=False, repr=False, init=False)

    @property
    def frame_ids(self) -> range:
        return range(self.first_frame, self.first_frame + self.frames)

    def view(self, frame: int, camera: int) -> list[Detection]:
        if self._index is None:
            index: dict[tuple[int, int], list[Detection]] = {}
            for det in self.detections:
                index.setdefault((det.frame, det.camera), []).append(det)
            self._index = index
        return self._index.get((frame, camera), [])

    def frame(self, frame: int) -> MultiViewFrame:
        return MultiViewFrame(frame, [self.view(frame, c) for c in range(self.cameras)])

    def __iter__(self) -> Iterator[MultiViewFrame]:
        for p in self.frame_ids:
            yield self.frame(p)

    @property
    def has_identities(self) -> bool:
        return bool(self.detections) and all(d.identity is not None for d in self.detections)

    def subset(self, start: int, stop: int) -> "Dataset":
        """Frames ``start <= p < stop`` keeping their original numbering."""
        start = max(start, self.first_frame)
        stop = min(stop, self.first_frame + self.frames)
        dets = [d for d in self.detections if start <= d.frame < stop]
        return Dataset(self.cameras, self.height, self.width, max(0, stop - start),
                       self.appearance_dim, dets, first_frame=start, seed=self.seed)

    def split(self, holdout_fraction: float) -> tuple["Dataset", "Dataset"]:
        """Contiguous (train, held-out) split; the held-out part is the tail."""
        if not 0.0 <= holdout_fraction < 1.0:
            raise ConfigError("holdout fraction must lie in [0, 1)")
        n_test = int(round(self.frames * holdout_fraction))
        cut = self.first_frame + self.frames - n_test
        return self.subset(self.first_frame, cut), self.subset(cut, self.first_frame + self.frames)


def ring_cameras(config: SceneConfig) -> list[Camera]:
    cams = []
    for c in range(config.cameras):
        theta = 2.0 * math.pi * c / config.cameras + math.pi / 7.0
        pos = [config.ring_radius * math.cos(theta), config.ring_radius * math.sin(theta), config.camera_height]
        cams.append(Camera.look_at(pos, [0.0, 0.0, 0.9], config.focal, config.image_size))
    return cams


def simulate_tracks(config: SceneConfig, rng: np.random.Generator) -> list[AgentTrack]:
    """Smooth speed-capped random walks reflected at the arena walls."""
    dt = 1.0 / config.fps
    lim = config.arena
    tracks = []
    for ident in range(config.agents):
        pos = rng.uniform(-lim, lim, size=2)
        heading = rng.uniform(0, 2 * math.pi)
        vel = 0.5 * config.max_speed * np.array([math.cos(heading), math.sin(heading)])
        out = np.empty((config.frames, 2))
        for t in range(config.frames):
            out[t] = pos
            vel = vel + rng.normal(0.0, config.accel * dt, size=2)
            speed = float(np.hypot(*vel))
            if speed > config.max_speed:
                vel *= config.max_speed / speed
            pos = pos + vel * dt
            for k in range(2):
                if pos[k] > lim:
                    pos[k] = 2 * lim - pos[k]
                    vel[k] = -vel[k]
                elif pos[k] < -lim:
                    pos[k] = -2 * lim - pos[k]
                    vel[k] = -vel[k]
        tracks.append(AgentTrack(ident, out, float(rng.normal(1.75, 0.07)), float(rng.uniform(0.45, 0.6))))
    return tracks


def generate_scene(config: SceneConfig, seed: int) -> Dataset:
    config.validate()
    rng = np.random.default_rng(seed)
    cams = ring_cameras(config)
    tracks = simulate_tracks(config, rng)

    if config.appearance == "identical":
        shared = rng.normal(size=config.appearance_dim)
        base = {t.identity: shared for t in tracks}
    elif config.appearance == "per-identity":
        base = {t.identity: rng.normal(size=config.appearance_dim) for t in tracks}
    else:
        base = {}

    dets = []
    for frame in range(config.frames):
        for c, cam in enumerate(cams):
            for track in tracks:
                box = project_agent(track.positions[frame], track.height, track.width, cam)
                drop = rng.random() < config.dropout
                if box is None or drop:
                    continue
                jitter = rng.normal(0.0, config.noise, size=4) if config.noise > 0 else np.zeros(4)
                b = np.clip(np.asarray(box) + jitter, 0.0, 1.0)
                if not (b[0] < b[2] and b[1] < b[3]):
                    continue
                app = None
                if config.appearance == "identical":
                    app = tuple(float(x) for x in base[track.identity])
                elif config.appearance == "per-identity":
                    noise = rng.normal(0.0, config.appearance_noise, size=config.appearance_dim)
                    app = tuple(float(x) for x in base[track.identity] + noise)
                dets.append(Detection(frame, c, tuple(float(x) for x in b), track.identity, app))

    h, w = config.image_size
    adim = config.appearance_dim if config.appearance != "none" else 0
    return Dataset(config.cameras, h, w, config.frames, adim, dets, seed=seed, tracks=tracks)


# --------------------------------------------------------------------------
# File format
# --------------------------------------------------------------------------


def write_dataset(dataset: Dataset, path) -> None:
    header = (
        f"# {FORMAT_TAG} v{FORMAT_VERSION} cameras={dataset.cameras} height={dataset.height} "
        f"width={dataset.width} frames={dataset.frames} appearance_dim={dataset.appearance_dim} "
        f"first_frame={dataset.first_frame}"
    )
    if dataset.seed is not None:
        header += f" seed={dataset.seed}"
    lines = [header]
    for d in dataset.detections:
        fields = [str(d.frame), str(d.camera)] + [repr(float(x)) for x in d.box]
        if d.identity is not None:
            fields.append(str(d.identity))
        if d.appearance is not None:
            fields.append(",".join(repr(float(x)) for x in d.appearance))
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str, path) -> dict[str, int]:
    parts = line.lstrip("#").split()
    if len(parts) < 2 or parts[0] != FORMAT_TAG:
        raise DatasetFormatError(f"{path}:1: missing '{FORMAT_TAG}' header")
    if parts[1] != f"v{FORMAT_VERSION}":
        raise DatasetFormatError(f"{path}:1: unsupported version {parts[1]}")
    meta = {}
    for token in parts[2:]:
        key, sep, val = token.partition("=")
        if not sep:
            raise DatasetFormatError(f"{path}:1: malformed header field {token!r}")
        try:
            meta[key] = int(val)
        except ValueError:
            raise DatasetFormatError(f"{path}:1: non-integer header value {token!r}") from None
    for key in ("cameras", "height", "width", "frames", "appearance_dim"):
        if key not in meta:
            raise DatasetFormatError(f"{path}:1: header lacks '{key}'")
    return meta


def read_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise DatasetFormatError(f"{path}:1: empty file")
    meta = _parse_header(text[0], path)
    adim = meta["appearance_dim"]
    first = meta.get("first_frame", 0)
    dets = []
    for lineno, line in enumerate(text[1:], 2):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        n = len(parts)
        expected = (7, 8) if adim else (6, 7)
        if n not in expected:
            raise DatasetFormatError(f"{path}:{lineno}: expected {expected} fields, got {n}")
        try:
            frame, cam = int(parts[0]), int(parts[1])
            box = tuple(float(x) for x in parts[2:6])
            ident = None
            app = None
            if adim:
                app = tuple(float(x) for x in parts[-1].split(","))
                if len(app) != adim:
                    raise DatasetFormatError(
                        f"{path}:{lineno}: appearance has {len(app)} values, header says {adim}"
                    )
                if n == 8:
                    ident = int(parts[6])
            elif n == 7:
                ident = int(parts[6])
        except ValueError as exc:
            if isinstance(exc, DatasetFormatError):
                raise
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
        if not 0 <= cam < meta["cameras"]:
            raise DatasetFormatError(f"{path}:{lineno}: camera {cam} out of range")
        if not first <= frame < first + meta["frames"]:
            raise DatasetFormatError(f"{path}:{lineno}: frame {frame} out of range")
        dets.append(Detection(frame, cam, box, ident, app))
    return Dataset(meta["cameras"], meta["height"], meta["width"], meta["frames"], adim, dets,
                   first_frame=first, seed=meta.get("seed"))
