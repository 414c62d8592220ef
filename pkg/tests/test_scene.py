import dataclasses

import numpy as np
import pytest

from mvsync.scene import (
    Camera,
    ConfigError,
    Dataset,
    DatasetFormatError,
    Detection,
    SceneConfig,
    generate_scene,
    project_agent,
    read_dataset,
    ring_cameras,
    write_dataset,
)


def facing_camera(focal=1000.0, distance=10.0):
    # Camera on the -y axis at head-centre height, looking along +y.
    return Camera.look_at([0.0, -distance, 0.9], [0.0, 0.0, 0.9], focal, (1000, 1000))


def small_config(**kw):
    base = dict(cameras=3, agents=4, frames=60)
    base.update(kw)
    return SceneConfig(**base)


def test_camera_rejects_bad_parameters():
    cam = facing_camera()
    with pytest.raises(ConfigError):
        dataclasses.replace(cam, focal=0.0)
    with pytest.raises(ConfigError):
        dataclasses.replace(cam, rotation=2.0 * cam.rotation)


def test_agent_on_optical_axis_is_centred():
    box = project_agent([0.0, 0.0], 1.8, 0.5, facing_camera())
    assert box is not None
    assert 0.5 * (box[0] + box[2]) == pytest.approx(0.5, abs=1e-12)
    assert 0.5 * (box[1] + box[3]) == pytest.approx(0.5, abs=1e-12)


def test_agent_behind_camera_is_absent():
    assert project_agent([0.0, -20.0], 1.8, 0.5, facing_camera()) is None


def test_box_height_follows_projection_formula():
    height, distance = 1.8, 40.0
    for focal in (500.0, 1000.0):
        box = project_agent([0.0, 0.0], height, 0.5, facing_camera(focal, distance))
        # Head and feet at equal depth: pixel height = f * h / d, normalised by H.
        assert box[3] - box[1] == pytest.approx(focal * height / distance / 1000.0, rel=1e-12)
    short = project_agent([0.0, 0.0], height, 0.5, facing_camera(500.0, distance))
    long = project_agent([0.0, 0.0], height, 0.5, facing_camera(1000.0, distance))
    assert (long[3] - long[1]) == pytest.approx(2.0 * (short[3] - short[1]), rel=1e-12)


def test_ring_cameras_look_at_the_arena():
    cfg = SceneConfig()
    for cam in ring_cameras(cfg):
        box = project_agent([0.0, 0.0], 1.75, 0.5, cam)
        assert box is not None
        assert 0.0 < box[0] < box[2] < 1.0 and 0.0 < box[1] < box[3] < 1.0


@pytest.mark.parametrize("kw", [dict(cameras=1), dict(agents=0), dict(dropout=1.0), dict(dropout=-0.1),
                                dict(noise=-1.0), dict(appearance="striped"), dict(frames=0)])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        generate_scene(small_config(**kw), seed=0)


def test_same_seed_is_bit_identical():
    a = generate_scene(small_config(appearance="per-identity"), seed=4)
    b = generate_scene(small_config(appearance="per-identity"), seed=4)
    c = generate_scene(small_config(appearance="per-identity"), seed=5)
    assert a == b
    assert a != c


def test_noiseless_scene_shows_every_projectable_agent():
    cfg = small_config(noise=0.0, dropout=0.0)
    ds = generate_scene(cfg, seed=1)
    cams = ring_cameras(cfg)
    for p in ds.frame_ids:
        for c, cam in enumerate(cams):
            seen = {d.identity: d.box for d in ds.view(p, c)}
            for track in ds.tracks:
                box = project_agent(track.positions[p], track.height, track.width, cam)
                if box is None:
                    assert track.identity not in seen
                else:
                    assert seen[track.identity] == pytest.approx(box, abs=0.0)


def test_mean_visible_count_matches_dropout():
    cfg = SceneConfig()
    ds = generate_scene(cfg, seed=0)
    counts = [len(ds.view(p, c)) for p in ds.frame_ids for c in range(cfg.cameras)]
    expected = cfg.agents * (1.0 - cfg.dropout)
    assert abs(np.mean(counts) - expected) <= 0.05 * expected


def test_identities_unique_per_view_and_boxes_valid():
    ds = generate_scene(small_config(noise=0.02), seed=2)
    for p in ds.frame_ids:
        for c in range(ds.cameras):
            ids = [d.identity for d in ds.view(p, c)]
            assert len(ids) == len(set(ids))
            for d in ds.view(p, c):
                x_l, y_l, x_r, y_r = d.box
                assert 0.0 <= x_l < x_r <= 1.0 and 0.0 <= y_l < y_r <= 1.0


def test_tracks_are_speed_capped_and_move():
    cfg = SceneConfig()
    ds = generate_scene(cfg, seed=3)
    for track in ds.tracks:
        step = np.linalg.norm(np.diff(track.positions, axis=0), axis=1)
        assert step.max() <= cfg.max_speed / cfg.fps + 1e-12
        assert np.abs(track.positions).max() <= cfg.arena + 1e-12
    pos = np.stack([t.positions for t in ds.tracks])  # agents x frames x 2
    for gap in (5, 20):
        shift = np.linalg.norm(pos[:, gap:] - pos[:, :-gap], axis=2).mean(axis=0)
        assert shift.min() > 0.0


def test_appearance_modes():
    none = generate_scene(small_config(), seed=0)
    assert none.appearance_dim == 0 and all(d.appearance is None for d in none.detections)
    same = generate_scene(small_config(appearance="identical"), seed=0)
    assert len({d.appearance for d in same.detections}) == 1
    per = generate_scene(small_config(appearance="per-identity", appearance_noise=0.0), seed=0)
    by_id = {}
    for d in per.detections:
        by_id.setdefault(d.identity, set()).add(d.appearance)
    assert all(len(v) == 1 for v in by_id.values())
    assert len({next(iter(v)) for v in by_id.values()}) == len(by_id)


@pytest.mark.parametrize("mode", ["none", "per-identity"])
def test_dataset_round_trip(tmp_path, mode):
    ds = generate_scene(small_config(appearance=mode), seed=9)
    path = tmp_path / "scene.txt"
    write_dataset(ds, path)
    assert read_dataset(path) == ds


def test_round_trip_without_identities_and_with_offset(tmp_path):
    dets = [Detection(10, 0, (0.1, 0.2, 0.3, 0.4)), Detection(11, 1, (0.5, 0.5, 0.6, 0.9))]
    ds = Dataset(2, 480, 640, 5, 0, dets, first_frame=10)
    path = tmp_path / "ext.txt"
    write_dataset(ds, path)
    back = read_dataset(path)
    assert back == ds and not back.has_identities


def test_split_keeps_frame_numbers():
    ds = generate_scene(small_config(frames=50), seed=0)
    train, test = ds.split(0.1)
    assert (train.frames, test.frames, test.first_frame) == (45, 5, 45)
    assert len(train.detections) + len(test.detections) == len(ds.detections)
    assert all(d.frame >= 45 for d in test.detections)


@pytest.mark.parametrize("text, line", [
    ("# other v1 cameras=2\n", 1),
    ("# mvsync-dataset v1 cameras=2 height=4 width=4 frames=3\n", 1),
    ("# mvsync-dataset v1 cameras=2 height=4 width=4 frames=3 appearance_dim=0\n0 0 0.1 0.1 0.2\n", 2),
    ("# mvsync-dataset v1 cameras=2 height=4 width=4 frames=3 appearance_dim=0\n0 0 .1 .1 .2 .2\n0 5 .1 .1 .2 .2\n", 3),
    ("# mvsync-dataset v1 cameras=2 height=4 width=4 frames=3 appearance_dim=2\n0 0 .1 .1 .2 .2 1 0.5\n", 2),
])
def test_malformed_files_report_line(tmp_path, text, line):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(DatasetFormatError, match=f":{line}:"):
        read_dataset(path)
