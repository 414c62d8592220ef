import math

import numpy as np
import pytest

from mvsync import diffcore as dc
from mvsync.association import DataError
from mvsync.encoder import (
    EncoderParams,
    bind,
    encode,
    encode_batch,
    encode_nodes,
    init_params,
    positional_encode,
)
from mvsync.scene import Detection


@pytest.fixture(scope="module")
def params():
    return init_params(cameras=3, n_freqs=8, embed_dim=5, out_dim=7, hidden=(6,), seed=0)


def test_positional_encoding_of_origin_alternates_zero_one(params):
    out = positional_encode([0.0, 0.0], params)
    assert np.array_equal(out, np.tile([0.0, 1.0], 8))


def test_positional_encoding_matches_scalar_formula(params):
    v = (0.3, 0.8)
    out = positional_encode(v, params)
    for j, b in enumerate(params.freqs):
        f = 2.0 * math.pi * (b[0] * v[0] + b[1] * v[1])
        assert out[2 * j] == pytest.approx(math.sin(f), abs=1e-12)
        assert out[2 * j + 1] == pytest.approx(math.cos(f), abs=1e-12)


def test_positional_encoding_lies_on_sphere(params):
    rng = np.random.default_rng(1)
    for v in rng.uniform(0, 1, size=(10, 2)):
        assert np.linalg.norm(positional_encode(v, params)) == pytest.approx(math.sqrt(8), rel=1e-12)


def test_default_dimensions_chain():
    p = init_params(cameras=2, seed=3)
    assert p.freqs.shape == (128, 2)
    assert p.cam_embed.shape == (2, 64)
    assert p.weights[0].shape == (4 * 128 + 64, 256)  # 576 inputs
    assert p.block_spec == [256, 256, 256]
    assert encode((0.1, 0.2, 0.3, 0.6), 1, p).shape == (256,)


def test_initialisation_statistics():
    p = init_params(cameras=4, n_freqs=512, embed_dim=256, out_dim=64, hidden=(128,), seed=0)
    assert abs(p.freqs.mean()) < 0.1 and abs(p.freqs.std() - 1.0) < 0.1
    assert abs(p.cam_embed.std() - 0.1) < 0.01
    for w in p.weights:
        assert np.abs(w).max() <= math.sqrt(6.0 / sum(w.shape))
    assert all(np.array_equal(g, np.ones_like(g)) for g in p.gains)
    assert all(np.array_equal(b, np.zeros_like(b)) for b in p.biases)
    q = init_params(cameras=4, n_freqs=512, embed_dim=256, out_dim=64, hidden=(128,), seed=0)
    assert all(np.array_equal(a, b) for a, b in zip(p.tensors().values(), q.tensors().values()))


def test_identical_boxes_identical_features(params):
    a = encode((0.2, 0.3, 0.25, 0.5), 1, params)
    b = encode((0.2, 0.3, 0.25, 0.5), 1, params)
    assert np.array_equal(a, b)


def test_camera_index_changes_features(params):
    box = (0.2, 0.3, 0.25, 0.5)
    assert not np.allclose(encode(box, 0, params), encode(box, 1, params))


def test_camera_out_of_range(params):
    with pytest.raises(IndexError):
        encode((0.2, 0.3, 0.25, 0.5), 3, params)
    with pytest.raises(IndexError):
        encode_nodes(bind(params.tensors()), np.zeros((1, 4)), [-1])


def test_batch_is_permutation_equivariant(params):
    rng = np.random.default_rng(2)
    boxes = rng.uniform(0, 1, size=(6, 4))
    cams = rng.integers(0, 3, size=6)
    perm = rng.permutation(6)
    nodes = bind(params.tensors())
    out = encode_nodes(nodes, boxes, cams).value
    shuffled = encode_nodes(nodes, boxes[perm], cams[perm]).value
    np.testing.assert_allclose(shuffled, out[perm], rtol=0, atol=1e-12)
    for k in range(6):
        np.testing.assert_allclose(encode(boxes[k], int(cams[k]), params), out[k], atol=1e-12)


def test_encode_batch_passes_appearance(params):
    dets = [Detection(0, 0, (0.1, 0.1, 0.2, 0.4), 0, (1.0, 2.0)), Detection(0, 2, (0.5, 0.1, 0.6, 0.4), 1, (3.0, 4.0))]
    out = encode_batch(dets, params)
    assert [f.appearance.tolist() for f in out] == [[1.0, 2.0], [3.0, 4.0]]
    assert encode_batch([], params) == []
    ragged = [dets[0], Detection(0, 1, (0.1, 0.1, 0.2, 0.4), 2, None)]
    with pytest.raises(DataError):
        encode_batch(ragged, params)


def test_params_tensor_round_trip(params):
    again = EncoderParams.from_tensors(params.tensors())
    assert again.tensors().keys() == params.tensors().keys()
    assert all(np.array_equal(a, b) for a, b in zip(again.tensors().values(), params.tensors().values()))


def test_gradient_wrt_all_parameters_and_corners(params):
    rng = np.random.default_rng(4)
    boxes = rng.uniform(0, 1, size=(3, 4))
    cams = [0, 2, 1]
    names = list(params.tensors())

    def build(nodes):
        named = dict(zip(names, nodes[:-1]))
        return dc.sum_all(dc.row_distances(encode_nodes(named, nodes[-1], cams), dc.const(np.ones((3, 7)))))

    rep = dc.gradient_check(build, [*params.tensors().values(), boxes], step=1e-5, tol=1e-4)
    assert rep["passed"], rep["max_rel_error"]
