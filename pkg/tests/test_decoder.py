import warnings

import numpy as np
import pytest

from mvsync import diffcore as dc
from mvsync.decoder import ViewDecoders, decode, init_decoders, reprojection_loss, reprojection_nodes
from mvsync.encoder import bind, encode_nodes, init_params
from mvsync.scene import Detection


def test_zero_weights_return_bias():
    dec = ViewDecoders([np.zeros((4, 5))], [np.array([[0.1, 0.2, 0.3, 0.4]])])
    v_l, v_r = decode(np.arange(5.0), 0, dec)
    assert v_l.tolist() == [0.1, 0.2] and v_r.tolist() == [0.3, 0.4]


def test_zero_feature_returns_initial_bias():
    dec = init_decoders(cameras=2, feature_dim=6, seed=0)
    v_l, v_r = decode(np.zeros(6), 1, dec)
    assert v_l.tolist() == [0.5, 0.5] and v_r.tolist() == [0.5, 0.5]


def test_decode_matches_scalar_loop():
    dec = init_decoders(cameras=3, feature_dim=4, seed=5)
    f = np.array([0.3, -1.0, 2.0, 0.5])
    v_l, v_r = decode(f, 2, dec)
    w, b = dec.weights[2], dec.biases[2][0]
    expect = [sum(w[r, k] * f[k] for k in range(4)) + b[r] for r in range(4)]
    np.testing.assert_allclose([*v_l, *v_r], expect, rtol=1e-12)


def test_decoder_is_linear():
    dec = init_decoders(cameras=1, feature_dim=5, seed=1)
    rng = np.random.default_rng(0)
    f, g = rng.normal(size=5), rng.normal(size=5)
    out = lambda x: np.concatenate(decode(x, 0, dec))
    np.testing.assert_allclose(out(f + g) - out(np.zeros(5)), (out(f) - out(np.zeros(5))) + (out(g) - out(np.zeros(5))),
                               atol=1e-12)


def test_decode_camera_out_of_range():
    with pytest.raises(IndexError):
        decode(np.zeros(3), 2, init_decoders(cameras=2, feature_dim=3))


def test_reprojection_loss_hand_value():
    # W = 0: estimate is the bias, so each L1 term is a mean of absolute corner errors.
    dec = ViewDecoders([np.zeros((4, 3))], [np.array([[0.5, 0.5, 0.5, 0.5]])])
    feats = dc.const(np.ones((2, 3)))
    boxes = np.array([[0.3, 0.5, 0.5, 0.7], [0.5, 0.5, 0.5, 0.5]])
    nodes = {k: dc.leaf(v) for k, v in dec.tensors().items()}
    loss = reprojection_nodes(nodes, feats, boxes, [0, 0])
    # First box: L1(v_l) = (0.2 + 0) / 2, L1(v_r) = (0 + 0.2) / 2, so 0.2; second box 0.
    assert loss.item() == pytest.approx(0.1, abs=1e-12)


def test_reprojection_loss_matches_scalar_recomputation():
    enc = init_params(cameras=2, n_freqs=4, embed_dim=3, out_dim=5, hidden=(4,), seed=2)
    dec = init_decoders(cameras=2, feature_dim=5, seed=3)
    rng = np.random.default_rng(1)
    dets = [Detection(0, int(c), tuple(rng.uniform(0, 1, 4))) for c in (0, 1, 1)]
    loss, empty = reprojection_loss(dets, enc.tensors(), dec)
    assert not empty
    feats = encode_nodes(bind(enc.tensors()), np.array([d.box for d in dets]), [d.camera for d in dets]).value
    total = 0.0
    for d, f in zip(dets, feats):
        v_l, v_r = decode(f, d.camera, dec)
        total += np.abs(v_l - d.box[:2]).mean() + np.abs(v_r - d.box[2:]).mean()
    assert loss.item() == pytest.approx(total / 3, rel=1e-12)


def test_reprojection_loss_empty_frame_warns():
    enc = init_params(cameras=1, n_freqs=2, embed_dim=2, out_dim=3, hidden=(2,), seed=0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        loss, empty = reprojection_loss([], enc.tensors(), init_decoders(1, 3))
    assert empty and loss.item() == 0.0
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)


def test_reprojection_gradient_check():
    enc = init_params(cameras=2, n_freqs=3, embed_dim=2, out_dim=4, hidden=(3,), seed=7)
    dec = init_decoders(cameras=2, feature_dim=4, seed=8)
    tensors = {**enc.tensors(), **dec.tensors()}
    names = list(tensors)
    boxes = np.array([[0.1, 0.2, 0.3, 0.6], [0.6, 0.1, 0.7, 0.5], [0.4, 0.4, 0.5, 0.8]])
    cams = [0, 1, 0]

    def build(nodes):
        named = dict(zip(names, nodes))
        return reprojection_nodes(named, encode_nodes(named, boxes, cams), boxes, cams)

    rep = dc.gradient_check(build, list(tensors.values()), step=1e-5, tol=1e-4)
    assert rep["passed"], rep["max_rel_error"]
