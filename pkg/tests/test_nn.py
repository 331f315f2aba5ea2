import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfspeckle.dataio import BadMagic, ChecksumError, TruncatedStream, VersionMismatch
from mmfspeckle.nn import layers as L
from mmfspeckle.nn.checkpoint import ShapeMismatch, decode_params, encode_params, load_model, save_model
from mmfspeckle.nn.classifier import Classifier, classifier_predict, classifier_train
from mmfspeckle.nn.optim import AdamState, NonFiniteGradient, adam_update, lr_schedule
from mmfspeckle.nn.unet import UNet, binarize_output

from gradcheck import layer_suite


@pytest.mark.parametrize("layer,shape,err", layer_suite(1), ids=lambda v: str(v) if isinstance(v, str) else None)
def test_layer_gradients(layer, shape, err):
    assert err < 1e-4


def test_conv_identity_and_bias(rng):
    x = rng.standard_normal((2, 1, 5, 4))
    y, _ = L.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(y, x)
    y, _ = L.conv2d_forward(np.zeros((1, 2, 3, 3)), rng.standard_normal((4, 2, 3, 3)), np.arange(4.0))
    assert np.array_equal(y, np.broadcast_to(np.arange(4.0)[None, :, None, None], y.shape))


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((1, 2, 4, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((1, 3, 4, 5))
    for o in range(3):
        for i in range(4):
            for j in range(5):
                want[0, o, i, j] = (xp[0, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
    assert np.allclose(L.conv2d_forward(x, w, b)[0], want, atol=1e-12)


def test_conv_shape_errors(rng):
    with pytest.raises(ValueError):
        L.conv2d_forward(rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError):
        L.conv2d_forward(rng.standard_normal((1, 1, 4, 4)), rng.standard_normal((1, 1, 2, 2)), np.zeros(1))
    with pytest.raises(ValueError):
        L.conv2d_forward(rng.standard_normal((1, 4, 4)), rng.standard_normal((1, 1, 3, 3)), np.zeros(1))


def test_relu_values():
    y, mask = L.relu_forward(np.array([-1.0, 0.0, 2.0]))
    assert y.tolist() == [0, 0, 2]
    assert L.relu_backward(np.ones(3), mask).tolist() == [0, 0, 1]


def test_maxpool_ties_and_max():
    x = np.ones((1, 1, 2, 2))
    y, cache = L.maxpool2_forward(x)
    assert y.item() == 1
    assert L.maxpool2_backward(np.ones((1, 1, 1, 1)), cache)[0, 0].tolist() == [[1, 0], [0, 0]]
    x = np.array([[[[1, 5], [3, 2]]]], dtype=float)
    y, cache = L.maxpool2_forward(x)
    assert y.item() == 5
    assert L.maxpool2_backward(np.ones((1, 1, 1, 1)), cache)[0, 0].tolist() == [[0, 1], [0, 0]]
    with pytest.raises(ValueError):
        L.maxpool2_forward(np.ones((1, 1, 3, 2)))


def test_upsample_values():
    y, s = L.upsample2_forward(np.full((1, 1, 1, 1), 7.0))
    assert y.tolist() == [[[[7, 7], [7, 7]]]]
    assert L.upsample2_backward(np.ones((1, 1, 2, 2)), s).item() == 4


def test_concat_split(rng):
    a, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 5, 4, 4))
    y, split = L.concat_forward(a, b)
    assert y.shape[1] == 8
    da, db = L.concat_backward(y, split)
    assert np.array_equal(da, a) and np.array_equal(db, b)
    with pytest.raises(ValueError):
        L.concat_forward(a, rng.standard_normal((2, 1, 3, 4)))


def test_bce_values(rng):
    t = (rng.random((2, 1, 3, 3)) < 0.5).astype(float)
    assert L.bce_forward(t, t)[0] <= -np.log(1 - 1e-6) + 1e-12
    assert L.bce_forward(np.full_like(t, 0.5), t)[0] == pytest.approx(np.log(2))
    p = rng.uniform(0.01, 0.99, t.shape)
    direct = -np.mean([ti * np.log(pi) + (1 - ti) * np.log(1 - pi) for pi, ti in zip(p.ravel(), t.ravel())])
    assert L.bce_forward(p, t)[0] == pytest.approx(direct, rel=1e-12)
    # outside the clamp the gradient is zero, and the loss stays finite
    loss, cache = L.bce_forward(np.array([-0.5, 1.5]), np.array([1.0, 0.0]))
    assert np.isfinite(loss) and not L.bce_backward(cache).any()
    with pytest.raises(ValueError):
        L.bce_forward(np.ones(3), np.ones(4))


def test_binarize_output():
    r = np.array([0.49, 0.5, 0.99, 0.0])
    assert binarize_output(r).tolist() == [0, 1, 1, 0]
    b = binarize_output(r)
    assert np.array_equal(binarize_output(b), b)


def test_lr_schedule():
    assert lr_schedule(0) == 1e-4
    assert lr_schedule(9) == 1e-4
    assert lr_schedule(10) == 5e-5
    assert lr_schedule(25) == 2.5e-5
    with pytest.raises(ValueError):
        lr_schedule(-1)


def test_adam_first_step_is_signed_lr():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, -4.0, 1e3])}
    adam_update(AdamState(lr=1e-3), p, g)
    assert np.allclose(p["w"] - np.array([1.0, -2.0, 3.0]), -1e-3 * np.sign(g["w"]), rtol=1e-6)


def test_adam_zero_gradient_and_errors():
    p = {"w": np.array([1.0, 2.0])}
    adam_update(AdamState(), p, {"w": np.zeros(2)})
    assert p["w"].tolist() == [1.0, 2.0]
    with pytest.raises(NonFiniteGradient):
        adam_update(AdamState(), p, {"w": np.array([np.nan, 0.0])})


def test_adam_scalar_descent():
    p = {"w": np.array([1.0])}
    state = AdamState(lr=0.1)
    for _ in range(100):
        adam_update(state, p, {"w": 2 * p["w"]})
    assert abs(p["w"][0]) < 0.5


def test_unet_shapes_and_param_bound():
    net = UNet((8, 16, 32), "relu", rng=np.random.default_rng(0))
    y = net.forward(np.zeros((2, 1, 32, 32), np.float32))
    assert y.shape == (2, 1, 32, 32)
    want = sum(p.size for p in net.params.values())
    assert net.n_params() == want < 2_000_000
    assert UNet((8, 16, 32, 64), "sigmoid").n_params() < 2_000_000
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 1, 30, 32), np.float32))
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 2, 32, 32), np.float32))
    with pytest.raises(ValueError):
        UNet((8,), "relu")
    with pytest.raises(ValueError):
        UNet((8, 16), "tanh")


def test_unet_zero_head_gives_zero_output():
    net = UNet((4, 8), "relu", rng=np.random.default_rng(0))
    net.params["head.relu.w"][:] = 0
    net.params["head.relu.b"][:] = 0
    out = net.forward(np.random.default_rng(1).standard_normal((1, 1, 8, 8)).astype(np.float32))
    assert not out.any()
    loss, _ = net.loss_and_grad(np.zeros((1, 1, 8, 8), np.float32), np.ones((1, 1, 8, 8), np.float32))
    assert loss == pytest.approx(-np.log(1e-6), rel=1e-5)


@pytest.mark.parametrize("head", ["relu", "sigmoid"])
def test_unet_descent_step(head):
    rng = np.random.default_rng(2)
    net = UNet((4, 8), head, rng=rng)
    x = rng.standard_normal((1, 1, 8, 8)).astype(np.float32)
    t = (rng.random((1, 1, 8, 8)) < 0.3).astype(np.float32)
    before, grads = net.loss_and_grad(x, t)
    adam_update(AdamState(lr=1e-4), net.params, grads)
    assert net.loss_and_grad(x, t)[0] < before


def test_unet_forward_deterministic():
    x = np.random.default_rng(3).standard_normal((2, 1, 8, 8)).astype(np.float32)
    a = UNet((4, 8), "relu", rng=np.random.default_rng(5))
    b = UNet((4, 8), "relu", rng=np.random.default_rng(5))
    assert a.forward(x).tobytes() == b.forward(x).tobytes() == a.forward(x).tobytes()


def test_classifier_probabilities(rng):
    clf = Classifier((8, 8), rng=rng)
    p = clf.probabilities(rng.random((5, 8, 8)))
    assert p.shape == (5, 10) and np.allclose(p.sum(axis=1), 1, atol=1e-6)
    with pytest.raises(ValueError):
        clf.predict(np.zeros((1, 6, 6)))
    with pytest.raises(ValueError):
        classifier_train(np.zeros((2, 8, 8)), [3, 11], epochs=1)


def test_classifier_constant_input_learns_prior():
    rng = np.random.default_rng(4)
    labels = rng.choice(10, 300, p=[0.55] + [0.05] * 9)
    clf = classifier_train(np.ones((300, 8, 8)), labels, epochs=20, rng=rng, lr=1e-2)
    pred = clf.predict(np.ones((50, 8, 8)))
    assert np.all(pred == 0)
    assert np.mean(pred == labels[:50]) == pytest.approx(np.mean(labels[:50] == 0))


def test_classifier_learns_clean_digits():
    from mmfspeckle.dataio import digit_arrays, synth_digits, upscale_targets

    x, y = digit_arrays(synth_digits(np.random.default_rng(6), 1500, (16, 16)))
    xt, yt = digit_arrays(synth_digits(np.random.default_rng(7), 300, (16, 16)))
    clf = classifier_train(upscale_targets(x, (32, 32)), y, epochs=6, rng=np.random.default_rng(8))
    acc = np.mean(clf.predict(upscale_targets(xt, (32, 32))) == yt)
    assert acc >= 0.90
    assert classifier_predict(clf, upscale_targets(xt[:1], (32, 32))[0]) == clf.predict(upscale_targets(xt[:1], (32, 32)))[0]


def random_params(rng, n_layers):
    out = {}
    for i in range(n_layers):
        rank = int(rng.integers(0, 5))
        shape = tuple(int(s) for s in rng.integers(1, 4, rank))
        out[f"layer{i}.{'é' * (i % 2)}w"] = rng.standard_normal(shape).astype(np.float32)
    return out


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 6))
def test_checkpoint_roundtrip(seed, n):
    params = random_params(np.random.default_rng(seed), n)
    data = encode_params(params)
    back = decode_params(data)
    assert list(back) == list(params)
    assert all(back[k].shape == v.shape and back[k].tobytes() == v.tobytes() for k, v in params.items())
    assert encode_params(back) == data


@pytest.mark.parametrize("head", ["relu", "sigmoid"])
def test_save_load_unet(tmp_path, head):
    net = UNet((4, 8, 16), head, rng=np.random.default_rng(9))
    save_model(tmp_path / "m.mmfc", net)
    back = load_model(tmp_path / "m.mmfc")
    assert back.channels == net.channels and back.head == head
    x = np.random.default_rng(10).standard_normal((2, 1, 16, 16)).astype(np.float32)
    assert back.forward(x).tobytes() == net.forward(x).tobytes()


def test_save_load_classifier(tmp_path):
    clf = Classifier((12, 12), rng=np.random.default_rng(1))
    save_model(tmp_path / "c.mmfc", clf)
    back = load_model(tmp_path / "c.mmfc")
    x = np.random.default_rng(2).random((3, 12, 12))
    assert np.array_equal(back.probabilities(x), clf.probabilities(x))


def test_checkpoint_errors(tmp_path):
    data = encode_params(UNet((4, 8), rng=np.random.default_rng(0)).params)
    with pytest.raises(BadMagic):
        decode_params(b"NOPE" + data[4:])
    with pytest.raises(VersionMismatch):
        decode_params(data[:4] + (9).to_bytes(4, "little") + data[8:])
    with pytest.raises(TruncatedStream):
        decode_params(data[:10])
    bad = bytearray(data)
    bad[30] ^= 1
    with pytest.raises(ChecksumError):
        decode_params(bytes(bad))
    params = UNet((4, 8), rng=np.random.default_rng(0)).params
    params["mid.conv1.w"] = params["mid.conv1.w"][:, :2]
    path = tmp_path / "bad.mmfc"
    path.write_bytes(encode_params(params))
    with pytest.raises(ShapeMismatch):
        load_model(path)
    path.write_bytes(encode_params({"x": np.zeros(2, np.float32)}))
    with pytest.raises(ShapeMismatch):
        load_model(path)
