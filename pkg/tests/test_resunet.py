import numpy as np
import pytest

from scantraj.autolabel import LabeledDataset
from scantraj.errors import DivergenceDetected, ShapeMismatch, ValidationError
from scantraj.resunet import (DecoderBlock, EncoderBlock, NetConfig, ResUNetPlus, forward,
                              load_checkpoint, loss_and_grads, save_checkpoint, segment, train)
from scantraj.resunet.layers import (BatchNorm, Context, Conv, ConvTranspose, ReLU, Sequential,
                                     softmax_cross_entropy)
from scantraj.resunet.train import inverse_frequency_weights, to_input

from gradcheck import check_layer, numeric_grad, perturbed_params, rel_err

TOL = 1e-6


def _assert_ok(errors):
    bad = {k: v for k, v in errors.items() if v >= TOL}
    assert not bad, bad


@pytest.mark.parametrize("layer", [
    Conv("c3", 3, 2, 3), Conv("c3s2", 2, 3, 3, stride=2), Conv("c1", 3, 2, 1),
    Conv("c1s2", 2, 2, 1, stride=2, bias=False), ConvTranspose("ct", 3, 2, 2),
    ConvTranspose("ct4", 2, 1, 4), BatchNorm("bn", 3), ReLU(),
    Sequential(Conv("a", 2, 3, 3, bias=False), BatchNorm("b", 3), ReLU()),
], ids=lambda l: type(l).__name__ + getattr(l, "name", ""))
def test_layer_gradients(rng, layer):
    cin = getattr(layer, "cin", getattr(layer, "c", 2))
    if isinstance(layer, ReLU):
        cin = 3
    P = perturbed_params(layer, rng)
    x = rng.standard_normal((2, cin, 4, 4))
    _assert_ok(check_layer(layer, P, x, rng))


def test_batchnorm_eval_gradient(rng):
    from gradcheck import eval_buffers

    bn = BatchNorm("bn", 3)
    P = perturbed_params(bn, rng)
    buf = eval_buffers(bn, rng)
    x = rng.standard_normal((2, 3, 4, 4))
    R = rng.standard_normal(x.shape)
    y, cache = bn.forward(P, x, Context(False, buf))
    G = {}
    dx = bn.backward(P, G, cache, R)
    f = lambda: float(np.sum(bn.forward(P, x, Context(False, buf))[0] * R))  # noqa: E731
    assert rel_err(dx, numeric_grad(f, x)) < TOL
    assert rel_err(G["bn.gamma"], numeric_grad(f, P["bn.gamma"])) < TOL


@pytest.mark.parametrize("cin,cout,stride", [(3, 3, 1), (2, 3, 1), (2, 3, 2)])
def test_encoder_block_gradients(rng, cin, cout, stride):
    block = EncoderBlock("e", cin, cout, stride)
    P = perturbed_params(block, rng)
    _assert_ok(check_layer(block, P, rng.standard_normal((2, cin, 4, 4)), rng))


def test_decoder_block_gradients(rng):
    channels = (2, 3)
    dec = DecoderBlock("d", 1, 2, channels)
    P = perturbed_params(dec, rng)
    skip = rng.standard_normal((2, 2, 4, 4))
    deeper = [rng.standard_normal((2, 3, 2, 2))]
    bottom = rng.standard_normal((2, 6, 1, 1))
    out, cache = dec.forward(P, skip, deeper, bottom, Context(True))
    assert out.shape == (2, 2, 4, 4)
    R = rng.standard_normal(out.shape)
    f = lambda: float(np.sum(dec.forward(P, skip, deeper, bottom, Context(True))[0] * R))  # noqa
    G = {}
    dskip, ddeeper, dbottom = dec.backward(P, G, cache, R)
    assert rel_err(dskip, numeric_grad(f, skip)) < TOL
    assert rel_err(ddeeper[0], numeric_grad(f, deeper[0])) < TOL
    assert rel_err(dbottom, numeric_grad(f, bottom)) < TOL
    for name, p in P.items():
        assert rel_err(G[name], numeric_grad(f, p)) < TOL, name


def test_decoder_concatenation_width():
    dec = DecoderBlock("d", 1, 3, (4, 8, 16))
    assert dec.branch_channels == [4, 4, 4, 4]
    assert dec.fuse.layers[0].cin == 16


def test_deepest_decoder_zero_in_zero_out(rng):
    dec = DecoderBlock("d", 2, 2, (2, 3))
    P = {}
    for sub in dec.walk():
        if sub.param_shapes():
            sub.init(rng, P, np.float64)
    out, _ = dec.forward(P, np.zeros((1, 3, 2, 2)), [], np.zeros((1, 6, 1, 1)), Context(False))
    assert not out.any()


def test_encoder_zero_input_zero_output(rng):
    block = EncoderBlock("e", 3, 3)
    P = {}
    for sub in block.walk():
        if sub.param_shapes():
            sub.init(rng, P, np.float64)
    buf = {k: v for sub in block.walk() for k, v in sub.buffer_init().items()}
    out, _ = block.forward(P, np.zeros((2, 3, 4, 4)), Context(False, buf))
    assert out.shape == (2, 3, 4, 4) and not out.any()


def test_softmax_cross_entropy_gradient(rng):
    logits = rng.standard_normal((2, 2, 3, 3))
    t = rng.integers(0, 2, (2, 3, 3))
    w = (0.7, 2.5)
    loss, g = softmax_cross_entropy(logits, t, w)
    f = lambda: softmax_cross_entropy(logits, t, w)[0]  # noqa: E731
    assert rel_err(g, numeric_grad(f, logits)) < TOL
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    pw = np.take(w, t)
    want = -np.sum(pw * np.log(np.take_along_axis(p, t[:, None], 1)[:, 0])) / pw.sum()
    assert loss == pytest.approx(want, rel=1e-12)


def test_full_network_gradient_subset(rng):
    cfg = NetConfig(levels=2, channels=(2, 3), input_tile=8, dtype="float64")
    model = ResUNetPlus(cfg)
    net = model.init_params(1)
    for k, v in net.params.items():
        net.params[k] = v + rng.normal(0.0, 0.3, v.shape)
    x = rng.standard_normal((3, 3, 8, 8))
    t = rng.integers(0, 2, (3, 8, 8))
    loss, grads, dx = loss_and_grads(model, net, x, t, (1.0, 2.0), update_stats=False)

    def f():
        return loss_and_grads(model, net, x, t, (1.0, 2.0), update_stats=False)[0]

    for name in sorted(net.params)[::3]:
        p = net.params[name]
        entries = [tuple(rng.integers(0, s) for s in p.shape) for _ in range(3)]
        num = numeric_grad(f, p, entries)
        sel = tuple(np.array(entries).T)
        assert rel_err(grads[name][sel], num[sel]) < TOL, name
    entries = [tuple(rng.integers(0, s) for s in x.shape) for _ in range(6)]
    sel = tuple(np.array(entries).T)
    assert rel_err(dx[sel], numeric_grad(f, x, entries)[sel]) < TOL


@pytest.mark.parametrize("levels,channels,tile", [(2, (4, 8), 16), (3, (4, 6, 8), 16),
                                                  (4, (2, 3, 4, 5), 32)])
def test_shape_algebra(rng, levels, channels, tile):
    cfg = NetConfig(levels=levels, channels=channels, input_tile=tile, dtype="float64")
    model = ResUNetPlus(cfg)
    net = model.init_params(0)
    x = rng.random((2, 3, tile, tile))
    logits, cache = model.forward(net.params, x, Context(True, net.buffers))
    assert logits.shape == (2, 2, tile, tile) and np.isfinite(logits).all()
    enc_shapes = cache[4]
    for i, s in enumerate(enc_shapes):
        assert s == (2, channels[i], tile >> i, tile >> i)
    assert cache[5] == (2, 2 * channels[-1], tile >> levels, tile >> levels)


def test_eval_mode_is_batch_independent(rng):
    cfg = NetConfig(levels=2, channels=(4, 8), input_tile=16, dtype="float64")
    model = ResUNetPlus(cfg)
    net = model.init_params(3)
    a, b = rng.random((2, 3, 16, 16))
    out = forward(net, cfg, np.stack([a, a, b]), "eval", model)
    assert np.array_equal(out[0], out[1])
    swapped = forward(net, cfg, np.stack([b, a, a]), "eval", model)
    assert np.allclose(swapped[0], out[2], rtol=0, atol=1e-12)
    assert np.allclose(swapped[1], out[0], rtol=0, atol=1e-12)


def test_train_mode_updates_running_stats(rng):
    cfg = NetConfig(levels=2, channels=(4, 8), input_tile=16, dtype="float64")
    model = ResUNetPlus(cfg)
    net = model.init_params(0)
    before = {k: v.copy() for k, v in net.buffers.items()}
    forward(net, cfg, rng.random((2, 3, 16, 16)), "train", model)
    assert all(not np.array_equal(before[k], net.buffers[k]) for k in before)
    assert all((v > 0).all() for k, v in net.buffers.items() if k.endswith("running_var"))


def test_forward_rejects_wrong_tile(rng):
    cfg = NetConfig(levels=2, channels=(4, 8), input_tile=16)
    with pytest.raises(ShapeMismatch):
        forward(ResUNetPlus(cfg).init_params(0), cfg, rng.random((1, 3, 8, 8)))


def test_config_invariants():
    with pytest.raises(ValidationError):
        NetConfig(levels=1, channels=(4,))
    with pytest.raises(ValidationError):
        NetConfig(channels=(8, 8, 16))
    with pytest.raises(ValidationError):
        NetConfig(input_tile=60)
    cfg = NetConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.max_epochs) == (0.05, 3, 10)
    assert NetConfig.from_json(cfg.to_json()) == cfg


def test_conv_translation_equivariance(rng):
    """A stride-1 circularly padded input shifted by s shifts interior outputs by s."""
    conv = Conv("c", 2, 3, 3)
    P = perturbed_params(conv, rng)
    base = rng.random((1, 2, 6, 6))
    x = np.tile(base, (1, 1, 3, 3))
    y, _ = conv.forward(P, x, Context(False))
    ys, _ = conv.forward(P, np.roll(x, (2, 1), axis=(2, 3)), Context(False))
    inner = (slice(None), slice(None), slice(4, 14), slice(4, 14))
    assert np.allclose(np.roll(y, (2, 1), axis=(2, 3))[inner], ys[inner], atol=1e-12)


def _single_pair(rng, tile=16):
    img = np.zeros((tile, tile, 3), dtype=np.uint8) + 80
    mask = np.zeros((tile, tile), dtype=np.uint8)
    for c in range(tile):
        r = (c * 3) // 4
        img[r:r + 3, c] = (230, 200, 40)
        mask[r:r + 3, c] = 1
    return img, mask


def test_zero_learning_rate_leaves_params(rng):
    img, mask = _single_pair(rng)
    ds = LabeledDataset([img, img], [mask, mask], ["train", "train"], tile=16)
    cfg = NetConfig(levels=2, channels=(4, 8), input_tile=16, learning_rate=0.0, max_epochs=2)
    net = ResUNetPlus(cfg).init_params(0)
    out = train(net, cfg, ds).net
    assert all(np.array_equal(net.params[k], out.params[k]) for k in net.params)


def test_training_is_deterministic(rng):
    img, mask = _single_pair(rng)
    ds = LabeledDataset([img, img[::-1].copy(), img], [mask, mask[::-1].copy(), mask],
                        ["train", "train", "validation"], tile=16)
    cfg = NetConfig(levels=2, channels=(4, 8), input_tile=16, max_epochs=3, batch_size=2)
    a = train(ResUNetPlus(cfg).init_params(0), cfg, ds)
    b = train(ResUNetPlus(cfg).init_params(0), cfg, ds)
    assert a.history == b.history and len(a.history) == 3
    assert all(np.array_equal(a.net.params[k], b.net.params[k]) for k in a.net.params)


def test_divergence_detected(rng):
    img, mask = _single_pair(rng)
    ds = LabeledDataset([img], [mask], ["train"], tile=16)
    cfg = NetConfig(levels=2, channels=(4, 8), input_tile=16, learning_rate=1e30,
                    max_epochs=50, batch_size=1)
    with pytest.raises(DivergenceDetected) as info, np.errstate(all="ignore"):
        train(ResUNetPlus(cfg).init_params(0), cfg, ds)
    assert isinstance(info.value.history, list)


def test_inverse_frequency_weights():
    masks = [np.array([[0, 0, 0, 1]])]
    assert inverse_frequency_weights(masks) == pytest.approx((4 / 6, 4 / 2))


def test_segment_single_tile_equals_forward(rng):
    cfg = NetConfig(levels=2, channels=(4, 8), input_tile=16)
    net = ResUNetPlus(cfg).init_params(5)
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    direct = forward(net, cfg, to_input(img, 3, cfg.dtype))[0].argmax(axis=0)
    mask = segment(net, cfg, img)
    assert mask.source == "predicted" and np.array_equal(mask.labels, direct)


def test_segment_background_bias_gives_empty_mask(rng):
    cfg = NetConfig(levels=2, channels=(4, 8), input_tile=16)
    net = ResUNetPlus(cfg).init_params(5)
    net.params["head.w"][:] = 0
    net.params["head.b"][:] = (5.0, -5.0)
    mask = segment(net, cfg, rng.integers(0, 256, (24, 40, 3), dtype=np.uint8))
    assert mask.shape == (24, 40) and not mask.labels.any()


def test_checkpoint_roundtrip(tmp_path):
    cfg = NetConfig(levels=2, channels=(4, 8), input_tile=16)
    net = ResUNetPlus(cfg).init_params(2)
    save_checkpoint(net, cfg, tmp_path / "m.runp")
    back, cfg2 = load_checkpoint(tmp_path / "m.runp")
    assert cfg2 == cfg
    assert all(np.array_equal(net.params[k], back.params[k]) for k in net.params)
    assert all(np.allclose(net.buffers[k], back.buffers[k]) for k in net.buffers)
    assert (tmp_path / "m.runp").read_bytes()[:4] == b"RUNP"
