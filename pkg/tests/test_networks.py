import numpy as np
import pytest

from forgemap import layers, networks
from forgemap.errors import ForgemapError, ShapeError


@pytest.fixture(scope="module")
def small_nets():
    rng = np.random.default_rng(0)
    det = networks.Detector((16, 32, 64, 128))
    unet = networks.CondUNet()
    proj = networks.CondProjectors(det, unet, "encoder-all", 32)
    fuse = networks.FusionHead((16, 32, 64, 128), "gating")
    params = {}
    for c in (det, unet, proj, fuse):
        params.update(c.init_params(rng))
    return det, unet, proj, fuse, params


def test_detector_stage_shapes(small_nets):
    det, _, _, _, params = small_nets
    x = np.random.default_rng(1).standard_normal((2, 3, 32, 32)).astype(np.float32)
    pyramid, logits = det.forward(x, params)
    shapes = [p.shape[1:] for p in pyramid]
    assert shapes == [(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]
    assert logits.shape == (2, 2)
    assert det.pyramid_shapes(32) == [(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]


def test_detector_forward_pure(small_nets):
    det, _, _, _, params = small_nets
    x = np.random.default_rng(2).standard_normal((1, 3, 32, 32)).astype(np.float32)
    p1, l1 = det.forward(x, params)
    p2, l2 = det.forward(x, params)
    assert np.array_equal(l1, l2)
    assert all(np.array_equal(a, b) for a, b in zip(p1, p2))


def test_projector_shapes_encoder_all(small_nets):
    det, unet, proj, _, params = small_nets
    x = np.random.default_rng(3).standard_normal((2, 3, 32, 32)).astype(np.float32)
    pyramid, _ = det.forward(x, params)
    conds = proj.forward(pyramid, params)
    assert set(conds) == {"enc1", "enc2", "enc3", "bottleneck"}
    want = unet.stage_shapes(32)
    for stage, tensor in conds.items():
        assert tensor.shape[1:] == want[stage]


def test_projector_final_stage_only():
    rng = np.random.default_rng(4)
    det = networks.Detector((16, 32, 64, 128))
    unet = networks.CondUNet()
    proj = networks.CondProjectors(det, unet, "final-stage-only", 32)
    params = det.init_params(rng)
    params.update(proj.init_params(rng))
    x = rng.standard_normal((1, 3, 32, 32)).astype(np.float32)
    pyramid, _ = det.forward(x, params)
    conds = proj.forward(pyramid, params)
    assert set(conds) == {"bottleneck"}


def test_projector_decoder_placement_shapes():
    rng = np.random.default_rng(5)
    det = networks.Detector((16, 32, 64, 128))
    unet = networks.CondUNet()
    proj = networks.CondProjectors(det, unet, "decoder", 32)
    params = det.init_params(rng)
    params.update(proj.init_params(rng))
    x = rng.standard_normal((1, 3, 32, 32)).astype(np.float32)
    pyramid, _ = det.forward(x, params)
    conds = proj.forward(pyramid, params)
    assert set(conds) == {"dec1", "dec2", "dec3", "bottleneck"}
    want = unet.stage_shapes(32)
    for stage, tensor in conds.items():
        assert tensor.shape[1:] == want[stage]


def test_zero_projector_weights_give_zero_conditions(small_nets):
    det, unet, proj, _, params = small_nets
    zeroed = dict(params)
    for k in params:
        if k.startswith("proj."):
            zeroed[k] = np.zeros_like(params[k])
    x = np.random.default_rng(6).standard_normal((1, 3, 32, 32)).astype(np.float32)
    pyramid, _ = det.forward(x, zeroed)
    conds = proj.forward(pyramid, zeroed)
    assert all(np.all(c == 0.0) for c in conds.values())
    # and therefore injection is a no-op
    xt = np.random.default_rng(7).standard_normal((1, 1, 32, 32)).astype(np.float32)
    t = np.array([5])
    a = unet.forward(xt, t, conds, zeroed)
    b = unet.forward(xt, t, None, zeroed)
    assert np.array_equal(a, b)


def test_unet_output_shape_sizes():
    rng = np.random.default_rng(8)
    for size in (32, 64):
        unet = networks.CondUNet()
        params = unet.init_params(rng)
        xt = rng.standard_normal((2, 1, size, size)).astype(np.float32)
        out = unet.forward(xt, np.array([1, 50]), None, params)
        assert out.shape == (2, 1, size, size)


def test_unet_distinct_timesteps_distinct_outputs(small_nets):
    _, unet, _, _, params = small_nets
    xt = np.random.default_rng(9).standard_normal((1, 1, 32, 32)).astype(np.float32)
    outs = [unet.forward(xt, np.array([t]), None, params) for t in (1, 10, 25, 50)]
    for i in range(len(outs)):
        for j in range(i + 1, len(outs)):
            assert not np.array_equal(outs[i], outs[j])


def test_unet_rejects_bad_condition_shape(small_nets):
    _, unet, _, _, params = small_nets
    xt = np.zeros((1, 1, 32, 32), np.float32)
    bad = {"enc1": np.zeros((1, 16, 8, 8), np.float32)}
    with pytest.raises(ShapeError):
        unet.forward(xt, np.array([1]), bad, params)
    with pytest.raises(ForgemapError):
        unet.forward(xt, np.array([1]), {"nope": np.zeros(1)}, params)


def _fusion_setup(mode, seed=10, c=8):
    rng = np.random.default_rng(seed)
    fuse = networks.FusionHead((2, 4, 4, c), mode)
    params = fuse.init_params(rng)
    f_art = rng.standard_normal((2, c, 2, 2)).astype(np.float32)
    f_det = rng.standard_normal((2, c, 2, 2)).astype(np.float32)
    return fuse, params, f_art, f_det


def test_gate_saturation_limits():
    fuse, params, f_art, f_det = _fusion_setup("gating")
    params = dict(params)
    params["fuse.gating.conv.weight"] = np.zeros_like(params["fuse.gating.conv.weight"])
    params["fuse.gating.conv.bias"] = np.full_like(params["fuse.gating.conv.bias"], 50.0)
    fused = networks.gate_fuse(f_art, f_det, "gating", params)
    np.testing.assert_allclose(fused, f_det, atol=1e-6)
    params["fuse.gating.conv.bias"] = np.full_like(params["fuse.gating.conv.bias"], -50.0)
    fused = networks.gate_fuse(f_art, f_det, "gating", params)
    np.testing.assert_allclose(fused, f_art, atol=1e-6)


def test_gating_convexity():
    fuse, params, f_art, f_det = _fusion_setup("gating", seed=11)
    fused = networks.gate_fuse(f_art, f_det, "gating", params)
    lo = np.minimum(f_art, f_det)
    hi = np.maximum(f_art, f_det)
    assert np.all(fused >= lo - 1e-6) and np.all(fused <= hi + 1e-6)


def test_addition_identity_and_hadamard():
    _, params, f_art, f_det = _fusion_setup("addition", seed=12)
    fused = networks.gate_fuse(np.zeros_like(f_art), f_det, "addition", params)
    assert np.array_equal(fused, f_det)
    fused = networks.gate_fuse(f_art, f_det, "hadamard", params)
    assert np.array_equal(fused, f_art * f_det)


def test_concat_mode_shape():
    _, params, f_art, f_det = _fusion_setup("concat", seed=13)
    fused = networks.gate_fuse(f_art, f_det, "concat", params)
    assert fused.shape == f_det.shape


def test_fusion_mode_validation():
    _, params, f_art, f_det = _fusion_setup("addition", seed=14)
    with pytest.raises(ForgemapError):
        networks.gate_fuse(f_art, f_det, "bogus", params)
    with pytest.raises(ShapeError):
        networks.gate_fuse(f_art[:, :4], f_det, "addition", params)


def test_classify_closed_form_and_gap_invariance():
    rng = np.random.default_rng(15)
    c = 6
    params = {"head.linear.weight": rng.standard_normal((2, c)).astype(np.float32),
              "head.linear.bias": rng.standard_normal(2).astype(np.float32)}
    const = np.full((1, c, 3, 3), 2.5, np.float32)
    logits = networks.classify(const, params, prefix="head")
    expected = params["head.linear.weight"] @ np.full(c, 2.5, np.float32) \
        + params["head.linear.bias"]
    np.testing.assert_allclose(logits[0], expected, rtol=1e-5)

    # zero weights -> bias
    zparams = {"head.linear.weight": np.zeros((2, c), np.float32),
               "head.linear.bias": np.array([0.3, -0.7], np.float32)}
    logits = networks.classify(const, zparams, prefix="head")
    np.testing.assert_allclose(logits[0], zparams["head.linear.bias"], atol=0)

    # spatial permutation invariance
    x = rng.standard_normal((1, c, 4, 4)).astype(np.float32)
    perm = rng.permutation(16)
    xp = x.reshape(1, c, 16)[:, :, perm].reshape(1, c, 4, 4)
    a = networks.classify(x, params, prefix="head")
    b = networks.classify(xp, params, prefix="head")
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_end_to_end_gradient_check():
    # detector -> projectors -> denoiser -> fusion -> classifier -> CE,
    # finite differences on sampled coordinates of every parameter tensor
    rng = np.random.default_rng(42)
    det = networks.Detector((4, 4, 6, 8))
    unet = networks.CondUNet((4, 4, 6, 8, 6, 4, 4), time_dim=8)
    proj = networks.CondProjectors(det, unet, "encoder-all", 16)
    fuse = networks.FusionHead((4, 4, 6, 8), "gating")
    params = {}
    for c in (det, unet, proj, fuse):
        params.update(c.init_params(rng))
    params = {k: v.astype(np.float64) for k, v in params.items()}
    img = rng.standard_normal((2, 3, 16, 16))
    xt = rng.standard_normal((2, 1, 16, 16))
    tt = np.array([2, 5])
    labels = np.array([0, 1])
    ce = layers.LayerSpec("softmax-cross-entropy")

    def loss_value():
        pyr, logits_det = det.forward(img, params)
        conds = proj.forward(pyr, params)
        eps = unet.forward(xt, tt, conds, params)
        logits = fuse.forward(eps, pyr[3], params)
        l1 = layers.forward(ce, logits, {"target": labels})
        l2 = layers.forward(ce, logits_det, {"target": labels})
        return float(l1 + 0.5 * l2)

    cache, grads = {}, {}
    pyr, logits_det = det.forward(img, params, cache)
    conds = proj.forward(pyr, params, cache)
    eps = unet.forward(xt, tt, conds, params, cache)
    logits = fuse.forward(eps, pyr[3], params, cache)
    d_logits, _ = layers.backward(ce, logits, {"target": labels}, np.float64(1.0))
    d_map, d_f4 = fuse.backward(d_logits, pyr[3], params, cache, grads)
    _, d_conds = unet.backward(d_map, params, cache, grads)
    d_pyr = proj.backward(d_conds, params, cache, grads)
    d_pyr[3] = d_f4 if d_pyr[3] is None else d_pyr[3] + d_f4
    d_ld, _ = layers.backward(ce, logits_det, {"target": labels}, np.float64(0.5))
    det.backward(params, cache, grads, d_pyramid=d_pyr, d_logits=d_ld)

    h = 1e-5
    rng2 = np.random.default_rng(7)
    worst = 0.0
    for name in sorted(params):
        flat = params[name].reshape(-1)
        for i in rng2.choice(flat.size, size=min(2, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_value()
            flat[i] = orig - h
            fm = loss_value()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = grads[name].reshape(-1)[i]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
    assert worst < 1e-3, f"end-to-end gradient mismatch {worst}"


def test_sinusoidal_embedding_shape_and_determinism():
    a = networks.sinusoidal_embedding(np.array([1, 25, 50]), 32)
    b = networks.sinusoidal_embedding(np.array([1, 25, 50]), 32)
    assert a.shape == (3, 32)
    assert np.array_equal(a, b)
    assert not np.array_equal(a[0], a[1])
