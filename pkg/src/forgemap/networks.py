"""Network architectures wired on top of the layer primitives.

Four components:

  * ``Detector``        -- stem + 4 stages (each halving resolution after the
                           stem's initial /2), exposing all stage outputs as a
                           feature pyramid plus 2-class logits.
  * ``CondProjectors``  -- per-stage 1x1 conv + bilinear resize adapters that
                           map detector features onto denoiser stage shapes.
  * ``CondUNet``        -- seven-stage U-Net (3 encoder / bottleneck /
                           3 decoder) with skip connections, sinusoidal
                           timestep conditioning, and additive feature
                           injection at the projected stages.
  * ``FusionHead``      -- artifact feature extractor + gated fusion +
                           GAP/linear classifier.

Parameters live in flat dicts keyed ``module.stage.layer.kind`` (for example
``det.stage2.conv1.weight``); each component's ``forward`` takes the dict plus
an optional cache that its ``backward`` consumes. Gradients accumulate into a
second flat dict, so compositions with shared inputs (skip connections, the
detector pyramid feeding several projectors) just sum naturally.
"""

from __future__ import annotations

import numpy as np

from . import layers
from .errors import ForgemapError, ShapeError

PLACEMENTS = ("encoder-all", "final-stage-only", "decoder")
FUSION_MODES = ("gating", "addition", "hadamard", "concat")

_UNET_STAGES = ("enc1", "enc2", "enc3", "bottleneck", "dec1", "dec2", "dec3")


def _acc(grads: dict, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


class Chain:
    """A named sequential stack of layers with parameters under one prefix."""

    def __init__(self, prefix: str, steps: list[tuple[str, layers.LayerSpec]]):
        self.prefix = prefix
        self.steps = steps

    def init_params(self, rng: np.random.Generator, out: dict) -> None:
        for name, spec in self.steps:
            for pname, value in layers.init_params(spec, rng).items():
                out[f"{self.prefix}.{name}.{pname}"] = value

    def _local(self, params: dict, name: str, spec) -> dict:
        return {p: params[f"{self.prefix}.{name}.{p}"] for p in layers.param_shapes(spec)}

    def forward(self, x: np.ndarray, params: dict, cache: dict | None = None) -> np.ndarray:
        inputs, ctxs = [], []
        for name, spec in self.steps:
            inputs.append(x)
            ctx = {} if cache is not None else None
            x = layers.forward(spec, x, self._local(params, name, spec), ctx=ctx)
            ctxs.append(ctx)
        if cache is not None:
            cache[self.prefix] = (inputs, ctxs)
        return x

    def backward(self, grad: np.ndarray, params: dict, cache: dict, grads: dict) -> np.ndarray:
        inputs, ctxs = cache[self.prefix]
        for (name, spec), xin, ctx in zip(reversed(self.steps), reversed(inputs),
                                          reversed(ctxs)):
            grad, gp = layers.backward(spec, xin, self._local(params, name, spec),
                                       grad, ctx=ctx)
            for pname, g in gp.items():
                _acc(grads, f"{self.prefix}.{name}.{pname}", g)
        return grad

    def output_shape(self, in_shape):
        for _, spec in self.steps:
            in_shape = layers.output_shape(spec, in_shape)
        return in_shape


def _conv_block(prefix, cin, cout, stride):
    return Chain(prefix, [
        ("conv", layers.conv2d(cin, cout, kernel=3, stride=stride, padding=1)),
        ("gn", layers.group_norm(cout)),
        ("act", layers.activation("silu")),
    ])


class Detector:
    """Multi-stage classifier backbone exposing its feature pyramid."""

    def __init__(self, channels=(16, 32, 64, 128), in_channels=3):
        if len(channels) != 4:
            raise ForgemapError("detector needs exactly 4 stage channel counts")
        self.channels = tuple(channels)
        c1, c2, c3, c4 = channels
        self.stem = _conv_block("det.stem", in_channels, c1, stride=2)
        self.stages = []
        for i, (cin, cout) in enumerate(zip((c1, c1, c2, c3), channels)):
            stride = 1 if i == 0 else 2
            self.stages.append(Chain(f"det.stage{i + 1}", [
                ("conv1", layers.conv2d(cin, cout, kernel=3, stride=stride, padding=1)),
                ("gn1", layers.group_norm(cout)),
                ("act1", layers.activation("silu")),
                ("conv2", layers.conv2d(cout, cout, kernel=3, stride=1, padding=1)),
                ("gn2", layers.group_norm(cout)),
                ("act2", layers.activation("silu")),
            ]))
        self.gap = layers.global_average_pool()
        self.head = Chain("det.head", [("linear", layers.linear(c4, 2))])

    def init_params(self, rng: np.random.Generator) -> dict:
        params: dict = {}
        self.stem.init_params(rng, params)
        for st in self.stages:
            st.init_params(rng, params)
        self.head.init_params(rng, params)
        return params

    def forward(self, x, params, cache: dict | None = None):
        h = self.stem.forward(x, params, cache)
        pyramid = []
        for st in self.stages:
            h = st.forward(h, params, cache)
            pyramid.append(h)
        pooled = layers.forward(self.gap, pyramid[-1])
        if cache is not None:
            cache["det.pool_in"] = pyramid[-1]
        logits = self.head.forward(pooled, params, cache)
        return pyramid, logits

    def backward(self, params, cache, grads, d_pyramid=None, d_logits=None):
        """Merge external pyramid/logit gradients and backprop to the input."""
        d_stage = list(d_pyramid) if d_pyramid is not None else [None] * 4
        if d_logits is not None:
            d_pool = self.head.backward(d_logits, params, cache, grads)
            d_f4, _ = layers.backward(self.gap, cache["det.pool_in"], {}, d_pool)
            d_stage[3] = d_f4 if d_stage[3] is None else d_stage[3] + d_f4
        grad = None
        for st, ds in zip(reversed(self.stages), reversed(d_stage)):
            if grad is None:
                grad = ds
            elif ds is not None:
                grad = grad + ds
            if grad is None:
                continue
            grad = st.backward(grad, params, cache, grads)
        if grad is None:
            raise ForgemapError("detector backward needs at least one gradient source")
        return self.stem.backward(grad, params, cache, grads)

    def pyramid_shapes(self, image_size: int):
        # stage 1 keeps the stem's half resolution, stages 2..4 halve again
        sizes = [image_size // 2, image_size // 4, image_size // 8, image_size // 16]
        return [(c, s, s) for c, s in zip(self.channels, sizes)]


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Classic fixed sin/cos embedding of integer timesteps, shape [N, dim]."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    return emb.astype(np.float32)


class CondUNet:
    """Seven-stage denoiser over single-channel maps with additive conditioning."""

    def __init__(self, channels=(16, 16, 32, 64, 32, 16, 16), time_dim=32):
        if len(channels) != 7:
            raise ForgemapError("unet needs exactly 7 stage channel counts")
        self.channels = tuple(channels)
        self.time_dim = time_dim
        ce1, ce2, ce3, cb, cd1, cd2, cd3 = channels
        self.enc1 = _conv_block("unet.enc1", 1, ce1, stride=1)
        self.enc2 = _conv_block("unet.enc2", ce1, ce2, stride=1)
        self.enc3 = _conv_block("unet.enc3", ce2, ce3, stride=1)
        self.bott = _conv_block("unet.bottleneck", ce3, cb, stride=1)
        self.dec1 = _conv_block("unet.dec1", cb + ce3, cd1, stride=1)
        self.dec2 = _conv_block("unet.dec2", cd1 + ce2, cd2, stride=1)
        self.dec3 = _conv_block("unet.dec3", cd2 + ce1, cd3, stride=1)
        self.out = Chain("unet.out", [("conv", layers.conv2d(cd3, 1, kernel=3, padding=1))])
        self.pool = layers.average_pool(2)
        self.up = layers.nearest_upsample(2)
        self.time_mlp = Chain("unet.time", [
            ("lin1", layers.linear(time_dim, 2 * time_dim)),
            ("act", layers.activation("silu")),
            ("lin2", layers.linear(2 * time_dim, time_dim)),
        ])
        self.tproj = {name: Chain(f"unet.tproj.{name}",
                                  [("linear", layers.linear(time_dim, c))])
                      for name, c in zip(_UNET_STAGES, channels)}

    def init_params(self, rng: np.random.Generator) -> dict:
        params: dict = {}
        for chain in (self.enc1, self.enc2, self.enc3, self.bott,
                      self.dec1, self.dec2, self.dec3, self.out, self.time_mlp):
            chain.init_params(rng, params)
        for name in _UNET_STAGES:
            self.tproj[name].init_params(rng, params)
        return params

    def stage_shapes(self, image_size: int):
        s = image_size
        sizes = {"enc1": s, "enc2": s // 2, "enc3": s // 4, "bottleneck": s // 8,
                 "dec1": s // 4, "dec2": s // 2, "dec3": s}
        return {name: (c, sizes[name], sizes[name])
                for name, c in zip(_UNET_STAGES, self.channels)}

    def _stage(self, name, chain, h, tfeat, conds, params, cache):
        h = chain.forward(h, params, cache)
        tb = self.tproj[name].forward(tfeat, params, cache)
        h = h + tb[:, :, None, None]
        cond = conds.get(name)
        if cond is not None:
            if cond.shape != h.shape:
                raise ShapeError(
                    f"unet {name}: condition shape {cond.shape} != activation {h.shape}")
            h = h + cond
        return h

    def forward(self, x, t, conds: dict | None, params, cache: dict | None = None):
        """x: [N,1,H,W] noisy map, t: per-sample integer timesteps."""
        conds = conds or {}
        for key in conds:
            if key not in _UNET_STAGES:
                raise ForgemapError(f"unknown unet stage {key!r} in conditions")
        temb = sinusoidal_embedding(t, self.time_dim).astype(x.dtype)
        tfeat = self.time_mlp.forward(temb, params, cache)
        e1 = self._stage("enc1", self.enc1, x, tfeat, conds, params, cache)
        h = layers.forward(self.pool, e1)
        e2 = self._stage("enc2", self.enc2, h, tfeat, conds, params, cache)
        h = layers.forward(self.pool, e2)
        e3 = self._stage("enc3", self.enc3, h, tfeat, conds, params, cache)
        h = layers.forward(self.pool, e3)
        b = self._stage("bottleneck", self.bott, h, tfeat, conds, params, cache)
        u1 = layers.forward(self.up, b)
        d1 = self._stage("dec1", self.dec1, np.concatenate([u1, e3], axis=1),
                         tfeat, conds, params, cache)
        u2 = layers.forward(self.up, d1)
        d2 = self._stage("dec2", self.dec2, np.concatenate([u2, e2], axis=1),
                         tfeat, conds, params, cache)
        u3 = layers.forward(self.up, d2)
        d3 = self._stage("dec3", self.dec3, np.concatenate([u3, e1], axis=1),
                         tfeat, conds, params, cache)
        eps = self.out.forward(d3, params, cache)
        if cache is not None:
            cache["unet.acts"] = {"e1": e1, "e2": e2, "e3": e3, "b": b,
                                  "d1": d1, "d2": d2, "tfeat": tfeat}
            cache["unet.cond_keys"] = tuple(conds.keys())
        return eps

    def _stage_backward(self, name, chain, d_h, params, cache, grads, d_conds, d_tfeat):
        # d_h arrives after the additive time/condition injection.
        if name in cache["unet.cond_keys"]:
            d_conds[name] = d_h
        d_tb = d_h.sum(axis=(2, 3))
        d_tfeat += self.tproj[name].backward(d_tb, params, cache, grads)
        return chain.backward(d_h, params, cache, grads)

    def backward(self, d_eps, params, cache, grads):
        """Returns (d_x, d_conds dict keyed by stage name)."""
        acts = cache["unet.acts"]
        d_conds: dict = {}
        d_tfeat = np.zeros_like(acts["tfeat"])

        d_d3 = self.out.backward(d_eps, params, cache, grads)
        d_cat = self._stage_backward("dec3", self.dec3, d_d3, params, cache,
                                     grads, d_conds, d_tfeat)
        cu = acts["d2"].shape[1]
        d_u3, d_e1_skip = d_cat[:, :cu], d_cat[:, cu:]
        d_d2, _ = layers.backward(self.up, acts["d2"], {}, d_u3)

        d_cat = self._stage_backward("dec2", self.dec2, d_d2, params, cache,
                                     grads, d_conds, d_tfeat)
        cu = acts["d1"].shape[1]
        d_u2, d_e2_skip = d_cat[:, :cu], d_cat[:, cu:]
        d_d1, _ = layers.backward(self.up, acts["d1"], {}, d_u2)

        d_cat = self._stage_backward("dec1", self.dec1, d_d1, params, cache,
                                     grads, d_conds, d_tfeat)
        cu = acts["b"].shape[1]
        d_u1, d_e3_skip = d_cat[:, :cu], d_cat[:, cu:]
        d_b, _ = layers.backward(self.up, acts["b"], {}, d_u1)

        d_pool_in = self._stage_backward("bottleneck", self.bott, d_b, params,
                                         cache, grads, d_conds, d_tfeat)
        d_e3, _ = layers.backward(self.pool, acts["e3"], {}, d_pool_in)
        d_e3 = d_e3 + d_e3_skip

        d_pool_in = self._stage_backward("enc3", self.enc3, d_e3, params,
                                         cache, grads, d_conds, d_tfeat)
        d_e2, _ = layers.backward(self.pool, acts["e2"], {}, d_pool_in)
        d_e2 = d_e2 + d_e2_skip

        d_pool_in = self._stage_backward("enc2", self.enc2, d_e2, params,
                                         cache, grads, d_conds, d_tfeat)
        d_e1, _ = layers.backward(self.pool, acts["e1"], {}, d_pool_in)
        d_e1 = d_e1 + d_e1_skip

        d_x = self._stage_backward("enc1", self.enc1, d_e1, params,
                                   cache, grads, d_conds, d_tfeat)
        self.time_mlp.backward(d_tfeat, params, cache, grads)
        return d_x, d_conds


def placement_map(placement: str) -> list[tuple[int, str]]:
    """(detector stage index, unet stage name) pairs for a placement mode."""
    if placement == "encoder-all":
        return [(0, "enc1"), (1, "enc2"), (2, "enc3"), (3, "bottleneck")]
    if placement == "final-stage-only":
        return [(3, "bottleneck")]
    if placement == "decoder":
        return [(0, "dec3"), (1, "dec2"), (2, "dec1"), (3, "bottleneck")]
    raise ForgemapError(f"unknown placement {placement!r}")


class CondProjectors:
    """Channel (1x1 conv) + spatial (bilinear) adapters, one per used stage."""

    def __init__(self, detector: Detector, unet: CondUNet, placement: str, image_size: int):
        self.placement = placement
        self.pairs = placement_map(placement)
        unet_shapes = unet.stage_shapes(image_size)
        self.entries = []
        for det_idx, stage in self.pairs:
            det_c = detector.channels[det_idx]
            tgt_c, tgt_h, tgt_w = unet_shapes[stage]
            conv = Chain(f"proj.f{det_idx + 1}",
                         [("conv", layers.conv2d(det_c, tgt_c, kernel=1, padding=0))])
            resize = layers.bilinear_resize(tgt_h, tgt_w)
            self.entries.append((det_idx, stage, conv, resize))

    def init_params(self, rng: np.random.Generator) -> dict:
        params: dict = {}
        for _, _, conv, _ in self.entries:
            conv.init_params(rng, params)
        return params

    def forward(self, pyramid, params, cache: dict | None = None) -> dict:
        conds = {}
        for det_idx, stage, conv, resize in self.entries:
            h = conv.forward(pyramid[det_idx], params, cache)
            if cache is not None:
                cache[f"proj.resize_in.f{det_idx + 1}"] = h
            conds[stage] = layers.forward(resize, h)
        return conds

    def backward(self, d_conds: dict, params, cache, grads):
        """Returns per-detector-stage gradients (list of 4, None where unused)."""
        d_pyramid = [None] * 4
        for det_idx, stage, conv, resize in self.entries:
            if stage not in d_conds:
                continue
            h = cache[f"proj.resize_in.f{det_idx + 1}"]
            d_h, _ = layers.backward(resize, h, {}, d_conds[stage])
            d_f = conv.backward(d_h, params, cache, grads)
            if d_pyramid[det_idx] is None:
                d_pyramid[det_idx] = d_f
            else:
                d_pyramid[det_idx] = d_pyramid[det_idx] + d_f
        return d_pyramid


def gate_fuse(f_art, f_det, mode, params, cache: dict | None = None):
    """Blend artifact and detector features; both inputs share one shape."""
    if f_art.shape != f_det.shape:
        raise ShapeError(f"gate_fuse: shapes differ {f_art.shape} vs {f_det.shape}")
    if mode not in FUSION_MODES:
        raise ForgemapError(f"unknown fusion mode {mode!r}")
    if mode == "addition":
        return f_art + f_det
    if mode == "hadamard":
        return f_art * f_det
    cat = np.concatenate([f_art, f_det], axis=1)
    spec = _fusion_conv_spec(f_art.shape[1], mode)
    z = layers.forward(spec, cat, _fusion_conv_params(params, mode))
    if cache is not None:
        cache[f"fuse.{mode}.cat"] = cat
    if mode == "concat":
        return z
    g = layers.forward(layers.activation("sigmoid"), z)
    if cache is not None:
        cache["fuse.gating.z"] = z
        cache["fuse.gating.g"] = g
    return g * f_det + (1.0 - g) * f_art


def gate_fuse_backward(d_fused, f_art, f_det, mode, params, cache, grads):
    if mode == "addition":
        return d_fused, d_fused
    if mode == "hadamard":
        return d_fused * f_det, d_fused * f_art
    spec = _fusion_conv_spec(f_art.shape[1], mode)
    local = _fusion_conv_params(params, mode)
    cat = cache[f"fuse.{mode}.cat"]
    if mode == "concat":
        d_cat, gp = layers.backward(spec, cat, local, d_fused)
    else:
        g = cache["fuse.gating.g"]
        d_g = d_fused * (f_det - f_art)
        d_z, _ = layers.backward(layers.activation("sigmoid"), cache["fuse.gating.z"], {}, d_g)
        d_cat, gp = layers.backward(spec, cat, local, d_z)
    for pname, g_ in gp.items():
        _acc(grads, f"fuse.{mode}.conv.{pname}", g_)
    c = f_art.shape[1]
    d_art, d_det = d_cat[:, :c], d_cat[:, c:]
    if mode == "gating":
        g = cache["fuse.gating.g"]
        d_art = d_art + d_fused * (1.0 - g)
        d_det = d_det + d_fused * g
    return d_art, d_det


def _fusion_conv_spec(channels, mode):
    return layers.conv2d(2 * channels, channels, kernel=1, padding=0)


def _fusion_conv_params(params, mode):
    return {"weight": params[f"fuse.{mode}.conv.weight"],
            "bias": params[f"fuse.{mode}.conv.bias"]}


class FusionHead:
    """Artifact feature extractor + gated fusion + linear classifier."""

    def __init__(self, det_channels=(16, 32, 64, 128), mode="gating"):
        if mode not in FUSION_MODES:
            raise ForgemapError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.channels = tuple(det_channels)
        c1, c2, c3, c4 = det_channels
        steps = []
        for i, (cin, cout) in enumerate(zip((1, c1, c2, c3), det_channels)):
            steps += [
                (f"conv{i + 1}", layers.conv2d(cin, cout, kernel=3, stride=2, padding=1)),
                (f"gn{i + 1}", layers.group_norm(cout)),
                (f"act{i + 1}", layers.activation("silu")),
            ]
        self.extractor = Chain("fuse.ext", steps)
        self.gap = layers.global_average_pool()
        self.head = Chain("fuse.head", [("linear", layers.linear(c4, 2))])

    def init_params(self, rng: np.random.Generator) -> dict:
        params: dict = {}
        self.extractor.init_params(rng, params)
        c4 = self.channels[-1]
        if self.mode in ("gating", "concat"):
            spec = _fusion_conv_spec(c4, self.mode)
            for pname, val in layers.init_params(spec, rng).items():
                params[f"fuse.{self.mode}.conv.{pname}"] = val
        self.head.init_params(rng, params)
        return params

    def forward(self, art_map, f_det, params, cache: dict | None = None):
        f_art = self.extractor.forward(art_map, params, cache)
        if f_art.shape != f_det.shape:
            raise ShapeError(
                f"fusion: artifact features {f_art.shape} vs detector {f_det.shape}")
        fused = gate_fuse(f_art, f_det, self.mode, params, cache)
        pooled = layers.forward(self.gap, fused)
        if cache is not None:
            cache["fuse.f_art"] = f_art
            cache["fuse.fused"] = fused
        logits = self.head.forward(pooled, params, cache)
        return logits

    def backward(self, d_logits, f_det, params, cache, grads):
        """Returns (d_map, d_f_det)."""
        d_pool = self.head.backward(d_logits, params, cache, grads)
        d_fused, _ = layers.backward(self.gap, cache["fuse.fused"], {}, d_pool)
        d_art, d_det = gate_fuse_backward(d_fused, cache["fuse.f_art"], f_det,
                                          self.mode, params, cache, grads)
        d_map = self.extractor.backward(d_art, params, cache, grads)
        return d_map, d_det


def classify(fused, params, cache: dict | None = None, prefix="fuse.head"):
    """Global average pool then linear projection to 2 logits."""
    pooled = layers.forward(layers.global_average_pool(), fused)
    spec = layers.linear(fused.shape[1], 2)
    local = {"weight": params[f"{prefix}.linear.weight"],
             "bias": params[f"{prefix}.linear.bias"]}
    if cache is not None:
        cache["classify.fused"] = fused
        cache["classify.pooled"] = pooled
    return layers.forward(spec, pooled, local)
