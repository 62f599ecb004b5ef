"""Dense-tensor layer primitives with hand-derived analytic gradients.

The layer set is fixed and closed; there is no autodiff graph. Every kind has
three rules that must stay consistent with each other:

  * ``output_shape(spec, in_shape)`` -- shape algebra,
  * ``forward(spec, x, params)``     -- pure function of its inputs,
  * ``backward(spec, x, params, g)`` -- analytic gradients, recomputing any
    forward intermediates it needs so that ``forward`` stays cache-free.

Tensors are plain numpy arrays. Spatial layers take NCHW batches; ``linear``
and the loss heads take 2-D ``[N, features]`` input. Training runs in float32;
gradient checks cast everything to float64. Loss layers receive their target
through ``params["target"]`` so the uniform signature holds for all kinds.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import NonFiniteError, ShapeError

KINDS = (
    "conv2d",
    "transposed-conv2d",
    "linear",
    "group-normalization",
    "silu",
    "gelu",
    "sigmoid",
    "average-pool",
    "global-average-pool",
    "nearest-upsample",
    "bilinear-resize",
    "softmax-cross-entropy",
    "mse",
)

_ACTIVATIONS = ("silu", "gelu", "sigmoid")
_LOSSES = ("softmax-cross-entropy", "mse")

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


@dataclass(frozen=True)
class LayerSpec:
    """Hyperparameters of one layer. Only the fields its kind uses matter."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    groups: int = 1
    eps: float = 1e-5
    factor: int = 2
    out_h: int = 0
    out_w: int = 0
    in_features: int = 0
    out_features: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        k = self.kind
        if k in ("conv2d", "transposed-conv2d"):
            if self.in_channels < 1 or self.out_channels < 1:
                raise ShapeError(f"{k}: channels must be positive")
            if self.kernel < 1 or self.stride < 1 or self.padding < 0:
                raise ShapeError(f"{k}: bad kernel/stride/padding")
        elif k == "linear":
            if self.in_features < 1 or self.out_features < 1:
                raise ShapeError("linear: features must be positive")
        elif k == "group-normalization":
            if self.in_channels < 1 or self.groups < 1:
                raise ShapeError("group-normalization: bad channels/groups")
            if self.in_channels % self.groups:
                raise ShapeError(
                    f"group-normalization: {self.in_channels} channels not "
                    f"divisible by {self.groups} groups"
                )
        elif k == "average-pool":
            if self.kernel < 1 or self.stride < 1:
                raise ShapeError("average-pool: bad kernel/stride")
        elif k == "nearest-upsample":
            if self.factor < 1:
                raise ShapeError("nearest-upsample: factor must be >= 1")
        elif k == "bilinear-resize":
            if self.out_h < 1 or self.out_w < 1:
                raise ShapeError("bilinear-resize: bad target size")


def conv2d(cin, cout, kernel=3, stride=1, padding=1):
    return LayerSpec("conv2d", in_channels=cin, out_channels=cout,
                     kernel=kernel, stride=stride, padding=padding)


def transposed_conv2d(cin, cout, kernel=2, stride=2, padding=0):
    return LayerSpec("transposed-conv2d", in_channels=cin, out_channels=cout,
                     kernel=kernel, stride=stride, padding=padding)


def linear(n_in, n_out):
    return LayerSpec("linear", in_features=n_in, out_features=n_out)


def group_norm(channels, groups=None):
    # 8 groups by default, or one group per channel for thin layers.
    if groups is None:
        groups = 8 if channels % 8 == 0 else channels
    return LayerSpec("group-normalization", in_channels=channels, groups=groups)


def activation(kind):
    return LayerSpec(kind)


def average_pool(kernel, stride=None):
    return LayerSpec("average-pool", kernel=kernel,
                     stride=kernel if stride is None else stride)


def global_average_pool():
    return LayerSpec("global-average-pool")


def nearest_upsample(factor=2):
    return LayerSpec("nearest-upsample", factor=factor)


def bilinear_resize(out_h, out_w):
    return LayerSpec("bilinear-resize", out_h=out_h, out_w=out_w)


def param_shapes(spec: LayerSpec) -> dict[str, tuple]:
    """Learnable parameter shapes for a spec (empty for parameter-free kinds)."""
    k = spec.kind
    if k == "conv2d":
        return {
            "weight": (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel),
            "bias": (spec.out_channels,),
        }
    if k == "transposed-conv2d":
        return {
            "weight": (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel),
            "bias": (spec.out_channels,),
        }
    if k == "linear":
        return {
            "weight": (spec.out_features, spec.in_features),
            "bias": (spec.out_features,),
        }
    if k == "group-normalization":
        return {"scale": (spec.in_channels,), "shift": (spec.in_channels,)}
    return {}


def init_params(spec: LayerSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fan-in uniform init for weights, zeros for biases, ones/zeros for norm."""
    out = {}
    k = spec.kind
    if k in ("conv2d", "transposed-conv2d"):
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        bound = 1.0 / np.sqrt(fan_in)
        shape = param_shapes(spec)["weight"]
        out["weight"] = rng.uniform(-bound, bound, shape).astype(np.float32)
        out["bias"] = np.zeros(spec.out_channels, dtype=np.float32)
    elif k == "linear":
        bound = 1.0 / np.sqrt(spec.in_features)
        out["weight"] = rng.uniform(
            -bound, bound, (spec.out_features, spec.in_features)
        ).astype(np.float32)
        out["bias"] = np.zeros(spec.out_features, dtype=np.float32)
    elif k == "group-normalization":
        out["scale"] = np.ones(spec.in_channels, dtype=np.float32)
        out["shift"] = np.zeros(spec.in_channels, dtype=np.float32)
    return out


def output_shape(spec: LayerSpec, in_shape: tuple) -> tuple:
    """Derive the forward output shape without running the layer."""
    k = spec.kind
    if k == "conv2d":
        n, c, h, w = _expect_rank(in_shape, 4, k)
        _expect(c == spec.in_channels, f"conv2d: got {c} channels, want {spec.in_channels}")
        oh = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        ow = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
        _expect(oh >= 1 and ow >= 1, "conv2d: kernel larger than padded input")
        return (n, spec.out_channels, oh, ow)
    if k == "transposed-conv2d":
        n, c, h, w = _expect_rank(in_shape, 4, k)
        _expect(c == spec.in_channels, f"transposed-conv2d: got {c} channels")
        oh = (h - 1) * spec.stride + spec.kernel - 2 * spec.padding
        ow = (w - 1) * spec.stride + spec.kernel - 2 * spec.padding
        _expect(oh >= 1 and ow >= 1, "transposed-conv2d: empty output")
        return (n, spec.out_channels, oh, ow)
    if k == "linear":
        n, f = _expect_rank(in_shape, 2, k)
        _expect(f == spec.in_features, f"linear: got {f} features, want {spec.in_features}")
        return (n, spec.out_features)
    if k == "group-normalization":
        n, c, h, w = _expect_rank(in_shape, 4, k)
        _expect(c == spec.in_channels, "group-normalization: channel mismatch")
        return in_shape
    if k in _ACTIVATIONS:
        return in_shape
    if k == "average-pool":
        n, c, h, w = _expect_rank(in_shape, 4, k)
        oh = (h - spec.kernel) // spec.stride + 1
        ow = (w - spec.kernel) // spec.stride + 1
        _expect(oh >= 1 and ow >= 1, "average-pool: kernel larger than input")
        return (n, c, oh, ow)
    if k == "global-average-pool":
        n, c, h, w = _expect_rank(in_shape, 4, k)
        return (n, c)
    if k == "nearest-upsample":
        n, c, h, w = _expect_rank(in_shape, 4, k)
        return (n, c, h * spec.factor, w * spec.factor)
    if k == "bilinear-resize":
        n, c, h, w = _expect_rank(in_shape, 4, k)
        return (n, c, spec.out_h, spec.out_w)
    if k in _LOSSES:
        return ()
    raise ShapeError(f"unknown kind {k!r}")


def forward(spec: LayerSpec, x: np.ndarray, params=None, ctx: dict | None = None) -> np.ndarray:
    """Run the layer. Raises on shape mismatch or non-finite output.

    ``ctx``, when given, receives reusable intermediates (im2col buffers,
    normalization statistics) that a later ``backward`` call with the same
    ctx can pick up instead of recomputing. Results are identical either way.
    """
    params = params or {}
    y = _FORWARD[spec.kind](spec, x, params, ctx)
    if not np.isfinite(y).all():
        raise NonFiniteError(f"{spec.kind}: non-finite forward output")
    return y


def backward(spec: LayerSpec, x: np.ndarray, params, grad_out: np.ndarray,
             ctx: dict | None = None):
    """Analytic gradients. Returns (grad_input, grad_params)."""
    params = params or {}
    want = output_shape(spec, x.shape)
    if tuple(np.shape(grad_out)) != tuple(want):
        raise ShapeError(
            f"{spec.kind}: grad_out shape {np.shape(grad_out)} != forward output {want}"
        )
    return _BACKWARD[spec.kind](spec, x, params, grad_out, ctx)


# ---------------------------------------------------------------------------
# im2col plumbing shared by conv2d, transposed-conv2d and average-pool.
# The k*k python loop keeps everything as plain strided slice copies, which
# numpy vectorizes; scatter in _col2im is the exact adjoint of _im2col.
# ---------------------------------------------------------------------------


def _im2col(xp, k, s, oh, ow):
    n, c = xp.shape[:2]
    view = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    view = view[:, :, ::s, ::s]  # [n, c, oh, ow, k, k]
    cols = np.ascontiguousarray(view.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * k * k, oh * ow)


def _col2im(cols, out_shape, k, s, oh, ow):
    n, c = out_shape[:2]
    out = np.zeros(out_shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, oh, ow)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + oh * s:s, kj:kj + ow * s:s] += cols[:, :, ki, kj]
    return out


def _pad2d(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv2d_fwd(spec, x, params, ctx=None):
    n, cout, oh, ow = output_shape(spec, x.shape)
    k, s = spec.kernel, spec.stride
    cols = _im2col(_pad2d(x, spec.padding), k, s, oh, ow)
    if ctx is not None:
        ctx["cols"] = cols
    w2 = params["weight"].reshape(cout, -1)
    y = np.matmul(w2, cols).reshape(n, cout, oh, ow)
    return y + params["bias"].reshape(1, -1, 1, 1)


def _conv2d_bwd(spec, x, params, gy, ctx=None):
    n, c, h, w = x.shape
    _, cout, oh, ow = gy.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    if ctx is not None and "cols" in ctx:
        cols = ctx["cols"]
    else:
        cols = _im2col(_pad2d(x, p), k, s, oh, ow)
    g2 = np.ascontiguousarray(gy.reshape(n, cout, oh * ow))
    gw = np.matmul(cols, g2.transpose(0, 2, 1)).sum(axis=0).T
    hp, wp = h + 2 * p, w + 2 * p

    if s == 1:
        # grad wrt input as a stride-1 correlation of the output gradient
        # with the flipped, channel-swapped kernel: keeps the GEMM inner
        # dim large instead of materializing the huge column gradient.
        gd = _pad2d(gy, k - 1) if k > 1 else gy
        he, we = oh + k - 1, ow + k - 1
        cols_g = _im2col(gd, k, 1, he, we)
        wflip = np.ascontiguousarray(
            params["weight"][:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, -1)
        gxe = np.matmul(wflip, cols_g).reshape(n, c, he, we)
        if (he, we) != (hp, wp):
            gxp = np.zeros((n, c, hp, wp), dtype=gxe.dtype)
            gxp[:, :, :he, :we] = gxe
        else:
            gxp = gxe
    else:
        # strided conv: output grids are small, the scatter adjoint is cheap
        gcols = np.matmul(params["weight"].reshape(cout, -1).T, g2)
        gxp = _col2im(gcols, (n, c, hp, wp), k, s, oh, ow)
    gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
    return gx, {"weight": gw.reshape(params["weight"].shape),
                "bias": gy.sum(axis=(0, 2, 3))}


def _convt_fwd(spec, x, params, ctx=None):
    n, cin, h, w = x.shape
    _, cout, oh, ow = output_shape(spec, x.shape)
    k, s, p = spec.kernel, spec.stride, spec.padding
    w2 = params["weight"].reshape(cin, -1)  # (cin, cout*k*k)
    cols = np.matmul(w2.T, x.reshape(n, cin, h * w))
    ypad = _col2im(cols, (n, cout, oh + 2 * p, ow + 2 * p), k, s, h, w)
    y = ypad[:, :, p:p + oh, p:p + ow] if p else ypad
    return y + params["bias"].reshape(1, -1, 1, 1)


def _convt_bwd(spec, x, params, gy, ctx=None):
    n, cin, h, w = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    gcols = _im2col(_pad2d(gy, p), k, s, h, w)  # (n, cout*k*k, h*w)
    w2 = params["weight"].reshape(cin, -1)
    gx = np.matmul(w2, gcols).reshape(x.shape)
    x2 = np.ascontiguousarray(x.reshape(n, cin, h * w))
    gw = np.matmul(x2, gcols.transpose(0, 2, 1)).sum(axis=0)
    return gx, {"weight": gw.reshape(params["weight"].shape),
                "bias": gy.sum(axis=(0, 2, 3))}


def _linear_fwd(spec, x, params, ctx=None):
    output_shape(spec, x.shape)
    return x @ params["weight"].T + params["bias"]


def _linear_bwd(spec, x, params, gy, ctx=None):
    return gy @ params["weight"], {"weight": gy.T @ x, "bias": gy.sum(axis=0)}


def _gn_stats(spec, x):
    n, c, h, w = x.shape
    xg = x.reshape(n, spec.groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    return xg, mu, var


def _gn_fwd(spec, x, params, ctx=None):
    output_shape(spec, x.shape)
    xg, mu, var = _gn_stats(spec, x)
    if ctx is not None:
        ctx["mu"], ctx["var"] = mu, var
    xhat = (xg - mu) / np.sqrt(var + np.asarray(spec.eps, dtype=x.dtype))
    c = spec.in_channels
    return xhat.reshape(x.shape) * params["scale"].reshape(1, c, 1, 1) \
        + params["shift"].reshape(1, c, 1, 1)


def _gn_bwd(spec, x, params, gy, ctx=None):
    n, c, h, w = x.shape
    if ctx is not None and "mu" in ctx:
        xg = x.reshape(n, spec.groups, -1)
        mu, var = ctx["mu"], ctx["var"]
    else:
        xg, mu, var = _gn_stats(spec, x)
    inv = 1.0 / np.sqrt(var + np.asarray(spec.eps, dtype=x.dtype))
    xhat = (xg - mu) * inv
    gscale = (gy * xhat.reshape(x.shape)).sum(axis=(0, 2, 3))
    gshift = gy.sum(axis=(0, 2, 3))
    m = xg.shape[-1]
    gxhat = (gy * params["scale"].reshape(1, c, 1, 1)).reshape(n, spec.groups, m)
    gvar = (gxhat * (xg - mu)).sum(-1, keepdims=True) * (-0.5) * inv ** 3
    gmu = -(gxhat.sum(-1, keepdims=True)) * inv \
        - gvar * 2.0 * (xg - mu).mean(-1, keepdims=True)
    gx = gxhat * inv + gvar * 2.0 * (xg - mu) / m + gmu / m
    return gx.reshape(x.shape), {"scale": gscale, "shift": gshift}


def _sigmoid(x):
    # exp overflow at very negative x saturates through inf to exactly 0.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _silu_fwd(spec, x, params, ctx=None):
    s = _sigmoid(x)
    if ctx is not None:
        ctx["s"] = s
    return x * s


def _silu_bwd(spec, x, params, gy, ctx=None):
    s = ctx["s"] if ctx is not None and "s" in ctx else _sigmoid(x)
    return gy * (s * (1.0 + x * (1.0 - s))), {}


def _gelu_fwd(spec, x, params, ctx=None):
    return x * 0.5 * (1.0 + erf(x * np.asarray(_INV_SQRT2, dtype=x.dtype)))


def _gelu_bwd(spec, x, params, gy, ctx=None):
    phi = 0.5 * (1.0 + erf(x * np.asarray(_INV_SQRT2, dtype=x.dtype)))
    pdf = np.exp(-0.5 * x * x) * np.asarray(_INV_SQRT2PI, dtype=x.dtype)
    return gy * (phi + x * pdf), {}


def _sigmoid_fwd(spec, x, params, ctx=None):
    s = _sigmoid(x)
    if ctx is not None:
        ctx["s"] = s
    return s


def _sigmoid_bwd(spec, x, params, gy, ctx=None):
    s = ctx["s"] if ctx is not None and "s" in ctx else _sigmoid(x)
    return gy * s * (1.0 - s), {}


def _avgpool_fwd(spec, x, params, ctx=None):
    n, c, oh, ow = output_shape(spec, x.shape)
    k, s = spec.kernel, spec.stride
    if k == s and x.shape[2] == oh * k and x.shape[3] == ow * k:
        # non-overlapping tiling: plain reshape-mean
        return x.reshape(n, c, oh, k, ow, k).mean(axis=(3, 5))
    cols = _im2col(x, k, s, oh, ow).reshape(n, c, k * k, oh * ow)
    return cols.mean(axis=2).reshape(n, c, oh, ow)


def _avgpool_bwd(spec, x, params, gy, ctx=None):
    n, c, oh, ow = gy.shape
    k, s = spec.kernel, spec.stride
    if k == s and x.shape[2] == oh * k and x.shape[3] == ow * k:
        g = gy.reshape(n, c, oh, 1, ow, 1) / (k * k)
        return np.broadcast_to(g, (n, c, oh, k, ow, k)).reshape(x.shape), {}
    g = gy.reshape(n, c, 1, oh * ow) / (k * k)
    gcols = np.broadcast_to(g, (n, c, k * k, oh * ow)).reshape(n, c * k * k, oh * ow)
    return _col2im(np.ascontiguousarray(gcols), x.shape, k, s, oh, ow), {}


def _gap_fwd(spec, x, params, ctx=None):
    output_shape(spec, x.shape)
    return x.mean(axis=(2, 3))


def _gap_bwd(spec, x, params, gy, ctx=None):
    n, c, h, w = x.shape
    g = gy.reshape(n, c, 1, 1) / (h * w)
    return np.broadcast_to(g, x.shape).astype(x.dtype, copy=True), {}


def _nearest_fwd(spec, x, params, ctx=None):
    output_shape(spec, x.shape)
    return x.repeat(spec.factor, axis=2).repeat(spec.factor, axis=3)


def _nearest_bwd(spec, x, params, gy, ctx=None):
    n, c, h, w = x.shape
    f = spec.factor
    return gy.reshape(n, c, h, f, w, f).sum(axis=(3, 5)), {}


@functools.lru_cache(maxsize=None)
def _resize_matrix(src: int, dst: int) -> np.ndarray:
    """Row-stochastic 1-D bilinear interpolation matrix (half-pixel centers)."""
    a = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        c = min(max((i + 0.5) * scale - 0.5, 0.0), src - 1.0)
        i0 = int(np.floor(c))
        i1 = min(i0 + 1, src - 1)
        f = c - i0
        a[i, i0] += 1.0 - f
        a[i, i1] += f
    return a


def _bilinear_fwd(spec, x, params, ctx=None):
    n, c, h, w = x.shape
    ay = _resize_matrix(h, spec.out_h).astype(x.dtype)
    ax = _resize_matrix(w, spec.out_w).astype(x.dtype)
    return np.matmul(np.matmul(ay, x), ax.T)


def _bilinear_bwd(spec, x, params, gy, ctx=None):
    n, c, h, w = x.shape
    ay = _resize_matrix(h, spec.out_h).astype(x.dtype)
    ax = _resize_matrix(w, spec.out_w).astype(x.dtype)
    return np.matmul(np.matmul(ay.T, gy), ax), {}


def _softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _ce_fwd(spec, x, params, ctx=None):
    n = x.shape[0]
    t = np.asarray(params["target"]).astype(np.int64).reshape(n)
    z = x - x.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return np.asarray(-logp[np.arange(n), t].mean(), dtype=x.dtype)


def _ce_bwd(spec, x, params, gy, ctx=None):
    n = x.shape[0]
    t = np.asarray(params["target"]).astype(np.int64).reshape(n)
    p = _softmax(x)
    p[np.arange(n), t] -= 1.0
    return p * (np.asarray(gy, dtype=x.dtype) / n), {}


def _mse_fwd(spec, x, params, ctx=None):
    t = params["target"]
    if t.shape != x.shape:
        raise ShapeError(f"mse: target shape {t.shape} != input {x.shape}")
    d = x - t
    return np.asarray(np.mean(d * d), dtype=x.dtype)


def _mse_bwd(spec, x, params, gy, ctx=None):
    d = x - params["target"]
    return d * (np.asarray(gy, dtype=x.dtype) * 2.0 / x.size), {}


_FORWARD = {
    "conv2d": _conv2d_fwd,
    "transposed-conv2d": _convt_fwd,
    "linear": _linear_fwd,
    "group-normalization": _gn_fwd,
    "silu": _silu_fwd,
    "gelu": _gelu_fwd,
    "sigmoid": _sigmoid_fwd,
    "average-pool": _avgpool_fwd,
    "global-average-pool": _gap_fwd,
    "nearest-upsample": _nearest_fwd,
    "bilinear-resize": _bilinear_fwd,
    "softmax-cross-entropy": _ce_fwd,
    "mse": _mse_fwd,
}

_BACKWARD = {
    "conv2d": _conv2d_bwd,
    "transposed-conv2d": _convt_bwd,
    "linear": _linear_bwd,
    "group-normalization": _gn_bwd,
    "silu": _silu_bwd,
    "gelu": _gelu_bwd,
    "sigmoid": _sigmoid_bwd,
    "average-pool": _avgpool_bwd,
    "global-average-pool": _gap_bwd,
    "nearest-upsample": _nearest_bwd,
    "bilinear-resize": _bilinear_bwd,
    "softmax-cross-entropy": _ce_bwd,
    "mse": _mse_bwd,
}


def _expect(cond, msg):
    if not cond:
        raise ShapeError(msg)


def _expect_rank(shape, rank, kind):
    if len(shape) != rank:
        raise ShapeError(f"{kind}: expected rank-{rank} input, got shape {tuple(shape)}")
    return shape
