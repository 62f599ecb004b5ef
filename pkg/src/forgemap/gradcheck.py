"""Central finite-difference verification of the analytic backward passes."""

from __future__ import annotations

import zlib

import numpy as np

from . import layers
from .layers import LayerSpec


def numerical_grad(f, x, h=1e-5):
    """Central differences of scalar f at every coordinate of x (float64)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a, b, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_layer(spec: LayerSpec, x: np.ndarray, params: dict, rng: np.random.Generator,
                h=1e-5) -> float:
    """Max relative error between analytic and numeric grads (input + params)."""
    x = x.astype(np.float64)
    params = {k: v.astype(np.float64) for k, v in params.items()}
    if spec.kind in ("softmax-cross-entropy", "mse"):
        proj = None

        def scalar():
            return float(layers.forward(spec, x, params))

        gx, gp = layers.backward(spec, x, params, np.float64(1.0))
    else:
        out = layers.forward(spec, x, params)
        proj = rng.standard_normal(out.shape)

        def scalar():
            return float((layers.forward(spec, x, params) * proj).sum())

        gx, gp = layers.backward(spec, x, params, proj)

    worst = relative_error(gx, numerical_grad(scalar, x, h))
    for name in layers.param_shapes(spec):
        worst = max(worst, relative_error(gp[name], numerical_grad(scalar, params[name], h)))
    return worst


def random_case(kind: str, rng: np.random.Generator):
    """A random small (spec, input, params) triple for one layer kind."""
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    h = int(rng.integers(3, 7))
    w = int(rng.integers(3, 7))
    if kind == "conv2d":
        spec = layers.conv2d(c, int(rng.integers(1, 4)),
                             kernel=int(rng.integers(1, 4)),
                             stride=int(rng.integers(1, 3)),
                             padding=int(rng.integers(0, 2)))
        h = max(h, spec.kernel)
        w = max(w, spec.kernel)
        x = rng.standard_normal((n, c, h, w))
    elif kind == "transposed-conv2d":
        k = int(rng.integers(1, 4))
        s = int(rng.integers(1, 3))
        spec = layers.transposed_conv2d(c, int(rng.integers(1, 4)), kernel=k,
                                        stride=s, padding=int(rng.integers(0, min(k, 2))))
        x = rng.standard_normal((n, c, h, w))
    elif kind == "linear":
        spec = layers.linear(int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        x = rng.standard_normal((n, spec.in_features))
    elif kind == "group-normalization":
        g = int(rng.integers(1, 4))
        spec = layers.group_norm(g * int(rng.integers(1, 4)), groups=g)
        x = rng.standard_normal((n, spec.in_channels, h, w))
    elif kind in ("silu", "gelu", "sigmoid"):
        spec = layers.activation(kind)
        x = rng.standard_normal((n, c, h, w))
    elif kind == "average-pool":
        k = int(rng.integers(1, 4))
        spec = layers.average_pool(k, stride=int(rng.integers(1, 3)))
        h = max(h, k)
        w = max(w, k)
        x = rng.standard_normal((n, c, h, w))
    elif kind == "global-average-pool":
        spec = layers.global_average_pool()
        x = rng.standard_normal((n, c, h, w))
    elif kind == "nearest-upsample":
        spec = layers.nearest_upsample(int(rng.integers(1, 4)))
        x = rng.standard_normal((n, c, h, w))
    elif kind == "bilinear-resize":
        spec = layers.bilinear_resize(int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        x = rng.standard_normal((n, c, h, w))
    elif kind == "softmax-cross-entropy":
        classes = int(rng.integers(2, 5))
        spec = LayerSpec("softmax-cross-entropy")
        x = rng.standard_normal((n, classes))
        return spec, x, {"target": rng.integers(0, classes, size=n)}
    elif kind == "mse":
        spec = LayerSpec("mse")
        x = rng.standard_normal((n, c, h, w))
        return spec, x, {"target": rng.standard_normal((n, c, h, w))}
    else:
        raise ValueError(kind)
    params = layers.init_params(spec, rng)
    return spec, x, params


def check_kind(kind: str, trials: int, seed: int = 0) -> float:
    """Worst relative error over randomized trials for one kind."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(kind.encode())]))
    worst = 0.0
    for _ in range(trials):
        spec, x, params = random_case(kind, rng)
        fixed = {k: v for k, v in params.items() if k == "target"}
        learn = {k: v for k, v in params.items() if k != "target"}
        merged = dict(learn)
        merged.update(fixed)
        worst = max(worst, check_layer(spec, x, merged, rng))
    return worst
