"""Denoising-diffusion machinery over normalized dissimilarity maps.

The forward process follows the standard Gaussian corruption

    x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps,    eps ~ N(0, I)

with a linear beta schedule. Training minimizes the mean squared error
between true and predicted noise. Two reverse update rules are provided:

  * ``paper-eq4`` (default): x_{t-1} = (x_t - sqrt(1-abar_t) * eps_hat)
    / sqrt(abar_t). This is the exact algebraic inverse of the corruption
    step; applied iteratively it behaves as a repeated clean-signal
    re-estimate rather than the DDPM posterior step, and is kept verbatim as
    the default on purpose. Because every iterate is a clean-signal estimate,
    the sampling loop clamps it to the data range: the 1/sqrt(abar_t) factor
    (about 470 at t=50) otherwise amplifies any prediction error
    multiplicatively until the state overflows float32.
  * ``ddpm-ancestral``: the standard posterior-mean update with fresh noise
    scaled by the posterior variance, for comparison runs.

Maps live in [0, 1]; the diffusion domain is their [-1, 1] rescale so that
x_T matches the standard normal prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ForgemapError, NonFiniteError, ShapeError

RULES = ("paper-eq4", "ddpm-ancestral")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep noising coefficients, 1-indexed by t via [t-1]."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray


def make_schedule(T: int, beta_start: float = 0.02, beta_end: float = 0.4) -> NoiseSchedule:
    if T < 2:
        raise ForgemapError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ForgemapError(f"invalid beta range [{beta_start}, {beta_end}]")
    beta = beta_start + (beta_end - beta_start) * np.arange(T, dtype=np.float64) / (T - 1)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _check_t(t, T):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > T):
        raise ForgemapError(f"timestep outside [1, {T}]")
    return t


def to_diffusion_domain(m: np.ndarray) -> np.ndarray:
    """[0,1] map -> [-1,1] diffusion variable."""
    return (2.0 * m - 1.0).astype(m.dtype)


def from_diffusion_domain(x: np.ndarray) -> np.ndarray:
    """[-1,1] diffusion variable -> clamped [0,1] map."""
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noisy sample at timestep t. Broadcasts per-sample t over [N, ...] input.

    Computed and returned in float64: near t=T the clean-signal term is tiny
    relative to the noise term, and the reverse update divides it back out,
    so single precision here would wreck the algebraic roundtrip identity.
    """
    if eps.shape != x0.shape:
        raise ShapeError(f"q_sample: eps shape {eps.shape} != x0 {x0.shape}")
    if np.abs(x0).max(initial=0.0) > 1.0 + 1e-5:
        raise ForgemapError("q_sample: x0 outside diffusion range [-1, 1]")
    t = _check_t(t, sched.T)
    ab = sched.alpha_bar[t - 1]
    shape = (-1,) + (1,) * (x0.ndim - 1) if np.ndim(t) else ()
    ab = np.asarray(ab, dtype=np.float64).reshape(shape)
    return np.sqrt(ab) * x0.astype(np.float64) + np.sqrt(1.0 - ab) * eps.astype(np.float64)


def diffusion_loss(model, x0: np.ndarray, conditions, rng: np.random.Generator,
                   sched: NoiseSchedule):
    """Noise-prediction MSE on one batch.

    Draws per-sample uniform timesteps then standard-normal noise, forms the
    noisy batch, and returns (loss, aux) where aux carries everything a
    training step needs to push the gradient back through the model:
    ``xt, t, eps, eps_pred``.
    """
    n = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(x0.shape, dtype=np.float32).astype(x0.dtype)
    xt = q_sample(x0, t, eps, sched).astype(x0.dtype)
    eps_pred = model(xt, t, conditions)
    if eps_pred.shape != eps.shape:
        raise ShapeError(f"model output {eps_pred.shape} != noise {eps.shape}")
    if not np.isfinite(eps_pred).all():
        raise NonFiniteError("diffusion_loss: non-finite model output")
    d = eps_pred - eps
    loss = float(np.mean(d * d))
    return loss, {"xt": xt, "t": t, "eps": eps, "eps_pred": eps_pred}


def denoise_step(xt: np.ndarray, t, eps_pred: np.ndarray, sched: NoiseSchedule,
                 rule: str = "paper-eq4", noise: np.ndarray | None = None) -> np.ndarray:
    """One reverse update x_t -> x_{t-1} under the chosen rule.

    For ``ddpm-ancestral`` the caller supplies the standard-normal draw in
    ``noise`` (ignored at t=1, where the update is deterministic).
    """
    if rule not in RULES:
        raise ForgemapError(f"unknown reverse rule {rule!r}")
    t_arr = _check_t(t, sched.T)
    xt = xt.astype(np.float64)
    eps_pred = eps_pred.astype(np.float64)
    shape = (-1,) + (1,) * (xt.ndim - 1) if np.ndim(t_arr) else ()
    ab = np.asarray(sched.alpha_bar[t_arr - 1], dtype=np.float64).reshape(shape)
    if rule == "paper-eq4":
        return (xt - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)
    a = np.asarray(sched.alpha[t_arr - 1], dtype=np.float64).reshape(shape)
    b = np.asarray(sched.beta[t_arr - 1], dtype=np.float64).reshape(shape)
    mean = (xt - b / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(a)
    if int(np.min(t_arr)) <= 1 or noise is None:
        return mean
    ab_prev = np.asarray(sched.alpha_bar[t_arr - 2], dtype=np.float64).reshape(shape)
    var = (1.0 - ab_prev) / (1.0 - ab) * b
    return mean + np.sqrt(var) * noise.astype(np.float64)


def sample(model, conditions, sched: NoiseSchedule, seeds, rule: str = "paper-eq4",
           map_shape=(1, 32, 32)) -> np.ndarray:
    """Generate maps for a batch by iterating the reverse chain from t=T to 1.

    ``seeds`` is one integer per sample; each sample consumes its own RNG
    stream so results do not depend on how samples are batched. The chain
    state is kept in float64 for headroom; the model always sees float32.
    Returns maps rescaled into [0, 1], shape [N, *map_shape].
    """
    if rule not in RULES:
        raise ForgemapError(f"unknown reverse rule {rule!r}")
    seeds = list(seeds)
    n = len(seeds)
    rngs = [np.random.default_rng(np.random.SeedSequence([int(s)])) for s in seeds]
    x = np.stack([r.standard_normal(map_shape, dtype=np.float32) for r in rngs])
    x = x.astype(np.float64)
    for t in range(sched.T, 0, -1):
        eps_pred = model(x.astype(np.float32), np.full(n, t, dtype=np.int64), conditions)
        noise = None
        if rule == "ddpm-ancestral" and t > 1:
            noise = np.stack([r.standard_normal(map_shape, dtype=np.float32)
                              for r in rngs]).astype(np.float64)
        x = denoise_step(x, t, eps_pred.astype(np.float64), sched, rule=rule, noise=noise)
        if rule == "paper-eq4":
            # each iterate is a clean-signal estimate, so it lives in the
            # data range; unclamped, prediction error compounds by
            # 1/sqrt(abar_t) per step and overflows
            x = np.clip(x, -1.0, 1.0)
        if not np.isfinite(x).all():
            raise NonFiniteError(f"sample: non-finite state at t={t}")
    return from_diffusion_domain(x).astype(np.float32)
