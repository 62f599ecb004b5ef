"""Invariant suites behind ``check grad|roundtrip|oracle``.

Each suite prints one line per check and returns True only if everything
passed. The same functions back the acceptance tests, so the CLI and the
test suite cannot drift apart.
"""

from __future__ import annotations

import time

import numpy as np

from . import diffusion, dssim, gradcheck, layers, metrics, synth


def check_grad(trials: int = 100, seed: int = 0, tol: float = 1e-4,
               echo=print) -> bool:
    ok = True
    t0 = time.time()
    for kind in layers.KINDS:
        err = gradcheck.check_kind(kind, trials=trials, seed=seed)
        passed = err < tol
        ok &= passed
        echo(f"grad {kind:24s} trials={trials} max_rel={err:.3e} "
             f"{'PASS' if passed else 'FAIL'}")
    echo(f"grad suite elapsed {time.time() - t0:.1f}s")
    return ok


def check_roundtrip(T: int = 50, seed: int = 0, tol: float = 1e-6,
                    echo=print) -> bool:
    ok = True
    sched = diffusion.make_schedule(T)
    b1, bT = float(sched.beta[0]), float(sched.beta[-1])
    endpoints = (b1 == 0.02 and bT == 0.4)
    ok &= endpoints
    echo(f"roundtrip schedule endpoints beta1={b1} betaT={bT} "
         f"{'PASS' if endpoints else 'FAIL'}")
    mono = bool(np.all(np.diff(sched.alpha_bar) < 0))
    ok &= mono
    echo(f"roundtrip alpha_bar strictly decreasing {'PASS' if mono else 'FAIL'}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(1, T + 1):
        x0 = rng.uniform(-1.0, 1.0, (2, 1, 8, 8)).astype(np.float32)
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        back = diffusion.denoise_step(diffusion.q_sample(x0, t, eps, sched),
                                      t, eps, sched)
        worst = max(worst, float(np.abs(back - x0).max()))
    passed = worst < tol
    ok &= passed
    echo(f"roundtrip identity t=1..{T} worst={worst:.3e} "
         f"{'PASS' if passed else 'FAIL'}")
    return ok


def check_oracle(pairs: int = 200, auc_sets: int = 1000, seed: int = 0,
                 echo=print) -> bool:
    ok = True
    rng = np.random.default_rng(seed)

    worst = 0.0
    for _ in range(pairs):
        x = rng.random((16, 16))
        y = rng.random((16, 16))
        worst = max(worst, float(np.abs(dssim.ssim_map(x, y)
                                        - dssim.ssim_map_naive(x, y)).max()))
    passed = worst < 1e-6
    ok &= passed
    echo(f"oracle dssim optimized-vs-naive pairs={pairs} worst={worst:.3e} "
         f"{'PASS' if passed else 'FAIL'}")

    x = rng.random((16, 16)).astype(np.float32)
    zero = bool(dssim.dssim_map(x, x).max() == 0.0)
    ok &= zero
    echo(f"oracle dssim identical-input zero map {'PASS' if zero else 'FAIL'}")

    base = synth.generate_base(seed, 32)
    mask = np.zeros((32, 32), dtype=np.float32)
    mask[8:16, 8:16] = 1.0
    kind = synth.ManipulationKind("photometric-shift",
                                  {"shift": (0.2, 0.2), "contrast": (1.0, 1.0)})
    fake = synth.forge(base, kind, mask, seed)
    gt = dssim.gt_map_for_sample(base, fake)
    radius = dssim.DEFAULT_PARAMS.window // 2
    outside = np.ones((32, 32), dtype=bool)
    outside[8 - radius:16 + radius, 8 - radius:16 + radius] = False
    local = bool((gt[outside] == 0.0).all() and gt.max() > 0.0)
    ok &= local
    echo(f"oracle dssim locality (window radius {radius}) "
         f"{'PASS' if local else 'FAIL'}")

    worst_auc = 0.0
    for _ in range(auc_sets):
        n = int(rng.integers(4, 51))
        scores = np.round(rng.random(n), 2)  # coarse grid forces ties
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        fast = metrics._rank_auc(scores.astype(np.float64), labels)
        slow = metrics.auc_bruteforce(scores, labels)
        worst_auc = max(worst_auc, abs(fast - slow))
    passed = worst_auc < 1e-12
    ok &= passed
    echo(f"oracle auc rank-vs-paircount sets={auc_sets} worst={worst_auc:.2e} "
         f"{'PASS' if passed else 'FAIL'}")

    scores = rng.random(40)
    labels = rng.integers(0, 2, 40)
    labels[0], labels[1] = 0, 1
    a = metrics._rank_auc(scores, labels)
    b = metrics._rank_auc(np.exp(3.0 * scores), labels)  # strictly monotone
    mono = bool(abs(a - b) < 1e-12)
    ok &= mono
    echo(f"oracle auc monotone-transform invariance {'PASS' if mono else 'FAIL'}")
    return ok
