"""Staged training protocol.

Stage 0 trains the detector alone (cross-entropy). Stage 1 freezes the
detector and trains the conditioning projectors plus the denoiser on the
noise-prediction objective, with real samples contributing all-zero target
maps. Stage 2 freezes detector, projectors and denoiser, generates one map
per training sample with the frozen sampler (cached across epochs unless
resampling is enabled), and trains the fusion head with cross-entropy.

Two ablation trainers ride along: a direct-regression baseline (same
conditioned U-Net, one forward pass, MSE to the target map) and a
single-stage trainer that optimizes generator and classifier jointly with
noise-MSE + ce_weight * CE, feeding the classifier the clean-signal estimate
implied by the current noise prediction.

Every trainer is a pure function of (data bytes, config, seed): batch order,
parameter init, and noise draws all derive from named substreams of the seed.
Frozen parameter sets are byte-checked after training and any violation
raises ``FreezeViolation``.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffusion, layers, networks, synth
from .checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from .errors import ForgemapError, FreezeViolation, NonFiniteError
from .optim import adamw_init, adamw_step, cosine_lr

# Substream tags under the run seed.
STREAM_INIT = 21
STREAM_BATCH = 22
STREAM_NOISE = 23
STREAM_STAGE2_MAPS = 24
STREAM_EVAL_MAPS = 25

_CE = layers.LayerSpec("softmax-cross-entropy")
_MSE = layers.LayerSpec("mse")


@dataclass
class RunRecord:
    stage: str
    config_hash: str
    seed: int
    checkpoint_path: str
    epoch_losses: list = field(default_factory=list)
    wall_clock: float = 0.0
    extras: dict = field(default_factory=dict)

    def write(self, out_dir):
        path = os.path.join(out_dir, f"runrecord_{self.stage}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "config_hash", "seed", "stage"])
            for i, loss in enumerate(self.epoch_losses, start=1):
                w.writerow([i, repr(float(loss)), self.config_hash, self.seed, self.stage])
        meta = {"stage": self.stage, "config_hash": self.config_hash,
                "seed": self.seed, "checkpoint": os.path.basename(self.checkpoint_path),
                "wall_clock_s": round(self.wall_clock, 3), **self.extras}
        with open(os.path.join(out_dir, f"runmeta_{self.stage}.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _rng(*entropy):
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def build_models(cfg):
    det = networks.Detector(cfg.get("detector.channels"))
    unet = networks.CondUNet(cfg.get("unet.channels"), cfg.get("unet.time_dim"))
    proj = networks.CondProjectors(det, unet, cfg.get("unet.placement"),
                                   cfg.get("data.image_size"))
    fuse = networks.FusionHead(cfg.get("detector.channels"), cfg.get("fusion.mode"))
    return det, unet, proj, fuse


def make_schedule(cfg):
    return diffusion.make_schedule(cfg.get("diffusion.T"),
                                   cfg.get("diffusion.beta_start"),
                                   cfg.get("diffusion.beta_end"))


def _epochs_batches(n, batch, epochs, seed):
    rng = _rng(seed, STREAM_BATCH)
    for _ in range(epochs):
        order = rng.permutation(n)
        yield [order[i:i + batch] for i in range(0, n, batch)]


def _check_loss(loss, stage):
    if not np.isfinite(loss):
        raise NonFiniteError(f"{stage}: loss diverged to {loss}")
    return float(loss)


def _lr(cfg, section, step, total):
    if cfg.get(f"{section}.schedule") == "constant":
        return cfg.get(f"{section}.lr")
    return cosine_lr(step, total, cfg.get(f"{section}.lr"), cfg.get(f"{section}.lr_min"))


def _subset(params, prefixes):
    return {k: params[k] for k in params if k.startswith(prefixes)}


def _freeze_guard(params, prefixes):
    frozen = _subset(params, prefixes)
    return prefixes, checkpoint_bytes(frozen)


def _freeze_check(params, guard, stage):
    prefixes, before = guard
    after = checkpoint_bytes(_subset(params, prefixes))
    if before != after:
        raise FreezeViolation(f"{stage}: frozen parameters ({prefixes}) changed")


def detector_pyramids(det, params, images, batch=64):
    """Run the frozen detector over a dataset once; returns 4 stacked arrays."""
    outs = [[] for _ in range(4)]
    logits_all = []
    for i in range(0, images.shape[0], batch):
        pyr, logits = det.forward(images[i:i + batch], params)
        for j in range(4):
            outs[j].append(pyr[j])
        logits_all.append(logits)
    return [np.concatenate(o) for o in outs], np.concatenate(logits_all)


def generate_maps(det, proj, unet, params, images, sched, rule, seeds,
                  batch=64, pyramids=None):
    """Sample one map per image with the frozen generator, batched."""
    n = images.shape[0]
    size = images.shape[-1]
    maps = np.empty((n, 1, size, size), dtype=np.float32)
    for i in range(0, n, batch):
        if pyramids is not None:
            pyr = [p[i:i + batch] for p in pyramids]
        else:
            pyr, _ = det.forward(images[i:i + batch], params)
        conds = proj.forward(pyr, params)

        def model(xt, t, c):
            return unet.forward(xt.astype(np.float32), t, c, params)

        maps[i:i + batch] = diffusion.sample(
            model, conds, sched, seeds[i:i + batch], rule=rule, map_shape=(1, size, size))
    return maps


def stage0_pretrain_detector(manifest_path, cfg, out_dir, seed):
    """Train the detector with cross-entropy; returns (ckpt_path, RunRecord)."""
    t0 = time.time()
    os.makedirs(out_dir, exist_ok=True)
    data = synth.load_sample_arrays(manifest_path)
    images, labels = data["images"], data["labels"]
    det, _, _, _ = build_models(cfg)
    params = det.init_params(_rng(seed, STREAM_INIT, 0))
    sec = "train.stage0"
    epochs, batch = cfg.get(f"{sec}.epochs"), cfg.get(f"{sec}.batch")
    state = adamw_init(params, cfg.get(f"{sec}.lr"), cfg.get(f"{sec}.weight_decay"))
    total = epochs * max(1, -(-images.shape[0] // batch))
    step = 0
    losses = []
    for batches in _epochs_batches(images.shape[0], batch, epochs, seed):
        epoch_loss = []
        for idx in batches:
            cache, grads = {}, {}
            _, logits = det.forward(images[idx], params, cache)
            loss = layers.forward(_CE, logits, {"target": labels[idx]})
            d_logits, _ = layers.backward(_CE, logits, {"target": labels[idx]},
                                          np.float32(1.0))
            det.backward(params, cache, grads, d_logits=d_logits)
            state.lr = _lr(cfg, sec, step, total)
            adamw_step(state, params, grads)
            step += 1
            epoch_loss.append(_check_loss(loss, "stage0") * len(idx))
        losses.append(sum(epoch_loss) / images.shape[0])
    ckpt = os.path.join(out_dir, "detector.ckpt")
    save_checkpoint(ckpt, params)
    rec = RunRecord("stage0", cfg.hash(), seed, ckpt, losses, time.time() - t0)
    rec.write(out_dir)
    return ckpt, rec


def stage1_train_diffusion(detector_ckpt, manifest_path, cfg, out_dir, seed):
    """Train projectors + denoiser against the frozen detector's features."""
    t0 = time.time()
    os.makedirs(out_dir, exist_ok=True)
    data = synth.load_sample_arrays(manifest_path)
    images, maps = data["images"], data["maps"]
    det, unet, proj, _ = build_models(cfg)
    params = dict(load_checkpoint(detector_ckpt))
    params.update(unet.init_params(_rng(seed, STREAM_INIT, 1)))
    params.update(proj.init_params(_rng(seed, STREAM_INIT, 2)))
    guard = _freeze_guard(params, ("det.",))
    trainable = _subset(params, ("unet.", "proj."))

    sched = make_schedule(cfg)
    pyramids, _ = detector_pyramids(det, params, images)
    x0_all = diffusion.to_diffusion_domain(maps)

    sec = "train.stage1"
    epochs, batch = cfg.get(f"{sec}.epochs"), cfg.get(f"{sec}.batch")
    state = adamw_init(trainable, cfg.get(f"{sec}.lr"), cfg.get(f"{sec}.weight_decay"))
    total = epochs * max(1, -(-images.shape[0] // batch))
    noise_rng = _rng(seed, STREAM_NOISE, 1)
    step = 0
    losses = []
    for batches in _epochs_batches(images.shape[0], batch, epochs, seed):
        epoch_loss = []
        for idx in batches:
            cache, grads = {}, {}
            pyr = [p[idx] for p in pyramids]
            conds = proj.forward(pyr, params, cache)

            def model(xt, t, c):
                return unet.forward(xt.astype(np.float32), t, c, params, cache)

            loss, aux = diffusion.diffusion_loss(model, x0_all[idx], conds,
                                                 noise_rng, sched)
            d_eps = (aux["eps_pred"] - aux["eps"]) * np.float32(2.0 / aux["eps"].size)
            _, d_conds = unet.backward(d_eps, params, cache, grads)
            proj.backward(d_conds, params, cache, grads)
            state.lr = _lr(cfg, sec, step, total)
            adamw_step(state, trainable, grads)
            step += 1
            epoch_loss.append(_check_loss(loss, "stage1") * len(idx))
        losses.append(sum(epoch_loss) / images.shape[0])
    _freeze_check(params, guard, "stage1")
    ckpt = os.path.join(out_dir, "diffusion.ckpt")
    save_checkpoint(ckpt, trainable)
    rec = RunRecord("stage1", cfg.hash(), seed, ckpt, losses, time.time() - t0)
    rec.write(out_dir)
    return ckpt, rec


def _stage2_maps(det, proj, unet, params, cfg, data, seed, stream=STREAM_STAGE2_MAPS):
    sched = make_schedule(cfg)
    seeds = [int(np.random.SeedSequence([seed, stream, int(i)]).generate_state(1)[0])
             for i in data["ids"]]
    return generate_maps(det, proj, unet, params, data["images"], sched,
                         cfg.get("diffusion.rule"), seeds,
                         batch=cfg.get("train.stage2.sample_batch"))


def stage2_train_fusion(detector_ckpt, diffusion_ckpt, manifest_path, cfg,
                        out_dir, seed, use_gt_maps=None):
    """Train the fusion head on frozen-generator maps (or GT maps for ablation)."""
    t0 = time.time()
    os.makedirs(out_dir, exist_ok=True)
    data = synth.load_sample_arrays(manifest_path)
    images, labels = data["images"], data["labels"]
    det, unet, proj, fuse = build_models(cfg)
    params = dict(load_checkpoint(detector_ckpt))
    params.update(load_checkpoint(diffusion_ckpt))
    params.update(fuse.init_params(_rng(seed, STREAM_INIT, 3)))
    guard = _freeze_guard(params, ("det.", "unet.", "proj."))
    trainable = _subset(params, ("fuse.",))

    if use_gt_maps is None:
        use_gt_maps = cfg.get("train.stage2.use_gt_maps")
    pyramids, _ = detector_pyramids(det, params, images)
    f4_all = pyramids[3]
    if use_gt_maps:
        maps = data["maps"]
    else:
        maps = _stage2_maps(det, proj, unet, params, cfg, data, seed)

    sec = "train.stage2"
    epochs, batch = cfg.get(f"{sec}.epochs"), cfg.get(f"{sec}.batch")
    resample = cfg.get(f"{sec}.resample_maps") and not use_gt_maps
    state = adamw_init(trainable, cfg.get(f"{sec}.lr"), cfg.get(f"{sec}.weight_decay"))
    total = epochs * max(1, -(-images.shape[0] // batch))
    step = 0
    losses = []
    for epoch, batches in enumerate(_epochs_batches(images.shape[0], batch, epochs, seed)):
        if resample and epoch > 0:
            maps = _stage2_maps(det, proj, unet, params, cfg, data,
                                seed + 1000 * epoch)
        epoch_loss = []
        for idx in batches:
            cache, grads = {}, {}
            logits = fuse.forward(maps[idx], f4_all[idx], params, cache)
            loss = layers.forward(_CE, logits, {"target": labels[idx]})
            d_logits, _ = layers.backward(_CE, logits, {"target": labels[idx]},
                                          np.float32(1.0))
            fuse.backward(d_logits, f4_all[idx], params, cache, grads)
            state.lr = _lr(cfg, sec, step, total)
            adamw_step(state, trainable, {k: grads[k] for k in trainable})
            step += 1
            epoch_loss.append(_check_loss(loss, "stage2") * len(idx))
        losses.append(sum(epoch_loss) / images.shape[0])
    _freeze_check(params, guard, "stage2")
    ckpt = os.path.join(out_dir, "fusion.ckpt")
    save_checkpoint(ckpt, trainable)
    rec = RunRecord("stage2", cfg.hash(), seed, ckpt, losses, time.time() - t0,
                    extras={"use_gt_maps": bool(use_gt_maps)})
    rec.write(out_dir)
    return ckpt, rec


def train_regression_baseline(detector_ckpt, manifest_path, cfg, out_dir, seed):
    """Same conditioned U-Net, trained to regress the target map in one pass."""
    t0 = time.time()
    os.makedirs(out_dir, exist_ok=True)
    data = synth.load_sample_arrays(manifest_path)
    images, maps = data["images"], data["maps"]
    det, unet, proj, _ = build_models(cfg)
    params = dict(load_checkpoint(detector_ckpt))
    params.update(unet.init_params(_rng(seed, STREAM_INIT, 1)))
    params.update(proj.init_params(_rng(seed, STREAM_INIT, 2)))
    guard = _freeze_guard(params, ("det.",))
    trainable = _subset(params, ("unet.", "proj."))

    pyramids, _ = detector_pyramids(det, params, images)
    x0_all = diffusion.to_diffusion_domain(maps)
    zero_in = np.zeros((1, 1, images.shape[-2], images.shape[-1]), dtype=np.float32)

    sec = "train.regression"
    epochs, batch = cfg.get(f"{sec}.epochs"), cfg.get(f"{sec}.batch")
    state = adamw_init(trainable, cfg.get(f"{sec}.lr"), cfg.get(f"{sec}.weight_decay"))
    total = epochs * max(1, -(-images.shape[0] // batch))
    step = 0
    losses = []
    for batches in _epochs_batches(images.shape[0], batch, epochs, seed):
        epoch_loss = []
        for idx in batches:
            cache, grads = {}, {}
            pyr = [p[idx] for p in pyramids]
            conds = proj.forward(pyr, params, cache)
            xin = np.broadcast_to(zero_in, (len(idx),) + zero_in.shape[1:])
            t = np.ones(len(idx), dtype=np.int64)
            pred = unet.forward(np.ascontiguousarray(xin), t, conds, params, cache)
            loss = layers.forward(_MSE, pred, {"target": x0_all[idx]})
            d_pred, _ = layers.backward(_MSE, pred, {"target": x0_all[idx]},
                                        np.float32(1.0))
            _, d_conds = unet.backward(d_pred, params, cache, grads)
            proj.backward(d_conds, params, cache, grads)
            state.lr = _lr(cfg, sec, step, total)
            adamw_step(state, trainable, {k: grads[k] for k in trainable})
            step += 1
            epoch_loss.append(_check_loss(loss, "regression") * len(idx))
        losses.append(sum(epoch_loss) / images.shape[0])
    _freeze_check(params, guard, "regression")
    ckpt = os.path.join(out_dir, "regression.ckpt")
    save_checkpoint(ckpt, trainable)
    rec = RunRecord("regression", cfg.hash(), seed, ckpt, losses, time.time() - t0)
    rec.write(out_dir)
    return ckpt, rec


def regression_maps(det, proj, unet, params, images, batch=64, pyramids=None):
    """Single-pass map prediction for the regression baseline."""
    n, _, h, w = images.shape
    out = np.empty((n, 1, h, w), dtype=np.float32)
    for i in range(0, n, batch):
        if pyramids is not None:
            pyr = [p[i:i + batch] for p in pyramids]
        else:
            pyr, _ = det.forward(images[i:i + batch], params)
        conds = proj.forward(pyr, params)
        m = images[i:i + batch].shape[0]
        xin = np.zeros((m, 1, h, w), dtype=np.float32)
        pred = unet.forward(xin, np.ones(m, dtype=np.int64), conds, params)
        out[i:i + batch] = diffusion.from_diffusion_domain(pred).astype(np.float32)
    return out


def single_stage_train(detector_ckpt, manifest_path, cfg, out_dir, seed):
    """Joint generator+classifier training (detector stays frozen).

    The classifier consumes the clean-signal estimate implied by the current
    noise prediction, so both objectives share one U-Net forward pass.
    """
    t0 = time.time()
    os.makedirs(out_dir, exist_ok=True)
    data = synth.load_sample_arrays(manifest_path)
    images, labels, maps = data["images"], data["labels"], data["maps"]
    det, unet, proj, fuse = build_models(cfg)
    params = dict(load_checkpoint(detector_ckpt))
    params.update(unet.init_params(_rng(seed, STREAM_INIT, 1)))
    params.update(proj.init_params(_rng(seed, STREAM_INIT, 2)))
    params.update(fuse.init_params(_rng(seed, STREAM_INIT, 3)))
    guard = _freeze_guard(params, ("det.",))
    trainable = _subset(params, ("unet.", "proj.", "fuse."))

    sched = make_schedule(cfg)
    pyramids, _ = detector_pyramids(det, params, images)
    f4_all = pyramids[3]
    x0_all = diffusion.to_diffusion_domain(maps)
    lam = cfg.get("train.single.ce_weight")

    sec = "train.single"
    epochs, batch = cfg.get(f"{sec}.epochs"), cfg.get(f"{sec}.batch")
    state = adamw_init(trainable, cfg.get(f"{sec}.lr"), cfg.get(f"{sec}.weight_decay"))
    total = epochs * max(1, -(-images.shape[0] // batch))
    noise_rng = _rng(seed, STREAM_NOISE, 1)
    step = 0
    noise_curve, ce_curve = [], []
    for batches in _epochs_batches(images.shape[0], batch, epochs, seed):
        ep_noise, ep_ce = [], []
        for idx in batches:
            cache, grads = {}, {}
            pyr = [p[idx] for p in pyramids]
            conds = proj.forward(pyr, params, cache)

            def model(xt, t, c):
                return unet.forward(xt.astype(np.float32), t, c, params, cache)

            noise_loss, aux = diffusion.diffusion_loss(model, x0_all[idx], conds,
                                                       noise_rng, sched)
            # Clean-signal estimate from the shared forward pass.
            ab = sched.alpha_bar[aux["t"] - 1].reshape(-1, 1, 1, 1)
            xhat = (aux["xt"].astype(np.float64)
                    - np.sqrt(1.0 - ab) * aux["eps_pred"]) / np.sqrt(ab)
            inside = (np.abs(xhat * 0.5 + 0.5 - 0.5) <= 0.5)  # pre-clip range mask
            map_est = diffusion.from_diffusion_domain(xhat).astype(np.float32)
            logits = fuse.forward(map_est, f4_all[idx], params, cache)
            ce_loss = layers.forward(_CE, logits, {"target": labels[idx]})
            d_logits, _ = layers.backward(_CE, logits, {"target": labels[idx]},
                                          np.float32(lam))
            d_map, _ = fuse.backward(d_logits, f4_all[idx], params, cache, grads)
            d_xhat = d_map * 0.5 * inside
            d_eps_ce = (d_xhat * (-np.sqrt(1.0 - ab) / np.sqrt(ab))).astype(np.float32)
            d_eps = (aux["eps_pred"] - aux["eps"]) * np.float32(2.0 / aux["eps"].size)
            _, d_conds = unet.backward(d_eps + d_eps_ce, params, cache, grads)
            proj.backward(d_conds, params, cache, grads)
            state.lr = _lr(cfg, sec, step, total)
            adamw_step(state, trainable, {k: grads[k] for k in trainable})
            step += 1
            ep_noise.append(_check_loss(noise_loss, "single-stage") * len(idx))
            ep_ce.append(_check_loss(ce_loss, "single-stage") * len(idx))
        noise_curve.append(sum(ep_noise) / images.shape[0])
        ce_curve.append(sum(ep_ce) / images.shape[0])
    _freeze_check(params, guard, "single-stage")
    ckpt = os.path.join(out_dir, "single_stage.ckpt")
    save_checkpoint(ckpt, trainable)
    losses = [n + lam * c for n, c in zip(noise_curve, ce_curve)]
    rec = RunRecord("single", cfg.hash(), seed, ckpt, losses, time.time() - t0,
                    extras={"noise_losses": [round(v, 6) for v in noise_curve],
                            "ce_losses": [round(v, 6) for v in ce_curve]})
    rec.write(out_dir)
    return ckpt, rec
