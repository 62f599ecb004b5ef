"""Scoring and report generation on top of trained checkpoints."""

from __future__ import annotations

import csv
import os

import numpy as np

from . import diffusion, metrics, networks, synth, training
from .checkpoint import load_checkpoint
from .errors import ForgemapError


def _softmax_fake_prob(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e[:, 1] / e.sum(axis=1)).astype(np.float64)


def detector_scores(cfg, detector_ckpt, data) -> list[metrics.ScoredSample]:
    det, _, _, _ = training.build_models(cfg)
    params = load_checkpoint(detector_ckpt)
    _, logits = training.detector_pyramids(det, params, data["images"])
    probs = _softmax_fake_prob(logits)
    return _scored(data, probs)


def fused_scores(cfg, detector_ckpt, diffusion_ckpt, fusion_ckpt, data, seed,
                 maps_out=None) -> list[metrics.ScoredSample]:
    """Sample a map per input with the frozen generator, then classify fused."""
    det, unet, proj, fuse = training.build_models(cfg)
    params = dict(load_checkpoint(detector_ckpt))
    params.update(load_checkpoint(diffusion_ckpt))
    params.update(load_checkpoint(fusion_ckpt))
    pyramids, _ = training.detector_pyramids(det, params, data["images"])
    maps = generated_maps(cfg, det, unet, proj, params, data, seed, pyramids=pyramids)
    if maps_out is not None:
        maps_out.append(maps)
    batch = cfg.get("eval.sample_batch")
    probs = []
    for i in range(0, maps.shape[0], batch):
        logits = fuse.forward(maps[i:i + batch], pyramids[3][i:i + batch], params)
        probs.append(_softmax_fake_prob(logits))
    return _scored(data, np.concatenate(probs))


def generated_maps(cfg, det, unet, proj, params, data, seed, pyramids=None) -> np.ndarray:
    sched = training.make_schedule(cfg)
    seeds = [int(np.random.SeedSequence([seed, training.STREAM_EVAL_MAPS, int(i)])
                 .generate_state(1)[0]) for i in data["ids"]]
    return training.generate_maps(det, proj, unet, params, data["images"], sched,
                                  cfg.get("diffusion.rule"), seeds,
                                  batch=cfg.get("eval.sample_batch"),
                                  pyramids=pyramids)


def _scored(data, probs) -> list[metrics.ScoredSample]:
    return [metrics.ScoredSample(i, g, int(l), float(p))
            for i, g, l, p in zip(data["ids"], data["groups"], data["labels"], probs)]


def write_scores_csv(path, samples: list[metrics.ScoredSample]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "group_id", "label", "score"])
        for s in samples:
            w.writerow([s.id, s.group_id, "fake" if s.label else "real", repr(s.score)])


def read_scores_csv(path) -> list[metrics.ScoredSample]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"id", "group_id", "label", "score"}
        if not need.issubset(set(reader.fieldnames or ())):
            raise ForgemapError(f"{path}: score CSV needs columns {sorted(need)}")
        for row in reader:
            label = 1 if row["label"] in ("1", "fake") else 0
            out.append(metrics.ScoredSample(row["id"], row["group_id"], label,
                                            float(row["score"])))
    return out


def detect_report(cfg, samples, split="test", out_dir=None, name="detect"):
    """AUC at sample level and group level; returns the metric rows."""
    rows = [
        {"metric": "auc_sample", "split": split, "config_hash": cfg.hash(),
         "value": metrics.auc(samples, group_average=False)},
        {"metric": "auc_group", "split": split, "config_hash": cfg.hash(),
         "value": metrics.auc(samples, group_average=True)},
    ]
    if out_dir:
        metrics.write_metric_csv(os.path.join(out_dir, f"metrics_{name}.csv"), rows)
    return rows


def localize_report(cfg, gen_maps, gt_maps, ids, split="test", out_dir=None,
                    name="localize"):
    rows = metrics.localization_report(gen_maps[:, 0], gt_maps[:, 0], ids=ids,
                                       split=split, config_hash=cfg.hash())
    if out_dir:
        metrics.write_report_csv(os.path.join(out_dir, f"report_{name}.csv"), rows)
    return rows


def load_data(manifest_path):
    return synth.load_sample_arrays(manifest_path)


def export_map_pgms(out_dir, maps, ids):
    from . import imageio
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for m, i in zip(maps, ids):
        p = os.path.join(out_dir, f"gen_{i}.pgm")
        imageio.write_pgm(p, m[0])
        paths.append(p)
    return paths
