"""Experiment orchestration: the standard two-stage pipeline plus the
ablation grids (fusion mode, denoising steps, sampling seed, training
strategy, conditioning placement, GT-map fusion, regression vs diffusion).

Grid cells share a seed and reuse upstream artifacts whenever the varied
dimension cannot affect them (for example the fusion ablation retrains only
stage 2 against one shared detector + generator). Each runner emits one
comparison CSV with a row per grid cell; values are reported, not asserted.
"""

from __future__ import annotations

import csv
import os

import numpy as np

from . import evaluate, metrics, training
from .checkpoint import load_checkpoint
from .config import ABLATION_KINDS
from .errors import ForgemapError


def run_two_stage(cfg, train_manifest, out_dir, seed, stages=("0", "1", "2")):
    """Train the requested stages, reusing checkpoints already in out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "detector": os.path.join(out_dir, "detector.ckpt"),
        "diffusion": os.path.join(out_dir, "diffusion.ckpt"),
        "fusion": os.path.join(out_dir, "fusion.ckpt"),
    }
    if "0" in stages and not os.path.exists(paths["detector"]):
        training.stage0_pretrain_detector(train_manifest, cfg, out_dir, seed)
    if "1" in stages and not os.path.exists(paths["diffusion"]):
        training.stage1_train_diffusion(paths["detector"], train_manifest, cfg,
                                        out_dir, seed)
    if "2" in stages and not os.path.exists(paths["fusion"]):
        training.stage2_train_fusion(paths["detector"], paths["diffusion"],
                                     train_manifest, cfg, out_dir, seed)
    return paths


def _map_quality(cfg, gen_maps, gt_maps):
    rows = metrics.localization_report(gen_maps[:, 0], gt_maps[:, 0],
                                       config_hash=cfg.hash())
    agg = rows[-1]
    return {"psnr": agg["psnr"], "ssim": agg["ssim"]}


def _eval_aucs(cfg, det_ckpt, dif_ckpt, fus_ckpt, data, seed):
    s_det = evaluate.detector_scores(cfg, det_ckpt, data)
    s_fus = evaluate.fused_scores(cfg, det_ckpt, dif_ckpt, fus_ckpt, data, seed)
    ga = cfg.get("eval.group_average")
    return {
        "auc_detector": metrics.auc(s_det, group_average=ga),
        "auc_fused": metrics.auc(s_fus, group_average=ga),
    }


def _write_grid(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def _diffusion_test_maps(cfg, det_ckpt, dif_ckpt, data, seed):
    det, unet, proj, _ = training.build_models(cfg)
    params = dict(load_checkpoint(det_ckpt))
    params.update(load_checkpoint(dif_ckpt))
    return evaluate.generated_maps(cfg, det, unet, proj, params, data, seed)


def run_ablation(kind: str, cfg, train_manifest, test_manifest, out_dir, seed) -> str:
    """Run one ablation grid; returns the comparison CSV path."""
    if kind not in ABLATION_KINDS:
        raise ForgemapError(f"unknown ablation kind {kind!r}; "
                            f"choose from {', '.join(ABLATION_KINDS)}")
    os.makedirs(out_dir, exist_ok=True)
    data_test = evaluate.load_data(test_manifest)
    runner = {
        "fusion": _ablate_fusion,
        "steps": _ablate_steps,
        "seed": _ablate_seed,
        "strategy": _ablate_strategy,
        "conditioning": _ablate_conditioning,
        "gt-fusion": _ablate_gt_fusion,
        "regression-vs-diffusion": _ablate_regression,
    }[kind]
    return runner(cfg, train_manifest, data_test, out_dir, seed)


def _ablate_fusion(cfg, train_manifest, data_test, out_dir, seed):
    shared = run_two_stage(cfg, train_manifest, os.path.join(out_dir, "shared"),
                           seed, stages=("0", "1"))
    rows = []
    for mode in ("gating", "addition", "hadamard", "concat"):
        sub_cfg = cfg.with_overrides(fusion__mode=mode)
        cell_dir = os.path.join(out_dir, f"fusion_{mode}")
        training.stage2_train_fusion(shared["detector"], shared["diffusion"],
                                     train_manifest, sub_cfg, cell_dir, seed)
        aucs = _eval_aucs(sub_cfg, shared["detector"], shared["diffusion"],
                          os.path.join(cell_dir, "fusion.ckpt"), data_test, seed)
        rows.append({"cell": mode, "config_hash": sub_cfg.hash(), **aucs})
    return _write_grid(os.path.join(out_dir, "ablate_fusion.csv"),
                       ["cell", "config_hash", "auc_detector", "auc_fused"], rows)


def _ablate_steps(cfg, train_manifest, data_test, out_dir, seed):
    det_dir = os.path.join(out_dir, "shared")
    shared = run_two_stage(cfg, train_manifest, det_dir, seed, stages=("0",))
    rows = []
    for steps in cfg.get("ablate.steps"):
        sub_cfg = cfg.with_overrides(diffusion__T=steps)
        cell_dir = os.path.join(out_dir, f"steps_{steps}")
        training.stage1_train_diffusion(shared["detector"], train_manifest,
                                        sub_cfg, cell_dir, seed)
        maps = _diffusion_test_maps(sub_cfg, shared["detector"],
                                    os.path.join(cell_dir, "diffusion.ckpt"),
                                    data_test, seed)
        q = _map_quality(sub_cfg, maps, data_test["maps"])
        rows.append({"cell": steps, "config_hash": sub_cfg.hash(), **q})
    return _write_grid(os.path.join(out_dir, "ablate_steps.csv"),
                       ["cell", "config_hash", "psnr", "ssim"], rows)


def _ablate_seed(cfg, train_manifest, data_test, out_dir, seed):
    shared = run_two_stage(cfg, train_manifest, os.path.join(out_dir, "shared"),
                           seed, stages=("0", "1"))
    rows = []
    psnrs, ssims = [], []
    for i in range(cfg.get("ablate.seeds")):
        maps = _diffusion_test_maps(cfg, shared["detector"], shared["diffusion"],
                                    data_test, seed + 101 * i)
        q = _map_quality(cfg, maps, data_test["maps"])
        psnrs.append(q["psnr"])
        ssims.append(q["ssim"])
        rows.append({"cell": f"seed{seed + 101 * i}", "config_hash": cfg.hash(), **q})
    rows.append({"cell": "mean", "config_hash": cfg.hash(),
                 "psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims))})
    rows.append({"cell": "std", "config_hash": cfg.hash(),
                 "psnr": float(np.std(psnrs)), "ssim": float(np.std(ssims))})
    return _write_grid(os.path.join(out_dir, "ablate_seed.csv"),
                       ["cell", "config_hash", "psnr", "ssim"], rows)


def _ablate_strategy(cfg, train_manifest, data_test, out_dir, seed):
    shared = run_two_stage(cfg, train_manifest, os.path.join(out_dir, "shared"), seed)
    two = _eval_aucs(cfg, shared["detector"], shared["diffusion"],
                     shared["fusion"], data_test, seed)
    single_dir = os.path.join(out_dir, "single")
    training.single_stage_train(shared["detector"], train_manifest, cfg,
                                single_dir, seed)
    single_ckpt = os.path.join(single_dir, "single_stage.ckpt")
    one = _eval_aucs(cfg, shared["detector"], single_ckpt, single_ckpt,
                     data_test, seed)
    rows = [
        {"cell": "two-stage", "config_hash": cfg.hash(), **two},
        {"cell": "single-stage", "config_hash": cfg.hash(), **one},
    ]
    return _write_grid(os.path.join(out_dir, "ablate_strategy.csv"),
                       ["cell", "config_hash", "auc_detector", "auc_fused"], rows)


def _ablate_conditioning(cfg, train_manifest, data_test, out_dir, seed):
    shared = run_two_stage(cfg, train_manifest, os.path.join(out_dir, "shared"),
                           seed, stages=("0",))
    rows = []
    for placement in ("encoder-all", "final-stage-only", "decoder"):
        sub_cfg = cfg.with_overrides(unet__placement=placement)
        cell_dir = os.path.join(out_dir, f"cond_{placement}")
        training.stage1_train_diffusion(shared["detector"], train_manifest,
                                        sub_cfg, cell_dir, seed)
        maps = _diffusion_test_maps(sub_cfg, shared["detector"],
                                    os.path.join(cell_dir, "diffusion.ckpt"),
                                    data_test, seed)
        q = _map_quality(sub_cfg, maps, data_test["maps"])
        rows.append({"cell": placement, "config_hash": sub_cfg.hash(), **q})
    return _write_grid(os.path.join(out_dir, "ablate_conditioning.csv"),
                       ["cell", "config_hash", "psnr", "ssim"], rows)


def _ablate_gt_fusion(cfg, train_manifest, data_test, out_dir, seed):
    shared = run_two_stage(cfg, train_manifest, os.path.join(out_dir, "shared"),
                           seed, stages=("0", "1"))
    rows = []
    for cell, use_gt in (("sampled-maps", False), ("gt-maps", True)):
        cell_dir = os.path.join(out_dir, f"gtfusion_{cell}")
        training.stage2_train_fusion(shared["detector"], shared["diffusion"],
                                     train_manifest, cfg, cell_dir, seed,
                                     use_gt_maps=use_gt)
        aucs = _eval_aucs(cfg, shared["detector"], shared["diffusion"],
                          os.path.join(cell_dir, "fusion.ckpt"), data_test, seed)
        rows.append({"cell": cell, "config_hash": cfg.hash(), **aucs})
    return _write_grid(os.path.join(out_dir, "ablate_gt_fusion.csv"),
                       ["cell", "config_hash", "auc_detector", "auc_fused"], rows)


def _ablate_regression(cfg, train_manifest, data_test, out_dir, seed):
    shared = run_two_stage(cfg, train_manifest, os.path.join(out_dir, "shared"),
                           seed, stages=("0", "1"))
    gen = _diffusion_test_maps(cfg, shared["detector"], shared["diffusion"],
                               data_test, seed)
    reg_dir = os.path.join(out_dir, "regression")
    training.train_regression_baseline(shared["detector"], train_manifest, cfg,
                                       reg_dir, seed)
    det, unet, proj, _ = training.build_models(cfg)
    params = dict(load_checkpoint(shared["detector"]))
    params.update(load_checkpoint(os.path.join(reg_dir, "regression.ckpt")))
    reg = training.regression_maps(det, proj, unet, params, data_test["images"],
                                   batch=cfg.get("eval.sample_batch"))
    rows = [
        {"cell": "diffusion", "config_hash": cfg.hash(),
         **_map_quality(cfg, gen, data_test["maps"])},
        {"cell": "regression", "config_hash": cfg.hash(),
         **_map_quality(cfg, reg, data_test["maps"])},
    ]
    return _write_grid(os.path.join(out_dir, "ablate_regression_vs_diffusion.csv"),
                       ["cell", "config_hash", "psnr", "ssim"], rows)
