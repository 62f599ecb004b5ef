"""Command-line entry point.

Heavy imports happen inside ``main`` after the thread cap is applied, so
``--threads 1`` can pin the BLAS pool before numpy loads.

Exit codes: 0 success, 1 contract violation (with diagnostic), 2 bad usage.
"""

from __future__ import annotations

import argparse
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def _apply_threads(argv):
    if "--threads" in argv:
        i = argv.index("--threads")
        if i + 1 < len(argv) and argv[i + 1].isdigit():
            for var in _THREAD_VARS:
                os.environ[var] = argv[i + 1]


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="forgemap",
        description="Forgery-artifact dissimilarity maps via conditional "
                    "diffusion, fused with a detection classifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, out=True, ckpts=()):
        p.add_argument("--config", help="config file (defaults used if omitted)")
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--threads", type=int, default=0,
                       help="cap worker threads (1 = bit-exact reproducible)")
        if data:
            p.add_argument("--data", required=True, help="manifest CSV")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        for name in ckpts:
            p.add_argument(f"--{name}-ckpt", required=True,
                           help=f"{name} checkpoint file")

    common(sub.add_parser("synth", help="build a synthetic dataset"))

    p = sub.add_parser("gt-maps", help="recompute and verify stored GT maps")
    common(p, data=True, out=False)
    p.add_argument("--tolerance", type=float, default=1e-6)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("stage", choices=["detector", "diffusion", "fusion",
                                     "regression", "single-stage"])
    common(p, data=True)
    p.add_argument("--detector-ckpt", help="required for all stages but 'detector'")
    p.add_argument("--diffusion-ckpt", help="required for stage 'fusion'")

    p = sub.add_parser("sample-maps", help="generate maps for a manifest")
    common(p, data=True, ckpts=("detector", "diffusion"))

    p = sub.add_parser("eval", help="evaluate detection or localization")
    p.add_argument("mode", choices=["detect", "localize"])
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=0)
    p.add_argument("--data", help="manifest CSV (detect/localize from checkpoints)")
    p.add_argument("--scores", help="detect: pre-computed scores CSV")
    p.add_argument("--out", help="output directory for report CSVs")
    p.add_argument("--detector-ckpt")
    p.add_argument("--diffusion-ckpt")
    p.add_argument("--fusion-ckpt")
    p.add_argument("--group-average", action="store_true",
                   help="average scores within groups before the AUC")

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("kind", choices=["fusion", "steps", "seed", "strategy",
                                    "conditioning", "gt-fusion",
                                    "regression-vs-diffusion"])
    common(p)
    p.add_argument("--data", help="train manifest (synthesized under --out if omitted)")
    p.add_argument("--test-data", help="test manifest")

    p = sub.add_parser("check", help="run an invariant suite")
    p.add_argument("suite", choices=["grad", "roundtrip", "oracle"])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=0)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_threads(argv)
    parser = _build_parser()
    args = parser.parse_args(argv)

    from .errors import ForgemapError

    try:
        return _dispatch(args)
    except ForgemapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _load_cfg(path):
    from . import config
    return config.load_config(path) if path else config.default_config()


def _dispatch(args) -> int:
    if args.command == "synth":
        from . import synth
        cfg = _load_cfg(args.config)
        train, test = synth.build_dataset(cfg, args.out, args.seed)
        print(f"wrote {train}")
        print(f"wrote {test}")
        return 0

    if args.command == "gt-maps":
        return _cmd_gt_maps(args)

    if args.command == "train":
        return _cmd_train(args)

    if args.command == "sample-maps":
        return _cmd_sample_maps(args)

    if args.command == "eval":
        return _cmd_eval(args)

    if args.command == "ablate":
        return _cmd_ablate(args)

    if args.command == "check":
        return _cmd_check(args)

    raise AssertionError(f"unhandled command {args.command}")


def _cmd_gt_maps(args) -> int:
    import os as _os

    import numpy as np

    from . import checkpoint, dssim, imageio, synth
    rows = synth.read_manifest(args.data)
    base = _os.path.dirname(_os.path.abspath(args.data))
    worst = 0.0
    bad = 0
    for row in rows:
        real = imageio.read_ppm(_os.path.join(base, row["real_path"]))
        fake = (imageio.read_ppm(_os.path.join(base, row["fake_path"]))
                if row["label"] == "fake" else None)
        stored = checkpoint.load_checkpoint(_os.path.join(base, row["map_path"]))["map"]
        recomputed = dssim.gt_map_for_sample(real, fake)
        err = float(np.abs(recomputed - stored).max())
        worst = max(worst, err)
        if err >= args.tolerance:
            bad += 1
            print(f"mismatch id={row['id']} max_abs_err={err:.3e}")
    print(f"verified {len(rows)} maps, worst_abs_err={worst:.3e}, "
          f"tolerance={args.tolerance}")
    return 0 if bad == 0 else 1


def _cmd_train(args) -> int:
    from . import training
    cfg = _load_cfg(args.config)
    need_det = args.stage != "detector"
    if need_det and not args.detector_ckpt:
        print("error: --detector-ckpt required for this stage", file=sys.stderr)
        return 2
    if args.stage == "fusion" and not args.diffusion_ckpt:
        print("error: --diffusion-ckpt required for stage 'fusion'", file=sys.stderr)
        return 2
    if args.stage == "detector":
        ckpt, _ = training.stage0_pretrain_detector(args.data, cfg, args.out, args.seed)
    elif args.stage == "diffusion":
        ckpt, _ = training.stage1_train_diffusion(args.detector_ckpt, args.data,
                                                  cfg, args.out, args.seed)
    elif args.stage == "fusion":
        ckpt, _ = training.stage2_train_fusion(args.detector_ckpt, args.diffusion_ckpt,
                                               args.data, cfg, args.out, args.seed)
    elif args.stage == "regression":
        ckpt, _ = training.train_regression_baseline(args.detector_ckpt, args.data,
                                                     cfg, args.out, args.seed)
    else:
        ckpt, _ = training.single_stage_train(args.detector_ckpt, args.data,
                                              cfg, args.out, args.seed)
    print(f"wrote {ckpt}")
    return 0


def _cmd_sample_maps(args) -> int:
    import os as _os

    from . import checkpoint, evaluate, training
    cfg = _load_cfg(args.config)
    data = evaluate.load_data(args.data)
    det, unet, proj, _ = training.build_models(cfg)
    params = dict(checkpoint.load_checkpoint(args.detector_ckpt))
    params.update(checkpoint.load_checkpoint(args.diffusion_ckpt))
    maps = evaluate.generated_maps(cfg, det, unet, proj, params, data, args.seed)
    _os.makedirs(args.out, exist_ok=True)
    evaluate.export_map_pgms(_os.path.join(args.out, "maps_pgm"), maps, data["ids"])
    for m, i in zip(maps, data["ids"]):
        checkpoint.save_checkpoint(
            _os.path.join(args.out, f"gen_{i}.dfft"), {"map": m[0]})
    print(f"wrote {maps.shape[0]} maps to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    import os as _os

    from . import evaluate, metrics
    cfg = _load_cfg(args.config)
    if args.mode == "detect":
        if args.scores:
            samples = evaluate.read_scores_csv(args.scores)
        else:
            if not (args.data and args.detector_ckpt):
                print("error: eval detect needs --scores or --data with "
                      "--detector-ckpt", file=sys.stderr)
                return 2
            data = evaluate.load_data(args.data)
            if args.diffusion_ckpt and args.fusion_ckpt:
                samples = evaluate.fused_scores(cfg, args.detector_ckpt,
                                                args.diffusion_ckpt,
                                                args.fusion_ckpt, data, args.seed)
            else:
                samples = evaluate.detector_scores(cfg, args.detector_ckpt, data)
            if args.out:
                _os.makedirs(args.out, exist_ok=True)
                evaluate.write_scores_csv(_os.path.join(args.out, "scores.csv"),
                                          samples)
        value = metrics.auc(samples, group_average=args.group_average)
        print(f"AUC {value}")
        if args.out:
            _os.makedirs(args.out, exist_ok=True)
            evaluate.detect_report(cfg, samples, out_dir=args.out)
        return 0

    # localize
    if not (args.data and args.detector_ckpt and args.diffusion_ckpt):
        print("error: eval localize needs --data, --detector-ckpt and "
              "--diffusion-ckpt", file=sys.stderr)
        return 2
    from . import checkpoint, training
    data = evaluate.load_data(args.data)
    det, unet, proj, _ = training.build_models(cfg)
    params = dict(checkpoint.load_checkpoint(args.detector_ckpt))
    params.update(checkpoint.load_checkpoint(args.diffusion_ckpt))
    maps = evaluate.generated_maps(cfg, det, unet, proj, params, data, args.seed)
    rows = evaluate.localize_report(cfg, maps, data["maps"], data["ids"],
                                    out_dir=args.out)
    agg = rows[-1]
    print(f"PSNR {agg['psnr']:.4f} (inf x{agg['psnr_inf_count']}) "
          f"SSIM {agg['ssim']:.4f}")
    return 0


def _cmd_ablate(args) -> int:
    import os as _os

    from . import ablation, synth
    cfg = _load_cfg(args.config)
    if args.data and args.test_data:
        train, test = args.data, args.test_data
    else:
        data_dir = _os.path.join(args.out, "data")
        if _os.path.exists(_os.path.join(data_dir, "train.csv")):
            train = _os.path.join(data_dir, "train.csv")
            test = _os.path.join(data_dir, "test.csv")
        else:
            train, test = synth.build_dataset(cfg, data_dir, args.seed)
    path = ablation.run_ablation(args.kind, cfg, train, test, args.out, args.seed)
    print(f"wrote {path}")
    return 0


def _cmd_check(args) -> int:
    from . import selfcheck
    if args.suite == "grad":
        ok = selfcheck.check_grad(trials=args.trials, seed=args.seed)
    elif args.suite == "roundtrip":
        ok = selfcheck.check_roundtrip(seed=args.seed)
    else:
        ok = selfcheck.check_oracle(seed=args.seed)
    print("all checks passed" if ok else "CHECK FAILURES")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
