"""Procedural aligned real/fake pair generator.

Stands in for face data: structured base images get a localized manipulation
blended through a soft blob mask, so every fake sample comes with an exact
blend mask and an exact ground-truth dissimilarity map. Everything is a pure
function of (dataset seed, sample position); images are quantized to the
8-bit file grid *before* the pair is forged, which makes the stored maps
recomputable bit-for-bit from the files on disk.

Group structure: consecutive samples form a pseudo-clip sharing one base
image, one label, and (for fakes) one mask and one set of manipulation
parameters; frames differ by small photometric jitter and noise.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, imageio
from .dssim import DssimParams, gt_map_for_sample
from .errors import ConfigError, ForgemapError

MANIPULATION_KINDS = ("photometric-shift", "local-blur", "patch-swap", "warp-blend")

MANIFEST_COLUMNS = ("id", "group_id", "label", "kind",
                    "real_path", "fake_path", "mask_path", "map_path")

# Stream tags so every consumer of the dataset seed gets its own substream.
_STREAM_BASE = 11
_STREAM_MASK = 12
_STREAM_FORGE = 13
_STREAM_JITTER = 14


@dataclass(frozen=True)
class ManipulationKind:
    """A manipulation family plus the parameter ranges it draws from."""

    name: str
    ranges: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in MANIPULATION_KINDS:
            raise ForgemapError(f"unknown manipulation kind {self.name!r}")

    @staticmethod
    def defaults(name: str, cfg=None) -> "ManipulationKind":
        get = (lambda k, d: cfg.get(k) if cfg is not None else d)
        table = {
            "photometric-shift": {
                "shift": (get("data.shift_min", 0.08), get("data.shift_max", 0.30)),
                "contrast": (get("data.contrast_min", 0.85), get("data.contrast_max", 1.15)),
            },
            "local-blur": {
                "radius": (get("data.blur_min", 1), get("data.blur_max", 3)),
            },
            "patch-swap": {
                "offset": (get("data.swap_min", 4), get("data.swap_max", 10)),
            },
            "warp-blend": {
                "amplitude": (get("data.warp_min", 0.8), get("data.warp_max", 2.5)),
                "freq": (1, 3),
            },
        }
        return ManipulationKind(name, table[name])


def _rng(*entropy) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def generate_base(seed, size: int = 32) -> np.ndarray:
    """Deterministic structured [3, size, size] image in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    img = np.empty((3, size, size), dtype=np.float64)

    # Smooth per-channel background: affine + radial gradients around a base color.
    base = rng.uniform(0.2, 0.8, 3)
    for c in range(3):
        ax, ay, ar = rng.uniform(-0.45, 0.45, 3)
        img[c] = base[c] + ax * (xx - 0.5) + ay * (yy - 0.5) \
            + ar * ((xx - 0.5) ** 2 + (yy - 0.5) ** 2)

    # Soft-edged ellipses give the image object-like structure.
    for _ in range(int(rng.integers(3, 7))):
        cx, cy = rng.uniform(0.15, 0.85, 2)
        sx, sy = rng.uniform(0.08, 0.35, 2)
        theta = rng.uniform(0.0, np.pi)
        color = rng.uniform(0.0, 1.0, 3)
        dx, dy = xx - cx, yy - cy
        u = (np.cos(theta) * dx + np.sin(theta) * dy) / sx
        v = (-np.sin(theta) * dx + np.cos(theta) * dy) / sy
        dist = np.sqrt(u * u + v * v)
        alpha = _smoothstep((1.0 - dist) / (2.5 / size) * 0.5 + 0.5)
        img += alpha[None] * (color[:, None, None] - img)

    # Two octaves of value noise for nontrivial local statistics.
    for scale, amp in ((4, 0.05), (2, 0.03)):
        coarse = rng.normal(0.0, 1.0, (3, size // scale, size // scale))
        img += amp * coarse.repeat(scale, axis=1).repeat(scale, axis=2)
    img += 0.015 * rng.normal(0.0, 1.0, img.shape)

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_mask(seed, shape: tuple[int, int], feather: float = 2.0) -> np.ndarray:
    """Soft blob mask in [0, 1] whose support covers 5-40% of the image."""
    rng = np.random.default_rng(seed)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(64):
        cy = rng.uniform(0.3, 0.7) * h
        cx = rng.uniform(0.3, 0.7) * w
        target = rng.uniform(0.10, 0.30)
        r0 = np.sqrt(target * h * w / np.pi)
        amps = rng.uniform(0.0, 0.22, 3)
        phases = rng.uniform(0.0, 2.0 * np.pi, 3)
        theta = np.arctan2(yy - cy, xx - cx)
        rho = np.hypot(yy - cy, xx - cx)
        edge = r0 * (1.0 + sum(a * np.cos((k + 1) * theta + p)
                               for k, (a, p) in enumerate(zip(amps, phases))))
        mask = _smoothstep((edge - rho) / feather + 0.5).astype(np.float32)
        frac = float((mask > 0).mean())
        if 0.05 <= frac <= 0.40:
            return mask
    raise ForgemapError("make_mask: could not fit support into [0.05, 0.40]")


def _box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return img.copy()
    k = 2 * radius + 1
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        p = np.pad(img[c].astype(np.float64), radius, mode="reflect")
        s = p.cumsum(axis=0)
        p = np.vstack([s[k - 1:k], s[k:] - s[:-k]])
        s = p.cumsum(axis=1)
        p = np.hstack([s[:, k - 1:k], s[:, k:] - s[:, :-k]])
        out[c] = (p / (k * k)).astype(img.dtype)
    return out


def _bilinear_gather(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample [C,H,W] at float coordinates (clamped); exact at integer coords."""
    _, h, w = img.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(img.dtype)
    fx = (xs - x0).astype(img.dtype)
    v00 = img[:, y0, x0]
    v01 = img[:, y0, x1]
    v10 = img[:, y1, x0]
    v11 = img[:, y1, x1]
    top = (1 - fx) * v00 + fx * v01
    bot = (1 - fx) * v10 + fx * v11
    return (1 - fy) * top + fy * bot


def _transform(real: np.ndarray, kind: ManipulationKind, rng: np.random.Generator) -> np.ndarray:
    _, h, w = real.shape
    r = kind.ranges
    if kind.name == "photometric-shift":
        contrast = rng.uniform(*r["contrast"])
        shifts = (rng.uniform(r["shift"][0], r["shift"][1], 3)
                  * rng.choice([-1.0, 1.0], 3)).astype(real.dtype)
        t = real if contrast == 1.0 else ((real - 0.5) * real.dtype.type(contrast) + 0.5)
        return np.clip(t + shifts[:, None, None], 0.0, 1.0).astype(real.dtype)
    if kind.name == "local-blur":
        radius = int(rng.integers(r["radius"][0], r["radius"][1] + 1))
        return _box_blur(real, radius)
    if kind.name == "patch-swap":
        lo, hi = r["offset"]
        dy = int(rng.integers(lo, hi + 1)) * int(rng.choice([-1, 1]))
        dx = int(rng.integers(lo, hi + 1)) * int(rng.choice([-1, 1]))
        if lo == hi == 0:
            dy = dx = 0
        return np.roll(real, (dy, dx), axis=(1, 2))
    if kind.name == "warp-blend":
        amp = rng.uniform(*r["amplitude"])
        fy = int(rng.integers(r["freq"][0], r["freq"][1] + 1))
        fx = int(rng.integers(r["freq"][0], r["freq"][1] + 1))
        p1, p2 = rng.uniform(0.0, 2.0 * np.pi, 2)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        dxs = amp * np.sin(2.0 * np.pi * fy * yy / h + p1)
        dys = amp * np.sin(2.0 * np.pi * fx * xx / w + p2)
        return _bilinear_gather(real, yy + dys, xx + dxs).astype(real.dtype)
    raise ForgemapError(f"unknown manipulation kind {kind.name!r}")


def forge(real: np.ndarray, kind: ManipulationKind, mask: np.ndarray, seed) -> np.ndarray:
    """Blend a transformed copy into ``real`` through ``mask``.

    Wherever the mask is exactly zero the output equals ``real`` bit-exactly.
    """
    if mask.shape != real.shape[-2:]:
        raise ForgemapError(f"forge: mask {mask.shape} does not match image {real.shape}")
    rng = np.random.default_rng(seed)
    t = _transform(real, kind, rng)
    # algebraically mask*t + (1-mask)*real, but exact where t == real
    blend = real + mask[None] * (t - real)
    return np.where(mask[None] > 0, blend, real).astype(real.dtype)


def _jitter_frame(base: np.ndarray, rng: np.random.Generator,
                  jitter: float, noise: float) -> np.ndarray:
    offset = rng.uniform(-jitter, jitter, 3).astype(np.float64)
    out = base.astype(np.float64) + offset[:, None, None]
    out += noise * rng.normal(0.0, 1.0, base.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _parse_kinds(names, cfg) -> list[ManipulationKind]:
    kinds = []
    for name in names:
        kinds.append(ManipulationKind.defaults(name, cfg))
    return kinds


def write_manifest(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(MANIFEST_COLUMNS):
            raise ForgemapError(f"{path}: unexpected manifest columns {reader.fieldnames}")
        return list(reader)


def build_dataset(cfg, out_dir, seed: int) -> tuple[str, str]:
    """Write images, masks, GT maps and train/test manifests under out_dir.

    Returns (train_manifest_path, test_manifest_path).
    """
    size = cfg.get("data.image_size")
    group = cfg.get("data.group_size")
    feather = cfg.get("data.mask_feather")
    jitter = cfg.get("data.jitter")
    noise = cfg.get("data.noise")
    splits = (
        ("train", cfg.get("data.train_real"), cfg.get("data.train_fake"),
         _parse_kinds(cfg.get("data.train_kinds"), cfg)),
        ("test", cfg.get("data.test_real"), cfg.get("data.test_fake"),
         _parse_kinds(cfg.get("data.test_kinds"), cfg)),
    )
    for name, n_real, n_fake, kinds in splits:
        if n_real % group or n_fake % group:
            raise ConfigError(f"{name} counts must be divisible by group_size={group}")
        if not kinds:
            raise ConfigError(f"{name}: at least one manipulation kind required")

    for sub in ("images", "masks", "maps"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    manifests = {}
    sample_id = 0
    group_id = 0
    for split_idx, (split, n_real, n_fake, kinds) in enumerate(splits):
        rows = []
        plan = [("real", None)] * (n_real // group)
        plan += [("fake", kinds[g % len(kinds)]) for g in range(n_fake // group)]
        for gi, (label, kind) in enumerate(plan):
            base = generate_base(_rng(seed, _STREAM_BASE, split_idx, gi), size)
            mask = None
            if label == "fake":
                mask = imageio.quantize8(
                    make_mask(_rng(seed, _STREAM_MASK, split_idx, gi), (size, size), feather))
            for fi in range(group):
                frame = _jitter_frame(base, _rng(seed, _STREAM_JITTER, split_idx, gi, fi),
                                      jitter, noise)
                real = imageio.quantize8(frame)
                row = {
                    "id": f"{sample_id:06d}",
                    "group_id": f"g{group_id:05d}",
                    "label": label,
                    "kind": kind.name if kind else "",
                    "fake_path": "",
                    "mask_path": "",
                }
                real_path = f"images/real_{sample_id:06d}.ppm"
                imageio.write_ppm(os.path.join(out_dir, real_path), real)
                row["real_path"] = real_path
                if label == "fake":
                    fake = imageio.quantize8(
                        forge(real, kind, mask, _rng(seed, _STREAM_FORGE, split_idx, gi)))
                    fake_path = f"images/fake_{sample_id:06d}.ppm"
                    mask_path = f"masks/mask_{sample_id:06d}.pgm"
                    imageio.write_ppm(os.path.join(out_dir, fake_path), fake)
                    imageio.write_pgm(os.path.join(out_dir, mask_path), mask)
                    row["fake_path"] = fake_path
                    row["mask_path"] = mask_path
                    gt = gt_map_for_sample(real, fake, DssimParams())
                else:
                    gt = gt_map_for_sample(real, None, DssimParams())
                map_path = f"maps/map_{sample_id:06d}.dfft"
                checkpoint.save_checkpoint(os.path.join(out_dir, map_path), {"map": gt})
                row["map_path"] = map_path
                rows.append(row)
                sample_id += 1
            group_id += 1
        manifest_path = os.path.join(out_dir, f"{split}.csv")
        write_manifest(manifest_path, rows)
        manifests[split] = manifest_path

    meta = {"config_hash": cfg.hash(), "seed": seed, "samples": sample_id}
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifests["train"], manifests["test"]


def load_sample_arrays(manifest_path, rows=None):
    """Load a manifest into stacked arrays for training/eval."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    rows = rows if rows is not None else read_manifest(manifest_path)
    images, labels, maps, groups, ids, kinds = [], [], [], [], [], []
    for row in rows:
        path = row["fake_path"] if row["label"] == "fake" else row["real_path"]
        images.append(imageio.read_ppm(os.path.join(base, path)))
        labels.append(1 if row["label"] == "fake" else 0)
        maps.append(checkpoint.load_checkpoint(os.path.join(base, row["map_path"]))["map"])
        groups.append(row["group_id"])
        ids.append(row["id"])
        kinds.append(row["kind"])
    return {
        "images": np.stack(images),
        "labels": np.asarray(labels, dtype=np.int64),
        "maps": np.stack(maps)[:, None],
        "groups": groups,
        "ids": ids,
        "kinds": kinds,
    }
