import hashlib
import os

import numpy as np
import pytest

from forgemap import checkpoint, dssim, imageio, synth
from forgemap.config import default_config
from forgemap.errors import ConfigError


def tiny_cfg(**over):
    base = dict(data__train_real=8, data__train_fake=8, data__test_real=4,
                data__test_fake=4, data__group_size=2)
    base.update(over)
    return default_config().with_overrides(**base)


def tree_hash(root):
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            h.update(name.encode())
            with open(os.path.join(dirpath, name), "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def test_generate_base_deterministic_and_in_range():
    a = synth.generate_base(42)
    b = synth.generate_base(42)
    assert np.array_equal(a, b)
    assert a.shape == (3, 32, 32)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_generate_base_seeds_differ():
    # different seeds differ in > 50% of pixels by > 1/255
    fractions = []
    for s in range(100):
        a = synth.generate_base(2 * s)
        b = synth.generate_base(2 * s + 1)
        fractions.append(float((np.abs(a - b) > 1.0 / 255).mean()))
    assert min(fractions) > 0.5


def test_make_mask_contract():
    for seed in range(10):
        m = synth.make_mask(seed, (32, 32))
        assert m.min() >= 0.0 and m.max() <= 1.0
        frac = float((m > 0).mean())
        assert 0.05 <= frac <= 0.40
        # feathered boundary band exists
        band = ((m > 0.05) & (m < 0.95)).sum()
        assert band > 0
    assert np.array_equal(synth.make_mask(3, (32, 32)), synth.make_mask(3, (32, 32)))


def test_forge_zero_mask_is_identity():
    base = synth.generate_base(1)
    mask = np.zeros((32, 32), dtype=np.float32)
    kind = synth.ManipulationKind.defaults("photometric-shift")
    fake = synth.forge(base, kind, mask, 5)
    assert np.array_equal(fake, base)
    assert np.all(dssim.gt_map_for_sample(base, fake) == 0.0)


@pytest.mark.parametrize("kind_name,ranges", [
    ("photometric-shift", {"shift": (0.0, 0.0), "contrast": (1.0, 1.0)}),
    ("local-blur", {"radius": (0, 0)}),
    ("patch-swap", {"offset": (0, 0)}),
    ("warp-blend", {"amplitude": (0.0, 0.0), "freq": (1, 1)}),
])
def test_forge_identity_parameters(kind_name, ranges):
    base = synth.generate_base(2)
    mask = synth.make_mask(3, (32, 32))
    fake = synth.forge(base, synth.ManipulationKind(kind_name, ranges), mask, 7)
    assert np.array_equal(fake, base)


def test_forge_locality_under_dssim():
    base = imageio.quantize8(synth.generate_base(4))
    mask = np.zeros((32, 32), dtype=np.float32)
    mask[6:14, 6:14] = 1.0
    kind = synth.ManipulationKind("photometric-shift",
                                  {"shift": (0.2, 0.2), "contrast": (1.0, 1.0)})
    fake = imageio.quantize8(synth.forge(base, kind, mask, 11))
    gt = dssim.gt_map_for_sample(base, fake)
    r = dssim.DEFAULT_PARAMS.window // 2
    outside = np.ones((32, 32), dtype=bool)
    outside[6 - r:14 + r, 6 - r:14 + r] = False
    assert np.all(gt[outside] == 0.0)
    assert gt.max() > 0.0


def test_build_dataset_counts_and_balance(tmp_path):
    cfg = tiny_cfg()
    train, test = synth.build_dataset(cfg, tmp_path, seed=3)
    rows = synth.read_manifest(train)
    assert len(rows) == 16
    assert sum(r["label"] == "fake" for r in rows) == 8
    rows_t = synth.read_manifest(test)
    assert len(rows_t) == 8
    # fake <=> mask <=> fake_path present
    for r in rows + rows_t:
        is_fake = r["label"] == "fake"
        assert bool(r["fake_path"]) == is_fake
        assert bool(r["mask_path"]) == is_fake
        assert r["map_path"]


def test_build_dataset_gt_recompute_and_alignment(tmp_path):
    cfg = tiny_cfg()
    train, _ = synth.build_dataset(cfg, tmp_path, seed=5)
    base = os.path.dirname(train)
    for r in synth.read_manifest(train):
        stored = checkpoint.load_checkpoint(os.path.join(base, r["map_path"]))["map"]
        real = imageio.read_ppm(os.path.join(base, r["real_path"]))
        if r["label"] == "fake":
            fake = imageio.read_ppm(os.path.join(base, r["fake_path"]))
            mask = imageio.read_pgm(os.path.join(base, r["mask_path"]))
            recomputed = dssim.gt_map_for_sample(real, fake)
            outside = mask == 0
            assert np.array_equal(real[:, outside], fake[:, outside])
        else:
            recomputed = dssim.gt_map_for_sample(real, None)
        assert float(np.abs(stored - recomputed).max()) < 1e-6


def test_build_dataset_split_filter(tmp_path):
    cfg = tiny_cfg(data__train_kinds=("photometric-shift", "local-blur"),
                   data__test_kinds=("patch-swap",))
    train, test = synth.build_dataset(cfg, tmp_path, seed=9)
    train_kinds = {r["kind"] for r in synth.read_manifest(train) if r["kind"]}
    test_kinds = {r["kind"] for r in synth.read_manifest(test) if r["kind"]}
    assert "patch-swap" not in train_kinds
    assert train_kinds <= {"photometric-shift", "local-blur"}
    assert test_kinds == {"patch-swap"}


def test_build_dataset_byte_identical(tmp_path):
    cfg = tiny_cfg()
    d1 = tmp_path / "a"
    d2 = tmp_path / "b"
    synth.build_dataset(cfg, d1, seed=7)
    synth.build_dataset(cfg, d2, seed=7)
    assert tree_hash(d1) == tree_hash(d2)


def test_build_dataset_group_structure(tmp_path):
    cfg = tiny_cfg()
    train, _ = synth.build_dataset(cfg, tmp_path, seed=1)
    rows = synth.read_manifest(train)
    by_group = {}
    for r in rows:
        by_group.setdefault(r["group_id"], []).append(r)
    for members in by_group.values():
        assert len(members) == 2
        assert len({m["label"] for m in members}) == 1
        assert len({m["kind"] for m in members}) == 1


def test_build_dataset_invalid_counts(tmp_path):
    cfg = tiny_cfg(data__train_real=7)  # not divisible by group_size=2
    with pytest.raises(ConfigError):
        synth.build_dataset(cfg, tmp_path, seed=0)


def test_ppm_pgm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = imageio.quantize8(rng.random((3, 9, 11)).astype(np.float32))
    p = tmp_path / "x.ppm"
    imageio.write_ppm(p, img)
    assert np.array_equal(imageio.read_ppm(p), img)
    gray = imageio.quantize8(rng.random((5, 7)).astype(np.float32))
    g = tmp_path / "x.pgm"
    imageio.write_pgm(g, gray)
    assert np.array_equal(imageio.read_pgm(g), gray)
