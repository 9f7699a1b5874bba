from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from tokenreg.evalkit import evaluate_pair, fold_fraction, mean_dice
from tokenreg.synthgen import (
    MANIFEST,
    SynthConfig,
    gen_dataset,
    gen_pair,
    generate_pairs,
    load_dataset,
    read_manifest,
)
from tokenreg.warp import apply_field, warp_labels

SMALL = SynthConfig(size=(16, 16, 16), count=2, seed=3, max_disp=2.0, smooth_sigma=3.0)


def same_pair(a, b):
    return all(getattr(a, k) == getattr(b, k) for k in ("fixed", "fixed_seg", "moving", "moving_seg", "gt_field"))


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        SynthConfig(size=(30, 32, 32))
    with pytest.raises(ValueError):
        SynthConfig(max_disp=8.0)
    with pytest.raises(ValueError):
        SynthConfig(count=0)
    with pytest.raises(ValueError):
        SynthConfig(smooth_sigma=0.0)


def test_zero_displacement_gives_equal_images():
    p = gen_pair(SynthConfig(size=(16, 16, 16), max_disp=0.0), 0)
    assert p.moving == p.fixed and p.moving_seg == p.fixed_seg
    assert not p.gt_field.data.any()


def test_deterministic_per_index():
    assert same_pair(gen_pair(SMALL, 1), gen_pair(SMALL, 1))
    assert not same_pair(gen_pair(SMALL, 0), gen_pair(SMALL, 1))


def test_parallel_generation_matches_serial():
    serial = generate_pairs(SMALL, range(3))
    with ThreadPoolExecutor(3) as pool:
        parallel = list(pool.map(lambda i: gen_pair(SMALL, i), range(3)))
    assert all(same_pair(a, b) for a, b in zip(serial, parallel))


def test_pair_relations():
    p = gen_pair(SMALL, 0)
    assert apply_field(p.moving, p.gt_field) == p.fixed
    assert warp_labels(p.moving_seg, p.gt_field) == p.fixed_seg
    assert 0.0 <= p.fixed.data.min() and p.fixed.data.max() <= 1.0
    assert 0.0 <= p.moving.data.min() and p.moving.data.max() <= 1.0
    assert p.moving_seg.labels() == set(range(SMALL.n_shapes + 1))
    norms = np.linalg.norm(p.gt_field.data, axis=-1)
    assert norms.max() <= SMALL.max_disp + 1e-5


def test_default_fields_fold_free_and_misaligned():
    cfg = SynthConfig()
    for i in range(100):
        p = gen_pair(cfg, i)
        assert fold_fraction(p.gt_field) == 0.0
        if i < 10:
            assert mean_dice(p.moving_seg, p.fixed_seg) < 0.9
            assert evaluate_pair(p.gt_field, None, None, p.moving_seg, p.fixed_seg).mean_dice >= 0.95


def test_dataset_files_and_manifest(tmp_path):
    entries = gen_dataset(SMALL, tmp_path)
    files = sorted(f.name for f in tmp_path.iterdir())
    assert len(files) == 5 * SMALL.count + 1 and MANIFEST in files
    assert read_manifest(tmp_path) == entries and len(entries) == SMALL.count
    assert entries[1]["movingseg"] == "pair1_movingseg.vol"
    loaded = load_dataset(tmp_path)
    assert same_pair(loaded[0], gen_pair(SMALL, 0))


def test_regeneration_is_bitwise_identical(tmp_path):
    gen_dataset(SMALL, tmp_path / "a")
    gen_dataset(SMALL, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_bad_manifest_line(tmp_path):
    (tmp_path / MANIFEST).write_text("only\ttwo\n")
    with pytest.raises(ValueError):
        read_manifest(tmp_path)
