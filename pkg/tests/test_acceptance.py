"""Acceptance run: one test per criterion, each recording a PASS/FAIL line.

The training criteria (3, 4, 5, 7) share module-scoped runs on the 32^3
synthetic set; expect roughly a quarter of an hour on one CPU core.
"""

import copy
import time

import numpy as np
import pytest
import torch

from tokenreg import diffops
from tokenreg.evalkit import dice, evaluate_pair, fold_fraction
from tokenreg.model import (
    ModelConfig,
    RegModel,
    adapter_width,
    reconstruct_stage_features,
    stack_hash,
    stage_channels,
)
from tokenreg.objective import mse, total_loss
from tokenreg.synthgen import SynthConfig, generate_pairs
from tokenreg.trainer import TrainConfig, load_checkpoint, save_checkpoint, train
from tokenreg.volume import DisplacementField, LabelVolume, VolumeGeometry
from tokenreg.warp import apply_field, identity_grid, jacobian_det, tensor_to_field, volume_to_tensor

pytestmark = pytest.mark.slow

LAM = 0.04
DATA = generate_pairs(SynthConfig(size=(32, 32, 32), count=20, seed=7, max_disp=4.0))
TRAIN, HELD_OUT = DATA[:16], DATA[16:]


def _tensors(pair):
    return volume_to_tensor(pair.moving), volume_to_tensor(pair.fixed)


def held_out_dice(model, steps=1):
    reports = [evaluate_pair(model, p.moving, p.fixed, p.moving_seg, p.fixed_seg, steps=steps) for p in HELD_OUT]
    return float(np.mean([r.mean_dice for r in reports])), max(r.pct_nonpos_jacobian for r in reports)


def unregistered_dice():
    zero = DisplacementField.zeros(HELD_OUT[0].moving.geometry)
    return float(np.mean([evaluate_pair(zero, None, None, p.moving_seg, p.fixed_seg).mean_dice for p in HELD_OUT]))


def train_set_loss(model, steps):
    model.eval()
    with torch.no_grad():
        losses = []
        for pair in TRAIN:
            mv, fx = _tensors(pair)
            losses.append(total_loss(mv, fx, model(mv, fx, steps=steps), LAM).item())
    return float(np.mean(losses))


def fit(model, phase, steps):
    start = time.perf_counter()
    train(model, TRAIN, TrainConfig(lr=1e-4, steps=steps, seed=0, phase=phase, lam=LAM))
    return time.perf_counter() - start


@pytest.fixture(scope="module")
def single_run():
    model = RegModel(ModelConfig(), seed=0)
    hashes = [stack_hash(model)]
    seconds = fit(model, "single", 500)
    hashes.append(stack_hash(model))
    return {"model": model, "seconds": seconds, "hashes": hashes}


@pytest.fixture(scope="module")
def cascade_run(single_run):
    model = copy.deepcopy(single_run["model"])
    hashes = list(single_run["hashes"])
    for k in (2, 3):
        fit(model, f"cascade_step_{k}", 300)
        hashes.append(stack_hash(model))
    return {"model": model, "hashes": hashes}


# 1 ------------------------------------------------------------------------


def test_criterion_1_gradients(acceptance_record):
    start = time.perf_counter()
    worst = {}
    for seed in range(20):
        report = diffops.gradcheck(seed=seed, trials=1)
        for name, err in report.errors.items():
            worst[name] = max(worst.get(name, 0.0), err)
    loss_err = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        shape = tuple(int(s) for s in rng.integers(2, 7, size=3))
        moving = torch.from_numpy(rng.random((1, 1) + shape))
        fixed = torch.from_numpy(rng.random((1, 1) + shape))
        grid = identity_grid(shape, torch.float64)
        # keep sample points off the integer lattice where trilinear is not differentiable
        disp = torch.from_numpy(np.floor(grid.numpy() * 0.8) + rng.uniform(0.15, 0.85, size=grid.shape)) - grid
        err = diffops.check_gradients(lambda m, u: total_loss(m, fixed, u, LAM), [moving, disp], eps=1e-6, seed=seed)
        loss_err = max(loss_err, err)
    worst["total_loss"] = loss_err
    seconds = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = all(err < 1e-4 for err in worst.values()) and seconds < 300
    acceptance_record(1, ok, f"{len(worst)} checks x 20 seeds, worst {top} {worst[top]:.2e}, {seconds:.0f}s")
    assert ok


# 2 ------------------------------------------------------------------------


def test_criterion_2_identity(acceptance_record):
    model = RegModel(ModelConfig(), seed=0)
    pair = HELD_OUT[0]
    mv, fx = _tensors(pair)
    with torch.no_grad():
        disp = model(mv, fx)
        loss = total_loss(mv, fx, disp, LAM).item()
    zero = not disp.any()
    warped = apply_field(pair.moving, tensor_to_field(disp))
    same = np.array_equal(warped.data, pair.moving.data)
    gap = abs(loss - mse(mv, fx).item())
    ok = zero and same and gap <= 1e-6
    acceptance_record(2, ok, f"field zero={zero}, warp bitwise={same}, |loss - mse|={gap:.1e}")
    assert ok


# 3 ------------------------------------------------------------------------


def test_criterion_3_synthetic_recovery(single_run, acceptance_record):
    base = unregistered_dice()
    trained, folds = held_out_dice(single_run["model"])
    gain = trained - base
    ok = gain >= 0.10 and folds < 1.0 and single_run["seconds"] < 1800
    acceptance_record(
        3, ok, f"held-out Dice {base:.3f} -> {trained:.3f} (gain {gain:+.3f}), max folds {folds:.3f}%, "
        f"{single_run['seconds']:.0f}s"
    )
    assert ok


# 4 ------------------------------------------------------------------------


def test_criterion_4_cascade(single_run, cascade_run, acceptance_record):
    loss1 = train_set_loss(single_run["model"], 1)
    loss3 = train_set_loss(cascade_run["model"], 3)
    dice1, _ = held_out_dice(single_run["model"], 1)
    dice3, _ = held_out_dice(cascade_run["model"], 3)
    ok = loss3 <= loss1 and dice3 >= dice1 - 0.01
    acceptance_record(4, ok, f"train loss {loss1:.5f} -> {loss3:.5f}, held-out Dice {dice1:.3f} -> {dice3:.3f}")
    assert ok


# 5 ------------------------------------------------------------------------


def test_criterion_5_frozen_stacks(cascade_run, acceptance_record):
    hashes = cascade_run["hashes"]
    ok = len(set(hashes)) == 1
    acceptance_record(5, ok, f"stack hash over init/single/step2/step3: {len(set(hashes))} distinct ({hashes[0][:12]})")
    assert ok


# 6 ------------------------------------------------------------------------


def test_criterion_6_adapter_contract(acceptance_record):
    cfg = ModelConfig()
    c = cfg.base_channels
    model = RegModel(cfg, seed=0)
    widths = [a.out_features for a in model.decoders[0].adapters]
    y = torch.randn(1, cfg.token_count, cfg.d_model)
    conserved, channels = True, []
    for i, adapter in enumerate(model.decoders[0].adapters, start=1):
        tokens = adapter(y)
        out = reconstruct_stage_features(y, i, adapter, cfg.token_grid)
        channels.append(out.shape[1])
        conserved &= out.numel() == tokens.numel()
    ok = (
        widths == [16 * c, 64 * c, 256 * c, 1024 * c]
        and widths == [adapter_width(i, c) for i in range(1, 5)]
        and channels == [16 * c, 8 * c, 4 * c, 2 * c]
        and channels == [stage_channels(i, c) for i in range(1, 5)]
        and conserved
    )
    acceptance_record(6, ok, f"adapter widths {widths}, stage channels {channels}, elements conserved={conserved}")
    assert ok


# 7 ------------------------------------------------------------------------


def test_criterion_7_position_embedding(single_run, acceptance_record):
    ablated = RegModel(ModelConfig(use_pos_embed=False), seed=0)
    fit(ablated, "single", 500)
    on, _ = held_out_dice(single_run["model"])
    off, _ = held_out_dice(ablated)
    ok = off <= on + 0.02
    acceptance_record(7, ok, f"held-out Dice with pos embed {on:.3f}, without {off:.3f}")
    assert ok


# 8 ------------------------------------------------------------------------


def _brute_dice(a, b, label):
    both = count_a = count_b = 0
    for va, vb in zip(a.ravel().tolist(), b.ravel().tolist()):
        count_a += va == label
        count_b += vb == label
        both += va == label and vb == label
    return 1.0 if count_a + count_b == 0 else 2.0 * both / (count_a + count_b)


def _brute_folds(u):
    det = jacobian_det(DisplacementField(u)).data
    return 100.0 * sum(1 for v in det.ravel().tolist() if v <= 0) / det.size


def test_criterion_8_metric_oracles(acceptance_record):
    rng = np.random.default_rng(8)
    geom = VolumeGeometry((8, 8, 8))
    mismatches = 0
    for _ in range(50):
        a = rng.integers(0, 4, size=(8, 8, 8)).astype(np.int32)
        b = rng.integers(0, 4, size=(8, 8, 8)).astype(np.int32)
        for label in range(4):
            mismatches += dice(LabelVolume(a, geom), LabelVolume(b, geom), label) != _brute_dice(a, b, label)
        u = rng.normal(0.0, 0.6, size=(8, 8, 8, 3)).astype(np.float32)
        mismatches += fold_fraction(DisplacementField(u, geom)) != _brute_folds(u)
    gt_pairs = generate_pairs(SynthConfig(count=20, seed=7))
    gt = [evaluate_pair(p.gt_field, None, None, p.moving_seg, p.fixed_seg).mean_dice for p in gt_pairs]
    ok = mismatches == 0 and min(gt) >= 0.95
    acceptance_record(8, ok, f"{mismatches} oracle mismatches on 50 cases, ground-truth Dice min {min(gt):.3f}")
    assert ok


# 9 ------------------------------------------------------------------------


def test_criterion_9_determinism_and_persistence(single_run, tmp_path, acceptance_record):
    cfg = TrainConfig(lr=1e-4, steps=3, seed=4, deterministic=True)
    traces = [[row.format() for row in train(RegModel(ModelConfig(), seed=1), TRAIN, cfg).trace] for _ in range(2)]
    same_trace = traces[0] == traces[1]
    model = single_run["model"]
    save_checkpoint(model, tmp_path / "c3.ckpt")
    loaded, _ = load_checkpoint(tmp_path / "c3.ckpt", model.cfg)
    mv, fx = _tensors(HELD_OUT[0])
    model.eval()
    with torch.no_grad():
        same_forward = torch.equal(model(mv, fx, steps=1), loaded(mv, fx, steps=1))
    ok = same_trace and same_forward
    acceptance_record(9, ok, f"traces bitwise equal={same_trace}, checkpoint forward bitwise equal={same_forward}")
    assert ok
