"""Acceptance criteria, each reported as one PASS/FAIL line."""
import dataclasses
import time

import numpy as np
import pytest

from conftest import dense_from_factors, interp_dense
from factorfield import checkpoint
from factorfield.cli import info_report, main
from factorfield.data import DenseGridField, export_scene, make_oracle_scene
from factorfield.gradients import backward_render, grad_check, render_loss
from factorfield.model import RadianceModel
from factorfield.optim import LossConfig
from factorfield.renderer import composite, sample_points, volume_render
from factorfield.tensor_field import FactorField, GridGeometry, dense_parameter_count, parameter_count, sample_density
from factorfield.trainer import evaluate, initial_model, model_step, preset, train

SMALL_STEPS = 2000
SMALL_N = 64
SMALL_BATCH = 256


def record(log, n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    log.append(line)
    print(line)
    return ok


# -- shared runs ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def sphere():
    return make_oracle_scene("sphere", seed=0)


def small_config(**kw):
    cfg = preset("VM-48").scaled(SMALL_STEPS, n_final=SMALL_N, batch_size=SMALL_BATCH, log_every=500)
    return dataclasses.replace(cfg, **kw)


def held_out_psnr(res, scene):
    return float(np.mean(evaluate(res.model, scene, res.step, res.occupancy, compute_ssim=False)["psnr"]))


@pytest.fixture(scope="module")
def small_vm(sphere):
    res = train(sphere.data, small_config())
    return res, held_out_psnr(res, sphere.test)


# -- 1 ----------------------------------------------------------------------------------

def test_dense_oracle_equivalence(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for n in range(50):
        mode = "CP" if n % 2 == 0 else "VM"
        res = tuple(int(r) for r in rng.integers(2, 7, 3))
        ranks = int(rng.integers(1, 4)) if mode == "CP" else tuple(int(r) for r in rng.integers(1, 4, 3))
        lo = rng.uniform(-1, 0, 3)
        geo = GridGeometry(tuple(lo), tuple(lo + rng.uniform(0.5, 2, 3)), res)
        f = FactorField(mode, ranks, geo, rng=rng, init_std=1.0, dtype=np.float64)
        dense = dense_from_factors(f)
        for idx in np.ndindex(*res):
            worst = max(worst, abs(f.element(*idx) - dense[idx]))
        pts = rng.uniform(geo.lo, geo.hi, (200, 3))
        pts = np.vstack([pts, geo.lo, geo.hi])
        worst = max(worst, np.abs(sample_density(f, pts) - interp_dense(dense, geo, pts)).max())
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and elapsed < 5.0
    record(acceptance_log, 1, ok, f"50 fields, max |error| {worst:.2e} (< 1e-10), {elapsed:.2f} s (< 5 s)")
    assert ok


# -- 2 ----------------------------------------------------------------------------------

def test_gradient_audit(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    geo = GridGeometry((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0), (4, 4, 4))
    m = RadianceModel.create("VM", 2, 2, geo, decoder="mlp", rng=rng, dtype=np.float64)
    for k, v in m.params().items():
        if k.startswith("density."):
            small = np.abs(v) < 2e-3
            v[small] = np.where(v[small] >= 0, 2e-3, -2e-3)
    o = np.zeros((8, 3))
    d = np.zeros((8, 3))
    for i in range(8):
        ax, sign = i % 3, (1.0 if (i // 3) % 2 == 0 else -1.0)
        o[i] = rng.uniform(-0.8, 0.8, 3)
        o[i, ax] = -2.0 * sign
        d[i, ax] = sign
    tgt = rng.random((8, 3))
    cfg = LossConfig("l1", 4e-4)
    step = 2.0 / 6
    res, grads = backward_render(m, o, d, tgt, step, cfg)
    rep = grad_check(m.params(), lambda: render_loss(m, o, d, tgt, step, cfg), grads, h=1e-4, tolerance=1e-4)
    elapsed = time.perf_counter() - t0
    worst = max(rep.errors.values())
    n_params = sum(v.size for v in m.params().values())
    ok = rep.passed and res.n_samples == 48 and elapsed < 60.0
    record(acceptance_log, 2, ok, f"{n_params} parameters in {len(rep.errors)} arrays, {res.n_samples} samples, "
                                  f"worst relative error {worst:.2e} (< 1e-4), {elapsed:.1f} s (< 60 s)")
    assert ok, str(rep)


# -- 3 ----------------------------------------------------------------------------------

def test_rendering_conservation(acceptance_log):
    rng = np.random.default_rng(11)
    lo, hi = np.full(3, -1.0), np.full(3, 1.0)
    fld = DenseGridField(rng.exponential(3.0, (8, 8, 8)), rng.random((8, 8, 8, 3)), lo, hi)
    o = rng.uniform(-3, 3, (1000, 3))
    o[np.all(np.abs(o) < 1.0, axis=1)] = 2.5
    d = rng.uniform(-0.5, 0.5, (1000, 3)) - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    smp = sample_points(o, d, lo, hi, 0.05)
    sigma = fld.sigma(smp.positions)
    rgb = fld.rgb(smp.positions, d[smp.ray_index])
    bg = rng.random(3)
    color, _, acc, w, _ = composite(smp, sigma, rgb, bg)
    optical = np.bincount(smp.ray_index, sigma * smp.delta, minlength=1000)
    sums = np.bincount(smp.ray_index, w, minlength=1000)
    cons = np.abs(sums + np.exp(-optical) - 1.0).max()

    split = 0.0
    for r in range(1000):
        a, b = smp.offsets[r], smp.offsets[r + 1]
        if a == b:
            continue
        s, dl, c = sigma[a:b], smp.delta[a:b], rgb[a:b]
        halves = volume_render(np.repeat(s, 2), np.repeat(dl / 2, 2), np.repeat(c, 2, axis=0), bg)[0]
        split = max(split, np.abs(halves - color[r]).max())
    ok = cons < 1e-12 and split < 1e-12
    record(acceptance_log, 3, ok, f"1000 rays ({len(smp)} samples), weight+transmittance deviation {cons:.1e}, "
                                  f"step-splitting deviation {split:.1e} (both < 1e-12)")
    assert ok


# -- 4 ----------------------------------------------------------------------------------

def test_parameter_accounting(acceptance_log):
    K, P = 300, 27
    geo = GridGeometry((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0), (K, K, K))
    rng = np.random.default_rng(0)
    reports = {}
    for name in ("VM-192", "CP-384"):
        cfg = preset(name)
        dr, ar = cfg.ranks.for_mode(cfg.mode)
        m = RadianceModel.create(cfg.mode, dr, ar, geo, decoder="sh", n_features=P, rng=rng, init_std=0.0)
        reports[name] = (m, info_report(m))
    m, vm = reports["VM-192"]
    R, Rc = 192, 144
    closed = K * K * R + K * R + P * Rc
    exact = parameter_count(m.density, m.appearance) == closed == vm["parameters"]
    dense = dense_parameter_count((K, K, K), P)
    vm_pct = vm["compression_percent"]
    cp_pct = reports["CP-384"][1]["compression_percent"]
    ok = exact and dense == K ** 3 * (P + 1) and abs(vm_pct - 2.25) <= 0.1 and abs(cp_pct - 0.048) <= 0.0025
    record(acceptance_log, 4, ok, f"VM-192 count {vm['parameters']} (closed form {closed}), compression "
                                  f"{vm_pct:.3f}% (2.25 +/- 0.1), CP-384 {cp_pct:.4f}% (0.048 +/- 0.0025)")
    assert ok


# -- 5 ----------------------------------------------------------------------------------

def test_desk_scale_reconstruction(sphere, acceptance_log):
    cfg = preset("VM-48").scaled(5000, n_final=128, batch_size=256, log_every=500)
    bbox = (np.asarray(cfg.bbox_min), np.asarray(cfg.bbox_max))
    m0 = initial_model(cfg, bbox, np.random.default_rng(cfg.seed))
    initial = float(np.mean(evaluate(m0, sphere.test, model_step(m0, cfg), compute_ssim=False)["psnr"]))
    t0 = time.perf_counter()
    res = train(sphere.data, cfg)
    elapsed = time.perf_counter() - t0
    final = held_out_psnr(res, sphere.test)
    ok = final >= 30.0 and final >= initial + 12.0 and elapsed <= 900.0
    record(acceptance_log, 5, ok, f"held-out PSNR {final:.2f} dB (>= 30), initial {initial:.2f} dB "
                                  f"(gain {final - initial:.1f} >= 12), training {elapsed:.0f} s (<= 900 s)")
    assert ok


# -- 6 ----------------------------------------------------------------------------------

def test_vm_beats_cp_at_equal_components(sphere, small_vm, acceptance_log):
    cfg = small_config(mode="CP")
    dr, ar = cfg.ranks.for_mode("CP")
    assert dr + ar == 48
    vm_psnr = small_vm[1]
    head = f"48 components, {SMALL_STEPS} steps to {SMALL_N}^3: VM {vm_psnr:.2f} dB"
    try:
        cp_psnr = held_out_psnr(train(sphere.data, cfg), sphere.test)
    except RuntimeError as e:
        record(acceptance_log, 6, False, f"{head}, CP run aborted: {e}")
        raise
    ok = vm_psnr >= cp_psnr
    record(acceptance_log, 6, ok, f"{head} >= CP {cp_psnr:.2f} dB")
    assert ok


# -- 7 ----------------------------------------------------------------------------------

def test_coarse_to_fine_guard(sphere, small_vm, acceptance_log):
    flat_cfg = small_config(n0=SMALL_N, upsample_steps=())
    try:
        flat = held_out_psnr(train(sphere.data, flat_cfg), sphere.test)
        crashed = None
    except (RuntimeError, FloatingPointError) as e:
        flat, crashed = float("nan"), e
    sched = small_vm[1]
    ok = crashed is None and flat <= sched + 0.5
    detail = f"crashed: {crashed}" if crashed else f"fixed {SMALL_N}^3 {flat:.2f} dB <= scheduled {sched:.2f} + 0.5 dB"
    record(acceptance_log, 7, ok, detail)
    assert ok


# -- 8 ----------------------------------------------------------------------------------

def test_determinism(tmp_path, acceptance_log):
    scene = make_oracle_scene("sphere", seed=2, n_grid=24, n_train=6, n_test=1, width=32)
    export_scene(scene, tmp_path / "data")
    cfg = tmp_path / "run.txt"
    cfg.write_text(f"data = {tmp_path / 'data'}\npreset = VM-48\ntotal_steps = 300\nn0 = 12\nn_final = 20\n"
                   "upsample_steps = 150, 250\noccupancy_steps = 200\nbbox_shrink_step = 200\n"
                   "batch_size = 256\nreg_kind = none\nseed = 5\n")
    for run in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / run), "--deterministic"]) == 0
    a = (tmp_path / "a" / "model.trfc").read_bytes()
    b = (tmp_path / "b" / "model.trfc").read_bytes()
    ok = a == b
    record(acceptance_log, 8, ok, f"two seeded runs, checkpoints {len(a)} bytes, identical: {ok}")
    assert ok


# -- 9 ----------------------------------------------------------------------------------

def test_l1_removes_floaters(acceptance_log):
    scene = make_oracle_scene("sphere", seed=0, n_train=10)
    runs = {}
    for w in (4e-4, 0.0):
        res = train(scene.data, small_config(reg_weight=w))
        runs[w] = (res, held_out_psnr(res, scene.test))
    (reg, reg_psnr), (free, free_psnr) = runs[4e-4], runs[0.0]
    lo = np.maximum(reg.model.geometry.lo, free.model.geometry.lo)
    hi = np.minimum(reg.model.geometry.hi, free.model.geometry.hi)
    pts = np.random.default_rng(3).uniform(lo, hi, (200_000, 3))
    glo, ghi = scene.bbox
    inside = np.all((pts >= glo) & (pts <= ghi), axis=1)
    empty = ~inside
    empty[inside] = scene.field.sigma(pts[inside]) == 0.0
    pts = pts[empty]
    reg_abs = float(np.mean(np.abs(sample_density(reg.model.density, pts))))
    free_abs = float(np.mean(np.abs(sample_density(free.model.density, pts))))
    ok = reg_psnr >= free_psnr - 0.2 and reg_abs < free_abs
    record(acceptance_log, 9, ok, f"10 views: PSNR L1 {reg_psnr:.2f} vs none {free_psnr:.2f} dB (>= -0.2), "
                                  f"mean |density| in empty space {reg_abs:.4f} < {free_abs:.4f} "
                                  f"over {len(pts)} points")
    assert ok
