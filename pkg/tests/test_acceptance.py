"""Acceptance criteria, one test each; every test records a PASS/FAIL line in the terminal summary."""
import os
import time

import numpy as np
import pytest

import synth
from mvcl.contrastive import LossMode, ProjectionBatch, batch_loss, batch_loss_backward
from mvcl.data import MIN_RATERS, Mode, consensus_label, filter_manifest, read_manifest
from mvcl.eval import auc_score, binary_metrics, confusion, embedding_diagnostics, one_vs_rest_auc
from mvcl.nn import OptimizerConfig, checkpoint_load, checkpoint_save, lr_at, sgd_step
from mvcl.pipeline import assemble_batch, forward_projections, pretrain
from mvcl.views import extract_view, get_plane
from mvcl.volume import LesionCube
from oracles import brute_force_loss, central_differences, count_confusion, random_unit
from test_nn import LAYER_CASES, layer_errors
from test_pipeline import make_store, reduced_config

LIDC_ENV = "MVCL_LIDC_MANIFEST"


def rel(a, b):
    a, b = np.ravel(a), np.ravel(b)
    d = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if d == 0 else float(np.linalg.norm(a - b) / d)


def test_1_loss_oracle_equivalence(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, n_checks = 0.0, 0
    for _ in range(100):
        M, N, D = int(rng.integers(2, 5)), int(rng.integers(1, 6)), int(rng.integers(2, 9))
        tau = float(rng.choice([0.07, 0.2, 1.0]))
        z = random_unit(rng, M, N, D)
        for mode in LossMode:
            if mode is LossMode.AS_WRITTEN and N == 1:
                continue
            got = batch_loss(ProjectionBatch(z, tau=tau), mode).value
            worst = max(worst, abs(got - brute_force_loss(z, tau, mode is LossMode.CMC_INCLUSIVE)))
            n_checks += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 5
    criterion(1, "loss oracle equivalence", ok, f"{n_checks} checks, max abs err {worst:.2e}, {elapsed:.2f}s")
    assert ok


def _e2e_image_error():
    cfg32 = reduced_config(seed=5, wide=False)
    s32 = cfg32.new_state()
    s64 = s32.astype("float64")
    store = make_store(3, seed=2)
    ids = ["L00", "L01", "L02"]
    b32 = assemble_batch(store, ids, (1, 2), np.float32)
    b64 = assemble_batch(store, ids, (1, 2), np.float64)

    # analytic gradient from the single-precision model
    s32.zero_grad()
    z = forward_projections(s32, b32, train=True)
    _, dz = batch_loss_backward(ProjectionBatch(z, check_norm=False))
    dx = [s32.encoders[p].backward(s32.projectors[p].backward(dz[m].astype(np.float32)))
          for m, p in enumerate(s32.plane_ids)]

    worst = 0.0
    for m in range(2):
        def f(img, m=m):
            b = list(b64)
            b[m] = img
            return batch_loss(ProjectionBatch(forward_projections(s64, b, train=True), check_norm=False)).value

        worst = max(worst, rel(dx[m], central_differences(f, b64[m], 1e-5)))
    return worst


def test_2_gradient_suite(criterion):
    t0 = time.perf_counter()
    loss_err = 0.0
    rng = np.random.default_rng(7)
    for mode in LossMode:
        for M, N in ((2, 3), (3, 4), (4, 2)):
            z = random_unit(rng, M, N, 5) * rng.uniform(0.5, 2.0, size=(M, N, 1))
            _, dz = batch_loss_backward(ProjectionBatch(z, tau=0.2, check_norm=False), mode)
            f = lambda zz: batch_loss(ProjectionBatch(zz, tau=0.2, check_norm=False), mode).value  # noqa: E731
            loss_err = max(loss_err, rel(dz, central_differences(f, z, 1e-6)))
    layer_err = 0.0
    for case in sorted(LAYER_CASES):
        layer, x, train = LAYER_CASES[case]()
        layer_err = max(layer_err, *layer_errors(layer, x, train).values())
    e2e_err = _e2e_image_error()
    elapsed = time.perf_counter() - t0
    ok = loss_err < 1e-6 and layer_err < 1e-4 and e2e_err < 1e-3 and elapsed < 120
    criterion(2, "gradient suite", ok,
              f"loss {loss_err:.1e}, layers {layer_err:.1e}, image->loss {e2e_err:.1e}, {elapsed:.1f}s")
    assert ok


def test_3_view_geometry(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    c = rng.random((9, 9, 9))
    cube = LesionCube(c, "g")
    view = {p: extract_view(cube, get_plane(p), 9).pixels for p in range(1, 10)}
    exact = (np.array_equal(view[1], c[:, :, 4]) and np.array_equal(view[2], c[:, 4, :])
             and np.array_equal(view[3], c[4, :, :]))

    rot = LesionCube(np.rot90(c, axes=(0, 1)), "r")
    rview = {p: extract_view(rot, get_plane(p), 9).pixels for p in range(1, 10)}
    pairs = [(rview[1], np.rot90(view[1])), (rview[3], view[2]), (rview[2], view[3][::-1]),
             (rview[5], view[4]), (rview[4], view[5][::-1]), (rview[8], view[6][:, ::-1]),
             (rview[9], view[7][:, ::-1]), (rview[7], view[8][::-1]), (rview[6], view[9][::-1])]
    rot_err = max(np.abs(a - b).max() for a, b in pairs)

    const = extract_view(LesionCube(np.full((9, 9, 9), 0.7), "c"), get_plane(2), 9).pixels
    const_err = np.abs(const - 0.7).max()
    ramp = np.broadcast_to(np.arange(5)[None, None, :] / 4, (5, 5, 5))
    ramp_view = extract_view(LesionCube(ramp, "z"), get_plane(4), 5).pixels
    ramp_err = np.abs(ramp_view - np.arange(5)[None, :] / 4).max()
    elapsed = time.perf_counter() - t0
    ok = exact and rot_err <= 1e-6 and const_err <= 1e-12 and ramp_err <= 1e-12 and elapsed < 10
    criterion(3, "view geometry", ok, f"slices exact={exact}, rotation {rot_err:.1e}, constant {const_err:.1e}, "
                                      f"ramp {ramp_err:.1e}, {elapsed:.2f}s")
    assert ok


def test_4_schedule_and_optimizer(criterion):
    cfg = OptimizerConfig()
    got = [lr_at(cfg, e) for e in (0, 130, 170, 210)]
    sched_ok = got == [0.1, 0.01, 0.001, 1e-4]
    p, v = {"w": np.array([1.0])}, {}
    g1, g2 = 0.5, -0.25
    sgd_step(p, {"w": np.array([g1])}, v, 0.1, 0.9, 0.0)
    sgd_step(p, {"w": np.array([g2])}, v, 0.1, 0.9, 0.0)
    expected = 1.0 - 0.1 * g1 - 0.1 * (0.9 * g1 + g2)
    sgd_err = abs(p["w"][0] - expected)
    ok = sched_ok and sgd_err <= 1e-12
    criterion(4, "schedule and optimizer", ok, f"lr {got}, two-step error {sgd_err:.1e}")
    assert ok


def test_5_metrics(criterion):
    hand = auc_score([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    perfect = auc_score([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    inverted = auc_score([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])
    rng = np.random.default_rng(5)
    consistent = 0
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, size=n)
        y[:2] = [0, 1]
        s = rng.random(n)
        tp, tn, fp, fn = count_confusion(s.tolist(), y.tolist(), 0.5)
        r = binary_metrics(s, y)
        consistent += (confusion(s, y) == (tp, tn, fp, fn) and r.sensitivity == tp / (tp + fn)
                       and r.specificity == tn / (tn + fp) and r.accuracy == (tp + tn) / n
                       and r.precision == (tp / (tp + fp) if tp + fp else 0.0))
    labels = np.repeat(np.arange(4), 2500)
    null = one_vs_rest_auc(rng.random((10_000, 4)), labels)
    null_dev = max(abs(a - 0.5) for a in null)
    ok = hand == 0.75 and perfect == 1.0 and inverted == 0.0 and consistent == 1000 and null_dev <= 0.02
    criterion(5, "metrics", ok, f"hand {hand}, perfect {perfect}, inverted {inverted}, "
                                f"consistent {consistent}/1000, null max |AUC-0.5| {null_dev:.4f}")
    assert ok


@pytest.mark.slow
def test_6_synthetic_end_to_end(desk_runs, criterion):
    accs, gaps, seconds = [], [], 0.0
    for run in desk_runs:
        t0 = time.perf_counter()
        accs.append(synth.linear_accuracy(run["state"], run["store"], run["train"], run["test"], 1.0, run["seed"]))
        ids = run["store"].ids()
        z = forward_projections(run["state"], assemble_batch(run["store"], ids, synth.PLANES), train=False)
        gaps.append(embedding_diagnostics(z).gap)
        seconds += run["seconds"] + time.perf_counter() - t0
    acc, gap = float(np.mean(accs)), float(np.mean(gaps))
    ok = acc >= 0.95 and gap > 0.1 and seconds <= 15 * 60
    criterion(6, "synthetic end-to-end", ok,
              f"test accuracy {acc:.4f} {np.round(accs, 4).tolist()}, gap {gap:.3f}, {seconds:.0f}s for 3 seeds")
    assert ok


@pytest.mark.slow
def test_7_fraction_sweep_trend(desk_runs, criterion):
    fractions = (0.05, 0.10, 0.25, 1.0)
    acc = np.array([[synth.linear_accuracy(r["state"], r["store"], r["train"], r["test"], f, r["seed"])
                     for r in desk_runs] for f in fractions])
    means, stds = acc.mean(axis=1), acc.std(axis=1)
    ok = True
    for k in range(len(fractions) - 1):
        pooled = np.sqrt((stds[k] ** 2 + stds[k + 1] ** 2) / 2)
        ok &= bool(means[k + 1] >= means[k] - pooled)
    detail = ", ".join(f"{f:g}: {m:.3f}+/-{s:.3f}" for f, m, s in zip(fractions, means, stds))
    criterion(7, "fraction sweep trend", ok, detail)
    assert ok


def test_8_determinism_and_persistence(tmp_path, criterion):
    store = make_store(12)
    full, _ = pretrain(store, reduced_config(epochs=4, threads=1))
    path = checkpoint_save(full, tmp_path / "full.ckpt")
    back = checkpoint_load(path)
    tensors = lambda s: {**s.parameters(), **s.buffers(), **s.velocity}  # noqa: E731
    roundtrip = all(a.tobytes() == tensors(back)[k].tobytes() for k, a in tensors(full).items())

    part, _ = pretrain(store, reduced_config(epochs=4, threads=1), stop_epoch=2)
    checkpoint_save(part, tmp_path / "mid.ckpt")
    resumed, _ = pretrain(store, reduced_config(epochs=4, threads=1), state=checkpoint_load(tmp_path / "mid.ckpt"))
    resume = all(a.tobytes() == tensors(resumed)[k].tobytes() for k, a in tensors(full).items())
    ok = roundtrip and resume
    criterion(8, "determinism and persistence", ok, f"bitwise round-trip={roundtrip}, resume==uninterrupted={resume}")
    assert ok


def test_9_lidc_consensus_counts(criterion):
    path = os.environ.get(LIDC_ENV)
    if not path:
        criterion(9, "LIDC consensus counts", None, f"dataset absent; set {LIDC_ENV} to a converted manifest")
        pytest.skip(f"{LIDC_ENV} not set")
    rows = [r for r in filter_manifest(read_manifest(path), Mode.LIDC) if len(r.ratings) >= MIN_RATERS[Mode.LIDC]]
    counts = {"benign": 0, "excluded": 0, "malignant": 0}
    for r in rows:
        counts[consensus_label(r.ratings, MIN_RATERS[Mode.LIDC])] += 1
    expected = {"benign": 369, "excluded": 405, "malignant": 335}
    ok = counts == expected
    criterion(9, "LIDC consensus counts", ok, f"benign/uncertain/malignant {counts} (expected {expected})")
    assert ok
