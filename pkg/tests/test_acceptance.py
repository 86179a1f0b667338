"""End-to-end acceptance checks, one test (group) per criterion.

The training-based criteria share one seeded dataset and one baseline run
per session; the slow marker lets ``-m "not slow"`` skip them.
"""
import filecmp
import time

import numpy as np
import pytest

from conftest import record
from test_metrics import random_case, slow_evaluate
from test_nn import naive_conv, naive_pool
from test_postprocess import brute_nms, random_dets

from pillid.cli import main as cli_main
from pillid.dataset import generate_split, load_split, make_catalog, render_scene
from pillid.detector import ModelConfig, build_model
from pillid.imaging import AugmentConfig, AugmentParams, BoxList, apply_augment, letterbox, sample_augment_params
from pillid.metrics import COMPARISON_ROWS, average_precision, evaluate, render_table
from pillid.nn import Conv2d, MaxPool2d, grad_check, to_nchw, to_nhwc
from pillid.postprocess import nms
from pillid.quantize import calibrate, fidelity_report, quantize_model, quantized_forward
from pillid.train import TOGGLES, TrainConfig, ablate, assign_targets, prepare, to_batch, train, yolo_loss

# the reference recipe: lr 0.001, x0.1 after epoch 30, 50 epochs; batch within the <= 32 budget
RECIPE = TrainConfig(lr0=0.001, batch_size=4, epochs=50, decay_epoch=30, seed=0)
MODEL = ModelConfig(input_size=160, grid_size=10, num_classes=32, seed=0)
DATA_SEED = 0


# ---------------------------------------------------------------- 1. gradients

def test_criterion_1_gradients():
    t0 = time.perf_counter()
    kinds = ["conv", "batchnorm", "leaky_relu", "relu", "identity", "maxpool"]
    layer_err = max(grad_check(k, s) for k in kinds for s in range(20))

    boxes = [BoxList(np.array([3, 5]), np.array([[0.31, 0.42, 0.2, 0.1], [0.77, 0.12, 0.3, 0.25]])),
             BoxList(np.array([1]), np.array([[0.5, 0.5, 0.4, 0.4]]))]
    t = assign_targets(boxes, 4, 1, 6)
    loss_err = 0.0
    for seed in range(20):
        pred = np.random.default_rng(seed).normal(0, 2, (2, 4, 4, 11))
        _, g = yolo_loss(pred, t)
        num = np.zeros_like(pred)
        for idx in np.ndindex(pred.shape):
            a, b = pred.copy(), pred.copy()
            a[idx] += 1e-6
            b[idx] -= 1e-6
            num[idx] = (yolo_loss(a, t)[0].total - yolo_loss(b, t)[0].total) / 2e-6
        rel = np.abs(num - g) / np.maximum(np.maximum(np.abs(num), np.abs(g)), 1e-8)
        loss_err = max(loss_err, float(rel.max()))
    dt = time.perf_counter() - t0
    ok = layer_err < 1e-4 and loss_err < 1e-3 and dt < 60
    record(1, ok, f"layers {layer_err:.2e} < 1e-4, loss {loss_err:.2e} < 1e-3, {dt:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2. oracles

def test_criterion_2_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    conv_err = pool_err = 0.0
    for _ in range(5):
        x = rng.standard_normal((2, 3, 7, 7))
        layer = Conv2d(3, 4, 3, padding=1, rng=rng, dtype=np.float64)
        layer.params["bias"] = rng.standard_normal(4)
        got = to_nchw(layer.forward(to_nhwc(x)))
        ref = naive_conv(x, layer.params["weight"], layer.params["bias"], 1, 1)
        conv_err = max(conv_err, float(np.abs(got - ref).max()))
        xp = rng.standard_normal((2, 3, 6, 6))
        pool_err = max(pool_err, float(np.abs(to_nchw(MaxPool2d().forward(to_nhwc(xp))) - naive_pool(xp)).max()))

    nms_ok = True
    for _ in range(200):
        dets = random_dets(rng, int(rng.integers(0, 51)))
        nms_ok &= nms(dets, 0.45) == brute_nms(dets, 0.45)

    ap_exact = average_precision([True, False, True], 2) == 5 / 6
    slow_err = 0.0
    for _ in range(40):
        dets, gts = random_case(rng)
        rep = evaluate(dets, gts)
        m, p, r = slow_evaluate(dets, gts)
        slow_err = max(slow_err, abs(rep.map50 - m), abs(rep.precision - p), abs(rep.recall - r))
    dt = time.perf_counter() - t0
    ok = conv_err <= 1e-5 and pool_err <= 1e-5 and nms_ok and ap_exact and slow_err <= 1e-9 and dt < 60
    record(2, ok, f"conv {conv_err:.1e}, pool {pool_err:.1e}, nms 200/200={nms_ok}, AP 5/6={ap_exact}, "
                  f"slow path {slow_err:.1e}, {dt:.1f}s")
    assert ok


# ---------------------------------------------------------------- shared training fixtures

@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    m = generate_split(make_catalog(32, DATA_SEED), 200, 50, DATA_SEED, root / "data", size=160)
    return load_split(m, "train"), load_split(m, "val")


@pytest.fixture(scope="session")
def baseline(toy_data):
    tr, va = toy_data
    t0 = time.perf_counter()
    model, log = train(build_model(MODEL), tr, RECIPE, val=va)
    return model, log, time.perf_counter() - t0


# ---------------------------------------------------------------- 3. end-to-end surrogate

@pytest.mark.slow
def test_criterion_3_end_to_end(baseline):
    model, log, dt = baseline
    final = log.rows[-1]
    best = max(r.val_map for r in log.rows)
    ok = final.val_map >= 0.90 and len(log.rows) <= 50 and RECIPE.batch_size <= 32
    record(3, ok, f"val mAP@0.5 {final.val_map:.3f} (best epoch {best:.3f}) >= 0.90, "
                  f"P {final.val_p:.3f} R {final.val_r:.3f}, {len(log.rows)} epochs, batch {RECIPE.batch_size}, "
                  f"{dt / 60:.1f} min (target < 15)")
    assert ok


# ---------------------------------------------------------------- 4. ablation directionality

@pytest.fixture(scope="session")
def ablation(toy_data, baseline):
    tr, va = toy_data
    model, log, _ = baseline
    return ablate(RECIPE, tr, va, TOGGLES, MODEL, cache={"full": (model, log)})


@pytest.mark.slow
def test_criterion_4_ablation(ablation):
    rows = {r.toggle: r for r in ablation.rows}
    assert all(r.error is None for r in rows.values()), [r.error for r in rows.values()]
    base = rows["full"]
    bn_slower = rows["minus_batchnorm"].epochs_to_converge > base.epochs_to_converge
    aug_worse = rows["minus_augmentation"].report.map50 < base.report.map50
    losses = {t: rows[t].final_val_loss for t in ("minus_batchnorm", "minus_augmentation", "minus_leaky_relu")}
    relu_worst = max(losses, key=losses.get) == "minus_leaky_relu"
    lines = ablation.render().splitlines()
    layout = (lines[0] == "Configuration  mAP  Precision  Recall  Training Time (Epochs)  Loss Increase"
              and lines[1].startswith("Full Custom Model") and lines[1].endswith("  -"))
    ok = bn_slower and aug_worse and relu_worst and layout
    record(4, ok, f"epochs {base.epochs_to_converge}->{rows['minus_batchnorm'].epochs_to_converge} (BN off), "
                  f"perturbed mAP {base.report.map50:.3f}->{rows['minus_augmentation'].report.map50:.3f} (aug off), "
                  f"val loss " + ", ".join(f"{k} {v:.2f}" for k, v in losses.items())
                  + " (train totals " + ", ".join(f"{k} {rows[k].log.rows[-1].loss.total:.2f}" for k in losses) + ")")
    print("\n" + ablation.render(align=True))
    assert ok


# ---------------------------------------------------------------- 5. quantization fidelity

@pytest.mark.slow
def test_criterion_5_quantization(toy_data, baseline):
    tr, _ = toy_data
    model, _, _ = baseline
    calib = to_batch([img for img, _ in prepare(tr[:64], 160)])
    qm = quantize_model(model, calibrate(model, calib))
    rng = np.random.default_rng(777)
    cat = make_catalog(32, DATA_SEED)
    scenes = [render_scene(cat, rng, int(rng.integers(1, 7)), ("flat", "gradient", "noise")[i % 3])
              for i in range(100)]
    probes = to_batch([s.image for s in scenes])
    masks = assign_targets([s.boxes for s in scenes], 10, 1, 32).mask[..., 0]
    rep = fidelity_report(model, qm, probes, masks=masks, runs=30)
    a = quantized_forward(qm, probes[:10], dequantize=False)
    b = quantized_forward(qm, probes[:10], dequantize=False)
    deq = [quantized_forward(qm, probes[:10]) for _ in range(2)]
    bit_same = np.array_equal(a, b) and np.array_equal(*deq)
    ok = rep.top1_agreement >= 0.99 and rep.detection_match_rate >= 0.95 and rep.size_ratio <= 0.30 and bit_same
    record(5, ok, f"top-1 {rep.top1_agreement:.4f} >= 0.99, detections {rep.detection_match_rate:.2f} >= 0.95, "
                  f"size {rep.size_ratio:.3f} <= 0.30, bit-identical {bit_same}, "
                  f"latency float {1e3 * rep.latency_float:.1f} ms / int8 {1e3 * rep.latency_quant:.1f} ms")
    assert ok


# ---------------------------------------------------------------- 6. imaging invariants

def test_criterion_6_imaging():
    _, t = letterbox(np.zeros((960, 1280, 3)), 640)
    lb = t.scale == 0.5 and t.pad_y == 80 and t.pad_x == 0
    rng = np.random.default_rng(0)
    img = rng.random((32, 32, 3))
    b = BoxList(np.array([1]), np.array([[0.5, 0.4, 0.3, 0.2]]))
    out, ob = apply_augment(img, b, AugmentParams(0.0, 1.0, 0.0, 0.0))
    ident = np.allclose(out, img, atol=1e-6) and np.array_equal(ob.xywh, b.xywh)
    cfg = AugmentConfig()
    ps = [sample_augment_params(cfg, rng) for _ in range(10_000)]
    ranges = all(-20 <= p.theta_deg <= 20 and 0.8 <= p.scale <= 1.2 and abs(p.brightness) <= 0.2
                 and abs(p.saturation) <= 0.1 for p in ps)
    ok = lb and ident and ranges
    record(6, ok, f"letterbox scale {t.scale} pad {t.pad_y:g}px, degenerate identity {ident}, 10^4 params in range {ranges}")
    assert ok


# ---------------------------------------------------------------- 7. determinism

def test_criterion_7_determinism(tmp_path):
    synth = ["synth", "--classes", "8", "--train", "12", "--val", "6", "--size", "32", "--seed", "5"]
    for run in ("a", "b"):
        assert cli_main([*synth, "--out", str(tmp_path / run / "data")]) == 0
        assert cli_main(["train", "--data", str(tmp_path / run / "data"), "--epochs", "3", "--decay-epoch", "2",
                         "--batch", "4", "--stage-channels", "4,8,8", "--seed", "5",
                         "--out", str(tmp_path / run / "m.ckpt")]) == 0
        assert cli_main(["eval", "--data", str(tmp_path / run / "data"), "--model", str(tmp_path / run / "m.ckpt"),
                         "--out", str(tmp_path / run / "report.csv")]) == 0

    def same_tree(a, b):
        cmp = filecmp.dircmp(a, b)
        if cmp.left_only or cmp.right_only:
            return False
        _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
        return not mismatch and not errors and all(same_tree(a / d, b / d) for d in cmp.common_dirs)

    data_same = same_tree(tmp_path / "a" / "data", tmp_path / "b" / "data")
    log_same = (tmp_path / "a/m.ckpt/train_log.csv").read_bytes() == (tmp_path / "b/m.ckpt/train_log.csv").read_bytes()
    rep_same = (tmp_path / "a/report.csv").read_bytes() == (tmp_path / "b/report.csv").read_bytes()
    ok = data_same and log_same and rep_same
    record(7, ok, f"dataset {data_same}, loss trajectory {log_same}, report {rep_same}")
    assert ok


# ---------------------------------------------------------------- 8. report fidelity

def test_criterion_8_report():
    line = render_table([COMPARISON_ROWS[0]], "comparison").splitlines()[1]
    ok = line == "Custom YOLOv8 Model  99.5%  98.1%  98.8%"
    record(8, ok, repr(line))
    assert ok
