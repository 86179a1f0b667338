import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pillid.dataset import AnnotatedImage, make_catalog, render_scene
from pillid.detector import ModelConfig, build_model
from pillid.imaging import BoxList
from pillid.metrics import render_table
from pillid.train import (
    ROW_LABELS, AblationReport, AblationRow, EpochRow, LossBreakdown, TrainConfig, TrainingError, TrainLog,
    assign_targets, lr_schedule, train, yolo_loss,
)


def bl(*rows):
    rows = np.array(rows, dtype=np.float64).reshape(-1, 5)
    return BoxList(rows[:, 0].astype(np.int64), rows[:, 1:])


# ---------------------------------------------------------------- config / schedule

def test_schedule():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 0.001
    assert lr_schedule(29, cfg) == 0.001
    assert lr_schedule(30, cfg) == pytest.approx(0.0001)
    assert all(lr_schedule(e, cfg, "finetune") == 0.0001 for e in range(50))
    values = [lr_schedule(e, cfg) for e in range(50)]
    assert sum(a != b for a, b in zip(values, values[1:])) == 1


@pytest.mark.parametrize("kw", [dict(decay_factor=0.0), dict(decay_factor=1.5), dict(decay_epoch=50),
                                dict(lambda_box=-1.0), dict(mode="warm")])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# ---------------------------------------------------------------- targets

def test_center_box_goes_to_cell_5_5():
    t = assign_targets([bl((4, 0.5, 0.5, 0.2, 0.2))], 10, 1, 32)
    assert t.mask[0, 5, 5, 0] and t.mask.sum() == 1
    np.testing.assert_allclose(t.values[0, 5, 5, :5], [0, 0, 0.2, 0.2, 1])
    assert t.values[0, 5, 5, 5 + 4] == 1.0


def test_empty_image_targets():
    t = assign_targets([bl()], 10, 1, 32)
    assert not t.mask.any() and not t.values.any()


def test_collision_first_wins():
    t = assign_targets([bl((1, 0.51, 0.51, 0.1, 0.1), (2, 0.52, 0.58, 0.1, 0.1))], 10, 1, 32)
    assert t.collisions == 1 and t.values[0, 5, 5, 5 + 1] == 1 and t.values[0, 5, 5, 5 + 2] == 0


def test_assignment_matches_cell_scan_oracle():
    rng = np.random.default_rng(8)
    rows = [(int(rng.integers(32)), *rng.uniform(0.02, 0.98, 2), *rng.uniform(0.05, 0.2, 2)) for _ in range(5)]
    t = assign_targets([bl(*rows)], 10, 1, 32)
    for gy in range(10):
        for gx in range(10):
            inside = [r for r in rows if gx / 10 <= r[1] < (gx + 1) / 10 and gy / 10 <= r[2] < (gy + 1) / 10]
            assert t.mask[0, gy, gx, 0] == bool(inside)
            if inside:
                c, cx, cy, w, h = inside[0]
                np.testing.assert_allclose(t.values[0, gy, gx, :5], [cx * 10 - gx, cy * 10 - gy, w, h, 1])
                assert t.values[0, gy, gx, 5 + c] == 1


# ---------------------------------------------------------------- loss

def scalar_loss(pred, cls, cx, cy, w, h, gx, gy, lam=(5, 1, 0.5, 1)):
    """Term-by-term reference for one object in a small grid."""
    sig = lambda z: 1 / (1 + math.exp(-z))
    s = pred.shape[0]
    box = obj_pos = obj_neg = ce = 0.0
    for y in range(s):
        for x in range(s):
            v = pred[y, x]
            p = min(max(sig(v[4]), 1e-7), 1 - 1e-7)
            if (x, y) == (gx, gy):
                tgt = (cx * s - gx, cy * s - gy, w, h)
                box += sum((sig(v[k]) - tgt[k]) ** 2 for k in range(4))
                obj_pos += -math.log(p)
                m = max(v[5:])
                lse = m + math.log(sum(math.exp(z - m) for z in v[5:]))
                ce += lse - v[5 + cls]
            else:
                obj_neg += -math.log(1 - p)
    obj = lam[1] * obj_pos + lam[2] * obj_neg
    return box, obj, ce, lam[0] * box + obj + lam[3] * ce


def test_loss_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    pred = rng.normal(0, 1.5, (4, 4, 5 + 6))
    t = assign_targets([bl((2, 0.4, 0.7, 0.3, 0.2))], 4, 1, 6)
    loss, _ = yolo_loss(pred[None], t)
    ref = scalar_loss(pred, 2, 0.4, 0.7, 0.3, 0.2, 1, 2)
    for got, want in zip((loss.box, loss.obj, loss.cls, loss.total), ref):
        assert got == pytest.approx(want, abs=1e-6)


def test_loss_empty_image_zero_logits():
    t = assign_targets([bl()], 10, 1, 32)
    loss, _ = yolo_loss(np.zeros((1, 10, 10, 37)), t)
    assert loss.box == 0 and loss.cls == 0
    assert loss.obj == pytest.approx(0.5 * math.log(2) * 100)


def test_loss_zero_box_residual():
    t = assign_targets([bl((0, 0.55, 0.55, 0.5, 0.5))], 10, 1, 32)
    pred = np.zeros((1, 10, 10, 37))
    pred[0, 5, 5, 5] = 40.0   # saturated class logit
    loss, _ = yolo_loss(pred, t)
    assert loss.box == 0.0
    assert loss.cls == pytest.approx(0.0, abs=1e-12)


def test_loss_gradient_finite_differences():
    rng = np.random.default_rng(0)
    t = assign_targets([bl((3, 0.31, 0.42, 0.2, 0.1), (5, 0.77, 0.12, 0.3, 0.25)), bl((1, 0.5, 0.5, 0.4, 0.4))], 4, 1, 6)
    worst = 0.0
    for seed in range(20):
        pred = np.random.default_rng(seed).normal(0, 2, (2, 4, 4, 11))
        _, g = yolo_loss(pred, t)
        num = np.zeros_like(pred)
        for idx in np.ndindex(pred.shape):
            a, b = pred.copy(), pred.copy()
            a[idx] += 1e-6
            b[idx] -= 1e-6
            num[idx] = (yolo_loss(a, t)[0].total - yolo_loss(b, t)[0].total) / 2e-6
        worst = max(worst, float(np.max(np.abs(num - g) / np.maximum(np.maximum(np.abs(num), np.abs(g)), 1e-8))))
    assert worst < 1e-3


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), k=st.floats(0.1, 10))
def test_loss_linear_in_lambdas_and_nonnegative(seed, k):
    rng = np.random.default_rng(seed)
    pred = rng.normal(0, 3, (1, 3, 3, 5 + 4))
    t = assign_targets([bl((1, 0.2, 0.3, 0.1, 0.2), (3, 0.8, 0.9, 0.2, 0.1))], 3, 1, 4)
    base = TrainConfig()
    scaled = replace(base, lambda_box=5 * k, lambda_obj=k, lambda_noobj=0.5 * k, lambda_cls=k)
    a = yolo_loss(pred, t, base)[0]
    b = yolo_loss(pred, t, scaled)[0]
    assert min(a.box, a.obj, a.cls, a.total) >= 0
    assert b.total == pytest.approx(k * a.total, rel=1e-9)


# ---------------------------------------------------------------- training loop

TINY = ModelConfig(input_size=32, grid_size=4, num_classes=4, stage_channels=(4, 8, 8), seed=1)


@pytest.fixture(scope="module")
def tiny_data():
    cat = make_catalog(4, 0)
    rng = np.random.default_rng(0)
    return [render_scene(cat, rng, 2, size=32, cell_grid=4, image_id=f"s{i}") for i in range(6)]


def test_single_image_descent(tiny_data):
    model = build_model(TINY)
    cfg = TrainConfig(batch_size=1, epochs=2, decay_epoch=1, augment_enabled=False)
    _, log = train(model, tiny_data[:1], replace(cfg, epochs=1, decay_epoch=0))
    first = log.rows[0].loss.total
    _, log = train(model, tiny_data[:1], replace(cfg, epochs=1, decay_epoch=0))
    assert log.rows[0].loss.total < first


def test_zero_lr_keeps_parameters(tiny_data):
    model = build_model(TINY)
    before = [p.copy() for _, _, p in model.parameters()]
    train(model, tiny_data, TrainConfig(lr0=0.0, batch_size=3, epochs=2, decay_epoch=1))
    for b, (_, _, p) in zip(before, model.parameters()):
        np.testing.assert_array_equal(b, p)


def test_training_is_deterministic(tiny_data):
    cfg = TrainConfig(batch_size=3, epochs=3, decay_epoch=2, seed=5)
    _, a = train(build_model(TINY), tiny_data, cfg, val=tiny_data[:2])
    _, b = train(build_model(TINY), tiny_data, cfg, val=tiny_data[:2])
    assert a.to_csv() == b.to_csv()
    assert [r.lr for r in a.rows] == [0.001, 0.001, 0.0001]
    assert len(a.rows) == 3


def test_training_rejects_bad_inputs(tiny_data):
    with pytest.raises(TrainingError):
        train(build_model(TINY), [], TrainConfig(epochs=2, decay_epoch=1))
    with pytest.raises(TrainingError):
        train(build_model(TINY), tiny_data, TrainConfig(batch_size=7, epochs=2, decay_epoch=1))


def test_non_finite_loss_names_epoch_and_batch(tiny_data):
    model = build_model(TINY)
    model.layers[-1].params["bias"][:] = np.nan
    with pytest.raises(TrainingError, match="epoch 0 batch 0"):
        train(model, tiny_data, TrainConfig(batch_size=2, epochs=2, decay_epoch=1))


def test_letterboxes_off_size_inputs(tiny_data):
    wide = [AnnotatedImage(np.pad(s.image, ((0, 0), (8, 8), (0, 0))), s.boxes, s.image_id) for s in tiny_data]
    _, log = train(build_model(TINY), wide, TrainConfig(batch_size=3, epochs=2, decay_epoch=1))
    assert np.isfinite(log.rows[-1].loss.total)


# ---------------------------------------------------------------- logs and reports

def row(e, total):
    return EpochRow(e, 0.001, LossBreakdown(0, 0, 0, total))


def test_epochs_to_converge():
    log = TrainLog([row(0, 10.0), row(1, 5.0), row(2, 4.1), row(3, 4.0), row(4, 4.05)])
    # threshold 1.05 * 4.0 = 4.2: epoch index 2 is the first below it (1-based 3)
    assert log.epochs_to_converge == 3


def test_trainlog_csv_header():
    text = TrainLog([row(0, 1.0)]).to_csv()
    assert text.splitlines()[0] == "epoch,lr,box,obj,cls,total,val_map,val_p,val_r"
    assert text.splitlines()[1] == "0,0.001,0.000000,0.000000,0.000000,1.000000,,,"


def test_ablation_rendering():
    from pillid.metrics import EvalReport
    rep = EvalReport({0: 0.9}, 0.9, 0.8, 0.7, 1, 0, 0)
    rows = [AblationRow(t, report=rep, epochs_to_converge=10, loss_increase=None if t == "full" else 0.2)
            for t in ROW_LABELS]
    lines = AblationReport(rows).render().splitlines()
    assert [l.split("  ")[0] for l in lines[1:]] == [
        "Full Custom Model", "Minus Batch Normalization", "Minus Data Augmentation", "Minus Leaky ReLU Activation"]
    assert lines[1].endswith("  -") and lines[2].endswith("20.0%")
