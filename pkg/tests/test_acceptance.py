"""End-to-end acceptance checks, one printed PASS/FAIL line per criterion.

Criteria 5, 6 and 8 drive the installed command line exactly as a user would.
"""

import csv
import json
import math
import time

import numpy as np
import pytest

from savers import checkpoint as ck
from savers import cli
from savers import numkernel as nk
from savers.datapipe import load_samples, read_manifest
from savers.metrics import ConfusionMatrix, class_metrics, overall_accuracy
from savers.net import (
    SaversConfig, SaversModel, Tape, build_model, detect_targets, fine_segment, forward, segment,
)
from savers.numkernel import ConvSpec
from savers.trainer import TrainConfig, cross_entropy, sgd_momentum_step

from oracles import conv2d_loops, flood_fill_components
from published import CLASSES, CONFUSION, SCORES

RESULTS = []

# desk-scale recipe; eval and infer use the end-of-training checkpoint
ACCEPT_EPOCHS = 28
SCENE = {
    "canvas": [128, 192],
    "num_classes": 5,
    "placements": [
        {"class_id": 2, "top": 16, "left": 24},
        {"class_id": 4, "top": 48, "left": 112},
    ],
}


def record(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def run(*argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"savers {argv[0]} exited {code}"


# --- 1 -----------------------------------------------------------------------

def test_criterion_1_metric_reproduction():
    t = time.perf_counter()
    cm = ConfusionMatrix(CONFUSION.copy(), list(CLASSES))
    worst = 0.0
    for k, name in enumerate(CLASSES):
        m = class_metrics(cm, k)
        worst = max(worst, *(abs(g - w) for g, w in zip((m.precision, m.recall, m.f1), SCORES[name])))
    acc = overall_accuracy(cm)
    elapsed = time.perf_counter() - t
    ok = worst <= 0.0005 and acc == 2624 / 2662 and round(acc, 3) == 0.986 and elapsed < 1.0
    record(1, ok, f"33 published scores within {worst:.2e} (tol 5e-4); accuracy {acc:.5f} = 2624/2662; "
                  f"{elapsed:.3f} s")


# --- 2 -----------------------------------------------------------------------

def layer_checks():
    r = np.random.default_rng(2)
    reports = {}
    for name, spec, k in (("conv3x3", ConvSpec.same(3), 3), ("conv4x4", ConvSpec(4, 4, 1, 1, 2, 1, 2), 4),
                          ("conv1x1", ConvSpec(1, 1), 1)):
        x, w, b = r.standard_normal((2, 6, 6)), r.standard_normal((3, 2, k, k)), r.standard_normal(3)
        reports[name] = nk.grad_check(lambda x, w, b, s=spec: nk.conv2d(x, w, b, s), [x, w, b],
                                      lambda g, x, w, b, s=spec: nk.conv2d_backward(g, x, w, s))
    x = r.permutation(np.arange(72.0)).reshape(2, 6, 6) / 7

    def pool_grad(g, x):
        return (nk.maxpool2_backward(g, nk.maxpool2(x)[1], x.shape),)
    reports["maxpool2"] = nk.grad_check(lambda x: nk.maxpool2(x)[0], [x], pool_grad)
    x = r.standard_normal((2, 5, 5))
    x[np.abs(x) < 0.05] = 0.5
    reports["relu"] = nk.grad_check(nk.relu, [x], lambda g, x: (nk.relu_backward(g, x),))
    spec = ConvSpec(32, 32, 16, 8, 8, 8, 8)
    x, w = r.standard_normal((2, 2, 2)), r.standard_normal((2, 2, 32, 32))
    reports["transposed conv"] = nk.grad_check(
        lambda x, w: nk.transposed_conv2d(x, w, spec), [x, w],
        lambda g, x, w: nk.transposed_conv2d_backward(g, x, w, spec))
    labels = r.integers(0, 4, (3, 5))

    def ce(s):
        return np.array(cross_entropy(s, labels)[0].value)
    reports["softmax+cross-entropy"] = nk.grad_check(ce, [r.standard_normal((4, 3, 5))],
                                                     lambda g, s: (g * cross_entropy(s, labels)[1],))
    return reports


def full_model_check():
    cfg = SaversConfig(num_classes=2, block_channels=(2, 3, 3, 4), mid_channels=3, dropout_rate=0.2)
    model = build_model(cfg, 4)
    x = np.random.default_rng(5).random((1, 1, 16, 16))
    labels = (x[0, 0] > 0.5).astype(int)
    names = sorted(model.params)

    def loss(*params, tape=None):
        m = SaversModel(cfg, dict(zip(names, params)))
        scores, _ = forward(m, x, train=True, rng=np.random.default_rng(6), tape=tape)
        return scores

    def grads(g, *params):
        tape = Tape()
        scores = loss(*params, tape=tape)
        _, gs = cross_entropy(scores, labels[None])
        out = tape.backward(g * gs)
        return tuple(out[n] for n in names)

    def scalar_loss(*params):
        return np.array(cross_entropy(loss(*params), labels[None])[0].value)
    return nk.grad_check(scalar_loss, [model.params[n] for n in names], grads, tolerance=1e-4)


def test_criterion_2_gradient_correctness():
    t = time.perf_counter()
    layers = layer_checks()
    full = full_model_check()
    elapsed = time.perf_counter() - t
    worst_layer = max(rep.max_rel_error for rep in layers.values())
    ok = all(rep.max_rel_error < 1e-5 and rep.kink_excluded == 0 for rep in layers.values()) \
        and full.passed and full.max_rel_error < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v.max_rel_error:.1e}" for k, v in layers.items())
    record(2, ok, f"layers [{detail}] (tol 1e-5, worst {worst_layer:.1e}); full model "
                  f"{full.max_rel_error:.1e} (tol 1e-4); {elapsed:.1f} s")


# --- 3 -----------------------------------------------------------------------

def test_criterion_3_oracle_equivalence():
    r = np.random.default_rng(2024)
    conv_worst = 0.0
    for _ in range(50):
        c, f = int(r.integers(1, 4)), int(r.integers(1, 4))
        kh, kw, stride = int(r.integers(1, 5)), int(r.integers(1, 5)), int(r.integers(1, 3))
        pads = tuple(int(v) for v in r.integers(0, 3, 4))
        h = int(r.integers(max(1, kh - pads[0] - pads[1]), 9))
        w = int(r.integers(max(1, kw - pads[2] - pads[3]), 9))
        x, k, b = r.standard_normal((c, h, w)), r.standard_normal((f, c, kh, kw)), r.standard_normal(f)
        got = nk.conv2d(x, k, b, ConvSpec(kh, kw, stride, *pads))
        conv_worst = max(conv_worst, float(np.max(np.abs(got - conv2d_loops(x, k, b, stride, pads)))))
    adj_worst = 0.0
    for spec, hw in ((ConvSpec.same(3), (7, 7)), (ConvSpec(32, 32, 16, 8, 8, 8, 8), (48, 64)),
                     (ConvSpec(4, 4, 2, 1, 2, 1, 2), (9, 8))):
        x = r.standard_normal((2, *hw))
        k = r.standard_normal((3, 2, spec.kernel_h, spec.kernel_w))
        y = r.standard_normal((3, *spec.output_size(*hw)))
        lhs = float((nk.conv2d(x, k, np.zeros(3), spec) * y).sum())
        rhs = float((x * nk.transposed_conv2d(y, k, spec, output_size=hw)).sum())
        adj_worst = max(adj_worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
    cc_ok = 0
    for _ in range(20):
        h, w = int(r.integers(8, 40)), int(r.integers(8, 40))
        base = r.integers(0, 4, (h // 3 + 1, w // 3 + 1))
        labels = np.kron(base, np.ones((3, 3), dtype=int))[:h, :w]
        noise = r.random((h, w)) < 0.1
        labels[noise] = r.integers(0, 4, int(noise.sum()))
        got = {(t.class_id, t.pixel_mask) for t in detect_targets(labels, min_pixels=1)}
        cc_ok += got == set(flood_fill_components(labels))
    ok = conv_worst < 1e-12 and adj_worst < 1e-10 and cc_ok == 20
    record(3, ok, f"conv vs loop oracle max |d| {conv_worst:.1e} on 50 cases (tol 1e-12); adjoint rel "
                  f"{adj_worst:.1e} (tol 1e-10); components match flood fill on {cc_ok}/20 maps")


# --- 4 -----------------------------------------------------------------------

def test_criterion_4_analytic_anchors():
    loss, _ = cross_entropy(np.zeros((11, 8, 8)), np.random.default_rng(0).integers(0, 11, (8, 8)))
    ce_err = abs(loss.value - math.log(11))
    cfg = TrainConfig(learning_rate=0.1, momentum=0.9)
    p, v, g = {"t": np.array([1.0])}, {"t": np.array([0.0])}, {"t": np.array([1.0])}
    p1, v1 = sgd_momentum_step(p, g, v, cfg)
    p2, v2 = sgd_momentum_step(p1, g, v1, cfg)
    # hand-unrolled: v1 = -lr g, t1 = 1 + v1; v2 = mu v1 - lr g, t2 = t1 + v2
    want_v1 = 0.9 * 0.0 - 0.1 * 1.0
    want_t1 = 1.0 + want_v1
    want_v2 = 0.9 * want_v1 - 0.1 * 1.0
    want_t2 = want_t1 + want_v2
    momentum_ok = (v1["t"][0], p1["t"][0], v2["t"][0], p2["t"][0]) == (want_v1, want_t1, want_v2, want_t2)
    momentum_ok &= abs(p1["t"][0] - 0.9) < 1e-15 and abs(p2["t"][0] - 0.71) < 1e-15
    sm_err = max(float(np.max(np.abs(nk.softmax(np.zeros(n)) - 1 / n))) for n in (2, 5, 11))
    ok = ce_err < 1e-9 and momentum_ok and sm_err < 1e-15
    record(4, ok, f"CE(uniform, 11) = {loss.value:.5f}, |d ln 11| {ce_err:.1e} (tol 1e-9); two-step "
                  f"momentum theta {p1['t'][0]:.2f} -> {p2['t'][0]:.2f} exact={momentum_ok}; "
                  f"uniform softmax max |d| {sm_err:.1e}")


# --- 5, 6, 8: command-line runs ----------------------------------------------

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    t = time.perf_counter()
    run("synth", "--classes", 4, "--per-class", 50, "--size", 64, "--seed", 7, "--out", root / "data")
    run("train", "--manifest", root / "data" / "manifest.csv", "--epochs", ACCEPT_EPOCHS, "--seed", 7,
        "--out", root / "train")
    run("eval", "--manifest", root / "data" / "manifest.csv", "--checkpoint", root / "train" / "final.ckpt",
        "--out", root / "eval")
    return root, time.perf_counter() - t


@pytest.mark.slow
def test_criterion_5_desk_scale_end_to_end(desk_run):
    root, elapsed = desk_run
    cm = cli.read_confusion_csv(root / "eval" / "confusion_matrix.csv")
    acc = overall_accuracy(cm)
    clutter = class_metrics(cm, 0).recall
    ok = cm.total == 100 and acc >= 0.95 and clutter == 1.0 and elapsed < 600 and ACCEPT_EPOCHS <= 30
    record(5, ok, f"coarse test accuracy {acc:.3f} ({int(np.trace(cm.counts))}/{cm.total}, need >= 0.95); "
                  f"clutter recall {clutter} (need 1.0); {ACCEPT_EPOCHS} epochs; synth+train+eval "
                  f"{elapsed:.0f} s (limit 600)")


@pytest.mark.slow
def test_trained_fine_maps_match_target_masks(desk_run):
    root, _ = desk_run
    model = ck.load_checkpoint(root / "train" / "final.ckpt")
    samples = load_samples(read_manifest(root / "data" / "manifest.csv"), "test")
    accs = [float(np.mean(fine_segment(model, chip.image).label_map == lab.labels))
            for chip, lab in samples if chip.class_id != 0]
    print(f"fine pixel accuracy on {len(accs)} synthetic test targets: mean {np.mean(accs):.3f}")
    assert np.mean(accs) > 0.9


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.mark.slow
def test_criterion_6_multi_target_scene(desk_run):
    root, _ = desk_run
    (root / "scene.json").write_text(json.dumps(SCENE))
    run("compose", "--scene", root / "scene.json", "--seed", 7, "--out", root / "scene")
    run("infer", "--checkpoint", root / "train" / "final.ckpt", "--image", root / "scene" / "scene.pgm",
        "--classes", root / "data" / "classes.txt", "--out", root / "infer")
    truth = read_rows(root / "scene" / "truth.csv")
    found = read_rows(root / "infer" / "targets.csv")
    pairs = []
    for t in truth:
        same = [f for f in found if f["class_id"] == t["class_id"]]
        if same:
            d = min(math.dist((float(t["centroid_row"]), float(t["centroid_col"])),
                              (float(f["centroid_row"]), float(f["centroid_col"]))) for f in same)
            pairs.append(d)
    classes_ok = sorted(f["class_id"] for f in found) == sorted(t["class_id"] for t in truth)
    ok = len(truth) == 2 and len(found) == 2 and classes_ok and len(pairs) == 2 and max(pairs) <= 4.0
    summary = [(int(f["class_id"]), int(f["pixel_count"])) for f in found]
    record(6, ok, f"{len(found)} target(s) detected (need 2) as (class, pixels) {summary}; truth classes "
                  f"{sorted(int(t['class_id']) for t in truth)}; centroid errors "
                  f"{[round(d, 2) for d in pairs]} px (tol 4)")


# --- 7 -----------------------------------------------------------------------

def test_criterion_7_shape_contract():
    model = build_model(SaversConfig(num_classes=5, block_channels=(2, 3, 3, 4), mid_channels=4), 0)
    r = np.random.default_rng(7)
    checks = []
    for h, w in ((16, 16), (128, 128), (80, 144), (100, 130)):
        coarse, fine = segment(model, r.random((h, w)))
        grid = coarse.logit_grid.shape[1:]
        checks.append(fine.label_map.shape == (h, w) and fine.score_map.shape == (5, h, w)
                      and grid == (math.ceil(h / 16), math.ceil(w / 16)))
    record(7, all(checks), "fine output = input shape and grid = ceil(H/16) x ceil(W/16) for "
                           f"16x16, 128x128, 80x144, 100x130: {checks}")


# --- 8 -----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_determinism(desk_run, tmp_path):
    root, _ = desk_run
    args = ["--manifest", root / "data" / "manifest.csv", "--epochs", 2, "--block-channels", "4,8,8,16",
            "--mid-channels", 16, "--seed", 11, "--save-epochs"]
    run("train", *args, "--out", tmp_path / "a")
    run("train", *args, "--out", tmp_path / "b")
    names = ["history.csv", "model.ckpt", "final.ckpt", "epoch_001.ckpt", "epoch_002.ckpt"]
    same = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
    model = ck.load_checkpoint(root / "train" / "model.ckpt")
    ck.save_checkpoint(model, tmp_path / "again.ckpt")
    round_trip = (tmp_path / "again.ckpt").read_bytes() == (root / "train" / "model.ckpt").read_bytes()
    back = ck.load_checkpoint(tmp_path / "again.ckpt")
    round_trip &= all(np.array_equal(back.params[k], model.params[k]) for k in model.params)
    record(8, same and round_trip, f"two train runs bit-identical over {', '.join(names)}: {same}; "
                                   f"checkpoint save/load round trip bit-exact: {round_trip}")
