import numpy as np
import pytest

from savers.datapipe import read_image_pgm
from savers.errors import ConfigError, DataError, DimensionError
from savers.metrics import (
    ConfusionMatrix, accumulate, all_class_metrics, cell_accuracy_map, class_metrics,
    overall_accuracy, read_confusion_csv, read_distribution_csv, read_metrics_csv, render_reports,
    score_distribution,
)

from oracles import class_metrics_by_hand
from published import CLASSES, CONFUSION, CORRECT, SCORES, TEST_COUNTS, TOTAL


@pytest.fixture
def published():
    return ConfusionMatrix(CONFUSION.copy(), list(CLASSES))


def test_accumulate_hand_case():
    cm = accumulate([0, 1, 1], [0, 1, 0], ["a", "b"])
    assert cm.counts.tolist() == [[1, 0], [1, 1]]


def test_accumulate_perfect_and_incremental():
    cm = accumulate([2, 0, 1, 2], [2, 0, 1, 2], "abc")
    assert np.array_equal(cm.counts, np.diag([1, 1, 2]))
    cm = accumulate([0], [2], "abc", cm)
    assert cm.total == 5 and cm.counts[0, 2] == 1


def test_accumulate_tallies_match_direct_counts():
    r = np.random.default_rng(0)
    pred, true = r.integers(0, 5, 300), r.integers(0, 5, 300)
    cm = accumulate(pred, true, list("abcde"))
    for k in range(5):
        assert cm.counts[k].sum() == sum(1 for p in pred if p == k)
        assert cm.counts[:, k].sum() == sum(1 for t in true if t == k)


def test_accumulate_errors():
    with pytest.raises(DataError, match="index 1"):
        accumulate([0, 3], [0, 1], "abc")
    with pytest.raises(DimensionError):
        accumulate([0, 1], [0], "abc")


def test_published_confusion_reproduces_published_scores(published):
    for k, name in enumerate(CLASSES):
        m = class_metrics(published, k)
        for got, want in zip((m.precision, m.recall, m.f1), SCORES[name]):
            assert abs(got - want) <= 0.0005, (name, got, want)


def test_published_background_counts(published):
    m = class_metrics(published, 0)
    assert (m.tp, m.fp, m.fn) == (242, 26, 0)
    assert m.precision == 242 / 268 and m.recall == 1.0
    assert class_metrics(published, CLASSES.index("D7")).recall == 263 / 274


def test_published_overall_accuracy(published):
    acc = overall_accuracy(published)
    assert acc == CORRECT / TOTAL
    assert abs(acc - 0.98572) < 1e-5 and round(acc, 3) == 0.986
    assert published.counts.sum(axis=0).tolist() == TEST_COUNTS


def test_metrics_match_hand_oracle(published):
    counts = published.counts.tolist()
    for k in range(len(CLASSES)):
        m = class_metrics(published, k)
        p, r, f1 = class_metrics_by_hand(counts, k)
        assert m.precision == pytest.approx(p, abs=1e-15)
        assert m.recall == pytest.approx(r, abs=1e-15)
        assert m.f1 == pytest.approx(f1, abs=1e-15)


def test_metric_invariants_random():
    r = np.random.default_rng(1)
    cm = ConfusionMatrix(r.integers(0, 20, (6, 6)), list("abcdef"))
    ms = all_class_metrics(cm)
    assert sum(m.tp for m in ms) == np.trace(cm.counts)
    assert sum(m.tp + m.fn for m in ms) == cm.total
    for m in ms:
        assert m.tp + m.fp + m.fn + m.tn == cm.total
        assert 0 <= m.precision <= 1 and 0 <= m.recall <= 1
        assert m.f1 <= min(2 * m.precision, 2 * m.recall) + 1e-15


def test_equal_precision_recall_gives_same_f1():
    cm = ConfusionMatrix(np.array([[3, 1], [1, 3]]), ["a", "b"])
    m = class_metrics(cm, 0)
    assert m.precision == m.recall == pytest.approx(m.f1)


def test_undefined_metrics_are_flagged():
    cm = accumulate([0, 1], [0, 1], "abc")
    m = class_metrics(cm, 2)
    assert m.precision is None and m.recall is None and m.f1 is None
    cm = ConfusionMatrix(np.array([[0, 2], [0, 0]]), ["a", "b"])
    m = class_metrics(cm, 0)
    assert m.precision == 0.0 and m.recall is None and m.f1 is None


def test_overall_accuracy_cases():
    assert overall_accuracy(accumulate([0, 1, 2], [0, 1, 2], "abc")) == 1.0
    # always predicting class 0 on balanced 2-class data
    assert overall_accuracy(accumulate([0, 0, 0, 0], [0, 1, 0, 1], "ab")) == 0.5
    with pytest.raises(ConfigError):
        overall_accuracy(ConfusionMatrix(np.zeros((2, 2), dtype=int), ["a", "b"]))


def test_cell_map_background_everywhere():
    truths = [0] * 242 + [1] * (2662 - 242)
    grid = np.zeros((4, 4), dtype=int)
    acc = cell_accuracy_map([grid] * len(truths), truths)
    assert np.allclose(acc, 242 / 2662)
    assert round(float(acc[0, 0]), 3) == 0.091


def test_cell_map_recount():
    r = np.random.default_rng(2)
    preds = [r.integers(0, 3, (3, 5)) for _ in range(40)]
    truths = r.integers(0, 3, 40).tolist()
    acc = cell_accuracy_map(preds, truths)
    for i in range(3):
        for j in range(5):
            assert acc[i, j] == sum(p[i, j] == t for p, t in zip(preds, truths)) / 40
    assert (cell_accuracy_map([np.full((2, 2), t) for t in truths], truths) == 1.0).all()


def test_cell_map_shape_errors():
    with pytest.raises(DimensionError):
        cell_accuracy_map([np.zeros((2, 2)), np.zeros((3, 3))], [0, 0])
    with pytest.raises(DimensionError):
        cell_accuracy_map([], [])


def test_score_distribution_bins_and_cdf():
    dist = score_distribution([1.0, 0.0, 0.3], [1, 2, 0])
    assert dist.target_hist[0] == 1 and dist.target_hist[-1] == 1
    assert dist.clutter_hist.sum() == 1
    assert dist.cdf(1.0) == 1.0
    assert len(dist.bin_edges) == 51


def test_score_distribution_cdf_counting_oracle():
    r = np.random.default_rng(3)
    p0 = r.random(500)
    truths = r.integers(0, 4, 500)
    dist = score_distribution(p0, truths, bins=20)
    values = [1 - p for p, t in zip(p0, truths) if t != 0]
    for t in r.random(25):
        assert dist.cdf(t) == sum(v <= t for v in values) / len(values)
    grid = np.linspace(0, 1, 101)
    assert np.all(np.diff(dist.cdf(grid)) >= 0)
    assert dist.target_hist.sum() + dist.clutter_hist.sum() == 500


def test_score_distribution_empty_cdf():
    with pytest.raises(ConfigError):
        score_distribution([0.2], [0]).cdf(0.5)


def test_render_reports_round_trip(published, tmp_path):
    ms = all_class_metrics(published)
    dist = score_distribution(np.linspace(0, 1, 2662), np.repeat(np.arange(11), TEST_COUNTS))
    cell = np.random.default_rng(4).random((4, 4))
    paths = render_reports(published, ms, dist, tmp_path / "rep", cell_map=cell)
    assert np.array_equal(read_confusion_csv(paths["confusion"]).counts, published.counts)
    assert read_confusion_csv(paths["confusion"]).counts.sum(axis=0).tolist() == TEST_COUNTS
    rows = read_metrics_csv(paths["metrics"])
    for row, m in zip(rows, ms):
        assert (row["precision"], row["recall"], row["f1"]) == (m.precision, m.recall, m.f1)
        assert (row["tp"], row["fp"], row["fn"], row["tn"]) == (m.tp, m.fp, m.fn, m.tn)
    drows = read_distribution_csv(paths["distribution"])
    assert len(drows) == 50 and drows[-1]["target_cdf"] == 1.0
    assert sum(r["target_count"] + r["clutter_count"] for r in drows) == 2662
    assert read_image_pgm(paths["cell_map"]).shape[-2:] == (4, 4)
    lines = paths["confusion"].read_text().splitlines()
    assert lines[-2].startswith("recall,") and lines[-1].startswith("f1,")


def test_render_reports_undefined_round_trip(tmp_path):
    cm = accumulate([0, 1], [0, 1], "abc")
    paths = render_reports(cm, all_class_metrics(cm), score_distribution([0.5, 0.2], [0, 1]), tmp_path)
    assert read_metrics_csv(paths["metrics"])[2]["precision"] is None
    assert "undefined" in paths["metrics"].read_text()


def test_render_reports_empty_guard(tmp_path):
    cm = ConfusionMatrix(np.zeros((2, 2), dtype=int), ["a", "b"])
    with pytest.raises(ConfigError):
        render_reports(cm, [], score_distribution([], []), tmp_path / "none")
    assert not (tmp_path / "none").exists()
