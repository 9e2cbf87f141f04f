import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from userstate.core_data import PairedSet
from userstate.evaluation import (
    EvalReport, confusion_matrix, cross_validate, f1_per_class, render_confusion, render_f1_table,
    summarize,
)


def oracle_f1(pred, truth, c):
    tp = sum(1 for p, t in zip(pred, truth) if p == c and t == c)
    fp = sum(1 for p, t in zip(pred, truth) if p == c and t != c)
    fn = sum(1 for p, t in zip(pred, truth) if p != c and t == c)
    return 0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def test_perfect_predictions():
    y = [0, 1, 2, 3, 1]
    assert f1_per_class(y, y).tolist() == [1.0] * 4
    assert np.array_equal(confusion_matrix(y, y).matrix, np.eye(4))


def test_half_f1():
    # class 0: TP=1, FP=1, FN=1
    pred, truth = [0, 0, 1], [0, 1, 0]
    assert f1_per_class(pred, truth)[0] == 0.5


def test_absent_class_scores_zero():
    assert f1_per_class([0, 1], [0, 1])[3] == 0.0


def test_confusion_row():
    cm = confusion_matrix([0, 1], [0, 0])
    assert cm.matrix[0].tolist() == [0.5, 0.5, 0.0, 0.0]
    assert cm.zero_support.tolist() == [False, True, True, True]


def test_length_mismatch():
    with pytest.raises(ValueError):
        f1_per_class([0, 1], [0])


pairs = st.integers(1, 20).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 3), min_size=n, max_size=n), st.lists(st.integers(0, 3), min_size=n, max_size=n)))


@settings(max_examples=200, deadline=None)
@given(pairs)
def test_f1_matches_count_oracle(pt):
    pred, truth = pt
    assert f1_per_class(pred, truth).tolist() == [oracle_f1(pred, truth, c) for c in range(4)]
    cm = confusion_matrix(pred, truth)
    for i in range(4):
        if not cm.zero_support[i]:
            assert abs(cm.matrix[i].sum() - 1.0) < 1e-9


@settings(max_examples=100, deadline=None)
@given(pairs, st.integers(0, 2**32 - 1))
def test_permutation_invariance(pt, seed):
    pred, truth = map(np.array, pt)
    perm = np.random.default_rng(seed).permutation(len(pred))
    assert np.array_equal(f1_per_class(pred, truth), f1_per_class(pred[perm], truth[perm]))
    assert np.array_equal(confusion_matrix(pred, truth).counts, confusion_matrix(pred[perm], truth[perm]).counts)


def test_two_fold_mean_and_sample_std():
    counts = np.zeros((4, 4), dtype=np.int64)
    heads = summarize({"fusion": [(np.array([0.6, 1, 1, 1]), counts), (np.array([0.8, 1, 1, 1]), counts)]})
    s = heads["fusion"]
    assert s.f1_mean[0] == pytest.approx(0.7)
    assert s.f1_std[0] == pytest.approx(0.1414, abs=1e-4)


class ConstantBundle:
    """Stands in for a trained bundle; each head predicts a fixed class."""


def _constant_trainer(monkeypatch, classes):
    import userstate.evaluation as ev

    def fake_predict(bundle, data, batch_size=500):
        return {h: np.full(len(data), c) for h, c in classes.items()}

    monkeypatch.setattr(ev, "predict_heads", fake_predict)
    return lambda train_set, val_set, fold: ConstantBundle()


def _labeled(n=20):
    y = np.arange(n) % 4
    return PairedSet(np.zeros((n, 30, 50, 1), np.float32), np.zeros((n, 30, 68, 3), np.float32), y)


def test_single_fold_flag(monkeypatch):
    trainer = _constant_trainer(monkeypatch, {"audio": 0, "face": 1, "fusion": 2})
    report = cross_validate(_labeled(), trainer, folds=1)
    assert report.single_fold
    assert np.all(report.heads["fusion"].f1_std == 0)


def test_heads_are_kept_separate(monkeypatch):
    trainer = _constant_trainer(monkeypatch, {"audio": 0, "face": 1, "fusion": 2})
    report = cross_validate(_labeled(), trainer, folds=5)
    assert report.heads["audio"].f1_mean[0] > 0 and report.heads["audio"].f1_mean[2] == 0
    assert report.heads["face"].f1_mean[1] > 0
    assert report.heads["fusion"].f1_mean[2] > 0 and report.heads["fusion"].f1_mean[0] == 0


def test_fold_failure_keeps_partial(monkeypatch):
    from userstate.evaluation import FoldFailure
    inner = _constant_trainer(monkeypatch, {"audio": 0, "face": 0, "fusion": 0})

    def trainer(tr, va, fold):
        if fold == 2:
            raise RuntimeError("boom")
        return inner(tr, va, fold)

    with pytest.raises(FoldFailure) as info:
        cross_validate(_labeled(), trainer, folds=5)
    assert info.value.fold == 2
    assert info.value.partial.heads["fusion"].per_fold_f1.shape[0] == 2


def test_table_layout_and_round_trip(monkeypatch):
    trainer = _constant_trainer(monkeypatch, {"audio": 0, "face": 1, "fusion": 2})
    report = cross_validate(_labeled(), trainer, folds=2)
    table = render_f1_table(report).splitlines()
    assert table[0].split("  ")[0].strip() == "Class"
    assert "Audio only" in table[0] and "Face only" in table[0] and "Combined" in table[0]
    assert [r.split()[0] for r in table[2:6]] == ["Agreement", "Disagreement", "Confusion", "Neutral"]
    assert "±" in table[2]
    back = EvalReport.from_dict(report.to_dict())
    assert np.array_equal(back.heads["face"].f1_mean, report.heads["face"].f1_mean)
    assert "row-normalized" in render_confusion(report)
