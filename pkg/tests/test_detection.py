import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steerkit.corpus import ActivationDataset
from steerkit.detection import (
    auroc,
    auroc_bruteforce,
    evaluate_detection,
    f1_sweep,
    minmax_normalize,
    pool_sequence_score,
    pooled_scores,
    token_detection_scores,
    write_reports,
)
from steerkit.errors import DimensionMismatch, EmptySequence, MissingClass
from steerkit.learners import ConceptSubspace, fit_diffmean


class TestTokenScores:
    def ds(self, rows):
        return ActivationDataset.from_blocks([rows], ["positive"])

    def test_identity(self):
        sub = ConceptSubspace(np.array([1.0, 0, 0]), "diffmean")
        assert token_detection_scores(sub, self.ds([[3.0, 1, 1]]))[0] == 3.0

    def test_relu(self):
        sub = ConceptSubspace(np.array([1.0, 0, 0]), "ssv", unit_norm=False, activation="relu")
        assert token_detection_scores(sub, self.ds([[-2.0, 1, 1]]))[0] == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            token_detection_scores(ConceptSubspace(np.array([1.0, 0]), "x"), self.ds([[1.0, 2, 3]]))

    def test_scaling_keeps_auroc(self, train_acts, eval_acts):
        sub = fit_diffmean(train_acts)
        doubled = ActivationDataset(eval_acts.concept_id, 1, 2 * eval_acts.rows, eval_acts.offsets, eval_acts.counts, eval_acts.labels)
        a, b = token_detection_scores(sub, eval_acts), token_detection_scores(sub, doubled)
        np.testing.assert_array_equal(b, 2 * a)
        assert evaluate_detection(a, eval_acts, "dm").auroc == evaluate_detection(b, doubled, "dm").auroc


class TestPooling:
    def test_max(self):
        assert pool_sequence_score([1, 3, 2], "max") == 3

    def test_mean(self):
        assert pool_sequence_score([1, 3, 2], "mean") == 2

    @pytest.mark.parametrize("mode", ["max", "mean"])
    def test_single(self, mode):
        assert pool_sequence_score([4.5], mode) == 4.5

    def test_empty(self):
        with pytest.raises(EmptySequence):
            pool_sequence_score([], "max")

    def test_per_sequence(self):
        ds = ActivationDataset.from_blocks([[[0.0]] * 2, [[0.0]] * 3], ["positive", "negative"])
        np.testing.assert_array_equal(pooled_scores(np.array([1, 5, 2, 2, 8.0]), ds), [5, 8])


class TestMinMax:
    def test_constant(self):
        assert (minmax_normalize([3, 3, 3]) == 0).all()

    def test_endpoints(self):
        out = minmax_normalize([2, 5, 3])
        assert out.min() == 0 and out.max() == 1

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=30), st.floats(0.1, 10), st.floats(-10, 10))
    def test_affine_invariance(self, s, a, b):
        s = np.array(s)
        np.testing.assert_allclose(minmax_normalize(a * s + b), minmax_normalize(s), atol=1e-9)


class TestAuroc:
    def test_perfect(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_inverted(self):
        assert auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_hand_example(self):
        assert auroc([0.9, 0.4, 0.5, 0.1], [1, 1, 0, 0]) == 0.75

    def test_missing_class(self):
        with pytest.raises(MissingClass):
            auroc([1, 2], [1, 1])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(4, 60).flatmap(lambda n: st.tuples(
        st.lists(st.integers(0, 5), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n),
    )))
    def test_matches_bruteforce_with_ties(self, data):
        s, y = data
        if len(set(y)) < 2:
            return
        assert abs(auroc(s, y) - auroc_bruteforce(s, y)) < 1e-12


class TestF1:
    def test_perfect(self):
        r = f1_sweep([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert r.f1 == 1.0 and 0.2 <= r.threshold < 0.8

    def test_all_equal(self):
        r = f1_sweep([0.5] * 7, [1, 1, 1, 0, 0, 0, 0])
        assert r.f1 == pytest.approx(2 * 3 / (2 * 3 + 4))

    def test_imbalanced_separated(self):
        s = [0.7, 0.8, 0.9, 1.0, 0.0, 0.1, 0.2, 0.3]
        y = [1, 1, 1, 1, 0, 0, 0, 0]
        bal = f1_sweep(s, y)
        imb = f1_sweep(s, y, extra_negatives=100, negative_pool=np.linspace(0.0, 0.3, 50))
        assert bal.f1 == imb.f1 == 1.0

    def test_needs_pool(self):
        with pytest.raises(ValueError):
            f1_sweep([0, 1], [0, 1], extra_negatives=3)


def test_reports_are_ordered(tmp_path, train_acts, eval_acts):
    sub = fit_diffmean(train_acts)
    s = token_detection_scores(sub, eval_acts)
    reps = [evaluate_detection(s, eval_acts, m) for m in ("zeta", "alpha")]
    write_reports(reps, tmp_path / "d.jsonl", tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "concept_id,method,auroc,f1_balanced,f1_imbalanced"
    assert [ln.split(",")[1] for ln in lines[1:]] == ["alpha", "zeta"]
    recs = [json.loads(x) for x in (tmp_path / "d.jsonl").read_text().splitlines()]
    assert recs[0]["method"] == "alpha" and len(recs[0]["raw_scores"]) == 72
