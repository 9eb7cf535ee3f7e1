import math

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from feasiflow.app.coupling_flow import build_flow
from feasiflow.app.data_pipeline import Label, LabeledDataset
from feasiflow.app.errors import MetricError, ParseError, ShapeError, SimilarityError, ThresholdError
from feasiflow.app.evaluator import (
    ScoreReport,
    auroc,
    classify,
    classify_batch,
    cosine_similarity_matrix,
    covariance_distance_to_identity,
    decomposition_summary,
    evaluate_scores,
    export_latents,
    latent_norm_score,
    read_score_report,
    roc_curve,
    score_dataset,
    scores_to_report,
    select_threshold,
    similarity_summary,
    write_roc_csv,
    write_score_report,
    youden_threshold,
)

F, I = Label.FEASIBLE, Label.INFEASIBLE


def labeled_report(scores, labels):
    return scores_to_report([f"r{i}" for i in range(len(scores))], labels, np.asarray(scores, dtype=float))


def pairwise_auroc(scores, positive):
    pos, neg = scores[positive], scores[~positive]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


def brute_force_threshold(scores, positive):
    unique = np.unique(scores)
    best_j, best = -np.inf, None
    for a, b in zip(unique[:-1], unique[1:]):
        delta = 0.5 * a + 0.5 * b
        tp = np.sum(scores[positive] >= delta)
        fp = np.sum(scores[~positive] >= delta)
        j = tp / positive.sum() - fp / (~positive).sum()
        if j >= best_j:
            best_j, best = j, delta
    return best


# ============================================================================
# SCORING
# ============================================================================

def test_identity_model_scores_origin():
    data = LabeledDataset(np.zeros((1, 2)), [F], ["x"])
    report = score_dataset(build_flow(2, 2, width=4, depth=2), data)
    assert report.total[0] == pytest.approx(-1.837877, abs=1e-6)
    assert report.base_term[0] == report.total[0]
    assert report.logdet_term[0] == 0.0


def test_batch_scoring_equals_single_scoring(make_flow, rng):
    model = make_flow(4, 3, seed=1)
    data = LabeledDataset(rng.standard_normal((600, 4)), [None] * 600, [str(i) for i in range(600)])
    batch = score_dataset(model, data, threads=4)
    np.testing.assert_array_equal(batch.total, batch.base_term + batch.logdet_term)
    for i in (0, 255, 256, 599):
        single = score_dataset(model, data.subset([i]), threads=1)
        assert single.total[0] == batch.total[i]
    np.testing.assert_array_equal(score_dataset(model, data, threads=1).total, batch.total)


def test_dimension_mismatch_names_sample(make_flow):
    data = LabeledDataset(np.zeros((2, 3)), [None, None], ["first", "second"])
    with pytest.raises(ShapeError) as info:
        score_dataset(make_flow(2, 2), data)
    assert info.value.context["sample_id"] == "first"


def test_latent_score_and_export(rng):
    model = build_flow(3, 2, width=4, depth=2)
    data = LabeledDataset(rng.standard_normal((5, 3)), [F] * 5, list("abcde"))
    latents = export_latents(model, data)
    np.testing.assert_array_equal(latents.embeddings, data.embeddings)
    assert len(latents) == len(data)
    latent = latent_norm_score(score_dataset(model, data))
    np.testing.assert_allclose(latent.total, -0.5 * np.sum(data.embeddings ** 2, axis=1))
    assert not np.any(latent.logdet_term)


# ============================================================================
# THRESHOLD / CLASSIFY
# ============================================================================

def test_separable_threshold_is_midpoint():
    assert select_threshold(labeled_report([2, 3, -1, 0], [F, F, I, I])) == 1.0


def test_interleaved_scores_pick_largest_candidate():
    record = youden_threshold(np.array([1.0, 2.0, 3.0, 1.0, 2.0, 3.0]), [F, F, F, I, I, I])
    assert record.youden_j == 0.0
    assert record.threshold == 2.5


@pytest.mark.parametrize("seed", range(50))
def test_threshold_matches_exhaustive_sweep(seed):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.normal(size=60), 1)
    positive = rng.uniform(size=60) < 0.5
    positive[:2] = [True, False]
    assert youden_threshold(scores, positive).threshold == brute_force_threshold(scores, positive)


def test_single_class_threshold_is_an_error():
    with pytest.raises(ThresholdError):
        select_threshold(labeled_report([1.0, 2.0], [F, F]))


def test_classify_boundary_and_monotonicity():
    assert classify(0.5, 0.5) is F
    assert classify(0.5 - 1e-12, 0.5) is I
    scores = np.array([-1.0, 0.0, 0.5, 2.0])
    assert classify_batch(scores, 0.5) == [classify(s, 0.5) for s in scores]
    low, high = classify_batch(scores, 0.0), classify_batch(scores, 1.0)
    assert not any(a is I and b is F for a, b in zip(low, high))


# ============================================================================
# ROC / AUROC
# ============================================================================

def test_separated_scores_give_perfect_auroc():
    assert auroc(np.array([3.0, 4.0, 1.0, 2.0]), [F, F, I, I]) == 1.0


def test_interleaved_scores_give_half():
    assert auroc(np.array([1.0, 4.0, 2.0, 3.0]), [F, F, I, I]) == 0.5


@pytest.mark.parametrize("seed", range(50))
def test_auroc_matches_pair_count(seed):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.normal(size=200), 1 if seed % 2 else 6)
    positive = rng.uniform(size=200) < 0.4
    positive[:2] = [True, False]
    value = auroc(scores, positive)
    assert abs(value - pairwise_auroc(scores, positive)) < 1e-12
    assert value == pytest.approx(roc_auc_score(positive, scores), abs=1e-12)


def test_auroc_invariant_under_monotone_transform(rng):
    scores = rng.normal(size=100)
    positive = rng.uniform(size=100) < 0.5
    assert auroc(np.exp(3 * scores), positive) == auroc(scores, positive)


def test_roc_endpoints_and_monotonicity(rng):
    roc = roc_curve(rng.normal(size=50), rng.uniform(size=50) < 0.5)
    assert (roc.fpr[0], roc.tpr[0]) == (0.0, 0.0)
    assert (roc.fpr[-1], roc.tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)
    assert math.isinf(roc.thresholds[0])


def test_single_class_auroc_is_an_error():
    with pytest.raises(MetricError):
        auroc(np.array([1.0, 2.0]), [I, I])


def test_evaluate_scores_confusion_counts():
    report = labeled_report([2.0, 0.5, -1.0, 1.5], [F, F, I, I])
    summary = evaluate_scores(report, threshold=1.0)
    assert (summary.tp, summary.fn, summary.fp, summary.tn) == (1, 1, 1, 1)
    assert summary.accuracy == 0.5
    assert summary.auroc == 0.75
    assert evaluate_scores(report).threshold is None


@pytest.mark.parametrize("threshold", [math.nan, math.inf, -math.inf])
def test_non_finite_threshold_is_rejected(threshold):
    report = labeled_report([2.0, 0.5], [F, I])
    with pytest.raises(ThresholdError):
        evaluate_scores(report, threshold=threshold)


# ============================================================================
# DIAGNOSTICS
# ============================================================================

def test_decomposition_summary_reports_spreads():
    report = ScoreReport(
        ids=["a", "b", "c"], labels=[F, F, I],
        total=np.array([1.0, 3.0, -4.0]),
        base_term=np.array([2.0, 2.0, 1.0]),
        logdet_term=np.array([-1.0, 1.0, -5.0]),
    )
    summary = decomposition_summary(report)
    assert summary["classes"]["feasible"]["count"] == 2
    assert summary["base_spread"] == 1.0
    assert summary["logdet_spread"] == 5.0
    assert summary["mean_abs_logdet"] == pytest.approx(7.0 / 3.0)


def test_cosine_orthogonal_and_scaled():
    m = cosine_similarity_matrix(np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]]))
    assert m[0, 1] == 0.0
    assert m[0, 2] == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(m, m.T)


def test_cosine_matches_naive_loop(rng):
    v = rng.standard_normal((12, 5))
    m = cosine_similarity_matrix(v)
    for i in range(12):
        for j in range(12):
            expected = np.dot(v[i], v[j]) / (np.linalg.norm(v[i]) * np.linalg.norm(v[j]))
            assert abs(m[i, j] - expected) < 1e-12
    assert np.all(np.abs(np.diag(m) - 1.0) < 1e-12)


def test_zero_vector_reports_index():
    with pytest.raises(SimilarityError) as info:
        cosine_similarity_matrix(np.array([[1.0, 1.0], [0.0, 0.0]]))
    assert info.value.context["index"] == 1


def test_similarity_summary_blocks():
    m = np.array([[1.0, 0.8, 0.1], [0.8, 1.0, 0.3], [0.1, 0.3, 1.0]])
    summary = similarity_summary(m, [F, F, I])
    assert summary["within_feasible"] == pytest.approx(0.8)
    assert summary["within_infeasible"] is None
    assert summary["cross_class"] == pytest.approx(0.2)


def test_covariance_distance(rng):
    white = rng.standard_normal((20000, 3))
    assert covariance_distance_to_identity(white, standardize=False) < 0.1
    skewed = white * np.array([1.0, 3.0, 0.2])
    assert covariance_distance_to_identity(skewed) > covariance_distance_to_identity(white)
    assert covariance_distance_to_identity(white * 5.0) == pytest.approx(
        covariance_distance_to_identity(white), abs=1e-12
    )


# ============================================================================
# FILES
# ============================================================================

def test_score_csv_round_trip(tmp_path, rng):
    report = labeled_report(rng.normal(size=6), [F, I, F, None, I, F]).with_threshold(0.1)
    path = write_score_report(tmp_path / "scores.csv", report)
    loaded = read_score_report(path)
    assert loaded.ids == report.ids and loaded.labels == report.labels
    np.testing.assert_array_equal(loaded.total, report.total)
    assert loaded.verdicts == report.verdicts
    assert path.read_text().splitlines()[0] == "id,label,total,base_term,logdet_term,verdict"


def test_score_file_with_invalid_utf8_is_a_parse_error(tmp_path):
    path = tmp_path / "scores.csv"
    path.write_bytes(b"id,label,total,base_term,logdet_term\na,feasible,\xff,0,0\n")
    with pytest.raises(ParseError, match="UTF-8"):
        read_score_report(path)


def test_roc_csv_layout(tmp_path):
    path = write_roc_csv(tmp_path / "roc.csv", roc_curve(np.array([1.0, 0.0]), [F, I]))
    lines = path.read_text().splitlines()
    assert lines[0] == "threshold,fpr,tpr"
    assert lines[1] == "inf,0,0"
    assert lines[-1] == "0,1,1"
