import logging

import numpy as np
import pytest
from openpyxl import Workbook
from pydantic import ValidationError

from feasiflow.app.data_pipeline import (
    DatasetFormat,
    GaussianMixture,
    Label,
    LabeledDataset,
    NodeFeatureBlock,
    SynthSpec,
    build_mixtures,
    detect_format,
    load_dataset,
    load_node_features,
    make_splits,
    mean_pool,
    save_dataset,
    synth_benchmark,
    synth_dataset,
)
from feasiflow.app.errors import DataError, ParseError, SplitError, UsageError
from feasiflow.app.evaluator import auroc

F, I = Label.FEASIBLE, Label.INFEASIBLE


def write_csv(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def balanced(n_feasible, n_infeasible, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    n = n_feasible + n_infeasible
    return LabeledDataset(
        rng.standard_normal((n, dim)),
        [F] * n_feasible + [I] * n_infeasible,
        [f"s{i}" for i in range(n)],
    )


# ============================================================================
# POOLING
# ============================================================================

def test_mean_pool_single_node_is_identity():
    np.testing.assert_array_equal(mean_pool(np.array([[1.0, -2.0, 3.5]])), [1.0, -2.0, 3.5])


def test_mean_pool_two_nodes():
    np.testing.assert_array_equal(mean_pool(np.array([[1.0, 2.0], [3.0, 6.0]])), [2.0, 4.0])


def test_mean_pool_is_order_independent(rng):
    block = NodeFeatureBlock("a", rng.standard_normal((7, 4)))
    shuffled = block.features[rng.permutation(7)]
    np.testing.assert_allclose(mean_pool(block), mean_pool(shuffled), rtol=0, atol=1e-15)


def test_mean_pool_rejects_empty_block():
    with pytest.raises(DataError):
        mean_pool(np.zeros((0, 3)))


# ============================================================================
# FILE FORMATS
# ============================================================================

def test_csv_load(tmp_path):
    path = write_csv(tmp_path / "d.csv", "id,label,f0,f1\na,feasible,1.5,2\nb,infeasible,-1,0\nc,,3,4\n")
    data = load_dataset(path)
    assert data.ids == ["a", "b", "c"]
    assert data.labels == [F, I, None]
    np.testing.assert_array_equal(data.embeddings, [[1.5, 2.0], [-1.0, 0.0], [3.0, 4.0]])


@pytest.mark.parametrize(
    "body,line,fragment",
    [
        ("a,feasible,1,2\nb,feasible,1\n", 3, "cells"),
        ("a,feasible,1,2\na,feasible,3,4\n", 3, "duplicate"),
        ("a,feasible,1,2\nb,maybe,3,4\n", 3, "label"),
        ("a,feasible,x,2\n", 2, "non-numeric"),
        ("a,feasible,1,2\nb,feasible,nan,2\n", 3, "non-finite"),
        (",feasible,1,2\n", 2, "missing id"),
    ],
)
def test_csv_errors_report_line(tmp_path, body, line, fragment):
    path = write_csv(tmp_path / "bad.csv", "id,label,f0,f1\n" + body)
    with pytest.raises(ParseError, match=fragment) as info:
        load_dataset(path)
    assert info.value.context["line"] == line
    assert info.value.exit_code == 3


def test_bad_header_is_line_one(tmp_path):
    path = write_csv(tmp_path / "bad.csv", "id,label,x0\na,feasible,1\n")
    with pytest.raises(ParseError) as info:
        load_dataset(path)
    assert info.value.context["line"] == 1


def test_missing_file_is_usage_error(tmp_path):
    with pytest.raises(UsageError):
        load_dataset(tmp_path / "nope.csv")


def test_saved_dataset_loads_back_exactly(tmp_path, rng):
    data = LabeledDataset(rng.standard_normal((5, 4)) * 1e3, [F, I, None, F, I], list("vwxyz"))
    loaded = load_dataset(save_dataset(data, tmp_path / "out" / "data.csv"))
    np.testing.assert_array_equal(loaded.embeddings, data.embeddings)
    assert loaded.labels == data.labels and loaded.ids == data.ids
    assert b"\r\n" not in (tmp_path / "out" / "data.csv").read_bytes()


def test_xlsx_load(tmp_path):
    workbook = Workbook()
    sheet = workbook.active
    sheet.append(["id", "label", "f0", "f1"])
    sheet.append(["p1", "feasible", 0.25, 1])
    sheet.append([None, None, None, None])
    sheet.append(["p2", "infeasible", -3, 2.5])
    path = tmp_path / "d.xlsx"
    workbook.save(path)

    data = load_dataset(path)
    assert data.ids == ["p1", "p2"]
    assert data.labels == [F, I]
    np.testing.assert_array_equal(data.embeddings, [[0.25, 1.0], [-3.0, 2.5]])


def test_xlsx_error_uses_sheet_row(tmp_path):
    workbook = Workbook()
    sheet = workbook.active
    sheet.append(["id", "label", "f0"])
    sheet.append(["p1", "feasible", 1.0])
    sheet.append(["p2", "feasible", "abc"])
    path = tmp_path / "d.xlsx"
    workbook.save(path)
    with pytest.raises(ParseError) as info:
        load_dataset(path)
    assert info.value.context["line"] == 3


def test_node_feature_file_is_pooled(tmp_path):
    path = tmp_path / "parts.nodes"
    path.write_text(
        "#assembly a1 feasible\n1 2\n3 4\n"
        "#assembly a2 infeasible\n0,0\n"
        "#assembly a3\n1 1\n1 1\n4 4\n",
        encoding="utf-8",
    )
    blocks = load_node_features(path)
    assert [b.features.shape[0] for b in blocks] == [2, 1, 3]

    data = load_dataset(path)
    assert data.ids == ["a1", "a2", "a3"]
    assert data.labels == [F, I, None]
    np.testing.assert_array_equal(data.embeddings, [[2.0, 3.0], [0.0, 0.0], [2.0, 2.0]])


def test_node_feature_errors(tmp_path):
    path = tmp_path / "parts.nodes"
    path.write_text("#assembly a1\n1 2\n3\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_node_features(path)
    assert info.value.context["line"] == 3

    path.write_text("#assembly a1\n#assembly a2\n1 2\n", encoding="utf-8")
    with pytest.raises(ParseError, match="no part rows"):
        load_node_features(path)


def test_invalid_utf8_is_a_parse_error(tmp_path):
    for name in ("parts.nodes", "rows.csv"):
        path = tmp_path / name
        path.write_bytes(b"#assembly a1\n1 2\n\xff\xfe 3\n")
        with pytest.raises(ParseError, match="UTF-8"):
            load_dataset(path)


def test_corrupt_workbook_is_a_parse_error(tmp_path):
    path = tmp_path / "rows.xlsx"
    path.write_bytes(b"id,label,f0\n")
    with pytest.raises(ParseError, match="XLSX"):
        load_dataset(path)


def test_training_rows_keep_unlabeled_and_drop_infeasible(caplog):
    data = LabeledDataset(np.arange(8.0).reshape(4, 2), [F, None, I, F], ["a", "b", "c", "d"])
    with caplog.at_level(logging.WARNING, logger="feasiflow.app.data_pipeline"):
        rows = data.training_rows()
    assert rows.ids == ["a", "b", "d"]
    assert "dropped 1 infeasible" in caplog.text


def test_detect_format():
    assert detect_format("x.XLSX") is DatasetFormat.XLSX
    assert detect_format("x.nodes") is DatasetFormat.NODES
    assert detect_format("x.csv") is DatasetFormat.CSV


def test_dataset_rejects_duplicate_ids():
    with pytest.raises(DataError):
        LabeledDataset(np.zeros((2, 2)), [F, F], ["a", "a"])


# ============================================================================
# SPLITS
# ============================================================================

def test_balanced_split_sizes(caplog):
    with caplog.at_level(logging.WARNING, logger="feasiflow.app.data_pipeline"):
        train, val, test = make_splits(balanced(100, 100), 0.2, 0.2, seed=1)
    assert len(train) == 60 and train.count(F) == 60
    assert (val.count(F), val.count(I)) == (20, 20)
    assert (test.count(F), test.count(I)) == (20, 20)
    assert "dropped 60" in caplog.text
    assert not set(train.ids) & set(val.ids)
    assert not set(val.ids) & set(test.ids)


def test_splits_are_deterministic():
    data = balanced(50, 40)
    first = make_splits(data, 0.2, 0.2, seed=5)
    second = make_splits(data, 0.2, 0.2, seed=5)
    for a, b in zip(first, second):
        assert a.ids == b.ids
    assert make_splits(data, 0.2, 0.2, seed=6)[1].ids != first[1].ids


def test_small_infeasible_class_shrinks_splits():
    train, val, test = make_splits(balanced(100, 10), 0.2, 0.2, seed=0)
    assert val.count(I) == test.count(I) == 5
    assert val.count(F) == 5
    assert len(train) == 90


def test_single_class_cannot_be_split():
    with pytest.raises(SplitError):
        make_splits(balanced(30, 0), 0.2, 0.2, seed=0)


def test_invalid_fractions():
    with pytest.raises(SplitError):
        make_splits(balanced(10, 10), 0.6, 0.5, seed=0)
    with pytest.raises(SplitError):
        make_splits(balanced(10, 10), 0.0, 0.2, seed=0)


def test_tiny_dataset_has_no_room_for_splits():
    with pytest.raises(SplitError):
        make_splits(balanced(2, 2), 0.2, 0.2, seed=0)


# ============================================================================
# SYNTHETIC BENCHMARK
# ============================================================================

SMALL = dict(dim=4, n_id=200, n_ood=100)


def test_synth_is_deterministic():
    spec = SynthSpec(**SMALL)
    a, b = synth_dataset(spec, seed=3), synth_dataset(spec, seed=3)
    np.testing.assert_array_equal(a.embeddings, b.embeddings)
    assert not np.array_equal(a.embeddings, synth_dataset(spec, seed=4).embeddings)


def test_synth_labels_and_ids():
    data = synth_dataset(SynthSpec(**SMALL), seed=0)
    assert data.count(F) == 200 and data.count(I) == 100
    assert data.ids[0] == "a000000"
    assert data.dim == 4


def test_zero_shift_gives_identical_mixtures():
    id_mix, ood_mix = build_mixtures(SynthSpec(**SMALL, shift_distance=0.0), seed=2)
    np.testing.assert_array_equal(id_mix.means, ood_mix.means)
    np.testing.assert_array_equal(id_mix.covariances, ood_mix.covariances)


def test_shifted_mixture_is_separable_by_true_density():
    spec = SynthSpec(dim=2, n_id=1000, n_ood=1000, n_components=1, shift_distance=6.0)
    id_mix, _ = build_mixtures(spec, seed=0)
    data = synth_dataset(spec, seed=0)
    assert auroc(id_mix.log_prob(data.embeddings), data.positive_mask()) >= 0.99


def test_mixture_sample_moments():
    mean = np.array([1.0, -2.0])
    cov = np.array([[2.0, 0.6], [0.6, 1.0]])
    mixture = GaussianMixture(np.array([1.0]), mean[None, :], cov[None, :, :])
    x = mixture.sample(200_000, np.random.default_rng(0))
    np.testing.assert_allclose(x.mean(axis=0), mean, atol=0.02)
    np.testing.assert_allclose(np.cov(x, rowvar=False), cov, atol=0.03)


def test_covariances_are_symmetric_positive_definite():
    id_mix, ood_mix = build_mixtures(SynthSpec(**SMALL, cov_inflation=1.5), seed=1)
    for cov in np.concatenate([id_mix.covariances, ood_mix.covariances]):
        np.testing.assert_array_equal(cov, cov.T)
        assert np.all(np.linalg.eigvalsh(cov) > 0)
    np.testing.assert_allclose(ood_mix.covariances, 2.25 * id_mix.covariances)


def test_synth_benchmark_splits():
    train, val, test = synth_benchmark(SynthSpec(**SMALL), seed=0)
    assert train.count(I) == 0
    assert val.count(F) == val.count(I) == 30
    assert test.count(F) == test.count(I) == 30


def test_synth_spec_validation():
    with pytest.raises(ValidationError):
        SynthSpec(val_frac=0.5, test_frac=0.5)
    with pytest.raises(ValidationError):
        SynthSpec(dim=1)
