import json
import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fusionforge.score_data import (
    MULTI,
    SINGLE,
    Dataset,
    LabelMatrix,
    ScoreDataError,
    ScoreMatrix,
    SynthConfig,
    generate_synthetic,
    load_labels,
    load_manifest,
    load_scores,
    mixing_rate,
    reliability_accuracy,
    save_dataset,
    save_labels,
    save_scores,
    softmax_rows,
    split_folds,
    stack_streams,
    unstack,
)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# -- CSV loading -------------------------------------------------------------

def test_load_scores_parses_rows(tmp_path):
    p = write(tmp_path / "s.csv", "sample_id,c0,c1\na,0.9,0.1\nb,0.2,0.8\n")
    s = load_scores(p)
    assert s.scores.shape == (2, 2)
    assert s.sample_ids == ("a", "b")
    assert s.scores.tolist() == [[0.9, 0.1], [0.2, 0.8]]


def test_load_scores_rejects_out_of_range(tmp_path):
    p = write(tmp_path / "s.csv", "sample_id,c0,c1\na,1.2,0.1\n")
    with pytest.raises(ScoreDataError, match="score out of range"):
        load_scores(p)


def test_load_scores_class_count_mismatch(tmp_path):
    p = write(tmp_path / "s.csv", "sample_id,c0,c1,c2\na,0.1,0.2,0.7\n")
    with pytest.raises(ScoreDataError, match="class-count mismatch"):
        load_scores(p, expected_classes=2)


@pytest.mark.parametrize("body,msg", [
    ("sample_id,c0,c1\na,0.1\n", "ragged"),
    ("sample_id,c0,c1\na,0.1,abc\n", "non-numeric"),
    ("sample_id,c0,c1\na,0.1,nan\n", "non-finite"),
])
def test_load_scores_malformed(tmp_path, body, msg):
    with pytest.raises(ScoreDataError, match=msg):
        load_scores(write(tmp_path / "s.csv", body))


def test_load_scores_missing_file(tmp_path):
    with pytest.raises(ScoreDataError, match="no such file"):
        load_scores(tmp_path / "absent.csv")


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)),
                  elements=st.floats(0.0, 1.0, allow_subnormal=False)))
def test_score_csv_round_trip(tmp_path_factory, scores):
    path = tmp_path_factory.mktemp("rt") / "s.csv"
    sm = ScoreMatrix("s", scores, [f"id{i}" for i in range(scores.shape[0])])
    save_scores(sm, path)
    back = load_scores(path)
    np.testing.assert_allclose(back.scores, scores, rtol=1e-12, atol=0)
    assert back.sample_ids == sm.sample_ids


def test_labels_round_trip(tmp_path):
    labels = LabelMatrix.from_indices([0, 2, 1], 3, sample_ids=["a", "b", "c"])
    save_labels(labels, tmp_path / "l.csv")
    back = load_labels(tmp_path / "l.csv")
    assert back.labels.tolist() == labels.labels.tolist()
    assert back.class_names == labels.class_names


def test_label_invariants():
    with pytest.raises(ScoreDataError):
        LabelMatrix(np.array([[1.0, 1.0]]), ["a", "b"], SINGLE)
    with pytest.raises(ScoreDataError):
        LabelMatrix(np.array([[0.5, 0.5]]), ["a", "b"], MULTI)
    assert LabelMatrix(np.array([[1.0, 1.0]]), ["a", "b"], MULTI).n_classes == 2


def test_score_matrix_is_read_only():
    s = ScoreMatrix("s", [[0.5, 0.5]], ["a"])
    with pytest.raises(ValueError):
        s.scores[0, 0] = 1.0


# -- manifests ----------------------------------------------------------------

def test_manifest_relative_paths_and_softmax(tmp_path):
    sub = tmp_path / "data"
    sub.mkdir()
    write(sub / "labels.csv", "sample_id,a,b\nx,1,0\ny,0,1\n")
    write(sub / "raw.csv", "sample_id,a,b\nx,3.0,-1.0\ny,0.0,2.0\n")
    write(sub / "m.json", json.dumps({"mode": "single", "labels": "labels.csv",
                                       "streams": [{"id": "raw", "path": "raw.csv"}]}))
    with pytest.raises(ScoreDataError, match="out of range"):
        load_manifest(sub / "m.json")
    data = load_manifest(sub / "m.json", softmax=True)
    np.testing.assert_allclose(data.streams[0].scores.sum(axis=1), 1.0, rtol=0, atol=1e-15)
    assert data.stream_order == ("raw",)


def test_manifest_missing_key(tmp_path):
    write(tmp_path / "m.json", json.dumps({"mode": "single", "streams": []}))
    with pytest.raises(ScoreDataError, match="labels"):
        load_manifest(tmp_path / "m.json")


def test_save_dataset_round_trip(tmp_path):
    train, _ = generate_synthetic(SynthConfig.patterned(30, 5, 4, 2, seed=3))
    path = save_dataset(train, tmp_path, "train", config={"seed": 3})
    back = load_manifest(path)
    for a, b in zip(train.streams, back.streams):
        assert a.scores.tolist() == b.scores.tolist()
    assert json.loads(path.read_text())["config"] == {"seed": 3}


def test_softmax_rows_shift_invariant(rng):
    z = rng.normal(size=(5, 4))
    np.testing.assert_allclose(softmax_rows(z), softmax_rows(z + 7.0), rtol=1e-12)


# -- stacking -------------------------------------------------------------------

def test_stack_single_stream_identity():
    s = ScoreMatrix("a", [[0.1, 0.2, 0.7], [0.3, 0.3, 0.4]], ["x", "y"])
    assert stack_streams([s]).matrix.tolist() == s.scores.tolist()


def test_stack_concatenates_rows():
    a = ScoreMatrix("a", [[0.9, 0.1]], ["x"])
    b = ScoreMatrix("b", [[0.3, 0.7]], ["x"])
    st_ = stack_streams([a, b])
    assert st_.matrix.tolist() == [[0.9, 0.1, 0.3, 0.7]]
    assert st_.stream_order == ("a", "b")


def test_stack_rejects_swapped_sample_order():
    a = ScoreMatrix("a", [[0.9, 0.1], [0.5, 0.5]], ["x", "y"])
    b = ScoreMatrix("b", [[0.3, 0.7], [0.5, 0.5]], ["y", "x"])
    with pytest.raises(ScoreDataError):
        stack_streams([a, b])


@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**32))
def test_unstack_recovers_streams(M, C, N, seed):
    r = np.random.default_rng(seed)
    ids = [str(i) for i in range(N)]
    streams = [ScoreMatrix(f"s{m}", r.uniform(size=(N, C)), ids) for m in range(M)]
    back = unstack(stack_streams(streams), ids)
    for a, b in zip(streams, back):
        assert a.stream_id == b.stream_id
        assert np.array_equal(a.scores, b.scores)


def test_dataset_rejects_inconsistent_streams():
    labels = LabelMatrix.from_indices([0, 1], 2)
    with pytest.raises(ScoreDataError):
        Dataset([ScoreMatrix("a", [[0.5, 0.5]], ["x"])], labels, SINGLE)
    with pytest.raises(ScoreDataError):
        Dataset([], labels, SINGLE)


# -- synthesis ----------------------------------------------------------------------

def test_perfect_reliability_is_noiseless():
    cfg = SynthConfig(50, 20, 4, 2, np.ones((2, 4)), seed=1)
    train, test = generate_synthetic(cfg)
    for data in (train, test):
        assert np.all(reliability_accuracy(data) == 1.0)


def test_generation_is_deterministic():
    cfg = SynthConfig.patterned(40, 40, 6, 3, seed=9)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    for da, db in zip(a, b):
        for sa, sb in zip(da.streams, db.streams):
            assert sa.scores.tobytes() == sb.scores.tobytes()
        assert da.labels.labels.tobytes() == db.labels.labels.tobytes()
    other = generate_synthetic(SynthConfig.patterned(40, 40, 6, 3, seed=10))
    assert other[0].streams[0].scores.tobytes() != a[0].streams[0].scores.tobytes()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_patterned_stream_accuracy_matches_reliability(seed):
    cfg = SynthConfig.patterned(10, 3000, 6, 3, seed=seed)
    _, test = generate_synthetic(cfg)
    measured = reliability_accuracy(test)
    target = cfg.reliability.mean(axis=1)
    assert np.all(np.abs(measured - target) <= 0.03), (measured, target)


@pytest.mark.parametrize("sharing", [0.0, 0.5, 0.9])
def test_rows_are_distributions(sharing):
    cfg = SynthConfig.patterned(200, 10, 5, 2, seed=4, noise_sharing=sharing)
    train, _ = generate_synthetic(cfg)
    for s in train.streams:
        assert np.all((s.scores >= 0) & (s.scores <= 1))
        np.testing.assert_allclose(s.scores.sum(axis=1), 1.0, rtol=0, atol=1e-9)


def test_reliability_must_beat_chance():
    with pytest.raises(ScoreDataError):
        SynthConfig(10, 10, 4, 1, [[0.25, 0.9, 0.9, 0.9]])
    with pytest.raises(ScoreDataError):
        SynthConfig(10, 10, 4, 1, [[0.9] * 3])


def test_mixing_rate_monotone_in_target():
    rates = [mixing_rate(t, 6, 1.0, 0.5) for t in (0.3, 0.55, 0.75, 0.9, 0.99)]
    assert rates == sorted(rates)
    assert mixing_rate(1.0, 6, 1.0) == 1.0


# -- folds --------------------------------------------------------------------------

def _dataset(y, C):
    ids = [str(i) for i in range(len(y))]
    labels = LabelMatrix.from_indices(y, C, sample_ids=ids)
    return Dataset([ScoreMatrix("s", labels.labels * 0.5 + 0.25, ids)], labels, SINGLE)


def test_two_folds_partition():
    folds = split_folds(_dataset([0, 1] * 5, 2), 2, seed=1)
    vals = [set(va.tolist()) for _, va in folds]
    assert [len(v) for v in vals] == [5, 5]
    assert vals[0].isdisjoint(vals[1]) and vals[0] | vals[1] == set(range(10))
    for tr, va in folds:
        assert set(tr.tolist()) == set(range(10)) - set(va.tolist())


def test_stratified_folds_balance_classes():
    data = _dataset([0] * 5 + [1] * 5, 2)
    for _, va in split_folds(data, 5, seed=3):
        assert sorted(data.labels.indices()[va].tolist()) == [0, 1]


def test_folds_deterministic_and_fallback(caplog):
    data = _dataset([0, 0, 0, 1, 1, 1, 2], 3)
    a = split_folds(data, 3, seed=2)
    b = split_folds(data, 3, seed=2)
    assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    with caplog.at_level(logging.WARNING):
        folds = split_folds(data, 3, seed=2)
    assert "unstratified" in caplog.text
    assert sorted(np.concatenate([va for _, va in folds]).tolist()) == list(range(7))


def test_folds_reject_bad_k():
    data = _dataset([0, 1, 0], 2)
    with pytest.raises(ScoreDataError):
        split_folds(data, 1)
    with pytest.raises(ScoreDataError):
        split_folds(data, 4)


@given(st.lists(st.integers(0, 3), min_size=6, max_size=40), st.integers(2, 5), st.integers(0, 1000))
def test_folds_always_partition(y, k, seed):
    if len(y) < k:
        return
    folds = split_folds(_dataset(y, 4), k, seed)
    allv = np.concatenate([va for _, va in folds])
    assert sorted(allv.tolist()) == list(range(len(y)))
    sizes = [len(va) for _, va in folds]
    assert max(sizes) - min(sizes) <= 1
