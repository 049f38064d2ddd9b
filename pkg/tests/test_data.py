import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sundial.data import (
    Kernel,
    ParseError,
    SeriesRecord,
    kernel_synth,
    load_corpus,
    s3_flatten,
    save_corpus,
    synth_corpus,
)
from sundial.tokenizer import DataError


def autocorr(x, lag):
    x = x - x.mean()
    return float(np.dot(x[:-lag], x[lag:]) / np.dot(x, x))


def test_empty_file_is_empty_corpus(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text("")
    assert load_corpus(p) == []


def test_single_line(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"id":"a","values":[1,2,3]}\n')
    recs = load_corpus(p)
    assert len(recs) == 1 and recs[0].id == "a" and len(recs[0]) == 3 and recs[0].freq is None


@given(st.lists(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20),
                min_size=1, max_size=5))
def test_round_trip_is_exact(tmp_path_factory, rows):
    p = tmp_path_factory.mktemp("rt") / "c.jsonl"
    recs = [SeriesRecord(f"s{i}", r, "h" if i % 2 else None) for i, r in enumerate(rows)]
    save_corpus(recs, p)
    back = load_corpus(p)
    assert [r.id for r in back] == [r.id for r in recs]
    assert [r.freq for r in back] == [r.freq for r in recs]
    for a, b in zip(recs, back):
        np.testing.assert_array_equal(a.values, b.values)


def test_blank_lines_skipped_but_nothing_dropped(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"id":"a","values":[1]}\n\n   \n{"id":"b","values":[2, 3]}\n')
    assert [r.id for r in load_corpus(p)] == ["a", "b"]


@pytest.mark.parametrize("line", [
    "{not json",
    '{"id": "a"}',
    '{"id": 3, "values": [1]}',
    '{"id": "a", "values": ["x"]}',
])
def test_malformed_line_reports_line_number(tmp_path, line):
    p = tmp_path / "c.jsonl"
    p.write_text('{"id":"ok","values":[1]}\n' + line + "\n")
    with pytest.raises(ParseError, match=":2:"):
        load_corpus(p)


def test_duplicate_id_rejected(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"id":"a","values":[1]}\n{"id":"a","values":[2]}\n')
    with pytest.raises(ParseError, match="duplicate"):
        load_corpus(p)


def test_non_finite_value_names_id_and_index(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"id":"zz","values":[1, 2, NaN]}\n')
    with pytest.raises(DataError, match="'zz'.*index 2"):
        load_corpus(p)


def test_empty_values_rejected():
    with pytest.raises(DataError):
        SeriesRecord("e", [])


# -- S3 ----------------------------------------------------------------------------------

def test_s3_single_variate():
    recs = s3_flatten(np.array([[1.0, 2.0, 3.0]]), "m")
    assert len(recs) == 1 and recs[0].id == "m#0"
    np.testing.assert_array_equal(recs[0].values, [1, 2, 3])


def test_s3_three_variates(rng):
    mat = rng.standard_normal((3, 5))
    recs = s3_flatten(mat, "x", freq="d")
    assert [r.id for r in recs] == ["x#0", "x#1", "x#2"]
    assert all(len(r) == 5 and r.freq == "d" for r in recs)
    np.testing.assert_array_equal(np.vstack([r.values for r in recs]), mat)


def test_s3_ragged_rejected():
    with pytest.raises(DataError, match="ragged"):
        s3_flatten([[1, 2, 3], [4, 5]], "r")


# -- KernelSynth ---------------------------------------------------------------------

def test_kernel_synth_deterministic():
    a, b = kernel_synth(42, 256), kernel_synth(42, 256)
    assert a.values.tobytes() == b.values.tobytes()
    assert kernel_synth(43, 256).values.tobytes() != a.values.tobytes()


def test_periodic_kernel_autocorrelation():
    rec = kernel_synth(0, 480, kernels=[Kernel("periodic", {"period": 24.0})])
    assert autocorr(rec.values, 24) - autocorr(rec.values, 17) >= 0.2


def test_white_noise_lag1_near_zero():
    rec = kernel_synth(0, 1000, kernels=[Kernel("white", {"variance": 1.0})])
    assert abs(autocorr(rec.values, 1)) <= 0.15


@pytest.mark.parametrize("seed", range(8))
def test_generated_series_standardized(seed):
    v = kernel_synth(seed, 200).values
    assert abs(v.mean()) < 1e-6 and abs(v.std() - 1) < 1e-6


def test_composed_kernels_are_psd():
    x = np.arange(64.0)
    for fam, params in [("linear", {"offset": 0.3, "variance": 0.1}), ("rbf", {"length_scale": 5.0}),
                        ("periodic", {"period": 12.0}), ("white", {"variance": 0.5})]:
        eig = np.linalg.eigvalsh(Kernel(fam, params).matrix(x))
        assert eig.min() > -1e-8, fam


def test_impossible_kernel_raises_after_retries():
    # zero covariance and no jitter: Cholesky fails, and a fixed kernel cannot be redrawn
    with pytest.raises(DataError):
        kernel_synth(0, 32, kernels=[Kernel("white", {"variance": 0.0})], jitter=0.0)


@pytest.mark.parametrize("length,max_k", [(8, 2), (32, 0)])
def test_kernel_synth_rejects_bad_arguments(length, max_k):
    with pytest.raises(ValueError):
        kernel_synth(0, length, max_k)


def test_synth_corpus_ids_unique_and_json_safe(tmp_path):
    recs = synth_corpus(3, 5, 64)
    assert len({r.id for r in recs}) == 5
    save_corpus(recs, tmp_path / "s.jsonl")
    for line in (tmp_path / "s.jsonl").read_text().splitlines():
        json.loads(line)
