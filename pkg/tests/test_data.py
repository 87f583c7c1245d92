import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmfusion.data import (
    CLASS_NAMES,
    DISEASES,
    NO_FINDING,
    DataError,
    Dataset,
    Example,
    SyntheticSpec,
    batch_iter,
    corpus,
    decode_pgm,
    encode_pgm,
    evidence_region,
    generate_synthetic,
    load_manifest,
    load_pgm,
    make_batch,
    write_manifest,
)
from mmfusion.features import build_vocab, encode_text
from mmfusion.tensor import Rng


def labels(*pos):
    v = [0] * 14
    for i in pos:
        v[i] = 1
    return v


def test_class_names():
    assert len(CLASS_NAMES) == 14 and CLASS_NAMES[NO_FINDING] == "No-Finding"


# -- PGM ------------------------------------------------------------------------

def test_pgm_byte_arithmetic():
    img = decode_pgm(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
    np.testing.assert_array_equal(img, [[0, 128 / 255], [1, 64 / 255]])


@pytest.mark.parametrize("value", [0, 255])
def test_pgm_constant_images(tmp_path, value):
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P5 3 3 255\n" + bytes([value] * 9))
    np.testing.assert_array_equal(load_pgm(path), np.full((3, 3), value / 255))


def test_pgm_header_comments():
    assert decode_pgm(b"P5\n# made by hand\n1 1\n255\n\x80")[0, 0] == 128 / 255


@pytest.mark.parametrize("buf", [
    b"P2\n1 1\n255\n\x00",
    b"P5\n2 1\n255\n\x00\x00",
    b"P5\n1 1\n65535\n\x00\x00",
    b"P5\n2 2\n255\n\x00",
    b"P5\n2",
])
def test_pgm_rejections(buf):
    with pytest.raises(DataError):
        decode_pgm(buf)


@given(st.integers(1, 6), st.integers(0, 2**31))
def test_pgm_round_trip_on_byte_grid(side, seed):
    px = Rng(seed).integers(0, 256, size=(side, side))
    img = px / 255.0
    np.testing.assert_array_equal(decode_pgm(encode_pgm(img)), img)


# -- examples and manifests -----------------------------------------------------

def test_example_label_invariants():
    with pytest.raises(DataError):
        Example("a", np.zeros((2, 2)), "", labels(NO_FINDING, 3))
    with pytest.raises(DataError):
        Example("a", np.zeros((2, 2)), "", [0] * 13)
    with pytest.raises(DataError):
        Example("a", np.zeros((2, 2)), "", [2] + [0] * 13)


def test_dataset_ids_unique():
    ex = Example("a", np.zeros((2, 2)), "", labels(NO_FINDING))
    with pytest.raises(DataError):
        Dataset([ex, ex])


def test_empty_manifest(tmp_path):
    (tmp_path / "train.jsonl").write_text("")
    d = load_manifest(tmp_path / "train.jsonl")
    assert len(d) == 0 and d.split == "train"


def _write(tmp_path, records):
    (tmp_path / "img.pgm").write_bytes(b"P5\n2 2\n255\n" + bytes(4))
    path = tmp_path / "m.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def test_manifest_error_names_line(tmp_path):
    good = {"id": "a", "image": "img.pgm", "report": "r", "labels": labels(1)}
    bad = {"id": "b", "image": "img.pgm", "report": "r", "labels": [0] * 13}
    with pytest.raises(DataError, match=r"m\.jsonl:2:.*13"):
        load_manifest(_write(tmp_path, [good, bad]))


def test_manifest_no_finding_conflict(tmp_path):
    rec = {"id": "a", "image": "img.pgm", "report": "r", "labels": labels(NO_FINDING, 0)}
    with pytest.raises(DataError, match=":1:"):
        load_manifest(_write(tmp_path, [rec]))


def test_manifest_malformed_and_missing(tmp_path):
    path = _write(tmp_path, [])
    path.write_text('{"id": "a"}\n')
    with pytest.raises(DataError, match=":1:"):
        load_manifest(path)
    path.write_text(json.dumps({"id": "a", "image": "nope.pgm", "report": "", "labels": labels(8)}) + "\n")
    with pytest.raises(FileNotFoundError):
        load_manifest(path)
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "absent.jsonl")


def test_manifest_round_trip(tmp_path):
    train, _, _ = generate_synthetic(SyntheticSpec(n_train=9, n_val=0, n_test=0, seed=3))
    write_manifest(train, tmp_path / "train.jsonl")
    again = load_manifest(tmp_path / "train.jsonl")
    assert again.split == "train"
    assert again.examples == train.examples


# -- synthetic generator --------------------------------------------------------

def test_same_seed_same_data():
    a = generate_synthetic(SyntheticSpec(n_train=30, n_val=3, n_test=5, seed=7))
    b = generate_synthetic(SyntheticSpec(n_train=30, n_val=3, n_test=5, seed=7))
    assert all(x.examples == y.examples for x, y in zip(a, b))
    c = generate_synthetic(SyntheticSpec(n_train=30, n_val=3, n_test=5, seed=8))
    assert a[0].examples != c[0].examples


def test_default_split_sizes():
    spec = SyntheticSpec()
    assert (spec.n_train, spec.n_val, spec.n_test) == (400, 12, 48)
    s = SyntheticSpec.scaled(3199)
    assert (s.n_val, s.n_test) == (96, 384)


def test_invalid_partition():
    with pytest.raises(DataError):
        generate_synthetic(SyntheticSpec(text_signal_classes=(0, 2, 4, 6), n_train=1))
    with pytest.raises(DataError):
        generate_synthetic(SyntheticSpec(text_signal_classes=(0, 1, 2, 4, 6, 10), n_train=1))


def test_noise_free_both_signal_classes_plant_both_channels():
    spec = SyntheticSpec(n_train=300, n_val=0, n_test=0, noise_rate=0.0, seed=1)
    train, _, _ = generate_synthetic(spec)
    for c in spec.both_signal_classes:
        rows, cols = evidence_region(spec, c)
        pos = [ex for ex in train if ex.labels[c]]
        assert pos
        for ex in pos:
            assert spec.theme_words[c] in ex.report.split()
            assert np.all(ex.image[rows, cols] == 1.0)


def test_noise_free_channels_are_exact():
    spec = SyntheticSpec(n_train=200, n_val=0, n_test=0, noise_rate=0.0, seed=2)
    train, _, _ = generate_synthetic(spec)
    for ex in train:
        words = set(ex.report.split())
        for c in DISEASES:
            rows, cols = evidence_region(spec, c)
            bright = bool(np.all(ex.image[rows, cols] == 1.0))
            assert (spec.theme_words[c] in words) == (spec.has_text(c) and bool(ex.labels[c]))
            if spec.has_vision(c):
                assert bright == bool(ex.labels[c])


def test_vision_only_classes_never_reach_text():
    # the report is a function of text-channel evidence alone, which is drawn
    # independently of every vision-only label
    spec = SyntheticSpec(n_train=400, n_val=0, n_test=0, noise_rate=0.1, seed=5)
    train, _, _ = generate_synthetic(spec)
    vocab = set(" ".join(corpus(train)).split())
    for c in spec.vision_signal_classes:
        assert spec.theme_words[c] not in vocab
    for c in spec.vision_signal_classes:
        pos = [ex.report for ex in train if ex.labels[c]]
        neg = [ex.report for ex in train if not ex.labels[c]]
        rate = lambda rs, w: sum(w in r.split() for r in rs) / len(rs)
        for t in spec.text_signal_classes:
            assert abs(rate(pos, spec.theme_words[t]) - rate(neg, spec.theme_words[t])) < 0.15


def test_label_marginals_over_ten_thousand():
    spec = SyntheticSpec(n_train=10_000, n_val=0, n_test=0, seed=11)
    train, _, _ = generate_synthetic(spec)
    y = train.labels()
    for c in DISEASES:
        assert abs(y[:, c].mean() - 0.25) <= 0.02, (c, y[:, c].mean())
    np.testing.assert_array_equal(y[:, NO_FINDING], (y[:, list(DISEASES)].sum(axis=1) == 0))


def test_evidence_regions_disjoint_and_inside():
    spec = SyntheticSpec()
    mask = np.zeros((spec.side, spec.side), dtype=int)
    for c in DISEASES:
        rows, cols = evidence_region(spec, c)
        mask[rows, cols] += 1
    assert mask.max() == 1 and mask.sum() == 4 * len(DISEASES)


def test_images_in_unit_interval():
    train, _, _ = generate_synthetic(SyntheticSpec(n_train=20, n_val=0, n_test=0))
    for ex in train:
        assert ex.image.shape == (16, 16)
        assert ex.image.min() >= 0 and ex.image.max() <= 1


# -- batching -------------------------------------------------------------------

def _dataset(n):
    train, _, _ = generate_synthetic(SyntheticSpec(n_train=n, n_val=0, n_test=0, seed=4))
    return train, build_vocab(corpus(train) or ["x"], 64)


def test_batch_sizes_three_three_one():
    d, tok = _dataset(7)
    batches = list(batch_iter(d, 3, tok, 8))
    assert [len(b) for b in batches] == [3, 3, 1]
    assert [i for b in batches for i in b.ids] == [ex.id for ex in d]


def test_batch_contents():
    d, tok = _dataset(4)
    b = make_batch(d.examples, tok, 8)
    assert b.token_ids.shape == (4, 8) and b.images.shape == (4, 16, 16) and b.labels.shape == (4, 14)
    assert b.token_ids[2].tolist() == encode_text(tok, d[2].report, 8)
    np.testing.assert_array_equal(b.labels, d.labels())


def test_shuffle_is_seeded():
    d, tok = _dataset(10)
    a = [i for b in batch_iter(d, 4, tok, 8, True, Rng(3)) for i in b.ids]
    b = [i for b in batch_iter(d, 4, tok, 8, True, Rng(3)) for i in b.ids]
    assert a == b and a != [ex.id for ex in d]


def test_batch_size_must_be_positive():
    d, tok = _dataset(2)
    with pytest.raises(ValueError):
        next(batch_iter(d, 0, tok, 8))


@given(st.integers(0, 25), st.integers(1, 30), st.booleans(), st.integers(0, 100))
def test_batch_union_is_dataset(n, size, shuffle, seed):
    d, tok = _DATA
    d = Dataset(d.examples[:n])
    ids = [i for b in batch_iter(d, size, tok, 6, shuffle, Rng(seed)) for i in b.ids]
    assert sorted(ids) == sorted(ex.id for ex in d)
    assert len(ids) == len(d)


_DATA = _dataset(25)
