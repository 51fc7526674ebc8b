import numpy as np
import pytest

from dfkd.compose import (LabelHistogram, TransferSet, TransferSetFormatError,
                          compose_balanced, compose_from_dataset,
                          compose_unbalanced, label_distribution, predict_labels)
from dfkd.data import ArraySource, UniformNoiseSource, make_source

import oracles


class StubTeacher:
    """Teacher stand-in with row-local logits, so batching cannot matter."""

    def __init__(self, num_classes, row_fn):
        self.num_classes = num_classes
        self._row_fn = row_fn

    def forward(self, images):
        return np.stack([self._row_fn(img) for img in np.asarray(images)])

    def logits_batched(self, images, batch_size=256):
        return self.forward(images)


def onehot(c, num_classes):
    z = np.zeros(num_classes)
    z[c] = 1.0
    return z


def marker_source(labels_wanted, name="marked", side=8):
    """Images whose top-left pixel encodes the label a marker stub will emit."""
    images = np.zeros((len(labels_wanted), 1, side, side))
    for i, c in enumerate(labels_wanted):
        images[i, 0, 0, 0] = float(c)
    return ArraySource(name, images)


def marker_stub(num_classes):
    return StubTeacher(num_classes, lambda img: onehot(int(img[0, 0, 0]), num_classes))


def hash_stub(num_classes):
    # pseudo-random but fully deterministic pixel-content hash; row sums are
    # computed per row, so any batch partition yields identical labels
    def row_fn(img):
        h = int(np.floor(float(img.sum()) * 1e6)) % num_classes
        return onehot(h, num_classes)
    return StubTeacher(num_classes, row_fn)


# -------------------------------------------- balanced: contract behaviors

def test_alternating_stream_fills_both_quotas_with_first_four():
    src = marker_source([0, 1, 0, 1, 0, 1, 0, 1])
    ts = compose_balanced(marker_stub(2), [src], 4)
    assert len(ts) == 4
    np.testing.assert_array_equal(ts.class_counts, [2, 2])
    assert ts.provenance == ["marked:0", "marked:1", "marked:2", "marked:3"]
    assert not ts.exhausted and ts.balanced


def test_single_class_stream_exhausts_with_half_quota():
    src = marker_source([0] * 10)
    ts = compose_balanced(marker_stub(2), [src], 4)
    np.testing.assert_array_equal(ts.class_counts, [2, 0])
    assert len(ts) == 2
    assert ts.exhausted          # loop ended by running dry, not by balance
    assert src.remaining == 0    # discarded samples are consumed all the same
    report = ts.imbalance_report()
    assert "class 1: 0 kept, 2 short" in report


def test_matches_literal_one_at_a_time_transcription():
    teacher = hash_stub(3)
    mk = lambda: [make_source("uniform", 60, seed=21), make_source("shapes", 60, seed=22)]

    ts = compose_balanced(teacher, mk(), 9, batch_size=4)

    def predict_one(image):
        return int(np.argmax(teacher.forward(image[None])[0]))

    want_imgs, want_labels, want_prov, want_exh = oracles.compose_transcribed(
        predict_one, mk(), 9, 3)
    assert ts.provenance == want_prov
    np.testing.assert_array_equal(ts.labels, want_labels)
    np.testing.assert_array_equal(ts.images, want_imgs)
    assert ts.exhausted == want_exh


def test_batch_size_cannot_change_the_result():
    teacher = hash_stub(4)
    results = []
    for bs in (1, 3, 7, 256):
        ts = compose_balanced(teacher, [make_source("uniform", 200, seed=5)], 40,
                              batch_size=bs)
        results.append(ts)
    base = results[0]
    for other in results[1:]:
        assert other.provenance == base.provenance
        np.testing.assert_array_equal(other.images, base.images)
        np.testing.assert_array_equal(other.labels, base.labels)


def test_source_left_as_if_consumed_one_at_a_time():
    # when quotas fill mid-chunk the unprocessed tail must return to the source
    teacher = hash_stub(2)
    chunked = make_source("uniform", 100, seed=8)
    compose_balanced(teacher, [chunked], 6, batch_size=32)

    stepped = make_source("uniform", 100, seed=8)
    _, labels, _, _ = oracles.compose_transcribed(
        lambda img: int(np.argmax(teacher.forward(img[None])[0])), [stepped], 6, 2)

    assert chunked.remaining == stepped.remaining
    a, ia = chunked.take(chunked.remaining)
    b, ib = stepped.take(stepped.remaining)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ia, ib)


def test_second_source_untouched_when_first_fills_quotas():
    teacher = hash_stub(2)
    first = make_source("uniform", 500, seed=2)
    second = make_source("uniform", 500, seed=3)
    ts_two = compose_balanced(teacher, [first, second], 20)
    assert second.remaining == 500
    ts_one = compose_balanced(teacher, [make_source("uniform", 500, seed=2)], 20)
    assert ts_two.provenance == ts_one.provenance
    np.testing.assert_array_equal(ts_two.images, ts_one.images)


def test_source_order_changes_the_admitted_set():
    teacher = hash_stub(2)
    ab = compose_balanced(teacher, [make_source("uniform", 30, seed=2),
                                    make_source("shapes", 30, seed=3)], 40)
    ba = compose_balanced(teacher, [make_source("shapes", 30, seed=3),
                                    make_source("uniform", 30, seed=2)], 40)
    assert ab.provenance != ba.provenance


def test_consume_once_no_duplicate_provenance():
    teacher = hash_stub(3)
    ts = compose_balanced(teacher, [make_source("uniform", 300, seed=7),
                                    make_source("gaussian", 300, seed=8)], 60)
    assert len(set(ts.provenance)) == len(ts.provenance)


def test_quota_reached_with_generous_supply():
    teacher = hash_stub(5)
    ts = compose_balanced(teacher, [make_source("uniform", 3000, seed=11)], 100)
    np.testing.assert_array_equal(ts.class_counts, [20] * 5)
    assert not ts.exhausted
    assert len(ts) == 100


def test_remainder_is_not_topped_up():
    teacher = hash_stub(3)
    ts = compose_balanced(teacher, [make_source("uniform", 2000, seed=12)], 100)
    assert ts.quota == 33
    assert len(ts) == 99  # 100 - 3*33 remainder intentionally dropped


def test_composition_is_deterministic():
    teacher = hash_stub(3)
    a = compose_balanced(teacher, [make_source("uniform", 200, seed=4)], 30)
    b = compose_balanced(teacher, [make_source("uniform", 200, seed=4)], 30)
    assert a.provenance == b.provenance
    np.testing.assert_array_equal(a.images, b.images)


def test_balanced_argument_validation():
    teacher = hash_stub(3)
    with pytest.raises(ValueError, match="source"):
        compose_balanced(teacher, [], 30)
    with pytest.raises(ValueError, match="size"):
        compose_balanced(teacher, [make_source("uniform", 10)], 2)
    with pytest.raises(ValueError, match="batch"):
        compose_balanced(teacher, [make_source("uniform", 10)], 9, batch_size=0)


# --------------------------------------------------------------- unbalanced

def test_unbalanced_takes_first_n_untouched():
    src = marker_source([0, 1, 1, 0, 1, 0, 0, 1])
    ts = compose_unbalanced(marker_stub(2), src, 5)
    assert len(ts) == 5
    assert not ts.balanced and not ts.exhausted
    np.testing.assert_array_equal(ts.labels, [0, 1, 1, 0, 1])
    assert src.remaining == 3


def test_unbalanced_constant_class_concentrates_counts():
    stub = StubTeacher(5, lambda img: onehot(3, 5))
    ts = compose_unbalanced(stub, UniformNoiseSource(12, seed=1), 12)
    np.testing.assert_array_equal(ts.class_counts, [0, 0, 0, 12, 0])


def test_unbalanced_short_source_sets_exhausted_flag():
    ts = compose_unbalanced(hash_stub(2), UniformNoiseSource(4, seed=2), 10)
    assert len(ts) == 4
    assert ts.exhausted


def test_unbalanced_histogram_from_trained_teacher_is_skewed(blob_teacher):
    # a trained teacher maps featureless noise to a lopsided label histogram
    ts = compose_unbalanced(blob_teacher, UniformNoiseSource(300, seed=3), 300)
    frac = ts.histogram().fractions
    assert frac.max() > 2.0 / blob_teacher.num_classes


# --------------------------------------------------------- label histograms

def test_constant_logits_tie_break_to_class_zero():
    stub = StubTeacher(4, lambda img: np.zeros(4))
    hist = label_distribution(stub, np.random.default_rng(0).random((10, 1, 8, 8)))
    np.testing.assert_array_equal(hist.counts, [10, 0, 0, 0])
    np.testing.assert_allclose(hist.fractions, [1, 0, 0, 0])


def test_histogram_fractions_count_correctly():
    src = marker_source([0] * 4 + [1] * 6)
    block, _ = src.take(10)
    hist = label_distribution(marker_stub(2), block)
    np.testing.assert_array_equal(hist.counts, [4, 6])
    np.testing.assert_allclose(hist.fractions, [0.4, 0.6])


def test_balanced_output_fractions_bounded_by_quota():
    teacher = hash_stub(4)
    ts = compose_balanced(teacher, [make_source("uniform", 1000, seed=9)], 50)
    hist = ts.histogram()
    assert np.all(hist.fractions <= ts.quota / len(ts) + 1e-12)


def test_histogram_csv_format(tmp_path):
    hist = LabelHistogram("x", [1, 3])
    p = tmp_path / "h.csv"
    hist.write_csv(p)
    assert p.read_text().splitlines() == ["class,count,fraction", "0,1,0.250000", "1,3,0.750000"]


def test_predict_labels_argmax_tie_break(blob_teacher):
    # argmax returns the lowest index among ties by construction; verify on
    # a crafted logit row via the histogram helper path
    stub = StubTeacher(3, lambda img: np.array([2.0, 2.0, 1.0]))
    labels = predict_labels(stub, np.zeros((5, 1, 8, 8)))
    assert set(labels) == {0}


# ----------------------------------------------------- container round trip

def make_ts(seed=0, note="roundtrip"):
    teacher = hash_stub(3)
    return compose_balanced(teacher, [make_source("uniform", 100, seed=seed)], 12,
                            note=note)


def test_container_roundtrip_bitwise(tmp_path):
    ts = make_ts(note="hello")
    p = tmp_path / "t.tsb"
    ts.save(p)
    back = TransferSet.load(p)
    np.testing.assert_array_equal(back.images, ts.images)
    np.testing.assert_array_equal(back.labels, ts.labels)
    assert back.provenance == ts.provenance
    assert back.note == "hello"
    assert back.balanced == ts.balanced
    assert back.exhausted == ts.exhausted
    assert back.target_size == ts.target_size
    assert back.num_classes == ts.num_classes


def test_container_corruption_taxonomy(tmp_path):
    ts = make_ts()
    p = tmp_path / "t.tsb"
    ts.save(p)
    blob = bytearray(p.read_bytes())

    bad_magic = tmp_path / "m.tsb"
    flipped = bytearray(blob)
    flipped[0] ^= 0xFF
    bad_magic.write_bytes(bytes(flipped))
    with pytest.raises(TransferSetFormatError, match="magic"):
        TransferSet.load(bad_magic)

    bad_version = tmp_path / "v.tsb"
    flipped = bytearray(blob)
    flipped[8] = 0x7F
    bad_version.write_bytes(bytes(flipped))
    with pytest.raises(TransferSetFormatError, match="version"):
        TransferSet.load(bad_version)

    truncated = tmp_path / "c.tsb"
    truncated.write_bytes(bytes(blob[:-3]))
    with pytest.raises(TransferSetFormatError, match="checksum"):
        TransferSet.load(truncated)

    payload_flip = tmp_path / "f.tsb"
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0x01
    payload_flip.write_bytes(bytes(flipped))
    with pytest.raises(TransferSetFormatError, match="checksum"):
        TransferSet.load(payload_flip)


def test_validate_catches_quota_violation():
    imgs = np.zeros((4, 1, 8, 8))
    with pytest.raises(ValueError, match="quota"):
        TransferSet(imgs, np.array([0, 0, 0, 1]), num_classes=2, target_size=4,
                    balanced=True, provenance=["s:0", "s:1", "s:2", "s:3"])


def test_validate_catches_unflagged_shortfall():
    imgs = np.zeros((2, 1, 8, 8))
    with pytest.raises(ValueError, match="exhaustion"):
        TransferSet(imgs, np.array([0, 1]), num_classes=2, target_size=6,
                    balanced=True, exhausted=False, provenance=["s:0", "s:1"])


# --------------------------------------------------------- dataset sampling

def test_compose_from_dataset_even_split(blob_train, blob_teacher):
    ts = compose_from_dataset(blob_teacher, blob_train, 30, seed=1)
    assert len(ts) == 30
    # selection is by true label; stored labels are still teacher predictions
    assert ts.provenance[0].startswith(blob_train.name)
    recount = predict_labels(blob_teacher, ts.images)
    np.testing.assert_array_equal(recount, ts.labels)


def test_compose_from_dataset_subset_of_classes(blob_train, blob_teacher):
    ts = compose_from_dataset(blob_teacher, blob_train, 10, classes=[0, 2], seed=2)
    assert len(ts) == 10
    idx = [int(p.rsplit(":", 1)[1]) for p in ts.provenance]
    assert set(blob_train.labels[idx]) == {0, 2}
    with pytest.raises(ValueError):
        compose_from_dataset(blob_teacher, blob_train, 10, classes=[7], seed=0)
