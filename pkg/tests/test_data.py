import os
import struct
from pathlib import Path

import numpy as np
import pytest

from adaptmerge.data import (IdxFormatError, LabeledSet, SplitError, augment, augment_batch, block_patterns,
                             cap_per_class, generate_synthetic, hflip, load_corpus, load_idx, preprocess,
                             read_idx, read_synthetic_spec, resize_bilinear, split_tasks, write_idx)
from oracles import nearest_mean_accuracy


def raw_idx(path, magic_bytes, dims, payload):
    path.write_bytes(bytes(magic_bytes) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload))
    return path


@pytest.fixture
def two_image_fixture(tmp_path):
    # hand-written: two 2x3 images and two labels
    images = raw_idx(tmp_path / "img.idx", [0, 0, 8, 3], [2, 2, 3], [0, 1, 2, 3, 4, 5, 255, 254, 253, 252, 251, 250])
    labels = raw_idx(tmp_path / "lbl.idx", [0, 0, 8, 1], [2], [7, 3])
    return images, labels


# --- IDX ------------------------------------------------------------------

def test_hand_written_fixture(two_image_fixture):
    data = load_idx(*two_image_fixture)
    assert len(data) == 2
    assert data.images.dtype == np.uint8
    assert data.images[0].tolist() == [[0, 1, 2], [3, 4, 5]]
    assert data.images[1].tolist() == [[255, 254, 253], [252, 251, 250]]
    assert data.labels.tolist() == [7, 3]


def test_label_count_mismatch(tmp_path, two_image_fixture):
    images, _ = two_image_fixture
    labels = raw_idx(tmp_path / "lbl3.idx", [0, 0, 8, 1], [3], [1, 2, 3])
    with pytest.raises(IdxFormatError, match="count mismatch.*bytes 4-7"):
        load_idx(images, labels)


def test_bad_magic_reports_offset(tmp_path):
    p = raw_idx(tmp_path / "bad.idx", [0, 0, 9, 1], [1], [0])
    with pytest.raises(IdxFormatError, match="byte offset 0"):
        read_idx(p)


def test_wrong_kind_of_file(two_image_fixture):
    images, labels = two_image_fixture
    with pytest.raises(IdxFormatError, match="expected 0x00000803"):
        load_idx(labels, images)


def test_truncated_payload_reports_offsets(tmp_path):
    p = raw_idx(tmp_path / "short.idx", [0, 0, 8, 3], [2, 2, 2], [1] * 5)
    with pytest.raises(IdxFormatError, match="expected 8 bytes from offset 16, found 5"):
        read_idx(p)


def test_truncated_header(tmp_path):
    p = tmp_path / "hdr.idx"
    p.write_bytes(bytes([0, 0, 8, 3, 0, 0]))
    with pytest.raises(IdxFormatError, match="truncated header"):
        read_idx(p)


def test_trailing_bytes_rejected(tmp_path):
    p = raw_idx(tmp_path / "long.idx", [0, 0, 8, 1], [2], [1, 2, 3])
    with pytest.raises(IdxFormatError, match="trailing"):
        read_idx(p)


@pytest.mark.parametrize("suffix", [".idx", ".gz"])
def test_write_read_roundtrip(tmp_path, rng, suffix):
    arr = rng.integers(0, 256, size=(4, 5, 6), dtype=np.uint8)
    write_idx(tmp_path / f"a{suffix}", arr)
    np.testing.assert_array_equal(read_idx(tmp_path / f"a{suffix}"), arr)


def _find_mnist():
    roots = [Path(os.environ["MNIST_DIR"])] if "MNIST_DIR" in os.environ else []
    roots += [Path("data/mnist"), Path.home() / "data" / "mnist"]
    for root in roots:
        for name in ("train-images-idx3-ubyte", "train-images-idx3-ubyte.gz"):
            if (root / name).exists():
                lbl = name.replace("images-idx3", "labels-idx1")
                return root / name, root / lbl
    return None


def test_public_digit_corpus_header():
    found = _find_mnist()
    if found is None:
        pytest.skip("public 60000-sample digit corpus not present (set MNIST_DIR)")
    data = load_idx(*found)
    assert len(data) == 60000 and data.images.shape[1:] == (28, 28)


def test_shipped_corpora_are_consistent():
    train, test = load_corpus("digits")
    assert train.classes == list(range(10)) == test.classes
    assert train.images.dtype == np.uint8
    letters, _ = load_corpus("letters")
    assert len(letters.classes) == 26


# --- synthetic ------------------------------------------------------------

def test_noiseless_synthetic_is_perfectly_separable():
    d = generate_synthetic(5, 20, image_size=8, sigma=0.0, seed=3, test_per_class=10)
    acc = nearest_mean_accuracy(d.train.images, d.train.labels, d.test.images, d.test.labels)
    assert acc == 100.0


def test_synthetic_is_byte_deterministic():
    a = generate_synthetic(4, 10, image_size=8, sigma=0.3, seed=9, test_per_class=5)
    b = generate_synthetic(4, 10, image_size=8, sigma=0.3, seed=9, test_per_class=5)
    assert a.train.images.tobytes() == b.train.images.tobytes()
    assert a.test.images.tobytes() == b.test.images.tobytes()


def test_synthetic_distances_metadata():
    d = generate_synthetic(3, 2, image_size=4, seed=1)
    flat = d.patterns.reshape(3, -1).astype(float)
    assert d.distances[0, 2] == pytest.approx(np.linalg.norm(flat[0] - flat[2]))
    assert np.all(np.diag(d.distances) == 0)


def test_duplicate_patterns_rejected():
    p = np.zeros((2, 1, 4, 4), dtype=np.float32)
    with pytest.raises(ValueError, match="distinct"):
        generate_synthetic(2, 3, image_size=4, patterns=p)


def test_negative_sigma_rejected():
    with pytest.raises(ValueError):
        generate_synthetic(2, 3, sigma=-0.1)


def test_block_patterns_are_constant_per_cell():
    p = block_patterns(3, 8, 2, seed=0)
    assert p.shape == (3, 1, 8, 8)
    assert np.all(p[:, :, :4, :4] == p[:, :, :1, :1])
    with pytest.raises(ValueError, match="divide"):
        block_patterns(3, 8, 3)


def test_synthetic_spec_file(tmp_path):
    p = tmp_path / "s.spec"
    p.write_text("# oracle set\nnum_classes = 4\nsigma = 0.45\n\nper_class=20\n")
    assert read_synthetic_spec(p) == {"num_classes": 4, "sigma": 0.45, "per_class": 20}
    p.write_text("num_classes = 4\ncolour = red\n")
    with pytest.raises(ValueError, match=":2: unknown key"):
        read_synthetic_spec(p)


# --- task splitting -------------------------------------------------------

def labeled(num_classes, per_class=3):
    y = np.repeat(np.arange(num_classes), per_class)
    return LabeledSet(np.zeros((len(y), 2, 2), dtype=np.uint8), y)


@pytest.mark.parametrize("n, k, tasks", [(100, 10, 10), (8, 2, 4), (10, 2, 5)])
def test_task_counts(n, k, tasks):
    seq = split_tasks(labeled(n), labeled(n, 1), classes_per_task=k, class_order_seed=1)
    assert len(seq) == tasks
    assert all(len(t.classes) == k for t in seq)
    assert sorted(seq.classes) == list(range(n))


def test_seeds_permute_the_same_classes():
    a = split_tasks(labeled(10), labeled(10), 2, class_order_seed=0)
    b = split_tasks(labeled(10), labeled(10), 2, class_order_seed=1)
    assert a.class_order != b.class_order
    assert sorted(a.class_order) == sorted(b.class_order)


def test_samples_follow_their_task():
    seq = split_tasks(labeled(6, 4), labeled(6, 2), 3, class_order_seed=5)
    for t in seq:
        assert set(t.train.labels.tolist()) == set(t.classes)
        assert len(t.train) == 12 and len(t.test) == 6


def test_indivisible_universe_rejected():
    with pytest.raises(SplitError, match="not divisible"):
        split_tasks(labeled(10), labeled(10), 3)


def test_explicit_partition():
    seq = split_tasks(labeled(5), labeled(5), partition=[[4], [0, 1, 2], [3]])
    assert [t.classes for t in seq] == [[4], [0, 1, 2], [3]]
    with pytest.raises(SplitError, match="partition covers"):
        split_tasks(labeled(5), labeled(5), partition=[[0, 1], [2, 3]])


def test_manifest_is_deterministic(tmp_path):
    train, test = load_corpus("digits")
    paths = []
    for name in ("a.json", "b.json"):
        split_tasks(train, test, 2, class_order_seed=4).write_manifest(tmp_path / name)
        paths.append((tmp_path / name).read_bytes())
    assert paths[0] == paths[1]


def test_cap_per_class(rng):
    data = labeled(3, 10)
    capped = cap_per_class(data, 4, seed=0)
    assert np.bincount(capped.labels).tolist() == [4, 4, 4]
    assert np.all(np.diff(capped.ids) > 0)
    assert cap_per_class(data, 0, seed=0) is data


# --- preprocessing --------------------------------------------------------

def test_all_white_becomes_ones():
    out = preprocess(np.full((5, 7), 255, dtype=np.uint8), size=4)
    assert out.dtype == np.float32 and np.all(out == 1.0)


def test_same_size_resize_is_identity(rng):
    img = rng.integers(0, 256, size=(6, 6), dtype=np.uint8)
    np.testing.assert_array_equal(preprocess(img, size=6), (img / 255.0).astype(np.float32))


def test_checkerboard_upscale_matches_hand_computed():
    board = np.array([[0, 255], [255, 0]], dtype=np.uint8)
    # half-pixel centres: output rows sample source rows at 0, .25, .75, 1 (edge-clamped)
    expected = np.array([[0.00, 0.25, 0.75, 1.00],
                         [0.25, 0.375, 0.625, 0.75],
                         [0.75, 0.625, 0.375, 0.25],
                         [1.00, 0.75, 0.25, 0.00]])
    np.testing.assert_allclose(preprocess(board, size=4), expected, atol=1e-6)


def test_resize_preserves_constant_images():
    out = resize_bilinear(np.full((2, 3, 5, 9), 0.4), 7)
    np.testing.assert_allclose(out, 0.4, atol=1e-12)


def test_zero_dimension_rejected():
    with pytest.raises(ValueError):
        preprocess(np.zeros((0, 4), dtype=np.uint8))


# --- augmentation ---------------------------------------------------------

def test_symmetric_image_unchanged(rng):
    img = np.array([[1.0, 2.0, 1.0], [3.0, 5.0, 3.0]])
    for _ in range(10):
        np.testing.assert_array_equal(augment(img, rng), img)


def test_double_flip_is_identity(rng):
    img = rng.standard_normal((1, 4, 5))
    np.testing.assert_array_equal(hflip(hflip(img)), img)


def test_flip_frequency():
    r = np.random.default_rng(0)
    img = np.arange(6.0).reshape(2, 3)
    flips = sum(not np.array_equal(augment(img, r), img) for _ in range(10_000))
    assert 0.48 <= flips / 10_000 <= 0.52


def test_eval_mode_never_augments(rng):
    batch = rng.standard_normal((8, 1, 4, 4))
    for _ in range(5):
        np.testing.assert_array_equal(augment_batch(batch, rng, training=False), batch)


def test_batch_flips_only_selected_rows():
    batch = np.arange(4 * 3, dtype=float).reshape(4, 1, 1, 3)
    out = augment_batch(batch, np.random.default_rng(2))
    for a, b in zip(batch, out):
        assert np.array_equal(a, b) or np.array_equal(a[..., ::-1], b)
