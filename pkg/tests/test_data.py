import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skippatch.data import (MITO, PairedDataset, augment, crop_side, harden_mask, is_one_hot, load_dataset,
                            load_em, load_mask, one_hot, read_manifest, resize_bilinear, save_em, save_mask,
                            synth_corpus, write_dataset)
from skippatch.netpbm import ImageFormatError, read_netpbm, write_netpbm
from skippatch.rng import SeededRng


def write_rgb(path, rgb):
    write_netpbm(path, np.asarray(rgb, dtype=np.uint8))
    return path


# --- netpbm -----------------------------------------------------------------------

def test_netpbm_round_trip(tmp_path):
    g = np.random.default_rng(0)
    gray = g.integers(0, 256, size=(7, 5), dtype=np.uint8)
    rgb = g.integers(0, 256, size=(4, 6, 3), dtype=np.uint8)
    write_netpbm(tmp_path / "a.pgm", gray)
    write_netpbm(tmp_path / "b.ppm", rgb)
    np.testing.assert_array_equal(read_netpbm(tmp_path / "a.pgm"), gray)
    np.testing.assert_array_equal(read_netpbm(tmp_path / "b.ppm"), rgb)


def test_netpbm_header_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n# max\n255\n\x07\xff")
    np.testing.assert_array_equal(read_netpbm(tmp_path / "c.pgm"), [[7, 255]])


@pytest.mark.parametrize("data,msg", [(b"P2\n1 1\n255\n0", "unsupported"), (b"P5\n1 1\n65535\n\0\0", "maxval"),
                                      (b"P5\n2 2\n255\n\0", "truncated"), (b"P5\n2", "header")])
def test_netpbm_errors(tmp_path, data, msg):
    (tmp_path / "bad.pgm").write_bytes(data)
    with pytest.raises(ImageFormatError, match=msg):
        read_netpbm(tmp_path / "bad.pgm")


def test_netpbm_missing_file(tmp_path):
    with pytest.raises(ImageFormatError, match="cannot read"):
        read_netpbm(tmp_path / "nope.pgm")


# --- mask and EM loading ------------------------------------------------------------

def test_mask_colour_mapping(tmp_path):
    rgb = np.zeros((2, 2, 3))
    rgb[0, 0] = (255, 0, 0)
    rgb[0, 1] = (10, 200, 10)
    rgb[1, 0] = (0, 0, 255)
    rgb[1, 1] = (255, 0, 0)
    m = load_mask(write_rgb(tmp_path / "m.ppm", rgb), 2)
    assert m[:, 0, 0].tolist() == [1, 0, 0]
    assert m[:, 0, 1].tolist() == [0, 1, 0]
    assert m[:, 1, 0].tolist() == [0, 0, 1]


def test_mask_downsample_stays_one_hot(tmp_path):
    g = np.random.default_rng(1)
    rgb = np.eye(3)[g.integers(0, 3, size=(1024, 1024))] * 255
    m = load_mask(write_rgb(tmp_path / "big.ppm", rgb), 512)
    assert m.shape == (3, 512, 512)
    assert is_one_hot(m)


def test_mask_load_rejects_gray(tmp_path):
    write_netpbm(tmp_path / "g.pgm", np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(ImageFormatError):
        load_mask(tmp_path / "g.pgm", 4)


def test_em_constant(tmp_path):
    write_netpbm(tmp_path / "c.pgm", np.full((64, 64), 128, dtype=np.uint8))
    im = load_em(tmp_path / "c.pgm", 32)
    assert im.shape == (1, 32, 32)
    assert np.abs(im - 128 / 255).max() <= 1e-12


def test_em_checkerboard_downsample(tmp_path):
    board = ((np.add.outer(np.arange(1024), np.arange(1024)) % 2) * 255).astype(np.uint8)
    write_netpbm(tmp_path / "cb.pgm", board)
    im = load_em(tmp_path / "cb.pgm", 512)
    assert np.abs(im[0, 1:-1, 1:-1] - 0.5).max() <= 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), h=st.integers(1, 20), w=st.integers(1, 20),
       oh=st.integers(1, 30), ow=st.integers(1, 30))
def test_bilinear_is_convex(seed, h, w, oh, ow):
    x = np.random.default_rng(seed).uniform(size=(1, h, w))
    y = resize_bilinear(x, oh, ow)
    assert y.shape == (1, oh, ow)
    assert y.min() >= x.min() - 1e-15 and y.max() <= x.max() + 1e-15


def test_mask_save_load_round_trip(tmp_path):
    g = np.random.default_rng(2)
    rgb = g.integers(0, 256, size=(16, 16, 3))
    m = load_mask(write_rgb(tmp_path / "in.ppm", rgb), 16)
    save_mask(tmp_path / "out.ppm", m)
    pixels = read_netpbm(tmp_path / "out.ppm")
    assert set(np.unique(pixels)) <= {0, 255}
    np.testing.assert_array_equal(pixels.argmax(axis=2), rgb.argmax(axis=2))
    np.testing.assert_array_equal(load_mask(tmp_path / "out.ppm", 16), m)


def test_em_save_quantises(tmp_path):
    im = np.array([[[0.0, 0.5, 1.0, 0.2]]])
    save_em(tmp_path / "e.pgm", im)
    np.testing.assert_array_equal(read_netpbm(tmp_path / "e.pgm"), [[0, 128, 255, 51]])


# --- hardening ----------------------------------------------------------------------

def test_harden_examples():
    soft = np.array([0.6, 0.3, 0.1]).reshape(3, 1, 1)
    assert harden_mask(soft)[:, 0, 0].tolist() == [1, 0, 0]
    uniform = np.full((3, 1, 1), 1 / 3)
    assert harden_mask(uniform)[:, 0, 0].tolist() == [1, 0, 0]
    m = one_hot(np.random.default_rng(3).integers(0, 3, size=(5, 5)))
    np.testing.assert_array_equal(harden_mask(m), m)


def test_harden_rejects_non_simplex():
    with pytest.raises(ValueError, match="simplex"):
        harden_mask(np.full((3, 2, 2), 0.5))
    with pytest.raises(ValueError):
        harden_mask(np.zeros((2, 2, 2)))


# --- augmentation -------------------------------------------------------------------

class FixedDraws:
    """Stands in for the RNG: no flips, crop at the origin."""

    def bernoulli(self, p=0.5):
        return False

    def integers(self, high):
        return 0


def test_augment_identity():
    m = one_hot(np.random.default_rng(4).integers(0, 3, size=(16, 16)))
    im = np.random.default_rng(5).uniform(size=(1, 16, 16))
    m2, im2 = augment(m, im, 1.0, FixedDraws())
    np.testing.assert_array_equal(m2, m)
    np.testing.assert_array_equal(im2, im)


def test_crop_side():
    assert crop_side(512, 0.9) == 485
    assert crop_side(512, 0.98) == 506
    assert crop_side(64, 1.0) == 64


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), area=st.floats(0.2, 1.0))
def test_augment_one_hot_and_pure(seed, area):
    m = one_hot(np.random.default_rng(seed).integers(0, 3, size=(32, 32)))
    im = np.random.default_rng(seed + 1).uniform(size=(1, 32, 32))
    a_m, a_im = augment(m, im, area, SeededRng(seed))
    b_m, b_im = augment(m, im, area, SeededRng(seed))
    assert is_one_hot(a_m)
    np.testing.assert_array_equal(a_m, b_m)
    np.testing.assert_array_equal(a_im, b_im)
    assert a_im.min() >= 0 and a_im.max() <= 1


def test_augment_rejects_bad_area():
    m = one_hot(np.zeros((4, 4), dtype=int))
    with pytest.raises(ValueError):
        augment(m, None, 0.0, SeededRng(0))


# --- synthetic corpus ---------------------------------------------------------------

def test_synth_corpus_properties():
    ds = synth_corpus(100, 64, 42)
    fractions = [m[MITO].mean() for m in ds.masks]
    assert all(is_one_hot(m) for m in ds.masks)
    assert 0.05 <= min(fractions) and max(fractions) <= 0.20
    assert all(im.shape == (1, 64, 64) and 0 <= im.min() and im.max() <= 1 for im in ds.images)


def test_synth_corpus_deterministic():
    a, b = synth_corpus(3, 32, 7), synth_corpus(3, 32, 7)
    for x, y in zip(a.masks + a.images, b.masks + b.images):
        assert x.tobytes() == y.tobytes()
    c = synth_corpus(3, 32, 8)
    assert not np.array_equal(a.masks[0], c.masks[0])


def test_synth_items_independent_of_n():
    a, b = synth_corpus(2, 32, 5), synth_corpus(4, 32, 5)
    np.testing.assert_array_equal(a.masks[1], b.masks[1])


# --- manifests and datasets ---------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    ds = synth_corpus(3, 32, 1)
    manifest = write_dataset(ds, tmp_path / "d")
    back = load_dataset(manifest, 32)
    assert len(back) == 3 and back.resolution == 32
    for a, b in zip(ds.masks, back.masks):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(ds.images, back.images):
        assert np.abs(a - b).max() <= 0.5 / 255 + 1e-12


def test_manifest_errors(tmp_path):
    (tmp_path / "m.tsv").write_text("# only a comment\n")
    with pytest.raises(ValueError, match="no pairs"):
        read_manifest(tmp_path / "m.tsv")
    (tmp_path / "m.tsv").write_text("a.ppm b.pgm\n")
    with pytest.raises(ValueError, match="m.tsv:1"):
        read_manifest(tmp_path / "m.tsv")


def test_paired_dataset_validation():
    m = one_hot(np.zeros((8, 8), dtype=int))
    with pytest.raises(ValueError):
        PairedDataset([m], [], "x")
    with pytest.raises(ValueError):
        PairedDataset([m], [np.zeros((1, 4, 4))], "x")
