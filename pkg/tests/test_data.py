import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from resdistill import data


@pytest.fixture(scope="module")
def small():
    return data.generate_synthetic(10, 6, 32, 1, seed=3)


def test_synthetic_deterministic():
    a = data.generate_synthetic(3, 4, 16, 1, seed=9)
    b = data.generate_synthetic(3, 4, 16, 1, seed=9)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.manifest.records == b.manifest.records


def test_synthetic_counts_and_labels():
    d = data.generate_synthetic(2, 2, 16, 1, seed=0)
    assert d.images.shape == (4, 1, 16, 16)
    assert list(d.labels) == [0, 0, 1, 1]
    assert d.num_classes == 2


def test_synthetic_range_and_channels():
    d = data.generate_synthetic(2, 3, 16, 3, seed=1)
    assert d.images.shape == (6, 3, 16, 16)
    assert d.images.min() >= 0.0 and d.images.max() <= 1.0
    scores = d.manifest.detector_scores()
    assert ((scores > 0) & (scores <= 1)).all()


def test_synthetic_rejects_tiny():
    with pytest.raises(ValueError):
        data.generate_synthetic(1, 4, 16)


def test_intra_class_closer_than_inter_class(small):
    x = small.images.reshape(len(small.images), -1)
    y = small.labels
    d = ((x[:, None, :] - x[None, :, :]) ** 2).mean(axis=2)
    same = y[:, None] == y[None, :]
    off_diag = ~np.eye(len(y), dtype=bool)
    intra = d[same & off_diag].mean()
    inter = d[~same].mean()
    assert intra < inter


def test_downsample_identity(rng):
    img = rng.random((2, 8, 8))
    assert np.abs(data.downsample(img, 8) - img).max() <= 1e-12


def test_downsample_constant():
    out = data.downsample(np.full((1, 9, 9), 0.37), 4)
    np.testing.assert_allclose(out, 0.37, rtol=0, atol=1e-15)


def test_downsample_checkerboard():
    board = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)[None]
    np.testing.assert_allclose(data.downsample(board, 2), np.full((1, 2, 2), 0.5), atol=1e-15)


def test_downsample_matches_pointwise_formula(rng):
    img = rng.random((1, 7, 7))
    out = data.downsample(img, 3)

    def sample(y, x):
        y, x = min(max(y, 0), 6), min(max(x, 0), 6)
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        y1, x1 = min(y0 + 1, 6), min(x0 + 1, 6)
        fy, fx = y - y0, x - x0
        return ((1 - fy) * (1 - fx) * img[0, y0, x0] + (1 - fy) * fx * img[0, y0, x1]
                + fy * (1 - fx) * img[0, y1, x0] + fy * fx * img[0, y1, x1])

    scale = 7 / 3
    ref = np.array([[sample((i + 0.5) * scale - 0.5, (j + 0.5) * scale - 0.5) for j in range(3)]
                    for i in range(3)])
    np.testing.assert_allclose(out[0], ref, atol=1e-14)


def test_downsample_rejects_upsampling():
    with pytest.raises(ValueError, match="upsampling"):
        data.downsample(np.zeros((1, 4, 4)), 8)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (1, 12, 12), elements=st.floats(-5, 5)), st.integers(1, 12))
def test_downsample_stays_in_range(img, target):
    out = data.downsample(img, target)
    assert out.shape == (1, target, target)
    assert out.min() >= img.min() - 1e-12
    assert out.max() <= img.max() + 1e-12


def test_flip_examples(rng):
    img = rng.random((2, 5, 6))
    assert np.array_equal(data.horizontal_flip(data.horizontal_flip(img)), img)
    sym = np.array([[[1.0, 2.0, 1.0]]])
    assert np.array_equal(data.horizontal_flip(sym), sym)
    assert data.horizontal_flip(np.array([[[3.0, 7.0]]])).tolist() == [[[7.0, 3.0]]]


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3, 4), elements=st.floats(-1e6, 1e6)))
def test_flip_involution(img):
    assert np.array_equal(data.horizontal_flip(data.horizontal_flip(img)), img)


def test_make_pairs(small):
    pairs = data.make_pairs(small, 32, 16)
    assert len(pairs) == len(small.images)
    assert pairs.x_t.shape[-1] == 32 and pairs.x_s.shape[-1] == 16
    items = list(pairs)
    assert all(p.label == lab for p, lab in zip(items, small.labels))
    np.testing.assert_array_equal(pairs.x_s, data.downsample(small.images, 16))
    same = data.make_pairs(small, 24, 24)
    assert np.array_equal(same.x_t, same.x_s)


def test_make_pairs_rejects_inverted(small):
    with pytest.raises(ValueError):
        data.make_pairs(small, 16, 24)
    with pytest.raises(ValueError):
        data.make_pairs(small, 64, 16)


def _manifest(num_ids, per_id):
    recs = [data.Record(f"img{i}_{j}", i, i * per_id + j) for i in range(num_ids) for j in range(per_id)]
    return data.DatasetManifest(recs)


def test_split_counts():
    s = data.split_open_set(_manifest(10, 5), 6, 0.4, seed=0)
    assert (len(s.gallery), len(s.known_probes), len(s.unknown_probes)) == (6, 24, 20)


def test_split_no_unknowns():
    s = data.split_open_set(_manifest(10, 5), 6, 0.0, seed=0)
    assert s.unknown_probes == []


def test_split_deterministic():
    m = _manifest(10, 5)
    assert data.split_open_set(m, 5, 0.3, 4) == data.split_open_set(m, 5, 0.3, 4)


def test_split_insufficient():
    with pytest.raises(ValueError):
        data.split_open_set(_manifest(4, 3), 3, 0.5, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(2, 6), st.data())
def test_split_invariants(num_ids, per_id, draw):
    m = _manifest(num_ids, per_id)
    g = draw.draw(st.integers(1, num_ids - 1))
    frac = draw.draw(st.floats(0.0, (num_ids - g) / num_ids))
    seed = draw.draw(st.integers(0, 1000))
    s = data.split_open_set(m, g, frac, seed)
    labels = m.labels()
    gallery_ids = labels[s.gallery]
    assert len(set(gallery_ids)) == len(gallery_ids) == g
    assert set(labels[s.known_probes]) <= set(gallery_ids)
    assert not set(labels[s.unknown_probes]) & set(gallery_ids)
    roles = s.gallery + s.known_probes + s.unknown_probes
    assert len(roles) == len(set(roles))


def test_load_manifest(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("path,identity,media_id,detector_score\na.pgm,0,3,0.5\nb.pgm,1,,\n")
    m = data.load_manifest(p)
    assert len(m) == 2
    assert m.records[0].media_id == 3 and m.records[0].detector_score == 0.5
    assert m.records[1].detector_score == 1.0
    assert m.records[1].image_path == str(tmp_path / "b.pgm")


def test_load_manifest_label_gap(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("path,identity,media_id,detector_score\na.pgm,0,0,1\nb.pgm,2,1,1\n")
    with pytest.raises(data.ManifestError, match="contiguous"):
        data.load_manifest(p)


def test_load_manifest_bad_row_names_line(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("path,identity,media_id,detector_score\na.pgm,0,0,1\nb.pgm,x,1,1\n")
    with pytest.raises(data.ManifestError, match=":3:"):
        data.load_manifest(p)
    p.write_text("file,label\n")
    with pytest.raises(data.ManifestError, match="header"):
        data.load_manifest(p)


def test_load_image_p5_white(tmp_path):
    p = tmp_path / "w.pgm"
    p.write_bytes(b"P5\n# comment\n3 2\n255\n" + bytes([255] * 6))
    img = data.load_image(p)
    assert img.shape == (1, 2, 3)
    assert np.all(img == 1.0)


def test_pnm_round_trip(tmp_path, rng):
    img = np.rint(rng.random((3, 4, 5)) * 255) / 255
    data.save_pnm(tmp_path / "c.ppm", img)
    np.testing.assert_array_equal(data.load_image(tmp_path / "c.ppm"), img)


def test_load_image_rejects_magic(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(ValueError, match="magic"):
        data.load_image(p)


def test_load_dataset(tmp_path):
    for i in range(4):
        data.save_pnm(tmp_path / f"{i}.pgm", np.full((1, 6, 6), i / 4))
    (tmp_path / "m.csv").write_text("path,identity,media_id,detector_score\n"
                                    + "".join(f"{i}.pgm,{i // 2},{i},1.0\n" for i in range(4)))
    ds = data.load_dataset(tmp_path / "m.csv")
    assert ds.images.shape == (4, 1, 6, 6)
    assert list(ds.labels) == [0, 0, 1, 1]
