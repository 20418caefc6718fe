import csv
import filecmp

import numpy as np
import pytest

from idenc import synthdata as sd


def test_sample_identity_deterministic():
    a = sd.sample_identity(np.random.default_rng(3), 5)
    b = sd.sample_identity(np.random.default_rng(3), 5)
    assert a == b


def test_identity_params_in_range():
    rng = np.random.default_rng(0)
    for i in range(10_000):
        ident = sd.sample_identity(rng, i)
        assert 0.0 <= ident.hue < 1.0
        assert ident.base_shape in sd.SHAPES
        assert 0.2 <= ident.eye_spacing <= 0.5
        assert 0.7 <= ident.face_aspect <= 1.3


def test_variation_in_range():
    rng = np.random.default_rng(1)
    for _ in range(2000):
        v = sd.sample_variation(rng)
        assert abs(v.dx) <= 0.15 and abs(v.dy) <= 0.15
        assert 0.85 <= v.scale <= 1.15
        assert abs(v.brightness) <= 0.15
        assert abs(v.angle) <= 25.0


def test_constructors_reject_out_of_range():
    with pytest.raises(ValueError):
        sd.SynthIdentity(0, 1.2, "circle", 0.3, 1.0, 0)
    with pytest.raises(ValueError):
        sd.SynthIdentity(0, 0.2, "hexagon", 0.3, 1.0, 0)
    with pytest.raises(ValueError):
        sd.Variation(0.3, 0.0, 1.0, 0.0, 0, 0.0)


@pytest.mark.parametrize("res", [16, 32])
def test_render_deterministic_and_bounded(res):
    rng = np.random.default_rng(2)
    ident, var = sd.sample_identity(rng, 0), sd.sample_variation(rng)
    a = sd.render(ident, var, res)
    b = sd.render(ident, var, res)
    assert a.shape == (3, res, res) and a.dtype == np.float32
    assert np.array_equal(a, b)
    assert a.min() >= -1.0 and a.max() <= 1.0


def test_render_unsupported_resolution():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sd.render(sd.sample_identity(rng), sd.sample_variation(rng), 24)


def test_variations_differ_but_identity_is_untouched():
    rng = np.random.default_rng(4)
    ident = sd.sample_identity(rng, 0)
    before = sd.SynthIdentity(**vars(ident))
    a = sd.render(ident, sd.sample_variation(rng), 32)
    b = sd.render(ident, sd.sample_variation(rng), 32)
    assert not np.array_equal(a, b)
    assert ident == before


def test_nearest_centroid_separability():
    ds = sd.generate_dataset(20, 1, 8, 0, 32, seed=0)
    assert sd.nearest_centroid_accuracy(ds.train) > 0.70


def test_separation_stats():
    ds = sd.generate_dataset(6, 1, 6, 0, 16, seed=1)
    s = ds.stats
    assert s["intra_pixel_variance"] > 0
    assert s["inter_centroid_distance"] > s["intra_spread"] * 0.5


def test_dataset_counts_and_split(tmp_path):
    ds = sd.build_dataset(3, 2, 4, 5, 16, seed=7, out_dir=tmp_path)
    assert set(ds.train_ids).isdisjoint(ds.test_ids)
    assert len(ds.unlabeled) == 5
    with open(tmp_path / "manifest.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 4 + 2 * 4 + 5
    assert list(rows[0]) == ["path", "identity_id", "split", "labeled"]
    unl = [r for r in rows if r["labeled"] == "0"]
    assert len(unl) == 5 and all(r["identity_id"] == "-1" for r in unl)
    train_ids = {r["identity_id"] for r in rows if r["split"] == "train" and r["labeled"] == "1"}
    test_ids = {r["identity_id"] for r in rows if r["split"] == "test"}
    assert train_ids.isdisjoint(test_ids)


def test_rebuild_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    sd.build_dataset(2, 1, 4, 3, 16, seed=11, out_dir=a)
    sd.build_dataset(2, 1, 4, 3, 16, seed=11, out_dir=b)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files
    _, mismatch, errors = filecmp.cmpfiles(a, b, [str(f) for f in files], shallow=False)
    assert not mismatch and not errors


def test_load_round_trip(tmp_path):
    ds = sd.build_dataset(2, 1, 4, 2, 16, seed=5, out_dir=tmp_path)
    back = sd.load_dataset(tmp_path)
    assert back.train_ids == ds.train_ids and back.test_ids == ds.test_ids
    for i in ds.train_ids:
        np.testing.assert_array_equal(back.train[i], sd.quantize(ds.train[i]))
    np.testing.assert_array_equal(back.unlabeled, sd.quantize(ds.unlabeled))
    assert back.identities[0] == ds.identities[0]


def test_bad_counts():
    with pytest.raises(ValueError):
        sd.generate_dataset(2, 1, 3, 0, 16)
    with pytest.raises(ValueError):
        sd.generate_dataset(0, 1, 4, 0, 16)


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(-1, 1, (3, 5, 7)).astype(np.float32)
    sd.write_ppm(tmp_path / "x.ppm", img)
    raw = (tmp_path / "x.ppm").read_bytes()
    assert raw.startswith(b"P6\n7 5\n255\n") and len(raw) == 11 + 3 * 35
    back = sd.read_ppm(tmp_path / "x.ppm")
    np.testing.assert_array_equal(back, sd.quantize(img))
    assert np.abs(back - img).max() <= 1.0 / 127.5


def test_ppm_byte_mapping():
    np.testing.assert_array_equal(sd.to_bytes(np.array([-1.0, 0.0, 1.0, 2.0])), [0, 128, 255, 255])


def test_ppm_reader_skips_comments_and_rejects_truncation(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([0, 255, 128]))
    np.testing.assert_allclose(sd.read_ppm(p)[:, 0, 0], [-1.0, 1.0, 128 / 127.5 - 1.0], atol=1e-6)
    p.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(ValueError, match="truncated"):
        sd.read_ppm(p)
