import json

import numpy as np
import pytest

from radiodepth import fileio
from radiodepth.geometry import DepthMap, DepthMapSet, PointCloud, default_geometry
from radiodepth.phantom import render_ground_truth, sample_scene


@pytest.fixture
def geom():
    return default_geometry(16, 25.6)


def make_set(geom, seed=0):
    rng = np.random.default_rng(seed)
    maps = []
    for _ in range(4):
        v = np.full((16, 16), np.nan)
        sel = rng.random((16, 16)) < 0.6
        v[sel] = rng.uniform(400, 900, sel.sum())
        maps.append(DepthMap(v))
    return DepthMapSet(maps, ["a", "b"], geom)


class TestDmap:
    def test_depth_set_roundtrip_exact_float32(self, geom, tmp_path):
        dmset = make_set(geom)
        path = tmp_path / "x.dmap"
        fileio.write_depth_set(path, dmset)
        again = fileio.read_depth_set(path)
        assert again.object_ids == ["a", "b"]
        for m0, m1 in zip(dmset.maps, again.maps):
            f32 = m0.values.astype("<f4").astype(np.float64)
            v, w = np.isfinite(f32), np.isfinite(m1.values)
            assert np.array_equal(v, w)
            assert np.array_equal(f32[v], m1.values[w])

    def test_header_layout(self, geom, tmp_path):
        path = tmp_path / "x.dmap"
        fileio.write_depth_set(path, make_set(geom))
        raw = path.read_bytes()
        assert raw.startswith(b"DMAP\n")
        header = json.loads(raw.split(b"\n", 2)[1])
        assert header["version"] == 1
        assert header["channels"] == 4
        assert header["object_ids"] == ["a", "b"]
        assert header["geometry"]["width"] == 16
        blob = raw.split(b"\n", 2)[2]
        assert len(blob) == 4 * 16 * 16 * 4

    def test_bad_magic_rejected(self, geom, tmp_path):
        path = tmp_path / "x.dmap"
        fileio.write_depth_set(path, make_set(geom))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XMAP"
        path.write_bytes(bytes(raw))
        with pytest.raises(fileio.FileFormatError):
            fileio.read_dmap(path)

    def test_truncated_blob_rejected(self, geom, tmp_path):
        path = tmp_path / "x.dmap"
        fileio.write_depth_set(path, make_set(geom))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(fileio.FileFormatError):
            fileio.read_dmap(path)

    def test_label_mask_roundtrip(self, geom, tmp_path):
        scene = sample_scene(1, "hip-like", geometry=default_geometry(32, 12.8))
        _, labels, _ = render_ground_truth(scene)
        path = tmp_path / "labels.dmap"
        fileio.write_label_mask(path, labels, scene.geometry)
        again, _ = fileio.read_label_mask(path)
        assert again.object_ids == labels.object_ids
        assert np.array_equal(again.masks, labels.masks)

    def test_image_roundtrip(self, geom, tmp_path):
        img = np.random.default_rng(0).random((16, 16))
        path = tmp_path / "img.dmap"
        fileio.write_image(path, img, geom)
        again, geo2 = fileio.read_image(path)
        assert np.array_equal(again, img.astype("<f4").astype(np.float64))
        assert geo2.width == geom.width


class TestPly:
    def test_roundtrip_with_labels(self, tmp_path):
        rng = np.random.default_rng(0)
        cloud = PointCloud(rng.uniform(-50, 50, (40, 3)), np.array(["x"] * 25 + ["y"] * 15, dtype=object))
        path = tmp_path / "c.ply"
        fileio.write_ply(path, cloud)
        again = fileio.read_ply(path)
        assert np.array_equal(again.points, cloud.points)
        assert list(again.object_ids) == list(cloud.object_ids)

    def test_roundtrip_unlabelled(self, tmp_path):
        cloud = PointCloud(np.random.default_rng(1).uniform(-5, 5, (10, 3)))
        path = tmp_path / "c.ply"
        fileio.write_ply(path, cloud)
        again = fileio.read_ply(path)
        assert np.array_equal(again.points, cloud.points)
        assert again.object_ids is None

    def test_select_by_object(self, tmp_path):
        cloud = PointCloud(np.arange(12.0).reshape(4, 3), np.array(["a", "a", "b", "b"], dtype=object))
        path = tmp_path / "c.ply"
        fileio.write_ply(path, cloud)
        sel = fileio.read_ply(path).select("b")
        assert np.array_equal(sel.points, cloud.points[2:])

    def test_not_a_ply_rejected(self, tmp_path):
        path = tmp_path / "nope.ply"
        path.write_text("hello\n")
        with pytest.raises(fileio.FileFormatError):
            fileio.read_ply(path)


class TestModelFiles:
    def test_regressor_roundtrip_predictions_identical(self, tmp_path):
        from radiodepth.depthfit import PatchDepthRegressor, load_regressor, save_regressor

        geom = default_geometry(24, 17.0)
        scenes = []
        for s in (1, 2):
            scene = sample_scene(s, "hip-like", geometry=geom)
            gt, labels, img = render_ground_truth(scene)
            scenes.append((img, gt, labels))
        model = PatchDepthRegressor(patch_radius=1, hidden=(8,), epochs=3, seed=0)
        model.fit(scenes)
        path = tmp_path / "m.rdnet"
        save_regressor(path, model)
        again = load_regressor(path)
        p0 = model.predict(scenes[0][0], scenes[0][2])
        p1 = again.predict(scenes[0][0], scenes[0][2])
        for a, b in zip(p0.maps, p1.maps):
            assert np.array_equal(np.nan_to_num(a.values), np.nan_to_num(b.values))

    def test_shape_model_roundtrip(self, tmp_path):
        from radiodepth.ssm import build_ssm, load_shape_model, save_shape_model

        rng = np.random.default_rng(2)
        shapes = rng.normal(0, 10, (6, 30, 3))
        model = build_ssm(shapes, 4, object_id="femur_r")
        path = tmp_path / "m.rdssm"
        save_shape_model(path, model)
        again = load_shape_model(path)
        assert again.object_id == "femur_r"
        assert np.array_equal(again.mean, model.mean)
        assert np.array_equal(again.modes, model.modes)
        assert np.array_equal(again.mode_scales, model.mode_scales)

    def test_wrong_kind_rejected(self, tmp_path):
        from radiodepth.ssm import load_shape_model

        path = tmp_path / "m.rdssm"
        fileio.write_blob_file(path, {"kind": "other"}, [np.zeros(3)])
        with pytest.raises(fileio.FileFormatError):
            load_shape_model(path)

    def test_blob_length_mismatch_rejected(self, tmp_path):
        from radiodepth.ssm import load_shape_model

        path = tmp_path / "m.rdssm"
        fileio.write_blob_file(
            path,
            {"kind": "shape_model", "object_id": "", "n_points": 10, "n_modes": 2, "mode_scales": [2.0, 1.0]},
            [np.zeros(5)],
        )
        with pytest.raises(fileio.FileFormatError):
            load_shape_model(path)
