import allure
import numpy as np
import pytest

from scene4d.errors import ConfigError
from scene4d.scene_io import (load_calibration, read_depth, read_image,
                              read_mask, read_raster)
from scene4d.synth import (SceneObject, SceneSpec, camera_ring,
                           intersect_box, intersect_sphere, load_scene_spec,
                           look_at_camera, parse_scene_spec, synth_scene,
                           write_synth)


def _small_spec(**kwargs):
    base = dict(n_cameras=3, width=48, height=36, focal=45.0, frames=2,
                objects=(SceneObject("sphere", (0.0, 0.0, 0.9), (0.5,),
                                     (0.15, 0.0, 0.0)),
                         SceneObject("box", (1.2, 1.0, 0.3), (0.3, 0.3, 0.3))))
    base.update(kwargs)
    return SceneSpec(**base)


@allure.feature("Камеры")
class TestCameras:

    @pytest.mark.positive
    def test_look_at(self):
        cam = look_at_camera(3, np.array([0.0, -4.0, 1.0]), np.zeros(3),
                             100.0, 64, 48)
        pix, z = cam.project(np.zeros(3))
        np.testing.assert_allclose(pix[0], [32.0, 24.0], atol=1e-9)
        assert z[0] == pytest.approx(np.sqrt(17.0))
        np.testing.assert_allclose(cam.center, [0.0, -4.0, 1.0], atol=1e-12)
        # мировая ось z смотрит вверх на изображении
        up, _ = cam.project(np.array([0.0, 0.0, 0.5]))
        assert up[0, 1] < 24.0

    @pytest.mark.positive
    def test_ring(self):
        spec = SceneSpec(n_cameras=4, ring_radius=3.0, camera_height=2.0)
        cams = camera_ring(spec)
        assert [c.id for c in cams] == [0, 1, 2, 3]
        np.testing.assert_allclose(cams[1].center, [0.0, 3.0, 2.0],
                                   atol=1e-12)
        for cam in cams:
            pix, _ = cam.project(np.asarray(spec.look_at))
            np.testing.assert_allclose(pix[0], [160.0, 120.0], atol=1e-9)


@allure.feature("Пересечения")
class TestIntersections:

    @pytest.mark.positive
    def test_sphere(self):
        rays = np.array([[0.0, 1.0, 0.0], [0.0, 2.0, 0.0], [1.0, 0.0, 0.0]])
        s = intersect_sphere(np.array([0.0, -5.0, 0.0]), rays, np.zeros(3),
                             1.0)
        assert s[0] == pytest.approx(4.0)
        assert s[1] == pytest.approx(2.0)
        assert s[2] == np.inf

    @pytest.mark.negative
    def test_sphere_behind_origin(self):
        s = intersect_sphere(np.zeros(3), np.array([[0.0, 1.0, 0.0]]),
                             np.array([0.0, -5.0, 0.0]), 1.0)
        assert s[0] == np.inf

    @pytest.mark.positive
    def test_box(self):
        rays = np.array([[0.0, 1.0, 0.0], [0.0, 1.0, 1.0], [0.0, 1.0, 0.0]])
        s = intersect_box(np.array([0.0, -3.0, 0.0]), rays, np.zeros(3),
                          np.array([1.0, 1.0, 1.0]))
        assert s[0] == pytest.approx(2.0)
        assert s[1] == np.inf
        s = intersect_box(np.array([0.0, -3.0, 0.0]), rays[:1],
                          np.zeros(3), np.array([0.5, 2.0, 0.5]))
        assert s[0] == pytest.approx(1.0)


@allure.feature("Рендер сцены")
class TestSynthScene:

    @pytest.fixture(scope="class")
    def scene(self):
        return synth_scene(_small_spec())

    @pytest.mark.positive
    def test_layout(self, scene):
        assert len(scene.cameras) == 3
        assert len(scene.images) == len(scene.depths) == 2
        img = scene.images[0][1]
        assert img.shape == (36, 48, 3) and img.dtype == np.uint8
        assert scene.masks[0][1].dtype == np.uint8
        assert scene.dynamic == {1: True, 2: False}
        labels = set()
        for mask in scene.masks[0].values():
            labels |= set(np.unique(mask).tolist())
        assert {0, 1} <= labels

    @allure.title("Глубина сферы совпадает с аналитическим пересечением")
    @pytest.mark.positive
    def test_sphere_depth(self, scene):
        cam = scene.cameras[0]
        obj = scene.spec.objects[0]
        mask = scene.masks[1][cam.id] == 1
        assert mask.any()
        rows, cols = np.nonzero(mask)
        pix = np.column_stack([cols, rows]).astype(np.float64)
        depth = scene.depths[1][cam.id][mask]
        points = cam.backproject(pix, depth)
        radii = np.linalg.norm(points - obj.center_at(1), axis=1)
        np.testing.assert_allclose(radii, 0.5, atol=1e-4)

    @pytest.mark.positive
    def test_flow_follows_motion(self, scene):
        cam = scene.cameras[0]
        mask = scene.masks[0][cam.id]
        flow = scene.flows[0][cam.id]
        # неподвижные бокс и фон
        assert np.all(flow[mask != 1] == 0.0)
        r, c = np.argwhere(mask == 1)[0]
        X = cam.backproject([[c, r]], scene.depths[0][cam.id][r, c])
        moved, _ = cam.project(X + np.array([0.15, 0.0, 0.0]))
        np.testing.assert_allclose(flow[r, c], moved[0] - [c, r], atol=1e-9)

    @pytest.mark.positive
    def test_last_frame_has_zero_flow(self, scene):
        assert all(np.all(f == 0.0) for f in scene.flows[-1].values())

    @pytest.mark.positive
    def test_noise_is_seeded(self):
        spec = _small_spec(frames=1, noise=0.05, seed=9)
        a, b = synth_scene(spec), synth_scene(spec)
        np.testing.assert_array_equal(a.images[0][0], b.images[0][0])
        clean = synth_scene(_small_spec(frames=1))
        assert not np.array_equal(a.images[0][0], clean.images[0][0])

    @pytest.mark.negative
    @pytest.mark.parametrize("kwargs, message", [
        (dict(n_cameras=1), "at least 2 cameras"),
        (dict(frames=0), "at least 1 frame"),
        (dict(width=0), "image size"),
        (dict(objects=(SceneObject("cone", (0, 0, 0), (1.0,)),)),
         "unknown object kind"),
    ])
    def test_invalid_spec(self, kwargs, message):
        with pytest.raises(ConfigError, match=message):
            synth_scene(_small_spec(**kwargs))


@allure.feature("Описание сцены")
class TestSceneSpecFile:

    @pytest.mark.positive
    def test_parse(self):
        spec = parse_scene_spec(
            "n_cameras = 4\n"
            "focal = 120.5  # пиксели\n"
            "look_at = 0 0 1\n"
            "wall_y = none\n"
            "object = sphere 0 0 1 0.4 0.1 0 0\n"
            "object = box 1 1 0.2 0.2 0.2 0.2 0 0 0\n")
        assert spec.n_cameras == 4
        assert spec.focal == 120.5
        assert spec.look_at == (0.0, 0.0, 1.0)
        assert spec.wall_y is None
        assert [o.kind for o in spec.objects] == ["sphere", "box"]
        assert spec.objects[0].size == (0.4,)
        assert spec.objects[0].dynamic and not spec.objects[1].dynamic

    @pytest.mark.positive
    def test_defaults_keep_one_sphere(self):
        spec = parse_scene_spec("frames = 3\n")
        assert spec.frames == 3
        assert len(spec.objects) == 1 and spec.objects[0].kind == "sphere"

    @pytest.mark.negative
    @pytest.mark.parametrize("text, message", [
        ("object = cone 0 0 0 1\n", "unknown object kind"),
        ("object = sphere 0 0 1\n", "sphere needs 7 numbers"),
        ("object =\n", "empty object line"),
        ("colour = red\n", "unknown key"),
        ("width = wide\n", "bad value"),
        ("look_at = 0 0\n", "look_at needs 3 numbers"),
    ])
    def test_parse_errors(self, text, message):
        with pytest.raises(ConfigError, match=message):
            parse_scene_spec(text)

    @pytest.mark.negative
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read scene spec"):
            load_scene_spec(tmp_path / "absent.txt")


@allure.feature("Запись на диск")
class TestWriteSynth:

    @pytest.mark.positive
    def test_files(self, tmp_path):
        scene = synth_scene(_small_spec())
        config = write_synth(tmp_path, scene)
        text = config.read_text(encoding="utf-8")
        assert "num_frames = 2" in text
        assert "frame_pattern = frames/t{t:03d}_cam{view}.ppm" in text
        cams = load_calibration(tmp_path / "calibration.txt")
        assert [c.id for c in cams] == [0, 1, 2]
        np.testing.assert_array_equal(
            read_image(tmp_path / "frames" / "t001_cam2.ppm"),
            scene.images[1][2])
        np.testing.assert_array_equal(
            read_mask(tmp_path / "gt" / "mask_t000_cam0.pgm"),
            scene.masks[0][0])
        depth = read_depth(tmp_path / "gt" / "depth_t000_cam0.raster")
        np.testing.assert_array_equal(np.isnan(depth),
                                      np.isnan(scene.depths[0][0]))
        flow = read_raster(tmp_path / "gt" / "flow_t000_cam0.raster")
        assert flow.shape == (36, 48, 2)
        motion = (tmp_path / "gt" / "motion.csv").read_text().splitlines()
        assert motion[0] == "object,vx,vy,vz,dynamic"
        assert motion[2] == "2,0.0,0.0,0.0,0"


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
