import logging

import allure
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scene4d.errors import DegenerateInputError
from scene4d.scene_io import CameraView, fundamental_matrix
from scene4d.sparse_recon import (Feature, HarrisDetector, background_proxy,
                                  build_tracks, cluster_points,
                                  detect_features, epipolar_distances,
                                  match_descriptors, match_features,
                                  triangulate, triangulate_pairs,
                                  triangulate_tracks)


def _square_image():
    img = np.zeros((40, 40), dtype=np.uint8)
    img[10:30, 10:30] = 255
    return img


def _synthetic_features(cameras, X, rng, dim=16):
    desc = rng.normal(size=(len(X), dim))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    features = {}
    for cam in cameras:
        pix, _ = cam.project(X)
        features[cam.id] = [Feature(cam.id, pix[i], desc[i], 1.0)
                            for i in range(len(X))]
    return features


@allure.feature("Детектор признаков")
class TestHarris:

    @allure.title("Четыре угла квадрата")
    @pytest.mark.positive
    def test_square_corners(self):
        feats = detect_features(_square_image())
        assert len(feats) >= 4
        corners = np.array([[9.5, 9.5], [29.5, 9.5], [9.5, 29.5],
                            [29.5, 29.5]])
        nearest = [int(np.argmin(np.linalg.norm(corners - f.pos, axis=1)))
                   for f in feats[:4]]
        assert sorted(nearest) == [0, 1, 2, 3]
        for f in feats[:4]:
            assert np.min(np.linalg.norm(corners - f.pos, axis=1)) < 2.0
            assert np.linalg.norm(f.descriptor) == pytest.approx(1.0)

    @pytest.mark.positive
    def test_sorted_by_response_and_deterministic(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 256, (48, 48, 3), dtype=np.uint8)
        first = HarrisDetector(max_features=30).detect(img, view=2)
        again = HarrisDetector(max_features=30).detect(img, view=2)
        assert 0 < len(first) <= 30
        responses = [f.response for f in first]
        assert responses == sorted(responses, reverse=True)
        assert all(f.view == 2 for f in first)
        for a, b in zip(first, again):
            np.testing.assert_array_equal(a.pos, b.pos)

    @pytest.mark.negative
    def test_flat_image_has_no_features(self):
        assert detect_features(np.full((20, 20), 128, dtype=np.uint8)) == []

    @pytest.mark.negative
    def test_empty_image(self):
        with pytest.raises(ValueError):
            detect_features(np.zeros((0, 0)))


@allure.feature("Сопоставление")
class TestMatching:

    @pytest.mark.positive
    def test_permutation_recovered(self):
        desc_a = np.eye(4)
        perm = [2, 0, 3, 1]
        pairs = match_descriptors(desc_a, desc_a[perm])
        assert sorted(pairs) == sorted((perm[j], j) for j in range(4))

    @allure.title("Неоднозначное совпадение отсекается тестом отношения")
    @pytest.mark.negative
    def test_ratio_test_rejects_tie(self):
        a = np.array([[1.0, 0.0]])
        b = np.array([[0.9, 0.1], [0.9, -0.1]])
        assert match_descriptors(a, b) == []

    @pytest.mark.negative
    def test_allowed_mask(self):
        assert match_descriptors(np.eye(3), np.eye(3),
                                 allowed=np.zeros((3, 3), dtype=bool)) == []

    @pytest.mark.negative
    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            match_descriptors(np.eye(3), np.eye(4))

    @pytest.mark.positive
    def test_epipolar_distance_zero_for_true_match(self, stereo_pair, rng):
        cam_a, cam_b = stereo_pair
        X = rng.uniform(-0.3, 0.3, (5, 3))
        pa, _ = cam_a.project(X)
        pb, _ = cam_b.project(X)
        d = epipolar_distances(fundamental_matrix(cam_a, cam_b), pa, pb)
        assert d.shape == (5, 5)
        np.testing.assert_allclose(np.diag(d), 0.0, atol=1e-6)

    @allure.title("Эпиполярный фильтр отсекает сдвинутый признак")
    @pytest.mark.positive
    def test_match_features_epipolar(self, stereo_pair, rng):
        cam_a, cam_b = stereo_pair
        X = rng.uniform(-0.3, 0.3, (12, 3))
        features = _synthetic_features(stereo_pair, X, rng)
        feats_a, feats_b = features[cam_a.id], features[cam_b.id]
        moved = feats_b[0]
        feats_b = [Feature(moved.view, moved.pos + np.array([0.0, 30.0]),
                           moved.descriptor, 1.0)] + feats_b[1:]
        with allure.step("Без камер совпадают все дескрипторы"):
            pairs = match_features(feats_a, feats_b)
            assert set(pairs) == {(i, i) for i in range(12)}
        with allure.step("С камерами сдвинутый признак отброшен"):
            pairs = match_features(feats_a, feats_b, cam_a=cam_a, cam_b=cam_b)
            assert set(pairs) == {(i, i) for i in range(1, 12)}

    @pytest.mark.negative
    def test_match_features_empty(self):
        feats = [Feature(0, np.zeros(2), np.ones(4) / 2.0, 1.0)]
        assert match_features([], feats) == []
        assert match_features(feats, []) == []


@allure.feature("Треки и триангуляция")
class TestTriangulation:

    @pytest.fixture
    def scene(self, ring_cameras, rng):
        cams = ring_cameras[:3]
        X = rng.uniform(-0.4, 0.4, (25, 3)) + np.array([0.0, 0.0, 0.6])
        return cams, X, _synthetic_features(cams, X, rng)

    @allure.title("Треки по трём видам и точное восстановление точек")
    @pytest.mark.positive
    def test_tracks_and_points(self, scene):
        cams, X, features = scene
        cam_map = {c.id: c for c in cams}
        tracks = build_tracks(features, cam_map)
        assert tracks == [tuple((v, i) for v in range(3))
                          for i in range(len(X))]
        points = triangulate_tracks(tracks, features, cam_map)
        assert len(points) == len(X)
        for i, p in enumerate(points):
            np.testing.assert_allclose(p.X, X[i], atol=1e-6)
            assert p.reproj_error < 1e-6
            assert p.views() == {0, 1, 2}
            assert p.track == tracks[i]
            assert np.linalg.norm(p.descriptor) == pytest.approx(1.0)

    @pytest.mark.negative
    def test_one_feature_per_view_in_track(self, ring_cameras, rng):
        cams = ring_cameras[:2]
        X = np.array([[0.0, 0.0, 0.6]])
        features = _synthetic_features(cams, X, rng)
        # второй признак вида 0 с тем же дескриптором
        dup = features[0][0]
        features[0].append(Feature(0, dup.pos + 0.2, dup.descriptor, 1.0))
        tracks = build_tracks(features, {c.id: c for c in cams})
        assert all(len({v for v, _ in t}) == len(t) for t in tracks)

    @pytest.mark.negative
    def test_single_view_skipped(self, stereo_pair, caplog):
        cam_a, cam_b = stereo_pair
        with caplog.at_level(logging.WARNING, logger="scene4d"):
            out = triangulate([[(0, np.array([80.0, 60.0]))]], {0: cam_a})
        assert out == [None]
        assert "fewer than two views" in caplog.text

    @pytest.mark.negative
    def test_parallel_rays_skipped(self, stereo_pair, caplog):
        cam_a, _ = stereo_pair
        twin = CameraView(5, cam_a.K, cam_a.R, cam_a.t, cam_a.width,
                          cam_a.height)
        obs = [[(0, np.array([80.0, 60.0])), (5, np.array([80.0, 60.0]))]]
        with caplog.at_level(logging.WARNING, logger="scene4d"):
            out = triangulate(obs, {0: cam_a, 5: twin})
        assert out == [None]
        assert "parallel rays" in caplog.text

    @pytest.mark.negative
    def test_reprojection_threshold(self, stereo_pair):
        cam_a, cam_b = stereo_pair
        X = np.array([0.1, 0.2, 0.3])
        pa, _ = cam_a.project(X)
        pb, _ = cam_b.project(X)
        obs = [[(0, pa[0]), (1, pb[0] + np.array([0.0, 25.0]))]]
        assert triangulate(obs, {0: cam_a, 1: cam_b}) == [None]

    @given(st.lists(st.tuples(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5),
                              st.floats(-0.5, 0.5)), min_size=1, max_size=20))
    @settings(max_examples=25, deadline=None)
    def test_pairs_exact(self, coords):
        cam_a = CameraView(0, [[200, 0, 80], [0, 200, 60], [0, 0, 1]],
                           np.eye(3), [0.5, 0.0, 4.0], 160, 120)
        cam_b = CameraView(1, [[200, 0, 80], [0, 200, 60], [0, 0, 1]],
                           np.eye(3), [-0.5, 0.0, 4.0], 160, 120)
        X = np.array(coords)
        pa, _ = cam_a.project(X)
        pb, _ = cam_b.project(X)
        Y, valid = triangulate_pairs(cam_a, cam_b, pa, pb)
        assert valid.all()
        np.testing.assert_allclose(Y, X, atol=1e-7)


@allure.feature("Кластеризация")
class TestClustering:

    @pytest.mark.positive
    def test_two_blobs_and_outliers(self, rng):
        big = rng.normal(scale=0.03, size=(40, 3))
        small = rng.normal(scale=0.03, size=(30, 3)) + [5.0, 0.0, 0.0]
        lone = np.array([[0, 10, 0], [0, -10, 0], [10, 10, 0], [-10, 0, 0],
                         [0, 0, 10]], dtype=float)
        pts = np.vstack([big, small, lone])
        result = cluster_points(pts, radius=0.3, min_size=20)
        assert [c.label for c in result.clusters] == [1, 2]
        np.testing.assert_array_equal(result.clusters[0].members,
                                      np.arange(40))
        np.testing.assert_array_equal(result.clusters[1].members,
                                      np.arange(40, 70))
        np.testing.assert_array_equal(result.unclustered, np.arange(70, 75))
        np.testing.assert_allclose(result.clusters[1].centroid,
                                   small.mean(axis=0))

    @pytest.mark.negative
    def test_empty_and_bad_radius(self):
        result = cluster_points(np.zeros((0, 3)), radius=0.1)
        assert result.clusters == [] and len(result.unclustered) == 0
        with pytest.raises(ValueError):
            cluster_points(np.zeros((3, 3)), radius=0.0)


@allure.feature("Прокси фона")
class TestBackgroundProxy:

    @pytest.mark.positive
    def test_contains_all_points(self, rng):
        angle = 0.7
        rot = np.array([[np.cos(angle), -np.sin(angle), 0],
                        [np.sin(angle), np.cos(angle), 0], [0, 0, 1]])
        pts = rng.uniform([-3, -1, -0.2], [3, 1, 0.2], (200, 3)) @ rot.T
        box = background_proxy(pts)
        assert box.contains(pts).all()
        assert np.linalg.det(box.axes) == pytest.approx(1.0)
        # главная ось вдоль длинной стороны
        assert abs(box.axes[0] @ rot[:, 0]) == pytest.approx(1.0, abs=1e-2)
        assert len(box.corners()) == 8

    @pytest.mark.positive
    def test_planar_points(self, rng):
        pts = np.column_stack([rng.uniform(-1, 1, (50, 2)), np.zeros(50)])
        box = background_proxy(pts)
        assert box.contains(pts).all()

    @pytest.mark.negative
    def test_few_points_fall_back(self, caplog):
        with caplog.at_level(logging.WARNING, logger="scene4d"):
            box = background_proxy(np.array([[0, 0, 0], [1, 2, 3.0]]))
        np.testing.assert_array_equal(box.axes, np.eye(3))
        assert "axis-aligned" in caplog.text

    @pytest.mark.negative
    def test_no_points(self):
        with pytest.raises(DegenerateInputError):
            background_proxy(np.zeros((0, 3)))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
