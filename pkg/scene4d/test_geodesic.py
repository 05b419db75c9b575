import allure
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import shortest_path

from scene4d.geodesic import (NO_PARENT, build_forest, edge_weight,
                              path_to_center, star_constraint_edges,
                              star_energy, write_forest)
from scene4d.scene_io import read_raster


def _oracle(image, centers, gamma, mask=None):
    """Кратчайшие пути по всем парам на той же 8-связной сетке."""
    h, w = image.shape
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    rows, cols, vals = [], [], []
    for r in range(h):
        for c in range(w):
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if (dr, dc) == (0, 0) or not (0 <= rr < h and 0 <= cc < w):
                        continue
                    if not (mask[r, c] and mask[rr, cc]):
                        continue
                    rows.append(r * w + c)
                    cols.append(rr * w + cc)
                    # нулевой вес недопустим в разреженной матрице
                    vals.append(max(edge_weight(dr * dr + dc * dc,
                                                image[rr, cc] - image[r, c],
                                                gamma), 1e-300))
    graph = coo_matrix((vals, (rows, cols)), shape=(h * w, h * w)).tocsr()
    sources = [r * w + c for r, c in centers]
    dist = shortest_path(graph, method="D", indices=sources)
    return dist.min(axis=0).reshape(h, w)


@allure.feature("Геодезический лес")
class TestForest:

    @allure.title("Евклидова метрика на однородном изображении")
    @pytest.mark.positive
    def test_uniform_image(self):
        forest = build_forest(np.zeros((3, 3)), [(0, 0)], gamma=0.0)
        assert forest.dist[0, 2] == pytest.approx(2.0)
        assert forest.dist[2, 2] == pytest.approx(2.0 * np.sqrt(2.0))
        assert forest.dist[1, 2] == pytest.approx(1.0 + np.sqrt(2.0))
        assert forest.parent[0, 0] == NO_PARENT

    @given(arrays(np.float64, (3, 3), elements=st.floats(0.0, 1.0)),
           st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)),
                    min_size=1, max_size=3),
           st.floats(0.0, 1.0))
    @settings(max_examples=60, deadline=None)
    def test_matches_exhaustive_paths(self, image, centers, gamma):
        forest = build_forest(image, centers, gamma=gamma)
        np.testing.assert_allclose(forest.dist,
                                   _oracle(image, centers, gamma),
                                   atol=1e-9)

    @given(arrays(np.float64, (4, 4), elements=st.floats(0.0, 1.0)),
           st.floats(0.0, 1.0))
    @settings(max_examples=30, deadline=None)
    def test_parent_lies_on_shortest_path(self, image, gamma):
        forest = build_forest(image, [(1, 2)], gamma=gamma)
        h, w = forest.shape
        for idx in np.flatnonzero(forest.parent.ravel() != NO_PARENT):
            r, c = divmod(int(idx), w)
            pr, pc = divmod(int(forest.parent[r, c]), w)
            assert max(abs(pr - r), abs(pc - c)) == 1
            step = edge_weight((pr - r) ** 2 + (pc - c) ** 2,
                               image[r, c] - image[pr, pc], gamma)
            assert forest.dist[r, c] == pytest.approx(
                forest.dist[pr, pc] + step, abs=1e-9)

    @pytest.mark.positive
    def test_mask_blocks_paths(self):
        mask = np.ones((3, 5), dtype=bool)
        mask[:, 2] = False
        image = np.linspace(0.0, 1.0, 15).reshape(3, 5)
        forest = build_forest(image, [(1, 0)], gamma=0.5, mask=mask)
        assert not forest.reachable[:, 2:].any()
        assert np.all(forest.parent[:, 2:] == NO_PARENT)
        np.testing.assert_allclose(
            np.where(forest.reachable, forest.dist, -1.0),
            np.where(np.isfinite(_oracle(image, [(1, 0)], 0.5, mask)),
                     _oracle(image, [(1, 0)], 0.5, mask), -1.0), atol=1e-9)

    @pytest.mark.negative
    @pytest.mark.parametrize("centers, gamma, mask, message", [
        ([(0, 0)], 1.5, None, "gamma"),
        ([], 0.5, None, "at least one center"),
        ([(5, 0)], 0.5, None, "outside mask"),
        ([(0, 0)], 0.5, np.zeros((3, 3), dtype=bool), "outside mask"),
        ([(0, 0)], 0.5, np.ones((2, 2), dtype=bool), "mask shape"),
    ])
    def test_bad_arguments(self, centers, gamma, mask, message):
        with pytest.raises(ValueError, match=message):
            build_forest(np.zeros((3, 3)), centers, gamma=gamma, mask=mask)


@allure.feature("Звёздная выпуклость")
class TestStarConvexity:

    @pytest.fixture
    def forest(self, rng):
        return build_forest(rng.uniform(size=(6, 6)), [(2, 2), (4, 5)],
                            gamma=0.7)

    @pytest.mark.positive
    def test_union_of_paths_is_star_convex(self, forest):
        labeling = np.zeros(forest.shape, dtype=bool)
        for pixel in [(0, 0), (5, 0), (0, 5)]:
            path = path_to_center(forest, pixel)
            assert path[0] == pixel
            assert tuple(path[-1]) in {(2, 2), (4, 5)}
            for r, c in path:
                labeling[r, c] = True
        assert star_energy(labeling, forest) == 0.0
        assert star_energy(np.zeros(forest.shape), forest) == 0.0

    @allure.title("Пиксель без своего предка нарушает ограничение")
    @pytest.mark.negative
    def test_broken_path(self, forest):
        labeling = np.zeros(forest.shape, dtype=bool)
        labeling[0, 0] = True
        assert star_energy(labeling, forest) == np.inf

    @pytest.mark.negative
    def test_unreachable_foreground(self):
        mask = np.ones((3, 3), dtype=bool)
        mask[:, 1] = False
        forest = build_forest(np.zeros((3, 3)), [(0, 0)], mask=mask)
        labeling = np.zeros((3, 3), dtype=bool)
        labeling[0, 2] = True
        assert star_energy(labeling, forest) == np.inf
        assert path_to_center(forest, (0, 2)) == []

    @pytest.mark.positive
    def test_constraint_edges(self, forest):
        edges = star_constraint_edges(forest)
        assert edges.shape == (36 - 2, 2)
        parent = forest.parent.ravel()
        np.testing.assert_array_equal(parent[edges[:, 0]], edges[:, 1])

    @pytest.mark.positive
    def test_dump(self, forest, tmp_path):
        write_forest(tmp_path / "forest.raster", forest)
        raster = read_raster(tmp_path / "forest.raster")
        assert raster.shape == forest.shape + (2,)
        np.testing.assert_allclose(raster[..., 0], forest.dist, rtol=1e-6)
        np.testing.assert_array_equal(raster[..., 1], forest.parent)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
