import csv
import itertools
import logging

import allure
import numpy as np
import pytest

from scene4d.energy import (DepthLabelSpace, EnergyTerms, EnergyWeights,
                            joint_labels, neighbor_pairs, total_energy)
from scene4d.geodesic import build_forest
from scene4d.optimizer import (TRACE_HEADER, LabelDepthField,
                               expansion_move, optimize,
                               repair_star_feasibility, star_feasible,
                               write_trace)


def _random_terms(rng, spaces, shape=(3, 3), weights=None):
    labels = joint_labels(spaces)
    layers = tuple(sorted(spaces))
    n = shape[0] * shape[1]
    edges = neighbor_pairs(np.ones(shape, dtype=bool))
    steps = [s.step for s in spaces.values() if s is not None]
    return EnergyTerms(
        shape=shape, pixels=np.arange(n), labels=labels, layers=layers,
        data=rng.uniform(0.0, 2.0, (n, len(labels))),
        color=rng.uniform(0.0, 2.0, (n, len(layers))),
        edges=edges, contrast=rng.uniform(0.05, 1.0, len(edges)),
        d_max=2.0 * max(steps) if steps else 1.0,
        weights=weights or EnergyWeights(1.0, 1.0, 1.0, 1.0))


def _two_object_problem(rng):
    space = DepthLabelSpace(1.0, 2.0, 3)
    terms = _random_terms(rng, {0: None, 1: space, 2: space})
    image = rng.uniform(size=(3, 3))
    forests = {1: build_forest(image, [(0, 0)], gamma=0.7),
               2: build_forest(image, [(2, 2)], gamma=0.7)}
    return terms, forests


def _best_move(labels, alpha, terms, forests):
    """Перебор всех подмножеств пикселей, переходящих в alpha."""
    candidates = np.flatnonzero(labels != alpha)
    best = np.inf
    for bits in itertools.product([False, True], repeat=len(candidates)):
        proposal = labels.copy()
        proposal[candidates[np.array(bits, dtype=bool)]] = alpha
        if not star_feasible(proposal, terms, forests):
            continue
        best = min(best, total_energy(proposal, terms))
    return best


def _global_minimum(terms, forests):
    """
    Глобальный минимум по всем разметкам 3x3 с учётом звёздных
    ограничений: энергия тензором по осям-пикселям.
    """
    L, n = terms.n_labels, terms.n_pixels
    labels = np.arange(L)

    def along(values, *axes):
        shape = [1] * n
        for axis in axes:
            shape[axis] = L
        return values.reshape(shape)

    energy = np.zeros((L,) * n)
    for p in range(n):
        unary = np.array([terms.unary(a)[p] for a in labels])
        energy = energy + along(unary, p)
    for e, (p, q) in enumerate(terms.edges):
        la, lb = np.meshgrid(labels, labels, indexing="ij")
        table = terms.pairwise(la.ravel(), lb.ravel(),
                               np.full(L * L, e)).reshape(L, L)
        if p > q:
            table, p, q = table.T, q, p
        energy = energy + along(table, p, q)
    for layer, forest in forests.items():
        inside = terms.label_layer[labels] == layer
        parent = forest.parent.ravel()
        centers = forest.center_mask().ravel()
        for p in range(n):
            if centers[p]:
                continue
            if parent[p] < 0:
                energy = np.where(along(inside, p), np.inf, energy)
                continue
            q = int(parent[p])
            bad = np.logical_and.outer(inside, ~inside)
            if p > q:
                bad, lo, hi = bad.T, q, p
            else:
                lo, hi = p, q
            energy = np.where(along(bad, lo, hi), np.inf, energy)
    return float(energy.min())


@allure.feature("α-расширение")
class TestExpansionMove:

    @allure.title("Ход совпадает с лучшим ходом полного перебора")
    @allure.severity(allure.severity_level.CRITICAL)
    @pytest.mark.positive
    @pytest.mark.parametrize("seed", range(8))
    def test_move_is_optimal(self, seed):
        rng = np.random.default_rng(seed)
        terms, forests = _two_object_problem(rng)
        labels = np.full(terms.n_pixels, terms.index_of(0), dtype=np.int64)
        for step in range(5):
            alpha = int(rng.integers(terms.n_labels))
            with allure.step(f"ход {step}: метка {alpha}"):
                move = expansion_move(labels, alpha, terms, forests)
                best = _best_move(labels, alpha, terms, forests)
                assert move.energy == pytest.approx(best, abs=1e-9)
                assert star_feasible(move.labels, terms, forests)
                labels = move.labels

    @pytest.mark.positive
    def test_binary_problem_solved_exactly(self, rng):
        terms = _random_terms(rng, {0: None, 1: None})
        start = np.zeros(terms.n_pixels, dtype=np.int64)
        move = expansion_move(start, 1, terms)
        best = min(total_energy(np.array(bits, dtype=np.int64), terms)
                   for bits in itertools.product([0, 1], repeat=9))
        assert move.energy == pytest.approx(best, abs=1e-9)

    @pytest.mark.negative
    def test_no_switchable_pixels(self, rng):
        terms = _random_terms(rng, {0: None, 1: None})
        labels = np.ones(terms.n_pixels, dtype=np.int64)
        move = expansion_move(labels, 1, terms)
        assert not move.accepted
        np.testing.assert_array_equal(move.labels, labels)

    @pytest.mark.negative
    def test_disallowed_label_never_taken(self, rng):
        terms = _random_terms(rng, {0: None, 1: None})
        terms.data[:, 1] = 0.0
        terms.data[:, 0] = 50.0
        terms.allowed[:4, 1] = False
        move = expansion_move(np.zeros(9, dtype=np.int64), 1, terms)
        assert move.accepted
        assert np.all(move.labels[:4] == 0)
        assert np.all(move.labels[4:] == 1)


@allure.feature("Оптимизация")
class TestOptimize:

    @pytest.mark.positive
    def test_energy_never_increases(self, rng):
        terms, forests = _two_object_problem(rng)
        init = np.full(terms.n_pixels, terms.index_of(0), dtype=np.int64)
        result = optimize(terms, init, forests, max_sweeps=4)
        energies = [row[2] for row in result.trace]
        assert all(b <= a + 1e-12 for a, b in zip(energies, energies[1:]))
        assert result.energy <= total_energy(init, terms)
        assert result.energy == pytest.approx(result.labeling.energy())
        assert star_feasible(result.labeling.labels, terms, forests)
        assert len(result.trace) == result.sweeps * terms.n_labels
        assert result.truncations == 0

    @allure.title("Результат - локальный минимум по всем α-расширениям")
    @pytest.mark.positive
    def test_converged_labeling_is_expansion_minimum(self, rng):
        terms, forests = _two_object_problem(rng)
        init = np.full(terms.n_pixels, terms.index_of(0), dtype=np.int64)
        result = optimize(terms, init, forests, max_sweeps=20,
                          tolerance=0.0)
        labels = result.labeling.labels
        for alpha in range(terms.n_labels):
            assert _best_move(labels, alpha, terms, forests) >= \
                result.energy - 1e-9

    @allure.title("Сравнение с глобальным минимумом полного перебора")
    @allure.severity(allure.severity_level.CRITICAL)
    @pytest.mark.positive
    def test_matches_exhaustive_global_minimum(self):
        space = DepthLabelSpace(1.0, 2.0, 3)
        weights = EnergyWeights(1.0, 0.5, 0.5, 1.0)
        ratios = []
        for seed in range(50):
            rng = np.random.default_rng(100 + seed)
            terms = _random_terms(rng, {0: None, 1: space}, weights=weights)
            center = tuple(int(x) for x in rng.integers(0, 3, 2))
            forests = {1: build_forest(rng.uniform(size=(3, 3)), [center],
                                       gamma=0.7)}
            init = np.full(terms.n_pixels, terms.index_of(0), dtype=np.int64)
            result = optimize(terms, init, forests, max_sweeps=20,
                              tolerance=0.0)
            best = _global_minimum(terms, forests)
            assert star_feasible(result.labeling.labels, terms, forests)
            assert result.energy >= best - 1e-9
            ratios.append(result.energy / best)
        ratios = np.array(ratios)
        exact = int(np.sum(ratios <= 1.0 + 1e-9))
        allure.attach(f"exact {exact}/50, worst ratio {ratios.max():.4f}",
                      name="сравнение с перебором",
                      attachment_type=allure.attachment_type.TEXT)
        assert exact >= 45
        assert ratios.max() <= 1.05

    @pytest.mark.positive
    def test_infeasible_init_repaired(self, rng, caplog):
        terms, forests = _two_object_problem(rng)
        init = np.full(terms.n_pixels, terms.index_of(0), dtype=np.int64)
        # пиксель слоя 1 далеко от центра и без пути к нему
        init[8] = terms.index_of(1, 0)
        assert not star_feasible(init, terms, forests)
        with caplog.at_level(logging.WARNING, logger="scene4d"):
            result = optimize(terms, init, forests, max_sweeps=1)
        assert "star constraints" in caplog.text
        assert result.repaired > 0
        assert star_feasible(result.labeling.labels, terms, forests)

    @pytest.mark.positive
    def test_repair_grows_path_to_center(self, rng):
        terms, forests = _two_object_problem(rng)
        labels = np.full(terms.n_pixels, terms.index_of(0), dtype=np.int64)
        labels[4] = terms.index_of(1, 2)
        fixed, changed = repair_star_feasibility(labels, terms, forests)
        assert star_feasible(fixed, terms, forests)
        assert fixed[4] == terms.index_of(1, 2)
        assert fixed[0] == terms.index_of(1, 2)
        assert changed >= 1

    @pytest.mark.negative
    def test_disallowed_init_reset(self, rng, caplog):
        terms = _random_terms(rng, {0: None, 1: None})
        terms.allowed[0, 1] = False
        init = np.ones(terms.n_pixels, dtype=np.int64)
        with caplog.at_level(logging.WARNING, logger="scene4d"):
            result = optimize(terms, init)
        assert "disallowed" in caplog.text
        assert result.labeling.labels[0] == 0

    @pytest.mark.negative
    def test_init_shape(self, rng):
        terms = _random_terms(rng, {0: None, 1: None})
        with pytest.raises(ValueError, match="init must have 9 labels"):
            optimize(terms, np.zeros(4, dtype=np.int64))


@allure.feature("Разметка")
class TestLabelDepthField:

    @pytest.mark.positive
    def test_rasters(self, rng):
        space = DepthLabelSpace(1.0, 2.0, 3)
        labels_all = joint_labels({0: None, 1: space})
        terms = EnergyTerms(
            shape=(2, 3), pixels=np.array([0, 1, 4]), labels=labels_all,
            layers=(0, 1), data=np.zeros((3, 5)), color=np.zeros((3, 2)),
            edges=np.array([[0, 1]]), contrast=np.ones(1), d_max=1.0)
        field = LabelDepthField(terms, np.array([terms.index_of(0),
                                                 terms.index_of(1, 1),
                                                 terms.index_of(1, -1)]))
        np.testing.assert_array_equal(field.layer_raster(),
                                      [[0, 1, -1], [-1, 1, -1]])
        depth = field.depth_raster()
        assert depth[0, 1] == pytest.approx(1.5)
        assert np.isnan(depth[0, 0]) and np.isnan(depth[1, 1])
        assert np.isnan(depth[1, 2])

    @pytest.mark.positive
    def test_trace_csv(self, tmp_path):
        write_trace(tmp_path / "trace.csv", [(1, 0, 2.5, 1), (1, 1, 2.5, 0)])
        with (tmp_path / "trace.csv").open(encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == TRACE_HEADER
        assert rows[2] == ["1", "1", "2.5", "0"]


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
