import itertools

import allure
import numpy as np
import pytest

from scene4d.maxflow import SINK, SOURCE, GraphCut, min_cut


def _random_graph(rng):
    n = int(rng.integers(1, 9))
    cs = rng.integers(0, 10, n) * (rng.random(n) < 0.6)
    ct = rng.integers(0, 10, n) * (rng.random(n) < 0.6)
    edges = []
    for i, j in itertools.combinations(range(n), 2):
        if rng.random() < 0.5:
            edges.append((i, j, int(rng.integers(0, 10)),
                          int(rng.integers(0, 10))))
    return n, cs.astype(float), ct.astype(float), edges


def _cut_cost(source_side, cs, ct, edges):
    cost = float(np.sum(cs[~source_side]) + np.sum(ct[source_side]))
    for i, j, cap, rev in edges:
        if source_side[i] and not source_side[j]:
            cost += cap
        if source_side[j] and not source_side[i]:
            cost += rev
    return cost


def _exhaustive(n, cs, ct, edges):
    return min(_cut_cost(np.array(bits, dtype=bool), cs, ct, edges)
               for bits in itertools.product([False, True], repeat=n))


def _build(n, cs, ct, edges):
    graph = GraphCut(n)
    for i in range(n):
        graph.add_tedge(i, cs[i], ct[i])
    for i, j, cap, rev in edges:
        graph.add_edge(i, j, cap, rev)
    return graph


@allure.feature("Минимальный разрез")
class TestGraphCut:

    @allure.title("Совпадение с перебором на 200 случайных графах")
    @allure.severity(allure.severity_level.CRITICAL)
    @pytest.mark.positive
    def test_random_graphs_against_exhaustive_search(self):
        rng = np.random.default_rng(2024)
        sizes = []
        for case in range(200):
            n, cs, ct, edges = _random_graph(rng)
            with allure.step(f"граф {case}: {n} вершин, {len(edges)} рёбер"):
                graph = _build(n, cs, ct, edges)
                value, source_side = min_cut(graph)
                best = _exhaustive(n, cs, ct, edges)
                assert value == pytest.approx(best, abs=1e-9)
                assert _cut_cost(source_side, cs, ct, edges) == \
                    pytest.approx(best, abs=1e-9)
                sizes.append(n)
        allure.attach(f"graphs: {len(sizes)}, max nodes: {max(sizes)}",
                      name="coverage",
                      attachment_type=allure.attachment_type.TEXT)

    @pytest.mark.positive
    def test_chain(self):
        graph = GraphCut(3)
        graph.add_tedge(0, 5.0, 0.0)
        graph.add_tedge(2, 0.0, 4.0)
        graph.add_edge(0, 1, 3.0, 0.0)
        graph.add_edge(1, 2, 2.5, 0.0)
        assert graph.maxflow() == pytest.approx(2.5)
        assert graph.segment(0) == SOURCE
        assert graph.segment(1) == SOURCE
        assert graph.segment(2) == SINK

    @pytest.mark.positive
    def test_vectorised_matches_scalar(self, rng):
        n, cs, ct, edges = _random_graph(rng)
        while not edges:
            n, cs, ct, edges = _random_graph(rng)
        scalar = _build(n, cs, ct, edges)
        batch = GraphCut(n)
        batch.add_tedges(np.arange(n), cs, ct)
        i, j, cap, rev = (np.array(col) for col in zip(*edges))
        batch.add_edges(i, j, cap, rev)
        assert batch.maxflow() == pytest.approx(scalar.maxflow())
        np.testing.assert_array_equal(batch.segments(), scalar.segments())

    @pytest.mark.positive
    def test_flow_recomputed_after_change(self):
        graph = GraphCut(1)
        graph.add_tedge(0, 2.0, 3.0)
        assert graph.maxflow() == 2.0
        graph.add_tedge(0, 5.0, 0.0)
        assert graph.maxflow() == 3.0

    @pytest.mark.positive
    def test_empty_graph_and_self_loop(self):
        assert GraphCut(0).maxflow() == 0.0
        graph = GraphCut(2)
        graph.add_edge(1, 1, 10.0, 10.0)
        assert graph.maxflow() == 0.0

    @pytest.mark.negative
    @pytest.mark.parametrize("action, error", [
        (lambda g: g.add_tedge(0, -1.0, 0.0), ValueError),
        (lambda g: g.add_edge(0, 1, 1.0, -0.5), ValueError),
        (lambda g: g.add_edge(0, 2, 1.0, 1.0), IndexError),
        (lambda g: g.add_tedges([0, 5], 1.0, 1.0), IndexError),
        (lambda g: g.add_edges([0], [1], [-1.0], [0.0]), ValueError),
        (lambda g: g.segment(3), IndexError),
    ])
    def test_invalid_input(self, action, error):
        with pytest.raises(error):
            action(GraphCut(2))

    @pytest.mark.negative
    def test_negative_size(self):
        with pytest.raises(ValueError):
            GraphCut(-1)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
