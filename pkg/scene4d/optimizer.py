"""α-расширение по совместным меткам слой x глубина со звёздными ограничениями."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from scene4d.energy import EnergyTerms, JointLabel, total_energy
from scene4d.geodesic import NO_PARENT, GeodesicForest, star_energy
from scene4d.maxflow import GraphCut
from scene4d.scene_io import write_csv

__all__ = ["JointLabel", "LabelDepthField", "OptimizeResult", "MoveResult",
           "expansion_move", "optimize", "repair_star_feasibility",
           "star_feasible", "write_trace"]

logger = logging.getLogger(__name__)

TRACE_HEADER = ("sweep", "move_label", "energy", "accepted")


@dataclass(eq=False)
class LabelDepthField:
    """
    Совместная разметка области: индекс метки terms.labels на пиксель.
    """

    terms: EnergyTerms
    labels: np.ndarray

    def layer_raster(self, fill: int = -1) -> np.ndarray:
        out = np.full(self.terms.shape, fill, dtype=np.int64)
        out.flat[self.terms.pixels] = self.terms.label_layer[self.labels]
        return out

    def depth_raster(self) -> np.ndarray:
        """z-глубины; U и пиксели вне области - NaN."""
        out = np.full(self.terms.shape, np.nan)
        out.flat[self.terms.pixels] = self.terms.label_depth[self.labels]
        return out

    def energy(self) -> float:
        return total_energy(self.labels, self.terms)


@dataclass
class MoveResult:
    labels: np.ndarray
    energy: float
    accepted: bool
    truncations: int = 0


@dataclass
class OptimizeResult:
    """
    Args:
        labeling: итоговая разметка
        energy: итоговая энергия
        trace: строки (sweep, move_label, energy, accepted)
        sweeps: число выполненных проходов
        truncations: сколько парных членов пришлось поднять до субмодулярности
        repaired: сколько пикселей изменила починка звёздной допустимости
    """

    labeling: LabelDepthField
    energy: float
    trace: list[tuple[int, int, float, int]] = field(default_factory=list)
    sweeps: int = 0
    truncations: int = 0
    repaired: int = 0


def _local_index(terms: EnergyTerms) -> np.ndarray:
    local = np.full(int(np.prod(terms.shape)), -1, dtype=np.int64)
    local[terms.pixels] = np.arange(terms.n_pixels)
    return local


def _forest_edges(terms: EnergyTerms, forest: GeodesicForest,
                  local: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Рёбра (child, parent) леса в индексах области; -1 у родителя вне её."""
    parent = forest.parent.ravel()[terms.pixels]
    has = parent != NO_PARENT
    child = np.flatnonzero(has)
    return child, local[parent[has]]


def _reachable(terms: EnergyTerms, forest: GeodesicForest) -> np.ndarray:
    return np.isfinite(forest.dist.ravel()[terms.pixels])


def star_feasible(labels: np.ndarray, terms: EnergyTerms,
                  forests: Mapping[int, GeodesicForest]) -> bool:
    """star_energy = 0 для леса каждого объектного слоя."""
    layers = terms.label_layer[labels]
    for layer, forest in forests.items():
        fg = np.zeros(terms.shape, dtype=bool)
        fg.flat[terms.pixels] = layers == layer
        if star_energy(fg, forest) != 0.0:
            return False
    return True


def expansion_move(labels: np.ndarray, alpha: int, terms: EnergyTerms,
                   forests: Mapping[int, GeodesicForest] | None = None,
                   current_energy: float | None = None,
                   hard: float | None = None) -> MoveResult:
    """
    Одно α-расширение: каждый пиксель сохраняет метку или берёт α.

    Сторона истока - сохранить метку, сторона стока - α. Звёздные
    ограничения слоя входят бесконечными (hard) рёбрами вдоль леса.
    Результат принимается только при строгом уменьшении энергии.

    Args:
        labels: текущая допустимая разметка (N,)
        alpha: индекс метки в terms.labels
        terms: EnergyTerms
        forests: слой -> геодезический лес
        current_energy: энергия labels, если уже известна

    Returns:
        MoveResult
    """
    forests = forests or {}
    labels = np.asarray(labels, dtype=np.int64)
    if current_energy is None:
        current_energy = total_energy(labels, terms)
    alpha_layer = int(terms.label_layer[alpha])
    cur_layer = terms.label_layer[labels]

    can_switch = terms.allowed[:, alpha] & (labels != alpha)
    if alpha_layer in forests:
        can_switch &= _reachable(terms, forests[alpha_layer])
    if not np.any(can_switch):
        return MoveResult(labels, current_energy, False)

    free = np.flatnonzero(can_switch)
    node = np.full(terms.n_pixels, -1, dtype=np.int64)
    node[free] = np.arange(len(free))

    unary_alpha = terms.unary(alpha)
    unary_cur = terms.unary_of(labels)
    lin = unary_alpha[free] - unary_cur[free]

    edges = terms.edges
    la, lb = labels[edges[:, 0]], labels[edges[:, 1]]
    alpha_vec = np.full(len(edges), alpha)
    A = terms.pairwise(la, lb)
    B = terms.pairwise(la, alpha_vec)
    C = terms.pairwise(alpha_vec, lb)
    D = terms.pairwise(alpha_vec, alpha_vec)
    na, nb = node[edges[:, 0]], node[edges[:, 1]]

    both = (na >= 0) & (nb >= 0)
    only_b = (na < 0) & (nb >= 0)
    only_a = (na >= 0) & (nb < 0)
    np.add.at(lin, nb[only_b], B[only_b] - A[only_b])
    np.add.at(lin, na[only_a], C[only_a] - A[only_a])

    ea, eb = na[both], nb[both]
    Ab, Bb, Cb, Db = A[both], B[both], C[both], D[both]
    cap = Bb + Cb - Ab - Db
    bad = cap < 0
    truncations = int(bad.sum())
    if truncations:
        cap = np.where(bad, 0.0, cap)
        logger.debug("label %d: %d non-submodular pairs truncated", alpha,
                     truncations)
    np.add.at(lin, ea, Cb - Ab)
    np.add.at(lin, eb, Db - Cb)

    if hard is None:
        finite = np.abs(lin[np.isfinite(lin)]).sum() + np.abs(cap).sum()
        hard = 1e3 * (finite + 1.0)

    graph = GraphCut(len(free))
    hard_edges_i, hard_edges_j = [], []
    for layer, forest in forests.items():
        child, par = _forest_edges(terms, forest, _local_index(terms))
        inside = par >= 0
        cur_child = cur_layer[child]
        cur_par = np.where(inside, cur_layer[np.maximum(par, 0)], -1)
        node_par = np.where(inside, node[np.maximum(par, 0)], -1)
        if alpha_layer == layer:
            sel = cur_par != layer
            # child не может стать слоем, пока родитель его не имеет
            nc, npar = node[child[sel]], node_par[sel]
            lock = (nc >= 0) & (npar < 0)
            lin[nc[lock]] = np.inf
            pair = (nc >= 0) & (npar >= 0)
            hard_edges_i.append(npar[pair])
            hard_edges_j.append(nc[pair])
        else:
            sel = (cur_child == layer) & inside
            nc, npar = node[child[sel]], node_par[sel]
            lock = (nc < 0) & (npar >= 0)
            lin[npar[lock]] = np.inf
            pair = (nc >= 0) & (npar >= 0)
            hard_edges_i.append(nc[pair])
            hard_edges_j.append(npar[pair])

    lin = np.where(np.isinf(lin) & (lin > 0), hard, lin)
    graph.add_tedges(np.arange(len(free)), np.maximum(lin, 0.0),
                     np.maximum(-lin, 0.0))
    graph.add_edges(ea, eb, cap, 0.0)
    if hard_edges_i:
        hi = np.concatenate(hard_edges_i)
        hj = np.concatenate(hard_edges_j)
        if len(hi):
            graph.add_edges(hi, hj, hard, 0.0)
    graph.maxflow()
    switch = graph.segments()

    proposal = labels.copy()
    proposal[free[switch]] = alpha
    energy = total_energy(proposal, terms)
    if energy < current_energy:
        return MoveResult(proposal, energy, True, truncations)
    return MoveResult(labels, current_energy, False, truncations)


def _fallback_label(terms: EnergyTerms, object_layers: set[int]) -> int:
    for a, lab in enumerate(terms.labels):
        if lab.layer not in object_layers and lab.is_unknown:
            return a
    for a, lab in enumerate(terms.labels):
        if lab.layer not in object_layers:
            return a
    raise ValueError("label set has no background label")


def repair_star_feasibility(labels: np.ndarray, terms: EnergyTerms,
                            forests: Mapping[int, GeodesicForest]
                            ) -> tuple[np.ndarray, int]:
    """
    Делает разметку звёздно-допустимой: передний план растёт вдоль
    леса к центрам, затем нарушители, которых не вырастить,
    сбрасываются в фон до неподвижной точки.

    Returns:
        исправленная разметка и число изменённых пикселей
    """
    labels = np.asarray(labels, dtype=np.int64).copy()
    original = labels.copy()
    local = _local_index(terms)
    fallback = _fallback_label(terms, set(forests))
    for layer, forest in forests.items():
        parent = forest.parent.ravel()
        reachable = _reachable(terms, forest)
        for i in np.flatnonzero(terms.label_layer[labels] == layer):
            if not reachable[i]:
                continue
            chain, j = [], i
            while True:
                p = parent[terms.pixels[j]]
                if p == NO_PARENT:
                    break
                j = local[p]
                if j < 0 or terms.label_layer[labels[j]] == layer:
                    break
                chain.append(j)
            target = labels[i]
            if all(terms.allowed[k, target] for k in chain):
                labels[chain] = target
    changed = True
    while changed:
        changed = False
        layers = terms.label_layer[labels]
        for layer, forest in forests.items():
            parent = forest.parent.ravel()[terms.pixels]
            is_center = forest.center_mask().ravel()[terms.pixels]
            fg = layers == layer
            par_local = np.where(parent != NO_PARENT,
                                 local[np.maximum(parent, 0)], -1)
            ok_parent = np.zeros(terms.n_pixels, dtype=bool)
            has = par_local >= 0
            ok_parent[has] = layers[par_local[has]] == layer
            bad = fg & ~is_center & ~ok_parent
            if np.any(bad):
                labels[bad] = fallback
                layers = terms.label_layer[labels]
                changed = True
    repaired = int(np.sum(labels != original))
    return labels, repaired


def optimize(terms: EnergyTerms, init: np.ndarray,
             forests: Mapping[int, GeodesicForest] | None = None,
             max_sweeps: int = 5, tolerance: float = 1e-6,
             order: list[int] | None = None) -> OptimizeResult:
    """
    Проходы α-расширения по всем совместным меткам до сходимости.

    Порядок: слои снаружи, глубины внутри (порядок terms.labels).
    Проход останавливает цикл, если относительное падение энергии
    меньше tolerance.

    Args:
        terms: EnergyTerms области
        init: начальная разметка (N,)
        forests: слой -> лес звёздных центров
        max_sweeps: предел проходов
        tolerance: порог относительного уменьшения

    Returns:
        OptimizeResult
    """
    forests = forests or {}
    labels = np.asarray(init, dtype=np.int64).copy()
    if labels.shape != (terms.n_pixels,):
        raise ValueError(f"init must have {terms.n_pixels} labels")
    rows = np.arange(terms.n_pixels)
    bad_init = ~terms.allowed[rows, labels]
    if np.any(bad_init):
        logger.warning("init uses %d disallowed labels, reset to background",
                       int(bad_init.sum()))
        labels[bad_init] = _fallback_label(terms, set(forests))
    repaired = 0
    if not star_feasible(labels, terms, forests):
        labels, repaired = repair_star_feasibility(labels, terms, forests)
        logger.warning("init violates star constraints, %d pixels repaired",
                       repaired)

    energy = total_energy(labels, terms)
    trace: list[tuple[int, int, float, int]] = []
    truncations = 0
    sweeps = 0
    order = list(range(terms.n_labels)) if order is None else order
    for sweep in range(1, max_sweeps + 1):
        sweeps = sweep
        start = energy
        for alpha in order:
            move = expansion_move(labels, alpha, terms, forests, energy)
            truncations += move.truncations
            if move.accepted:
                if move.energy > energy:
                    raise AssertionError("accepted move increased energy")
                labels, energy = move.labels, move.energy
            trace.append((sweep, alpha, energy, int(move.accepted)))
        decrease = start - energy
        if decrease <= tolerance * max(abs(start), 1e-12):
            break
    if not star_feasible(labels, terms, forests):
        raise AssertionError("optimizer produced a star-infeasible labeling")
    logger.info("optimize: %d pixels, %d labels, %d sweeps, energy %.6g",
                terms.n_pixels, terms.n_labels, sweeps, energy)
    return OptimizeResult(labeling=LabelDepthField(terms, labels), energy=energy,
                          trace=trace, sweeps=sweeps,
                          truncations=truncations, repaired=repaired)


def write_trace(path: str | Path, trace) -> None:
    write_csv(path, TRACE_HEADER, trace)
