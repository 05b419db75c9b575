"""Геодезический лес от звёздных центров и ограничение звёздной выпуклости."""

import heapq
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from scene4d.scene_io import to_gray, write_raster

logger = logging.getLogger(__name__)

NO_PARENT = -1
_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0),
            (1, 1))


@dataclass(frozen=True, eq=False)
class GeodesicForest:
    """
    Лес кратчайших путей на 8-связной сетке.

    Args:
        centers: звёздные центры (n, 2) в порядке (row, col)
        dist: геодезическое расстояние (H, W), inf вне досягаемости
        parent: плоский индекс предка (H, W); NO_PARENT у центров и
            недостижимых пикселей
        gamma: вес градиентного члена
        mask: область построения (H, W)
    """

    centers: np.ndarray
    dist: np.ndarray
    parent: np.ndarray
    gamma: float
    mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.dist.shape

    @property
    def reachable(self) -> np.ndarray:
        return np.isfinite(self.dist)

    def center_mask(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        out[self.centers[:, 0], self.centers[:, 1]] = True
        return out


def edge_weight(dp2: float, dI: float, gamma: float) -> float:
    return float(np.sqrt((1.0 - gamma) * dp2 + gamma * dI * dI))


def build_forest(image: np.ndarray, centers, gamma: float = 0.7,
                 mask: np.ndarray | None = None) -> GeodesicForest:
    """
    Многоисточниковый Дейкстра с весом ребра
    sqrt((1 - gamma) * |p - q|^2 + gamma * (I(p) - I(q))^2).

    Args:
        image: изображение; яркость приводится к [0, 1]
        centers: пиксели центров (row, col)
        gamma: вес градиентного члена в [0, 1]
        mask: пиксели, через которые можно строить пути

    Returns:
        GeodesicForest
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    gray = to_gray(image)
    h, w = gray.shape
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (h, w):
        raise ValueError("mask shape differs from image shape")
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    if len(centers) == 0:
        raise ValueError("geodesic forest needs at least one center")
    for r, c in centers:
        if not (0 <= r < h and 0 <= c < w) or not mask[r, c]:
            raise ValueError(f"center ({r}, {c}) outside mask")

    dist = np.full(h * w, np.inf)
    parent = np.full(h * w, NO_PARENT, dtype=np.int64)
    done = np.zeros(h * w, dtype=bool)
    flat_mask = mask.ravel()
    flat_gray = gray.ravel()
    heap = []
    for r, c in centers:
        idx = int(r * w + c)
        if dist[idx] != 0.0:
            dist[idx] = 0.0
            heap.append((0.0, idx))
    heapq.heapify(heap)

    while heap:
        d, idx = heapq.heappop(heap)
        if done[idx]:
            continue
        done[idx] = True
        r, c = divmod(idx, w)
        for dr, dc in _OFFSETS:
            rr, cc = r + dr, c + dc
            if not (0 <= rr < h and 0 <= cc < w):
                continue
            nidx = rr * w + cc
            if done[nidx] or not flat_mask[nidx]:
                continue
            nd = d + edge_weight(dr * dr + dc * dc,
                                 flat_gray[nidx] - flat_gray[idx], gamma)
            if nd < dist[nidx]:
                dist[nidx] = nd
                parent[nidx] = idx
                heapq.heappush(heap, (nd, nidx))

    unreachable = int(np.sum(flat_mask & ~done))
    if unreachable:
        logger.debug("geodesic forest: %d mask pixels unreachable",
                     unreachable)
    return GeodesicForest(centers=centers, dist=dist.reshape(h, w),
                          parent=parent.reshape(h, w), gamma=gamma, mask=mask)


def star_energy(labeling: np.ndarray, forest: GeodesicForest) -> float:
    """
    0, если у каждого пикселя переднего плана предок в лесу тоже
    передний план (а значит, и весь путь до центра); иначе inf.
    """
    fg = np.asarray(labeling, dtype=bool).ravel()
    parent = forest.parent.ravel()
    is_center = forest.center_mask().ravel()
    orphan = fg & (parent == NO_PARENT) & ~is_center
    if np.any(orphan):
        return np.inf
    child = fg & (parent != NO_PARENT)
    if np.any(~fg[parent[child]]):
        return np.inf
    return 0.0


def star_constraint_edges(forest: GeodesicForest) -> np.ndarray:
    """
    Рёбра (p, parent(p)) по плоским индексам; (E, 2).

    Оптимизатор запрещает сочетание fg в p и bg в parent(p).
    """
    parent = forest.parent.ravel()
    child = np.flatnonzero(parent != NO_PARENT)
    return np.column_stack([child, parent[child]])


def path_to_center(forest: GeodesicForest, pixel: tuple[int, int]
                   ) -> list[tuple[int, int]]:
    """Путь от пикселя до его центра по предкам; пустой, если недостижим."""
    h, w = forest.shape
    idx = pixel[0] * w + pixel[1]
    if not np.isfinite(forest.dist.ravel()[idx]):
        return []
    path = []
    parent = forest.parent.ravel()
    while idx != NO_PARENT:
        path.append(divmod(int(idx), w))
        idx = parent[idx]
    return path


def write_forest(path: str | Path, forest: GeodesicForest) -> None:
    """Дамп двухканального растра: расстояние (-1 вне леса) и предок."""
    dist = np.where(np.isfinite(forest.dist), forest.dist, -1.0)
    write_raster(path, np.stack([dist, forest.parent.astype(np.float64)],
                                axis=-1))
