"""Поиск динамических разреженных точек между соседними кадрами."""

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from scene4d.scene_io import CameraView, fundamental_matrix, write_csv
from scene4d.sparse_recon import (Feature, SparsePoint, epipolar_distances,
                                  match_descriptors)

logger = logging.getLogger(__name__)

MATCH_CSV_HEADER = ("view", "px", "py", "ux", "uy", "dx", "dy",
                    "residual", "pass")


@dataclass(eq=False)
class TemporalMatch:
    """
    Временное соответствие точки p вида v вместе с замыкающей петлёй
    через соседний вид.

    Args:
        view: вид v
        p: позиция в виде v на кадре t
        u_tv: сдвиг t -> t+1 в виде v
        u_tv1: сдвиг t -> t+1 в виде v+1 у точки p + d_tv
        d_tv: диспаритет v -> v+1 на кадре t
        d_t1v: диспаритет v -> v+1 на кадре t+1 у точки p + u_tv
        residual: невязка петли, пиксели
        feature_t: индекс признака в виде v на кадре t
        feature_t1: индекс признака в виде v на кадре t+1
    """

    view: int
    p: np.ndarray
    u_tv: np.ndarray
    u_tv1: np.ndarray
    d_tv: np.ndarray
    d_t1v: np.ndarray
    residual: float = 0.0
    feature_t: int = -1
    feature_t1: int = -1

    def loop_residual(self) -> float:
        return float(np.linalg.norm(
            self.d_tv + self.u_tv1 - self.u_tv - self.d_t1v))


@dataclass(frozen=True, eq=False)
class SceneFlowPoint:
    X_t: np.ndarray
    X_t1: np.ndarray
    net_motion: float
    index_t: int = -1
    index_t1: int = -1


@dataclass(frozen=True, eq=False)
class DynamicLabelSet:
    """
    Разметка static/dynamic для точек, отслеженных по времени.

    Args:
        dynamic: булев массив по точкам
        smoothed: движения после усечения и медианы
        threshold: использованный порог
        min_motion: минимальное исходное движение
        max_motion: максимальное исходное движение
    """

    dynamic: np.ndarray
    smoothed: np.ndarray
    threshold: float
    min_motion: float
    max_motion: float

    @property
    def static(self) -> np.ndarray:
        return ~self.dynamic

    def __len__(self) -> int:
        return len(self.dynamic)


def _positions(features: Sequence[Feature]) -> np.ndarray:
    return np.array([f.pos for f in features]).reshape(-1, 2)


def _descriptors(features: Sequence[Feature]) -> np.ndarray:
    if not features:
        return np.zeros((0, 0))
    return np.array([f.descriptor for f in features])


def match_view_temporal(feats_t: Sequence[Feature],
                        feats_t1: Sequence[Feature], image_diag: float,
                        search_frac: float = 0.2,
                        ratio: float = 0.8) -> dict[int, int]:
    """
    Взаимно-ближайшие дескрипторы одного вида между кадрами t и t+1
    в радиусе search_frac * диагональ изображения.

    Returns:
        индекс признака на t -> индекс на t+1
    """
    if not feats_t or not feats_t1:
        return {}
    dist = np.linalg.norm(_positions(feats_t)[:, None, :]
                          - _positions(feats_t1)[None, :, :], axis=2)
    allowed = dist <= search_frac * image_diag
    pairs = match_descriptors(_descriptors(feats_t), _descriptors(feats_t1),
                              ratio=ratio, allowed=allowed)
    return dict(pairs)


def _match_views(feats_a: Sequence[Feature], feats_b: Sequence[Feature],
                 cam_a: CameraView | None, cam_b: CameraView | None,
                 ratio: float, tol: float) -> dict[int, int]:
    if not feats_a or not feats_b:
        return {}
    allowed = None
    if cam_a is not None and cam_b is not None:
        F = fundamental_matrix(cam_a, cam_b)
        allowed = epipolar_distances(F, _positions(feats_a),
                                     _positions(feats_b)) <= tol
    return dict(match_descriptors(_descriptors(feats_a),
                                  _descriptors(feats_b), ratio=ratio,
                                  allowed=allowed))


def temporal_match(features_t: Mapping[int, Sequence[Feature]],
                   features_t1: Mapping[int, Sequence[Feature]],
                   image_size: tuple[int, int],
                   cameras: Mapping[int, CameraView] | None = None,
                   search_frac: float = 0.2, ratio: float = 0.8,
                   epipolar_tolerance: float = 2.0) -> list[TemporalMatch]:
    """
    Кандидаты временных соответствий по всем видам.

    Соседом вида v считается следующий по кругу вид. Совпадение
    выдаётся только если найдены все четыре звена петли.

    Args:
        features_t: признаки кадра t по видам
        features_t1: признаки кадра t+1 по видам
        image_size: (height, width)
        cameras: камеры для эпиполярного фильтра (необязательно)

    Returns:
        список TemporalMatch с посчитанной невязкой
    """
    views = sorted(v for v in features_t if v in features_t1)
    if len(views) < 2:
        return []
    diag = float(np.hypot(*image_size))

    def cam(v):
        return cameras[v] if cameras is not None else None

    temporal = {v: match_view_temporal(features_t[v], features_t1[v], diag,
                                       search_frac, ratio) for v in views}
    matches = []
    for n, v in enumerate(views):
        w = views[(n + 1) % len(views)]
        spatial_t = _match_views(features_t[v], features_t[w], cam(v), cam(w),
                                 ratio, epipolar_tolerance)
        spatial_t1 = _match_views(features_t1[v], features_t1[w], cam(v),
                                  cam(w), ratio, epipolar_tolerance)
        pos_tv, pos_tw = _positions(features_t[v]), _positions(features_t[w])
        pos_t1v = _positions(features_t1[v])
        pos_t1w = _positions(features_t1[w])
        for i, j in temporal[v].items():
            k = spatial_t.get(i)
            if k is None:
                continue
            l = temporal[w].get(k)
            j2 = spatial_t1.get(j)
            if l is None or j2 is None:
                continue
            p = pos_tv[i]
            m = TemporalMatch(view=v, p=p.copy(),
                              u_tv=pos_t1v[j] - p,
                              u_tv1=pos_t1w[l] - pos_tw[k],
                              d_tv=pos_tw[k] - p,
                              d_t1v=pos_t1w[j2] - pos_t1v[j],
                              feature_t=i, feature_t1=j)
            m.residual = m.loop_residual()
            matches.append(m)
    logger.debug("temporal candidates: %d over %d views", len(matches),
                 len(views))
    return matches


def consistency_check(match: TemporalMatch, epsilon: float) -> bool:
    """Пересчитывает невязку петли, сохраняет её и сравнивает с epsilon."""
    match.residual = match.loop_residual()
    return match.residual < epsilon


def match_sparse_points(points_t: Sequence[SparsePoint],
                        points_t1: Sequence[SparsePoint],
                        matches: Sequence[TemporalMatch]
                        ) -> list[tuple[int, int]]:
    """
    Переносит согласованные 2D-совпадения на 3D-точки голосованием:
    пара (i, j) получает голос, если трек точки i содержит признак
    feature_t, а трек точки j - признак feature_t1 того же вида.

    Returns:
        взаимно однозначные пары индексов (точка t, точка t+1)
    """
    owner_t = {obs: n for n, pt in enumerate(points_t) for obs in pt.track}
    owner_t1 = {obs: n for n, pt in enumerate(points_t1) for obs in pt.track}
    votes: Counter = Counter()
    for m in matches:
        i = owner_t.get((m.view, m.feature_t))
        j = owner_t1.get((m.view, m.feature_t1))
        if i is not None and j is not None:
            votes[(i, j)] += 1
    pairs, used_i, used_j = [], set(), set()
    for (i, j), _ in sorted(votes.items(), key=lambda kv: (-kv[1], kv[0])):
        if i in used_i or j in used_j:
            continue
        pairs.append((i, j))
        used_i.add(i)
        used_j.add(j)
    return sorted(pairs)


def net_motion(X_t: np.ndarray, X_t1: np.ndarray,
               correspondence: Sequence[tuple[int, int]] | None = None
               ) -> list[SceneFlowPoint]:
    """
    Чистое движение: норма Фробениуса смещения точки, понимаемого как
    градиент 1x3, то есть евклидова длина X_t1 - X_t.

    Args:
        X_t: точки кадра t (N, 3)
        X_t1: точки кадра t+1 (M, 3)
        correspondence: пары индексов; None означает поэлементное соответствие

    Returns:
        список SceneFlowPoint
    """
    X_t = np.asarray(X_t, dtype=np.float64).reshape(-1, 3)
    X_t1 = np.asarray(X_t1, dtype=np.float64).reshape(-1, 3)
    if correspondence is None:
        if len(X_t) != len(X_t1):
            raise ValueError(
                f"point counts differ: {len(X_t)} vs {len(X_t1)}")
        correspondence = [(i, i) for i in range(len(X_t))]
    out = []
    for i, j in correspondence:
        if not (0 <= i < len(X_t) and 0 <= j < len(X_t1)):
            raise ValueError(f"correspondence ({i}, {j}) out of range")
        grad = (X_t1[j] - X_t[i])[None, :]
        out.append(SceneFlowPoint(X_t=X_t[i], X_t1=X_t1[j],
                                  net_motion=float(np.linalg.norm(grad, "fro")),
                                  index_t=i, index_t1=j))
    return out


def _neighbor_median(X: np.ndarray, values: np.ndarray, k: int) -> np.ndarray:
    """
    Медиана values по k ближайшим точкам, включая саму точку. Равные
    расстояния упорядочиваются по координатам точки, затем по значению,
    так что результат не зависит от порядка входа.
    """
    n = len(X)
    rank = np.empty(n, dtype=np.int64)
    rank[np.lexsort((values, X[:, 2], X[:, 1], X[:, 0]))] = np.arange(n)
    tree = cKDTree(X)
    kth, _ = tree.query(X, k=k)
    out = np.empty(n)
    for i in range(n):
        radius = float(kth[i, -1])
        cand = np.asarray(tree.query_ball_point(
            X[i], radius + 1e-9 * max(1.0, radius)), dtype=np.int64)
        dist = np.linalg.norm(X[cand] - X[i], axis=1)
        nearest = cand[np.lexsort((rank[cand], dist))][:k]
        out[i] = np.median(values[nearest])
    return out


def classify_dynamic(flow_points: Sequence[SceneFlowPoint],
                     percentile_trim: float = 0.05, median_window: int = 5,
                     threshold: float | None = None,
                     threshold_factor: float = 0.005,
                     scene_diag: float | None = None) -> DynamicLabelSet:
    """
    Делит отслеженные точки на статические и динамические.

    Движения усекаются по квантилям [trim, 1 - trim], затем
    сглаживаются медианой по median_window ближайшим в пространстве
    точкам (включая саму точку). Без явного порога берётся
    threshold_factor * scene_diag; если диагональ сцены не задана,
    используется диагональ ограничивающего бокса отслеженных точек.
    """
    if not flow_points:
        raise ValueError("classify_dynamic needs at least one point")
    motion = np.array([fp.net_motion for fp in flow_points])
    X = np.array([fp.X_t for fp in flow_points])
    lo, hi = np.quantile(motion, [percentile_trim, 1.0 - percentile_trim])
    trimmed = np.clip(motion, lo, hi)
    k = min(median_window, len(flow_points))
    smoothed = _neighbor_median(X, trimmed, k) if k > 1 else trimmed
    if threshold is None:
        if scene_diag is None:
            scene_diag = float(np.linalg.norm(X.max(axis=0) - X.min(axis=0)))
        threshold = threshold_factor * scene_diag
    dynamic = smoothed > threshold
    logger.info("dynamic points: %d of %d (threshold %.4g, motion %.4g..%.4g)",
                int(dynamic.sum()), len(dynamic), threshold, motion.min(),
                motion.max())
    return DynamicLabelSet(dynamic=dynamic, smoothed=smoothed,
                           threshold=float(threshold),
                           min_motion=float(motion.min()),
                           max_motion=float(motion.max()))


def write_matches_csv(path: str | Path, matches: Sequence[TemporalMatch],
                      epsilon: float) -> None:
    rows = [(m.view, m.p[0], m.p[1], m.u_tv[0], m.u_tv[1], m.d_tv[0],
             m.d_tv[1], m.residual, int(m.residual < epsilon))
            for m in matches]
    write_csv(path, MATCH_CSV_HEADER, rows)
