"""Разреженная реконструкция: признаки, сопоставление, триангуляция, кластеры."""

import logging
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from scene4d.errors import DegenerateInputError
from scene4d.scene_io import CameraView, fundamental_matrix, to_gray

logger = logging.getLogger(__name__)

PATCH = 16
GRID = 8
BINS = 4


@dataclass(frozen=True, eq=False)
class Feature:
    """
    Признак изображения.

    Args:
        view: id камеры
        pos: субпиксельная позиция (x, y)
        descriptor: вектор единичной нормы
        scale: масштаб интегрирования, пиксели
        response: отклик детектора
    """

    view: int
    pos: np.ndarray
    descriptor: np.ndarray
    scale: float
    response: float = 0.0


@dataclass(eq=False)
class SparsePoint:
    """Триангулированная 3D-точка и её наблюдения (view, пиксель)."""

    X: np.ndarray
    obs: list[tuple[int, np.ndarray]]
    reproj_error: float
    descriptor: np.ndarray | None = None
    track: tuple[tuple[int, int], ...] = ()

    def views(self) -> set[int]:
        return {v for v, _ in self.obs}

    def observation(self, view: int) -> np.ndarray | None:
        for v, pix in self.obs:
            if v == view:
                return pix
        return None


@dataclass(frozen=True, eq=False)
class ObjectCluster:
    label: int
    members: np.ndarray
    centroid: np.ndarray


@dataclass(frozen=True)
class ClusterResult:
    clusters: list[ObjectCluster]
    unclustered: np.ndarray


@dataclass(frozen=True, eq=False)
class OrientedBox:
    """
    Ориентированный параллелепипед: центр, оси (строки), полуразмеры.
    """

    center: np.ndarray
    axes: np.ndarray
    half_extents: np.ndarray

    def local(self, points: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(points) - self.center) @ self.axes.T

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        scale = max(1.0, float(np.max(np.abs(self.center))),
                    float(np.max(self.half_extents)))
        return np.all(np.abs(self.local(points))
                      <= self.half_extents + tol * scale, axis=1)

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1)
                          for sz in (-1, 1)], dtype=np.float64)
        return self.center + (signs * self.half_extents) @ self.axes

    @property
    def volume(self) -> float:
        return float(np.prod(2.0 * self.half_extents))


# --- детектор и дескриптор --------------------------------------------------

class Detector(Protocol):
    def detect(self, image: np.ndarray, view: int = 0) -> list[Feature]:
        ...


class Describer(Protocol):
    def describe(self, gray: np.ndarray,
                 positions: np.ndarray) -> np.ndarray:
        ...


class GridOrientationDescriber:
    """
    Дескриптор: сетка 8x8 ячеек гистограмм ориентаций градиента (4 корзины)
    в окне 16x16, нормированная к единичной длине.
    """

    def describe(self, gray: np.ndarray, positions: np.ndarray) -> np.ndarray:
        gx = ndimage.sobel(gray, axis=1, mode="nearest")
        gy = ndimage.sobel(gray, axis=0, mode="nearest")
        mag = np.hypot(gx, gy)
        angle = np.mod(np.arctan2(gy, gx), 2 * np.pi)
        bins = np.minimum((angle / (2 * np.pi / BINS)).astype(np.int64),
                          BINS - 1)
        half = PATCH // 2
        mag = np.pad(mag, half, mode="constant")
        bins = np.pad(bins, half, mode="constant")
        cell = PATCH // GRID
        out = np.zeros((len(positions), GRID * GRID * BINS))
        for n, (x, y) in enumerate(np.round(positions).astype(np.int64)):
            m = mag[y:y + PATCH, x:x + PATCH]
            b = bins[y:y + PATCH, x:x + PATCH]
            cy, cx = np.mgrid[0:PATCH, 0:PATCH] // cell
            idx = ((cy * GRID + cx) * BINS + b).ravel()
            hist = np.bincount(idx, weights=m.ravel(),
                               minlength=GRID * GRID * BINS)
            norm = np.linalg.norm(hist)
            if norm < 1e-12:
                hist = np.ones_like(hist)
                norm = np.linalg.norm(hist)
            out[n] = hist / norm
        return out


class HarrisDetector:
    """
    Углы Харриса с субпиксельным уточнением параболой.

    Args:
        k: коэффициент Харриса
        sigma: масштаб окна структурного тензора
        threshold: порог относительно максимального отклика
        nms_radius: радиус подавления немаксимумов
        max_features: максимум признаков на изображение
        describer: вычислитель дескрипторов
    """

    def __init__(self, k: float = 0.04, sigma: float = 1.0,
                 threshold: float = 0.01, nms_radius: int = 3,
                 max_features: int = 2000, border: int = 2,
                 describer: Describer | None = None) -> None:
        self.k = k
        self.sigma = sigma
        self.threshold = threshold
        self.nms_radius = nms_radius
        self.max_features = max_features
        self.border = border
        self.describer = describer or GridOrientationDescriber()

    def response(self, gray: np.ndarray) -> np.ndarray:
        ix = ndimage.sobel(gray, axis=1, mode="nearest")
        iy = ndimage.sobel(gray, axis=0, mode="nearest")
        sxx = ndimage.gaussian_filter(ix * ix, self.sigma)
        syy = ndimage.gaussian_filter(iy * iy, self.sigma)
        sxy = ndimage.gaussian_filter(ix * iy, self.sigma)
        return sxx * syy - sxy * sxy - self.k * (sxx + syy) ** 2

    def _peaks(self, resp: np.ndarray) -> list[tuple[int, int]]:
        peak = resp.max()
        if peak <= 1e-12:
            return []
        size = 2 * self.nms_radius + 1
        local_max = resp == ndimage.maximum_filter(resp, size=size,
                                                   mode="nearest")
        keep = local_max & (resp > self.threshold * peak)
        b = self.border
        if b > 0:
            keep[:b, :] = keep[-b:, :] = False
            keep[:, :b] = keep[:, -b:] = False
        ys, xs = np.nonzero(keep)
        order = np.lexsort((xs, ys, -resp[ys, xs]))
        taken = np.zeros(resp.shape, dtype=bool)
        r = self.nms_radius
        peaks = []
        for idx in order:
            y, x = int(ys[idx]), int(xs[idx])
            if taken[y, x]:
                continue
            peaks.append((y, x))
            taken[max(0, y - r):y + r + 1, max(0, x - r):x + r + 1] = True
            if len(peaks) >= self.max_features:
                break
        return peaks

    @staticmethod
    def _refine(resp: np.ndarray, y: int, x: int) -> tuple[float, float]:
        def offset(lo: float, mid: float, hi: float) -> float:
            denom = lo - 2.0 * mid + hi
            if denom >= 0:
                return 0.0
            return float(np.clip(0.5 * (lo - hi) / denom, -0.5, 0.5))

        h, w = resp.shape
        dx = dy = 0.0
        if 0 < x < w - 1:
            dx = offset(resp[y, x - 1], resp[y, x], resp[y, x + 1])
        if 0 < y < h - 1:
            dy = offset(resp[y - 1, x], resp[y, x], resp[y + 1, x])
        return x + dx, y + dy

    def detect(self, image: np.ndarray, view: int = 0) -> list[Feature]:
        gray = to_gray(image)
        if gray.size == 0:
            raise ValueError("empty image")
        resp = self.response(gray)
        peaks = self._peaks(resp)
        if not peaks:
            return []
        positions = np.array([self._refine(resp, y, x) for y, x in peaks])
        descriptors = self.describer.describe(gray, positions)
        return [Feature(view=view, pos=positions[i], descriptor=descriptors[i],
                        scale=self.sigma, response=float(resp[y, x]))
                for i, (y, x) in enumerate(peaks)]


def detect_features(image: np.ndarray, view: int = 0,
                    detector: Detector | None = None) -> list[Feature]:
    """Признаки, отсортированные по отклику; детерминированы."""
    return (detector or HarrisDetector()).detect(image, view=view)


# --- сопоставление ----------------------------------------------------------

def epipolar_distances(F: np.ndarray, pts_a: np.ndarray,
                       pts_b: np.ndarray) -> np.ndarray:
    """Матрица расстояний точка-эпиполярная линия в виде b."""
    ha = np.column_stack([pts_a, np.ones(len(pts_a))])
    hb = np.column_stack([pts_b, np.ones(len(pts_b))])
    lines = ha @ F.T
    norms = np.hypot(lines[:, 0], lines[:, 1])[:, None]
    norms[norms == 0] = np.inf
    return np.abs(lines @ hb.T) / norms


def match_descriptors(desc_a: np.ndarray, desc_b: np.ndarray,
                      ratio: float = 0.8,
                      allowed: np.ndarray | None = None
                      ) -> list[tuple[int, int]]:
    """
    Взаимно-ближайшие пары с тестом отношения.

    Args:
        desc_a: (n, D)
        desc_b: (m, D)
        ratio: порог теста отношения (строгое d1 < ratio * d2)
        allowed: (n, m) маска допустимых пар

    Returns:
        список пар индексов (i, j), взаимно однозначный
    """
    if len(desc_a) == 0 or len(desc_b) == 0:
        return []
    if desc_a.shape[1] != desc_b.shape[1]:
        raise ValueError("descriptor lengths differ")
    dist = cdist(desc_a, desc_b)
    if allowed is not None:
        dist = np.where(allowed, dist, np.inf)
    best_b = np.argmin(dist, axis=1)
    best_a = np.argmin(dist, axis=0)
    pairs = []
    for i in range(len(desc_a)):
        j = int(best_b[i])
        d1 = dist[i, j]
        if not np.isfinite(d1) or best_a[j] != i:
            continue
        if dist.shape[1] > 1:
            d2 = np.partition(dist[i], 1)[1]
        else:
            d2 = np.inf
        if np.isfinite(d2) and not d1 < ratio * d2:
            continue
        pairs.append((i, j))
    return pairs


def match_features(feats_a: Sequence[Feature], feats_b: Sequence[Feature],
                   ratio: float = 0.8, cam_a: CameraView | None = None,
                   cam_b: CameraView | None = None,
                   epipolar_tolerance: float = 2.0) -> list[tuple[int, int]]:
    """
    Сопоставление двух видов: эпиполярный фильтр (если даны камеры),
    затем тест отношения и взаимная ближайшесть.
    """
    if not feats_a or not feats_b:
        return []
    desc_a = np.array([f.descriptor for f in feats_a])
    desc_b = np.array([f.descriptor for f in feats_b])
    allowed = None
    if cam_a is not None and cam_b is not None:
        F = fundamental_matrix(cam_a, cam_b)
        pa = np.array([f.pos for f in feats_a])
        pb = np.array([f.pos for f in feats_b])
        allowed = epipolar_distances(F, pa, pb) <= epipolar_tolerance
    return match_descriptors(desc_a, desc_b, ratio=ratio, allowed=allowed)


def build_tracks(features: Mapping[int, Sequence[Feature]],
                 cameras: Mapping[int, CameraView], ratio: float = 0.8,
                 epipolar_tolerance: float = 2.0
                 ) -> list[tuple[tuple[int, int], ...]]:
    """
    Объединяет попарные совпадения всех пар видов в многовидовые треки.

    Треки с двумя признаками одного вида отбрасываются.

    Returns:
        треки - кортежи (view, индекс признака), отсортированные
    """
    views = sorted(features)
    offsets, total = {}, 0
    for v in views:
        offsets[v] = total
        total += len(features[v])
    rows, cols = [], []
    for ia, va in enumerate(views):
        for vb in views[ia + 1:]:
            for i, j in match_features(features[va], features[vb], ratio,
                                       cameras[va], cameras[vb],
                                       epipolar_tolerance):
                rows.append(offsets[va] + i)
                cols.append(offsets[vb] + j)
    if total == 0 or not rows:
        return []
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)),
                       shape=(total, total))
    _, labels = connected_components(graph, directed=False)
    node_view = np.concatenate([np.full(len(features[v]), v) for v in views])
    node_idx = np.concatenate([np.arange(len(features[v])) for v in views])
    groups: dict[int, list[int]] = {}
    for node in np.unique(np.array(rows + cols)):
        groups.setdefault(int(labels[node]), []).append(int(node))
    tracks = []
    conflicts = 0
    for nodes in groups.values():
        vs = node_view[nodes]
        if len(set(vs.tolist())) != len(nodes):
            conflicts += 1
            continue
        tracks.append(tuple(sorted((int(node_view[n]), int(node_idx[n]))
                                   for n in nodes)))
    if conflicts:
        logger.debug("dropped %d conflicting tracks", conflicts)
    return sorted(tracks)


# --- триангуляция -----------------------------------------------------------

def _dlt(projections: list[np.ndarray],
         pixels: list[np.ndarray]) -> np.ndarray | None:
    rows = []
    for P, (x, y) in zip(projections, pixels):
        for row in (x * P[2] - P[0], y * P[2] - P[1]):
            rows.append(row / max(np.linalg.norm(row), 1e-300))
    _, _, vt = np.linalg.svd(np.array(rows))
    Xh = vt[-1]
    if abs(Xh[3]) < 1e-12 * np.linalg.norm(Xh):
        return None
    return Xh[:3] / Xh[3]


def _reprojection(cams: list[CameraView], pixels: list[np.ndarray],
                  X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    residuals, depths = [], []
    for cam, pix in zip(cams, pixels):
        p, z = cam.project(X)
        residuals.append(p[0] - pix)
        depths.append(z[0])
    return np.array(residuals), np.array(depths)


def _gauss_newton_step(cams: list[CameraView], pixels: list[np.ndarray],
                       X: np.ndarray) -> np.ndarray:
    J, r = [], []
    for cam, pix in zip(cams, pixels):
        u = cam.K @ (cam.R @ X + cam.t)
        dpix_du = np.array([[1.0 / u[2], 0.0, -u[0] / u[2] ** 2],
                            [0.0, 1.0 / u[2], -u[1] / u[2] ** 2]])
        J.append(dpix_du @ cam.K @ cam.R)
        r.append(u[:2] / u[2] - pix)
    dX, *_ = np.linalg.lstsq(np.vstack(J), -np.concatenate(r), rcond=None)
    return X + dX


def _ray_angle(cams: list[CameraView], X: np.ndarray) -> float:
    dirs = [X - cam.center for cam in cams]
    dirs = [d / np.linalg.norm(d) for d in dirs if np.linalg.norm(d) > 0]
    best = 0.0
    for i in range(len(dirs)):
        for j in range(i + 1, len(dirs)):
            c = np.clip(dirs[i] @ dirs[j], -1.0, 1.0)
            best = max(best, float(np.arccos(c)))
    return best


def triangulate(observations: Sequence[Sequence[tuple[int, np.ndarray]]],
                cameras: Mapping[int, CameraView],
                max_reproj_error: float = 1.5) -> list[SparsePoint | None]:
    """
    DLT + один шаг Гаусса-Ньютона по ошибке перепроецирования.

    Args:
        observations: на каждую точку список (view id, пиксель (x, y))
        cameras: камеры по id
        max_reproj_error: порог ошибки, пиксели

    Returns:
        список той же длины; None на месте пропущенных точек
    """
    out: list[SparsePoint | None] = []
    for n, obs in enumerate(observations):
        views = [v for v, _ in obs]
        if len(set(views)) < 2:
            logger.warning("point %d skipped: observed in fewer than "
                           "two views", n)
            out.append(None)
            continue
        cams = [cameras[v] for v in views]
        pixels = [np.asarray(p, dtype=np.float64) for _, p in obs]
        X = _dlt([c.P for c in cams], pixels)
        if X is None or _ray_angle(cams, X) < 1e-6:
            logger.warning("point %d skipped: degenerate configuration "
                           "(parallel rays)", n)
            out.append(None)
            continue
        res, depths = _reprojection(cams, pixels, X)
        refined = _gauss_newton_step(cams, pixels, X)
        res_r, depths_r = _reprojection(cams, pixels, refined)
        if np.all(np.isfinite(res_r)) and \
                np.sum(res_r ** 2) <= np.sum(res ** 2):
            X, res, depths = refined, res_r, depths_r
        if np.any(depths <= 0):
            logger.debug("point %d skipped: behind a camera", n)
            out.append(None)
            continue
        err = float(np.max(np.linalg.norm(res, axis=1)))
        if err > max_reproj_error:
            logger.debug("point %d skipped: reprojection error %.3f", n, err)
            out.append(None)
            continue
        out.append(SparsePoint(X=X, obs=[(v, p) for v, p in zip(views,
                                                               pixels)],
                               reproj_error=err))
    return out


def triangulate_tracks(tracks: Sequence[tuple[tuple[int, int], ...]],
                       features: Mapping[int, Sequence[Feature]],
                       cameras: Mapping[int, CameraView],
                       max_reproj_error: float = 1.5) -> list[SparsePoint]:
    """Триангулирует треки и прикрепляет к точкам средний дескриптор."""
    obs = [[(v, features[v][i].pos) for v, i in track] for track in tracks]
    points = []
    for track, point in zip(tracks, triangulate(obs, cameras,
                                                max_reproj_error)):
        if point is None:
            continue
        desc = np.mean([features[v][i].descriptor for v, i in track], axis=0)
        point.descriptor = desc / max(np.linalg.norm(desc), 1e-12)
        point.track = tuple(track)
        points.append(point)
    logger.info("triangulated %d of %d tracks", len(points), len(tracks))
    return points


def triangulate_pairs(cam_a: CameraView, cam_b: CameraView,
                      pts_a: np.ndarray, pts_b: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """
    Пакетная двухвидовая DLT для плотных соответствий.

    Returns:
        точки (N, 3) и маска валидности (N,)
    """
    pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    if len(pts_a) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    Pa, Pb = cam_a.P, cam_b.P
    A = np.stack([
        pts_a[:, :1] * Pa[2] - Pa[0],
        pts_a[:, 1:] * Pa[2] - Pa[1],
        pts_b[:, :1] * Pb[2] - Pb[0],
        pts_b[:, 1:] * Pb[2] - Pb[1],
    ], axis=1)
    A /= np.maximum(np.linalg.norm(A, axis=2, keepdims=True), 1e-300)
    _, _, vt = np.linalg.svd(A)
    Xh = vt[:, -1, :]
    w = Xh[:, 3]
    valid = np.abs(w) > 1e-12 * np.linalg.norm(Xh, axis=1)
    X = np.zeros((len(pts_a), 3))
    X[valid] = Xh[valid, :3] / w[valid, None]
    _, za = cam_a.project(X)
    _, zb = cam_b.project(X)
    valid &= (za > 0) & (zb > 0)
    return X, valid


# --- кластеризация и фон ----------------------------------------------------

def _as_array(points) -> np.ndarray:
    if len(points) and isinstance(points[0], SparsePoint):
        return np.array([p.X for p in points], dtype=np.float64)
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def cluster_points(points, radius: float,
                   min_size: int = 20) -> ClusterResult:
    """
    Евклидова кластеризация одиночной связью.

    Args:
        points: (N, 3) или список SparsePoint
        radius: радиус связи
        min_size: кластеры меньше уходят в фон

    Returns:
        ClusterResult: кластеры с метками 1..n и индексы фона
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = _as_array(points)
    n = len(pts)
    if n == 0:
        return ClusterResult([], np.zeros(0, dtype=np.int64))
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])),
                       shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    groups = [np.flatnonzero(labels == k) for k in np.unique(labels)]
    big = [g for g in groups if len(g) >= min_size]
    small = [g for g in groups if len(g) < min_size]
    big.sort(key=lambda g: (-len(g), tuple(np.round(pts[g].mean(axis=0), 9))))
    clusters = [ObjectCluster(label=i + 1, members=g,
                              centroid=pts[g].mean(axis=0))
                for i, g in enumerate(big)]
    unclustered = (np.sort(np.concatenate(small)) if small
                   else np.zeros(0, dtype=np.int64))
    logger.info("clustering: %d clusters, %d background points",
                len(clusters), len(unclustered))
    return ClusterResult(clusters, unclustered)


def _axis_aligned_box(pts: np.ndarray) -> OrientedBox:
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return OrientedBox(center=(lo + hi) / 2, axes=np.eye(3),
                       half_extents=np.maximum((hi - lo) / 2, 1e-9))


def background_proxy(points) -> OrientedBox:
    """
    Грубый прокси фона: ориентированный параллелепипед по главным
    компонентам ковариации точек.
    """
    pts = _as_array(points)
    if len(pts) == 0:
        raise DegenerateInputError("background proxy needs points")
    if len(pts) < 3:
        logger.warning("background proxy: fewer than 3 points, "
                       "using axis-aligned box")
        return _axis_aligned_box(pts)
    mean = pts.mean(axis=0)
    cov = np.cov((pts - mean).T, bias=True)
    evals, evecs = np.linalg.eigh(cov)
    if not np.all(np.isfinite(evals)) or evals[-1] <= 1e-18:
        logger.warning("background proxy: degenerate covariance, "
                       "using axis-aligned box")
        return _axis_aligned_box(pts)
    axes = evecs[:, ::-1].T.copy()
    if np.linalg.det(axes) < 0:
        axes[2] *= -1
    local = (pts - mean) @ axes.T
    lo, hi = local.min(axis=0), local.max(axis=0)
    center = mean + ((lo + hi) / 2) @ axes
    return OrientedBox(center=center, axes=axes,
                       half_extents=np.maximum((hi - lo) / 2, 1e-9))
