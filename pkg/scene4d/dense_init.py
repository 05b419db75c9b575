"""Начальная плотная модель объекта на кадре: области, поток, грубая глубина."""

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator
from scipy.spatial import Delaunay, QhullError, cKDTree

from scene4d.errors import DegenerateInputError
from scene4d.fusion import (OrientedPointSet, estimate_normals, render_mesh,
                            surface_from_points)
from scene4d.scene_io import CameraView, to_gray
from scene4d.sparse_recon import ObjectCluster, SparsePoint, triangulate_pairs

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TriRegion:
    view: int
    points: np.ndarray
    triangles: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True, eq=False)
class FlowField:
    """
    Плотный поток (H, W, 2) в порядке (dx, dy), ошибка вперёд-назад
    и маска надёжных пикселей.
    """

    flow: np.ndarray
    fb_error: np.ndarray
    confident: np.ndarray
    mask: np.ndarray


@dataclass(eq=False)
class CorrPair:
    pts_a: np.ndarray
    pts_b: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return len(self.pts_a)


@dataclass(eq=False)
class DenseCorrSet:
    """
    Плотные межвидовые соответствия объекта на одном кадре.

    Args:
        label: метка объекта
        pairs: (вид a, вид b) -> CorrPair
        dropped: сколько соответствий отброшено при последнем переносе
    """

    label: int
    pairs: dict[tuple[int, int], CorrPair] = field(default_factory=dict)
    dropped: int = 0

    def count(self) -> int:
        return sum(int(p.valid.sum()) for p in self.pairs.values())


@dataclass(eq=False)
class CoarseObjectModel:
    """
    Грубая модель объекта по видам: маска области, начальная глубина
    (NaN вне маски), звёздные центры (row, col) и диапазон глубин.
    """

    label: int
    masks: dict[int, np.ndarray]
    depths: dict[int, np.ndarray]
    star_centers: dict[int, np.ndarray]
    near: dict[int, float]
    far: dict[int, float]
    used_surface: bool = False

    def views(self) -> list[int]:
        return [v for v in sorted(self.masks) if self.masks[v].any()]


# --- видимость и области ----------------------------------------------------

def best_visibility_view(cluster: Sequence[SparsePoint],
                         cameras: Sequence[int]) -> int:
    """Вид, где наблюдается больше всего точек кластера; при равенстве меньший id."""
    if not cluster:
        raise ValueError("cluster is empty")
    counts = {v: 0 for v in cameras}
    for point in cluster:
        for v in point.views():
            if v in counts:
                counts[v] += 1
    return min(counts, key=lambda v: (-counts[v], v))


def _check_non_collinear(points: np.ndarray) -> None:
    if len(points) < 3:
        raise DegenerateInputError(
            f"triangulation needs 3 points, got {len(points)}")
    s = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        raise DegenerateInputError("points are collinear")


def delaunay_region(points: np.ndarray, shape: tuple[int, int] | None = None,
                    view: int = 0) -> TriRegion:
    """
    Триангуляция Делоне 2D-точек (x, y) и её растр.

    Args:
        points: (N, 2)
        shape: (H, W) растра маски; по умолчанию охватывает точки
        view: id вида

    Returns:
        TriRegion
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    _check_non_collinear(points)
    try:
        tri = Delaunay(points)
    except QhullError as e:
        raise DegenerateInputError(f"delaunay failed: {e}") from e
    if shape is None:
        shape = (int(np.ceil(points[:, 1].max())) + 1,
                 int(np.ceil(points[:, 0].max())) + 1)
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    grid = np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)
    mask = (tri.find_simplex(grid) >= 0).reshape(h, w)
    return TriRegion(view, points, tri.simplices.astype(np.int64), mask)


# --- оптический поток -------------------------------------------------------

def _pyramid(gray: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [gray]
    for _ in range(levels - 1):
        pyr.append(ndimage.gaussian_filter(pyr[-1], 1.0)[::2, ::2])
    return pyr


def _seed_field(shape: tuple[int, int], seeds, scale: float) -> np.ndarray:
    """Интерполяция семян обратными квадратами расстояний."""
    h, w = shape
    flow = np.zeros((h, w, 2))
    if seeds is None or len(seeds) == 0:
        return flow
    pos = np.array([s[0] for s in seeds], dtype=np.float64) * scale
    vec = np.array([s[1] for s in seeds], dtype=np.float64) * scale
    ys, xs = np.mgrid[0:h, 0:w]
    grid = np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)
    d2 = np.sum((grid[:, None, :] - pos[None, :, :]) ** 2, axis=2)
    exact = d2 < 1e-12
    wts = 1.0 / np.maximum(d2, 1e-12)
    wts[exact.any(axis=1)] = exact[exact.any(axis=1)].astype(np.float64)
    est = (wts @ vec) / wts.sum(axis=1, keepdims=True)
    return est.reshape(h, w, 2)


def _upsample(flow: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    zoom = (h / flow.shape[0], w / flow.shape[1])
    out = np.stack([ndimage.zoom(flow[..., c], zoom, order=1, mode="nearest",
                                 grid_mode=True) for c in range(2)], axis=-1)
    return out[:h, :w] * 2.0


def _warp(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    h, w = image.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return ndimage.map_coordinates(image, [ys + flow[..., 1],
                                           xs + flow[..., 0]],
                                   order=1, mode="nearest")


def _lk_level(I0: np.ndarray, I1: np.ndarray, flow: np.ndarray, window: int,
              iterations: int) -> np.ndarray:
    Iy, Ix = np.gradient(I0)
    sxx = ndimage.uniform_filter(Ix * Ix, window)
    syy = ndimage.uniform_filter(Iy * Iy, window)
    sxy = ndimage.uniform_filter(Ix * Iy, window)
    det = sxx * syy - sxy * sxy
    ok = det > 1e-9
    safe = np.where(ok, det, 1.0)
    flow = flow.copy()
    for _ in range(iterations):
        It = _warp(I1, flow) - I0
        bx = -ndimage.uniform_filter(Ix * It, window)
        by = -ndimage.uniform_filter(Iy * It, window)
        du = np.where(ok, (syy * bx - sxy * by) / safe, 0.0)
        dv = np.where(ok, (sxx * by - sxy * bx) / safe, 0.0)
        flow[..., 0] += du
        flow[..., 1] += dv
        if max(np.abs(du).max(), np.abs(dv).max()) < 1e-3:
            break
    return flow


def _pyramidal_flow(gray_a: np.ndarray, gray_b: np.ndarray, seeds,
                    levels: int, window: int, iterations: int) -> np.ndarray:
    pyr_a, pyr_b = _pyramid(gray_a, levels), _pyramid(gray_b, levels)
    top = len(pyr_a) - 1
    flow = _seed_field(pyr_a[top].shape, seeds, 0.5 ** top)
    for level in range(top, -1, -1):
        if level < top:
            flow = _upsample(flow, pyr_a[level].shape)
        flow = _lk_level(pyr_a[level], pyr_b[level], flow, window, iterations)
    return flow


def optical_flow(img_a: np.ndarray, img_b: np.ndarray,
                 mask: np.ndarray | None = None, seeds=None, levels: int = 3,
                 window: int = 15, iterations: int = 10,
                 fb_threshold: float = 1.0) -> FlowField:
    """
    Пирамидальный оконный итеративный поток от img_a к img_b.

    Args:
        img_a: изображение кадра t
        img_b: изображение кадра t+1
        mask: пиксели, для которых поток нужен (по умолчанию все)
        seeds: пары ((x, y), (dx, dy)) для инициализации верхнего уровня
        levels: уровни пирамиды
        window: сторона окна
        iterations: итерации на уровне
        fb_threshold: порог ошибки вперёд-назад, пиксели

    Returns:
        FlowField; вне маски поток нулевой
    """
    gray_a, gray_b = to_gray(img_a), to_gray(img_b)
    if gray_a.shape != gray_b.shape:
        raise ValueError("images differ in size")
    if mask is None:
        mask = np.ones(gray_a.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    fwd = _pyramidal_flow(gray_a, gray_b, seeds, levels, window, iterations)
    back_seeds = None
    if seeds is not None and len(seeds):
        back_seeds = [(np.asarray(p) + np.asarray(u), -np.asarray(u))
                      for p, u in seeds]
    bwd = _pyramidal_flow(gray_b, gray_a, back_seeds, levels, window,
                          iterations)
    h, w = gray_a.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    tx, ty = xs + fwd[..., 0], ys + fwd[..., 1]
    back = np.stack([ndimage.map_coordinates(bwd[..., c], [ty, tx], order=1,
                                             mode="nearest")
                     for c in range(2)], axis=-1)
    fb_error = np.linalg.norm(fwd + back, axis=-1)
    inside = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    confident = mask & inside & (fb_error <= fb_threshold)
    flow = np.where(mask[..., None], fwd, 0.0)
    low = int(np.sum(mask & ~confident))
    if low:
        logger.debug("flow: %d of %d mask pixels low-confidence", low,
                     int(mask.sum()))
    return FlowField(flow, np.where(mask, fb_error, 0.0), confident, mask)


# --- плотные соответствия ---------------------------------------------------

def _sample_flow(flow: FlowField, pts: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray]:
    h, w = flow.confident.shape
    coords = [pts[:, 1], pts[:, 0]]
    shift = np.column_stack([
        ndimage.map_coordinates(flow.flow[..., c], coords, order=1,
                                mode="nearest") for c in range(2)])
    r = np.clip(np.rint(pts[:, 1]).astype(int), 0, h - 1)
    c = np.clip(np.rint(pts[:, 0]).astype(int), 0, w - 1)
    return pts + shift, flow.confident[r, c]


def _in_bounds(pts: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    return ((pts[:, 0] >= 0) & (pts[:, 0] <= w - 1) & (pts[:, 1] >= 0)
            & (pts[:, 1] <= h - 1))


def propagate_dense(prev: DenseCorrSet,
                    flows: Mapping[int, FlowField]) -> DenseCorrSet:
    """
    Переносит (p в a <-> q в b) в (p + flow_a(p) <-> q + flow_b(q)).

    Соответствия вне изображения или с ненадёжным потоком отбрасываются;
    число новых = число прежних минус dropped.
    """
    out = DenseCorrSet(prev.label)
    dropped = 0
    for (a, b), pair in sorted(prev.pairs.items()):
        if a not in flows or b not in flows:
            dropped += int(pair.valid.sum())
            continue
        pa, pb = pair.pts_a[pair.valid], pair.pts_b[pair.valid]
        na, conf_a = _sample_flow(flows[a], pa)
        nb, conf_b = _sample_flow(flows[b], pb)
        keep = (conf_a & conf_b & _in_bounds(na, flows[a].flow.shape[:2])
                & _in_bounds(nb, flows[b].flow.shape[:2]))
        dropped += int(np.sum(~keep))
        out.pairs[(a, b)] = CorrPair(na[keep], nb[keep],
                                     np.ones(int(keep.sum()), dtype=bool))
    out.dropped = dropped
    logger.debug("object %d: %d correspondences propagated, %d dropped",
                 prev.label, out.count(), dropped)
    return out


def dense_from_depth(label: int, depths: Mapping[int, np.ndarray],
                     masks: Mapping[int, np.ndarray],
                     cameras: Mapping[int, CameraView], stride: int = 2,
                     rel_tolerance: float = 0.02) -> DenseCorrSet:
    """
    Плотные соответствия из оптимизированных карт глубин: пиксель вида v
    поднимается и проецируется в следующий по кругу вид, где глубина
    должна согласоваться в пределах rel_tolerance.
    """
    views = sorted(v for v in depths if masks[v].any())
    out = DenseCorrSet(label)
    if len(views) < 2:
        return out
    for n, a in enumerate(views):
        b = views[(n + 1) % len(views)]
        if a == b:
            continue
        cam_a, cam_b = cameras[a], cameras[b]
        depth_a = depths[a]
        sel = np.zeros_like(masks[a], dtype=bool)
        sel[::stride, ::stride] = True
        sel &= masks[a] & np.isfinite(depth_a)
        rows, cols = np.nonzero(sel)
        pa = np.column_stack([cols, rows]).astype(np.float64)
        X = cam_a.backproject(pa, depth_a[rows, cols])
        pb, zb = cam_b.project(X)
        ok = (zb > 0) & cam_b.in_image(pb)
        rb = np.rint(pb[ok, 1]).astype(int)
        cb = np.rint(pb[ok, 0]).astype(int)
        ref = depths[b][rb, cb]
        agree = np.zeros(len(pa), dtype=bool)
        agree[np.flatnonzero(ok)] = masks[b][rb, cb] & np.isfinite(ref) & (
            np.abs(ref - zb[ok]) <= rel_tolerance * zb[ok])
        out.pairs[(a, b)] = CorrPair(pa[agree], pb[agree],
                                     np.ones(int(agree.sum()), dtype=bool))
    return out


def triangulate_dense(corr: DenseCorrSet,
                      cameras: Mapping[int, CameraView]) -> np.ndarray:
    """Плотная 3D-модель объекта из межвидовых соответствий (M, 3)."""
    chunks = []
    for (a, b), pair in sorted(corr.pairs.items()):
        if not pair.valid.any():
            continue
        X, valid = triangulate_pairs(cameras[a], cameras[b],
                                     pair.pts_a[pair.valid],
                                     pair.pts_b[pair.valid])
        chunks.append(X[valid])
    return np.vstack(chunks) if chunks else np.zeros((0, 3))


# --- новые части и объекты --------------------------------------------------

def update_new_parts(cluster_members: Sequence[int],
                     dynamic: Sequence[int],
                     static: Sequence[int]) -> np.ndarray:
    """Динамические точки плюс члены кластера без статических."""
    merged = set(int(i) for i in dynamic) | (
        set(int(i) for i in cluster_members) - set(int(i) for i in static))
    return np.array(sorted(merged), dtype=np.int64)


def detect_new_objects(clusters: Sequence[ObjectCluster],
                       tracked: Mapping[int, set[int]], next_label: int
                       ) -> tuple[dict[int, int], list[int]]:
    """
    Сопоставляет кластеры кадра с отслеживаемыми объектами.

    Args:
        clusters: кластеры текущего кадра
        tracked: метка объекта -> индексы точек, унаследованных им
        next_label: первая свободная метка

    Returns:
        индекс кластера -> метка и список выданных новых меток
    """
    assignment: dict[int, int] = {}
    new_labels: list[int] = []
    taken: set[int] = set()
    for n, cluster in enumerate(clusters):
        members = set(int(i) for i in cluster.members)
        overlaps = sorted(((len(members & pts), label)
                           for label, pts in tracked.items()
                           if label not in taken),
                          key=lambda t: (-t[0], t[1]))
        if overlaps and overlaps[0][0] > 0:
            assignment[n] = overlaps[0][1]
            taken.add(overlaps[0][1])
        else:
            assignment[n] = next_label
            new_labels.append(next_label)
            next_label += 1
    if new_labels:
        logger.info("new dynamic objects: %s", new_labels)
    return assignment, new_labels


# --- грубая модель ----------------------------------------------------------

def _front_points(pix: np.ndarray, z: np.ndarray, zbuf: np.ndarray | None,
                  tol: float, radius: float = 4.0) -> np.ndarray:
    """Отсекает точки, закрытые поверхностью или более близкими точками."""
    if len(pix) == 0:
        return np.zeros(0, dtype=bool)
    if zbuf is not None:
        h, w = zbuf.shape
        r = np.clip(np.rint(pix[:, 1]).astype(int), 0, h - 1)
        c = np.clip(np.rint(pix[:, 0]).astype(int), 0, w - 1)
        ref = zbuf[r, c]
        return ~np.isfinite(ref) | (z <= ref + tol)
    tree = cKDTree(pix)
    nearest = np.array([z[idx].min() for idx in
                        tree.query_ball_point(pix, radius)])
    return z <= nearest + tol


def _interpolate_depth(pix: np.ndarray, z: np.ndarray,
                       mask: np.ndarray) -> np.ndarray:
    """Обратная глубина барицентрически по треугольникам, снаружи - ближайшая."""
    depth = np.full(mask.shape, np.nan)
    if len(pix) == 0 or not mask.any():
        return depth
    rows, cols = np.nonzero(mask)
    grid = np.column_stack([cols, rows]).astype(np.float64)
    inv = 1.0 / z
    values = np.full(len(grid), np.nan)
    try:
        _check_non_collinear(pix)
        values = LinearNDInterpolator(pix, inv)(grid)
    except (DegenerateInputError, QhullError, ValueError):
        pass
    missing = ~np.isfinite(values)
    if missing.any():
        values[missing] = NearestNDInterpolator(pix, inv)(grid[missing])
    depth[rows, cols] = 1.0 / values
    return depth


def coarse_model(label: int, points: np.ndarray, star_points: np.ndarray,
                 cameras: Mapping[int, CameraView], voxel_size: float = 0.05,
                 margin: float = 0.1) -> CoarseObjectModel:
    """
    Грубая модель объекта: сетка по точкам объекта, проецируемая в каждый
    вид (маска), интерполированная глубина и звёздные центры.

    При вырожденной геометрии маска строится по триангуляции Делоне
    проекций точек.

    Args:
        label: метка объекта
        points: 3D-точки объекта (N, 3)
        star_points: динамические 3D-точки для звёздных центров (M, 3)
        cameras: камеры по id
        voxel_size: шаг сетки поверхности
        margin: запас диапазона глубин (доля)

    Returns:
        CoarseObjectModel
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    star_points = np.asarray(star_points, dtype=np.float64).reshape(-1, 3)
    mesh = None
    try:
        normals = estimate_normals(points)
        mesh = surface_from_points(OrientedPointSet(points, normals),
                                   voxel_size, label)
    except DegenerateInputError as e:
        logger.warning("object %d: %s, falling back to delaunay regions",
                       label, e)
    except ValueError as e:
        logger.warning("object %d: surface failed (%s), falling back to "
                       "delaunay regions", label, e)

    model = CoarseObjectModel(label, {}, {}, {}, {}, {},
                              used_surface=mesh is not None)
    tol = 2.0 * voxel_size
    for v in sorted(cameras):
        cam = cameras[v]
        h, w = cam.shape
        mask = np.zeros((h, w), dtype=bool)
        pix, z = cam.project(points)
        seen = (z > 0) & cam.in_image(pix)
        zbuf = None
        if mesh is not None:
            zbuf = render_mesh(mesh.vertices, mesh.triangles, cam)
            mask = np.isfinite(zbuf)
        if not mask.any() and seen.sum() >= 3:
            try:
                mask = delaunay_region(pix[seen], (h, w), v).mask
                zbuf = None
            except DegenerateInputError:
                pass
        front = np.zeros(len(points), dtype=bool)
        front[seen] = _front_points(pix[seen], z[seen], zbuf, tol)
        depth = _interpolate_depth(pix[front], z[front], mask)
        model.masks[v] = mask
        model.depths[v] = depth

        centers = np.zeros((0, 2), dtype=np.int64)
        if len(star_points) and mask.any():
            spix, sz = cam.project(star_points)
            ok = (sz > 0) & cam.in_image(spix)
            rc = np.rint(spix[ok][:, ::-1]).astype(np.int64)
            rc = rc[mask[rc[:, 0], rc[:, 1]]] if len(rc) else rc
            centers = np.unique(rc, axis=0) if len(rc) else centers
        model.star_centers[v] = centers

        if mask.any():
            finite = depth[mask & np.isfinite(depth)]
            zs = np.concatenate([finite, z[front]]) if len(finite) \
                else z[front]
            if len(zs):
                model.near[v] = max(float(zs.min()) * (1.0 - margin), 1e-6)
                model.far[v] = float(zs.max()) * (1.0 + margin)
    return model
