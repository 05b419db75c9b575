"""Слияние карт глубин в сетки, сборка сцены и перенос ID вершин во времени."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from scene4d.errors import DegenerateInputError
from scene4d.scene_io import CameraView, write_mesh
from scene4d.sparse_recon import OrientedBox

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ("frame", "object", "file", "vid_min", "vid_max")
BACKGROUND_LABEL = 0


@dataclass(frozen=True, eq=False)
class OrientedPointSet:
    """
    Точки с единичными нормалями и источником (вид, пиксель, кадр).
    """

    points: np.ndarray
    normals: np.ndarray
    views: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    frame: int = 0

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if pts.shape != nrm.shape:
            raise ValueError("one normal per point required")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point positions must be finite")
        lengths = np.linalg.norm(nrm, axis=1, keepdims=True)
        nrm = nrm / np.where(lengths > 0, lengths, 1.0)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def concat(cls, sets: list["OrientedPointSet"]) -> "OrientedPointSet":
        if not sets:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)))
        return cls(np.vstack([s.points for s in sets]),
                   np.vstack([s.normals for s in sets]),
                   np.concatenate([s.views for s in sets]),
                   np.vstack([s.pixels.reshape(-1, 2) for s in sets]),
                   sets[0].frame)


@dataclass(eq=False)
class SurfaceMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    vids: np.ndarray
    label: int = 1
    frame: int = 0

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)


@dataclass(eq=False)
class SceneModel:
    """Сцена кадра: прокси фона и сетки объектов по меткам слоёв."""

    frame: int
    background: SurfaceMesh | None
    objects: dict[int, SurfaceMesh]

    def layers(self) -> list[int]:
        out = [BACKGROUND_LABEL] if self.background is not None else []
        return out + sorted(self.objects)


# --- точки из карт глубин ---------------------------------------------------

def depth_to_points(depth: np.ndarray, mask: np.ndarray, cam: CameraView,
                    frame: int = 0, stride: int = 1) -> OrientedPointSet:
    """
    Поднимает пиксели маски с числовой глубиной в мир; нормали по
    центральным разностям, развёрнуты к камере.
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.asarray(mask, dtype=bool) & np.isfinite(depth) & (depth > 0)
    h, w = depth.shape
    ys, xs = np.mgrid[0:h, 0:w]
    pix = np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)
    world = cam.backproject(pix, np.where(valid, depth, 1.0).ravel())
    world = world.reshape(h, w, 3)
    world[~valid] = np.nan

    def derivative(axis: int) -> np.ndarray:
        fwd = np.roll(world, -1, axis=axis)
        bwd = np.roll(world, 1, axis=axis)
        ok_f = np.roll(valid, -1, axis=axis)
        ok_b = np.roll(valid, 1, axis=axis)
        edge = [slice(None)] * 2
        edge[axis] = -1
        ok_f[tuple(edge)] = False
        edge[axis] = 0
        ok_b[tuple(edge)] = False
        central = (fwd - bwd) / 2.0
        d = np.where((ok_f & ok_b)[..., None], central,
                     np.where(ok_f[..., None], fwd - world,
                              np.where(ok_b[..., None], world - bwd, np.nan)))
        return d

    n = np.cross(derivative(1), derivative(0))
    sel = np.zeros_like(valid)
    sel[::stride, ::stride] = True
    sel &= valid
    pts = world[sel]
    normals = n[sel]
    to_cam = cam.center - pts
    bad = ~np.all(np.isfinite(normals), axis=1) | \
        (np.linalg.norm(np.nan_to_num(normals), axis=1) < 1e-12)
    normals[bad] = to_cam[bad]
    flip = np.sum(normals * to_cam, axis=1) < 0
    normals[flip] *= -1
    rows, cols = np.nonzero(sel)
    return OrientedPointSet(pts, normals,
                            np.full(len(pts), cam.id, dtype=np.int64),
                            np.column_stack([cols, rows]).astype(np.float64),
                            frame)


def estimate_normals(points: np.ndarray, k: int = 8) -> np.ndarray:
    """Нормали по PCA k соседей, развёрнуты от центроида облака."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    k = min(k, len(points))
    _, idx = cKDTree(points).query(points, k=k)
    nbrs = points[idx.reshape(len(points), -1)]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    outward = points - points.mean(axis=0)
    normals[np.sum(normals * outward, axis=1) < 0] *= -1
    return normals


# --- TSDF и сетка -----------------------------------------------------------

class TSDFVolume:
    """
    Усечённое знаковое расстояние на регулярной сетке.

    Args:
        origin: мировые координаты вокселя (0, 0, 0)
        voxel_size: шаг сетки
        values: (nx, ny, nz) значения в мировых единицах
    """

    def __init__(self, origin: np.ndarray, voxel_size: float,
                 values: np.ndarray) -> None:
        self.origin = np.asarray(origin, dtype=np.float64)
        self.voxel_size = float(voxel_size)
        self.values = np.asarray(values, dtype=np.float64)

    @classmethod
    def from_points(cls, points: OrientedPointSet, voxel_size: float,
                    truncation: float | None = None,
                    k: int = 4) -> "TSDFVolume":
        """
        Расстояние до касательных плоскостей k ближайших точек,
        усреднённое с весами обратного расстояния и усечённое.
        """
        if voxel_size <= 0:
            raise ValueError("voxel size must be positive")
        trunc = 3.0 * voxel_size if truncation is None else truncation
        pts = points.points
        pad = trunc + 2.0 * voxel_size
        lo = pts.min(axis=0) - pad
        hi = pts.max(axis=0) + pad
        dims = np.ceil((hi - lo) / voxel_size).astype(np.int64) + 1
        axes = [lo[i] + voxel_size * np.arange(dims[i]) for i in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        centers = grid.reshape(-1, 3)
        k = min(k, len(pts))
        dist, idx = cKDTree(pts).query(centers, k=k)
        dist = dist.reshape(len(centers), k)
        idx = idx.reshape(len(centers), k)
        plane = np.einsum("nkj,nkj->nk", centers[:, None, :] - pts[idx],
                          points.normals[idx])
        weight = 1.0 / np.maximum(dist, 1e-6 * voxel_size)
        sdf = np.sum(weight * plane, axis=1) / np.sum(weight, axis=1)
        sdf = np.clip(sdf, -trunc, trunc)
        return cls(lo, voxel_size, sdf.reshape(tuple(dims)))

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Трилинейная интерполяция в мировых точках."""
        coords = (np.atleast_2d(points) - self.origin) / self.voxel_size
        return ndimage.map_coordinates(self.values, coords.T, order=1,
                                       mode="nearest")

    def extract(self, label: int = 1, frame: int = 0) -> SurfaceMesh:
        if not (self.values.min() < 0 < self.values.max()):
            raise DegenerateInputError("signed distance has no zero crossing")
        verts, faces, _, _ = marching_cubes(
            self.values, level=0.0, spacing=(self.voxel_size,) * 3)
        verts = verts + self.origin
        return SurfaceMesh(verts, faces.astype(np.int64),
                           np.arange(len(verts), dtype=np.int64), label, frame)


def surface_from_points(points: OrientedPointSet, voxel_size: float,
                        label: int = 1, frame: int = 0) -> SurfaceMesh:
    """
    Сетка нулевого уровня TSDF, построенной по ориентированным точкам.

    Args:
        points: OrientedPointSet, не менее 4 некомпланарных точек
        voxel_size: шаг сетки
        label: метка объекта
        frame: индекс кадра

    Returns:
        SurfaceMesh с vids 0..n-1
    """
    pts = points.points
    if len(pts) < 4:
        raise DegenerateInputError(
            f"surface needs at least 4 points, got {len(pts)}")
    s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if s[2] <= 1e-9 * max(s[0], 1e-300):
        raise DegenerateInputError("surface points are coplanar")
    volume = TSDFVolume.from_points(points, voxel_size)
    mesh = volume.extract(label, frame)
    logger.debug("surface: %d points -> %d vertices, %d triangles",
                 len(pts), mesh.n_vertices, len(mesh.triangles))
    return mesh


def fuse_depth_maps(depths: Mapping[int, np.ndarray],
                    masks: Mapping[int, np.ndarray],
                    cameras: Mapping[int, CameraView], voxel_size: float,
                    label: int = 1, frame: int = 0,
                    stride: int = 1) -> SurfaceMesh:
    """Одна сетка объекта из его карт глубин во всех видах."""
    sets = [depth_to_points(depths[v], masks[v], cameras[v], frame, stride)
            for v in sorted(depths)]
    cloud = OrientedPointSet.concat([s for s in sets if len(s)])
    return surface_from_points(cloud, voxel_size, label, frame)


# --- растеризация -----------------------------------------------------------

def render_mesh(vertices: np.ndarray, triangles: np.ndarray,
                cam: CameraView) -> np.ndarray:
    """
    z-буфер сетки в виде камеры; NaN там, где сетки нет.

    Глубина интерполируется перспективно-корректно (через 1/z).
    """
    h, w = cam.shape
    zbuf = np.full((h, w), np.inf)
    if len(triangles) == 0:
        return np.full((h, w), np.nan)
    pix, z = cam.project(vertices)
    for tri in np.asarray(triangles, dtype=np.int64):
        if np.any(z[tri] <= 0):
            continue
        p = pix[tri]
        x0, y0 = np.floor(p.min(axis=0)).astype(int)
        x1, y1 = np.ceil(p.max(axis=0)).astype(int)
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, w - 1), min(y1, h - 1)
        if x0 > x1 or y0 > y1:
            continue
        (ax, ay), (bx, by), (cx, cy) = p
        area = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)
        if abs(area) < 1e-12:
            continue
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        w0 = ((bx - xs) * (cy - ys) - (cx - xs) * (by - ys)) / area
        w1 = ((cx - xs) * (ay - ys) - (ax - xs) * (cy - ys)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        if not np.any(inside):
            continue
        inv_z = w0 / z[tri[0]] + w1 / z[tri[1]] + w2 / z[tri[2]]
        depth = 1.0 / inv_z
        region = zbuf[y0:y1 + 1, x0:x1 + 1]
        closer = inside & (depth < region)
        region[closer] = depth[closer]
    return np.where(np.isfinite(zbuf), zbuf, np.nan)


def box_mesh(box: OrientedBox, label: int = BACKGROUND_LABEL,
             frame: int = 0) -> SurfaceMesh:
    """12 треугольников параллелепипеда, нормали наружу."""
    verts = box.corners()
    # corners(): индекс = 4 * sx + 2 * sy + sz, s in {0: -1, 1: +1}
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6),
             (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    tris = np.array(tris, dtype=np.int64)
    center = verts.mean(axis=0)
    for n, (a, b, c) in enumerate(tris):
        normal = np.cross(verts[b] - verts[a], verts[c] - verts[a])
        if normal @ (verts[a] - center) < 0:
            tris[n] = (a, c, b)
    return SurfaceMesh(verts, tris, np.arange(8, dtype=np.int64), label, frame)


def assemble_scene(background: OrientedBox | None,
                   objects: Mapping[int, SurfaceMesh],
                   frame: int) -> SceneModel:
    """Сцена кадра; метки слоёв сохраняются без изменений."""
    if BACKGROUND_LABEL in objects:
        raise ValueError("object label 0 is reserved for the background")
    bg = box_mesh(background, frame=frame) if background is not None else None
    return SceneModel(frame, bg, {label: mesh for label, mesh
                                  in sorted(objects.items())})


# --- временные соответствия вершин ------------------------------------------

def _visible(vertices: np.ndarray, zbuf: np.ndarray, cam: CameraView,
             tol: float) -> tuple[np.ndarray, np.ndarray]:
    pix, z = cam.project(vertices)
    inside = (z > 0) & cam.in_image(pix)
    vis = np.zeros(len(vertices), dtype=bool)
    if np.any(inside):
        r = np.rint(pix[inside, 1]).astype(int)
        c = np.rint(pix[inside, 0]).astype(int)
        ref = zbuf[r, c]
        vis[inside] = np.isfinite(ref) & (z[inside] <= ref + tol)
    return pix, vis


def carry_correspondence(prev: SurfaceMesh, new: SurfaceMesh,
                         cameras: Mapping[int, CameraView],
                         flows: Mapping[int, np.ndarray], next_vid: int,
                         radius: float = 2.0,
                         depth_tolerance: float = 0.1) -> tuple[np.ndarray, int]:
    """
    Присваивает вершинам новой сетки ID вершин предыдущей.

    Видимая вершина прошлого кадра сдвигается по потоку своего вида;
    новая вершина наследует ID ближайшей сдвинутой проекции в радиусе
    radius пикселей (жадно по расстоянию, взаимно однозначно).
    Оставшиеся ищутся в 3D среди прошлых вершин, сдвинутых на медианное
    смещение уже сопоставленных пар. Остальные получают новые ID.

    Args:
        prev: сетка кадра t с vids
        new: сетка кадра t+1
        cameras: камеры по id
        flows: вид -> поток t -> t+1 (H, W, 2)
        next_vid: первый свободный ID
        radius: радиус поиска, пиксели
        depth_tolerance: допуск z-теста видимости

    Returns:
        vids новой сетки и следующий свободный ID
    """
    candidates = []
    for v in sorted(cameras):
        if v not in flows:
            continue
        cam = cameras[v]
        flow = np.asarray(flows[v], dtype=np.float64)
        prev_pix, prev_vis = _visible(
            prev.vertices, render_mesh(prev.vertices, prev.triangles, cam),
            cam, depth_tolerance)
        new_pix, new_vis = _visible(
            new.vertices, render_mesh(new.vertices, new.triangles, cam),
            cam, depth_tolerance)
        pi, ni = np.flatnonzero(prev_vis), np.flatnonzero(new_vis)
        if len(pi) == 0 or len(ni) == 0:
            continue
        src = prev_pix[pi]
        shift = np.column_stack([
            ndimage.map_coordinates(flow[..., c], [src[:, 1], src[:, 0]],
                                    order=1, mode="nearest")
            for c in range(2)])
        tracked = src + shift
        dist, idx = cKDTree(tracked).query(new_pix[ni],
                                           distance_upper_bound=radius)
        ok = np.isfinite(dist)
        candidates += list(zip(dist[ok], ni[ok], pi[idx[ok]]))

    vids = np.full(new.n_vertices, -1, dtype=np.int64)
    used_prev = set()
    for _, i, j in sorted(candidates, key=lambda c: (c[0], c[1], c[2])):
        if vids[i] >= 0 or j in used_prev:
            continue
        vids[i] = prev.vids[j]
        used_prev.add(j)

    matched = np.flatnonzero(vids >= 0)
    rest = np.flatnonzero(vids < 0)
    if len(matched) and len(rest):
        prev_index = {int(vid): n for n, vid in enumerate(prev.vids)}
        src = np.array([prev_index[int(v)] for v in vids[matched]])
        motion = np.median(new.vertices[matched] - prev.vertices[src],
                           axis=0)
        free_prev = np.array([j for j in range(prev.n_vertices)
                              if j not in used_prev], dtype=np.int64)
        if len(free_prev):
            tree = cKDTree(prev.vertices[free_prev] + motion)
            dist, idx = tree.query(new.vertices[rest],
                                   distance_upper_bound=depth_tolerance)
            for d, i, k in sorted(zip(dist, rest, idx)):
                if not np.isfinite(d):
                    continue
                j = int(free_prev[k])
                if j in used_prev:
                    continue
                vids[i] = prev.vids[j]
                used_prev.add(j)

    fresh = vids < 0
    if np.all(fresh) and new.n_vertices:
        logger.warning("object %d: no vertex correspondence carried to "
                       "frame %d", new.label, new.frame)
    vids[fresh] = next_vid + np.arange(int(fresh.sum()))
    return vids, next_vid + int(fresh.sum())


def write_scene(out_dir: str | Path, scene: SceneModel
                ) -> list[tuple[int, int, str, int, int]]:
    """
    OBJ на объект и фон кадра.

    Returns:
        строки манифеста (frame, object, file, vid_min, vid_max)
    """
    out_dir = Path(out_dir)
    rows = []
    meshes = ([(BACKGROUND_LABEL, scene.background)]
              if scene.background is not None else [])
    meshes += list(scene.objects.items())
    for label, mesh in meshes:
        name = f"frame_{scene.frame:03d}_obj{label}.obj"
        write_mesh(out_dir / name, mesh.vertices, mesh.triangles, mesh.vids,
                   {"frame": scene.frame, "object": label})
        vmin = int(mesh.vids.min()) if mesh.n_vertices else -1
        vmax = int(mesh.vids.max()) if mesh.n_vertices else -1
        rows.append((scene.frame, label, name, vmin, vmax))
    return rows
