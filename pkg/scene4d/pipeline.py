"""
Покадровый конвейер: разреженная реконструкция, временное отслеживание,
начальная плотная модель, совместная оптимизация и слияние.
"""

import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

from scene4d.config import PipelineConfig
from scene4d.dense_init import (CoarseObjectModel, DenseCorrSet, FlowField,
                                coarse_model, dense_from_depth,
                                detect_new_objects, optical_flow,
                                propagate_dense, triangulate_dense,
                                update_new_parts)
from scene4d.energy import (DepthLabelSpace, EnergyTerms, EnergyWeights,
                            PhotoParams, build_terms, fit_color_models,
                            marker_masks, term_rasters)
from scene4d.errors import DegenerateInputError, StageError
from scene4d.fusion import (MANIFEST_HEADER, SurfaceMesh, assemble_scene,
                            carry_correspondence, fuse_depth_maps,
                            write_scene)
from scene4d.geodesic import build_forest, write_forest
from scene4d.optimizer import optimize, write_trace
from scene4d.scene_io import (CameraView, FrameSet, load_calibration,
                              load_frame_set, write_csv, write_depth,
                              write_mask, write_raster)
from scene4d.sparse_recon import (Feature, HarrisDetector, ObjectCluster,
                                  OrientedBox, SparsePoint, background_proxy,
                                  build_tracks, cluster_points,
                                  triangulate_tracks)
from scene4d.temporal_tracking import (classify_dynamic, consistency_check,
                                       match_sparse_points, net_motion,
                                       temporal_match, write_matches_csv)

logger = logging.getLogger(__name__)

FRAMES_HEADER = ("frame", "status", "features", "points", "dynamic_points",
                 "optimized_objects", "static_objects", "new_objects",
                 "reused")


# --- отчёт ------------------------------------------------------------------

@dataclass
class FrameRecord:
    """Стадии, длительности и счётчики одного кадра."""

    frame: int
    status: str = "ok"
    stages: list[str] = field(default_factory=list)
    durations: dict[str, float] = field(default_factory=dict)
    counters: Counter = field(default_factory=Counter)


@dataclass
class RunReport:
    frames: list[FrameRecord] = field(default_factory=list)

    def start(self, frame: int) -> FrameRecord:
        record = FrameRecord(frame)
        self.frames.append(record)
        return record

    def frame(self, t: int) -> FrameRecord:
        for record in self.frames:
            if record.frame == t:
                return record
        raise KeyError(f"frame {t} was not processed")

    def stage_count(self, stage: str) -> int:
        return sum(r.stages.count(stage) for r in self.frames)

    @property
    def failed(self) -> list[int]:
        return [r.frame for r in self.frames if r.status != "ok"]

    def write_csv(self, path: str | Path) -> None:
        """Только счётчики: длительности зависят от машины."""
        write_csv(path, FRAMES_HEADER,
                  [(r.frame, r.status) + tuple(r.counters[k] for k in
                                               FRAMES_HEADER[2:])
                   for r in self.frames])


class StageTimer:
    """
    Засекает стадию кадра и пишет строку `stage=... duration=... counters=...`.

    Любое исключение внутри стадии превращается в StageError.
    """

    def __init__(self, record: FrameRecord, stage: str) -> None:
        self.record = record
        self.stage = stage
        self.counters: Counter = Counter()
        self._start = 0.0

    def count(self, **counters: int) -> None:
        self.counters.update(counters)

    def __enter__(self) -> "StageTimer":
        self._start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        duration = time.perf_counter() - self._start
        self.record.stages.append(self.stage)
        self.record.durations[self.stage] = (
            self.record.durations.get(self.stage, 0.0) + duration)
        self.record.counters.update(self.counters)
        if exc is None:
            logger.info("frame=%d stage=%s duration=%.3fs counters=%s",
                        self.record.frame, self.stage, duration,
                        dict(sorted(self.counters.items())))
            return False
        if not isinstance(exc, Exception) or isinstance(exc, StageError):
            return False
        raise StageError(self.record.frame, self.stage, exc) from exc


# --- состояние --------------------------------------------------------------

@dataclass(eq=False)
class ObjectState:
    """
    Args:
        label: метка слоя
        members: индексы разреженных точек кадра
        dynamic: перестраивается ли объект на этом кадре
        model: грубая модель, по которой шла оптимизация
        mesh: сетка с ID вершин
        dense: плотные соответствия для переноса на следующий кадр
    """

    label: int
    members: np.ndarray
    dynamic: bool = True
    model: CoarseObjectModel | None = None
    mesh: SurfaceMesh | None = None
    dense: DenseCorrSet | None = None


@dataclass(eq=False)
class FrameState:
    frame: int
    frame_set: FrameSet
    features: dict[int, list[Feature]]
    points: list[SparsePoint]
    objects: dict[int, ObjectState] = field(default_factory=dict)
    background: OrientedBox | None = None
    masks: dict[int, np.ndarray] = field(default_factory=dict)
    depths: dict[int, np.ndarray] = field(default_factory=dict)
    flows: dict[int, FlowField] = field(default_factory=dict)

    @property
    def positions(self) -> np.ndarray:
        return (np.array([p.X for p in self.points])
                if self.points else np.zeros((0, 3)))


def _interior_center(mask: np.ndarray) -> np.ndarray:
    """Самый удалённый от края пиксель маски (row, col)."""
    edt = ndimage.distance_transform_edt(mask)
    return np.array([np.unravel_index(int(np.argmax(edt)), mask.shape)],
                    dtype=np.int64)


def _copy_mesh(mesh: SurfaceMesh | None, frame: int) -> SurfaceMesh | None:
    if mesh is None:
        return None
    return SurfaceMesh(mesh.vertices, mesh.triangles, mesh.vids, mesh.label,
                       frame)


class Pipeline:
    """
    Реконструкция последовательности кадров.

    Первый обработанный кадр строит все объекты (статические и
    динамические); следующие перестраивают только динамические, а
    статические переносят без оптимизации.
    """

    def __init__(self, config: PipelineConfig, out_dir: str | Path,
                 dump_debug: bool = False,
                 cameras: list[CameraView] | None = None) -> None:
        self.config = config
        self.out = Path(out_dir)
        self.dump_debug = dump_debug
        if cameras is None:
            cameras = load_calibration(config.resolve(config.calibration))
        self.cameras = {cam.id: cam for cam in cameras}
        self.views = sorted(self.cameras)
        self.detector = HarrisDetector(
            k=config.harris_k, sigma=config.harris_sigma,
            threshold=config.harris_threshold, nms_radius=config.nms_radius,
            max_features=config.max_features)
        self.weights = EnergyWeights.from_config(config)
        self.photo = PhotoParams.from_config(config)
        self.report = RunReport()
        self.manifest: list[tuple[int, int, str, int, int]] = []
        self.next_vid = 0
        self.next_label = 1

    # --- запуск ---------------------------------------------------------

    def run(self, frames: Iterable[int] | None = None) -> RunReport:
        frames = list(range(self.config.num_frames) if frames is None
                      else frames)
        last_good: FrameState | None = None
        for t in frames:
            record = self.report.start(t)
            try:
                last_good = self.run_frame(t, last_good, record)
            except StageError as e:
                record.status = "failed"
                logger.error("%s", e)
                if not self.config.continue_on_error:
                    self._finish()
                    raise
                logger.warning("frame %d skipped, continuing from frame %s",
                               t, last_good.frame if last_good else None)
        self._finish()
        return self.report

    def _finish(self) -> None:
        write_csv(self.out / "manifest.csv", MANIFEST_HEADER, self.manifest)
        self.report.write_csv(self.out / "frames.csv")

    def run_frame(self, t: int, prev: FrameState | None,
                  record: FrameRecord) -> FrameState:
        with StageTimer(record, "load"):
            frame_set = self._load(t)
        with StageTimer(record, "sparse") as timer:
            features, points = self._sparse(frame_set)
            timer.count(features=sum(len(f) for f in features.values()),
                        points=len(points))
        state = FrameState(t, frame_set, features, points)
        if prev is None:
            self._full_frame(state, record)
        else:
            self._dynamic_frame(state, prev, record)
        with StageTimer(record, "write"):
            self._write_frame(state)
        return state

    def _load(self, t: int) -> FrameSet:
        paths = {v: self.config.resolve(
            self.config.frame_pattern.format(t=t, view=v)) for v in self.views}
        return load_frame_set(paths, t, list(self.cameras.values()))

    def _sparse(self, frame_set: FrameSet
                ) -> tuple[dict[int, list[Feature]], list[SparsePoint]]:
        c = self.config
        features = {v: self.detector.detect(frame_set.image(v), view=v)
                    for v in self.views}
        tracks = build_tracks(features, self.cameras, c.match_ratio,
                              c.epipolar_tolerance)
        points = triangulate_tracks(tracks, features, self.cameras,
                                    c.max_reproj_error)
        return features, points

    # --- первый кадр ----------------------------------------------------

    def _full_frame(self, state: FrameState, record: FrameRecord) -> None:
        c = self.config
        with StageTimer(record, "clustering") as timer:
            X = state.positions
            if len(X) == 0:
                raise DegenerateInputError("no sparse points triangulated")
            result = cluster_points(X, c.cluster_radius, c.min_cluster_size)
            diag = float(np.linalg.norm(np.ptp(X, axis=0)))
            background = [result.unclustered]
            for cluster in result.clusters:
                extent = float(np.linalg.norm(np.ptp(X[cluster.members],
                                                     axis=0)))
                if extent > c.max_object_extent * diag:
                    background.append(cluster.members)
                    continue
                label = self.next_label
                self.next_label += 1
                state.objects[label] = ObjectState(label, cluster.members)
            bg = np.concatenate(background)
            if len(bg):
                state.background = background_proxy(X[bg])
            else:
                logger.warning("frame %d: no background points", state.frame)
            timer.count(new_objects=len(state.objects))

        with StageTimer(record, "dense_init"):
            for label, obj in state.objects.items():
                obj.model = coarse_model(label, X[obj.members],
                                         X[obj.members], self.cameras,
                                         c.voxel_size, c.near_far_margin)
        self._reconstruct(state, state.objects, record, prev=None)

    # --- следующие кадры ------------------------------------------------

    def _track(self, state: FrameState, prev: FrameState,
               record: FrameRecord):
        c = self.config
        with StageTimer(record, "tracking") as timer:
            h, w = self.cameras[self.views[0]].shape
            matches = temporal_match(prev.features, state.features, (h, w),
                                     self.cameras, c.temporal_search_frac,
                                     c.match_ratio, c.epipolar_tolerance)
            consistent = [m for m in matches
                          if consistency_check(m, c.epsilon_consistency)]
            if self.dump_debug:
                write_matches_csv(self.out / "debug" /
                                  f"matches_t{state.frame:03d}.csv",
                                  matches, c.epsilon_consistency)
            pairs = match_sparse_points(prev.points, state.points, consistent)
            dynamic, static = [], []
            if pairs:
                flow_points = net_motion(prev.positions, state.positions,
                                         pairs)
                labels = classify_dynamic(
                    flow_points, c.percentile_trim, c.median_window,
                    threshold_factor=c.dynamic_threshold_factor,
                    scene_diag=float(np.linalg.norm(
                        np.ptp(state.positions, axis=0))))
                for fp, is_dyn in zip(flow_points, labels.dynamic):
                    (dynamic if is_dyn else static).append(fp.index_t1)
            timer.count(dynamic_points=len(dynamic))
            logger.info("frame %d: %d matches, %d consistent, %d tracked "
                        "points", state.frame, len(matches), len(consistent),
                        len(pairs))
        return consistent, pairs, np.array(sorted(dynamic), dtype=np.int64), \
            np.array(sorted(static), dtype=np.int64)

    def _assign_objects(self, state: FrameState, prev: FrameState,
                        pairs, dynamic: np.ndarray, static: np.ndarray,
                        record: FrameRecord) -> None:
        """
        Кластеризует все точки кадра. Объектом становится кластер с
        динамическими точками или кластер, не пересекающийся с
        отслеживаемыми объектами, большинство точек которого не
        отслежено (появившийся объект). Остальные объекты прошлого
        кадра переносятся как статические.
        """
        c = self.config
        forward = dict(pairs)
        inherited = {label: {forward[int(i)] for i in obj.members
                             if int(i) in forward}
                     for label, obj in prev.objects.items()}
        tracked = set(forward.values())
        owned = set().union(*inherited.values()) if inherited else set()
        dynamic_set = set(int(i) for i in dynamic)
        X = state.positions
        clusters: list[ObjectCluster] = []
        if len(X):
            diag = float(np.linalg.norm(np.ptp(X, axis=0)))
            for cluster in cluster_points(X, c.cluster_radius,
                                          c.min_cluster_size).clusters:
                members = set(int(i) for i in cluster.members)
                extent = float(np.linalg.norm(np.ptp(X[cluster.members],
                                                     axis=0)))
                if extent > c.max_object_extent * diag:
                    continue
                appeared = (not members & owned
                            and 2 * len(members - tracked) > len(members))
                if members & dynamic_set or appeared:
                    clusters.append(cluster)
        assignment, new_labels = detect_new_objects(clusters, inherited,
                                                    self.next_label)
        if new_labels:
            self.next_label = max(new_labels) + 1
        record.counters["new_objects"] += len(new_labels)
        dynamic_labels = {}
        for n, label in assignment.items():
            members = clusters[n].members
            dyn = sorted(dynamic_set & (set(int(i) for i in members)
                                        | inherited.get(label, set())))
            dynamic_labels[label] = update_new_parts(members, dyn, static)
        for label, prev_obj in prev.objects.items():
            if label in dynamic_labels:
                continue
            state.objects[label] = ObjectState(
                label, np.array(sorted(inherited[label]), dtype=np.int64),
                dynamic=False, model=prev_obj.model,
                mesh=_copy_mesh(prev_obj.mesh, state.frame),
                dense=prev_obj.dense)
        for label, members in sorted(dynamic_labels.items()):
            state.objects[label] = ObjectState(label, members)
        state.objects = dict(sorted(state.objects.items()))

    def _flows(self, state: FrameState, prev: FrameState, consistent,
               labels: Iterable[int], record: FrameRecord) -> None:
        c = self.config
        labels = list(labels)
        with StageTimer(record, "flow"):
            for v in self.views:
                mask = None
                if v in prev.masks:
                    moving = np.isin(prev.masks[v], labels)
                    if moving.any():
                        mask = ndimage.binary_dilation(
                            moving, iterations=c.region_margin)
                seeds = [(m.p, m.u_tv) for m in consistent if m.view == v]
                state.flows[v] = optical_flow(
                    prev.frame_set.image(v), state.frame_set.image(v), mask,
                    seeds, c.flow_levels, c.flow_window, c.flow_iterations,
                    c.flow_fb_threshold)
                if self.dump_debug:
                    write_raster(self.out / "debug" /
                                 f"flow_t{state.frame:03d}_cam{v}.raster",
                                 state.flows[v].flow)

    def _reuse(self, state: FrameState, prev: FrameState,
               record: FrameRecord) -> None:
        logger.warning("frame %d: no dynamic regions, reusing frame %d",
                       state.frame, prev.frame)
        record.counters["reused"] = 1
        state.background = prev.background
        for label, obj in prev.objects.items():
            state.objects[label] = ObjectState(
                label, np.zeros(0, dtype=np.int64), dynamic=False,
                model=obj.model, mesh=_copy_mesh(obj.mesh, state.frame),
                dense=obj.dense)
        state.masks = {v: m.copy() for v, m in prev.masks.items()}
        state.depths = {v: d.copy() for v, d in prev.depths.items()}
        record.counters["static_objects"] += len(state.objects)

    def _dynamic_frame(self, state: FrameState, prev: FrameState,
                       record: FrameRecord) -> None:
        c = self.config
        consistent, pairs, dynamic, static = self._track(state, prev, record)
        state.background = prev.background
        with StageTimer(record, "objects"):
            self._assign_objects(state, prev, pairs, dynamic, static, record)
        moving = [label for label, obj in state.objects.items()
                  if obj.dynamic]
        if not moving:
            state.objects = {}
            self._reuse(state, prev, record)
            return
        self._flows(state, prev, consistent, moving, record)

        X = state.positions
        dynamic_set = set(int(i) for i in dynamic)
        with StageTimer(record, "dense_init") as timer:
            for label in moving:
                obj = state.objects[label]
                pts = X[obj.members]
                prev_obj = prev.objects.get(label)
                if prev_obj is not None and prev_obj.dense is not None:
                    carried = propagate_dense(prev_obj.dense, state.flows)
                    dense_pts = triangulate_dense(carried, self.cameras)
                    timer.count(dense_points=len(dense_pts))
                    pts = np.vstack([pts, dense_pts])
                star = X[[i for i in obj.members if int(i) in dynamic_set]]
                if len(star) == 0:
                    # появившийся неподвижный объект
                    star = X[obj.members]
                obj.model = coarse_model(label, pts, star, self.cameras,
                                         c.voxel_size, c.near_far_margin)
        # статические объекты сохраняют прошлую сегментацию и глубину
        for v in self.views:
            base = prev.masks.get(v)
            if base is None:
                continue
            keep = ~np.isin(base, moving)
            state.masks[v] = np.where(keep, base, 0).astype(np.int64)
            state.depths[v] = np.where(keep, prev.depths[v], np.nan)
        record.counters["static_objects"] += sum(
            not obj.dynamic for obj in state.objects.values())
        self._reconstruct(state, {label: state.objects[label]
                                  for label in moving}, record, prev)

    # --- оптимизация и слияние ------------------------------------------

    def _aux_views(self, v: int) -> list[int]:
        n = len(self.views)
        pos = self.views.index(v)
        out = []
        for step in (1, -1, 2, -2):
            u = self.views[(pos + step) % n]
            if u != v and u not in out:
                out.append(u)
        return out

    def _initial_labels(self, terms: EnergyTerms,
                        spaces: dict[int, DepthLabelSpace | None],
                        models: dict[int, CoarseObjectModel],
                        v: int) -> np.ndarray:
        """Грубая модель как начальная разметка; ближняя глубина побеждает."""
        index = {(lab.layer, lab.depth_index): a
                 for a, lab in enumerate(terms.labels)}
        init = np.full(terms.n_pixels, index[(0, -1)], dtype=np.int64)
        best = np.full(terms.n_pixels, np.inf)
        for label, model in sorted(models.items()):
            inside = model.masks[v].ravel()[terms.pixels]
            depth = model.depths[v].ravel()[terms.pixels]
            key = np.where(np.isfinite(depth), depth, 1e300)
            take = inside & (key < best)
            idx = spaces[label].snap(depth[take])
            init[take] = index[(label, 0)] + idx
            best[take] = key[take]
        return init

    def _optimize_view(self, state: FrameState, v: int,
                       models: dict[int, CoarseObjectModel]
                       ) -> tuple[np.ndarray, np.ndarray] | None:
        c = self.config
        cam = self.cameras[v]
        image = state.frame_set.image(v)
        models = {label: m for label, m in models.items()
                  if v in m.near and m.masks[v].any()}
        if not models:
            return None
        coarse = np.zeros(cam.shape, dtype=bool)
        for m in models.values():
            coarse |= m.masks[v]
        region = ndimage.binary_dilation(coarse, iterations=c.region_margin)

        spaces: dict[int, DepthLabelSpace | None] = {0: None}
        centers, forests = {}, {}
        for label, m in models.items():
            spaces[label] = DepthLabelSpace(m.near[v], m.far[v],
                                            c.depth_samples)
            centers[label] = (m.star_centers[v] if len(m.star_centers[v])
                              else _interior_center(m.masks[v]))
            forests[label] = build_forest(image, centers[label],
                                          c.geodesic_gamma, mask=region)
        markers = marker_masks(cam.shape, centers, coarse,
                               stride=c.background_stride)
        colors = fit_color_models(image, markers, c.gmm_components,
                                  c.uniform_weight, seed=c.seed)
        aux = [(self.cameras[u], state.frame_set.image(u))
               for u in self._aux_views(v)]
        terms = build_terms(region, cam, image, aux, spaces, colors,
                            self.photo, self.weights, c.contrast_epsilon,
                            c.dmax_factor)
        init = self._initial_labels(terms, spaces, models, v)
        result = optimize(terms, init, forests, c.max_sweeps,
                          c.convergence_tolerance)
        write_trace(self.out / "traces" /
                    f"energy_{state.frame:03d}_{v}.csv", result.trace)
        if self.dump_debug:
            debug = self.out / "debug"
            for label, forest in forests.items():
                write_forest(debug / f"forest_t{state.frame:03d}_cam{v}"
                                     f"_obj{label}.raster", forest)
            for name, raster in term_rasters(result.labeling.labels,
                                             terms).items():
                write_raster(debug / f"energy_t{state.frame:03d}_cam{v}"
                                     f"_{name}.raster", raster)
        return (result.labeling.layer_raster(fill=-1),
                result.labeling.depth_raster())

    def _reconstruct(self, state: FrameState, objects: dict[int, ObjectState],
                     record: FrameRecord, prev: FrameState | None) -> None:
        c = self.config
        models = {label: obj.model for label, obj in objects.items()
                  if obj.model is not None}
        with StageTimer(record, "optimize") as timer:
            for v in self.views:
                cam = self.cameras[v]
                state.masks.setdefault(v, np.zeros(cam.shape, dtype=np.int64))
                state.depths.setdefault(v, np.full(cam.shape, np.nan))
                solved = self._optimize_view(state, v, models)
                if solved is None:
                    continue
                layer, depth = solved
                for label in models:
                    sel = layer == label
                    state.masks[v][sel] = label
                    state.depths[v][sel] = depth[sel]
            timer.count(optimized_objects=len(models))

        with StageTimer(record, "fusion") as timer:
            flows = {v: f.flow for v, f in state.flows.items()}
            for label, obj in objects.items():
                masks = {v: state.masks[v] == label for v in self.views}
                depths = {v: np.where(masks[v], state.depths[v], np.nan)
                          for v in self.views}
                try:
                    mesh = fuse_depth_maps(depths, masks, self.cameras,
                                           c.voxel_size, label, state.frame,
                                           stride=c.dense_stride)
                except DegenerateInputError as e:
                    logger.warning("object %d, frame %d: fusion failed (%s)",
                                   label, state.frame, e)
                    mesh = None
                prev_mesh = (prev.objects[label].mesh
                             if prev is not None and label in prev.objects
                             else None)
                if mesh is not None:
                    if prev_mesh is not None and flows:
                        mesh.vids, self.next_vid = carry_correspondence(
                            prev_mesh, mesh, self.cameras, flows,
                            self.next_vid, c.correspondence_radius,
                            depth_tolerance=2.0 * c.voxel_size)
                    else:
                        mesh.vids = self.next_vid + np.arange(mesh.n_vertices)
                        self.next_vid += mesh.n_vertices
                    timer.count(vertices=mesh.n_vertices)
                obj.mesh = mesh if mesh is not None else _copy_mesh(
                    prev_mesh, state.frame)
                obj.dense = dense_from_depth(label, depths, masks,
                                             self.cameras, c.dense_stride)

    def _write_frame(self, state: FrameState) -> None:
        t = state.frame
        for v in self.views:
            if v not in state.masks:
                continue
            write_mask(self.out / "masks" / f"mask_t{t:03d}_cam{v}.pgm",
                       state.masks[v])
            write_depth(self.out / "depths" / f"depth_t{t:03d}_cam{v}.raster",
                        state.depths[v])
        meshes = {label: obj.mesh for label, obj in state.objects.items()
                  if obj.mesh is not None}
        scene = assemble_scene(state.background, meshes, t)
        self.manifest += write_scene(self.out / "meshes", scene)


def parse_frame_range(text: str) -> range:
    """`a..b` включительно или одиночный номер кадра."""
    try:
        if ".." in text:
            a, b = (int(s) for s in text.split("..", 1))
        else:
            a = b = int(text)
    except ValueError:
        raise ValueError(f"bad frame range {text!r}, expected a..b") from None
    if a < 0 or b < a:
        raise ValueError(f"bad frame range {text!r}")
    return range(a, b + 1)


def run(config: PipelineConfig, out_dir: str | Path,
        frames: Iterable[int] | None = None,
        dump_debug: bool = False) -> RunReport:
    """
    Обрабатывает кадры и пишет маски, глубины, сетки, manifest.csv,
    трассы энергии и frames.csv в out_dir.
    """
    pipeline = Pipeline(config, out_dir, dump_debug)
    return pipeline.run(frames)
