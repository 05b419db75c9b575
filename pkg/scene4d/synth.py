"""Синтетические многовидовые последовательности с точной разметкой."""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from scene4d.config import parse_key_values
from scene4d.errors import ConfigError
from scene4d.scene_io import (CameraView, write_calibration, write_csv,
                              write_depth, write_image, write_mask,
                              write_raster)

logger = logging.getLogger(__name__)

SKY_COLOR = np.array([0.55, 0.6, 0.65])
_PALETTES = [
    (np.array([0.85, 0.25, 0.15]), np.array([0.95, 0.85, 0.2])),
    (np.array([0.15, 0.35, 0.9]), np.array([0.3, 0.9, 0.8])),
    (np.array([0.6, 0.2, 0.7]), np.array([0.95, 0.6, 0.9])),
    (np.array([0.2, 0.7, 0.25]), np.array([0.9, 0.95, 0.5])),
]
_GROUND = (np.array([0.25, 0.22, 0.18]), np.array([0.75, 0.72, 0.6]))
_WALL = (np.array([0.3, 0.3, 0.45]), np.array([0.8, 0.75, 0.7]))


@dataclass(frozen=True)
class SceneObject:
    """
    Args:
        kind: "sphere" или "box"
        center: центр на кадре 0
        size: радиус сферы или полуразмеры бокса (3)
        velocity: смещение за кадр
        texture_scale: размер клетки текстуры
    """

    kind: str
    center: tuple[float, float, float]
    size: tuple[float, ...]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    texture_scale: float = 0.1

    def center_at(self, t: int) -> np.ndarray:
        return np.asarray(self.center) + t * np.asarray(self.velocity)

    @property
    def dynamic(self) -> bool:
        return bool(np.any(np.asarray(self.velocity) != 0))


@dataclass(frozen=True)
class SceneSpec:
    n_cameras: int = 8
    ring_radius: float = 4.0
    camera_height: float = 1.5
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.6)
    focal: float = 300.0
    width: int = 320
    height: int = 240
    frames: int = 5
    noise: float = 0.0
    seed: int = 0
    ground_extent: float = 8.0
    ground_scale: float = 0.25
    wall_y: float | None = 7.0
    objects: tuple[SceneObject, ...] = field(default_factory=lambda: (
        SceneObject("sphere", (0.0, 0.0, 0.9), (0.5,), (0.15, 0.0, 0.0)),))

    def validate(self) -> "SceneSpec":
        if self.n_cameras < 2:
            raise ConfigError("scene needs at least 2 cameras")
        if self.frames < 1:
            raise ConfigError("scene needs at least 1 frame")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("image size must be positive")
        for obj in self.objects:
            if obj.kind not in ("sphere", "box"):
                raise ConfigError(f"unknown object kind '{obj.kind}'")
        return self


@dataclass(eq=False)
class SynthScene:
    """
    Результат рендера: камеры, кадры и точная разметка.

    Списки индексируются кадром, словари - id камеры.
    flows[t] - поток t -> t+1 (для последнего кадра нулевой).
    """

    spec: SceneSpec
    cameras: list[CameraView]
    images: list[dict[int, np.ndarray]]
    masks: list[dict[int, np.ndarray]]
    depths: list[dict[int, np.ndarray]]
    flows: list[dict[int, np.ndarray]]
    dynamic: dict[int, bool]


def look_at_camera(cam_id: int, position: np.ndarray, target: np.ndarray,
                   focal: float, width: int, height: int) -> CameraView:
    """Камера в position, смотрящая на target; ось z мира вверх."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.vstack([right, down, forward])
    K = np.array([[focal, 0.0, width / 2.0],
                  [0.0, focal, height / 2.0],
                  [0.0, 0.0, 1.0]])
    return CameraView(cam_id, K, R, -R @ position, width, height)


def camera_ring(spec: SceneSpec) -> list[CameraView]:
    cams = []
    for i in range(spec.n_cameras):
        theta = 2.0 * np.pi * i / spec.n_cameras
        pos = np.array([spec.ring_radius * np.cos(theta),
                        spec.ring_radius * np.sin(theta),
                        spec.camera_height])
        cams.append(look_at_camera(i, pos, np.asarray(spec.look_at),
                                   spec.focal, spec.width, spec.height))
    return cams


# --- пересечения ------------------------------------------------------------

def intersect_sphere(origin: np.ndarray, rays: np.ndarray,
                     center: np.ndarray, radius: float) -> np.ndarray:
    """Параметр s первого пересечения (inf при промахе)."""
    oc = origin - center
    a = np.sum(rays * rays, axis=1)
    b = 2.0 * rays @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4.0 * a * c
    s = np.full(len(rays), np.inf)
    hit = disc >= 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    near = (-b - root) / (2.0 * a)
    ok = hit & (near > 0)
    s[ok] = near[ok]
    return s


def intersect_box(origin: np.ndarray, rays: np.ndarray, center: np.ndarray,
                  half: np.ndarray) -> np.ndarray:
    lo, hi = center - half, center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / rays
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    s = np.full(len(rays), np.inf)
    ok = (tmax >= tmin) & (tmin > 0)
    s[ok] = tmin[ok]
    return s


def _intersect_plane(origin: np.ndarray, rays: np.ndarray, axis: int,
                     value: float) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (value - origin[axis]) / rays[:, axis]
    return np.where(np.isfinite(s) & (s > 0), s, np.inf)


def _cell_noise(p: np.ndarray, scale: float) -> tuple[np.ndarray, np.ndarray]:
    cell = np.floor(p / scale)
    h = np.sin(cell @ np.array([12.9898, 78.233, 37.719])) * 43758.5453
    checker = np.mod(cell.sum(axis=1), 2.0)
    return h - np.floor(h), checker


def texture(p: np.ndarray, scale: float,
            palette: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Процедурная текстура: клетки со случайным оттенком и синусы."""
    noise, checker = _cell_noise(p, scale)
    fine, _ = _cell_noise(p, scale / 3.0)
    waves = np.sin(p @ (np.array([1.7, 2.3, 3.1]) * 2 * np.pi / scale))
    base = palette[0] * (1.0 - noise[:, None]) + palette[1] * noise[:, None]
    shade = 0.55 + 0.3 * checker + 0.1 * waves + 0.1 * (fine - 0.5)
    return np.clip(base * shade[:, None], 0.0, 1.0)


# --- рендер -----------------------------------------------------------------

def _trace(cam: CameraView, spec: SceneSpec, t: int
           ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Глубина, метка, мировая точка и цвет для каждого пикселя."""
    rays = cam.pixel_rays().reshape(-1, 3)
    origin = cam.center
    hits = [_intersect_plane(origin, rays, 2, 0.0)]
    ground_pts = origin + hits[0][:, None] * rays
    with np.errstate(invalid="ignore"):
        outside = np.any(np.abs(ground_pts[:, :2]) > spec.ground_extent,
                         axis=1)
    hits[0][outside] = np.inf
    labels = [0]
    if spec.wall_y is not None:
        hits.append(_intersect_plane(origin, rays, 1, spec.wall_y))
        labels.append(0)
    for k, obj in enumerate(spec.objects, start=1):
        c = obj.center_at(t)
        if obj.kind == "sphere":
            hits.append(intersect_sphere(origin, rays, c, obj.size[0]))
        else:
            half = np.broadcast_to(np.asarray(obj.size, dtype=np.float64), 3)
            hits.append(intersect_box(origin, rays, c, half))
        labels.append(k)
    stack = np.vstack(hits)
    which = np.argmin(stack, axis=0)
    depth = stack[which, np.arange(len(rays))]
    label = np.asarray(labels)[which]
    hit = np.isfinite(depth)
    label[~hit] = 0
    points = origin + np.where(hit, depth, 0.0)[:, None] * rays

    color = np.tile(SKY_COLOR, (len(rays), 1))
    ground = hit & (which == 0)
    color[ground] = texture(points[ground], spec.ground_scale, _GROUND)
    if spec.wall_y is not None:
        wall = hit & (which == 1)
        color[wall] = texture(points[wall], spec.ground_scale, _WALL)
    first_obj = 2 if spec.wall_y is not None else 1
    for k, obj in enumerate(spec.objects):
        sel = hit & (which == first_obj + k)
        local = points[sel] - obj.center_at(t)
        color[sel] = texture(local, obj.texture_scale,
                             _PALETTES[k % len(_PALETTES)])
    depth = np.where(hit, depth, np.nan)
    return depth, label, points, color


def synth_scene(spec: SceneSpec) -> SynthScene:
    """
    Рендерит все кадры всех камер.

    Глубина - z-глубина камеры (NaN, где луч ничего не задел).
    Поток t -> t+1 берётся из движения попавшей точки: объект
    смещается на velocity, фон неподвижен.
    """
    spec.validate()
    cameras = camera_ring(spec)
    rng = np.random.default_rng(spec.seed)
    images, masks, depths, flows = [], [], [], []
    for t in range(spec.frames):
        img_t, mask_t, depth_t, flow_t = {}, {}, {}, {}
        for cam in cameras:
            h, w = cam.shape
            depth, label, points, color = _trace(cam, spec, t)
            if spec.noise > 0:
                color = color + rng.normal(0.0, spec.noise, color.shape)
            img_t[cam.id] = np.round(np.clip(color, 0, 1) * 255).astype(
                np.uint8).reshape(h, w, 3)
            mask_t[cam.id] = label.astype(np.uint8).reshape(h, w)
            depth_t[cam.id] = depth.reshape(h, w)
            motion = np.zeros_like(points)
            if t + 1 < spec.frames:
                for k, obj in enumerate(spec.objects, start=1):
                    motion[label == k] = np.asarray(obj.velocity)
            ys, xs = np.mgrid[0:h, 0:w]
            pix = np.column_stack([xs.ravel(), ys.ravel()]).astype(float)
            moved, _ = cam.project(points + motion)
            flow = np.where(np.isfinite(depth)[:, None], moved - pix, 0.0)
            flow[np.all(motion == 0, axis=1)] = 0.0
            flow_t[cam.id] = flow.reshape(h, w, 2)
        images.append(img_t)
        masks.append(mask_t)
        depths.append(depth_t)
        flows.append(flow_t)
    dynamic = {k: obj.dynamic for k, obj in enumerate(spec.objects, start=1)}
    logger.info("synth: %d cameras, %d frames, %d objects", len(cameras),
                spec.frames, len(spec.objects))
    return SynthScene(spec, cameras, images, masks, depths, flows, dynamic)


# --- файл описания сцены ----------------------------------------------------

_FLOAT_KEYS = {"ring_radius", "camera_height", "focal", "noise",
               "ground_extent", "ground_scale"}
_INT_KEYS = {"n_cameras", "width", "height", "frames", "seed"}


def _floats(raw: str, count: int, what: str, line: int) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in raw.split())
    except ValueError:
        raise ConfigError(f"bad {what}: {raw!r}", line=line) from None
    if len(values) != count:
        raise ConfigError(f"{what} needs {count} numbers", line=line)
    return values


def parse_scene_spec(text: str) -> SceneSpec:
    """
    Строки `key = value`; объекты - повторяемые строки
    `object = sphere cx cy cz r vx vy vz` или
    `object = box cx cy cz hx hy hz vx vy vz`.
    """
    objects = []
    rest = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0]
        key, _, value = body.partition("=")
        if key.strip() == "object":
            parts = value.split()
            if not parts:
                raise ConfigError("empty object line", line=lineno)
            kind = parts[0]
            if kind == "sphere":
                v = _floats(" ".join(parts[1:]), 7, "sphere", lineno)
                objects.append(SceneObject("sphere", v[0:3], (v[3],), v[4:7]))
            elif kind == "box":
                v = _floats(" ".join(parts[1:]), 9, "box", lineno)
                objects.append(SceneObject("box", v[0:3], v[3:6], v[6:9]))
            else:
                raise ConfigError(f"unknown object kind '{kind}'",
                                  line=lineno)
            rest.append("")
        else:
            rest.append(line)
    values = {}
    for key, (raw, lineno) in parse_key_values("\n".join(rest)).items():
        if key in _FLOAT_KEYS:
            values[key] = _floats(raw, 1, key, lineno)[0]
        elif key in _INT_KEYS:
            try:
                values[key] = int(raw)
            except ValueError:
                raise ConfigError(f"bad value for '{key}'",
                                  line=lineno) from None
        elif key == "look_at":
            values[key] = _floats(raw, 3, key, lineno)
        elif key == "wall_y":
            values[key] = None if raw.lower() == "none" else _floats(
                raw, 1, key, lineno)[0]
        else:
            raise ConfigError(f"unknown key '{key}'", line=lineno)
    if objects:
        values["objects"] = tuple(objects)
    return SceneSpec(**values).validate()


def load_scene_spec(path: str | Path) -> SceneSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read scene spec {path}: {e}") from e
    return parse_scene_spec(text)


def write_synth(out_dir: str | Path, scene: SynthScene) -> Path:
    """
    Пишет калибровку, кадры, разметку и готовый config.txt для `run`.

    Returns:
        путь к config.txt
    """
    out = Path(out_dir)
    write_calibration(out / "calibration.txt", scene.cameras)
    for t, frame in enumerate(scene.images):
        for v, img in frame.items():
            write_image(out / "frames" / f"t{t:03d}_cam{v}.ppm", img)
            write_mask(out / "gt" / f"mask_t{t:03d}_cam{v}.pgm",
                       scene.masks[t][v])
            write_depth(out / "gt" / f"depth_t{t:03d}_cam{v}.raster",
                        scene.depths[t][v])
            write_raster(out / "gt" / f"flow_t{t:03d}_cam{v}.raster",
                         scene.flows[t][v])
    write_csv(out / "gt" / "motion.csv", ("object", "vx", "vy", "vz",
                                          "dynamic"),
              [(k, *obj.velocity, int(obj.dynamic))
               for k, obj in enumerate(scene.spec.objects, start=1)])
    config = out / "config.txt"
    config.write_text(
        "calibration = calibration.txt\n"
        "frame_pattern = frames/t{t:03d}_cam{view}.ppm\n"
        f"num_frames = {scene.spec.frames}\n"
        f"seed = {scene.spec.seed}\n", encoding="utf-8")
    logger.info("synthetic scene written to %s", out)
    return config
