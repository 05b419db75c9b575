"""Калибровка, кадры и простые самоописывающие форматы вывода."""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from scene4d.errors import CalibrationError, FormatError

logger = logging.getLogger(__name__)

UNKNOWN_SENTINEL = -1.0
RASTER_MAGIC = b"S4DRASTER"


@dataclass(frozen=True, eq=False)
class CameraView:
    """
    Калиброванная камера-обскура: x ~ K (R X + t).

    Args:
        id: идентификатор камеры
        K: матрица внутренних параметров 3x3 (пиксели)
        R: поворот мир -> камера 3x3
        t: перенос 3-вектор (мировые единицы)
        width: ширина изображения
        height: высота изображения
    """

    id: int
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    _P: np.ndarray = field(init=False, repr=False)
    _K_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        K = np.array(self.K, dtype=np.float64).reshape(3, 3)
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        for arr in (K, R, t):
            arr.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        self._validate()
        P = K @ np.hstack([R, t[:, None]])
        P.setflags(write=False)
        object.__setattr__(self, "_P", P)
        object.__setattr__(self, "_K_inv", np.linalg.inv(K))

    def _validate(self) -> None:
        K, R = self.K, self.R
        if self.width <= 0 or self.height <= 0:
            raise CalibrationError("image size must be positive",
                                   camera_id=self.id)
        if not np.all(np.isfinite(K)) or not np.all(np.isfinite(R)) \
                or not np.all(np.isfinite(self.t)):
            raise CalibrationError("non-finite calibration entries",
                                   camera_id=self.id)
        if abs(K[1, 0]) > 1e-12 or abs(K[2, 0]) > 1e-12 \
                or abs(K[2, 1]) > 1e-12:
            raise CalibrationError("K is not upper-triangular",
                                   camera_id=self.id)
        if np.any(np.diag(K) <= 0):
            raise CalibrationError("K diagonal must be positive",
                                   camera_id=self.id)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise CalibrationError("rotation not orthonormal",
                                   camera_id=self.id)
        if np.linalg.det(R) < 0:
            raise CalibrationError("rotation not proper", camera_id=self.id)

    @property
    def P(self) -> np.ndarray:
        return self._P

    @property
    def shape(self) -> tuple[int, int]:
        """(height, width) - форма растров этой камеры."""
        return self.height, self.width

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def optical_axis(self) -> np.ndarray:
        return self.R[2].copy()

    def to_camera(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X @ self.R.T + self.t

    def project(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """
        Проецирует мировые точки.

        Args:
            X: точки (N, 3) или (3,)

        Returns:
            пиксели (N, 2) в порядке (x, y) и глубины z (N,)
        """
        Xc = np.atleast_2d(self.to_camera(X))
        z = Xc[:, 2]
        uvw = Xc @ self.K.T
        with np.errstate(divide="ignore", invalid="ignore"):
            pix = uvw[:, :2] / uvw[:, 2:3]
        return pix, z

    def depth_of(self, X: np.ndarray) -> np.ndarray:
        """z-глубина мировых точек (N,)."""
        return np.atleast_2d(self.to_camera(X))[:, 2]

    def backproject(self, pix: np.ndarray, depth) -> np.ndarray:
        """
        Поднимает пиксели (x, y) с z-глубиной в мировые координаты.
        """
        pix = np.atleast_2d(np.asarray(pix, dtype=np.float64))
        depth = np.broadcast_to(np.asarray(depth, dtype=np.float64),
                                (pix.shape[0],))
        homo = np.column_stack([pix, np.ones(len(pix))])
        rays = homo @ self._K_inv.T
        Xc = rays * depth[:, None]
        return (Xc - self.t) @ self.R

    def pixel_rays(self) -> np.ndarray:
        """Мировые направления лучей (H, W, 3), нормированные на z камеры = 1."""
        ys, xs = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        homo = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
        return (homo @ self._K_inv.T) @ self.R

    def in_image(self, pix: np.ndarray, margin: float = 0.0) -> np.ndarray:
        pix = np.atleast_2d(pix)
        x, y = pix[:, 0], pix[:, 1]
        with np.errstate(invalid="ignore"):
            return ((x >= margin) & (y >= margin)
                    & (x <= self.width - 1 - margin)
                    & (y <= self.height - 1 - margin))


def fundamental_matrix(cam_a: CameraView, cam_b: CameraView) -> np.ndarray:
    """F, для которого x_b^T F x_a = 0 при x_a в виде a и x_b в виде b."""
    R = cam_b.R @ cam_a.R.T
    t = cam_b.t - R @ cam_a.t
    tx = np.array([[0.0, -t[2], t[1]],
                   [t[2], 0.0, -t[0]],
                   [-t[1], t[0], 0.0]])
    E = tx @ R
    return np.linalg.inv(cam_b.K).T @ E @ np.linalg.inv(cam_a.K)


@dataclass(frozen=True)
class FrameSet:
    """Кадр t: по одному RGB-изображению (H, W, 3) uint8 на камеру."""

    time: int
    images: Mapping[int, np.ndarray]

    def image(self, view: int) -> np.ndarray:
        return self.images[view]


# --- калибровка -------------------------------------------------------------

def _tokens(text: str) -> list[tuple[str, int]]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0]
        out.extend((tok, lineno) for tok in line.split())
    return out


def parse_calibration(text: str) -> list[CameraView]:
    """
    Разбирает текст калибровки: блоки `camera <id> <w> <h>`,
    затем 9 чисел K, 9 чисел R и 3 числа t.

    Returns:
        list[CameraView]: камеры в порядке следования блоков
    """
    tokens = _tokens(text)
    cameras: list[CameraView] = []
    seen: set[int] = set()
    pos = 0
    last_line = tokens[-1][1] if tokens else 1
    while pos < len(tokens):
        tok, lineno = tokens[pos]
        if tok != "camera":
            raise CalibrationError(f"expected 'camera', got {tok!r}",
                                   line=lineno)
        block = tokens[pos + 1:pos + 25]
        if len(block) < 24:
            raise CalibrationError("truncated camera block", line=last_line)
        try:
            cam_id, width, height = (int(v) for v, _ in block[:3])
        except ValueError:
            bad = next(ln for v, ln in block[:3]
                       if not v.lstrip("-").isdigit())
            raise CalibrationError("camera header expects integers",
                                   line=bad) from None
        numbers = []
        for value, ln in block[3:]:
            try:
                numbers.append(float(value))
            except ValueError:
                raise CalibrationError(f"not a number: {value!r}",
                                       line=ln) from None
        if cam_id in seen:
            raise CalibrationError("duplicate camera id", line=lineno,
                                   camera_id=cam_id)
        seen.add(cam_id)
        cameras.append(CameraView(
            id=cam_id,
            K=np.array(numbers[0:9]).reshape(3, 3),
            R=np.array(numbers[9:18]).reshape(3, 3),
            t=np.array(numbers[18:21]),
            width=width,
            height=height,
        ))
        pos += 25
    if not cameras:
        raise CalibrationError("no camera blocks", line=last_line)
    return cameras


def load_calibration(path: str | Path) -> list[CameraView]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise CalibrationError(f"cannot read {path}: {e}") from e
    cameras = parse_calibration(text)
    logger.info("loaded %d cameras from %s", len(cameras), path)
    return cameras


def _fmt(value: float) -> str:
    value = float(value)
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def format_calibration(cameras: Sequence[CameraView]) -> str:
    lines = []
    for cam in cameras:
        lines.append(f"camera {cam.id} {cam.width} {cam.height}")
        for mat in (cam.K, cam.R):
            for row in mat:
                lines.append(" ".join(_fmt(v) for v in row))
        lines.append(" ".join(_fmt(v) for v in cam.t))
    return "\n".join(lines) + "\n"


def write_calibration(path: str | Path,
                      cameras: Sequence[CameraView]) -> None:
    _write_bytes(path, format_calibration(cameras).encode("utf-8"))


# --- netpbm -----------------------------------------------------------------

def _write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as e:
        raise FormatError(f"cannot write {path}: {e}") from e


def _read_bytes(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e


def _read_netpbm(path: str | Path, magic: bytes) -> np.ndarray:
    data = _read_bytes(path)
    if not data.startswith(magic):
        raise FormatError(f"{path}: expected {magic.decode()} header")
    header: list[int] = []
    pos = len(magic)
    while len(header) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        try:
            header.append(int(data[start:pos]))
        except ValueError:
            raise FormatError(f"{path}: bad header") from None
    pos += 1
    width, height, maxval = header
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit rasters are supported")
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    payload = data[pos:pos + size]
    if len(payload) != size:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape).copy()


def _write_netpbm(path: str | Path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    _write_bytes(path, header + np.ascontiguousarray(arr).tobytes())


def read_image(path: str | Path) -> np.ndarray:
    """Двоичный PPM (P6) -> массив (H, W, 3) uint8."""
    return _read_netpbm(path, b"P6")


def write_image(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise FormatError("image must be (H, W, 3) uint8")
    _write_netpbm(path, b"P6", image)


def read_mask(path: str | Path) -> np.ndarray:
    return _read_netpbm(path, b"P5")


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    """
    Пишет маску слоёв как PGM (P5): одно значение на метку слоя.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise FormatError("mask must be 2-D")
    if mask.size and (mask.min() < 0 or mask.max() > 255):
        raise FormatError("mask labels must fit in 8 bits")
    _write_netpbm(path, b"P5", mask.astype(np.uint8))


# --- растры float32 ---------------------------------------------------------

def write_raster(path: str | Path, raster: np.ndarray) -> None:
    """Растр float32 (H, W) или (H, W, C): магическая строка, размеры, LE."""
    raster = np.asarray(raster, dtype=np.float32)
    if raster.ndim == 2:
        raster = raster[:, :, None]
    if raster.ndim != 3:
        raise FormatError("raster must be 2-D or 3-D")
    h, w, c = raster.shape
    header = RASTER_MAGIC + f"\n{w} {h} {c}\n".encode("ascii")
    _write_bytes(path, header + raster.astype("<f4").tobytes())


def read_raster(path: str | Path) -> np.ndarray:
    data = _read_bytes(path)
    lines = data.split(b"\n", 2)
    if len(lines) < 3 or lines[0] != RASTER_MAGIC:
        raise FormatError(f"{path}: not a scene4d raster")
    try:
        w, h, c = (int(v) for v in lines[1].split())
    except ValueError:
        raise FormatError(f"{path}: bad raster dimensions") from None
    payload = lines[2]
    if len(payload) != w * h * c * 4:
        raise FormatError(f"{path}: raster size mismatch")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    arr = arr.astype(np.float32)
    return arr[:, :, 0] if c == 1 else arr


def write_depth(path: str | Path, depth: np.ndarray) -> None:
    """Карта глубин; U (NaN в памяти) пишется как -1.0."""
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise FormatError("depth map must be 2-D")
    out = np.where(np.isnan(depth), np.float32(UNKNOWN_SENTINEL), depth)
    write_raster(path, out)


def read_depth(path: str | Path) -> np.ndarray:
    depth = read_raster(path)
    if depth.ndim != 2:
        raise FormatError(f"{path}: depth map must have one channel")
    return np.where(depth == UNKNOWN_SENTINEL, np.nan, depth).astype(
        np.float32)


# --- сетки и облака точек ---------------------------------------------------

class MeshData(NamedTuple):
    vertices: np.ndarray
    triangles: np.ndarray
    vids: np.ndarray
    header: dict[str, str]


def write_mesh(path: str | Path, vertices: np.ndarray,
               triangles: np.ndarray, vids: np.ndarray,
               header: Mapping[str, object] | None = None) -> None:
    """
    ASCII OBJ; перед каждой вершиной строка `# vid <n>` со стабильным ID.

    Args:
        path: путь к файлу
        vertices: (N, 3)
        triangles: (M, 3), индексы с нуля
        vids: (N,) целые идентификаторы вершин
        header: пары ключ-значение, пишутся комментариями `# key value`
    """
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    vids = np.asarray(vids, dtype=np.int64).reshape(-1)
    if len(vids) != len(vertices):
        raise FormatError("one vid per vertex required")
    if triangles.size and (triangles.min() < 0
                           or triangles.max() >= len(vertices)):
        raise FormatError("triangle index out of range")
    lines = ["# scene4d mesh"]
    for key, value in (header or {}).items():
        lines.append(f"# {key} {value}")
    for vid, (x, y, z) in zip(vids, vertices):
        lines.append(f"# vid {int(vid)}")
        lines.append(f"v {repr(float(x))} {repr(float(y))} {repr(float(z))}")
    for a, b, c in triangles:
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    _write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_mesh(path: str | Path) -> MeshData:
    text = _read_bytes(path).decode("utf-8")
    vertices, triangles, vids = [], [], []
    header: dict[str, str] = {}
    pending_vid = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "#":
                if len(parts) >= 3 and parts[1] == "vid":
                    pending_vid = int(parts[2])
                elif len(parts) >= 3:
                    header[parts[1]] = " ".join(parts[2:])
            elif parts[0] == "v":
                if pending_vid is None:
                    raise FormatError(f"{path}:{lineno}: vertex without vid")
                vertices.append([float(v) for v in parts[1:4]])
                vids.append(pending_vid)
                pending_vid = None
            elif parts[0] == "f":
                triangles.append([int(v.split("/")[0]) - 1
                                  for v in parts[1:4]])
        except (ValueError, IndexError):
            raise FormatError(f"{path}:{lineno}: bad OBJ line") from None
    return MeshData(
        vertices=np.array(vertices, dtype=np.float64).reshape(-1, 3),
        triangles=np.array(triangles, dtype=np.int64).reshape(-1, 3),
        vids=np.array(vids, dtype=np.int64),
        header=header,
    )


def write_points(path: str | Path, points: np.ndarray) -> None:
    """ASCII: число точек, затем `x y z` по строке."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = [str(len(points))]
    lines += [" ".join(repr(float(v)) for v in p) for p in points]
    _write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_points(path: str | Path) -> np.ndarray:
    lines = _read_bytes(path).decode("utf-8").split("\n")
    try:
        count = int(lines[0])
        pts = [[float(v) for v in lines[i + 1].split()]
               for i in range(count)]
    except (ValueError, IndexError):
        raise FormatError(f"{path}: bad point file") from None
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def write_csv(path: str | Path, header: Sequence[str],
              rows: Iterable[Sequence[object]]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise FormatError(f"cannot write {path}: {e}") from e


# --- кадры ------------------------------------------------------------------

def load_frame_set(paths: Mapping[int, str | Path], t: int,
                   cameras: Sequence[CameraView]) -> FrameSet:
    """
    Читает по одному PPM на камеру и проверяет размеры.

    Args:
        paths: view id -> путь к изображению
        t: индекс кадра
        cameras: объявленные камеры

    Returns:
        FrameSet: неизменяемый набор изображений кадра
    """
    images = {}
    for cam in cameras:
        if cam.id not in paths:
            raise FormatError(f"frame {t}: no image for camera {cam.id}")
        img = read_image(paths[cam.id])
        if img.shape[:2] != cam.shape:
            raise FormatError(
                f"frame {t}: camera {cam.id} expects "
                f"{cam.width}x{cam.height}, got "
                f"{img.shape[1]}x{img.shape[0]}")
        img.setflags(write=False)
        images[cam.id] = img
    return FrameSet(time=t, images=images)


def to_gray(image: np.ndarray) -> np.ndarray:
    """Яркость в [0, 1] (среднее каналов для RGB)."""
    image = np.asarray(image)
    scale = 255.0 if image.dtype == np.uint8 else 1.0
    gray = image.astype(np.float64) / scale
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    return gray


def to_float_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    scale = 255.0 if image.dtype == np.uint8 else 1.0
    rgb = image.astype(np.float64) / scale
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[:, :, None], 3, axis=2)
    return rgb
