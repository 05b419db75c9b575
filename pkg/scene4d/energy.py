"""Члены совместной энергии сегментации и глубины, цветовые модели."""

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp
from scipy.stats import multivariate_normal
from sklearn.cluster import KMeans

from scene4d.config import PipelineConfig
from scene4d.scene_io import CameraView, to_float_rgb, to_gray

logger = logging.getLogger(__name__)

COVARIANCE_PRIOR = 1e-4
UNIFORM_DENSITY = 1.0  # единичный куб RGB


@dataclass(frozen=True, eq=False)
class DepthLabelSpace:
    """
    Числовые глубины, равномерно от near до far, плюс метка U.

    Args:
        near: ближняя граница (z-глубина)
        far: дальняя граница
        n_depths: число числовых глубин, |D| - 1
    """

    near: float
    far: float
    n_depths: int = 127
    values: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not (np.isfinite(self.near) and np.isfinite(self.far)):
            raise ValueError("depth bounds must be finite")
        if not 0 < self.near < self.far:
            raise ValueError(
                f"need 0 < near < far, got near={self.near} far={self.far}")
        if self.n_depths < 2:
            raise ValueError("at least two numeric depths required")
        values = np.linspace(self.near, self.far, self.n_depths)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def step(self) -> float:
        return (self.far - self.near) / (self.n_depths - 1)

    @property
    def unknown_index(self) -> int:
        return self.n_depths

    def __len__(self) -> int:
        return self.n_depths + 1

    def depth(self, index: int) -> float:
        return np.nan if index == self.unknown_index else float(
            self.values[index])

    def snap(self, depth: np.ndarray) -> np.ndarray:
        """Индексы ближайших отсчётов; NaN становится U."""
        depth = np.asarray(depth, dtype=np.float64)
        idx = np.rint((depth - self.near) / self.step)
        idx = np.clip(np.nan_to_num(idx, nan=0.0), 0, self.n_depths - 1)
        return np.where(np.isnan(depth), self.unknown_index,
                        idx.astype(np.int64))


@dataclass(frozen=True)
class EnergyWeights:
    lambda_data: float = 0.4
    lambda_contrast: float = 3.0
    lambda_smooth: float = 0.001
    lambda_color: float = 0.6

    def __post_init__(self) -> None:
        for name in ("lambda_data", "lambda_contrast", "lambda_smooth",
                     "lambda_color"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "EnergyWeights":
        return cls(config.lambda_data, config.lambda_contrast,
                   config.lambda_smooth, config.lambda_color)


@dataclass(frozen=True)
class PhotoParams:
    """
    Args:
        k: сколько самых фотосогласованных видов суммировать
        unknown_cost: стоимость метки U
        window: сторона окна сравнения, пиксели (нечётная)
    """

    k: int = 3
    unknown_cost: float = 1.5
    window: int = 5

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.unknown_cost < 0:
            raise ValueError("unknown cost must be non-negative")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be a positive odd number")

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "PhotoParams":
        return cls(config.k_photoconsistent, config.photo_unknown_cost,
                   config.patch_window)


@dataclass(frozen=True)
class JointLabel:
    """Совместная метка: слой и индекс глубины (-1 и NaN для U)."""

    layer: int
    depth_index: int
    depth: float

    @property
    def is_unknown(self) -> bool:
        return bool(np.isnan(self.depth))


def joint_labels(spaces: Mapping[int, DepthLabelSpace | None]
                 ) -> list[JointLabel]:
    """
    Слои по возрастанию id, внутри слоя глубины по возрастанию и затем U.
    Слой без пространства глубин получает только U.
    """
    labels = []
    for layer in sorted(spaces):
        space = spaces[layer]
        if space is not None:
            labels += [JointLabel(layer, i, float(d))
                       for i, d in enumerate(space.values)]
        labels.append(JointLabel(layer, -1, np.nan))
    return labels


# --- фотосогласованность ---------------------------------------------------

def ncc_cost(a: np.ndarray, b: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """
    (1 - NCC) / 2 по последней оси. Постоянные окна: 0, если оба
    постоянны и равны, иначе 0.5.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a0 = a - a.mean(axis=-1, keepdims=True)
    b0 = b - b.mean(axis=-1, keepdims=True)
    na = np.linalg.norm(a0, axis=-1)
    nb = np.linalg.norm(b0, axis=-1)
    flat_a, flat_b = na < eps, nb < eps
    with np.errstate(divide="ignore", invalid="ignore"):
        ncc = np.sum(a0 * b0, axis=-1) / (na * nb)
    cost = np.clip((1.0 - ncc) / 2.0, 0.0, 1.0)
    equal = np.all(np.abs(a - b) < eps, axis=-1)
    cost = np.where(flat_a | flat_b, 0.5, cost)
    return np.where(flat_a & flat_b & equal, 0.0, cost)


def patch_dissimilarity(patch_a: np.ndarray, patch_b: np.ndarray) -> float:
    """m(p, q) для двух окон одинаковой формы."""
    patch_a = np.asarray(patch_a, dtype=np.float64)
    patch_b = np.asarray(patch_b, dtype=np.float64)
    if patch_a.shape != patch_b.shape:
        raise ValueError("patch shapes differ")
    return float(ncc_cost(patch_a.ravel(), patch_b.ravel()))


def _window_offsets(window: int) -> np.ndarray:
    half = window // 2
    dy, dx = np.mgrid[-half:half + 1, -half:half + 1]
    return np.column_stack([dx.ravel(), dy.ravel()]).astype(np.float64)


def _sample_patches(gray: np.ndarray, pix: np.ndarray,
                    offsets: np.ndarray) -> np.ndarray:
    xs = pix[:, None, 0] + offsets[None, :, 0]
    ys = pix[:, None, 1] + offsets[None, :, 1]
    vals = ndimage.map_coordinates(gray, [ys.ravel(), xs.ravel()], order=1,
                                   mode="nearest")
    return vals.reshape(xs.shape)


def data_cost_volume(ref_cam: CameraView, ref_image: np.ndarray,
                     aux: Sequence[tuple[CameraView, np.ndarray]],
                     pixels: np.ndarray, depths: np.ndarray,
                     params: PhotoParams) -> np.ndarray:
    """
    E_data для всех пикселей и числовых глубин.

    Гипотеза глубины поднимает пиксель на луч, точка проецируется в
    каждый вспомогательный вид, окна сравниваются по m(p, q);
    суммируются k наименьших. Проекция вне вида или за камерой
    стоит 1, недостающие виды добивают сумму единицами.

    Args:
        ref_cam: опорная камера
        ref_image: опорное изображение
        aux: пары (камера, изображение) вспомогательных видов
        pixels: (N, 2) пиксели (x, y)
        depths: (nD,) z-глубины
        params: PhotoParams

    Returns:
        (N, nD)
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    depths = np.asarray(depths, dtype=np.float64).ravel()
    offsets = _window_offsets(params.window)
    half = params.window // 2
    ref_patches = _sample_patches(to_gray(ref_image), pixels, offsets)
    aux_gray = [(cam, to_gray(img)) for cam, img in aux]
    out = np.empty((len(pixels), len(depths)))
    for n, d in enumerate(depths):
        X = ref_cam.backproject(pixels, d)
        costs = np.ones((len(pixels), max(len(aux_gray), params.k)))
        for v, (cam, gray) in enumerate(aux_gray):
            q, z = cam.project(X)
            valid = (z > 0) & cam.in_image(q, margin=half)
            if not np.any(valid):
                continue
            patches = _sample_patches(gray, q[valid], offsets)
            costs[valid, v] = ncc_cost(ref_patches[valid], patches)
        costs.sort(axis=1)
        out[:, n] = costs[:, :params.k].sum(axis=1)
    return out


def e_data(pixel, depth: float | None, ref_cam: CameraView,
           ref_image: np.ndarray, aux: Sequence[tuple[CameraView, np.ndarray]],
           params: PhotoParams) -> float:
    """E_data одного пикселя; глубина None или NaN означает U."""
    if depth is None or np.isnan(depth):
        return params.unknown_cost
    return float(data_cost_volume(ref_cam, ref_image, aux,
                                  np.asarray(pixel, dtype=np.float64),
                                  np.array([depth]), params)[0, 0])


# --- контраст и гладкость ----------------------------------------------------

def neighbor_pairs(mask: np.ndarray) -> np.ndarray:
    """Неупорядоченные 8-соседние пары внутри маски, плоские индексы (E, 2)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    idx = np.arange(h * w).reshape(h, w)
    pairs = []
    for dr, dc in ((0, 1), (1, -1), (1, 0), (1, 1)):
        r0, r1 = 0, h - dr
        c0, c1 = max(0, -dc), w - max(0, dc)
        a = idx[r0:r1, c0:c1]
        b = idx[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        keep = mask[r0:r1, c0:c1] & mask[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        pairs.append(np.column_stack([a[keep], b[keep]]))
    return np.vstack(pairs) if pairs else np.zeros((0, 2), dtype=np.int64)


def contrast_beta(colors_p: np.ndarray, colors_q: np.ndarray) -> float:
    """Средний квадрат разности соседних цветов; 1.0 для плоского изображения."""
    if len(colors_p) == 0:
        return 1.0
    beta = float(np.mean(np.sum((colors_p - colors_q) ** 2, axis=-1)))
    return beta if beta > 0 else 1.0


def contrast_weight(color_p: np.ndarray, color_q: np.ndarray, beta: float,
                    epsilon: float) -> np.ndarray:
    """(eps + exp(-C)) / (1 + eps), C = |I_p - I_q|^2 / (2 beta)."""
    C = np.sum((np.asarray(color_p) - np.asarray(color_q)) ** 2,
               axis=-1) / (2.0 * beta)
    return (epsilon + np.exp(-C)) / (1.0 + epsilon)


def e_contrast(l_p: int, l_q: int, color_p: np.ndarray, color_q: np.ndarray,
               beta: float, epsilon: float = 1e-2) -> float:
    if l_p == l_q:
        return 0.0
    return float(contrast_weight(color_p, color_q, beta, epsilon))


def smooth_cost(l_p, d_p, l_q, d_q, d_max: float) -> np.ndarray:
    """Векторная форма e_smooth; глубина NaN означает U."""
    d_p = np.asarray(d_p, dtype=np.float64)
    d_q = np.asarray(d_q, dtype=np.float64)
    same = np.asarray(l_p) == np.asarray(l_q)
    u_p, u_q = np.isnan(d_p), np.isnan(d_q)
    with np.errstate(invalid="ignore"):
        numeric = np.minimum(np.abs(d_p - d_q), d_max)
    cost = np.where(u_p | u_q, d_max, numeric)
    cost = np.where(u_p & u_q, 0.0, cost)
    return np.where(same, cost, d_max)


def e_smooth(l_p: int, d_p: float | None, l_q: int, d_q: float | None,
             d_max: float) -> float:
    d_p = np.nan if d_p is None else d_p
    d_q = np.nan if d_q is None else d_q
    return float(smooth_cost(l_p, d_p, l_q, d_q, d_max))


# --- цветовые модели --------------------------------------------------------

class ColorModel:
    """
    Смесь гауссиан с полными ковариациями по RGB, смешанная с
    равномерной плотностью на единичном кубе с весом uniform_weight.

    Args:
        weights: веса компонент, в сумме 1 - uniform_weight
        means: (K, 3)
        covariances: (K, 3, 3)
        uniform_weight: вес равномерной составляющей
    """

    def __init__(self, weights: np.ndarray, means: np.ndarray,
                 covariances: np.ndarray, uniform_weight: float) -> None:
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        self.covariances = np.asarray(covariances,
                                      dtype=np.float64).reshape(-1, 3, 3)
        self.uniform_weight = float(uniform_weight)
        self.history: list[float] = []

    @classmethod
    def uniform(cls) -> "ColorModel":
        return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3, 3)), 1.0)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def _component_logs(self, colors: np.ndarray) -> np.ndarray:
        logs = [np.log(self.uniform_weight * UNIFORM_DENSITY)
                * np.ones(len(colors)) if self.uniform_weight > 0
                else np.full(len(colors), -np.inf)]
        for w, mu, cov in zip(self.weights, self.means, self.covariances):
            with np.errstate(divide="ignore"):
                logs.append(np.log(w) + multivariate_normal.logpdf(
                    colors, mean=mu, cov=cov, allow_singular=False))
        return np.column_stack(logs)

    def log_density(self, colors: np.ndarray) -> np.ndarray:
        colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        return logsumexp(self._component_logs(colors), axis=1)

    def cost(self, colors: np.ndarray) -> np.ndarray:
        """-log P(I | l)."""
        return -self.log_density(colors)

    def objective(self, colors: np.ndarray) -> float:
        """Лог-правдоподобие со штрафом за след обратных ковариаций."""
        penalty = sum(0.5 * COVARIANCE_PRIOR * np.trace(np.linalg.inv(c))
                      for c in self.covariances)
        return float(self.log_density(colors).sum() - penalty)

    @classmethod
    def fit(cls, colors: np.ndarray, n_components: int = 5,
            uniform_weight: float = 0.1, seed: int = 0, max_iter: int = 100,
            tol: float = 1e-8) -> "ColorModel":
        """
        EM с инициализацией KMeans. Компонент не больше n // 3;
        без выборки получается чисто равномерная модель.
        """
        colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        n = len(colors)
        if n == 0:
            logger.warning("color model: empty marker set, "
                           "using uniform-only model")
            return cls.uniform()
        k = max(1, min(n_components, n // 3))
        if k < n_components:
            logger.debug("color model: %d samples, components reduced "
                         "to %d", n, k)
        labels = KMeans(n_clusters=k, n_init=3,
                        random_state=seed).fit_predict(colors)
        resp = np.eye(k)[labels]
        model = cls(np.full(k, (1.0 - uniform_weight) / k),
                    np.zeros((k, 3)), np.tile(np.eye(3), (k, 1, 1)),
                    uniform_weight)
        model._m_step(colors, resp)
        model.history.append(model.objective(colors))
        for _ in range(max_iter):
            logs = model._component_logs(colors)
            post = np.exp(logs - logsumexp(logs, axis=1, keepdims=True))
            model._m_step(colors, post[:, 1:])
            model.history.append(model.objective(colors))
            if model.history[-1] - model.history[-2] <= \
                    tol * max(1.0, abs(model.history[-2])):
                break
        return model

    def _m_step(self, colors: np.ndarray, resp: np.ndarray) -> None:
        nk = resp.sum(axis=0)
        total = nk.sum()
        for j in range(resp.shape[1]):
            if nk[j] < 1e-10:
                continue
            mu = resp[:, j] @ colors / nk[j]
            diff = colors - mu
            scatter = (resp[:, j, None] * diff).T @ diff
            self.means[j] = mu
            self.covariances[j] = (scatter + COVARIANCE_PRIOR * np.eye(3)) \
                / nk[j]
        if total > 0:
            self.weights = (1.0 - self.uniform_weight) * nk / total


def e_color(colors: np.ndarray, model: ColorModel) -> np.ndarray:
    """-log P(I_p | l_p) для массива цветов (N, 3)."""
    return model.cost(colors)


def marker_masks(shape: tuple[int, int], star_centers: Mapping[int, np.ndarray],
                 coarse_mask: np.ndarray, background_layer: int = 0,
                 marker_radius: int = 1, stride: int = 4
                 ) -> dict[int, np.ndarray]:
    """
    Маркеры: звёздные центры слоя (с окрестностью marker_radius внутри
    грубой маски) и фон вне грубой маски с шагом stride.
    """
    coarse_mask = np.asarray(coarse_mask, dtype=bool)
    out = {}
    for layer, centers in star_centers.items():
        m = np.zeros(shape, dtype=bool)
        centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
        m[centers[:, 0], centers[:, 1]] = True
        if marker_radius > 0:
            m = ndimage.binary_dilation(
                m, iterations=marker_radius) & coarse_mask
            m[centers[:, 0], centers[:, 1]] = True
        out[layer] = m
    bg = ~ndimage.binary_dilation(coarse_mask, iterations=2)
    grid = np.zeros(shape, dtype=bool)
    grid[::stride, ::stride] = True
    out[background_layer] = bg & grid
    return out


def fit_color_models(image: np.ndarray, markers: Mapping[int, np.ndarray],
                     n_components: int = 5, uniform_weight: float = 0.1,
                     seed: int = 0) -> dict[int, ColorModel]:
    """По модели на слой из пикселей маркеров."""
    rgb = to_float_rgb(image)
    models = {}
    for layer in sorted(markers):
        samples = rgb[np.asarray(markers[layer], dtype=bool)]
        if len(samples) == 0:
            logger.warning("layer %d: no color markers", layer)
        models[layer] = ColorModel.fit(samples, n_components, uniform_weight,
                                       seed=seed)
    return models


# --- табулированная энергия -------------------------------------------------

@dataclass(eq=False)
class EnergyTerms:
    """
    Табличная энергия над областью из N пикселей.

    Args:
        shape: (H, W) растра вида
        pixels: плоские индексы пикселей области (N,)
        labels: совместные метки
        layers: id слоёв в порядке столбцов color
        data: E_data (N, n_labels), для U равна M_U
        color: E_color (N, n_layers)
        edges: соседние пары индексов области (E, 2)
        contrast: веса (eps + exp(-C)) / (1 + eps) по рёбрам (E,)
        d_max: порог усечения гладкости
        weights: EnergyWeights
        allowed: допустимость метки в пикселе (N, n_labels)
    """

    shape: tuple[int, int]
    pixels: np.ndarray
    labels: list[JointLabel]
    layers: tuple[int, ...]
    data: np.ndarray
    color: np.ndarray
    edges: np.ndarray
    contrast: np.ndarray
    d_max: float
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    allowed: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.int64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.contrast = np.asarray(self.contrast, dtype=np.float64)
        n, n_labels = len(self.pixels), len(self.labels)
        if self.data.shape != (n, n_labels):
            raise ValueError(f"data table must be {(n, n_labels)}, "
                             f"got {self.data.shape}")
        if self.color.shape != (n, len(self.layers)):
            raise ValueError("color table does not match layers")
        if len(self.contrast) != len(self.edges):
            raise ValueError("one contrast weight per edge required")
        if self.allowed is None:
            self.allowed = np.ones((n, n_labels), dtype=bool)
        column = {layer: i for i, layer in enumerate(self.layers)}
        self.label_layer = np.array([lab.layer for lab in self.labels])
        self.label_column = np.array([column[lab.layer]
                                      for lab in self.labels])
        self.label_depth = np.array([lab.depth for lab in self.labels])

    @property
    def n_pixels(self) -> int:
        return len(self.pixels)

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    def index_of(self, layer: int, depth_index: int = -1) -> int:
        for a, lab in enumerate(self.labels):
            if lab.layer == layer and lab.depth_index == depth_index:
                return a
        raise KeyError(f"no label ({layer}, {depth_index})")

    def unary(self, a: int, weights: EnergyWeights | None = None
              ) -> np.ndarray:
        w = weights or self.weights
        cost = (w.lambda_data * self.data[:, a]
                + w.lambda_color * self.color[:, self.label_column[a]])
        return np.where(self.allowed[:, a], cost, np.inf)

    def unary_of(self, labels: np.ndarray,
                 weights: EnergyWeights | None = None) -> np.ndarray:
        w = weights or self.weights
        rows = np.arange(self.n_pixels)
        cost = (w.lambda_data * self.data[rows, labels]
                + w.lambda_color * self.color[rows, self.label_column[labels]])
        return np.where(self.allowed[rows, labels], cost, np.inf)

    def pairwise(self, la: np.ndarray, lb: np.ndarray,
                 edge_ids: np.ndarray | None = None,
                 weights: EnergyWeights | None = None) -> np.ndarray:
        """Парная стоимость по рёбрам edge_ids (все рёбра, если None)."""
        w = weights or self.weights
        contrast = self.contrast if edge_ids is None \
            else self.contrast[edge_ids]
        layer_a, layer_b = self.label_layer[la], self.label_layer[lb]
        smooth = smooth_cost(layer_a, self.label_depth[la], layer_b,
                             self.label_depth[lb], self.d_max)
        return (w.lambda_contrast * contrast * (layer_a != layer_b)
                + w.lambda_smooth * smooth)


def term_breakdown(labels: np.ndarray, terms: EnergyTerms,
                   weights: EnergyWeights | None = None) -> dict[str, float]:
    """Взвешенные члены энергии по отдельности."""
    w = weights or terms.weights
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(terms.n_pixels)
    la, lb = labels[terms.edges[:, 0]], labels[terms.edges[:, 1]]
    layer_a, layer_b = terms.label_layer[la], terms.label_layer[lb]
    smooth = smooth_cost(layer_a, terms.label_depth[la], layer_b,
                         terms.label_depth[lb], terms.d_max)
    data = terms.data[rows, labels]
    color = terms.color[rows, terms.label_column[labels]]
    forbidden = not np.all(terms.allowed[rows, labels])
    return {
        "data": np.inf if forbidden else w.lambda_data * float(data.sum()),
        "contrast": w.lambda_contrast * float(
            np.sum(terms.contrast * (layer_a != layer_b))),
        "smooth": w.lambda_smooth * float(smooth.sum()),
        "color": w.lambda_color * float(color.sum()),
    }


def total_energy(labels: np.ndarray, terms: EnergyTerms,
                 weights: EnergyWeights | None = None) -> float:
    """E(l, d) = сумма взвешенных членов."""
    return float(sum(term_breakdown(labels, terms, weights).values()))


def term_rasters(labels: np.ndarray, terms: EnergyTerms
                 ) -> dict[str, np.ndarray]:
    """Попиксельные взвешенные члены; парные делятся поровну между концами."""
    w = terms.weights
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(terms.n_pixels)
    la, lb = labels[terms.edges[:, 0]], labels[terms.edges[:, 1]]
    layer_a, layer_b = terms.label_layer[la], terms.label_layer[lb]
    per_edge = {
        "contrast": w.lambda_contrast * terms.contrast * (layer_a != layer_b),
        "smooth": w.lambda_smooth * smooth_cost(
            layer_a, terms.label_depth[la], layer_b, terms.label_depth[lb],
            terms.d_max),
    }
    per_pixel = {
        "data": w.lambda_data * terms.data[rows, labels],
        "color": w.lambda_color * terms.color[rows,
                                              terms.label_column[labels]],
    }
    for name, vals in per_edge.items():
        acc = np.zeros(terms.n_pixels)
        np.add.at(acc, terms.edges[:, 0], vals / 2)
        np.add.at(acc, terms.edges[:, 1], vals / 2)
        per_pixel[name] = acc
    out = {}
    for name, vals in per_pixel.items():
        raster = np.zeros(terms.shape)
        raster.flat[terms.pixels] = vals
        out[name] = raster
    return out


def build_terms(region: np.ndarray, ref_cam: CameraView,
                ref_image: np.ndarray,
                aux: Sequence[tuple[CameraView, np.ndarray]],
                spaces: Mapping[int, DepthLabelSpace | None],
                color_models: Mapping[int, ColorModel], params: PhotoParams,
                weights: EnergyWeights, contrast_epsilon: float = 1e-2,
                dmax_factor: float = 50.0,
                allowed_layers: Mapping[int, np.ndarray] | None = None
                ) -> EnergyTerms:
    """
    Табулирует все члены энергии над областью одного вида.

    d_max берётся по наибольшему шагу глубины среди слоёв.

    Args:
        region: маска области (H, W)
        ref_cam: опорная камера
        ref_image: опорное изображение
        aux: вспомогательные виды
        spaces: слой -> пространство глубин (None: только U)
        color_models: слой -> ColorModel
        params: PhotoParams
        weights: EnergyWeights
        allowed_layers: слой -> маска пикселей, где слой допустим

    Returns:
        EnergyTerms
    """
    region = np.asarray(region, dtype=bool)
    pixels = np.flatnonzero(region)
    rows, cols = np.unravel_index(pixels, region.shape)
    xy = np.column_stack([cols, rows]).astype(np.float64)
    labels = joint_labels(spaces)
    layers = tuple(sorted(spaces))

    columns = []
    for layer in layers:
        space = spaces[layer]
        if space is not None:
            columns.append(data_cost_volume(ref_cam, ref_image, aux, xy,
                                            space.values, params))
        columns.append(np.full((len(pixels), 1), params.unknown_cost))
    data = np.hstack(columns) if columns else np.zeros((len(pixels), 0))

    rgb = to_float_rgb(ref_image).reshape(-1, 3)[pixels]
    color = np.column_stack([color_models[layer].cost(rgb)
                             for layer in layers])

    local = np.full(region.size, -1, dtype=np.int64)
    local[pixels] = np.arange(len(pixels))
    pairs = neighbor_pairs(region)
    edges = local[pairs]
    flat_rgb = to_float_rgb(ref_image).reshape(-1, 3)
    cp, cq = flat_rgb[pairs[:, 0]], flat_rgb[pairs[:, 1]]
    beta = contrast_beta(cp, cq)
    contrast = contrast_weight(cp, cq, beta, contrast_epsilon)

    steps = [s.step for s in spaces.values() if s is not None]
    d_max = dmax_factor * max(steps) if steps else 1.0

    allowed = np.ones((len(pixels), len(labels)), dtype=bool)
    if allowed_layers is not None:
        for a, lab in enumerate(labels):
            if lab.layer in allowed_layers:
                allowed[:, a] = np.asarray(
                    allowed_layers[lab.layer], dtype=bool).ravel()[pixels]
    return EnergyTerms(shape=region.shape, pixels=pixels, labels=labels,
                       layers=layers, data=data, color=color, edges=edges,
                       contrast=contrast, d_max=d_max, weights=weights,
                       allowed=allowed)
