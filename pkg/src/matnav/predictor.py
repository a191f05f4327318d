"""Patch-feature surrogate that maps height-map geometry to cost parameters.

A k-nearest-neighbour regressor over seven per-cell geometric features
replaces a learned image-to-image network while serving the same interface:
one pass over a height map yields a full parameter map that the planner then
queries in closed form. Feature extraction and prediction are deterministic,
and the mean-elevation feature is excluded from the distance metric by
default so predictions are invariant to constant elevation offsets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import InvalidSpecError, MapFormatError
from .matmap import DEFAULT_BOUNDS, MatMap, ParamBounds
from .terrain import HeightMap

FEATURE_NAMES = (
    "mean_elevation",
    "elevation_std",
    "max_gradient",
    "min_relative",
    "max_relative",
    "lowest_depth",
    "local_slope",
)

MODEL_VERSION = 1


@dataclass(frozen=True)
class PredictorConfig:
    patch_size: int = 9
    k: int = 5
    mask_eps: float = 1e-8
    # metric weight per feature; 0 for the mean keeps predictions invariant
    # to constant elevation offsets
    metric_weights: tuple = (0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    bounds: ParamBounds = field(default_factory=ParamBounds)

    def __post_init__(self):
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise InvalidSpecError("patch_size must be odd and >= 3")
        if self.k < 1:
            raise InvalidSpecError("k must be >= 1")
        if self.mask_eps <= 0:
            raise InvalidSpecError("mask_eps must be positive")
        if len(self.metric_weights) != len(FEATURE_NAMES):
            raise InvalidSpecError("one metric weight per feature required")


def _slope_kernels(patch_size: int, resolution: float):
    c = patch_size // 2
    offs = (np.arange(patch_size) - c) * resolution
    s2 = patch_size * float(np.sum(offs**2))
    kx = np.tile(offs, (patch_size, 1)) / s2
    ky = kx.T.copy()
    return kx, ky


def extract_feature_map(hm: HeightMap, patch_size: int) -> np.ndarray:
    """(H, W, 7) feature map; edge windows use mirror padding."""
    if patch_size < 3 or patch_size % 2 == 0:
        raise InvalidSpecError("patch_size must be odd and >= 3")
    z = hm.elevations
    p = patch_size
    mean = ndimage.uniform_filter(z, size=p, mode="mirror")
    sq = ndimage.uniform_filter(z * z, size=p, mode="mirror")
    std = np.sqrt(np.maximum(sq - mean * mean, 0.0))

    gx = ndimage.correlate1d(z, [-0.5, 0.0, 0.5], axis=1, mode="mirror") / hm.resolution
    gy = ndimage.correlate1d(z, [-0.5, 0.0, 0.5], axis=0, mode="mirror") / hm.resolution
    gmag = np.hypot(gx, gy)
    max_grad = ndimage.maximum_filter(gmag, size=p, mode="mirror")

    zmin = ndimage.minimum_filter(z, size=p, mode="mirror")
    zmax = ndimage.maximum_filter(z, size=p, mode="mirror")
    min_rel = zmin - mean
    max_rel = zmax - mean
    lowest = zmin - z

    kx, ky = _slope_kernels(p, hm.resolution)
    sx = ndimage.correlate(z, kx, mode="mirror")
    sy = ndimage.correlate(z, ky, mode="mirror")
    slope = np.arctan(np.hypot(sx, sy))

    return np.stack([mean, std, max_grad, min_rel, max_rel, lowest, slope], axis=-1)


def extract_features(hm: HeightMap, cell, patch_size: int) -> np.ndarray:
    """Feature vector of a single (col, row) cell, computed directly.

    Reference implementation of the same statistics as extract_feature_map
    (the two agree to machine precision); useful for spot checks and tests.
    """
    if patch_size < 3 or patch_size % 2 == 0:
        raise InvalidSpecError("patch_size must be odd and >= 3")
    col, row = cell
    r = patch_size // 2
    pad = r + 1  # +1 ring so window gradients match the map-wide stencil
    zp = np.pad(hm.elevations, pad, mode="reflect")
    rr, cc = row + pad, col + pad
    win1 = zp[rr - r - 1 : rr + r + 2, cc - r - 1 : cc + r + 2]  # ring-extended
    win = win1[1:-1, 1:-1]

    mean = float(np.mean(win))
    std = float(np.sqrt(np.maximum(np.mean(win * win) - mean * mean, 0.0)))
    gx = (win1[1:-1, 2:] - win1[1:-1, :-2]) / (2.0 * hm.resolution)
    gy = (win1[2:, 1:-1] - win1[:-2, 1:-1]) / (2.0 * hm.resolution)
    max_grad = float(np.max(np.hypot(gx, gy)))
    zmin, zmax = float(np.min(win)), float(np.max(win))
    kx, ky = _slope_kernels(patch_size, hm.resolution)
    sx = float(np.sum(win * kx))
    sy = float(np.sum(win * ky))
    slope = math.atan(math.hypot(sx, sy))
    return np.array([
        mean, std, max_grad, zmin - mean, zmax - mean,
        zmin - float(hm.elevations[row, col]), slope,
    ])


class SurrogateModel:
    """k-NN regressor over normalised patch features.

    Stores the training pairs; predictions average the k nearest labels per
    channel and clamp to the parameter bounds. Immutable after construction.
    """

    def __init__(self, features, labels, cfg: PredictorConfig):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != len(FEATURE_NAMES):
            raise InvalidSpecError(f"features must be (N, {len(FEATURE_NAMES)})")
        if labels.shape != (features.shape[0], 3):
            raise InvalidSpecError("labels must be (N, 3)")
        if features.shape[0] < cfg.k:
            raise InvalidSpecError(
                f"need at least k={cfg.k} training pairs, got {features.shape[0]}"
            )
        self.cfg = cfg
        self.features = features
        self.labels = labels
        self.feat_mean = features.mean(axis=0)
        self.feat_std = np.maximum(features.std(axis=0), 1e-6)
        self._scale = np.asarray(cfg.metric_weights) / self.feat_std
        self._tree = cKDTree((features - self.feat_mean) * self._scale)

    def predict(self, features) -> np.ndarray:
        """(M, 3) parameter predictions for an (M, 7) feature block."""
        q = (np.atleast_2d(np.asarray(features, dtype=np.float64)) - self.feat_mean) * self._scale
        _, idx = self._tree.query(q, k=self.cfg.k)
        idx = np.atleast_2d(idx)
        if self.cfg.k == 1:
            idx = idx.reshape(-1, 1)
        pred = self.labels[idx].mean(axis=1)
        b = self.cfg.bounds
        pred[:, 0], pred[:, 1], pred[:, 2] = b.clip(pred[:, 0], pred[:, 1], pred[:, 2])
        return pred


def train_surrogate(features, labels, cfg: PredictorConfig = PredictorConfig()) -> SurrogateModel:
    """Fit (store) the k-NN regressor; a pure function of its inputs."""
    return SurrogateModel(features, labels, cfg)


def collect_training_pairs(hm: HeightMap, mat: MatMap, mask, patch_size: int):
    """(features, labels) at every masked cell of a labelled terrain."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != mat.shape:
        raise InvalidSpecError("mask/map shape mismatch")
    fmap = extract_feature_map(hm, patch_size)
    rows, cols = np.nonzero(mask)
    features = fmap[rows, cols, :]
    labels = np.stack([mat.a[rows, cols], mat.mu[rows, cols], mat.sigma[rows, cols]], axis=1)
    return features, labels


def predict_matmap(model: SurrogateModel, hm: HeightMap) -> MatMap:
    """One prediction per cell of the height map; output satisfies the bounds."""
    fmap = extract_feature_map(hm, model.cfg.patch_size)
    h, w, _ = fmap.shape
    pred = model.predict(fmap.reshape(h * w, -1))
    return MatMap(
        pred[:, 0].reshape(h, w),
        pred[:, 1].reshape(h, w),
        pred[:, 2].reshape(h, w),
        hm.resolution,
        hm.origin,
        model.cfg.bounds,
    )


def masked_mse(pred: MatMap, label: MatMap, mask, eps: float = 1e-8) -> float:
    """Mean squared parameter error over masked cells (eps-guarded denominator)."""
    return float(np.sum(masked_mse_channels(pred, label, mask, eps)))


def masked_mse_channels(pred: MatMap, label: MatMap, mask, eps: float = 1e-8) -> np.ndarray:
    """Per-channel masked MSE: [peak, critical_velocity, sensitivity]."""
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != label.shape or mask.shape != pred.shape:
        raise InvalidSpecError("prediction, label, and mask dims must match")
    denom = float(np.sum(mask)) + eps
    out = np.empty(3)
    for i, (p, l) in enumerate(((pred.a, label.a), (pred.mu, label.mu), (pred.sigma, label.sigma))):
        d = (p - l)[mask]
        out[i] = float(np.sum(d * d)) / denom
    return out


def save_model(model: SurrogateModel, path) -> None:
    cfg = model.cfg
    b = cfg.bounds
    np.savez(
        path,
        version=np.array([MODEL_VERSION]),
        features=model.features,
        labels=model.labels,
        patch_size=np.array([cfg.patch_size]),
        k=np.array([cfg.k]),
        mask_eps=np.array([cfg.mask_eps]),
        metric_weights=np.asarray(cfg.metric_weights),
        bounds=np.array([b.a_max, b.mu_lo, b.mu_hi, b.sigma_min, b.sigma_max]),
    )


def load_model(path) -> SurrogateModel:
    with np.load(path) as data:
        try:
            version = int(data["version"][0])
            if version != MODEL_VERSION:
                raise MapFormatError(f"unsupported model version {version}", 0)
            bounds = ParamBounds(*(float(x) for x in data["bounds"]))
            cfg = PredictorConfig(
                patch_size=int(data["patch_size"][0]),
                k=int(data["k"][0]),
                mask_eps=float(data["mask_eps"][0]),
                metric_weights=tuple(float(x) for x in data["metric_weights"]),
                bounds=bounds,
            )
            return SurrogateModel(data["features"], data["labels"], cfg)
        except KeyError as e:
            raise MapFormatError(f"model file missing field {e}", 0)
