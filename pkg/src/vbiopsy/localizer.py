"""Coarse-to-fine tumour localisation.

Block 1 stacks per-slice boxes into an occupancy grid, dilates it with an L1
ball and smooths it with a separable Gaussian to get the coarse prior.
Block 2 trains a small voxel MLP on confident prior voxels and ORs its
prediction with the binarised prior.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from vbiopsy import kernels
from vbiopsy import tensor as T
from vbiopsy.volume import Mask, PriorMap, Volume, axial_slices

log = logging.getLogger(__name__)

# dilation runs before smoothing: dilation restores coverage, smoothing then
# removes the stair-step edges of stacked boxes
SMOOTH_ORDER = ("dilate", "gaussian")


class LocalizationFailure(RuntimeError):
    pass


class RefineDivergence(RuntimeError):
    pass


@dataclass
class PriorConfig:
    gaussian_sigma: float = 2.0
    dilation_radius: int = 2
    tau_pos: float = 0.7
    tau_neg: float = 0.1
    tau_bin: float = 0.5
    mlp_hidden: int = 16
    mlp_epochs: int = 300
    mlp_lr: float = 0.5
    neg_sample_ratio: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau_neg < self.tau_bin <= self.tau_pos < 1.0:
            raise ValueError("thresholds must satisfy 0 < tau_neg < tau_bin <= tau_pos < 1")
        if self.gaussian_sigma <= 0:
            raise ValueError("gaussian_sigma must be > 0")
        if self.dilation_radius < 0:
            raise ValueError("dilation_radius must be >= 0")
        if self.mlp_hidden < 1 or self.mlp_epochs < 0 or self.neg_sample_ratio <= 0:
            raise ValueError("bad refine-MLP settings")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# Block 1
# ---------------------------------------------------------------------------

def stack_boxes(preds, dims):
    """Binary occupancy: voxel (d, i, j) is 1 iff a box on slice d covers (i, j)."""
    d, h, w = dims
    occ = np.zeros(dims, dtype=np.float32)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    for p in preds:
        if not 0 <= p.slice_index < d:
            raise IndexError(f"slice_index {p.slice_index} outside [0, {d})")
        x0, y0, x1, y1 = p.box
        inside = (rows >= y0) & (rows < y1) & (cols >= x0) & (cols < x1)
        occ[p.slice_index][inside] = 1.0
    return Volume(occ)


def gaussian_taps(sigma):
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    return taps / taps.sum()


def gaussian_blur3d(a, sigma):
    taps = gaussian_taps(sigma)
    out = np.asarray(a, dtype=np.float64)
    for axis in range(3):
        out = kernels.filter_axis(out, taps, axis)
    return out


def smooth_unnormalized(occ, cfg: PriorConfig):
    """Dilate then blur, without the final max rescale."""
    grid = occ.data if isinstance(occ, Volume) else np.asarray(occ)
    dil = kernels.dilate_l1(grid, cfg.dilation_radius)
    return gaussian_blur3d(dil, cfg.gaussian_sigma)


def smooth_and_dilate(occ, cfg: PriorConfig) -> PriorMap:
    s = smooth_unnormalized(occ, cfg)
    s = np.clip(s, 0.0, None)
    peak = s.max()
    if peak > 0:
        s = np.clip(s / peak, 0.0, 1.0)
    return PriorMap(s)


# ---------------------------------------------------------------------------
# Block 2
# ---------------------------------------------------------------------------

def extract_pseudo_labels(prior: PriorMap, cfg: PriorConfig, seed=None):
    """Flat indices of positive and negative voxels."""
    vals = prior.values.ravel()
    pos = np.flatnonzero(vals > cfg.tau_pos)
    if pos.size == 0:
        raise LocalizationFailure(f"no prior value above tau_pos={cfg.tau_pos} (max {vals.max():.3f})")
    pool = np.flatnonzero(vals < cfg.tau_neg)
    n_neg = min(pool.size, int(round(cfg.neg_sample_ratio * pos.size)))
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 1])
    neg = np.sort(rng.choice(pool, size=n_neg, replace=False)) if n_neg else pool[:0]
    return pos, neg


FEATURE_NAMES = ("intensity", "local_mean_3", "local_std_3", "d_norm", "i_norm", "j_norm")


def voxel_features(v: Volume):
    """Per-voxel feature rows in raster order, shape (D*H*W, 6)."""
    x = v.data.astype(np.float64)
    taps = np.full(3, 1.0 / 3.0)
    m1, m2 = x, x * x
    for axis in range(3):
        m1 = kernels.filter_axis(m1, taps, axis)
        m2 = kernels.filter_axis(m2, taps, axis)
    std = np.sqrt(np.clip(m2 - m1 * m1, 0.0, None))
    d, h, w = v.dims
    g = np.indices(v.dims, dtype=np.float64)
    coords = [g[0] / d, g[1] / h, g[2] / w]
    return np.stack([x, m1, std] + coords, axis=-1).reshape(-1, 6)


@dataclass
class RefineModel:
    params: dict
    feat_mean: np.ndarray
    feat_std: np.ndarray
    losses: list = field(default_factory=list)

    def logits(self, feats):
        z = T.Tensor((feats - self.feat_mean) / self.feat_std)
        return mlp_forward(z, self.params)

    def predict_proba(self, feats):
        return T._sigmoid(self.logits(feats).data.reshape(-1))


def init_mlp(n_in, n_hidden, rng):
    return {
        "w1": T.Tensor(rng.normal(size=(n_hidden, n_in)) * math.sqrt(2.0 / n_in), requires_grad=True),
        "b1": T.Tensor(np.zeros(n_hidden), requires_grad=True),
        "w2": T.Tensor(rng.normal(size=(1, n_hidden)) * math.sqrt(1.0 / n_hidden), requires_grad=True),
        "b2": T.Tensor(np.zeros(1), requires_grad=True),
    }


def mlp_forward(x, params):
    h = T.relu(T.linear(x, params["w1"], params["b1"]))
    return T.linear(h, params["w2"], params["b2"])


def mlp_loss(x, y, params):
    return T.bce_with_logits(mlp_forward(x, params), y)


def train_refine_mlp(volume: Volume, labels, cfg: PriorConfig, feats=None, seed=None) -> RefineModel:
    """Full-batch gradient descent on BCE over the labelled voxels."""
    pos, neg = labels
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("both positive and negative label sets must be non-empty")
    if feats is None:
        feats = voxel_features(volume)
    idx = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])[:, None]
    raw = feats[idx]
    mu = raw.mean(axis=0)
    sd = raw.std(axis=0)
    sd[sd < 1e-8] = 1.0
    x = T.Tensor((raw - mu) / sd)
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 2])
    params = init_mlp(raw.shape[1], cfg.mlp_hidden, rng)
    losses = []
    for _ in range(cfg.mlp_epochs):
        loss = mlp_loss(x, y, params)
        if not np.isfinite(loss.data):
            raise RefineDivergence(f"refine MLP loss became {loss.data}; config={cfg.to_dict()}")
        losses.append(float(loss.data))
        loss.backward()
        for p in params.values():
            p.data -= cfg.mlp_lr * p.grad
            p.zero_grad()
    final = float(mlp_loss(x, y, params).data)
    if not np.isfinite(final):
        raise RefineDivergence(f"refine MLP loss became {final}; config={cfg.to_dict()}")
    losses.append(final)
    return RefineModel(params, mu, sd, losses)


def refine(prior: PriorMap, model, volume: Volume, cfg: PriorConfig, feats=None) -> Mask:
    """Union of the binarised prior and the MLP's voxel-wise prediction."""
    coarse = prior.values > cfg.tau_bin
    if model is None:
        return Mask(coarse)
    if feats is None:
        feats = voxel_features(volume)
    pred = model.predict_proba(feats).reshape(volume.dims) >= 0.5
    return Mask(coarse | pred)


@dataclass
class Localization:
    prior: PriorMap
    refined: Mask
    fallback: bool = False
    n_boxes: int = 0
    note: str = ""

    def __iter__(self):
        return iter((self.prior, self.refined))


def slice_pixels(v: Volume):
    return axial_slices(v).slices


def collect_boxes(v: Volume, predictor):
    preds = []
    for d, px in enumerate(slice_pixels(v)):
        for p in predictor(px, d):
            if p.slice_index != d:
                raise ValueError(f"predictor returned slice_index {p.slice_index} for slice {d}")
            preds.append(p)
    preds.sort(key=lambda p: p.slice_index)
    return preds


def localize_case(volume: Volume, predictor, cfg: PriorConfig, brain_mask=None, seed=None) -> Localization:
    """Slices -> boxes -> coarse prior -> pseudo-labels -> MLP -> refined mask.

    If the prior has no confident voxel the refined mask falls back to
    ``brain_mask`` (or all non-zero voxels when none is given).
    """
    preds = collect_boxes(volume, predictor)
    prior = smooth_and_dilate(stack_boxes(preds, volume.dims), cfg)
    try:
        labels = extract_pseudo_labels(prior, cfg, seed)
    except LocalizationFailure as exc:
        log.info("localization fallback: %s", exc)
        fb = brain_mask if brain_mask is not None else Mask(volume.data != 0)
        return Localization(prior, fb, True, len(preds), str(exc))
    feats = voxel_features(volume)
    model = train_refine_mlp(volume, labels, cfg, feats=feats, seed=seed)
    return Localization(prior, refine(prior, model, volume, cfg, feats), False, len(preds))


def recall(pred: Mask, gt: Mask):
    g = gt.as_bool()
    n = g.sum()
    return float((pred.as_bool() & g).sum() / n) if n else 1.0


def iou(a: Mask, b: Mask):
    x, y = a.as_bool(), b.as_bool()
    union = (x | y).sum()
    return float((x & y).sum() / union) if union else 1.0
