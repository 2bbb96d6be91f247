"""Reference stand-ins for skull stripping, bias correction and registration.

``preprocess_pipeline`` chains them in the fixed order
register(bias_correct(brain_extract(x))).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from itertools import product

import numpy as np

from vbiopsy.kernels import label6
from vbiopsy.volume import Mask, Volume

log = logging.getLogger(__name__)

STAGES = ("brain_extract", "bias_correct", "register_to_template")
BBOX_FILL = 0.8


class PreprocessError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class PreprocessConfig:
    brain_threshold_quantile: float = 0.5
    bias_poly_degree: int = 2
    template_dims: tuple = (32, 32, 32)

    def __post_init__(self):
        self.template_dims = tuple(int(d) for d in self.template_dims)
        if not 0.0 < self.brain_threshold_quantile < 1.0:
            raise ValueError("brain_threshold_quantile must be in (0, 1)")
        if self.bias_poly_degree < 0:
            raise ValueError("bias_poly_degree must be >= 0")
        if len(self.template_dims) != 3 or min(self.template_dims) <= 0:
            raise ValueError(f"template_dims must be three positive ints, got {self.template_dims}")

    def to_dict(self):
        d = asdict(self)
        d["template_dims"] = list(self.template_dims)
        return d


def brain_extract(v: Volume, cfg: PreprocessConfig):
    """Largest 6-connected component of voxels at or above the quantile threshold."""
    thr = np.quantile(v.data, cfg.brain_threshold_quantile)
    above = v.data >= thr  # ties kept
    if not above.any():
        raise PreprocessError("brain_extract", "no voxel above the intensity threshold")
    labels, n = label6(above)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    keep = labels == int(np.argmax(sizes))
    return Volume(np.where(keep, v.data, 0.0), v.spacing), Mask(keep, v.spacing)


def poly_design(dims, degree, where=None):
    """Monomials z^a y^b x^c (a+b+c <= degree) on coordinates scaled to [-1, 1]."""
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in dims]
    z, y, x = np.meshgrid(*axes, indexing="ij")
    if where is not None:
        z, y, x = z[where], y[where], x[where]
    else:
        z, y, x = z.ravel(), y.ravel(), x.ravel()
    cols = [z ** a * y ** b * x ** c for a, b, c in product(range(degree + 1), repeat=3)
            if a + b + c <= degree]
    return np.stack(cols, axis=1)


def fit_log_field(v: Volume, mask: Mask, degree):
    """Least-squares polynomial fit of log intensity inside ``mask``; mean over mask is 0."""
    inside = mask.as_bool()
    vals = v.data[inside].astype(np.float64)
    if vals.size == 0:
        raise PreprocessError("bias_correct", "empty mask")
    if (vals <= 0).any():
        raise PreprocessError("bias_correct", f"{int((vals <= 0).sum())} non-positive voxels inside mask")
    a = poly_design(v.dims, degree, inside)
    if a.shape[0] < a.shape[1]:
        raise PreprocessError("bias_correct",
                              f"{a.shape[0]} mask voxels cannot fit {a.shape[1]} polynomial terms")
    coef, _, rank, _ = np.linalg.lstsq(a, np.log(vals), rcond=None)
    if rank < a.shape[1]:
        raise PreprocessError("bias_correct", f"rank-deficient design ({rank} < {a.shape[1]})")
    field_ = (poly_design(v.dims, degree) @ coef).reshape(v.dims)
    field_ -= field_[inside].mean()
    return field_


def bias_correct(v: Volume, mask: Mask, cfg: PreprocessConfig) -> Volume:
    field_ = fit_log_field(v, mask, cfg.bias_poly_degree)
    return Volume(v.data / np.exp(field_), v.spacing)


@dataclass
class TemplateTransform:
    """Output voxel p samples source coordinate centroid + (p - template_centre) / scale."""

    centroid: tuple
    scale: float
    template_dims: tuple

    def source_indices(self, src_dims):
        idx = []
        for k, (t, n) in enumerate(zip(self.template_dims, src_dims)):
            p = np.arange(t, dtype=np.float64)
            q = self.centroid[k] + (p - (t - 1) / 2.0) / self.scale
            i = np.ceil(q - 0.5).astype(np.int64)  # nearest, ties to lower index
            idx.append(np.where((i >= 0) & (i < n), i, -1))
        return idx

    def apply(self, arr, fill=0):
        arr = np.asarray(arr)
        iz, iy, ix = self.source_indices(arr.shape)
        out = arr[np.ix_(np.clip(iz, 0, None), np.clip(iy, 0, None), np.clip(ix, 0, None))].copy()
        valid = (iz[:, None, None] >= 0) & (iy[None, :, None] >= 0) & (ix[None, None, :] >= 0)
        out[~valid] = fill
        return out

    def to_dict(self):
        return {"centroid": list(self.centroid), "scale": self.scale,
                "template_dims": list(self.template_dims)}


def fit_template_transform(mask: Mask, cfg: PreprocessConfig) -> TemplateTransform:
    pts = np.argwhere(mask.bits)
    if len(pts) == 0:
        raise PreprocessError("register_to_template", "empty mask")
    centroid = tuple(float(c) for c in pts.mean(axis=0))
    if len(pts) == 1:
        scale = 1.0
    else:
        extent = pts.max(axis=0) - pts.min(axis=0) + 1
        scale = float(min(BBOX_FILL * t / e for t, e in zip(cfg.template_dims, extent)))
    return TemplateTransform(centroid, scale, cfg.template_dims)


def register_to_template(v: Volume, mask: Mask, cfg: PreprocessConfig) -> Volume:
    tf = fit_template_transform(mask, cfg)
    return Volume(tf.apply(v.data), v.spacing)


@dataclass
class PreprocessResult:
    volume: Volume
    brain_mask: Mask  # registered to the template grid
    transform: TemplateTransform
    log: list = field(default_factory=list)


def run_preprocess(x_raw: Volume, cfg: PreprocessConfig) -> PreprocessResult:
    stage_log = []

    def stage(name, fn, *args):
        try:
            out = fn(*args)
        except PreprocessError:
            raise
        except Exception as exc:  # label anything a stage raises
            raise PreprocessError(name, str(exc)) from exc
        stage_log.append(name)
        log.debug("stage %s done", name)
        return out

    stripped, brain = stage("brain_extract", brain_extract, x_raw, cfg)
    corrected = stage("bias_correct", bias_correct, stripped, brain, cfg)
    tf = stage("register_to_template", fit_template_transform, brain, cfg)
    out = Volume(tf.apply(corrected.data), x_raw.spacing)
    return PreprocessResult(out, Mask(tf.apply(brain.bits)), tf, stage_log)


def preprocess_pipeline(x_raw: Volume, cfg: PreprocessConfig) -> Volume:
    return run_preprocess(x_raw, cfg).volume
