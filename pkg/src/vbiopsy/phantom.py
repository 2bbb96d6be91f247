"""Synthetic labelled cohort: ellipsoidal brain, one spherical tumour per case.

Every case draws from its own generator seeded with ``(seed, case_index)``,
so generating cases in any order or in parallel gives identical bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from vbiopsy.volume import Mask, Volume, load_mask, load_volume, save_mask, save_volume


@dataclass(frozen=True)
class ClassSignature:
    intensity_mean: float
    intensity_std: float  # case-to-case spread of the tumour mean
    texture_frequency: float  # cycles per voxel; 0 disables the texture
    rim_strength: float
    heterogeneity: float  # per-voxel jitter std inside the tumour


DEFAULT_SIGNATURES = (
    ClassSignature(0.45, 0.02, 0.00, 0.00, 0.02),
    ClassSignature(0.65, 0.02, 0.00, 0.25, 0.02),
    ClassSignature(0.85, 0.02, 0.22, 0.00, 0.02),
    ClassSignature(1.05, 0.02, 0.00, 0.00, 0.08),
)


@dataclass
class PhantomConfig:
    n_cases: int = 200
    dims: tuple = (32, 32, 32)
    n_classes: int = 4
    class_signatures: tuple = DEFAULT_SIGNATURES
    tumor_radius_range: tuple = (4.0, 6.0)
    brain_ellipsoid_margin: float = 0.1
    noise_std: float = 0.02
    seed: int = 0
    brain_intensity: float = 0.35
    brain_texture: float = 0.04
    texture_amplitude: float = 0.15
    # optional corruption so preprocessing has something to undo
    bias_field_strength: float = 0.0
    max_offset: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.tumor_radius_range = tuple(float(r) for r in self.tumor_radius_range)
        self.class_signatures = tuple(
            s if isinstance(s, ClassSignature) else ClassSignature(**s) for s in self.class_signatures)
        self.validate()

    def validate(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if len(self.class_signatures) != self.n_classes:
            raise ValueError(f"need {self.n_classes} class signatures, got {len(self.class_signatures)}")
        if self.n_cases < self.n_classes:
            raise ValueError(f"n_cases ({self.n_cases}) must be >= n_classes ({self.n_classes})")
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if self.noise_std < 0 or any(s.intensity_std < 0 or s.heterogeneity < 0 for s in self.class_signatures):
            raise ValueError("standard deviations must be >= 0")
        if not 0.0 <= self.brain_ellipsoid_margin < 0.5:
            raise ValueError("brain_ellipsoid_margin must be in [0, 0.5)")
        lo, hi = self.tumor_radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad tumor_radius_range {self.tumor_radius_range}")
        # tumour plus any offset must fit in the brain's smallest semi-axis
        if hi + 1.0 >= min(self.semi_axes):
            raise ValueError(f"tumour radius {hi} does not fit inside brain semi-axes {self.semi_axes}")

    @property
    def semi_axes(self):
        return tuple(0.5 * n * (1.0 - 2.0 * self.brain_ellipsoid_margin) for n in self.dims)

    def to_dict(self):
        d = asdict(self)
        d["class_signatures"] = [asdict(s) for s in self.class_signatures]
        d["dims"] = list(self.dims)
        d["tumor_radius_range"] = list(self.tumor_radius_range)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class CaseRecord:
    case_id: str
    class_label: int
    volume_path: str
    gt_mask_path: str
    meta: dict = field(default_factory=dict)


@dataclass
class Manifest:
    cases: list
    k_classes: int
    generator_config_echo: dict
    root: Path = Path(".")

    def path(self, rel):
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def case(self, case_id):
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)

    def labels(self):
        return np.array([c.class_label for c in self.cases], dtype=np.int64)

    def load_case(self, c):
        return load_volume(self.path(c.volume_path)), load_mask(self.path(c.gt_mask_path))

    def to_json(self):
        doc = {
            "cases": [asdict(c) for c in self.cases],
            "k_classes": self.k_classes,
            "generator_config_echo": self.generator_config_echo,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        path = Path(path)
        doc = json.loads(path.read_text())
        cases = [CaseRecord(**c) for c in doc["cases"]]
        return cls(cases, int(doc["k_classes"]), doc.get("generator_config_echo", {}), path.parent)


def case_rng(seed, index):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)])


def balanced_labels(cfg: PhantomConfig):
    labels = np.arange(cfg.n_cases) % cfg.n_classes
    return np.random.default_rng([cfg.seed, 2**32 - 1]).permutation(labels)


def brain_mask_for(cfg: PhantomConfig):
    ctr = [(n - 1) / 2.0 for n in cfg.dims]
    g = np.indices(cfg.dims, dtype=np.float64)
    r2 = sum(((g[k] - ctr[k]) / cfg.semi_axes[k]) ** 2 for k in range(3))
    return r2 <= 1.0


def _shift(a, offset, fill=0):
    out = np.full_like(a, fill)
    src, dst = [], []
    for o, n in zip(offset, a.shape):
        src.append(slice(max(0, -o), min(n, n - o)))
        dst.append(slice(max(0, o), min(n, n + o)))
    out[tuple(dst)] = a[tuple(src)]
    return out


def _bias_field(rng, dims, strength):
    # smooth degree-2 multiplicative field, mean log 0 over the grid
    g = [np.linspace(-1, 1, n) for n in dims]
    z, y, x = np.meshgrid(*g, indexing="ij")
    terms = [z, y, x, z * y, z * x, y * x, z * z - 1 / 3, y * y - 1 / 3, x * x - 1 / 3]
    coef = rng.uniform(-1, 1, len(terms)) * strength
    log_field = sum(c * t for c, t in zip(coef, terms))
    return np.exp(log_field)


def synthesize_case(cfg: PhantomConfig, index: int, label: int):
    """Return (volume array, gt mask array, meta) for one case."""
    rng = case_rng(cfg.seed, index)
    sig = cfg.class_signatures[label]
    dims = cfg.dims
    brain = brain_mask_for(cfg)
    g = np.indices(dims, dtype=np.float64)

    # brain tissue: base level plus a gentle random low-frequency pattern
    vol = np.zeros(dims)
    tissue = np.full(dims, cfg.brain_intensity)
    for _ in range(3):
        k = rng.normal(size=3) * 0.25
        tissue += cfg.brain_texture / 3 * np.sin(sum(k[a] * g[a] for a in range(3)) + rng.uniform(0, 2 * np.pi))
    vol[brain] = tissue[brain]

    # tumour: sphere fully inside the brain
    radius = rng.uniform(*cfg.tumor_radius_range)
    ctr = np.array([(n - 1) / 2.0 for n in dims])
    reach = np.array(cfg.semi_axes) - radius - 1.0
    while True:
        u = rng.uniform(-1, 1, 3)
        if (u ** 2).sum() > 1:
            continue
        centre = ctr + u * reach
        dist = np.sqrt(sum((g[a] - centre[a]) ** 2 for a in range(3)))
        tumor = dist <= radius
        if not (tumor & ~brain).any():
            break

    mean = sig.intensity_mean + sig.intensity_std * rng.normal()
    tval = np.full(dims, mean)
    if sig.texture_frequency > 0:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        phase = rng.uniform(0, 2 * np.pi)
        proj = sum(direction[a] * g[a] for a in range(3))
        tval += cfg.texture_amplitude * np.sin(2 * np.pi * sig.texture_frequency * proj + phase)
    rim = tumor & (dist > radius - 1.5)
    tval[rim] += sig.rim_strength
    tval += sig.heterogeneity * rng.normal(size=dims)
    vol[tumor] = tval[tumor]

    vol += cfg.noise_std * rng.normal(size=dims)

    offset = (0, 0, 0)
    if cfg.max_offset > 0:
        offset = tuple(int(o) for o in rng.integers(-cfg.max_offset, cfg.max_offset + 1, 3))
        vol = _shift(vol, offset)
        tumor = _shift(tumor, offset, False)
    if cfg.bias_field_strength > 0:
        vol = vol * _bias_field(rng, dims, cfg.bias_field_strength)

    meta = {
        "tumor_radius": float(radius),
        "tumor_center": [float(c + o) for c, o in zip(centre, offset)],
        "offset": list(offset),
    }
    return vol.astype(np.float32), tumor, meta


def generate_cohort(cfg: PhantomConfig, out_dir) -> Manifest:
    out_dir = Path(out_dir)
    try:
        (out_dir / "cases").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create phantom output directory {out_dir}: {exc}") from exc
    labels = balanced_labels(cfg)
    cases = []
    for i, lab in enumerate(labels):
        vol, tumor, meta = synthesize_case(cfg, i, int(lab))
        cid = f"case_{i:04d}"
        vpath, mpath = f"cases/{cid}.vbv", f"cases/{cid}_gt.vbm"
        save_volume(Volume(vol), out_dir / vpath)
        save_mask(Mask(tumor), out_dir / mpath)
        cases.append(CaseRecord(cid, int(lab), vpath, mpath, meta))
    manifest = Manifest(cases, cfg.n_classes, cfg.to_dict(), out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


def class_separability_report(manifest: Manifest):
    """Per-class statistics over ground-truth tumour voxels.

    Returns ``{label: {"n_cases", "mean_intensity", "mean_case_std", "voxels"}}``
    where ``mean_intensity`` averages all tumour voxels of that class and
    ``mean_case_std`` averages the per-case intensity std (a texture proxy).
    """
    if not manifest.cases:
        raise ValueError("manifest has no cases")
    acc = {}
    for c in manifest.cases:
        vpath, mpath = manifest.path(c.volume_path), manifest.path(c.gt_mask_path)
        for p in (vpath, mpath):
            if not p.exists():
                raise FileNotFoundError(f"{c.case_id}: missing {p}")
        v, m = load_volume(vpath), load_mask(mpath)
        vox = v.data[m.as_bool()].astype(np.float64)
        a = acc.setdefault(c.class_label, {"sum": 0.0, "n": 0, "stds": []})
        a["sum"] += vox.sum()
        a["n"] += vox.size
        a["stds"].append(vox.std())
    report = {}
    for lab in sorted(acc):
        a = acc[lab]
        report[lab] = {
            "n_cases": len(a["stds"]),
            "voxels": a["n"],
            "mean_intensity": a["sum"] / a["n"] if a["n"] else math.nan,
            "mean_case_std": float(np.mean(a["stds"])),
        }
    return report
