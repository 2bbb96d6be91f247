"""Cross-validation, classification metrics, the ablation runner and 3D Grad-CAM."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from vbiopsy import tensor as T
from vbiopsy.diagnoser import (
    Dataset, DiagnoserConfig, backbone_forward, head_forward, load_checkpoint, mask_to_feature_res,
    normalize_intensity, predict_batch, train,
)
from vbiopsy.volume import Mask, PriorMap, Volume

log = logging.getLogger(__name__)

AVERAGES = ("macro", "micro", "weighted")

# (row id, setting, mask source, head mode)
ABLATION_ROWS = (
    ("1", "baseline", "brain", "gap"),
    ("2", "+VLM-C", "coarse", "masked"),
    ("3", "+VLM-C+MCA", "coarse", "mca"),
    ("4", "+VLM-C+Refine", "refined", "masked"),
    ("5", "full", "refined", "mca"),
)
ABLATION_COLUMNS = ("Precision", "Recall", "F1-score", "Accuracy")


class FoldError(ValueError):
    pass


class CVFailure(RuntimeError):
    """A fold failed; ``partial`` holds the reports of folds that finished."""

    def __init__(self, fold, message, partial):
        super().__init__(f"fold {fold}: {message}")
        self.fold = fold
        self.partial = partial


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------

@dataclass
class FoldAssignment:
    fold_of: np.ndarray  # per-case fold index
    k: int = 5
    seed: int = 0
    case_ids: list = field(default_factory=list)

    def test_idx(self, f):
        return np.flatnonzero(self.fold_of == f)

    def train_idx(self, f):
        return np.flatnonzero(self.fold_of != f)

    def to_json(self):
        return json.dumps({"k": self.k, "seed": self.seed, "fold_of": [int(x) for x in self.fold_of],
                           "case_ids": list(self.case_ids)}, indent=1, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        doc = json.loads(Path(path).read_text())
        fa = cls(np.asarray(doc["fold_of"], dtype=np.int64), int(doc["k"]), int(doc["seed"]),
                 list(doc.get("case_ids", [])))
        if fa.fold_of.size and (fa.fold_of.min() < 0 or fa.fold_of.max() >= fa.k):
            raise FoldError(f"{path}: fold index outside [0, {fa.k})")
        return fa


def stratified_kfold(labels, k=5, seed=0, case_ids=None):
    """Seeded shuffle within each class, then deal cases round-robin to folds.

    ``labels`` may be a label array or a Manifest.
    """
    if hasattr(labels, "labels"):
        case_ids = [c.case_id for c in labels.cases] if case_ids is None else case_ids
        labels = labels.labels()
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise FoldError("k must be >= 2")
    fold_of = np.full(labels.size, -1, dtype=np.int64)
    rng = np.random.default_rng([int(seed), 5])
    start = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < k:
            raise FoldError(f"class {c} has {idx.size} cases, fewer than k={k}")
        idx = rng.permutation(idx)
        # rotate the starting fold per class so fold sizes stay balanced overall
        fold_of[idx] = (start + np.arange(idx.size)) % k
        start = (start + idx.size) % k
    return FoldAssignment(fold_of, k, int(seed), list(case_ids or []))


def fold_seed(seed, fold):
    return int(np.random.SeedSequence([int(seed), int(fold)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: list  # rows = true class, columns = predicted class
    per_class: dict
    average: str = "macro"
    n: int = 0

    def to_dict(self):
        return asdict(self)

    def row(self):
        return {"Precision": self.precision, "Recall": self.recall, "F1-score": self.f1, "Accuracy": self.accuracy}


def confusion_matrix(preds, labels, k):
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def compute_metrics(preds, labels, k, average="macro"):
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.size} predictions vs {labels.size} labels")
    if average not in AVERAGES:
        raise ValueError(f"average must be one of {AVERAGES}")
    for name, a in (("predictions", preds), ("labels", labels)):
        if a.size and (a.min() < 0 or a.max() >= k):
            raise ValueError(f"{name} outside [0, {k})")
    cm = confusion_matrix(preds, labels, k)
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0).astype(np.float64)
    true_pos = cm.sum(axis=1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(pred_pos > 0, tp / pred_pos, 0.0)
        rec = np.where(true_pos > 0, tp / true_pos, 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    empty = np.flatnonzero(pred_pos == 0)
    if empty.size:
        log.info("classes %s have no predicted cases; precision counted as 0", empty.tolist())
    n = int(cm.sum())
    acc = float(tp.sum() / n) if n else 0.0
    if average == "macro":
        p, r, f = prec.mean(), rec.mean(), f1.mean()
    elif average == "weighted":
        wts = true_pos / true_pos.sum() if n else np.zeros(k)
        p, r, f = (wts * prec).sum(), (wts * rec).sum(), (wts * f1).sum()
    else:
        # single-label micro averaging collapses to accuracy
        p = r = f = acc
    per_class = {str(c): {"precision": float(prec[c]), "recall": float(rec[c]), "f1": float(f1[c]),
                          "support": int(true_pos[c])} for c in range(k)}
    return MetricReport(acc, float(p), float(r), float(f), cm.tolist(), per_class, average, n)


def average_reports(reports):
    """Mean of the scalar metrics across folds; confusion matrices are summed."""
    if not reports:
        raise ValueError("no reports to average")
    cm = np.sum([np.asarray(r.confusion) for r in reports], axis=0)
    mean = {m: float(np.mean([getattr(r, m) for r in reports])) for m in ("accuracy", "precision", "recall", "f1")}
    per_class = {}
    for c in reports[0].per_class:
        per_class[c] = {m: float(np.mean([r.per_class[c][m] for r in reports])) for m in ("precision", "recall", "f1")}
        per_class[c]["support"] = int(sum(r.per_class[c]["support"] for r in reports))
    return MetricReport(mean["accuracy"], mean["precision"], mean["recall"], mean["f1"], cm.tolist(), per_class,
                        reports[0].average, int(cm.sum()))


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    report: MetricReport
    test_idx: np.ndarray
    probs: np.ndarray
    history: list
    params: dict = None


@dataclass
class CVResult:
    mean: MetricReport
    folds: list

    def to_dict(self):
        return {
            "mean": self.mean.to_dict(),
            "folds": [{"fold": f.fold, "report": f.report.to_dict(), "test_idx": f.test_idx.tolist(),
                       "final_train_loss": f.history[-1]["loss"] if f.history else None} for f in self.folds],
        }


def predict_in_chunks(params, cfg, volumes, masks, head_mode=None, chunk=32):
    out = [predict_batch(params, cfg, volumes[s:s + chunk], masks[s:s + chunk], head_mode)
           for s in range(0, len(volumes), chunk)]
    return np.concatenate(out) if out else np.zeros((0, cfg.k_classes))


def run_fold(ds: Dataset, folds: FoldAssignment, f, cfg: DiagnoserConfig, aug=None, average="macro",
             keep_params=False):
    tr, te = folds.train_idx(f), folds.test_idx(f)
    if np.intersect1d(tr, te).size:
        raise FoldError(f"fold {f}: train and test overlap")
    fcfg = replace(cfg, seed=fold_seed(cfg.seed, f))
    params, history = train(ds, tr, fcfg, aug)
    # no augmentation at evaluation time
    probs = predict_in_chunks(params, fcfg, ds.volumes[te], ds.masks[te])
    rep = compute_metrics(probs.argmax(axis=1), ds.labels[te], cfg.k_classes, average)
    log.info("fold %d: acc %.4f (%s head)", f, rep.accuracy, cfg.head_mode)
    return FoldResult(f, rep, te, probs, history, params if keep_params else None)


def _run_fold_job(args):
    return run_fold(*args)


def run_cv(ds: Dataset, folds: FoldAssignment, cfg: DiagnoserConfig, aug=None, average="macro", jobs=1,
           keep_params=False):
    """Train on each fold's complement, evaluate on the fold, average across folds."""
    if len(folds.fold_of) != len(ds.labels):
        raise FoldError(f"fold assignment covers {len(folds.fold_of)} cases, dataset has {len(ds.labels)}")
    results = []
    jobs_args = [(ds, folds, f, cfg, aug, average, keep_params) for f in range(folds.k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_fold_job, a) for a in jobs_args]
            for f, fut in enumerate(futures):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    raise CVFailure(f, exc, results) from exc
    else:
        for f, a in enumerate(jobs_args):
            try:
                results.append(run_fold(*a))
            except Exception as exc:
                raise CVFailure(f, exc, results) from exc
    return CVResult(average_reports([r.report for r in results]), results)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationTable:
    rows: list  # (row id, setting, CVResult)

    def accuracy(self, row_id):
        for rid, _, res in self.rows:
            if rid == row_id:
                return res.mean.accuracy
        raise KeyError(row_id)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("Row", "Setting") + ABLATION_COLUMNS)
        for rid, setting, res in self.rows:
            vals = res.mean.row()
            w.writerow([rid, setting] + [f"{vals[c]:.6f}" for c in ABLATION_COLUMNS])
        return buf.getvalue()

    def to_dict(self):
        return {rid: {"setting": s, **res.to_dict()} for rid, s, res in self.rows}


def run_ablation(volumes, masks, labels, folds, cfg: DiagnoserConfig, aug=None, average="macro", jobs=1,
                 rows=ABLATION_ROWS, keep_params=False, on_row=None):
    """Five CV runs differing only in mask source and head mode.

    ``masks`` maps "brain", "coarse" and "refined" to [N, D, H, W] arrays, so the
    localizer runs once and all rows share its products.
    """
    out = []
    for rid, setting, source, mode in rows:
        if source not in masks:
            raise KeyError(f"ablation row {rid} needs '{source}' masks")
        ds = Dataset(volumes, masks[source], labels)
        res = run_cv(ds, folds, replace(cfg, head_mode=mode), aug, average, jobs, keep_params)
        out.append((rid, setting, res))
        if on_row is not None:
            on_row(rid, setting, res)
    return AblationTable(out)


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------

def _as_params(checkpoint, cfg):
    if isinstance(checkpoint, (str, Path)):
        params, ckpt_cfg, _ = load_checkpoint(checkpoint)
        return params, cfg or ckpt_cfg
    if cfg is None:
        raise ValueError("cfg is required when passing raw parameters")
    return checkpoint, cfg


def cam_channel_weights(grad):
    """Spatial mean of the gradient per channel; grad is [C, D', H', W']."""
    return grad.reshape(grad.shape[0], -1).mean(axis=1)


def cam_upsample(cam, dims):
    """Nearest upsampling that puts feature cell o at its receptive-field centre.

    With stride-s stages (kernel 3, padding 1) cell o is centred on input voxel
    s * o, not on the middle of the block s*o .. s*o + s - 1.
    """
    idx = []
    for n_f, n in zip(cam.shape, dims):
        s = max(n // n_f, 1)
        idx.append(np.minimum((np.arange(n) + s // 2) // s, n_f - 1))
    return cam[np.ix_(*idx)]


def grad_cam3d(checkpoint, volume, mask, target_class, cfg: DiagnoserConfig = None, return_parts=False):
    """Heatmap in [0, 1] at volume resolution for ``target_class``'s logit."""
    params, cfg = _as_params(checkpoint, cfg)
    if not 0 <= int(target_class) < cfg.k_classes:
        raise ValueError(f"target_class {target_class} outside [0, {cfg.k_classes})")
    v = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    m = mask.bits if isinstance(mask, Mask) else np.asarray(mask)
    x = T.Tensor(normalize_intensity(v)[None, None])
    feats = backbone_forward(x, params, cfg).data
    f = T.Tensor(feats, requires_grad=True)
    mf = mask_to_feature_res(m[None], feats.shape[2:])
    out = head_forward(f, mf, params, cfg)
    onehot = np.zeros(out.logits.shape)
    onehot[0, int(target_class)] = 1.0
    T.tsum(T.mul(out.logits, T.Tensor(onehot))).backward()
    grad = f.grad[0]
    weights = cam_channel_weights(grad)
    cam = np.maximum(np.tensordot(weights, feats[0], axes=(0, 0)), 0.0)
    lo, hi = cam.min(), cam.max()
    cam = (cam - lo) / (hi - lo) if hi > lo else np.zeros_like(cam)
    heat = PriorMap(np.clip(cam_upsample(cam, v.shape), 0.0, 1.0))
    if return_parts:
        return heat, {"features": feats[0], "grad": grad, "weights": weights, "logits": out.logits.data[0]}
    return heat


def cam_mass_fraction(heat, mask):
    h = heat.values if isinstance(heat, PriorMap) else np.asarray(heat)
    m = (mask.bits if isinstance(mask, Mask) else np.asarray(mask)) != 0
    total = h.sum()
    return float(h[m].sum() / total) if total > 0 else 0.0


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_pgm(path, img):
    """Binary greyscale PGM from an array in [0, 1]."""
    a = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = a.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + a.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def dump_heatmap_slices(heat, out_dir, prefix="slice"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h = heat.values if isinstance(heat, PriorMap) else np.asarray(heat)
    paths = []
    for d in range(h.shape[0]):
        p = out_dir / f"{prefix}_{d:03d}.pgm"
        write_pgm(p, h[d])
        paths.append(p)
    return paths
