"""Whole-brain 3D CNN with masked channel attention and global/tumour fusion.

Forward pass for one batch:

    F      = backbone(x)                       # stride-2 conv + ReLU stages
    z      = masked_avg_pool(F, M)             # M = refined mask at feature scale
    w, Fa  = channel_gate(F, z)
    logits = Linear(concat(GAP(F), GAP(Fa)))
    y_hat  = softmax(logits)

``head_mode`` selects the second fusion branch: ``"mca"`` (as above),
``"masked"`` (plain masked pooling of F, no gate) or ``"gap"`` (a second copy of
GAP(F), which ignores the mask).  The last two serve the ablation rows.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from vbiopsy import tensor as T
from vbiopsy.optim import AdamW, clip_grad_norm, cosine_warm_restarts
from vbiopsy.volume import Mask, Volume, resample_grid

log = logging.getLogger(__name__)

HEAD_MODES = ("mca", "masked", "gap")


class TrainingDiverged(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class DiagnoserConfig:
    channels: tuple = (8, 16)
    mca_hidden: int = 8
    k_classes: int = 4
    epochs: int = 60
    lr: float = 5e-5
    weight_decay: float = 1e-4
    warm_restart_t0: int = 10
    clip_norm: float = 2.0
    dropout_p: float = 0.2
    label_smooth: float = 0.05
    batch: int = 2
    accum_steps: int = 2
    mask_eps: float = 1e-6
    head_mode: str = "mca"
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.k_classes < 2:
            raise ValueError("k_classes must be >= 2")
        if self.clip_norm <= 0 or self.lr <= 0:
            raise ValueError("clip_norm and lr must be positive")
        if not self.channels or min(self.channels) < 1:
            raise ValueError("channels must list at least one positive width")
        if self.batch < 1 or self.accum_steps < 1 or self.epochs < 0 or self.warm_restart_t0 < 1:
            raise ValueError("batch, accum_steps, warm_restart_t0 must be >= 1 and epochs >= 0")
        if not 0.0 <= self.dropout_p < 1.0 or not 0.0 <= self.label_smooth < 1.0:
            raise ValueError("dropout_p and label_smooth must be in [0, 1)")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")

    @property
    def downsample(self):
        return 2 ** len(self.channels)

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


@dataclass
class AugmentConfig:
    rot90_p: float = 0.5
    flip_p: float = 0.5
    noise_std: float = 0.01
    noise_p: float = 0.15
    gamma_range: tuple = (0.9, 1.1)
    gamma_p: float = 0.15
    seed: int = 0

    def __post_init__(self):
        self.gamma_range = tuple(float(g) for g in self.gamma_range)
        for name in ("rot90_p", "flip_p", "noise_p", "gamma_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.gamma_range
        if not 0 < lo <= hi:
            raise ValueError(f"gamma_range must be positive and ordered, got {self.gamma_range}")

    @classmethod
    def off(cls):
        return cls(0.0, 0.0, 0.0, 0.0, (1.0, 1.0), 0.0)

    def to_dict(self):
        d = asdict(self)
        d["gamma_range"] = list(self.gamma_range)
        return d


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_params(cfg: DiagnoserConfig, in_channels=1):
    rng = np.random.default_rng([cfg.seed, 7])
    params = {}
    cin = in_channels
    for s, cout in enumerate(cfg.channels):
        fan_in = cin * 27
        params[f"conv{s}.w"] = rng.normal(size=(cout, cin, 3, 3, 3)) * math.sqrt(2.0 / fan_in)
        params[f"conv{s}.b"] = np.zeros(cout)
        cin = cout
    c = cfg.channels[-1]
    params["mca.w1"] = rng.normal(size=(cfg.mca_hidden, c)) * math.sqrt(2.0 / c)
    params["mca.b1"] = np.zeros(cfg.mca_hidden)
    params["mca.w2"] = rng.normal(size=(c, cfg.mca_hidden)) * math.sqrt(1.0 / cfg.mca_hidden)
    params["mca.b2"] = np.zeros(c)
    params["head.w"] = rng.normal(size=(cfg.k_classes, 2 * c)) * math.sqrt(1.0 / (2 * c))
    params["head.b"] = np.zeros(cfg.k_classes)
    return {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}


def gate_params(params):
    return {"w1": params["mca.w1"], "b1": params["mca.b1"], "w2": params["mca.w2"], "b2": params["mca.b2"]}


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def normalize_intensity(v):
    """Z-score the brain (non-zero) voxels; background stays 0."""
    a = np.asarray(v, dtype=np.float64)
    fg = a != 0
    out = np.zeros_like(a)
    if fg.any():
        vals = a[fg]
        sd = vals.std()
        out[fg] = (vals - vals.mean()) / (sd if sd > 0 else 1.0)
    return out


def backbone_forward(x, params, cfg: DiagnoserConfig):
    """x: Tensor [N, 1, D, H, W] -> F: Tensor [N, C, D', H', W']."""
    spatial = x.shape[2:]
    f = cfg.downsample
    if any(n % f for n in spatial):
        raise ValueError(f"input dims {spatial} not divisible by total downsampling {f}")
    h = x
    for s in range(len(cfg.channels)):
        h = T.relu(T.conv3d(h, params[f"conv{s}.w"], params[f"conv{s}.b"], stride=2, pad=1))
    return h


def mask_to_feature_res(m, feature_dims):
    """Block-average a binary mask down to ``feature_dims``.

    Works on a Mask or an array with leading batch axes.  Dims that are not an
    integer multiple fall back to nearest-neighbour resampling.
    """
    a = m.bits if isinstance(m, Mask) else np.asarray(m)
    a = a.astype(np.float64)
    src = a.shape[-3:]
    feature_dims = tuple(int(x) for x in feature_dims)
    if any(s % t for s, t in zip(src, feature_dims)):
        log.warning("mask dims %s not a multiple of %s; using nearest resampling", src, feature_dims)
        if a.ndim == 3:
            return resample_grid(a, feature_dims)
        return np.stack([resample_grid(x, feature_dims) for x in a.reshape(-1, *src)]).reshape(
            *a.shape[:-3], *feature_dims)
    fz, fy, fx = (s // t for s, t in zip(src, feature_dims))
    lead = a.shape[:-3]
    b = a.reshape(*lead, feature_dims[0], fz, feature_dims[1], fy, feature_dims[2], fx)
    n = len(lead)
    return b.mean(axis=(n + 1, n + 3, n + 5))


@dataclass
class ForwardOut:
    logits: T.Tensor
    probs: T.Tensor
    features: T.Tensor
    z: T.Tensor = None
    gate: T.Tensor = None
    fused: T.Tensor = None


def head_forward(f, m, params, cfg: DiagnoserConfig, training=False, rng=None, head_mode=None):
    mode = head_mode or cfg.head_mode
    g = T.gap(f)
    z = w = None
    if mode == "mca":
        z = T.masked_avg_pool(f, m, cfg.mask_eps)
        w, f_att = T.channel_gate(f, z, gate_params(params))
        second = T.gap(f_att)
    elif mode == "masked":
        z = T.masked_avg_pool(f, m, cfg.mask_eps)
        second = z
    else:
        second = T.gap(f)
    fused = T.concat_channels(g, second)  # global first
    fused = T.dropout(fused, cfg.dropout_p, rng, training)
    logits = T.linear(fused, params["head.w"], params["head.b"])
    return ForwardOut(logits, T.softmax(logits), f, z, w, fused)


def model_forward(x, m_feat, params, cfg: DiagnoserConfig, training=False, rng=None, head_mode=None):
    """x: [N,1,D,H,W] array or Tensor; m_feat: [N,D',H',W'] soft mask at feature scale."""
    x = x if isinstance(x, T.Tensor) else T.Tensor(x)
    f = backbone_forward(x, params, cfg)
    f_in = T.dropout(f, cfg.dropout_p, rng, training)
    out = head_forward(f_in, m_feat, params, cfg, training, rng, head_mode)
    out.features = f
    return out


def diagnose_forward(f, m, params, cfg: DiagnoserConfig):
    """Inference on precomputed features; returns the probability vector(s)."""
    return head_forward(f, m, params, cfg).probs


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentDraw:
    rot_k: int = 0
    flip: bool = False
    noise: bool = False
    gamma: float = None


def augment(v, m, cfg: AugmentConfig, draw_seed, return_draw=False):
    """Apply the same spatial transforms to volume and mask; intensity ones to the volume only.

    Quarter-turns act in the axial (H, W) plane; the flip reverses W.
    Accepts Volume/Mask or plain arrays and returns the same kinds.
    """
    is_obj = isinstance(v, Volume)
    a = v.data.astype(np.float64) if is_obj else np.asarray(v, dtype=np.float64)
    b = m.bits if isinstance(m, Mask) else np.asarray(m)
    if a.shape != b.shape:
        raise ValueError(f"volume {a.shape} and mask {b.shape} are not aligned")
    rng = np.random.default_rng([cfg.seed, int(draw_seed)])
    u = rng.random(4)
    k = int(rng.integers(1, 4))
    gamma = float(rng.uniform(*cfg.gamma_range))
    draw = AugmentDraw()
    if u[0] < cfg.rot90_p:
        draw.rot_k = k
        a = np.rot90(a, k, axes=(1, 2))
        b = np.rot90(b, k, axes=(1, 2))
    if u[1] < cfg.flip_p:
        draw.flip = True
        a = a[:, :, ::-1]
        b = b[:, :, ::-1]
    if u[2] < cfg.noise_p:
        draw.noise = True
        noise_rng = np.random.default_rng([cfg.seed, int(draw_seed), 1])
        a = a + noise_rng.normal(0.0, cfg.noise_std, a.shape)
    if u[3] < cfg.gamma_p:
        draw.gamma = gamma
        lo, hi = a.min(), a.max()
        if hi > lo:
            a = lo + (hi - lo) * ((a - lo) / (hi - lo)) ** gamma
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    if is_obj:
        out = (Volume(a, v.spacing), Mask(b))
    else:
        out = (a, b)
    return (*out, draw) if return_draw else out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """In-memory cohort: volumes [N, D, H, W], masks [N, D, H, W], labels [N]."""

    volumes: np.ndarray
    masks: np.ndarray
    labels: np.ndarray
    case_ids: list = field(default_factory=list)


def _batch_arrays(ds: Dataset, idx, cfg, aug, draw_seeds):
    vols, masks = [], []
    for i, s in zip(idx, draw_seeds):
        v, m = ds.volumes[i], ds.masks[i]
        if aug is not None:
            v, m = augment(v, m, aug, s)
        vols.append(normalize_intensity(v))
        masks.append(m)
    x = np.stack(vols)[:, None].astype(np.float64)
    fdims = tuple(n // cfg.downsample for n in x.shape[2:])
    mf = mask_to_feature_res(np.stack(masks), fdims)
    return x, mf


def accumulate_group(params, ds: Dataset, idx, cfg: DiagnoserConfig, aug=None, draw_seeds=None, rng=None,
                     training=True):
    """Forward/backward over ``idx`` in micro-batches; grads summed into params.

    Each micro-batch loss is divided by ``len(idx)`` so the accumulated
    gradient equals that of the mean loss over the whole group.
    """
    if draw_seeds is None:
        draw_seeds = [0] * len(idx)
    total, correct = 0.0, 0
    for s in range(0, len(idx), cfg.batch):
        sub = idx[s:s + cfg.batch]
        x, mf = _batch_arrays(ds, sub, cfg, aug, draw_seeds[s:s + cfg.batch])
        out = model_forward(x, mf, params, cfg, training=training, rng=rng)
        labels = ds.labels[sub]
        loss = T.cross_entropy_smoothed(out.logits, labels, cfg.label_smooth, reduction_size=len(idx))
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"non-finite loss {float(loss.data)} on cases {list(sub)}")
        loss.backward()
        total += float(loss.data)
        correct += int((out.logits.data.argmax(axis=1) == labels).sum())
    return total, correct


def train(ds: Dataset, train_idx, cfg: DiagnoserConfig, aug: AugmentConfig = None, out_dir=None,
          epoch_callback=None):
    """Train from scratch on ``train_idx``; returns (params, epoch log)."""
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise ValueError("training split is empty")
    params = init_params(cfg)
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    group = cfg.batch * cfg.accum_steps
    history = []
    order_rng = np.random.default_rng([cfg.seed, 11])
    step = 0
    for epoch in range(cfg.epochs):
        lr = cosine_warm_restarts(epoch, cfg.lr, cfg.warm_restart_t0)
        opt.lr = lr
        order = order_rng.permutation(train_idx)
        ep_loss, ep_correct = 0.0, 0
        for g0 in range(0, len(order), group):
            idx = order[g0:g0 + group]
            seeds = [epoch * 1_000_003 + int(i) for i in idx]
            drop_rng = np.random.default_rng([cfg.seed, 13, step])
            opt.zero_grad()
            try:
                loss, correct = accumulate_group(params, ds, idx, cfg, aug, seeds, drop_rng)
            except TrainingDiverged as exc:
                if out_dir is not None:
                    save_checkpoint(Path(out_dir) / "checkpoint_last_good.vbck", params, cfg)
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}; lr={lr}") from exc
            clip_grad_norm(params, cfg.clip_norm)
            opt.step()
            step += 1
            ep_loss += loss * len(idx)
            ep_correct += correct
        rec = {"epoch": epoch, "lr": lr, "loss": ep_loss / len(order), "train_acc": ep_correct / len(order)}
        history.append(rec)
        if epoch_callback is not None:
            epoch_callback(rec)
    return params, history


# ---------------------------------------------------------------------------
# checkpoints and inference
# ---------------------------------------------------------------------------

def save_checkpoint(path, params, cfg: DiagnoserConfig, extra=None):
    meta = {"config": cfg.to_dict(), "kind": "diagnoser"}
    if extra:
        meta.update(extra)
    T.save_params(path, params, meta)


def load_checkpoint(path):
    params, meta = T.load_params(path)
    if meta.get("kind") != "diagnoser":
        raise CheckpointMismatch(f"{path} is not a diagnoser checkpoint")
    return params, DiagnoserConfig(**meta["config"]), meta


def check_compatible(params, cfg: DiagnoserConfig):
    ref = init_params(cfg)
    for k, p in ref.items():
        if k not in params or params[k].shape != p.shape:
            got = None if k not in params else params[k].shape
            raise CheckpointMismatch(f"parameter {k}: checkpoint has {got}, config expects {p.shape}")


def predict_batch(params, cfg: DiagnoserConfig, volumes, masks, head_mode=None):
    x = np.stack([normalize_intensity(v) for v in volumes])[:, None]
    fdims = tuple(n // cfg.downsample for n in x.shape[2:])
    mf = mask_to_feature_res(np.asarray(masks), fdims)
    out = model_forward(x, mf, params, cfg, training=False, head_mode=head_mode)
    return out.probs.data


def predict_case(checkpoint, volume, mask, cfg: DiagnoserConfig = None):
    """(probabilities, argmax class) for one case; dropout off.

    ``checkpoint`` is a path or a params dict (then ``cfg`` is required).
    """
    if isinstance(checkpoint, (str, Path)):
        params, ckpt_cfg, _ = load_checkpoint(checkpoint)
        if cfg is not None and cfg.to_dict() != ckpt_cfg.to_dict():
            check_compatible(params, cfg)
        cfg = cfg or ckpt_cfg
    else:
        params = checkpoint
        if cfg is None:
            raise ValueError("cfg is required when passing raw parameters")
    check_compatible(params, cfg)
    v = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    m = mask.bits if isinstance(mask, Mask) else np.asarray(mask)
    probs = predict_batch(params, cfg, v[None], m[None])[0]
    return probs, int(np.argmax(probs))


def write_epoch_log(path, history):
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
