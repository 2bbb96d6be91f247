"""Slice-level box predictors: a ground-truth stub and an HTTP client.

A predictor is any callable ``(slice_pixels, slice_index) -> list[BoxPrediction]``.
Box coordinates are half-open pixel ranges: columns x0 <= j < x1, rows
y0 <= i < y1.
"""

from __future__ import annotations

import base64
import json
import logging
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

CUES = (
    "abnormal signal intensities",
    "irregular boundaries",
    "edema-associated gradients",
    "midline asymmetry",
)

_PROMPT = (
    "You are reviewing one axial slice of a contrast-enhanced T1-weighted brain MRI. "
    "Mark every region that may contain an intracranial tumor. Look for "
    + ", ".join(CUES[:-1]) + ", and " + CUES[-1] + ". "
    "Return JSON of the form {\"boxes\": [{\"x0\": int, \"y0\": int, \"x1\": int, \"y1\": int, "
    "\"confidence\": float}]} with pixel coordinates (x is the column, y the row, x1 and y1 "
    "exclusive) and confidence in [0, 1]. Return {\"boxes\": []} when no lesion is visible."
)


def default_prompt() -> str:
    return _PROMPT


class OracleError(RuntimeError):
    def __init__(self, slice_index, message):
        super().__init__(f"slice {slice_index}: {message}")
        self.slice_index = slice_index


class OracleTransportError(OracleError):
    pass


class OracleResponseError(OracleError):
    pass


@dataclass(frozen=True)
class BoxPrediction:
    slice_index: int
    box: tuple  # (x0, y0, x1, y1)
    confidence: float

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def clamp_box(box, height, width):
    x0, y0, x1, y1 = box
    return (min(max(x0, 0), width), min(max(y0, 0), height),
            min(max(x1, 0), width), min(max(y1, 0), height))


def is_valid_box(box):
    x0, y0, x1, y1 = box
    return x0 < x1 and y0 < y1


def tight_box(mask2d):
    rows = np.flatnonzero(mask2d.any(axis=1))
    cols = np.flatnonzero(mask2d.any(axis=0))
    if rows.size == 0:
        return None
    return (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def to_u8(pixels):
    """Min-max rescale a slice to [0, 255] and round to uint8."""
    p = np.asarray(pixels, dtype=np.float64)
    lo, hi = p.min(), p.max()
    if hi <= lo:
        return np.zeros(p.shape, dtype=np.uint8)
    return np.rint((p - lo) * (255.0 / (hi - lo))).astype(np.uint8)


@dataclass
class OracleRequest:
    slice_pixels: np.ndarray  # H x W, values in [0, 255]
    prompt_text: str
    slice_index: int

    def __post_init__(self):
        if not self.prompt_text:
            raise ValueError("prompt must be non-empty")
        if not np.isfinite(self.slice_pixels).all():
            raise ValueError("slice pixels must be finite")

    def to_json(self):
        px = np.clip(np.rint(self.slice_pixels), 0, 255).astype(np.uint8)
        return {
            "slice_b64": base64.b64encode(px.tobytes()).decode("ascii"),
            "width": int(px.shape[1]),
            "height": int(px.shape[0]),
            "prompt": self.prompt_text,
            "slice_index": int(self.slice_index),
        }


# ---------------------------------------------------------------------------
# stub
# ---------------------------------------------------------------------------

@dataclass
class StubNoiseConfig:
    jitter_std: float = 0.0
    miss_prob: float = 0.0
    false_pos_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("miss_prob", "false_pos_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.jitter_std < 0:
            raise ValueError("jitter_std must be >= 0")


def stub_predict(slice_pixels, gt_mask_slice, cfg: StubNoiseConfig, slice_index=0):
    """Corrupted copy of the ground-truth tight box for one slice.

    The random stream depends only on (cfg.seed, slice_index).  Coordinates
    stay real-valued so the jitter distribution is exactly Gaussian before
    clamping; a jittered box that collapses after clamping is dropped.
    """
    gt = np.asarray(gt_mask_slice) != 0
    h, w = gt.shape
    if np.shape(slice_pixels) != gt.shape:
        raise ValueError(f"slice shape {np.shape(slice_pixels)} != mask shape {gt.shape}")
    rng = np.random.default_rng([int(cfg.seed) & 0xFFFFFFFFFFFFFFFF, int(slice_index)])
    missed = rng.random() < cfg.miss_prob
    jitter = rng.normal(0.0, 1.0, 4) * cfg.jitter_std
    false_pos = rng.random() < cfg.false_pos_prob
    fp_draw = rng.random(5)

    out = []
    tight = tight_box(gt)
    if tight is not None and not missed:
        box = clamp_box(tuple(float(c) + float(j) for c, j in zip(tight, jitter)), h, w)
        if is_valid_box(box):
            side = 0.5 * ((tight[2] - tight[0]) + (tight[3] - tight[1]))
            conf = float(np.clip(1.0 - np.abs(jitter).mean() / max(side, 1.0), 0.0, 1.0))
            out.append(BoxPrediction(int(slice_index), box, conf))
    if false_pos:
        bw = 2 + int(fp_draw[0] * max(1, w // 4 - 1))
        bh = 2 + int(fp_draw[1] * max(1, h // 4 - 1))
        bw, bh = min(bw, w), min(bh, h)
        x0 = int(fp_draw[2] * (w - bw + 1))
        y0 = int(fp_draw[3] * (h - bh + 1))
        out.append(BoxPrediction(int(slice_index), (x0, y0, x0 + bw, y0 + bh), float(0.3 * fp_draw[4])))
    return out


class StubPredictor:
    """Stub bound to one case's ground-truth mask."""

    def __init__(self, gt_mask, cfg: StubNoiseConfig):
        self.gt = np.asarray(gt_mask)
        self.cfg = cfg

    def __call__(self, slice_pixels, slice_index):
        return stub_predict(slice_pixels, self.gt[slice_index], self.cfg, slice_index)


# ---------------------------------------------------------------------------
# remote client
# ---------------------------------------------------------------------------

@dataclass
class EndpointConfig:
    url: str = "http://127.0.0.1:8080/predict"
    retries: int = 2
    timeout: float = 30.0
    backoff: float = 0.0


def parse_boxes(doc, slice_index, height, width, warnings=None):
    """Validate a response document and return in-bounds, non-degenerate boxes."""
    if not isinstance(doc, dict) or not isinstance(doc.get("boxes"), list):
        raise OracleResponseError(slice_index, "response lacks a 'boxes' list")
    out = []
    for k, b in enumerate(doc["boxes"]):
        try:
            box = tuple(int(b[key]) for key in ("x0", "y0", "x1", "y1"))
            conf = float(b["confidence"])
        except (KeyError, TypeError, ValueError) as exc:
            raise OracleResponseError(slice_index, f"box {k} malformed: {exc}") from exc
        if not 0.0 <= conf <= 1.0:
            raise OracleResponseError(slice_index, f"box {k} confidence {conf} outside [0, 1]")
        box = clamp_box(box, height, width)
        if not is_valid_box(box):
            msg = f"slice {slice_index}: dropped degenerate box {k} {box}"
            log.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            continue
        out.append(BoxPrediction(int(slice_index), box, conf))
    return out


def remote_predict(request: OracleRequest, endpoint: EndpointConfig, warnings=None):
    body = json.dumps(request.to_json()).encode()
    h, w = request.slice_pixels.shape
    last = None
    for attempt in range(endpoint.retries + 1):
        req = urllib.request.Request(endpoint.url, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=endpoint.timeout) as resp:
                raw = resp.read()
            break
        except (urllib.error.URLError, OSError) as exc:
            last = exc
            log.info("slice %d attempt %d failed: %s", request.slice_index, attempt + 1, exc)
            if endpoint.backoff:
                time.sleep(endpoint.backoff * (attempt + 1))
    else:
        raise OracleTransportError(request.slice_index,
                                   f"{endpoint.retries + 1} attempts failed, last error: {last}")
    try:
        doc = json.loads(raw)
    except ValueError as exc:
        raise OracleResponseError(request.slice_index, f"malformed JSON: {exc}") from exc
    return parse_boxes(doc, request.slice_index, h, w, warnings)


@dataclass
class RemotePredictor:
    """Predictor that sends each slice to an HTTP endpoint.

    Slices whose request fails end up in ``failed`` and yield no boxes, so a
    flaky endpoint degrades localization instead of aborting the case.
    """

    endpoint: EndpointConfig
    prompt: str = field(default_factory=default_prompt)
    failed: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def __call__(self, slice_pixels, slice_index):
        req = OracleRequest(to_u8(slice_pixels).astype(np.float64), self.prompt, int(slice_index))
        try:
            return remote_predict(req, self.endpoint, self.warnings)
        except OracleError as exc:
            log.warning("%s", exc)
            self.failed.append({"slice_index": int(slice_index), "error": str(exc)})
            return []
