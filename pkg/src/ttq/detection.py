"""Grid detection decoding, IOU, non-max suppression and AP/mAP metrics."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class DetectionGridConfig:
    S: int
    B: int
    C: int
    anchors: Sequence[tuple[float, float]]  # (w, h) in grid-cell units

    @property
    def channels(self) -> int:
        return self.B * (5 + self.C)


@dataclass
class DetectionBox:
    """Axis-aligned box in normalized image coordinates (center and size)."""
    cx: float
    cy: float
    w: float
    h: float
    confidence: float = 1.0
    class_probs: list = field(default_factory=list)
    class_id: int = 0
    frame: int = 0

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x0, y0, x1, y1, **kw) -> "DetectionBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, **kw)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def decode_detections(feature: np.ndarray, cfg: DetectionGridConfig,
                      conf_threshold: float = 0.5) -> list[DetectionBox]:
    """Decode a (S, S, B*(5+C)) head tensor into boxes.

    Per box the channels are (tx, ty, tw, th, objectness, class logits...).
    Centers are ``(cell + sigmoid(t)) / S`` and sizes ``anchor * exp(t) / S``.
    """
    S = cfg.S
    if feature.shape != (S, S, cfg.channels):
        raise ShapeError(f"feature {feature.shape} does not match grid ({S}, {S}, {cfg.channels})")
    f = feature.reshape(S, S, cfg.B, 5 + cfg.C).astype(np.float64)
    conf = _sigmoid(f[..., 4])
    rows, cols, bs = np.nonzero(conf >= conf_threshold)
    if rows.size == 0:
        return []
    anchors = np.asarray(cfg.anchors, dtype=np.float64).reshape(cfg.B, 2)
    sel = f[rows, cols, bs]
    # clip before exp so absurd logits stay finite
    tw = np.clip(sel[:, 2], -50, 50)
    th = np.clip(sel[:, 3], -50, 50)
    cx = (cols + _sigmoid(sel[:, 0])) / S
    cy = (rows + _sigmoid(sel[:, 1])) / S
    w = anchors[bs, 0] * np.exp(tw) / S
    h = anchors[bs, 1] * np.exp(th) / S
    probs = _softmax(sel[:, 5:]) if cfg.C else np.zeros((rows.size, 0))
    boxes = []
    for n in range(rows.size):
        p = probs[n]
        boxes.append(DetectionBox(float(cx[n]), float(cy[n]), float(w[n]), float(h[n]),
                                  float(conf[rows[n], cols[n], bs[n]]), p.tolist(),
                                  int(np.argmax(p)) if p.size else 0))
    return boxes


def encode_box(box: DetectionBox, cfg: DetectionGridConfig, anchor: int) -> tuple[int, int, np.ndarray]:
    """Inverse of the decode formulas: (row, col, [tx, ty, tw, th]) for ``box``."""
    S = cfg.S
    col = min(int(box.cx * S), S - 1)
    row = min(int(box.cy * S), S - 1)
    ox, oy = box.cx * S - col, box.cy * S - row
    aw, ah = cfg.anchors[anchor]
    t = np.array([np.log(ox / (1 - ox)), np.log(oy / (1 - oy)),
                  np.log(box.w * S / aw), np.log(box.h * S / ah)])
    return row, col, t


def iou(a: DetectionBox, b: DetectionBox) -> float:
    if a.w <= 0 or a.h <= 0 or b.w <= 0 or b.h <= 0:
        return 0.0
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def nms(boxes: Sequence[DetectionBox], iou_threshold: float = 0.45) -> list[DetectionBox]:
    """Greedy per-class non-max suppression, highest confidence first."""
    order = sorted(boxes, key=lambda b: -b.confidence)
    kept: list[DetectionBox] = []
    for b in order:
        if all(k.class_id != b.class_id or k.frame != b.frame or iou(k, b) <= iou_threshold
               for k in kept):
            kept.append(b)
    return kept


def match_predictions(preds: Sequence[DetectionBox], truths: Sequence[DetectionBox],
                      iou_thr: float = 0.5) -> np.ndarray:
    """TP flags for predictions in descending confidence order.

    Each prediction claims the best-overlapping unclaimed truth in its frame.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    by_frame = defaultdict(list)
    for t in truths:
        by_frame[t.frame].append(t)
    claimed = {f: [False] * len(ts) for f, ts in by_frame.items()}
    tp = np.zeros(len(preds), dtype=bool)
    for rank, i in enumerate(order):
        p = preds[i]
        cands = by_frame.get(p.frame, [])
        best, best_iou = -1, iou_thr
        for j, t in enumerate(cands):
            if claimed[p.frame][j]:
                continue
            o = iou(p, t)
            if o >= best_iou:
                best, best_iou = j, o
        if best >= 0:
            claimed[p.frame][best] = True
            tp[rank] = True
    return tp


def average_precision(preds: Sequence[DetectionBox], truths: Sequence[DetectionBox],
                      iou_thr: float = 0.5) -> float:
    """Area under the precision-recall curve with the monotone precision envelope."""
    if not truths or not preds:
        return 0.0
    tp = match_predictions(preds, truths, iou_thr)
    ctp = np.cumsum(tp)
    recall = ctp / len(truths)
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_ap(aps: Iterable[float]) -> float:
    aps = list(aps)
    return float(np.mean(aps)) if aps else 0.0


def evaluate_map(preds: Sequence[DetectionBox], truths: Sequence[DetectionBox],
                 classes: Iterable[int], iou_thr: float = 0.5) -> tuple[float, dict]:
    """Per-class AP and their mean."""
    per_class = {}
    for c in classes:
        per_class[c] = average_precision([p for p in preds if p.class_id == c],
                                         [t for t in truths if t.class_id == c], iou_thr)
    return mean_ap(per_class.values()), per_class
