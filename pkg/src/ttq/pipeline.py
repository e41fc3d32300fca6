"""Detect-then-classify flow: frame sampling, feature extraction, dataset
preprocessing, a synthetic clip generator, and streaming comprehension."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import modelio, qnet as qn, rnn
from .detection import DetectionBox, decode_detections, nms
from .errors import ShapeError, TooShort
from .rnn import FeatureSequence
from .tensor import numel

GENERATOR_VERSION = 1
FEATURE_SUFFIX = ".ttqf"


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, rows, cols, 3) in [0, 1]
    fps: float = 25.0
    label: Optional[int] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[0] == 0:
            raise ShapeError(f"clip frames must be (T, rows, cols, channels), got {self.frames.shape}")

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class ComprehensionResult:
    per_frame_detections: list
    action_class: int
    action_probs: list
    frame_indices: list = field(default_factory=list)
    hidden_states: list = field(default_factory=list)


def sample_frames(clip: VideoClip, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """k distinct frames chosen uniformly, returned in temporal order with their indices."""
    if len(clip) < k:
        raise TooShort(f"clip has {len(clip)} frames, need {k}")
    idx = np.sort(rng.choice(len(clip), size=k, replace=False))
    return clip.frames[idx], idx


def resize_nearest(frame: np.ndarray, rows: int, cols: int) -> np.ndarray:
    r, c = frame.shape[:2]
    if (r, c) == (rows, cols):
        return frame
    ri = np.minimum((np.arange(rows) * r) // rows, r - 1)
    ci = np.minimum((np.arange(cols) * c) // cols, c - 1)
    return frame[ri][:, ci]


def frame_features(net: qn.QNetModel, frame: np.ndarray) -> np.ndarray:
    rows, cols, _ = net.input_shape
    return qn.forward(net, np.clip(resize_nearest(frame, rows, cols), 0.0, 1.0))


def extract_features(net: qn.QNetModel, frames: Sequence[np.ndarray],
                     input_modes: Optional[Sequence[int]] = None, label: int = -1) -> FeatureSequence:
    """Run each frame through the quantized net and reshape outputs to ``input_modes``."""
    modes = tuple(input_modes) if input_modes is not None else net.output_shape
    n = numel(net.output_shape)
    if numel(modes) != n:
        raise ShapeError(f"feature of {n} elements cannot take modes {modes}")
    feats = [frame_features(net, f).reshape(modes) for f in frames]
    return FeatureSequence(np.stack(feats), -1 if label is None else int(label))


def synth_dataset(classes: int, clips_per_class: int, shape: tuple = (32, 32),
                  n_frames: int = 10, seed: int = 0, speed: float = 1.6,
                  blob_sigma: float = 2.0, noise: float = 0.08) -> list[VideoClip]:
    """Clips of a gaussian blob drifting across a noise floor.

    Class ``c`` moves in direction ``2*pi*c/classes``. Blob appearance and
    start positions are class-independent, so a single frame carries no
    class information; only the trajectory does.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    rows, cols = shape
    yy, xx = np.mgrid[0:rows, 0:cols].astype(np.float64)
    margin = 2.0 * blob_sigma
    clips = []
    for c in range(classes):
        theta = 2 * np.pi * c / classes
        v = speed * np.array([np.cos(theta), np.sin(theta)])  # (dx, dy) per frame
        for _ in range(clips_per_class):
            lo = np.array([margin, margin]) - np.minimum(v * (n_frames - 1), 0)
            hi = np.array([cols, rows]) - margin - np.maximum(v * (n_frames - 1), 0)
            start = rng.uniform(lo, np.maximum(hi, lo + 1e-9))
            color = rng.uniform(0.7, 1.0, 3)
            frames = np.empty((n_frames, rows, cols, 3))
            for t in range(n_frames):
                x0, y0 = start + t * v
                blob = np.exp(-((xx - x0) ** 2 + (yy - y0) ** 2) / (2 * blob_sigma ** 2))
                floor = rng.uniform(0.0, noise, (rows, cols, 3))
                frames[t] = np.clip(floor + blob[..., None] * color, 0.0, 1.0)
            clips.append(VideoClip(frames, fps=25.0, label=c))
    return clips


def _clip_key(clip: VideoClip, index: int, k: int, seed: int, modes, net_digest: str) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(clip.frames, dtype="<f8").tobytes())
    h.update(json.dumps([index, k, seed, list(modes), clip.label, net_digest]).encode())
    return h.hexdigest()


def _sequence_for(net, clip, index, k, seed, modes) -> FeatureSequence:
    frames, _ = sample_frames(clip, k, np.random.default_rng([seed, index]))
    return extract_features(net, frames, modes, clip.label)


def preprocess_dataset(net: qn.QNetModel, clips: Sequence[VideoClip], k: int, seed: int,
                       out_dir=None, input_modes: Optional[Sequence[int]] = None,
                       workers: int = 1) -> list[FeatureSequence]:
    """Sample ``k`` frames per clip and extract their feature sequences.

    With ``out_dir`` each sequence is written to its own file named by a
    content key, plus ``manifest.json``; files already present are loaded
    instead of recomputed.
    """
    modes = tuple(input_modes) if input_modes is not None else net.output_shape
    out = Path(out_dir) if out_dir is not None else None
    digest = hashlib.sha256(modelio.dumps_qnet(net)).hexdigest() if out is not None else ""

    def work(i):
        clip = clips[i]
        if out is None:
            return _sequence_for(net, clip, i, k, seed, modes), None
        key = _clip_key(clip, i, k, seed, modes, digest)
        name = f"{i:06d}-{key[:16]}{FEATURE_SUFFIX}"
        path = out / name
        if path.exists():
            return modelio.load_features(path), name
        seq = _sequence_for(net, clip, i, k, seed, modes)
        modelio.save_features(seq, path)
        # stored payload is float32; hand back exactly what a reload yields
        return modelio.load_features(path), name

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, range(len(clips))))
    else:
        results = [work(i) for i in range(len(clips))]

    if out is not None:
        manifest = {
            "generator_version": GENERATOR_VERSION,
            "seed": seed,
            "k": k,
            "input_modes": list(modes),
            "count": len(results),
            "items": [{"id": i, "file": name, "label": int(seq.label),
                       "shape": list(seq.frames.shape)}
                      for i, (seq, name) in enumerate(results)],
        }
        text = json.dumps(manifest, indent=1, sort_keys=True).encode() + b"\n"
        mpath = out / "manifest.json"
        if not mpath.exists() or mpath.read_bytes() != text:
            modelio.atomic_write(mpath, text)
    return [seq for seq, _ in results]


def load_dataset(directory) -> list[FeatureSequence]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return [modelio.load_features(directory / item["file"]) for item in manifest["items"]]


def comprehend(net: qn.QNetModel, classifier: rnn.TTRNNModel, clip: VideoClip, k: int = 6,
               seed: int = 0, conf_threshold: float = 0.5, nms_iou: Optional[float] = 0.45
               ) -> ComprehensionResult:
    """Detect objects on sampled frames and classify the clip.

    Each frame's features go into the recurrent cell as soon as the frame
    is processed, so no feature buffer for the whole clip is kept.
    """
    frames, idx = sample_frames(clip, k, np.random.default_rng(seed))
    h, c = rnn.initial_state(classifier)
    detections, states = [], []
    for frame in frames:
        feat = frame_features(net, frame)
        boxes: list[DetectionBox] = []
        if net.grid is not None:
            boxes = decode_detections(feat, net.grid, conf_threshold)
            if nms_iou is not None:
                boxes = nms(boxes, nms_iou)
        detections.append(boxes)
        h, c = rnn.stream_step(classifier, feat, h, c)
        states.append(h[0].copy())
    probs = rnn.classify_state(classifier, h)
    return ComprehensionResult(detections, int(np.argmax(probs)), probs.tolist(),
                               idx.tolist(), states)
