"""Checksummed binary containers for quantized nets, TT-RNN models and feature sequences.

Layout (all little-endian)::

    offset  size  field
    0       4     magic  b"TTQ1"
    4       1     kind   1 = qnet, 2 = ttrnn, 3 = features
    5       2     version (currently 1)
    7       8     payload_len
    15      4     CRC32 of the payload
    19      ...   payload

Payload::

    uint32 meta_len | meta_len bytes of UTF-8 JSON | array blobs

The JSON object carries an ``arrays`` list of ``{"name", "dtype", "shape"}``
records; the blobs follow in that order, each a C-ordered dump of the
array in its little-endian dtype. The remaining JSON keys are
object-specific (layer specs, TT-RNN config, sequence label).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .detection import DetectionGridConfig
from .errors import BadChecksum, BadMagic, VersionError
from .qnet import ConvParams, LayerSpec, QConvParams, QNetModel
from .quant import QuantizedWeights
from .rnn import FeatureSequence, TTRNNConfig, TTRNNModel, GATES
from .tt import TTMatrix

MAGIC = b"TTQ1"
VERSION = 1
KIND_QNET, KIND_TTRNN, KIND_FEATURES = 1, 2, 3
_HEADER = struct.Struct("<4sBHQI")


def _pack(kind: int, meta: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    blobs = []
    records = []
    for name, arr in arrays:
        arr = np.asarray(arr)
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        records.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    meta = dict(meta, arrays=records)
    text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = struct.pack("<I", len(text)) + text + b"".join(blobs)
    return _HEADER.pack(MAGIC, kind, VERSION, len(payload), zlib.crc32(payload)) + payload


def _unpack(data: bytes, kind: int) -> tuple[dict, dict]:
    if len(data) < _HEADER.size:
        if len(data) >= 4 and data[:4] != MAGIC:
            raise BadMagic(f"bad magic {data[:4]!r}")
        raise BadChecksum(f"file truncated inside the {_HEADER.size}-byte header")
    magic, got_kind, version, length, crc = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    payload = data[_HEADER.size:]
    if len(payload) != length or zlib.crc32(payload) != crc:
        raise BadChecksum("payload length or CRC32 does not match the header")
    if version != VERSION:
        raise VersionError(f"unsupported format version {version}")
    if got_kind != kind:
        raise VersionError(f"file holds object kind {got_kind}, expected {kind}")
    (meta_len,) = struct.unpack_from("<I", payload, 0)
    meta = json.loads(payload[4:4 + meta_len].decode("utf-8"))
    offset = 4 + meta_len
    arrays = {}
    for rec in meta.pop("arrays"):
        dt = np.dtype(rec["dtype"])
        count = int(np.prod(rec["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=offset).reshape(rec["shape"])
        arrays[rec["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        offset += count * dt.itemsize
    return meta, arrays


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# quantized nets

def dumps_qnet(model: QNetModel) -> bytes:
    """Serialize a network.

    Quantized models store only the deployable payload: int8 kernels, one
    float32 scale factor per kernel, and the fp32 per-channel scale/shift.
    Unquantized models store the fp32 Darknet-order parameters.
    """
    meta = {
        "input_shape": list(model.input_shape),
        "layers": [asdict(l) for l in model.layers],
        "grid": None if model.grid is None else {
            "S": model.grid.S, "B": model.grid.B, "C": model.grid.C,
            "anchors": [list(a) for a in model.grid.anchors]},
        "darknet_header": list(model.darknet_header),
        "bn_eps": model.bn_eps,
        "quantized": model.quantized,
    }
    arrays = []
    if model.quantized:
        for k, p in enumerate(model.q_params):
            arrays += [(f"{k}.w", p.weights.values.astype(np.int8)),
                       (f"{k}.xi", np.array([p.weights.xi], "<f4")),
                       (f"{k}.scale", p.scale.astype("<f4")),
                       (f"{k}.shift", p.shift.astype("<f4"))]
    else:
        for k, p in enumerate(model.fp_params):
            arrays += [(f"{k}.weights", p.weights.astype("<f4")), (f"{k}.bias", p.bias.astype("<f4"))]
            if p.has_bn:
                arrays += [(f"{k}.bn_scale", p.bn_scale.astype("<f4")),
                           (f"{k}.bn_mean", p.bn_mean.astype("<f4")),
                           (f"{k}.bn_var", p.bn_var.astype("<f4"))]
    return _pack(KIND_QNET, meta, arrays)


def loads_qnet(data: bytes) -> QNetModel:
    meta, arrays = _unpack(data, KIND_QNET)
    layers = [LayerSpec(**l) for l in meta["layers"]]
    grid = None
    if meta["grid"]:
        g = meta["grid"]
        grid = DetectionGridConfig(g["S"], g["B"], g["C"], [tuple(a) for a in g["anchors"]])
    model = QNetModel(layers=layers, input_shape=tuple(meta["input_shape"]), grid=grid,
                      darknet_header=tuple(meta["darknet_header"]), bn_eps=meta["bn_eps"])
    n_conv = len(model.conv_layers)
    if meta["quantized"]:
        q = []
        for k in range(n_conv):
            xi = float(arrays[f"{k}.xi"][0])
            q.append(QConvParams(QuantizedWeights(arrays[f"{k}.w"], xi, 128.0 * xi),
                                 arrays[f"{k}.scale"], arrays[f"{k}.shift"]))
        model.q_params = q
    else:
        fp = []
        for k in range(n_conv):
            p = ConvParams(arrays[f"{k}.weights"], arrays[f"{k}.bias"])
            if f"{k}.bn_scale" in arrays:
                p.bn_scale, p.bn_mean, p.bn_var = (arrays[f"{k}.bn_scale"], arrays[f"{k}.bn_mean"],
                                                   arrays[f"{k}.bn_var"])
            fp.append(p)
        model.fp_params = fp
    return model


def save_qnet(model: QNetModel, path) -> None:
    atomic_write(path, dumps_qnet(model))


def load_qnet(path) -> QNetModel:
    return loads_qnet(Path(path).read_bytes())


# --------------------------------------------------------------------------
# TT-RNN models

def dumps_ttrnn(model: TTRNNModel) -> bytes:
    return _pack(KIND_TTRNN, {"config": model.config.to_dict()}, model.parameters())


def loads_ttrnn(data: bytes) -> TTRNNModel:
    meta, arrays = _unpack(data, KIND_TTRNN)
    cfg = TTRNNConfig(**meta["config"])
    d = len(cfg.input_modes)
    w_ih, w_hh, bias = {}, {}, {}
    for g in GATES[cfg.cell]:
        w_ih[g] = TTMatrix([arrays[f"ih.{g}.{k}"] for k in range(d)])
        w_hh[g] = TTMatrix([arrays[f"hh.{g}.{k}"] for k in range(d)])
        bias[g] = arrays[f"b.{g}"]
    return TTRNNModel(cfg, w_ih, w_hh, bias, arrays["head.w"], arrays["head.b"])


def save_ttrnn(model: TTRNNModel, path) -> None:
    atomic_write(path, dumps_ttrnn(model))


def load_ttrnn(path) -> TTRNNModel:
    return loads_ttrnn(Path(path).read_bytes())


# --------------------------------------------------------------------------
# feature sequences

def dumps_features(seq: FeatureSequence) -> bytes:
    return _pack(KIND_FEATURES, {"label": int(seq.label)},
                 [("frames", np.asarray(seq.frames, dtype="<f4"))])


def loads_features(data: bytes) -> FeatureSequence:
    meta, arrays = _unpack(data, KIND_FEATURES)
    return FeatureSequence(arrays["frames"], meta["label"])


def save_features(seq: FeatureSequence, path) -> None:
    atomic_write(path, dumps_features(seq))


def load_features(path) -> FeatureSequence:
    return loads_features(Path(path).read_bytes())
