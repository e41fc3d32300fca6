"""Quantized feed-forward detector: layer specs, weight import, forward pass.

A network is described by a Darknet-style ``.cfg`` text (``[net]``,
``[convolutional]``, ``[maxpool]`` and ``[region]`` sections) or by the
equivalent dict produced by :func:`parse_cfg`. Full-precision parameters
are kept in Darknet order, ``(out, in, ky, kx)``; quantization converts
them to int8 kernels in ``(ky, kx, in, out)`` layout plus a per-channel
fp32 affine that absorbs batch norm and bias.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from . import quant
from .detection import DetectionGridConfig
from .errors import BadChain, BadConfig, BadMagic, ShapeError, TrailingBytes, Truncated

FP_BYTES = 4
Q_BYTES = 1
BN_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" or "maxpool"
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    pad: int = 0
    has_bn: bool = False
    activation: str = "linear"  # "leaky" or "linear"

    @property
    def param_count(self) -> int:
        if self.kind != "conv":
            return 0
        return self.kernel * self.kernel * self.in_ch * self.out_ch

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        if self.kind == "conv":
            return ((h + 2 * self.pad - self.kernel) // self.stride + 1,
                    (w + 2 * self.pad - self.kernel) // self.stride + 1)
        if self.stride == 1:
            return h, w
        return (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1


@dataclass
class ConvParams:
    weights: np.ndarray  # float32 (out, in, ky, kx)
    bias: np.ndarray  # float32 (out,); acts as the BN shift when BN is present
    bn_scale: Optional[np.ndarray] = None
    bn_mean: Optional[np.ndarray] = None
    bn_var: Optional[np.ndarray] = None

    @property
    def has_bn(self) -> bool:
        return self.bn_scale is not None


@dataclass
class QConvParams:
    weights: quant.QuantizedWeights  # int8 (ky, kx, in, out)
    scale: np.ndarray  # float32 (out,)
    shift: np.ndarray  # float32 (out,)


@dataclass
class QNetModel:
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]  # (rows, cols, channels)
    fp_params: list[ConvParams] = field(default_factory=list)
    q_params: Optional[list[QConvParams]] = None
    grid: Optional[DetectionGridConfig] = None
    darknet_header: tuple[int, int, int, int] = (0, 2, 0, 0)
    bn_eps: float = BN_EPS

    @property
    def quantized(self) -> bool:
        return self.q_params is not None

    @property
    def conv_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "conv"]

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """Output (rows, cols, channels) after each layer."""
        h, w, _ = self.input_shape
        shapes = []
        for layer in self.layers:
            h, w = layer.output_hw(h, w)
            shapes.append((h, w, layer.out_ch))
        return shapes

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return self.layer_shapes()[-1]


# --------------------------------------------------------------------------
# configuration

def parse_cfg(text: str) -> dict:
    """Parse Darknet-style cfg text into ``{"net": {...}, "layers": [...], "region": {...}}``."""
    sections: list[tuple[str, dict]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise BadConfig(f"line {lineno}: malformed section header {raw!r}")
            sections.append((line[1:-1].strip().lower(), {}))
        elif "=" in line and sections:
            key, value = line.split("=", 1)
            sections[-1][1][key.strip()] = value.strip()
        else:
            raise BadConfig(f"line {lineno}: cannot parse {raw!r}")

    config: dict = {"net": {}, "layers": [], "region": None}
    for name, opts in sections:
        if name == "net":
            config["net"] = {
                "height": int(opts.get("height", 416)),
                "width": int(opts.get("width", 416)),
                "channels": int(opts.get("channels", 3)),
            }
        elif name in ("convolutional", "conv"):
            size = int(opts.get("size", 1))
            pad = size // 2 if int(opts.get("pad", 0)) else int(opts.get("padding", 0))
            config["layers"].append({
                "kind": "conv",
                "filters": int(opts["filters"]),
                "size": size,
                "stride": int(opts.get("stride", 1)),
                "pad": pad,
                "batch_normalize": bool(int(opts.get("batch_normalize", 0))),
                "activation": opts.get("activation", "linear"),
            })
        elif name == "maxpool":
            config["layers"].append({
                "kind": "maxpool",
                "size": int(opts.get("size", 2)),
                "stride": int(opts.get("stride", 2)),
            })
        elif name == "region":
            anchors = [float(a) for a in opts.get("anchors", "").replace(" ", "").split(",") if a]
            config["region"] = {
                "classes": int(opts.get("classes", 20)),
                "num": int(opts.get("num", 5)),
                "anchors": anchors,
            }
        else:
            raise BadConfig(f"unsupported section [{name}]")
    return config


def load_cfg(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_cfg(fh.read())


def builtin_cfg(name: str) -> dict:
    """Load one of the bundled configs: ``tiny-yolo-voc``, ``tiny-yolo-coco``, ``synth-tiny``."""
    text = resources.files("ttq.configs").joinpath(f"{name}.cfg").read_text(encoding="utf-8")
    return parse_cfg(text)


def build_qnet(config: dict) -> QNetModel:
    """Build a model with zero-initialized weights from a parsed config.

    Layer dicts may carry an explicit ``in_ch``; it must match the channel
    count produced by the previous layer.
    """
    net = config.get("net", {})
    h, w, c = int(net.get("height", 416)), int(net.get("width", 416)), int(net.get("channels", 3))
    layers: list[LayerSpec] = []
    channels = c
    for i, spec in enumerate(config["layers"]):
        if "in_ch" in spec and int(spec["in_ch"]) != channels:
            raise BadChain(f"layer {i}: in_ch {spec['in_ch']} but previous layer gives {channels}")
        if spec["kind"] == "conv":
            act = spec.get("activation", "linear")
            if act not in ("leaky", "linear"):
                raise BadConfig(f"layer {i}: unsupported activation {act!r}")
            size = int(spec["size"])
            quant.check_accumulator_bound(size, size, channels)
            layer = LayerSpec("conv", channels, int(spec["filters"]), size,
                              int(spec.get("stride", 1)), int(spec.get("pad", 0)),
                              bool(spec.get("batch_normalize", False)), act)
        elif spec["kind"] == "maxpool":
            layer = LayerSpec("maxpool", channels, channels, int(spec["size"]),
                              int(spec.get("stride", 2)))
        else:
            raise BadConfig(f"layer {i}: unknown kind {spec['kind']!r}")
        h, w = layer.output_hw(h, w)
        if h < 1 or w < 1:
            raise BadChain(f"layer {i}: spatial size collapses to {h}x{w}")
        layers.append(layer)
        channels = layer.out_ch
    if not layers:
        raise BadConfig("network has no layers")

    grid = None
    region = config.get("region")
    if region:
        anchors = region["anchors"]
        pairs = [(anchors[2 * b], anchors[2 * b + 1]) for b in range(len(anchors) // 2)]
        grid = DetectionGridConfig(S=h, B=region["num"], C=region["classes"], anchors=pairs)
        if grid.channels != channels or w != h:
            raise BadChain(f"final tensor {h}x{w}x{channels} does not fit grid "
                           f"{grid.S}x{grid.S}x{grid.channels}")

    model = QNetModel(layers=layers, input_shape=(int(net.get("height", 416)),
                                                  int(net.get("width", 416)), c), grid=grid)
    model.fp_params = [_zero_params(l) for l in model.conv_layers]
    return model


def _zero_params(layer: LayerSpec) -> ConvParams:
    k, o = layer.kernel, layer.out_ch
    p = ConvParams(weights=np.zeros((o, layer.in_ch, k, k), np.float32),
                   bias=np.zeros(o, np.float32))
    if layer.has_bn:
        p.bn_scale = np.ones(o, np.float32)
        p.bn_mean = np.zeros(o, np.float32)
        p.bn_var = np.ones(o, np.float32)
    return p


def init_random_weights(model: QNetModel, seed: int, gain: float = 1.0) -> QNetModel:
    """Fill full-precision parameters with He-scaled random values."""
    rng = np.random.default_rng(seed)
    params = []
    for layer in model.conv_layers:
        k, o, i = layer.kernel, layer.out_ch, layer.in_ch
        std = gain * np.sqrt(2.0 / (k * k * i))
        p = ConvParams(weights=(rng.standard_normal((o, i, k, k)) * std).astype(np.float32),
                       bias=(0.1 * rng.standard_normal(o)).astype(np.float32))
        if layer.has_bn:
            p.bn_scale = rng.uniform(0.8, 1.2, o).astype(np.float32)
            p.bn_mean = (0.1 * rng.standard_normal(o)).astype(np.float32)
            p.bn_var = rng.uniform(0.5, 1.5, o).astype(np.float32)
        params.append(p)
    return replace(model, fp_params=params, q_params=None)


# --------------------------------------------------------------------------
# Darknet weight files

def _header_struct(major: int, minor: int) -> struct.Struct:
    return struct.Struct("<iiiq" if major * 10 + minor >= 2 else "<iiii")


def load_darknet_weights(model: QNetModel, data: bytes) -> QNetModel:
    """Populate full-precision parameters from a Darknet ``.weights`` byte string."""
    if len(data) < 12:
        raise Truncated(f"weights file holds {len(data)} bytes, header needs at least 12")
    major, minor, revision = struct.unpack_from("<iii", data, 0)
    if not (0 <= major < 10 and 0 <= minor < 100 and revision >= 0):
        raise BadMagic(f"implausible Darknet header version {major}.{minor}.{revision}")
    hdr = _header_struct(major, minor)
    if len(data) < hdr.size:
        raise Truncated("weights file ends inside the header")
    seen = hdr.unpack_from(data, 0)[3]
    offset = hdr.size

    def take(n: int) -> np.ndarray:
        nonlocal offset
        end = offset + 4 * n
        if end > len(data):
            raise Truncated(f"needed {end} bytes, file has {len(data)}")
        out = np.frombuffer(data, dtype="<f4", count=n, offset=offset).astype(np.float32)
        offset = end
        return out

    params = []
    for layer in model.conv_layers:
        o, k = layer.out_ch, layer.kernel
        p = ConvParams(weights=np.empty(0, np.float32), bias=take(o))
        if layer.has_bn:
            p.bn_scale, p.bn_mean, p.bn_var = take(o), take(o), take(o)
        p.weights = take(o * layer.in_ch * k * k).reshape(o, layer.in_ch, k, k)
        params.append(p)
    if offset != len(data):
        raise TrailingBytes(f"{len(data) - offset} unread bytes after the last layer")
    return replace(model, fp_params=params, q_params=None,
                   darknet_header=(major, minor, revision, seen))


def save_darknet_weights(model: QNetModel) -> bytes:
    major, minor, revision, seen = model.darknet_header
    chunks = [_header_struct(major, minor).pack(major, minor, revision, seen)]
    for p in model.fp_params:
        arrays = [p.bias]
        if p.has_bn:
            arrays += [p.bn_scale, p.bn_mean, p.bn_var]
        arrays.append(p.weights)
        chunks += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays]
    return b"".join(chunks)


# --------------------------------------------------------------------------
# quantization and inference

def folded_affine(model: QNetModel, p: ConvParams) -> tuple[np.ndarray, np.ndarray]:
    if p.has_bn:
        return quant.bn_fold(p.bn_scale, p.bias, p.bn_mean, p.bn_var, model.bn_eps)
    return np.ones_like(p.bias, dtype=np.float64), p.bias.astype(np.float64)


def quantize_model(model: QNetModel) -> QNetModel:
    q = []
    for p in model.fp_params:
        scale, shift = folded_affine(model, p)
        q.append(QConvParams(
            weights=quant.quantize_weights_tensor(p.weights.transpose(2, 3, 1, 0)),
            scale=scale.astype(np.float32), shift=shift.astype(np.float32)))
    return replace(model, q_params=q)


def _check_frame(model: QNetModel, frame: np.ndarray) -> None:
    if frame.shape != tuple(model.input_shape):
        raise ShapeError(f"frame shape {frame.shape} != network input {model.input_shape}")


def forward(model: QNetModel, frame: np.ndarray) -> np.ndarray:
    """Run the 8-bit pipeline on one frame and return the final real-valued tensor.

    Every conv runs as an integer kernel; intermediate maps are re-quantized
    to uint8 after the folded affine and activation. The last conv layer's
    output is returned in the real domain without clamping.
    """
    if not model.quantized:
        raise BadConfig("model is not quantized; call quantize_model first")
    _check_frame(model, frame)
    act = quant.QuantizedActivations(quant.quantize_activation(frame))
    qp = iter(model.q_params)
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        if layer.kind == "maxpool":
            act = quant.qmaxpool(act, layer.kernel, layer.stride)
            continue
        p = next(qp)
        acc = quant.qconv2d(act, p.weights, layer.stride, layer.pad)
        if i == last:
            out = acc.dequantize() * p.scale + p.shift
            return quant.leaky_relu(out) if layer.activation == "leaky" else out
        act = quant.requantize(acc, p.scale, p.shift, leaky=layer.activation == "leaky")
    return act.dequantize()


def forward_float(model: QNetModel, frame: np.ndarray) -> np.ndarray:
    """Full-precision reference with the same layer flow as :func:`forward`."""
    _check_frame(model, frame)
    x = np.asarray(frame, dtype=np.float64)
    fp = iter(model.fp_params)
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        if layer.kind == "maxpool":
            x = quant.maxpool_float(x, layer.kernel, layer.stride)
            continue
        p = next(fp)
        scale, shift = folded_affine(model, p)
        x = quant.conv2d_float(x, p.weights.transpose(2, 3, 1, 0).astype(np.float64),
                               layer.stride, layer.pad) * scale + shift
        if layer.activation == "leaky":
            x = quant.leaky_relu(x)
        if i != last:
            x = np.clip(x, 0.0, 1.0)
    return x


# --------------------------------------------------------------------------
# storage accounting

def storage_bytes(model: QNetModel) -> tuple[int, int]:
    """(fp32 bytes, quantized bytes) of all stored parameters.

    The fp32 side counts kernels, biases and batch-norm statistics. The
    quantized side counts int8 kernels, one fp32 scale factor per kernel,
    and the fp32 per-channel scale/shift pair.
    """
    fp = q = 0
    for layer in model.conv_layers:
        per_channel = 4 if layer.has_bn else 1
        fp += FP_BYTES * (layer.param_count + per_channel * layer.out_ch)
        q += Q_BYTES * layer.param_count + FP_BYTES * (1 + 2 * layer.out_ch)
    return fp, q


def report_layers(model: QNetModel) -> list[dict]:
    rows = []
    h, w, c = model.input_shape
    convs = model.conv_layers
    n = 0
    for layer, shape in zip(model.layers, model.layer_shapes()):
        if layer.kind == "conv":
            n += 1
            name = "CONV_final" if n == len(convs) else f"CONV_{n}"
            rows.append({
                "layer": name,
                "filters": (h, w, c),
                "output": shape,
                "params": layer.param_count,
                "fp_bytes": FP_BYTES * layer.param_count,
                "q_bytes": Q_BYTES * layer.param_count,
            })
        h, w, c = shape
    return rows


def format_report(rows: Sequence[dict]) -> str:
    def dims(t):
        return "x".join(str(v) for v in t)

    lines = [f"{'Layer':<12}{'Filters':>16}{'Output':>16}{'Parameters':>14}{'Memory (fp32, int8)':>26}"]
    for r in rows:
        mem = f"{r['fp_bytes'] / 1024:.1f}KB, {r['q_bytes'] / 1024:.1f}KB"
        lines.append(f"{r['layer']:<12}{dims(r['filters']):>16}{dims(r['output']):>16}"
                     f"{r['params']:>14,}{mem:>26}")
    return "\n".join(lines)
