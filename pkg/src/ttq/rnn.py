"""Recurrent sequence classifier with tensor-train input and recurrent maps.

Every gate owns one TT matrix for input-to-hidden and one for
hidden-to-hidden. Training uses softmax cross-entropy with hand-written
backpropagation through time and through the TT contractions.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BadConfig, NonFinite, ShapeError
from .tensor import numel
from .tt import TTMatrix, tt_matmul, tt_matmul_backward, tt_param_count

GATES = {"lstm": ("i", "f", "o", "g"), "plain_rnn": ("h",)}


@dataclass
class TTRNNConfig:
    input_modes: tuple
    hidden_modes: tuple
    ranks_ih: tuple
    ranks_hh: tuple
    classes: int
    cell: str = "lstm"
    dropout_p: float = 0.25
    seed: int = 0
    precision: str = "f64"

    def __post_init__(self):
        self.input_modes = tuple(int(v) for v in self.input_modes)
        self.hidden_modes = tuple(int(v) for v in self.hidden_modes)
        self.ranks_ih = tuple(int(v) for v in self.ranks_ih)
        self.ranks_hh = tuple(int(v) for v in self.ranks_hh)

    @property
    def input_size(self) -> int:
        return numel(self.input_modes)

    @property
    def hidden_size(self) -> int:
        return numel(self.hidden_modes)

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def validate(self) -> None:
        d = len(self.input_modes)
        if self.cell not in GATES:
            raise BadConfig(f"unknown cell {self.cell!r}")
        if d == 0 or len(self.hidden_modes) != d:
            raise BadConfig("input_modes and hidden_modes must have the same nonzero length")
        if min(self.input_modes + self.hidden_modes) < 1:
            raise BadConfig("mode sizes must be positive")
        for name in ("ranks_ih", "ranks_hh"):
            r = getattr(self, name)
            if len(r) != d + 1 or r[0] != 1 or r[-1] != 1 or min(r) < 1:
                raise BadConfig(f"{name} must have {d + 1} positive entries with r_0 = r_d = 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise BadConfig(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.classes < 2:
            raise BadConfig("need at least two classes")
        if self.precision not in ("f32", "f64"):
            raise BadConfig(f"precision must be f32 or f64, got {self.precision!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T, *input_modes) or (T, M)
    label: int = -1

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim < 2 or self.frames.shape[0] == 0:
            raise ShapeError("a feature sequence needs at least one frame")

    def __len__(self):
        return self.frames.shape[0]

    def flat(self) -> np.ndarray:
        return self.frames.reshape(self.frames.shape[0], -1)


class TTRNNModel:
    def __init__(self, config: TTRNNConfig, w_ih: dict, w_hh: dict, bias: dict,
                 head_w: np.ndarray, head_b: np.ndarray):
        self.config = config
        self.w_ih = w_ih
        self.w_hh = w_hh
        self.bias = bias
        self.head_w = head_w
        self.head_b = head_b

    @property
    def gates(self) -> tuple:
        return GATES[self.config.cell]

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """(name, array) pairs in a fixed order; arrays are the live storage."""
        out = []
        for g in self.gates:
            out += [(f"ih.{g}.{k}", c) for k, c in enumerate(self.w_ih[g].cores)]
            out += [(f"hh.{g}.{k}", c) for k, c in enumerate(self.w_hh[g].cores)]
            out.append((f"b.{g}", self.bias[g]))
        out += [("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def param_count(self) -> int:
        return sum(a.size for _, a in self.parameters())

    def tt_param_count(self) -> int:
        return sum(self.w_ih[g].param_count + self.w_hh[g].param_count for g in self.gates)

    def copy(self) -> "TTRNNModel":
        return TTRNNModel(self.config,
                          {g: m.copy() for g, m in self.w_ih.items()},
                          {g: m.copy() for g, m in self.w_hh.items()},
                          {g: b.copy() for g, b in self.bias.items()},
                          self.head_w.copy(), self.head_b.copy())


def _core_std(row_modes, col_modes, ranks) -> float:
    fan_in, fan_out = numel(row_modes), numel(col_modes)
    target_var = 2.0 / (fan_in + fan_out)
    # entry variance of the product is prod(core var) * prod(internal ranks)
    internal = numel(ranks[1:-1]) if len(ranks) > 2 else 1
    return (target_var / internal) ** (1.0 / (2 * len(row_modes)))


def init_model(cfg: TTRNNConfig) -> TTRNNModel:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    dt = cfg.dtype
    H = cfg.hidden_size
    w_ih, w_hh, bias = {}, {}, {}
    for g in GATES[cfg.cell]:
        w_ih[g] = TTMatrix.random(cfg.input_modes, cfg.hidden_modes, cfg.ranks_ih, rng,
                                  _core_std(cfg.input_modes, cfg.hidden_modes, cfg.ranks_ih), dt)
        w_hh[g] = TTMatrix.random(cfg.hidden_modes, cfg.hidden_modes, cfg.ranks_hh, rng,
                                  _core_std(cfg.hidden_modes, cfg.hidden_modes, cfg.ranks_hh), dt)
        bias[g] = np.full(H, 1.0 if g == "f" else 0.0, dtype=dt)
    head_w = (rng.standard_normal((H, cfg.classes)) * np.sqrt(2.0 / (H + cfg.classes))).astype(dt)
    return TTRNNModel(cfg, w_ih, w_hh, bias, head_w, np.zeros(cfg.classes, dt))


def sample_masks(cfg: TTRNNConfig, batch: int, rng: np.random.Generator):
    """Inverted-dropout masks for inputs and hidden state, one per sequence."""
    keep = 1.0 - cfg.dropout_p
    mx = (rng.random((batch, cfg.input_size)) < keep) / keep
    mh = (rng.random((batch, cfg.hidden_size)) < keep) / keep
    return mx.astype(cfg.dtype), mh.astype(cfg.dtype)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --------------------------------------------------------------------------
# single steps (streaming use)

def initial_state(model: TTRNNModel, batch: int = 1):
    H, dt = model.config.hidden_size, model.config.dtype
    return np.zeros((batch, H), dt), np.zeros((batch, H), dt)


def _step(model: TTRNNModel, pre_x: dict, h_prev, c_prev, mh, cache=None):
    hd = h_prev if mh is None else h_prev * mh
    pre = {}
    for g in model.gates:
        hh_cache = [] if cache is not None else None
        pre[g] = pre_x[g] + tt_matmul(model.w_hh[g].cores, hd, hh_cache) + model.bias[g]
        if cache is not None:
            cache[g] = hh_cache
    if model.config.cell == "plain_rnn":
        h = np.tanh(pre["h"])
        return h, c_prev, {"h": h}
    i, f, o = _sigmoid(pre["i"]), _sigmoid(pre["f"]), _sigmoid(pre["o"])
    g = np.tanh(pre["g"])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    return o * tc, c, {"i": i, "f": f, "o": o, "g": g, "tc": tc}


def _input_pre(model: TTRNNModel, x: np.ndarray, mx, cache=None) -> dict:
    xd = x if mx is None else x * mx
    out = {}
    for g in model.gates:
        gc = [] if cache is not None else None
        out[g] = tt_matmul(model.w_ih[g].cores, xd, gc)
        if cache is not None:
            cache[g] = gc
    return out


def cell_forward(model: TTRNNModel, x_t, h_prev=None, c_prev=None, train_mode: bool = False,
                 rng: Optional[np.random.Generator] = None, masks=None):
    """One recurrent step for a single sample; returns (h, c) as flat vectors.

    In train mode inverted-dropout masks are applied to the input and the
    previous hidden state; pass ``masks`` to reuse them across steps.
    """
    cfg = model.config
    x = np.asarray(x_t, dtype=cfg.dtype).reshape(1, -1)
    if x.shape[1] != cfg.input_size:
        raise ShapeError(f"input of size {x.shape[1]} but model expects {cfg.input_size}")
    h0, c0 = initial_state(model)
    h_prev = h0 if h_prev is None else np.asarray(h_prev, cfg.dtype).reshape(1, -1)
    c_prev = c0 if c_prev is None else np.asarray(c_prev, cfg.dtype).reshape(1, -1)
    mx = mh = None
    if train_mode and cfg.dropout_p > 0:
        mx, mh = masks if masks is not None else sample_masks(cfg, 1, rng or np.random.default_rng())
    h, c, _ = _step(model, _input_pre(model, x, mx), h_prev, c_prev, mh)
    return h[0], c[0]


# --------------------------------------------------------------------------
# batched forward / backward

def _stack(model: TTRNNModel, batch: Sequence[FeatureSequence]) -> np.ndarray:
    if not batch:
        raise ShapeError("empty batch")
    lengths = {len(s) for s in batch}
    if len(lengths) != 1:
        raise ShapeError(f"sequences in a batch must share a length, got {sorted(lengths)}")
    x = np.stack([s.flat() for s in batch]).astype(model.config.dtype, copy=False)
    if x.shape[2] != model.config.input_size:
        raise ShapeError(f"frames of size {x.shape[2]} but model expects {model.config.input_size}")
    return x


def _forward(model: TTRNNModel, x: np.ndarray, masks=None, keep: bool = False):
    B, T, M = x.shape
    mx, mh = masks if masks is not None else (None, None)
    xs = x.reshape(B * T, M) if mx is None else (x * mx[:, None, :]).reshape(B * T, M)
    ih_cache = {} if keep else None
    pre_x = _input_pre(model, xs, None, ih_cache)
    pre_x = {g: v.reshape(B, T, -1) for g, v in pre_x.items()}
    h, c = initial_state(model, B)
    steps = []
    for t in range(T):
        hh_cache = {} if keep else None
        h_prev, c_prev = h, c
        h, c, acts = _step(model, {g: pre_x[g][:, t] for g in model.gates}, h, c, mh, hh_cache)
        if keep:
            steps.append((h_prev, c_prev, c, acts, hh_cache))
    logits = h @ model.head_w + model.head_b
    return logits, (h, ih_cache, steps, masks)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sequence_forward(model: TTRNNModel, seq: FeatureSequence, train_mode: bool = False,
                     rng: Optional[np.random.Generator] = None) -> np.ndarray:
    x = _stack(model, [seq])
    masks = None
    if train_mode and model.config.dropout_p > 0:
        masks = sample_masks(model.config, 1, rng or np.random.default_rng())
    return _forward(model, x, masks)[0][0]


def predict_proba(model: TTRNNModel, dataset: Sequence[FeatureSequence],
                  batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        out.append(_softmax(_forward(model, _stack(model, chunk))[0]))
    return np.concatenate(out) if out else np.zeros((0, model.config.classes))


def loss_and_grads(model: TTRNNModel, batch: Sequence[FeatureSequence],
                   masks=None) -> tuple[float, dict]:
    """Mean softmax cross-entropy over ``batch`` and its exact gradient.

    ``masks`` are optional dropout masks from :func:`sample_masks`.
    Gradients are keyed like :meth:`TTRNNModel.parameters`.
    """
    x = _stack(model, batch)
    B, T, _ = x.shape
    labels = np.array([s.label for s in batch])
    C = model.config.classes
    if labels.min() < 0 or labels.max() >= C:
        raise ShapeError(f"labels must lie in [0, {C})")
    logits, (h_T, ih_cache, steps, masks) = _forward(model, x, masks, keep=True)
    if not np.all(np.isfinite(logits)):
        raise NonFinite(f"non-finite logits (max |logit| {np.nanmax(np.abs(logits))})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(B), labels].mean())

    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    grads = {"head.w": h_T.T @ dlogits, "head.b": dlogits.sum(axis=0)}
    for g in model.gates:
        grads[f"b.{g}"] = np.zeros_like(model.bias[g])
        for k, core in enumerate(model.w_hh[g].cores):
            grads[f"hh.{g}.{k}"] = np.zeros_like(core)
    mh = masks[1] if masks is not None else None

    dh = dlogits @ model.head_w.T
    dc = np.zeros_like(dh)
    dpre_x = {g: np.zeros((B, T, model.config.hidden_size), dh.dtype) for g in model.gates}
    for t in range(T - 1, -1, -1):
        h_prev, c_prev, c, acts, hh_cache = steps[t]
        if model.config.cell == "plain_rnn":
            h = acts["h"]
            dpre = {"h": dh * (1.0 - h * h)}
            dc_prev = dc
        else:
            i, f, o, gg, tc = acts["i"], acts["f"], acts["o"], acts["g"], acts["tc"]
            dc = dc + dh * o * (1.0 - tc * tc)
            dpre = {"i": dc * gg * i * (1.0 - i),
                    "f": dc * c_prev * f * (1.0 - f),
                    "o": dh * tc * o * (1.0 - o),
                    "g": dc * i * (1.0 - gg * gg)}
            dc_prev = dc * f
        dh_prev = np.zeros_like(dh)
        for g in model.gates:
            grads[f"b.{g}"] += dpre[g].sum(axis=0)
            dpre_x[g][:, t] = dpre[g]
            dhd, dcores = tt_matmul_backward(model.w_hh[g].cores, hh_cache[g], dpre[g],
                                             need_input_grad=t > 0)
            for k, dg in enumerate(dcores):
                grads[f"hh.{g}.{k}"] += dg
            if t > 0:
                dh_prev += dhd if mh is None else dhd * mh
        dh, dc = dh_prev, dc_prev
    for g in model.gates:
        _, dcores = tt_matmul_backward(model.w_ih[g].cores, ih_cache[g],
                                       dpre_x[g].reshape(B * T, -1), need_input_grad=False)
        for k, dg in enumerate(dcores):
            grads[f"ih.{g}.{k}"] = dg
    for name, gval in grads.items():
        if not np.all(np.isfinite(gval)):
            raise NonFinite(f"non-finite gradient for {name}")
    return loss, grads


# --------------------------------------------------------------------------
# training

class SGDMomentum:
    def __init__(self, lr: float = 1e-2, momentum: float = 0.9):
        self.lr, self.momentum = lr, momentum
        self.velocity: dict = {}

    def step(self, params, grads) -> None:
        for name, p in params:
            v = self.velocity.get(name)
            v = grads[name] if v is None else self.momentum * v + grads[name]
            self.velocity[name] = v
            p -= self.lr * v


class Adam:
    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params, grads) -> None:
        self.t += 1
        b1, b2 = self.betas
        for name, p in params:
            g = grads[name]
            m = self.m[name] = b1 * self.m.get(name, 0.0) + (1 - b1) * g
            v = self.v[name] = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


OPTIMIZERS = {"adam": Adam, "sgd_momentum": SGDMomentum}


@dataclass
class FitOptions:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 16
    optimizer: str = "adam"
    seed: int = 0


def evaluate(model: TTRNNModel, dataset: Sequence[FeatureSequence]) -> float:
    if not dataset:
        return 0.0
    pred = predict_proba(model, dataset).argmax(axis=1)
    return float(np.mean(pred == np.array([s.label for s in dataset])))


def fit(model: TTRNNModel, train: Sequence[FeatureSequence],
        valid: Sequence[FeatureSequence] = (), opts: Optional[FitOptions] = None,
        callback: Optional[Callable[[dict], None]] = None):
    """Train in place; returns ``(model, history)`` with one record per epoch."""
    opts = opts or FitOptions()
    if not train:
        raise ShapeError("training set is empty")
    if opts.optimizer not in OPTIMIZERS:
        raise BadConfig(f"unknown optimizer {opts.optimizer!r}")
    optim = OPTIMIZERS[opts.optimizer](lr=opts.lr)
    shuffle_rng = np.random.default_rng([opts.seed, 0])
    dropout_rng = np.random.default_rng([opts.seed, 1])
    cfg = model.config
    history = []
    for epoch in range(1, opts.epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(len(train))
        total = 0.0
        for s in range(0, len(order), opts.batch_size):
            batch = [train[i] for i in order[s:s + opts.batch_size]]
            masks = sample_masks(cfg, len(batch), dropout_rng) if cfg.dropout_p > 0 else None
            loss, grads = loss_and_grads(model, batch, masks)
            optim.step(model.parameters(), grads)
            total += loss * len(batch)
        record = {
            "epoch": epoch,
            "loss": total / len(train),
            "train_acc": evaluate(model, train),
            "valid_acc": evaluate(model, valid) if valid else None,
            "seconds": time.perf_counter() - start,
        }
        history.append(record)
        if callback:
            callback(record)
    return model, history


def write_history(history: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")


def dense_baseline_config(input_size: int, classes: int, target_params: int,
                          cell: str = "plain_rnn", **kw) -> TTRNNConfig:
    """Single-core (dense) config whose recurrent parameter count is closest
    to ``target_params``."""
    gates = len(GATES[cell])
    best = min(range(1, 4096),
               key=lambda h: abs(gates * (input_size * h + h * h + h) - target_params))
    return TTRNNConfig(input_modes=(input_size,), hidden_modes=(best,), ranks_ih=(1, 1),
                       ranks_hh=(1, 1), classes=classes, cell=cell, **kw)


def input_map_param_count(cfg: TTRNNConfig) -> int:
    """TT parameters of one gate's input-to-hidden map."""
    return tt_param_count(cfg.input_modes, cfg.hidden_modes, cfg.ranks_ih)


def stream_step(model: TTRNNModel, x, h, c):
    """Advance a batch-of-one recurrent state by one frame (inference mode)."""
    x = np.asarray(x, dtype=model.config.dtype).reshape(1, -1)
    if x.shape[1] != model.config.input_size:
        raise ShapeError(f"input of size {x.shape[1]} but model expects {model.config.input_size}")
    h, c, _ = _step(model, _input_pre(model, x, None), h, c, None)
    return h, c


def classify_state(model: TTRNNModel, h) -> np.ndarray:
    return _softmax(np.asarray(h).reshape(1, -1) @ model.head_w + model.head_b)[0]
