"""Acceptance gate: one test per criterion, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary lists
one PASS/FAIL line per criterion together with the measured quantities.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from ttq import cli, modelio, pipeline, qnet, rnn
from ttq.detection import DetectionBox, average_precision, iou
from ttq.quant import dequantize_activation, quantize_activation, quantize_weight
from ttq.rnn import FitOptions, TTRNNConfig, init_model
from ttq.tt import (TTMatrix, dense_flops, tt_flops, tt_from_dense, tt_matvec, tt_param_count,
                    tt_reconstruct)

from conftest import small_config
from oracles import dense_sequence, gradient_check, masks_for, random_batch, small_lstm
from test_detection import brute_force_ap
from test_modelio import flip_bits


@pytest.fixture
def detail(record_property):
    return lambda text: record_property("detail", text)


def test_criterion_01_quantization_bounds(detail):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    boundary = np.array([0.0, 1 / 128, -1 / 128, 1.0, -1.0, 1 - 1e-9, -(1 - 1e-9)])
    w = np.concatenate([rng.uniform(-1, 1, 1_000_000), boundary])
    wq = quantize_weight(w)
    w_err = np.max(np.abs(w - wq.astype(np.float64) / 128))
    a = np.concatenate([rng.uniform(0, 1, 1_000_000), [0.0, 1.0, 1 - 1e-12, 1 / 256]])
    a_err = np.max(np.abs(a - dequantize_activation(quantize_activation(a))))
    elapsed = time.perf_counter() - start
    detail(f"max weight err {w_err:.6g} (<= {1 / 128:.6g}), max act err {a_err:.6g} "
           f"(<= {1 / 256:.6g}), {elapsed:.2f}s")
    assert w_err <= 1 / 128
    assert a_err <= 1 / 256
    assert wq.min() >= -127
    assert elapsed < 10


def test_criterion_02_layer_param_arithmetic(detail):
    model = qnet.build_qnet(qnet.builtin_cfg("tiny-yolo-voc"))
    rows = qnet.report_layers(model)
    params = [rows[0]["params"], rows[1]["params"], rows[2]["params"], rows[-1]["params"]]
    byte_ratios = {r["fp_bytes"] / r["q_bytes"] for r in rows}
    fp_file = len(modelio.dumps_qnet(model))
    q_file = len(modelio.dumps_qnet(qnet.quantize_model(model)))
    ratio = fp_file / q_file
    detail(f"params {params}, layer byte ratios {sorted(byte_ratios)}, "
           f"files {fp_file:,} B / {q_file:,} B = {ratio:.4f}")
    assert params == [432, 4_608, 18_432, 128_000]
    assert byte_ratios == {4.0}
    assert ratio == pytest.approx(3.994, rel=0.005)


def test_criterion_03_quantized_vs_float(detail):
    rng = np.random.default_rng(0)
    errs = []
    for trial in range(20):
        channels = tuple(int(c) for c in rng.integers(4, 33, 3))
        model = qnet.init_random_weights(qnet.build_qnet(small_config(channels)), seed=trial)
        model = qnet.quantize_model(model)
        frame = rng.random((16, 16, 3))
        q, f = qnet.forward(model, frame), qnet.forward_float(model, frame)
        errs.append(np.linalg.norm(q - f) / np.linalg.norm(f))
    detail(f"relative L2 error max {max(errs):.4f}, mean {np.mean(errs):.4f} (<= 0.05)")
    assert max(errs) <= 0.05


def test_criterion_04_tt_oracle_equivalence(detail):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_rec = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 4))
        row_modes = [int(v) for v in rng.integers(1, 5, d)]
        col_modes = [int(v) for v in rng.integers(1, 5, d)]
        a = rng.normal(size=(int(np.prod(row_modes)), int(np.prod(col_modes))))
        ttm, _ = tt_from_dense(a, row_modes, col_modes, tol=0.0)
        worst_rec = max(worst_rec, np.linalg.norm(tt_reconstruct(ttm) - a) / np.linalg.norm(a))
    worst_mv = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 4))
        row_modes = [int(v) for v in rng.integers(1, 5, d)]
        col_modes = [int(v) for v in rng.integers(1, 5, d)]
        ranks = [1] + [int(v) for v in rng.integers(1, 4, d - 1)] + [1]
        ttm = TTMatrix.random(row_modes, col_modes, ranks, rng)
        x, b = rng.normal(size=ttm.shape[0]), rng.normal(size=ttm.shape[1])
        expected = tt_reconstruct(ttm).T @ x + b
        worst_mv = max(worst_mv, np.max(np.abs(tt_matvec(ttm, x, b).ravel() - expected)))
    elapsed = time.perf_counter() - start
    detail(f"reconstruction rel err {worst_rec:.2e}, matvec err {worst_mv:.2e} (<= 1e-10), "
           f"{elapsed:.2f}s")
    assert worst_rec <= 1e-10
    assert worst_mv <= 1e-10
    assert elapsed < 30


def test_criterion_05_parameter_accounting(detail, capsys):
    dense = dense_flops((57_600,), (1024,))
    published = [round(r["ratio"]) for r in cli.compression_rows() if r["basis"] == "published"]
    formula = tt_param_count((17, 19, 19, 25), (4, 4, 4, 4), (1, 4, 4, 4, 1))
    cli.main(["report"])
    note = "not recoverable" in capsys.readouterr().out
    detail(f"dense {dense:,}, published ratios {published}, formula count {formula:,}, "
           f"discrepancy note printed: {note}")
    assert dense == 58_982_400 == cli.DENSE_BASELINE_PARAMS
    assert sorted(published) == [15_047, 17_554]
    assert formula == 3_104
    assert note


def test_criterion_06_gradient_check(detail):
    start = time.perf_counter()
    model = small_lstm(21)
    batch = random_batch(model, 4, 4, 22)
    errs = gradient_check(model, batch, 240, seed=23, masks=masks_for(model, batch, 24))
    elapsed = time.perf_counter() - start
    detail(f"{errs.size} coordinates, worst relative error {errs.max():.2e} (< 1e-4), "
           f"{elapsed:.2f}s")
    assert errs.size >= 200
    assert errs.max() < 1e-4
    assert elapsed < 60


def test_criterion_07_dense_equivalence(detail):
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(100):
        cell = "lstm" if trial % 2 == 0 else "plain_rnn"
        model = small_lstm(1000 + trial, cell)
        x = rng.normal(size=(int(rng.integers(1, 6)), 2, 3))
        states, _ = dense_sequence(model, x)
        h, c = rnn.initial_state(model)
        for t in range(len(x)):
            hv, cv = rnn.cell_forward(model, x[t], h, c)
            worst = max(worst, np.max(np.abs(hv - states[t])))
            h, c = hv, cv
    detail(f"max hidden-state difference {worst:.2e} over 100 trials (<= 1e-9)")
    assert worst <= 1e-9


@pytest.fixture(scope="module")
def synthetic_task():
    clips = pipeline.synth_dataset(5, 60, shape=(32, 32), n_frames=10, seed=1)
    order = np.random.default_rng(0).permutation(len(clips))
    train_clips = [clips[i] for i in order[:200]]
    test_clips = [clips[i] for i in order[200:]]
    net = qnet.quantize_model(qnet.init_random_weights(
        qnet.build_qnet(qnet.builtin_cfg("synth-tiny")), seed=0))
    train = pipeline.preprocess_dataset(net, train_clips, 6, seed=0, input_modes=(8, 8, 8))
    test = pipeline.preprocess_dataset(net, test_clips, 6, seed=1, input_modes=(8, 8, 8))
    return net, train, test, test_clips


def test_criterion_08_desk_scale_learning(detail, synthetic_task):
    net, train, test, test_clips = synthetic_task
    start = time.perf_counter()
    cfg = TTRNNConfig(input_modes=(8, 8, 8), hidden_modes=(4, 4, 4), ranks_ih=(1, 4, 4, 1),
                      ranks_hh=(1, 4, 4, 1), classes=5, dropout_p=0.25, seed=0)
    model = init_model(cfg)
    model, hist = rnn.fit(model, train, test, FitOptions(epochs=50, lr=0.01, batch_size=16))
    elapsed = time.perf_counter() - start
    train_acc, test_acc = rnn.evaluate(model, train), rnn.evaluate(model, test)

    hits = sum(pipeline.comprehend(net, model, clip, k=6, seed=i).action_class == clip.label
               for i, clip in enumerate(test_clips))
    comp_acc = hits / len(test_clips)

    base_cfg = rnn.dense_baseline_config(512, 5, model.param_count(), cell="plain_rnn", seed=0,
                                         dropout_p=0.25)
    base = init_model(base_cfg)
    base_start = time.perf_counter()
    base, base_hist = rnn.fit(base, train, test, FitOptions(epochs=50, lr=0.01, batch_size=16))
    base_time = time.perf_counter() - base_start
    detail(f"TT-LSTM ({model.param_count():,} params) train {train_acc:.3f} test {test_acc:.3f} "
           f"in {elapsed:.1f}s; comprehend on held-out clips {comp_acc:.3f}; dense RNN baseline "
           f"({base.param_count():,} params) test {rnn.evaluate(base, test):.3f} in {base_time:.1f}s")
    assert len(hist) == 50 and len(base_hist) == 50
    assert train_acc >= 0.95
    assert test_acc >= 0.85
    assert comp_acc >= 0.85
    assert elapsed < 300


def test_criterion_09_flop_economy(detail):
    row_modes, col_modes, ranks = (8, 20, 20, 18), (4, 4, 4, 4), (1, 4, 4, 4, 1)
    tt_mults = tt_flops(row_modes, col_modes, ranks)
    dense_mults = dense_flops(row_modes, col_modes)
    ratio = dense_mults / tt_mults
    bench = cli.bench_tt_matvec(row_modes, col_modes, ranks, reps=20, seed=0)
    detail(f"multiplies {tt_mults:,} vs dense {dense_mults:,} = {ratio:.1f}x fewer (> 1000x "
           f"required); wall-clock {bench['seconds'] * 1e3:.2f} ms vs "
           f"{bench['baseline_seconds'] * 1e3:.2f} ms = {bench['speedup']:.2f}x speed-up")
    assert bench["speedup"] > 1.0
    assert ratio > 1000


def test_criterion_10_metrics_oracle(detail):
    box = DetectionBox.from_corners
    cases = [iou(box(0, 0, 2, 2), box(0, 0, 2, 2)), iou(box(0, 0, 1, 1), box(2, 2, 3, 3)),
             iou(box(0, 0, 2, 2), box(1, 0, 3, 2))]
    truths = [box(0, 0, 1, 1), box(5, 5, 6, 6)]
    preds = [box(0, 0, 1, 1, confidence=0.9), box(10, 10, 11, 11, confidence=0.8),
             box(5, 5, 6, 6, confidence=0.7)]
    ap = average_precision(preds, truths)
    oracle = brute_force_ap([1, 0, 1], 2)
    detail(f"IOU {cases}, AP {ap:.7f} vs brute force {float(oracle):.7f}")
    assert cases[0] == 1.0 and cases[1] == 0.0
    assert Fraction(cases[2]).limit_denominator(1000) == Fraction(1, 3)
    assert abs(cases[2] - 1 / 3) <= 1e-15
    assert oracle == Fraction(5, 6)
    assert ap == pytest.approx(0.8333, abs=1e-4)
    assert ap == pytest.approx(float(oracle), abs=1e-6)


def test_criterion_11_io(detail, synth_net):
    import struct

    checks = {}
    data = modelio.dumps_qnet(synth_net)
    checks["qnet"] = modelio.dumps_qnet(modelio.loads_qnet(data)) == data
    fp = qnet.init_random_weights(qnet.build_qnet(small_config()), 1)
    data = modelio.dumps_qnet(fp)
    checks["qnet fp32"] = modelio.dumps_qnet(modelio.loads_qnet(data)) == data
    model = small_lstm(3)
    data = modelio.dumps_ttrnn(model)
    back = modelio.loads_ttrnn(data)
    checks["ttrnn"] = modelio.dumps_ttrnn(back) == data and all(
        np.array_equal(a, b) for (_, a), (_, b) in zip(model.parameters(), back.parameters()))
    seq = rnn.FeatureSequence(np.random.default_rng(0).normal(size=(6, 8, 8, 8)).astype(np.float32), 2)
    data = modelio.dumps_features(seq)
    checks["features"] = np.array_equal(modelio.loads_features(data).frames, seq.frames)

    layer = qnet.build_qnet(small_config())
    rng = np.random.default_rng(1)
    blob = struct.pack("<iiiq", 0, 2, 0, 99)
    for l in layer.conv_layers:
        n = l.out_ch * (4 if l.has_bn else 1) + l.param_count
        blob += np.abs(rng.normal(size=n)).astype("<f4").tobytes()
    checks["darknet"] = qnet.save_darknet_weights(qnet.load_darknet_weights(layer, blob)) == blob

    detected = 0
    for _, bad in flip_bits(modelio.dumps_ttrnn(model), 100, 5):
        try:
            modelio.loads_ttrnn(bad)
        except (modelio.BadChecksum, modelio.BadMagic, modelio.VersionError):
            detected += 1
    detail(f"round-trips {checks}, corruption detected {detected}/100")
    assert all(checks.values())
    assert detected == 100
