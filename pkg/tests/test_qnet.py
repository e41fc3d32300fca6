import struct

import numpy as np
import pytest

from ttq import qnet
from ttq.errors import BadChain, BadConfig, OverflowRisk, TrailingBytes, Truncated

from conftest import small_config

ONE_LAYER = """
[net]
height=8
width=8
channels=3

[convolutional]
batch_normalize=1
filters=16
size=3
stride=1
pad=1
activation=leaky
"""


def test_tiny_voc_structure():
    model = qnet.build_qnet(qnet.builtin_cfg("tiny-yolo-voc"))
    convs = model.conv_layers
    assert convs[0].param_count == 432
    assert convs[1].param_count == 4_608
    assert convs[2].param_count == 18_432
    assert convs[-1].param_count == 128_000
    assert model.layer_shapes()[0] == (608, 608, 16)
    assert model.output_shape == (19, 19, 125)
    assert model.grid.S == 19 and model.grid.channels == 125


def test_coco_output_shape():
    model = qnet.build_qnet(qnet.builtin_cfg("tiny-yolo-coco"))
    assert model.output_shape == (19, 19, 425)


def test_bad_chain():
    cfg = small_config()
    cfg["layers"][1]["in_ch"] = 5
    with pytest.raises(BadChain):
        qnet.build_qnet(cfg)


def test_grid_mismatch_is_bad_chain():
    cfg = small_config()
    cfg["region"] = {"classes": 3, "num": 1, "anchors": [1.0, 1.0]}
    with pytest.raises(BadChain):
        qnet.build_qnet(cfg)


def test_overflow_risk_at_build():
    cfg = {"net": {"height": 4, "width": 4, "channels": 8192},
           "layers": [{"kind": "conv", "filters": 1, "size": 3, "pad": 1}]}
    with pytest.raises(OverflowRisk):
        qnet.build_qnet(cfg)


def test_parse_cfg_rejects_garbage():
    with pytest.raises(BadConfig):
        qnet.parse_cfg("[net]\nwhat is this\n")
    with pytest.raises(BadConfig):
        qnet.parse_cfg("[shortcut]\nfrom=-3\n")


class TestDarknetWeights:
    def make(self):
        model = qnet.build_qnet(qnet.parse_cfg(ONE_LAYER))
        rng = np.random.default_rng(0)
        n = (16 * 4 + 432)
        payload = rng.normal(size=n).astype("<f4")
        payload[32:48] = np.abs(payload[32:48]) + 0.1  # keep variances positive
        data = struct.pack("<iiiq", 0, 2, 0, 12345) + payload.tobytes()
        return model, data

    def test_round_trip(self):
        model, data = self.make()
        assert len(data) == 20 + (16 + 16 + 16 + 16 + 432) * 4
        loaded = qnet.load_darknet_weights(model, data)
        assert loaded.darknet_header == (0, 2, 0, 12345)
        assert qnet.save_darknet_weights(loaded) == data
        p = loaded.fp_params[0]
        assert p.weights.shape == (16, 3, 3, 3)
        np.testing.assert_array_equal(p.weights.ravel(),
                                      np.frombuffer(data[20 + 64 * 4:], "<f4"))

    def test_old_header(self):
        model, data = self.make()
        old = struct.pack("<iiii", 0, 1, 0, 7) + data[20:]
        loaded = qnet.load_darknet_weights(model, old)
        assert qnet.save_darknet_weights(loaded) == old

    def test_errors(self):
        model, data = self.make()
        with pytest.raises(Truncated):
            qnet.load_darknet_weights(model, b"")
        with pytest.raises(Truncated):
            qnet.load_darknet_weights(model, data[:-4])
        with pytest.raises(TrailingBytes):
            qnet.load_darknet_weights(model, data + b"\0\0\0\0")


def test_quantize_zero_model():
    model = qnet.quantize_model(qnet.build_qnet(small_config()))
    assert model.quantized
    assert all(not p.weights.values.any() for p in model.q_params)


def test_storage_ratio_tiny_voc():
    model = qnet.build_qnet(qnet.builtin_cfg("tiny-yolo-voc"))
    fp, q = qnet.storage_bytes(model)
    assert fp / 1e6 == pytest.approx(63.5, abs=0.05)
    assert q / 1e6 == pytest.approx(15.9, abs=0.05)
    assert fp / q == pytest.approx(3.994, rel=0.005)


def test_report_rows():
    model = qnet.build_qnet(qnet.builtin_cfg("tiny-yolo-voc"))
    rows = qnet.report_layers(model)
    assert [r["layer"] for r in rows][:2] == ["CONV_1", "CONV_2"]
    assert rows[-1]["layer"] == "CONV_final"
    for row, layer in zip(rows, model.conv_layers):
        assert row["params"] == layer.kernel ** 2 * layer.in_ch * layer.out_ch
        assert row["fp_bytes"] == 4 * row["params"] and row["q_bytes"] == row["params"]
    assert rows[0]["fp_bytes"] == 1728 and rows[0]["q_bytes"] == 432
    assert rows[0]["output"] == (608, 608, 16)
    assert rows[1]["fp_bytes"] / 1024 == pytest.approx(17.9, rel=0.01)
    assert "CONV_final" in qnet.format_report(rows)


def test_forward_zero():
    model = qnet.quantize_model(qnet.build_qnet(small_config()))
    out = qnet.forward(model, np.zeros((16, 16, 3)))
    assert out.shape == (16, 16, 12) and not out.any()


def test_forward_requires_quantized():
    with pytest.raises(BadConfig):
        qnet.forward(qnet.build_qnet(small_config()), np.zeros((16, 16, 3)))


@pytest.mark.parametrize("name,shape", [("tiny-yolo-voc", (19, 19, 125)),
                                        ("tiny-yolo-coco", (19, 19, 425))])
def test_forward_full_size(name, shape):
    model = qnet.quantize_model(qnet.build_qnet(qnet.builtin_cfg(name)))
    out = qnet.forward(model, np.zeros((608, 608, 3)))
    assert out.shape == shape and not out.any()


def test_quantized_tracks_float():
    rng = np.random.default_rng(3)
    errs = []
    for seed in range(5):
        model = qnet.quantize_model(qnet.init_random_weights(qnet.build_qnet(small_config()), seed))
        frame = rng.random((16, 16, 3))
        q, f = qnet.forward(model, frame), qnet.forward_float(model, frame)
        errs.append(np.linalg.norm(q - f) / np.linalg.norm(f))
    assert max(errs) <= 0.05
