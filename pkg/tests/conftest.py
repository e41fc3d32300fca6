import numpy as np
import pytest

from ttq import qnet


def small_config(channels=(8, 16, 12), size=16, bn=True):
    """Three conv layers on a square input, last one linear."""
    layers = []
    for i, c in enumerate(channels):
        last = i == len(channels) - 1
        layers.append({"kind": "conv", "filters": c, "size": 1 if last else 3, "stride": 1,
                       "pad": 0 if last else 1, "batch_normalize": bn and not last,
                       "activation": "linear" if last else "leaky"})
    return {"net": {"height": size, "width": size, "channels": 3}, "layers": layers}


@pytest.fixture(scope="session")
def synth_net():
    model = qnet.build_qnet(qnet.builtin_cfg("synth-tiny"))
    return qnet.quantize_model(qnet.init_random_weights(model, seed=0))


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" in nodeid and rep.when == "call":
                detail = "; ".join(v for k, v in rep.user_properties if k == "detail")
                rows.append((nodeid.split("::")[-1], outcome, detail))
    if rows:
        terminalreporter.section("acceptance criteria")
        for name, outcome, detail in sorted(rows):
            status = "PASS" if outcome == "passed" else "FAIL"
            terminalreporter.write_line(f"{status}  {name}  {detail}".rstrip())
