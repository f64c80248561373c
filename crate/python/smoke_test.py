"""Smoke test for the Python bindings.

Build and stage the extension first:

    cargo build -p nrnm-py --features extension-module --release
    cp target/release/libnrnm_py.so python/nrnm_py.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import nrnm_py as nm


def main():
    assert nm.memory_schedule(20, 8, 4) == [7, 11, 15, 19]
    assert nm.memory_schedule(6, 8, 4) == []

    p = nm.softmax([1.0, 2.0, 3.0])
    assert abs(sum(p) - 1.0) < 1e-12 and p[2] > p[1] > p[0]

    x, y = nm.generate_task("copy_memory", 20, 10, 16, classes=4)
    assert len(x) == 16 and len(x[0]) == 20 and len(x[0][0]) == 6
    assert all(0 <= label < 4 for label in y)

    model = nm.Model("nrnm", input_dim=6, classes=4, hidden=8, depth=2, k=6, win=3, heads=2)
    logits = model.forward(x[:3])
    assert len(logits) == 3 and len(logits[0]) == 4
    loss = model.loss(x, y)
    assert abs(loss - math.log(4)) < 0.2, loss
    assert len(model.predict(x)) == 16

    traces = model.traces([x[0]])
    assert [t["step"] for t in traces] == [5, 8, 11, 14, 17]
    for row in range(traces[0]["units"]):
        n = traces[0]["units"]
        assert abs(sum(traces[0]["heads"][0][row * n:(row + 1) * n]) - 1.0) < 1e-9

    err, ok = model.gradcheck(x[:2], y[:2])
    assert ok, err

    # Ragged batches: a short sequence keeps its own result.
    short = [x[1][:7]]
    both = model.forward([x[0], x[1][:7]])
    alone = model.forward(short)
    assert max(abs(a - b) for a, b in zip(both[1], alone[0])) < 1e-12

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.ckpt")
        model.save(path)
        other = nm.Model("nrnm", input_dim=6, classes=4, hidden=8, depth=2, k=6, win=3, heads=2, seed=9)
        other.load(path)
        assert other.loss(x, y) == loss

        config = """
[task]
task = "copy_memory"
T = 12
G = 6
K = 4
n_train = 32
n_val = 8
n_test = 8
[model]
model = "lstm"
hidden = 8
[train]
epochs = 2
batch = 8
"""
        summary = json.loads(nm.train(config, os.path.join(tmp, "run")))
        assert summary["epochs"] == 2 and summary["test_accuracy"] is not None

    try:
        nm.Model("transformer", input_dim=2, classes=2)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown model kind accepted")

    print("python smoke test: ok ({} parameters)".format(model.parameter_count))


if __name__ == "__main__":
    main()
