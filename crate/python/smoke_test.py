"""Smoke test for the myq extension module.

Build and run:
    cargo build --release -p myq-py --features extension-module
    cp target/release/libmyq.so python/myq.so
    python3 python/smoke_test.py
"""
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import myq


def main():
    mb = 1 << 20
    assert myq.model_size([8], [mb]) == 1.0
    bits, size = myq.allocate([0.3, 0.1, 0.2], [mb] * 3, 2.8)
    assert bits == [8, 7, 7] and size == 2.75, (bits, size)
    try:
        myq.allocate([1.0, 2.0], [mb, mb], 0.1)
    except myq.BudgetError:
        pass
    else:
        raise AssertionError("infeasible budget accepted")

    assert myq.wer("a b c", "a x c") == 1 / 3
    assert myq.cer("abc", "abc") == 0.0
    try:
        myq.wer("", "a")
    except ValueError:
        pass
    else:
        raise AssertionError("empty reference accepted")

    with tempfile.TemporaryDirectory() as d:
        model = os.path.join(d, "toy.myqm")
        sizes = myq.toy_encoder(model, seed=1, layers=1, hidden=16, heads=2, vocab=12, channels=4, length=24)
        assert len(sizes) > 0 and all(s > 0 for s in sizes)
        calib = os.path.join(d, "calib")
        held = os.path.join(d, "eval")
        assert myq.make_domain(calib, 4, 24, count=8, seed=3) == 8
        myq.make_domain(held, 4, 24, count=8, seed=3, held_out=True)

        budget = myq.model_size([8] * len(sizes), sizes)
        out = os.path.join(d, "toy.myqz")
        r = myq.run_pipeline(model, calib, held, budget, calib_method="l2", out=out)
        assert r["bits"] == [8] * len(sizes), r["bits"]
        assert r["size_mb"] <= budget
        assert 0.0 <= r["fidelity"] <= 1.0 and 0.0 <= r["top1"] <= 1.0
        assert math.isfinite(r["cosine_distance"])
        assert os.path.getsize(out) > 0

        again = myq.run_pipeline(model, calib, held, budget, calib_method="l2")
        for k in ("bits", "wer", "cer", "fidelity", "cosine_distance"):
            assert r[k] == again[k], k

    print("ok")


if __name__ == "__main__":
    main()
