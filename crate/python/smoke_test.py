"""Smoke test for the `kaq` extension module.

Build and run from the repository root:

    cargo build -p kaq-python --release
    cp target/release/libkaq.so python/kaq.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import kaq  # noqa: E402


def check(cond, msg):
    if not cond:
        raise AssertionError(msg)
    print(f"ok  {msg}")


def main():
    # primitives
    check(kaq.quantize([0.26, -0.74, 10.0], 0.5, 3) == [0.5, -0.5, 1.5], "quantize rounds and saturates")
    check(kaq.soft_threshold([2.0, -0.5, -3.0], 1.0) == [1.0, 0.0, -2.0], "soft threshold")
    check(kaq.mmd2([[0.0, 1.0], [1.0, 0.0]], [[0.0, 1.0], [1.0, 0.0]], 1.0) == 0.0, "mmd2 of identical batches")
    check(kaq.mmd2([[0.0]], [[3.0]], 1.0) > 0.0, "mmd2 of distinct batches")
    step = kaq.dynamic_step_size(0.1, 0.01, 20.0)
    check(abs(step - (0.1 / 10.0 + 0.01)) < 1e-15, "dynamic step at 20 dB")
    points, bits = kaq.demap([2.2, -0.1], [-3.0, -1.0, 1.0, 3.0])
    check(points == [3.0, -1.0] and len(bits) == 4, "demap to 16-QAM axis levels")

    h = [[1.0, 0.2], [0.1, 0.9], [0.3, -0.4]]
    x = [1.0, -1.0]
    y = [sum(a * b for a, b in zip(row, x)) for row in h]
    zf = kaq.zero_forcing(h, y)
    check(max(abs(a - b) for a, b in zip(zf, x)) < 1e-9, "zero forcing inverts a noiseless system")
    check(kaq.ml_detect(h, y, [-1.0, 1.0]) == x, "ML recovers BPSK symbols")
    check(len(kaq.mmse(h, y, 0.1)) == 2, "MMSE estimate length")

    fp = kaq.count_complexity("pgd", 5, 32, 32)
    q8 = kaq.count_complexity("pgd", 5, 32, 32, bits=8)
    check(q8["activation_bytes"] * 4 == fp["activation_bytes"], "8-bit activations use a quarter of the bytes")
    check(q8["mult_adds"] == fp["mult_adds"] == 5 * (2 * 32 * 32 + 3 * 32), "PGD operation count")

    try:
        kaq.quantize([1.0], -1.0, 8)
    except kaq.KaqError as e:
        check("step" in str(e), f"bad step rejected: {e}")
    else:
        raise AssertionError("negative step accepted")

    # data, training, evaluation
    ds = kaq.Dataset.generate(2, 2, [0.0, 10.0, 20.0], 600, seed=3, constellation=[-1.0, 1.0])
    check(len(ds) == 600 and (ds.m, ds.n) == (4, 4), f"generated {ds!r}")
    inst = ds.instance(0)
    check(len(inst["h"]) == 4 and len(inst["x"]) == 4, "instance layout")
    again = kaq.Dataset.generate(2, 2, [0.0, 10.0, 20.0], 600, seed=3, constellation=[-1.0, 1.0])
    check(ds.to_bytes() == again.to_bytes(), "generation is deterministic")

    cfg = kaq.TrainConfig(mode="kaq", epochs=4, batch_size=64, lr=1e-2, seed=1)
    model = kaq.train(ds, cfg)
    hist = model.history
    check(len(hist) == 4 and all(math.isfinite(r["loss"]) for r in hist), f"trained {model!r}")
    params = model.parameters()
    check({"eta", "lambda", "alpha", "gamma", "sigma1"} <= set(params), "kaq learnables exposed")
    steps = [model.step_sizes(s)[0] for s in (0.0, 10.0, 20.0)]
    check(steps[0] > steps[1] > steps[2] > 0.0, "step size shrinks with SNR")

    fp_model = kaq.train(ds, kaq.TrainConfig(mode="fp", epochs=4, batch_size=64, lr=1e-2, seed=1))
    check(all(r["mmd"] == 0.0 for r in fp_model.history), "fp history has no MMD term")
    check(fp_model.step_sizes(10.0) is None, "fp model has no quantizer")

    est = model.detect(inst["h"], inst["y"], inst["snr_db"])
    check(len(est) == 4, "single-instance detection")

    rows = kaq.evaluate_ber(model, ds)
    check([r["snr_db"] for r in rows] == [0.0, 10.0, 20.0], "one BER row per SNR")
    check(all(0.0 <= r["ber"] <= 1.0 for r in rows), "BER in range")
    check(rows[-1]["ber"] <= rows[0]["ber"], "BER falls from 0 to 20 dB")
    ml = kaq.evaluate_ber("ml", ds)
    zf_rows = kaq.evaluate_ber("zf", ds)
    check(ml[-1]["ber"] <= zf_rows[-1]["ber"], "ML no worse than ZF at 20 dB")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.kck")
        model.save(path)
        back = kaq.Model.load(path)
        check(back.to_bytes() == model.to_bytes(), "checkpoint round trip")
        back.resume(ds, 6)
        check(back.epoch == 6 and len(back.history) == 6, "resume continues training")

        full = kaq.train(ds, kaq.TrainConfig(mode="kaq", epochs=6, batch_size=64, lr=1e-2, seed=1))
        check(full.history == back.history, "resumed run matches an uninterrupted one")

        dpath = os.path.join(tmp, "data.kds")
        ds.save(dpath)
        check(kaq.Dataset.load(dpath).to_bytes() == ds.to_bytes(), "dataset round trip")

    big = kaq.Dataset.generate(16, 16, [10.0], 2)
    try:
        kaq.evaluate_ber("ml", big)
    except kaq.KaqError as e:
        check("search space" in str(e), "ML refused on a 16x16 16-QAM system")
    else:
        raise AssertionError("ML ran on a huge search space")

    print("all checks passed")


if __name__ == "__main__":
    main()
