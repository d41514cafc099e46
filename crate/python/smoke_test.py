"""Smoke test for the sinefm_py extension module.

Build and install first:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/sinefm_py-*.whl
Then run `python python/smoke_test.py` or `pytest python/`.
"""

import math
import random

import sinefm_py as sf


def test_channel_plan():
    assert sf.channel_plan(64, 16, 5) == {"c_g": 48, "combine_in": 80, "combine_out": 48}
    assert sf.channel_plan(16, 1, 5)["c_g"] == 15


def test_cost():
    assert sf.conv_flops(3, 3, 32, 32, 16) == 442_368
    std = sf.Architecture.builtin("tiny-vgg")
    conv = std.to_sinefm(c_s=16, fanout=5)
    a, b = conv.cost(), std.cost()
    assert b["total_params"] / a["total_params"] >= 3
    assert b["total_flops"] / a["total_flops"] >= 2
    assert conv.to_standard() == std


def test_descriptor_round_trip():
    arch = sf.Architecture.builtin("tiny-resnet").to_sinefm(seed=3)
    assert sf.Architecture(arch.to_text()) == arch


def test_pack_predict():
    arch = sf.Architecture.builtin("tiny-vgg").to_sinefm(seed=7)
    model = sf.Model(arch, seed=7)
    blob = model.pack()
    assert blob[:4] == b"SFM1"
    back = sf.Model.unpack(blob)
    rng = random.Random(0)
    x = [rng.gauss(0, 1) for _ in range(2 * 3 * 32 * 32)]
    y1, s1 = model.predict(x, (2, 3, 32, 32))
    y2, s2 = back.predict(x, (2, 3, 32, 32))
    assert s1 == s2 == (2, 4, 1, 1)
    assert y1 == y2
    bad = bytearray(blob)
    bad[len(bad) // 2] ^= 1
    try:
        sf.Model.unpack(bytes(bad))
    except sf.CorruptionError:
        pass
    else:
        raise AssertionError("corrupt pack accepted")


def test_transforms():
    hp = sf.sample_hparams(42, "sinusoidal", 2)
    assert abs(hp[0]["omega"] - 1.0838629710598822) < 1e-15
    assert abs(hp[0]["psi"] - 2.5159210026506744) < 1e-15
    ys = sf.eval_transform("sinusoidal", 42, 0, [0.0, 0.5])
    assert abs(ys[1] - math.sin(hp[0]["omega"] * 0.5 + hp[0]["psi"])) < 1e-12


def test_metrics():
    m = sf.metrics([[3, 1], [1, 3]])
    assert abs(m["miou"] - 0.6) < 1e-9
    assert abs(m["accuracy"] - 0.75) < 1e-9
    assert abs(m["mean_f1"] - 0.75) < 1e-9


def test_gradcheck():
    for family in sf.FAMILIES:
        err, checked, _ = sf.gradcheck(family)
        assert checked > 0 and err < 1e-4, (family, err)


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for t in tests:
        t()
        print(f"ok  {t.__name__}")
    print(f"{len(tests)} passed")
