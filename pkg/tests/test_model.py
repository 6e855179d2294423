import numpy as np
import pytest

from rwkv_unet.model import (
    ENCODER_CONFIGS,
    ModelVariant,
    build,
    decoder_schedule,
    encode,
    forward,
)
from rwkv_unet.tensor import ShapeError, Tensor, backward, fresh_tape, mean, square


def closed_form_params(variant, in_ch, n_cls):
    """Parameter total from per-layer formulas, written independently of the builders."""
    cfg = ENCODER_CONFIGS[variant]
    stem = cfg.stem_dim
    total = in_ch * stem * 9 + 2 * stem
    c_in = stem
    for st in cfg.stages:
        m = st.c_mid
        for i in range(st.depth):
            total += c_in * m + 2 * m + m * 25 + m + m * st.dim + st.dim
            if st.spatial_mix and i > 0:
                total += 2 * m + 4 * m * m + 2 * m
            c_in = st.dim
    d = cfg.dims
    c1 = d[0]
    total += sum(c * c1 + c1 + c1 * c + c for c in d[:3])
    mix = 3 * c1
    total += 2 * mix + mix * 4 * mix * 2 + mix * mix
    for ci, co in [(d[3], d[2]), (2 * d[2], d[1]), (2 * d[1], d[0]), (2 * d[0], stem)]:
        total += ci * ci + ci + ci * 81 + ci + ci * co + co
    return total + stem * n_cls + n_cls


@pytest.mark.parametrize("variant", list(ModelVariant))
def test_parameter_count_matches_closed_form(variant):
    assert build(variant, 1, 9).num_parameters() == closed_form_params(variant, 1, 9)


def test_variant_sizes_are_ordered():
    counts = [build(v, 3, 9).num_parameters() for v in ModelVariant]
    assert counts == sorted(counts)


def test_parameter_names_are_unique_and_stable():
    a = [n for n, _ in build("tiny").named_parameters()]
    b = [n for n, _ in build("tiny", seed=5).named_parameters()]
    assert a == b
    assert len(set(a)) == len(a)
    assert "stages.2.1.spatial_mix.wkv.w" in a
    assert "stages.2.0.spatial_mix.wkv.w" not in a  # stage-entry block has no mixing


def test_variant_parse():
    assert ModelVariant.parse("Base") is ModelVariant.BASE
    assert ModelVariant.parse(ModelVariant.TINY) is ModelVariant.TINY
    with pytest.raises(ValueError):
        ModelVariant.parse("huge")
    assert [v.code for v in ModelVariant] == [0, 1, 2]


def test_decoder_schedule_links_up():
    for cfg in ENCODER_CONFIGS.values():
        sched = decoder_schedule(cfg)
        assert sched[0][0] == cfg.dims[3]
        assert sched[-1][1] == cfg.stem_dim
        for (_, out_prev), (c_in, _), skip in zip(sched, sched[1:], reversed(cfg.dims[:3])):
            assert c_in == out_prev + skip


def test_build_is_deterministic():
    a, b = build("tiny", seed=3), build("tiny", seed=3)
    c = build("tiny", seed=4)
    for (_, x), (_, y), (_, z) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        np.testing.assert_array_equal(x.data, y.data)
    assert any(not np.array_equal(x.data, z.data) for (_, x), (_, z) in zip(a.named_parameters(), c.named_parameters()))


def test_encoder_shapes_at_64():
    m = build("tiny", 1, 3)
    feats = encode(m, Tensor(np.zeros((1, 1, 64, 64), np.float32)))
    assert [f.shape for f in feats] == [
        (1, 24, 64, 64), (1, 32, 32, 32), (1, 48, 16, 16), (1, 96, 8, 8), (1, 160, 4, 4)
    ]


@pytest.mark.parametrize("n_cls", [1, 4])
def test_forward_output_shape_and_finite(n_cls, rng):
    m = build("tiny", 2, n_cls)
    y = forward(m, Tensor(rng.standard_normal((2, 2, 32, 48)).astype(np.float32)))
    assert y.shape == (2, n_cls, 32, 48)
    assert np.isfinite(y.data).all()


def test_forward_batch_items_independent(rng):
    m = build("tiny", 1, 3)
    x = rng.standard_normal((2, 1, 32, 32)).astype(np.float32)
    both = forward(m, Tensor(x)).data
    one = forward(m, Tensor(x[1:])).data
    np.testing.assert_allclose(both[1:], one, rtol=1e-4, atol=1e-5)


def test_input_checks():
    m = build("tiny", 1, 3)
    with pytest.raises(ShapeError, match="multiples of 16"):
        forward(m, Tensor(np.zeros((1, 1, 223, 223), np.float32)))
    with pytest.raises(ShapeError):
        forward(m, Tensor(np.zeros((1, 3, 32, 32), np.float32)))
    with pytest.raises(ShapeError):
        forward(m, Tensor(np.zeros((1, 32, 32), np.float32)))
    with pytest.raises(ValueError):
        build("tiny", num_classes=0)


def test_every_parameter_receives_gradient(rng):
    m = build("tiny", 1, 3)
    x = Tensor(rng.standard_normal((1, 1, 32, 32)).astype(np.float32))
    with fresh_tape():
        backward(mean(square(forward(m, x))))
    missing = [n for n, t in m.named_parameters() if t.grad is None or not np.any(t.grad)]
    assert missing == []
