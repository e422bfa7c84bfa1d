import pytest
import torch

from polyper.encoder import PyramidFeatures, SizingError, ToyEncoder, encode


@pytest.mark.parametrize("size, expected", [
    (64, [16, 8, 4, 2]),
    (224, [56, 28, 14, 7]),
])
def test_stage_sizes(size, expected):
    enc = ToyEncoder((8, 16, 16, 16))
    feats = encode(torch.rand(3, size, size), enc)
    assert isinstance(feats, PyramidFeatures)
    assert len(feats.stages) == 4
    assert [s.shape[-1] for s in feats.stages] == expected
    assert [s.shape[-2] for s in feats.stages] == expected
    assert feats.channels == (8, 16, 16, 16)
    assert feats.strides == (4, 8, 16, 32)


def test_rectangular_input():
    feats = encode(torch.rand(2, 3, 64, 96), ToyEncoder((4, 4, 4, 4)))
    assert [tuple(s.shape[-2:]) for s in feats.stages] == [(16, 24), (8, 12), (4, 6), (2, 3)]


def test_rejects_sizes_not_divisible_by_32():
    with pytest.raises(SizingError, match="height 50"):
        encode(torch.rand(3, 50, 64), ToyEncoder())
    with pytest.raises(SizingError, match="width 50"):
        encode(torch.rand(3, 64, 50), ToyEncoder())


def test_deterministic_and_finite():
    enc = ToyEncoder()
    x = torch.rand(1, 3, 64, 64)
    a, b = enc(x), enc(x)
    for sa, sb in zip(a.stages, b.stages):
        assert torch.equal(sa, sb)
        assert torch.isfinite(sa).all()


def test_default_channel_plan():
    feats = encode(torch.rand(3, 64, 64), ToyEncoder())
    assert feats.channels == (32, 64, 128, 256)
