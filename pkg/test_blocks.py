import numpy as np
import pytest
import torch
from pydantic import ValidationError
from torch.func import functional_call

from blocks import AIM, RSU, SIM, BlockSpec, Fuse, ShapeError, resample


def _eval(block):
    return block.double().eval()


def _zero(modules):
    with torch.no_grad():
        for module in modules:
            for p in module.parameters():
                p.zero_()


def _gradcheck(block, call, input_shapes, seed=0):
    """gradcheck a random scalar projection of ``call(block, inputs)`` over inputs and parameters."""
    torch.manual_seed(seed)
    block = _eval(block)
    names = [name for name, _ in block.named_parameters()]
    inputs = [torch.randn(s, dtype=torch.float64, requires_grad=True) for s in input_shapes]
    params = [p.detach().clone().requires_grad_(True) for _, p in block.named_parameters()]
    with torch.no_grad():
        weight = torch.randn_like(call(block, inputs))

    def projected(*tensors):
        xs, ps = list(tensors[: len(inputs)]), tensors[len(inputs):]
        out = functional_call(block, dict(zip(names, ps)), (xs,) if isinstance(block, AIM) else (xs[0],))
        return (out * weight).sum()

    assert torch.autograd.gradcheck(projected, tuple(inputs + params), eps=1e-6, atol=1e-6, rtol=1e-3)


# ---------------------------------------------------------------------------
# resample
# ---------------------------------------------------------------------------

def test_resample_up_and_down_shapes():
    x = torch.rand(1, 3, 160, 160)
    assert resample(x, 2).shape == (1, 3, 320, 320)
    assert resample(x, 0.5).shape == (1, 3, 80, 80)
    assert resample(x, 0.25, "mask").shape == (1, 3, 40, 40)
    assert resample(x, 4, "mask").shape == (1, 3, 640, 640)


def test_resample_keeps_constants():
    x = torch.full((2, 4, 8, 8), 0.375)
    for mode in ("image", "mask"):
        for factor in (2, 0.5, 4, 0.25):
            y = resample(x, factor, mode)
            assert torch.allclose(y, torch.full_like(y, 0.375), atol=1e-7)


def test_resample_mask_downsampling_takes_top_left():
    board = torch.tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
    assert resample(board, 0.5, "mask").tolist() == [[[[1.0]]]]
    assert resample(1.0 - board, 0.5, "mask").tolist() == [[[[0.0]]]]


def test_resample_rejects_bad_arguments():
    with pytest.raises(ShapeError):
        resample(torch.rand(1, 1, 6, 6), 0.25)
    with pytest.raises(ValueError):
        resample(torch.rand(1, 1, 8, 8), 3)
    with pytest.raises(ValueError):
        resample(torch.rand(1, 1, 8, 8), 2, "cubic")


# ---------------------------------------------------------------------------
# AIM
# ---------------------------------------------------------------------------

@torch.no_grad()
def test_aim_shapes_at_pyramid_scale():
    mid = AIM(BlockSpec(in_channels=[256, 512, 1024], out_channels=64, level=3)).eval()
    out = mid([torch.rand(1, 256, 80, 80), torch.rand(1, 512, 40, 40), torch.rand(1, 1024, 20, 20)])
    assert out.shape == (1, 64, 40, 40)

    first = AIM(BlockSpec(in_channels=[64, 256], out_channels=64, level=1)).eval()
    assert first([torch.rand(1, 64, 160, 160), torch.rand(1, 256, 80, 80)]).shape == (1, 64, 160, 160)

    last = AIM(BlockSpec(in_channels=[1024, 2048], out_channels=64, level=5)).eval()
    assert last([torch.rand(1, 1024, 20, 20), torch.rand(1, 2048, 10, 10)]).shape == (1, 64, 10, 10)


@torch.no_grad()
def test_aim_shape_law_randomized():
    rng = np.random.default_rng(3)
    for _ in range(10):
        level = int(rng.integers(1, 6))
        count = 2 if level in (1, 5) else 3
        channels = [int(c) for c in rng.integers(1, 9, count)]
        width = int(rng.integers(1, 9))
        base = 2 * int(rng.integers(1, 5))  # size of the current level
        current = 0 if level == 1 else 1
        sizes = [int(base * 2 ** (current - j)) for j in range(count)]
        batch = int(rng.integers(1, 4))
        aim = AIM(BlockSpec(in_channels=channels, out_channels=width, level=level)).eval()
        out = aim([torch.rand(batch, c, s, s) for c, s in zip(channels, sizes)])
        assert out.shape == (batch, width, base, base)


def test_aim_rejects_bad_neighbors():
    aim = AIM(BlockSpec(in_channels=[4, 4, 4], out_channels=4, level=2)).eval()
    with pytest.raises(ShapeError):
        aim([torch.rand(1, 4, 16, 16), torch.rand(1, 4, 8, 8)])
    with pytest.raises(ShapeError):
        aim([torch.rand(1, 4, 16, 16), torch.rand(1, 4, 8, 8), torch.rand(1, 4, 2, 2)])
    with pytest.raises(ShapeError):
        aim([torch.rand(1, 4, 16, 16), torch.rand(1, 5, 8, 8), torch.rand(1, 4, 4, 4)])
    with pytest.raises(ShapeError):
        AIM(BlockSpec(in_channels=[4, 4, 4], out_channels=4, level=1))


def test_aim_gradients_match_finite_differences():
    aim = AIM(BlockSpec(in_channels=[4, 4, 4], out_channels=4, level=2))
    _gradcheck(aim, lambda b, xs: b(xs), [(1, 4, 16, 16), (1, 4, 8, 8), (1, 4, 4, 4)])


# ---------------------------------------------------------------------------
# SIM
# ---------------------------------------------------------------------------

@torch.no_grad()
def test_sim_preserves_shape():
    sim = SIM(BlockSpec(in_channels=[64], out_channels=64)).eval()
    assert sim(torch.rand(1, 64, 40, 40)).shape == (1, 64, 40, 40)
    assert sim(torch.rand(2, 64, 80, 80)).shape == (2, 64, 80, 80)


def test_sim_rejects_odd_sizes_and_wrong_channels():
    sim = SIM(BlockSpec(in_channels=[8], out_channels=8)).eval()
    with pytest.raises(ShapeError):
        sim(torch.rand(1, 8, 7, 8))
    with pytest.raises(ShapeError):
        sim(torch.rand(1, 4, 8, 8))


@torch.no_grad()
def test_sim_shape_law_randomized():
    rng = np.random.default_rng(5)
    for _ in range(10):
        in_ch, width = (int(c) for c in rng.integers(1, 9, 2))
        height, size_w = (2 * int(s) for s in rng.integers(1, 9, 2))
        batch = int(rng.integers(1, 4))
        sim = SIM(BlockSpec(in_channels=[in_ch], out_channels=width, level=int(rng.integers(1, 6)))).eval()
        assert sim(torch.rand(batch, in_ch, height, size_w)).shape == (batch, width, height, size_w)


def test_sim_trains_on_a_single_2x2_sample():
    sim = SIM(BlockSpec(in_channels=[4], out_channels=4)).train()
    x = torch.randn(1, 4, 2, 2, requires_grad=True)
    out = sim(x)
    out.sum().backward()
    assert out.shape == (1, 4, 2, 2) and torch.isfinite(out).all()
    assert torch.isfinite(x.grad).all()
    # the 1x1 low branch is normalised with, and does not update, the running statistics
    assert torch.equal(sim.low_in.bn.running_mean, torch.zeros(4))
    assert not torch.equal(sim.high_in.bn.running_mean, torch.zeros(4))


def test_sim_without_low_branch_is_the_high_branch():
    torch.manual_seed(0)
    sim = SIM(BlockSpec(in_channels=[8], out_channels=8)).eval()
    _zero(sim.low_branch())
    x = torch.randn(2, 8, 8, 8)
    assert torch.equal(sim(x), sim.high_branch(x))


def test_sim_gradients_match_finite_differences():
    sim = SIM(BlockSpec(in_channels=[4], out_channels=4))
    _gradcheck(sim, lambda b, xs: b(xs[0]), [(1, 4, 8, 8)], seed=1)


# ---------------------------------------------------------------------------
# Fuse
# ---------------------------------------------------------------------------

@torch.no_grad()
def test_fuse_shapes_and_finiteness():
    assert Fuse(BlockSpec(in_channels=[64], out_channels=64)).eval()(torch.rand(1, 64, 40, 40)).shape == (1, 64, 40, 40)
    assert Fuse(BlockSpec(in_channels=[128], out_channels=64)).eval()(torch.rand(4, 128, 20, 20)).shape == (4, 64, 20, 20)

    torch.manual_seed(5)
    fuse = Fuse(BlockSpec(in_channels=[6], out_channels=4)).eval()
    for _ in range(100):
        assert torch.isfinite(fuse(torch.randn(2, 6, 4, 4) * 10)).all()
    with pytest.raises(ShapeError):
        fuse(torch.rand(1, 5, 4, 4))


def test_fuse_gradients_match_finite_differences():
    fuse = Fuse(BlockSpec(in_channels=[4], out_channels=4))
    _gradcheck(fuse, lambda b, xs: b(xs[0]), [(1, 4, 8, 8)], seed=2)


# ---------------------------------------------------------------------------
# RSU
# ---------------------------------------------------------------------------

@torch.no_grad()
def test_rsu_preserves_shape():
    rsu = RSU(BlockSpec(in_channels=[32], out_channels=32, rsu_depth=2)).eval()
    assert rsu(torch.rand(1, 32, 64, 64)).shape == (1, 32, 64, 64)

    dilated = RSU(BlockSpec(in_channels=[16], out_channels=8, rsu_depth=4, dilated=True)).eval()
    assert dilated(torch.rand(2, 16, 6, 10)).shape == (2, 8, 6, 10)


@torch.no_grad()
@pytest.mark.parametrize("dilated", [False, True])
def test_rsu_shape_law_randomized(dilated):
    rng = np.random.default_rng(11 if dilated else 7)
    for _ in range(10):
        depth = int(rng.integers(2, 5))
        in_ch, width = (int(c) for c in rng.integers(1, 9, 2))
        if dilated:
            height, size_w = (int(s) for s in rng.integers(1, 12, 2))
        else:
            step = 2 ** (depth - 1)
            height, size_w = (step * int(k) for k in rng.integers(1, 4, 2))
        batch = int(rng.integers(1, 4))
        spec = BlockSpec(in_channels=[in_ch], out_channels=width, rsu_depth=depth, dilated=dilated)
        out = RSU(spec).eval()(torch.rand(batch, in_ch, height, size_w))
        assert out.shape == (batch, width, height, size_w)


@torch.no_grad()
def test_rsu5_downsampling_stages():
    rsu = RSU(BlockSpec(in_channels=[64], out_channels=64, rsu_depth=5)).eval()
    seen = []
    for encoder in rsu.inner.encoders:
        encoder.register_forward_hook(lambda module, args, out: seen.append(out.shape[-1]))
    assert rsu(torch.rand(1, 64, 320, 320)).shape == (1, 64, 320, 320)
    assert seen == [320, 160, 80, 40, 20]


def test_rsu_rejects_indivisible_input_and_shallow_depth():
    rsu = RSU(BlockSpec(in_channels=[4], out_channels=4, rsu_depth=3)).eval()
    with pytest.raises(ShapeError):
        rsu(torch.rand(1, 4, 10, 12))
    with pytest.raises(ValidationError):
        BlockSpec(in_channels=[4], out_channels=4, rsu_depth=1)


@torch.no_grad()
def test_rsu_with_zeroed_inner_u_equals_its_transform():
    torch.manual_seed(11)
    rng = np.random.default_rng(11)
    for _ in range(20):
        depth = int(rng.integers(2, 5))
        dilated = bool(rng.integers(0, 2))
        channels = int(rng.integers(1, 9))
        size = 2 ** (depth - 1) * int(rng.integers(1, 4))
        rsu = RSU(BlockSpec(in_channels=[channels], out_channels=int(rng.integers(1, 9)), rsu_depth=depth, dilated=dilated)).eval()
        _zero([rsu.inner])
        x = torch.randn(int(rng.integers(1, 3)), channels, size, size)
        assert torch.equal(rsu(x), rsu.transform(x))


def test_rsu_gradients_match_finite_differences():
    rsu = RSU(BlockSpec(in_channels=[4], out_channels=4, rsu_depth=3, mid_channels=2))
    _gradcheck(rsu, lambda b, xs: b(xs[0]), [(1, 4, 8, 8)], seed=3)


@torch.no_grad()
def test_blocks_are_deterministic():
    torch.set_num_threads(1)
    torch.manual_seed(0)
    rsu = RSU(BlockSpec(in_channels=[4], out_channels=4, rsu_depth=3)).eval()
    x = torch.randn(1, 4, 16, 16)
    assert torch.equal(rsu(x), rsu(x))


if __name__ == '__main__':
    import sys
    sys.exit(pytest.main([__file__, '-q']))
