import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from fd import max_rel_error
from spectstage.backbones import (
    ACSConv,
    CheckpointError,
    Conv2Plus1D,
    acs_conv,
    assign_tensors,
    default_acs_split,
    load_checkpoint,
    r2plus1d_midplanes,
    read_checkpoint,
    resnet18_3d,
    scaled,
    vgg16_features,
    video_resnet18_groups,
    write_checkpoint,
)

torch.set_default_dtype(torch.float32)


# --------------------------------------------------------------------------- oracles


def conv3d_oracle(x, k, b, pad):
    """Direct-sum same-size 3D correlation; x (C_i, T, H, W), k (C_o, C_i, kt, kh, kw)."""
    ci, t, h, w = x.shape
    co = k.shape[0]
    xp = np.pad(x, [(0, 0)] + [(p, p) for p in pad])
    kt, kh, kw = k.shape[2:]
    out = np.zeros((co, t, h, w))
    for o in range(co):
        for z in range(t):
            for y in range(h):
                for q in range(w):
                    out[o, z, y, q] = np.sum(xp[:, z : z + kt, y : y + kh, q : q + kw] * k[o]) + b[o]
    return out


def acs_oracle(x, weight, bias, split):
    """Embed each 2D kernel block into an explicit 3D kernel and convolve by brute force."""
    co, ci, kk, _ = weight.shape
    p = kk // 2
    outs, start = [], 0
    for view, n in enumerate(split):
        if n == 0:
            continue
        w2, b = weight[start : start + n], bias[start : start + n]
        if view == 0:  # axial: (H, W) plane
            k3, pad = w2[:, :, None, :, :], (0, p, p)
        elif view == 1:  # coronal: (T, W) plane
            k3, pad = w2[:, :, :, None, :], (p, 0, p)
        else:  # sagittal: (T, H) plane
            k3, pad = w2[:, :, :, :, None], (p, p, 0)
        outs.append(conv3d_oracle(x, k3, b, pad))
        start += n
    return np.concatenate(outs, axis=0)


# --------------------------------------------------------------------------- gradient checks

FD_TOL = 1e-4


def _distinct(shape, seed):
    # values on a 0.01 grid, so max-pool and ReLU stay far from their kinks
    g = torch.Generator().manual_seed(seed)
    n = int(np.prod(shape))
    vals = (torch.randperm(n, generator=g).double() - n / 2 + 0.5) * 0.01
    return vals.reshape(shape)


def test_fd_conv2d():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 3, 6, 7, generator=g)
    w = torch.randn(4, 3, 3, 3, generator=g)
    b = torch.randn(4, generator=g)
    assert max_rel_error(lambda x, w, b: F.conv2d(x, w, b, padding=1), [x, w, b]) < FD_TOL


def test_fd_conv3d():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(2, 2, 4, 5, 5, generator=g)
    w = torch.randn(3, 2, 3, 3, 3, generator=g)
    b = torch.randn(3, generator=g)
    fn = lambda x, w, b: F.conv3d(x, w, b, stride=(1, 2, 2), padding=1)  # noqa: E731
    assert max_rel_error(fn, [x, w, b]) < FD_TOL


@pytest.mark.parametrize("split", [(2, 2, 1), (5, 0, 0), (0, 2, 3)])
def test_fd_acs(split):
    g = torch.Generator().manual_seed(2)
    x = torch.randn(1, 2, 4, 5, 6, generator=g)
    w = torch.randn(5, 2, 3, 3, generator=g)
    b = torch.randn(5, generator=g)
    fn = lambda x, w, b: acs_conv(x, w, b, split)  # noqa: E731
    assert max_rel_error(fn, [x, w, b]) < FD_TOL


def test_fd_conv2plus1d():
    torch.manual_seed(3)
    block = Conv2Plus1D(2, 3, midplanes=4, stride=2).double().train()
    params = [block[0].weight, block[1].weight, block[1].bias, block[3].weight]
    x = torch.randn(2, 2, 4, 6, 6, dtype=torch.float64)

    def fn(x, w1, gamma, beta, w2, act=lambda h: h):
        h = F.conv3d(x, w1, stride=(1, 2, 2), padding=(0, 1, 1))
        h = act(F.batch_norm(h, None, None, gamma, beta, training=True))
        return F.conv3d(h, w2, stride=(2, 1, 1), padding=(1, 0, 0))

    with torch.no_grad():
        np.testing.assert_allclose(fn(x, *params, act=F.relu).numpy(), block(x).numpy(), atol=1e-12)
    # the ReLU between the factors is checked on its own; here the smooth path
    assert max_rel_error(fn, [x] + [p.detach() for p in params]) < FD_TOL


def test_fd_max_pool():
    x = _distinct((2, 3, 6, 8), 4)
    assert max_rel_error(lambda x: F.max_pool2d(x, 2), [x]) < FD_TOL
    x3 = _distinct((1, 2, 4, 6, 6), 5)
    assert max_rel_error(lambda x: F.max_pool3d(x, 2), [x3]) < FD_TOL


def test_fd_avg_pool():
    g = torch.Generator().manual_seed(6)
    x = torch.randn(2, 4, 6, 8, 8, generator=g)
    assert max_rel_error(lambda x: F.adaptive_avg_pool3d(x, 1), [x]) < FD_TOL
    assert max_rel_error(lambda x: F.adaptive_avg_pool2d(x[:, :, 0], 1), [x]) < FD_TOL


def test_fd_relu():
    x = _distinct((2, 4, 6, 8), 7)
    assert max_rel_error(F.relu, [x]) < FD_TOL


@pytest.mark.parametrize("dims", [2, 3])
def test_fd_batch_norm(dims):
    g = torch.Generator().manual_seed(8)
    shape = (2, 3, 5, 6) if dims == 2 else (2, 3, 4, 5, 5)
    x = torch.randn(*shape, generator=g)
    gamma, beta = torch.rand(3, generator=g) + 0.5, torch.randn(3, generator=g)
    fn = lambda x, g_, b_: F.batch_norm(x, None, None, g_, b_, training=True, eps=1e-5)  # noqa: E731
    assert max_rel_error(fn, [x, gamma, beta]) < FD_TOL


# --------------------------------------------------------------------------- VGG


def test_scaled_widths():
    assert scaled(512, 1) == 512
    assert scaled(512, 1 / 8) == 64
    assert scaled(64, 1 / 128) == 1
    assert scaled(3, 0.5) == 2


def test_vgg_features_shape_wm1():
    net = vgg16_features(1.0).eval()
    convs = [m for m in net if isinstance(m, nn.Conv2d)]
    pools = [m for m in net if isinstance(m, nn.MaxPool2d)]
    assert len(convs) == 13 and len(pools) == 4
    with torch.no_grad():
        assert net(torch.zeros(2, 3, 72, 72)).shape == (2, 512, 4, 4)


def test_vgg_features_shape_eighth_width():
    net = vgg16_features(1 / 8)
    with torch.no_grad():
        assert net(torch.rand(3, 3, 72, 72)).shape == (3, 64, 4, 4)


def test_vgg_zero_input_zero_bias():
    net = vgg16_features(1 / 8)
    for m in net:
        if isinstance(m, nn.Conv2d):
            nn.init.zeros_(m.bias)
    with torch.no_grad():
        assert not net(torch.zeros(2, 3, 72, 72)).any()


# --------------------------------------------------------------------------- ACS


def test_default_split():
    assert default_acs_split(7) == (3, 2, 2)
    assert default_acs_split(8) == (3, 3, 2)
    assert default_acs_split(9) == (3, 3, 3)
    for c in range(1, 40):
        assert sum(default_acs_split(c)) == c


def test_acs_matches_bruteforce_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        ci = int(rng.integers(1, 3))
        co = int(rng.integers(1, 6))
        t, h, w = (int(v) for v in rng.integers(1, [5, 7, 7]))
        k = int(rng.choice([1, 3]))
        split = tuple(int(v) for v in np.diff(np.sort(np.r_[0, rng.integers(0, co + 1, 2), co])))
        x = rng.normal(size=(1, ci, t, h, w))
        weight = rng.normal(size=(co, ci, k, k))
        bias = rng.normal(size=co)
        got = acs_conv(torch.from_numpy(x), torch.from_numpy(weight), torch.from_numpy(bias), split)
        want = acs_oracle(x[0], weight, bias, split)
        np.testing.assert_allclose(got[0].numpy(), want, atol=1e-6, rtol=0)


def test_acs_axial_only_is_per_slice_conv2d():
    g = torch.Generator().manual_seed(9)
    x = torch.randn(2, 3, 5, 9, 8, generator=g)
    w = torch.randn(4, 3, 3, 3, generator=g)
    b = torch.randn(4, generator=g)
    got = acs_conv(x, w, b, (4, 0, 0))
    for t in range(x.shape[2]):
        want = F.conv2d(x[:, :, t], w, b, padding=1)
        assert torch.equal(got[:, :, t], want)


def test_acs_pointwise_kernel_views_coincide():
    g = torch.Generator().manual_seed(10)
    x = torch.randn(1, 3, 4, 5, 6, generator=g)
    w = torch.randn(6, 3, 1, 1, generator=g)
    pointwise = torch.einsum("oc,bcthw->bothw", w[:, :, 0, 0], x)
    for split in [(6, 0, 0), (0, 6, 0), (0, 0, 6), (2, 2, 2), (1, 4, 1)]:
        torch.testing.assert_close(acs_conv(x, w, None, split), pointwise, atol=1e-5, rtol=1e-5)


def test_acs_split_mismatch_raises():
    with pytest.raises(ValueError):
        acs_conv(torch.zeros(1, 1, 3, 3, 3), torch.zeros(4, 1, 3, 3), None, (2, 1, 0))
    with pytest.raises(ValueError):
        ACSConv(2, 5, split=(1, 1, 1))


def test_acs_module_keeps_2d_parameter_shape():
    conv = ACSConv(3, 7)
    assert conv.weight.shape == (7, 3, 3, 3) and conv.split == (3, 2, 2)
    assert conv(torch.zeros(1, 3, 4, 5, 5)).shape == (1, 7, 4, 5, 5)


# --------------------------------------------------------------------------- 3D ResNets


def test_midplanes_formula():
    # torchvision's R(2+1)D-18 uses 144 intermediate channels for 64->64
    assert r2plus1d_midplanes(64, 64) == 144
    assert r2plus1d_midplanes(3, 64) == (27 * 3 * 64) // (27 + 192)


@pytest.mark.parametrize("family", ["r3d", "mc3", "r2plus1d"])
def test_resnet_output_shape_wm1(family):
    net = resnet18_3d(family, 1.0).eval()
    with torch.no_grad():
        assert net(torch.rand(2, 3, 32, 72, 72)).shape == (2, 512)


@pytest.mark.parametrize("family", ["r3d", "mc3", "r2plus1d"])
def test_resnet_output_shape_small_width(family):
    net = resnet18_3d(family, 1 / 8).eval()
    with torch.no_grad():
        assert net(torch.rand(1, 3, 32, 72, 72)).shape == (1, 64)


def _temporal_extents(module):
    return {m.kernel_size[0] for m in module.modules() if isinstance(m, nn.Conv3d) and m.kernel_size != (1, 1, 1)}


def test_families_differ_in_temporal_mixing():
    r3d = video_resnet18_groups("r3d", 1 / 8)
    mc3 = video_resnet18_groups("mc3", 1 / 8)
    assert all(_temporal_extents(g) == {3} for g in r3d[:5])
    assert _temporal_extents(mc3[0]) == {3} and _temporal_extents(mc3[1]) == {3}
    assert all(_temporal_extents(g) == {1} for g in mc3[2:5])
    r21 = video_resnet18_groups("r2plus1d", 1 / 8)
    assert all(_temporal_extents(g) == {1, 3} for g in r21[:5])


def test_r2plus1d_degenerate_is_spatial_conv():
    torch.manual_seed(11)
    block = Conv2Plus1D(3, 4, midplanes=4).double().eval()
    bn = block[1]
    bn.running_mean.zero_()
    bn.running_var.fill_(1.0 - bn.eps)
    nn.init.ones_(bn.weight)
    nn.init.zeros_(bn.bias)
    with torch.no_grad():
        block[3].weight.zero_()
        for c in range(4):
            block[3].weight[c, c, 1, 0, 0] = 1.0
    x = torch.randn(2, 3, 5, 6, 6, dtype=torch.float64)
    with torch.no_grad():
        want = F.relu(F.conv3d(x, block[0].weight, padding=(0, 1, 1)))
        torch.testing.assert_close(block(x), want, atol=1e-12, rtol=1e-12)


def test_unknown_family():
    with pytest.raises(ValueError):
        video_resnet18_groups("r4d")


# --------------------------------------------------------------------------- checkpoints


def _tiny_net():
    return nn.Sequential(nn.Conv2d(3, 4, 3), nn.BatchNorm2d(4), nn.Conv2d(4, 2, 1))


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(12)
    src, dst = _tiny_net(), _tiny_net()
    src[1].running_mean.normal_()
    path = tmp_path / "a.ckpt"
    write_checkpoint(src.state_dict(), path)
    report = load_checkpoint(dst, path)
    assert not report.missing and not report.unexpected
    for (n, a), (_, b) in zip(src.state_dict().items(), dst.state_dict().items()):
        assert torch.equal(a, b), n


def test_checkpoint_byte_layout(tmp_path):
    path = tmp_path / "x.ckpt"
    write_checkpoint({"ab": np.array([[1.5, -2.0]], np.float32)}, path)
    raw = path.read_bytes()
    assert raw[:4] == b"CKPT"
    assert raw[4:8] == (1).to_bytes(4, "little")
    assert raw[8:12] == (2).to_bytes(4, "little") and raw[12:14] == b"ab"
    assert raw[14:18] == (2).to_bytes(4, "little")
    assert raw[18:26] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(raw[26:], "<f4").tolist() == [1.5, -2.0]


def test_checkpoint_partial_load_reports_missing(tmp_path):
    src, dst = _tiny_net(), _tiny_net()
    state = {k: v for k, v in src.state_dict().items() if not k.startswith("2.")}
    state["extra.weight"] = torch.zeros(2)
    path = tmp_path / "p.ckpt"
    write_checkpoint(state, path)
    report = load_checkpoint(dst, path)
    assert sorted(report.missing) == ["2.bias", "2.weight"]
    assert report.unexpected == ["extra.weight"]
    assert torch.equal(dst[0].weight, src[0].weight)


def test_checkpoint_shape_conflict():
    module = nn.Conv2d(256, 256, 3)
    with pytest.raises(CheckpointError, match="shape conflict"):
        assign_tensors(module, {"weight": np.zeros((512, 256, 3, 3), np.float32)})


def test_checkpoint_unreadable(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(CheckpointError):
        read_checkpoint(bad)
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "absent.ckpt")
    good = tmp_path / "t.ckpt"
    write_checkpoint({"w": np.ones((4, 4), np.float32)}, good)
    good.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(good)
