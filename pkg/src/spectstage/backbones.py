"""Feature extractors and the named-tensor checkpoint format.

* ``vgg16_layers`` - the VGG-16 convolutional stack without its last
  max-pool (72x72 input -> 4x4 maps).
* ``ACSConv`` - one 2D kernel bank split by output channel into axial,
  coronal and sagittal parts, each run as a degenerate 3D convolution.
* ``VideoResNet18`` - R3D, MC3 and R(2+1)D ResNet-18 variants.

Every channel width is scaled by ``width_multiplier`` (rounded up, at least 1).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

VGG16_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512]
FAMILIES_3D = ("r3d", "mc3", "r2plus1d")


def scaled(width: int, wm: float) -> int:
    return max(1, math.ceil(width * wm - 1e-9))


@dataclass
class BackboneConfig:
    family: str = "vgg16conv"
    width_multiplier: float = 1.0
    pretrained_checkpoint: str | None = None
    batch_norm: bool = False

    def __post_init__(self):
        if self.family not in ("vgg16conv",) + FAMILIES_3D:
            raise ValueError(f"unknown backbone family {self.family!r}")
        if not 0 < self.width_multiplier <= 1:
            raise ValueError("width_multiplier must lie in (0, 1]")

    @property
    def feature_dim(self) -> int:
        return scaled(512, self.width_multiplier)


# --------------------------------------------------------------------------- VGG


def vgg16_layers(wm: float = 1.0, batch_norm: bool = False, in_channels: int = 3) -> list[nn.Module]:
    layers: list[nn.Module] = []
    c = in_channels
    for v in VGG16_CFG:
        if v == "M":
            layers.append(nn.MaxPool2d(2))
            continue
        out = scaled(v, wm)
        layers.append(nn.Conv2d(c, out, 3, padding=1))
        if batch_norm:
            layers.append(nn.BatchNorm2d(out))
        layers.append(nn.ReLU(inplace=True))
        c = out
    return layers


def nth_pool_index(layers: Iterable[nn.Module], n: int) -> int:
    """Position of the ``n``-th (1-based) max-pool layer."""
    seen = 0
    for i, layer in enumerate(layers):
        if isinstance(layer, (nn.MaxPool2d, nn.MaxPool3d)):
            seen += 1
            if seen == n:
                return i
    raise ValueError(f"fewer than {n} pooling layers")


def vgg16_features(wm: float = 1.0, batch_norm: bool = False) -> nn.Sequential:
    """(N, 3, 72, 72) -> (N, 512*wm, 4, 4)."""
    return nn.Sequential(*vgg16_layers(wm, batch_norm))


# --------------------------------------------------------------------------- ACS


def default_acs_split(c_out: int) -> tuple[int, int, int]:
    """As even as possible; the remainder goes axial first, then coronal."""
    base, rem = divmod(c_out, 3)
    return base + (rem > 0), base + (rem > 1), base


def acs_kernels(weight: torch.Tensor, split: tuple[int, int, int]) -> list[torch.Tensor]:
    """Unsqueeze the three channel blocks of a 2D kernel bank into 3D kernels.

    Volume axes are (T, H, W).  The axial block convolves (H, W) with extent
    1 over T, the coronal block convolves (T, W) with extent 1 over H, and the
    sagittal block convolves (T, H) with extent 1 over W.
    """
    c_a, c_c, c_s = split
    if c_a + c_c + c_s != weight.shape[0] or min(split) < 0:
        raise ValueError(f"split {split} does not partition {weight.shape[0]} output channels")
    w_a, w_c, w_s = torch.split(weight, [c_a, c_c, c_s], dim=0)
    return [w_a.unsqueeze(2), w_c.unsqueeze(3), w_s.unsqueeze(4)]


def acs_conv(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    split: tuple[int, int, int] | None = None,
) -> torch.Tensor:
    """Same-padded, stride-1 ACS convolution of ``x`` (B, C_i, T, H, W)."""
    k = weight.shape[-1]
    if weight.shape[-2] != k or k % 2 == 0:
        raise ValueError("ACS kernels must be square with odd size")
    split = default_acs_split(weight.shape[0]) if split is None else tuple(split)
    p = k // 2
    pads = [(0, p, p), (p, 0, p), (p, p, 0)]
    biases = torch.split(bias, list(split)) if bias is not None else [None] * 3
    outs = [
        F.conv3d(x, w, b, padding=pad)
        for w, b, pad in zip(acs_kernels(weight, split), biases, pads)
        if w.shape[0] > 0
    ]
    return torch.cat(outs, dim=1)


class ACSConv(nn.Module):
    """2D-shaped parameters, 3D behaviour; checkpoints stay 2D-compatible."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, split=None):
        super().__init__()
        self.split = tuple(split) if split is not None else default_acs_split(out_channels)
        if sum(self.split) != out_channels:
            raise ValueError(f"split {self.split} does not sum to {out_channels}")
        conv = nn.Conv2d(in_channels, out_channels, kernel_size)
        self.weight = nn.Parameter(conv.weight.detach().clone())
        self.bias = nn.Parameter(conv.bias.detach().clone())

    def forward(self, x):
        return acs_conv(x, self.weight, self.bias, self.split)


def acs_vgg16_layers(wm: float = 1.0, batch_norm: bool = False) -> list[nn.Module]:
    layers: list[nn.Module] = []
    c = 3
    for v in VGG16_CFG:
        if v == "M":
            layers.append(nn.MaxPool3d(2))
            continue
        out = scaled(v, wm)
        layers.append(ACSConv(c, out, 3))
        if batch_norm:
            layers.append(nn.BatchNorm3d(out))
        layers.append(nn.ReLU(inplace=True))
        c = out
    return layers


# --------------------------------------------------------------------------- video ResNet-18


def r2plus1d_midplanes(in_planes: int, out_planes: int, t: int = 3, d: int = 3) -> int:
    """Intermediate width that keeps a (2+1)D conv at the 3D conv's parameter count."""
    return (t * d * d * in_planes * out_planes) // (d * d * in_planes + t * out_planes)


class Conv2Plus1D(nn.Sequential):
    """Spatial (1x3x3) conv, BN, ReLU, then temporal (3x1x1) conv."""

    def __init__(self, in_planes: int, out_planes: int, midplanes: int | None = None, stride: int = 1):
        mid = r2plus1d_midplanes(in_planes, out_planes) if midplanes is None else midplanes
        super().__init__(
            nn.Conv3d(in_planes, mid, (1, 3, 3), stride=(1, stride, stride), padding=(0, 1, 1), bias=False),
            nn.BatchNorm3d(mid),
            nn.ReLU(inplace=True),
            nn.Conv3d(mid, out_planes, (3, 1, 1), stride=(stride, 1, 1), padding=(1, 0, 0), bias=False),
        )


def _conv3d(in_planes, out_planes, stride):
    return nn.Conv3d(in_planes, out_planes, 3, stride=stride, padding=1, bias=False)


def _conv_spatial(in_planes, out_planes, stride):
    return nn.Conv3d(
        in_planes, out_planes, (1, 3, 3), stride=(1, stride, stride), padding=(0, 1, 1), bias=False
    )


def _conv_2plus1d(in_planes, out_planes, stride):
    return Conv2Plus1D(in_planes, out_planes, stride=stride)


class BasicBlock3d(nn.Module):
    def __init__(self, in_planes, planes, conv_builder, stride=1, temporal_stride=True):
        super().__init__()
        self.conv1 = nn.Sequential(
            conv_builder(in_planes, planes, stride), nn.BatchNorm3d(planes), nn.ReLU(inplace=True)
        )
        self.conv2 = nn.Sequential(conv_builder(planes, planes, 1), nn.BatchNorm3d(planes))
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or in_planes != planes:
            ds = (stride if temporal_stride else 1, stride, stride)
            self.downsample = nn.Sequential(
                nn.Conv3d(in_planes, planes, 1, stride=ds, bias=False), nn.BatchNorm3d(planes)
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        return self.relu(self.conv2(self.conv1(x)) + identity)


def _stem(family: str, width: int) -> nn.Sequential:
    if family == "r2plus1d":
        mid = scaled(45, width / 64)
        return nn.Sequential(
            nn.Conv3d(3, mid, (1, 7, 7), stride=(1, 2, 2), padding=(0, 3, 3), bias=False),
            nn.BatchNorm3d(mid),
            nn.ReLU(inplace=True),
            nn.Conv3d(mid, width, (3, 1, 1), padding=(1, 0, 0), bias=False),
            nn.BatchNorm3d(width),
            nn.ReLU(inplace=True),
        )
    return nn.Sequential(
        nn.Conv3d(3, width, (3, 7, 7), stride=(1, 2, 2), padding=(1, 3, 3), bias=False),
        nn.BatchNorm3d(width),
        nn.ReLU(inplace=True),
    )


def video_resnet18_groups(family: str, wm: float = 1.0) -> list[nn.Module]:
    """[stem, layer1, layer2, layer3, layer4, pool] for one 3D family.

    Input (B, 3, T, H, W); output (B, 512*wm).
    """
    if family not in FAMILIES_3D:
        raise ValueError(f"unknown 3D family {family!r}")
    widths = [scaled(w, wm) for w in (64, 128, 256, 512)]
    groups: list[nn.Module] = [_stem(family, widths[0])]
    in_planes = widths[0]
    for g, planes in enumerate(widths):
        stride = 1 if g == 0 else 2
        if family == "r3d":
            builder, temporal = _conv3d, True
        elif family == "r2plus1d":
            builder, temporal = _conv_2plus1d, True
        else:  # mc3: 3D convs in the stem and first stage only
            builder, temporal = (_conv3d, True) if g == 0 else (_conv_spatial, False)
        groups.append(
            nn.Sequential(
                BasicBlock3d(in_planes, planes, builder, stride, temporal),
                BasicBlock3d(planes, planes, builder, 1, temporal),
            )
        )
        in_planes = planes
    groups.append(nn.Sequential(nn.AdaptiveAvgPool3d(1), nn.Flatten(1)))
    _init_resnet(groups)
    return groups


def _init_resnet(groups):
    for g in groups:
        for m in g.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm3d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)


def resnet18_3d(family: str, wm: float = 1.0) -> nn.Sequential:
    return nn.Sequential(*video_resnet18_groups(family, wm))


# --------------------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"CKPT"


class CheckpointError(ValueError):
    pass


def write_checkpoint(tensors: Mapping[str, torch.Tensor | np.ndarray], path: str | Path) -> None:
    """Write named tensors as float32 records in insertion order."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            if isinstance(value, torch.Tensor):
                value = value.detach().cpu().numpy()
            # np.require keeps rank-0 tensors rank 0 (ascontiguousarray would not)
            arr = np.require(np.asarray(value, dtype="<f4"), requirements="C")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: unreadable ({exc})") from exc
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    try:
        (count,) = struct.unpack_from("<I", raw, 4)
        pos = 8
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", raw, pos)
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(raw):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(raw, "<f4", size, pos).astype(np.float32).reshape(dims)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated ({exc})") from exc
    return out


@dataclass
class LoadReport:
    assigned: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    unexpected: list[str] = field(default_factory=list)


def assign_tensors(module: nn.Module, tensors: Mapping[str, np.ndarray]) -> LoadReport:
    """Copy every name/shape match from ``tensors`` into ``module``'s state."""
    state = module.state_dict()
    report = LoadReport()
    for name, target in state.items():
        if name not in tensors:
            report.missing.append(name)
            continue
        src = tensors[name]
        if tuple(src.shape) != tuple(target.shape):
            raise CheckpointError(
                f"shape conflict for {name!r}: checkpoint {tuple(src.shape)} vs model {tuple(target.shape)}"
            )
    for name, target in state.items():
        if name in tensors:
            with torch.no_grad():
                target.copy_(torch.from_numpy(np.asarray(tensors[name])).to(target.dtype))
            report.assigned.append(name)
    report.unexpected = [n for n in tensors if n not in state]
    return report


def load_checkpoint(module: nn.Module, path: str | Path) -> LoadReport:
    return assign_tensors(module, read_checkpoint(path))
