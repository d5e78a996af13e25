"""The eleven model variants, assembled as a shareable trunk plus a head.

Every model accepts a batch of patients shaped ``(B, T, H, W)`` or
``(B, T, 3, H, W)`` together with optional covariates ``(B, 2)`` and returns
``(B, C)`` logits.  The split into ``trunk`` and ``head`` is the cotraining
boundary: two datasets can share one trunk while keeping their own heads.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .aggregate import AggregatorConfig, ClassifierHead, build_aggregator
from .backbones import (
    FAMILIES_3D,
    acs_vgg16_layers,
    nth_pool_index,
    scaled,
    vgg16_layers,
    video_resnet18_groups,
)

MODEL_NAMES = (
    "linear",
    "conv2d",
    "acs",
    "r3d",
    "mc3",
    "r2plus1d",
    "idxemb1",
    "idxemb4",
    "attn1",
    "attn4",
    "mhattn",
)

_AGGREGATORS = {
    "linear": ("mean", True),
    "conv2d": ("conv2d", False),
    "idxemb1": ("idxemb", True),
    "idxemb4": ("idxemb", False),
    "attn1": ("attn", True),
    "attn4": ("attn", False),
    "mhattn": ("mhattn", True),
}

# trunk = layers before the third max-pool (2D/ACS) or stem + two residual stages (3D)
DEFAULT_BOUNDARY_2D = 3
DEFAULT_BOUNDARY_3D = 3


def _as_slices(x: torch.Tensor) -> torch.Tensor:
    """-> (B, T, 3, H, W)."""
    if x.dim() == 4:
        return x.unsqueeze(2).expand(-1, -1, 3, -1, -1)
    return x


def _as_video(x: torch.Tensor) -> torch.Tensor:
    """-> (B, 3, T, H, W)."""
    return _as_slices(x).transpose(1, 2)


class SliceWise(nn.Module):
    """Apply a 2D network to every slice of every patient."""

    def __init__(self, *layers: nn.Module, adapt_input: bool = False):
        super().__init__()
        self.adapt_input = adapt_input
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if self.adapt_input:
            x = _as_slices(x)
        b, t = x.shape[:2]
        y = self.net(x.flatten(0, 1).contiguous(memory_format=torch.channels_last))
        return y.reshape(b, t, *y.shape[1:])


class VolumeNet(nn.Module):
    def __init__(self, *layers: nn.Module, adapt_input: bool = False):
        super().__init__()
        self.adapt_input = adapt_input
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if self.adapt_input:
            x = _as_video(x)
        return self.net(x)


class Head(nn.Module):
    def __init__(self, body: nn.Module, aggregator: nn.Module | None, classifier: ClassifierHead):
        super().__init__()
        self.body = body
        self.aggregator = aggregator
        self.classifier = classifier

    def forward(self, h, cov=None):
        h = self.body(h)
        if self.aggregator is not None:
            h = self.aggregator(h)
        return self.classifier(h, cov)


class StageClassifier(nn.Module):
    def __init__(self, trunk: nn.Module, head: Head, name: str = ""):
        super().__init__()
        self.name = name
        self.trunk = trunk
        self.head = head

    def forward(self, x, cov=None):
        return self.head(self.trunk(x), cov)

    @property
    def aggregator(self):
        return self.head.aggregator


def _init_vgg(layers):
    for m in layers:
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(m.bias)


def build_model(
    name: str,
    num_classes: int,
    width_multiplier: float = 1.0,
    use_covariates: bool = False,
    boundary: int | None = None,
    batch_norm: bool = False,
    scaled_attention: bool = False,
    max_slices: int = 32,
) -> StageClassifier:
    """Build one of :data:`MODEL_NAMES`.

    ``boundary`` selects the trunk/head cut: the index of the max-pool that
    starts the head for VGG/ACS models, or the number of ResNet groups
    (stem counts as one) kept in the trunk for 3D models.
    """
    if name not in MODEL_NAMES:
        raise ValueError(f"unknown model {name!r}; valid names: {', '.join(MODEL_NAMES)}")
    dim = scaled(512, width_multiplier)
    classifier = ClassifierHead(dim, num_classes, use_covariates)

    if name in FAMILIES_3D:
        k = DEFAULT_BOUNDARY_3D if boundary is None else boundary
        groups = video_resnet18_groups(name, width_multiplier)
        if not 0 <= k < len(groups):
            raise ValueError(f"3D boundary must be in [0, {len(groups) - 1}]")
        trunk = VolumeNet(*groups[:k], adapt_input=True)
        head = Head(VolumeNet(*groups[k:]), None, classifier)
        return StageClassifier(trunk, head, name)

    if name == "acs":
        layers = acs_vgg16_layers(width_multiplier, batch_norm)
        cut = nth_pool_index(layers, DEFAULT_BOUNDARY_2D if boundary is None else boundary)
        trunk = VolumeNet(*layers[:cut], adapt_input=True)
        body = VolumeNet(*layers[cut:], nn.AdaptiveAvgPool3d(1), nn.Flatten(1))
        return StageClassifier(trunk, Head(body, None, classifier), name)

    layers = vgg16_layers(width_multiplier, batch_norm)
    _init_vgg(layers)
    cut = nth_pool_index(layers, DEFAULT_BOUNDARY_2D if boundary is None else boundary)
    kind, pool_to_1 = _AGGREGATORS[name]
    agg_cfg = AggregatorConfig(
        kind=kind,
        pool_to_1=pool_to_1,
        embed_dim=dim,
        max_slices=max_slices,
        use_covariates=use_covariates,
        scaled_attention=scaled_attention,
    )
    trunk = SliceWise(*layers[:cut], adapt_input=True)
    head = Head(SliceWise(*layers[cut:]), build_aggregator(agg_cfg, dim), classifier)
    # NHWC convolutions are about twice as fast on CPU for these narrow layers
    return StageClassifier(trunk, head, name).to(memory_format=torch.channels_last)


class CotrainModel(nn.Module):
    """One shared trunk feeding two dataset-specific heads."""

    def __init__(self, model_a: StageClassifier, model_b: StageClassifier):
        super().__init__()
        self.shared = model_a.trunk
        self.head_a = model_a.head
        self.head_b = model_b.head

    def model_a(self) -> StageClassifier:
        return StageClassifier(self.shared, self.head_a, "a")

    def model_b(self) -> StageClassifier:
        return StageClassifier(self.shared, self.head_b, "b")

    def forward(self, x_a, x_b, cov_a=None, cov_b=None):
        h = self.shared(torch.cat([x_a, x_b], dim=0))
        h_a, h_b = h[: x_a.shape[0]], h[x_a.shape[0] :]
        return self.head_a(h_a, cov_a), self.head_b(h_b, cov_b)


def build_cotrain_model(
    name: str,
    num_classes_a: int,
    num_classes_b: int,
    width_multiplier: float = 1.0,
    use_covariates: bool = False,
    boundary: int | None = None,
    **kwargs,
) -> CotrainModel:
    a = build_model(name, num_classes_a, width_multiplier, use_covariates, boundary, **kwargs)
    b = build_model(name, num_classes_b, width_multiplier, use_covariates, boundary, **kwargs)
    return CotrainModel(a, b)
