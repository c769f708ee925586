"""Backbones split into extractor and classifier, the discriminator, and the extra classifier."""

from __future__ import annotations

from typing import Dict, Optional, Sequence

import numpy as np

from .autograd import DEFAULT_DTYPE, Tensor, no_grad
from .layers import (BasicBlock, BatchNorm2d, Conv2d, GlobalAvgPool, LeakyReLU, Linear,
                     MaxPool2d, Module, Sequential, Sigmoid, conv_bn_relu)

NIN_CHANNELS = (96, 192, 192)
RESNET_WIDTHS = (16, 32, 64)
DISC_CHANNELS = (64, 128, 256)


class Network(Module):
    """A single CNN divided into ``extractor`` blocks and a ``classifier`` head.

    ``tap_index`` selects the extractor block whose output is sent to the
    discriminator; the full extractor output is what gets fused.
    """

    def __init__(self, extractor: Sequential, classifier: Sequential, stage_names: Dict[str, int],
                 tap_point: str, kind: str, num_classes: int):
        super().__init__()
        self.extractor = extractor
        self.classifier = classifier
        self.stage_names = dict(stage_names)
        self.kind = kind
        self.num_classes = num_classes
        self.tap_index = len(extractor) - 1
        self.set_tap(tap_point)

    def set_tap(self, tap_point: str) -> None:
        if tap_point not in self.stage_names:
            raise ValueError(f"unknown tap point {tap_point!r}; choose from {sorted(self.stage_names)}")
        self.tap_point = tap_point
        self.tap_index = self.stage_names[tap_point]

    def extract(self, x, with_tap: bool = False):
        tap = None
        for i, block in enumerate(self.extractor):
            x = block(x)
            if i == self.tap_index:
                tap = x
        return (x, tap) if with_tap else x

    def forward(self, x):
        return self.classifier(self.extract(x))

    def forward_all(self, x):
        """Return ``(logits, extractor_output, tap_features)`` in one pass."""
        feats, tap = self.extract(x, with_tap=True)
        return self.classifier(feats), feats, tap

    def layer_list(self) -> list:
        """Every block of the undivided network, in order."""
        return list(self.extractor) + list(self.classifier)

    def parameter_groups(self) -> Dict[str, list]:
        return {"extractor": self.extractor.parameters(),
                "classifier": self.classifier.parameters()}

    def output_shapes(self, input_shape: Sequence[int]) -> Dict[str, tuple]:
        """Shapes of the extractor output and tap features for an input of ``input_shape``."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                probe = Tensor(np.zeros((1,) + tuple(input_shape[1:]),
                                        dtype=self.extractor.parameters()[0].dtype))
                feats, tap = self.extract(probe, with_tap=True)
        finally:
            self.train(was_training)
            self.reset_calls()
        return {"features": feats.shape[1:], "tap": tap.shape[1:]}


class Discriminator(Module):
    """Stride-2 conv/BN/LeakyReLU stages, global pooling and a linear scorer: (N, C, H, W) -> (N, 1)."""

    def __init__(self, stages: Sequential, head: Linear, final_sigmoid: bool):
        super().__init__()
        self.stages = stages
        self.pool = GlobalAvgPool()
        self.head = head
        self.final_sigmoid = final_sigmoid
        self.sigmoid = Sigmoid() if final_sigmoid else None

    def forward(self, x):
        out = self.head(self.pool(self.stages(x)))
        return self.sigmoid(out) if self.sigmoid is not None else out


class ExtraClassifier(Module):
    """The inference head operating on fused extractor features."""

    def __init__(self, layers: Sequential, in_channels: int):
        super().__init__()
        self.layers = layers
        self.in_channels = in_channels

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"fused width {x.shape[1]} != extra classifier width {self.in_channels}")
        return self.layers(x)


def _scaled(channels: Sequence[int], multiplier: float) -> list:
    return [max(1, int(round(c * multiplier))) for c in channels]


def build_small_nin(num_classes: int, width_multiplier: float = 1.0, seed: int = 0,
                    channels: Sequence[int] = NIN_CHANNELS, tap_point: str = "block3",
                    dtype=DEFAULT_DTYPE) -> Network:
    """NIN-style network: three conv + mlpconv blocks, global average pool as classifier.

    The last 1x1 convolution emits one map per class, so the extractor output
    (and the default tap) has ``num_classes`` channels at 1/4 input resolution.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if width_multiplier <= 0:
        raise ValueError("width_multiplier must be positive")
    c1, c2, c3 = _scaled(channels, width_multiplier)
    rng = np.random.default_rng(seed)
    block1 = Sequential(conv_bn_relu(3, c1, 3, rng, dtype=dtype),
                        conv_bn_relu(c1, c1, 1, rng, dtype=dtype),
                        MaxPool2d(2))
    block2 = Sequential(conv_bn_relu(c1, c2, 3, rng, dtype=dtype),
                        conv_bn_relu(c2, c2, 1, rng, dtype=dtype),
                        MaxPool2d(2))
    block3 = Sequential(conv_bn_relu(c2, c3, 3, rng, dtype=dtype),
                        conv_bn_relu(c3, c3, 1, rng, dtype=dtype),
                        Conv2d(c3, num_classes, 1, rng=rng, dtype=dtype))
    extractor = Sequential(block1, block2, block3)
    classifier = Sequential(GlobalAvgPool())
    return Network(extractor, classifier, {"block1": 0, "block2": 1, "block3": 2}, tap_point,
                   "nin", num_classes)


def build_small_resnet(depth_blocks: int = 3, num_classes: int = 10, seed: int = 0,
                       widths: Sequence[int] = RESNET_WIDTHS, tap_point: str = "block3",
                       dtype=DEFAULT_DTYPE) -> Network:
    """CIFAR-style ResNet with three stages; ``depth_blocks=3`` gives ResNet-20."""
    if depth_blocks < 1:
        raise ValueError("depth_blocks must be >= 1")
    rng = np.random.default_rng(seed)
    stem = conv_bn_relu(3, widths[0], 3, rng, dtype=dtype)
    stages, cin = [], widths[0]
    for si, w in enumerate(widths):
        blocks = [BasicBlock(cin, w, 1 if si == 0 else 2, rng, dtype=dtype)]
        blocks += [BasicBlock(w, w, 1, rng, dtype=dtype) for _ in range(depth_blocks - 1)]
        stages.append(Sequential(*blocks))
        cin = w
    extractor = Sequential(stem, *stages)
    classifier = Sequential(GlobalAvgPool(), Linear(cin, num_classes, rng=rng, dtype=dtype))
    names = {"stem": 0}
    names.update({f"block{i + 1}": i + 1 for i in range(len(widths))})
    return Network(extractor, classifier, names, tap_point, "resnet", num_classes)


def build_network(backbone: str, num_classes: int, seed: int, width_multiplier: float = 1.0,
                  depth_blocks: int = 3, tap_point: str = "block3", dtype=DEFAULT_DTYPE,
                  channels: Optional[Sequence[int]] = None) -> Network:
    if backbone == "nin":
        return build_small_nin(num_classes, width_multiplier, seed, channels or NIN_CHANNELS,
                               tap_point, dtype)
    if backbone == "resnet":
        widths = _scaled(channels or RESNET_WIDTHS, width_multiplier)
        return build_small_resnet(depth_blocks, num_classes, seed, widths, tap_point, dtype)
    raise ValueError(f"unknown backbone {backbone!r}")


def build_discriminator(in_channels: int, in_spatial: int, final_sigmoid: bool, seed: int = 0,
                        channels: Sequence[int] = DISC_CHANNELS, slope: float = 0.2,
                        dtype=DEFAULT_DTYPE) -> Discriminator:
    """Up to ``len(channels)`` stride-2 stages; stops early once the map is 1x1 (at least one stage)."""
    rng = np.random.default_rng(seed)
    stages, spatial, cin = [], in_spatial, in_channels
    for cout in channels:
        if stages and spatial <= 1:
            break
        stages.append(Sequential(Conv2d(cin, cout, 3, 2, 1, bias=False, rng=rng, dtype=dtype),
                                 BatchNorm2d(cout, dtype=dtype),
                                 LeakyReLU(slope)))
        spatial = (spatial - 1) // 2 + 1
        cin = cout
    head = Linear(cin, 1, rng=rng, dtype=dtype)
    return Discriminator(Sequential(*stages), head, final_sigmoid)


def build_extra_classifier(template: Sequential, fused_channels: int, num_classes: int,
                           seed: int = 0, dtype=DEFAULT_DTYPE) -> ExtraClassifier:
    """Copy a subnetwork classifier with its input width set to ``fused_channels``.

    A template without a fully connected layer (the NIN case) gets one appended.
    """
    rng = np.random.default_rng(seed)
    layers, has_fc = [], False
    for layer in template:
        if isinstance(layer, GlobalAvgPool):
            layers.append(GlobalAvgPool())
        elif isinstance(layer, Linear):
            layers.append(Linear(fused_channels, num_classes, rng=rng, dtype=dtype))
            has_fc = True
        else:
            raise TypeError(f"cannot widen classifier layer {layer!r}")
    if not has_fc:
        layers.append(Linear(fused_channels, num_classes, rng=rng, dtype=dtype))
    return ExtraClassifier(Sequential(*layers), fused_channels)
