"""Building blocks of the supernet and of decoded stand-alone networks."""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np

from dcss_nas.config import NUM_SCALES, SupernetSpec
from dcss_nas.errors import ShapeError
from dcss_nas.nn import BatchNorm2d, Conv2d, ConvBN, Module
from dcss_nas.supernet.space import OPERATOR_SPACE, NodeId, OperatorConfig
from dcss_nas.tensor import ops
from dcss_nas.tensor.core import Tensor

if TYPE_CHECKING:
    from numpy.typing import NDArray

STEM_STRIDE = 32


class Stem(Module):
    """7x7 stride-2 conv, then four stride-2 3x3 stages producing the 1/4..1/32 pyramid."""

    def __init__(self, spec: SupernetSpec, rng: np.random.Generator) -> None:
        super().__init__()
        self.entry = ConvBN(3, spec.stem_channels, 7, rng, stride=2)
        channels = spec.stem_channels
        for i, width in enumerate(spec.widths):
            setattr(self, f"stage{i}", ConvBN(channels, width, 3, rng, stride=2))
            channels = width

    def forward(self, image: Tensor) -> list[Tensor]:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError("stem", "image layout", "[N, 3, H, W]", image.shape)
        _, _, h, w = image.shape
        if h % STEM_STRIDE or w % STEM_STRIDE:
            raise ShapeError("stem", "height/width divisible by 32", STEM_STRIDE, (h, w))
        x = self.entry(image)
        pyramid = []
        for i in range(NUM_SCALES):
            x = getattr(self, f"stage{i}")(x)
            pyramid.append(x)
        return pyramid


class MBConv(Module):
    """Inverted bottleneck: 1x1 expand, depthwise kxk, 1x1 project, plus residual."""

    def __init__(
        self,
        channels: int,
        op: OperatorConfig,
        rng: np.random.Generator,
        *,
        zero_init: bool = True,
    ) -> None:
        super().__init__()
        hidden = channels * op.expansion
        self.op = op
        self.expand = ConvBN(channels, hidden, 1, rng)
        self.depthwise = ConvBN(hidden, hidden, op.kernel, rng, groups=hidden)
        self.project = Conv2d(hidden, channels, 1, rng)
        self.project_bn = BatchNorm2d(channels)
        if zero_init:
            self.project.weight.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        y = self.project_bn(self.project(self.depthwise(self.expand(x))))
        return x + y


def channel_mask(channels: int, ratio: float, rng: np.random.Generator) -> NDArray[np.int64]:
    """Sorted indices of the ``round(ratio * channels)`` channels routed through the mixture."""
    keep = max(1, round(ratio * channels))
    return np.sort(rng.permutation(channels)[:keep]).astype(np.int64)


class MixtureLayer(Module):
    """Softmax-weighted blend of the six MBConv operators on the masked channels.

    Channels outside the mask are copied through unchanged, in place.
    """

    def __init__(
        self,
        channels: int,
        mask: NDArray[np.int64],
        rng: np.random.Generator,
        *,
        zero_init: bool = True,
    ) -> None:
        super().__init__()
        self.channels = channels
        self.mask = mask
        self.bypass = np.setdiff1d(np.arange(channels), mask).astype(np.int64)
        for i, op in enumerate(OPERATOR_SPACE):
            setattr(self, f"op{i}", MBConv(len(mask), op, rng, zero_init=zero_init))

    def operator(self, index: int) -> MBConv:
        op: MBConv = getattr(self, f"op{index}")
        return op

    def forward(self, x: Tensor, weights: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError("mixture_layer", "channels", self.channels, x.shape)
        masked = ops.take(x, self.mask, axis=1) if self.bypass.size else x
        outputs = [self.operator(i)(masked) for i in range(len(OPERATOR_SPACE))]
        mixed = ops.weighted_sum(weights, outputs)
        if not self.bypass.size:
            return mixed
        passthrough = ops.take(x, self.bypass, axis=1)
        parts = [(mixed, self.mask), (passthrough, self.bypass)]
        return ops.scatter_channels(parts, self.channels)


class Alignment(Module):
    """Shape-alignment branch carrying node ``src``'s output to ``dst``'s resolution and width.

    Lower-to-higher resolution uses bilinear upsampling, higher-to-lower a
    chain of stride-2 3x3 conv/BN/ReLU (one per octave); a 1x1 conv plus BN
    then matches the channel count.
    """

    def __init__(
        self, src: NodeId, dst: NodeId, widths: tuple[int, ...], rng: np.random.Generator
    ) -> None:
        super().__init__()
        self.up = 2 ** max(src.scale - dst.scale, 0)
        self.down = max(dst.scale - src.scale, 0)
        channels = widths[src.scale]
        for i in range(self.down):
            setattr(self, f"down{i}", ConvBN(channels, channels, 3, rng, stride=2))
        self.project = ConvBN(channels, widths[dst.scale], 1, rng, relu=False)

    def forward(self, x: Tensor) -> Tensor:
        for i in range(self.down):
            x = getattr(self, f"down{i}")(x)
        if self.up > 1:
            x = ops.bilinear_upsample(x, self.up)
        return self.project(x)


class Head(Module):
    """Upsample finals to 1/4, concatenate, 3x3 conv/BN/ReLU, 1x1 classifier, x4 bilinear."""

    def __init__(self, spec: SupernetSpec, rng: np.random.Generator) -> None:
        super().__init__()
        concat_channels = sum(spec.widths)
        hidden = 2 * spec.width
        self.fuse = ConvBN(concat_channels, hidden, 3, rng)
        self.classifier = Conv2d(hidden, spec.num_classes, 1, rng, bias=True)

    def forward(self, finals: list[Tensor]) -> Tensor:
        if len(finals) != NUM_SCALES:
            raise ShapeError("head", "final feature count", NUM_SCALES, len(finals))
        upsampled = [ops.bilinear_upsample(f, 2**i) for i, f in enumerate(finals)]
        logits = self.classifier(self.fuse(ops.concat(upsampled, axis=1)))
        return ops.bilinear_upsample(logits, 4)
