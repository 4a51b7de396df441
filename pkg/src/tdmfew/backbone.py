"""Four-block convolutional feature extractor.

Each block is conv3x3 -> batch norm -> ReLU -> 2x2 max pool, so the
spatial extent floor-halves four times (84 -> 5, 32 -> 2, 16 -> 1) while
the channel count stays at the configured width. Instance-attention
blocks can be attached after any subset of blocks; when enabled they
rescale the intermediate activations before the next block.
"""

from __future__ import annotations

import numpy as np

from . import numeric as nm
from .attention import FcBlock, TdmConfig, iam_forward
from .numeric import BatchNormParams, Rng, ShapeError, Tensor


class ConvBlockParams:
    """One conv block: 3x3 kernel, bias, and batch-norm state."""

    def __init__(self, in_channels: int, out_channels: int, rng: Rng):
        fan_in = in_channels * 9
        a = (1.0 / fan_in) ** 0.5
        self.kernel = nm.parameter(rng.uniform(-a, a, (out_channels, in_channels, 3, 3)))
        self.bias = nm.parameter(np.zeros(out_channels))
        self.bn = BatchNormParams(out_channels)

    def parameters(self):
        return [self.kernel, self.bias, *self.bn.parameters()]


class BackboneParams:
    """Parameters of the 4-block extractor plus optional attention blocks.

    ``iam_blocks`` maps a block index (1-based) to the attention block
    applied to that block's output.
    """

    def __init__(self, blocks, iam_blocks=None):
        self.blocks = list(blocks)
        self.iam_blocks = dict(iam_blocks or {})

    @property
    def channels(self) -> int:
        return self.blocks[-1].kernel.shape[0]

    def parameters(self):
        params = []
        for b in self.blocks:
            params.extend(b.parameters())
        for idx in sorted(self.iam_blocks):
            params.extend(self.iam_blocks[idx].parameters())
        return params


def init_backbone(rng: Rng, channels: int = 64, in_channels: int = 3,
                  iam_after=()) -> BackboneParams:
    """Fresh backbone parameters, deterministically from ``rng``.

    Conv kernels are fan-in uniform, biases zero, batch norm at identity
    statistics. ``iam_after`` lists the (1-based) blocks to equip with an
    instance-attention block.
    """
    blocks = []
    cin = in_channels
    for i in range(4):
        blocks.append(ConvBlockParams(cin, channels, rng.child(i)))
        cin = channels
    iam_blocks = {int(i): FcBlock(channels, rng.child(10 + int(i))) for i in iam_after}
    return BackboneParams(blocks, iam_blocks)


def extract(params: BackboneParams, images, mode: str, iam_enabled: bool,
            rng: Rng | None = None, tdm_config: TdmConfig | None = None) -> Tensor:
    """Feature maps for an image batch: (B, 3, S, S) -> (B, C, S/16, S/16).

    ``iam_enabled`` gates the attached attention blocks; with it off (or no
    blocks attached) this is a plain conv stack. S must be >= 16 so four
    poolings leave at least one spatial cell.
    """
    x = images if isinstance(images, Tensor) else nm.constant(images)
    if x.ndim != 4:
        raise ShapeError(f"extract expects (B,3,S,S) images, got {x.shape}")
    if x.shape[1] != params.blocks[0].kernel.shape[1]:
        raise ShapeError(f"extract: {x.shape[1]} input channels vs "
                         f"kernel {params.blocks[0].kernel.shape}")
    if min(x.shape[2], x.shape[3]) < 16:
        raise ShapeError(f"extract needs images of at least 16x16, got {x.shape}")
    if iam_enabled and params.iam_blocks and tdm_config is None:
        raise ValueError("extract: iam_enabled requires a tdm_config")

    for i, block in enumerate(params.blocks, start=1):
        x = nm.conv2d(x, block.kernel, block.bias)
        x = nm.batchnorm(x, block.bn, mode)
        x = nm.relu(x)
        x = nm.maxpool2(x)
        if iam_enabled and i in params.iam_blocks:
            x = iam_forward(params.iam_blocks[i], x, mode, rng, tdm_config)
    return x
