"""Task-specific VGG-style trunks exposing per-block feature maps.

A "block" is the run of 3x3 conv+relu layers sharing one resolution; pooling
sits between blocks. The three task variants differ in block count and in
where stride is traded for dilation:

* saliency: 6 blocks; pool5 has stride 1 and conv6 uses dilation 2, so conv5
  and conv6 share spatial size (cumulative strides 1,2,4,8,16,16);
* edge / skeleton: 5 blocks; pool4 has stride 1 and conv5 uses dilation 2
  (cumulative strides 1,2,4,8,8).

Channel counts follow VGG (64..512) scaled by ``width_scale`` (ceil).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import program
from .engine import Tensor
from .program import ParamSpec, Step, conv_step

TASKS = ("saliency", "edge", "skeleton")

_VGG_CHANNELS = {"conv1": 64, "conv2": 128, "conv3": 256, "conv4": 512,
                 "conv5": 512, "conv6": 512}
_VGG_LAYERS = {"conv1": 2, "conv2": 2, "conv3": 3, "conv4": 3, "conv5": 3, "conv6": 3}


@dataclass(frozen=True)
class BlockSpec:
    name: str
    conv_layers: int
    channels: int
    followed_by_pool: bool
    pool_stride: int
    dilation: int


@dataclass(frozen=True)
class BackboneVariant:
    task: str
    blocks: tuple
    width_scale: float


def scaled_channels(base: int, width_scale: float) -> int:
    return max(1, math.ceil(base * width_scale))


def build_backbone(task: str, width_scale: float = 1.0) -> BackboneVariant:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if not 0.0 < width_scale <= 1.0:
        raise ValueError("width_scale must be in (0, 1]")
    if width_scale * min(_VGG_CHANNELS.values()) < 1.0:
        raise ValueError("width_scale too small: smallest block would have < 1 channel")

    if task == "saliency":
        names = ["conv1", "conv2", "conv3", "conv4", "conv5", "conv6"]
        # pools after conv1..conv4 stride 2, pool5 stride 1, nothing after conv6
        pool_strides = {"conv1": 2, "conv2": 2, "conv3": 2, "conv4": 2, "conv5": 1}
        dilations = {"conv6": 2}
    else:
        names = ["conv1", "conv2", "conv3", "conv4", "conv5"]
        pool_strides = {"conv1": 2, "conv2": 2, "conv3": 2, "conv4": 1}
        dilations = {"conv5": 2}

    blocks = []
    for name in names:
        blocks.append(BlockSpec(
            name=name,
            conv_layers=_VGG_LAYERS[name],
            channels=scaled_channels(_VGG_CHANNELS[name], width_scale),
            followed_by_pool=name in pool_strides,
            pool_stride=pool_strides.get(name, 1),
            dilation=dilations.get(name, 1),
        ))
    return BackboneVariant(task=task, blocks=tuple(blocks), width_scale=width_scale)


def block_strides(variant: BackboneVariant) -> list[int]:
    """Cumulative stride at each block's output."""
    strides = []
    s = 1
    for block in variant.blocks:
        strides.append(s)
        if block.followed_by_pool:
            s *= block.pool_stride
    return strides


def pool_geometry(pool_stride: int):
    """(window, stride, padding) for an inter-block pool.

    Stride-2 pools use the classic 2x2 window; stride-1 pools must preserve
    spatial size, which needs a 3x3 window with padding 1.
    """
    if pool_stride == 2:
        return 2, 2, 0
    if pool_stride == 1:
        return 3, 1, 1
    raise ValueError(f"unsupported pool stride {pool_stride}")


def backbone_steps(variant: BackboneVariant, image_slot: str = "image"):
    """Lower the trunk to program steps.

    Returns (steps, param_specs, block_slots) where block_slots[i] names the
    slot holding block i's output (last relu of the block, before any pool).
    """
    steps: list[Step] = []
    param_specs: list[ParamSpec] = []
    block_slots: list[str] = []
    cur = image_slot
    in_ch = 3
    for block in variant.blocks:
        for j in range(block.conv_layers):
            wname = f"backbone.{block.name}.{j}.w"
            bname = f"backbone.{block.name}.{j}.b"
            param_specs.append(ParamSpec(wname, (block.channels, in_ch, 3, 3), "he"))
            param_specs.append(ParamSpec(bname, (1, block.channels, 1, 1), "zero"))
            conv_out = f"{block.name}.{j}.pre"
            steps.append(conv_step(cur, conv_out, wname, bname,
                                   stride=1, padding=block.dilation, dilation=block.dilation))
            cur = f"{block.name}.{j}"
            steps.append(Step("relu", (conv_out,), cur))
            in_ch = block.channels
        block_slots.append(cur)
        if block.followed_by_pool:
            window, stride, padding = pool_geometry(block.pool_stride)
            pooled = f"{block.name}.pool"
            steps.append(Step("pool", (cur,), pooled,
                              {"window": window, "stride": stride, "padding": padding}))
            cur = pooled
    return steps, param_specs, block_slots


def init_backbone_params(variant: BackboneVariant, seed: int) -> dict[str, Tensor]:
    _, param_specs, _ = backbone_steps(variant)
    return program.init_params(param_specs, seed)


def forward_backbone(variant: BackboneVariant, params, image: Tensor) -> list[Tensor]:
    """Run the trunk, returning one output per block (shallow to deep)."""
    _, _, h, w = image.shape
    if h % 16 or w % 16:
        raise ValueError(f"input spatial size {h}x{w} must be divisible by 16")
    steps, _, block_slots = backbone_steps(variant)
    env = program.run_tensor(steps, params, {"image": image})
    return [env[slot] for slot in block_slots]


def param_count(variant: BackboneVariant) -> int:
    """Exact learnable-scalar count; a pure function of the variant."""
    _, param_specs, _ = backbone_steps(variant)
    return sum(int(np.prod(ps.shape)) for ps in param_specs)
