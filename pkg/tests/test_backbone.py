import numpy as np
import pytest

from pixelcascade.backbone import (
    block_strides,
    build_backbone,
    forward_backbone,
    init_backbone_params,
    param_count,
    pool_geometry,
    scaled_channels,
)
from pixelcascade.engine import Tensor


def test_saliency_structure():
    v = build_backbone("saliency", 1.0)
    assert len(v.blocks) == 6
    names = [b.name for b in v.blocks]
    assert names == ["conv1", "conv2", "conv3", "conv4", "conv5", "conv6"]
    assert [b.channels for b in v.blocks] == [64, 128, 256, 512, 512, 512]
    assert [b.conv_layers for b in v.blocks] == [2, 2, 3, 3, 3, 3]
    conv5, conv6 = v.blocks[4], v.blocks[5]
    assert conv5.followed_by_pool and conv5.pool_stride == 1  # pool5 stride 1
    assert conv6.dilation == 2
    assert not conv6.followed_by_pool
    assert block_strides(v) == [1, 2, 4, 8, 16, 16]


def test_edge_structure():
    v = build_backbone("edge", 1.0)
    assert len(v.blocks) == 5
    conv4, conv5 = v.blocks[3], v.blocks[4]
    assert conv4.followed_by_pool and conv4.pool_stride == 1  # pool4 stride 1
    assert conv5.dilation == 2
    assert block_strides(v) == [1, 2, 4, 8, 8]


def test_skeleton_same_trunk_as_edge():
    e = build_backbone("edge", 1.0)
    s = build_backbone("skeleton", 1.0)
    assert [b.channels for b in s.blocks] == [b.channels for b in e.blocks]
    assert block_strides(s) == block_strides(e)


def test_width_scaling():
    v = build_backbone("saliency", 0.125)
    assert [b.channels for b in v.blocks] == [8, 16, 32, 64, 64, 64]
    assert block_strides(v) == [1, 2, 4, 8, 16, 16]
    assert scaled_channels(100, 0.3) == 30
    assert scaled_channels(10, 0.05) == 1  # ceil keeps at least one channel


def test_width_scale_bounds():
    with pytest.raises(ValueError):
        build_backbone("saliency", 0.0)
    with pytest.raises(ValueError):
        build_backbone("saliency", 1.5)
    with pytest.raises(ValueError):
        build_backbone("saliency", 1 / 128)


def test_unknown_task():
    with pytest.raises(ValueError):
        build_backbone("depth")


def test_pool_geometry_preserves_size_for_stride1():
    assert pool_geometry(2) == (2, 2, 0)
    with pytest.raises(ValueError):
        pool_geometry(3)
    window, stride, padding = pool_geometry(1)
    # output size = (H + 2p - w)/s + 1 = H for stride 1
    assert (16 + 2 * padding - window) // stride + 1 == 16


def test_forward_output_sizes_saliency():
    v = build_backbone("saliency", 1 / 16)
    params = init_backbone_params(v, seed=0)
    rng = np.random.default_rng(0)
    image = Tensor(rng.uniform(size=(1, 3, 64, 64)))
    outs = forward_backbone(v, params, image)
    assert [o.shape[2] for o in outs] == [64, 32, 16, 8, 4, 4]
    assert [o.shape[1] for o in outs] == [b.channels for b in v.blocks]
    # conv5 and conv6 share spatial size (pool5 stride 1 + dilation 2)
    assert outs[4].shape[2:] == outs[5].shape[2:]


def test_forward_output_sizes_edge():
    v = build_backbone("edge", 1 / 16)
    params = init_backbone_params(v, seed=0)
    image = Tensor(np.zeros((1, 3, 64, 64)))
    outs = forward_backbone(v, params, image)
    assert [o.shape[2] for o in outs] == [64, 32, 16, 8, 8]


def test_indivisible_input_rejected():
    v = build_backbone("edge", 1 / 16)
    params = init_backbone_params(v, seed=0)
    with pytest.raises(ValueError):
        forward_backbone(v, params, Tensor(np.zeros((1, 3, 60, 60))))


def test_zero_image_smoke():
    v = build_backbone("saliency", 1 / 16)
    params = init_backbone_params(v, seed=3)
    outs = forward_backbone(v, params, Tensor(np.zeros((1, 3, 32, 32))))
    assert len(outs) == 6  # biases are zero, so all outputs are zero maps
    assert all(np.all(o.data == 0.0) for o in outs)


def test_param_count_exact():
    v = build_backbone("saliency", 1.0)

    def conv_scalars(in_c, out_c):
        return out_c * in_c * 9 + out_c

    expected = 0
    in_c = 3
    for channels, layers in [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3), (512, 3)]:
        for _ in range(layers):
            expected += conv_scalars(in_c, channels)
            in_c = channels
    assert param_count(v) == expected
    # pure function of the variant
    assert param_count(build_backbone("saliency", 1.0)) == expected


def test_init_deterministic():
    v = build_backbone("edge", 1 / 8)
    p1 = init_backbone_params(v, seed=42)
    p2 = init_backbone_params(v, seed=42)
    assert p1.keys() == p2.keys()
    for k in p1:
        assert np.array_equal(p1[k].data, p2[k].data)
    p3 = init_backbone_params(v, seed=43)
    assert any(not np.array_equal(p1[k].data, p3[k].data) for k in p1)
