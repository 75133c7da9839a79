"""Blocks, the two-view cascade, and checkpoint serialization."""

import numpy as np
import pytest

from pointgrid import autodiff as ad
from pointgrid.autodiff import Tensor, backward, reset_graph
from pointgrid.network import (
    REFERENCE_STAGE_CHANNELS,
    FcnConfig,
    ModelConfig,
    ModelParams,
    _Net,
    attention_fpn,
    config_digest,
    desk_config,
    dual_downsample,
    fcn_forward,
    full_scale_config,
    init_params,
    load_checkpoint,
    model_forward,
    point_fusion,
    save_checkpoint,
)
from pointgrid.pointcloud import PointCloud
from pointgrid.projection import GridSpec


@pytest.fixture(autouse=True)
def clean_graph():
    reset_graph()
    yield
    reset_graph()


def rng_for(seed):
    return np.random.default_rng(np.random.PCG64(seed))


def tiny_config(**over):
    base = dict(
        bev_spec=GridSpec.bev(16, 16, -8.0, -8.0, 8.0, 8.0),
        rv_spec=GridSpec.rv(32, 8),
        num_classes=4,
        block_in_channels=(9, 8),
        block_out_channels=(8, 12),
        mlp_channels=8,
        stage_channels=(8, 4, 8, 16, 16, 12, 8, 8),
    )
    base.update(over)
    return ModelConfig(**base)


def tiny_cloud(rng, n=40):
    radius = rng.uniform(2.0, 7.0, n)
    angle = rng.uniform(-np.pi, np.pi, n)
    xyz = np.column_stack([
        radius * np.cos(angle),
        radius * np.sin(angle),
        rng.uniform(-0.8, 0.2, n),
    ])
    return PointCloud(xyz=xyz, intensity=rng.uniform(0, 1, n), labels=None)


def test_fcn_config_validation():
    with pytest.raises(ValueError):
        FcnConfig(stage_channels=(8, 4, 8), downsample_height=True, input_channels=8)
    with pytest.raises(ValueError):
        FcnConfig(stage_channels=(8, 4, 8, 16, 16, 12, 8, 0),
                  downsample_height=True, input_channels=8)


def test_model_config_chaining_validation():
    with pytest.raises(ValueError):
        tiny_config(block_in_channels=(9, 99))
    with pytest.raises(ValueError):
        tiny_config(block_in_channels=(9,))
    with pytest.raises(ValueError):
        tiny_config(use_point_fusion=False)  # needs num_blocks == 1
    with pytest.raises(ValueError):
        tiny_config(num_classes=1)


def test_full_scale_constants():
    cfg = full_scale_config()
    assert cfg.stage_channels == (64, 32, 64, 128, 128, 96, 64, 64)
    assert cfg.stage_channels == REFERENCE_STAGE_CHANNELS
    assert cfg.num_blocks == 2
    assert cfg.block_in_channels == (9, 64)
    assert cfg.block_out_channels == (64, 96)
    assert cfg.mlp_channels == 64
    b = cfg.bev_spec
    assert (b.width, b.height) == (600, 600)
    assert (b.x_min, b.y_min, b.x_max, b.y_max) == (-50.0, -50.0, 50.0, 50.0)
    assert (cfg.rv_spec.width, cfg.rv_spec.height) == (2048, 64)
    assert cfg.num_classes == 19


def test_dual_downsample_shapes():
    rng = rng_for(1)
    x = Tensor(rng.normal(size=(8, 12, 3)))
    net = _Net(ModelParams(0), training=False)
    assert dual_downsample(net, "d", x, 5, True).data.shape == (4, 6, 5)
    net2 = _Net(ModelParams(0), training=False)
    assert dual_downsample(net2, "d", x, 5, False).data.shape == (8, 6, 5)


def test_dual_downsample_odd_dims_error():
    net = _Net(ModelParams(0), training=False)
    with pytest.raises(ValueError):
        dual_downsample(net, "d", Tensor(np.zeros((5, 6, 2))), 4, True)
    # odd height is fine when the height axis is not strided, odd width never is
    net2 = _Net(ModelParams(0), training=False)
    assert dual_downsample(net2, "d", Tensor(np.zeros((5, 6, 2))), 4, False
                           ).data.shape == (5, 3, 4)
    net3 = _Net(ModelParams(0), training=False)
    with pytest.raises(ValueError):
        dual_downsample(net3, "d", Tensor(np.zeros((4, 7, 2))), 4, False)


def test_dual_downsample_zero_conv_isolates_pool_branch():
    rng = rng_for(2)
    x = Tensor(rng.normal(size=(6, 6, 3)))
    params = ModelParams(3)
    net = _Net(params, training=False)
    dual_downsample(net, "d", x, 4, True)  # materialize weights
    params.tensors["d.a.w"].data[:] = 0.0
    params.tensors["d.a.b"].data[:] = 0.0
    out = dual_downsample(net, "d", x, 4, True)

    pooled = ad.maxpool2d(x, (2, 2))
    pool_branch = net.conv("d.b", pooled, 4, k=1, bn=False, act=False)
    expected = ad.relu(net.bn("d.bn", pool_branch))
    np.testing.assert_array_equal(out.data, expected.data)


def test_dual_downsample_constant_input_stays_constant():
    # with the conv branch silenced, a constant map survives pool + 1x1 conv
    x = Tensor(np.full((4, 4, 2), 1.5))
    params = ModelParams(4)
    net = _Net(params, training=False)
    dual_downsample(net, "d", x, 3, True)
    params.tensors["d.a.w"].data[:] = 0.0
    out = dual_downsample(net, "d", x, 3, True).data
    for c in range(3):
        assert np.ptp(out[:, :, c]) == 0.0


def test_dual_downsample_off_is_plain_strided_conv():
    rng = rng_for(5)
    x = Tensor(rng.normal(size=(6, 6, 3)))
    params = ModelParams(6)
    net = _Net(params, training=False)
    out = dual_downsample(net, "d", x, 4, True, use_ddb=False)
    assert out.data.shape == (3, 3, 4)
    assert "d.b.w" not in params.tensors
    assert "d.a.w" in params.tensors  # same name, checkpoints stay loadable


def attention_inputs(rng, per_channel=False):
    low = Tensor(rng.normal(size=(6, 8, 3)))
    high = Tensor(rng.normal(size=(3, 4, 5)))
    params = ModelParams(7)
    net = _Net(params, training=False)
    out = attention_fpn(net, "f", low, high, 4, (2, 2), per_channel_gate=per_channel)
    return low, high, params, net, out


def test_attention_fpn_gate_saturation():
    rng = rng_for(8)
    low, high, params, net, _ = attention_inputs(rng)
    params.tensors["f.gate.w"].data[:] = 0.0
    params.tensors["f.gate.b"].data[:] = 20.0
    out = attention_fpn(net, "f", low, high, 4, (2, 2))
    low2 = net.conv("f.low", low, 4, k=1)
    np.testing.assert_allclose(out.data, low2.data, atol=1e-6)


def test_attention_fpn_neutral_gate_blends_half_half():
    rng = rng_for(9)
    low, high, params, net, _ = attention_inputs(rng)
    params.tensors["f.gate.w"].data[:] = 0.0
    params.tensors["f.gate.b"].data[:] = 0.0
    out = attention_fpn(net, "f", low, high, 4, (2, 2))
    low2 = net.conv("f.low", low, 4, k=1)
    up = ad.upsample2d(net.conv("f.high", high, 4, k=1), (2, 2))
    np.testing.assert_allclose(out.data, 0.5 * (low2.data + up.data), rtol=1e-6)


def test_attention_fpn_shape_mismatch_error():
    rng = rng_for(10)
    net = _Net(ModelParams(0), training=False)
    low = Tensor(rng.normal(size=(6, 8, 3)))
    bad_high = Tensor(rng.normal(size=(2, 4, 5)))  # upsamples to 4x8, not 6x8
    with pytest.raises(ValueError):
        attention_fpn(net, "f", low, bad_high, 4, (2, 2))


def test_attention_fpn_off_uses_concat_merge():
    rng = rng_for(11)
    params = ModelParams(12)
    net = _Net(params, training=False)
    low = Tensor(rng.normal(size=(6, 8, 3)))
    high = Tensor(rng.normal(size=(3, 4, 5)))
    out = attention_fpn(net, "f", low, high, 4, (2, 2), use_afpn=False)
    assert out.data.shape == (6, 8, 4)
    assert "f.merge.w" in params.tensors and "f.gate.w" not in params.tensors


def test_attention_fpn_per_channel_gate_shape():
    rng = rng_for(13)
    _, _, params, _, out = attention_inputs(rng, per_channel=True)
    assert params.tensors["f.gate.w"].data.shape[-1] == 4
    assert out.data.shape == (6, 8, 4)


def fcn_cfg(downsample_height, cin=6, **over):
    kw = dict(stage_channels=(8, 4, 8, 16, 16, 12, 8, 8),
              downsample_height=downsample_height, input_channels=cin)
    kw.update(over)
    return FcnConfig(**kw)


def test_fcn_shape_contract():
    rng = rng_for(14)
    net = _Net(ModelParams(0), training=False)
    grid = Tensor(rng.normal(size=(16, 16, 6)))
    assert fcn_forward(net, "g", grid, fcn_cfg(True)).data.shape == (16, 16, 8)
    net2 = _Net(ModelParams(0), training=False)
    rv_grid = Tensor(rng.normal(size=(5, 16, 6)))  # height free when not strided
    assert fcn_forward(net2, "g", rv_grid, fcn_cfg(False)).data.shape == (5, 16, 8)


def test_fcn_divisibility_errors():
    net = _Net(ModelParams(0), training=False)
    with pytest.raises(ValueError):
        fcn_forward(net, "g", Tensor(np.zeros((12, 16, 6))), fcn_cfg(True))
    with pytest.raises(ValueError):
        fcn_forward(net, "g", Tensor(np.zeros((8, 12, 6))), fcn_cfg(False))


def test_fcn_zero_input_stays_uniform():
    # fresh biases are zero, so a zero grid propagates exactly as zero maps
    net = _Net(ModelParams(15), training=False)
    out = fcn_forward(net, "g", Tensor(np.zeros((16, 16, 6))), fcn_cfg(True))
    assert np.all(out.data == 0.0)


def test_fcn_param_count_same_for_both_views():
    pa, pb = ModelParams(0), ModelParams(1)
    fcn_forward(_Net(pa, False), "g", Tensor(np.zeros((16, 16, 6))), fcn_cfg(True))
    fcn_forward(_Net(pb, False), "g", Tensor(np.zeros((8, 16, 6))), fcn_cfg(False))
    assert pa.count() == pb.count()
    assert set(pa.tensors) == set(pb.tensors)


def test_point_fusion_empty_cloud():
    net = _Net(ModelParams(0), training=False)
    parts = [Tensor(np.zeros((0, 8))), Tensor(np.zeros((0, 4)))]
    out = point_fusion(net, "pf", parts, 6)
    assert out.data.shape == (0, 6)


def test_point_fusion_row_mismatch():
    net = _Net(ModelParams(0), training=False)
    with pytest.raises(ValueError):
        point_fusion(net, "pf", [Tensor(np.zeros((3, 8))), Tensor(np.zeros((2, 4)))], 6)


def test_point_outside_both_views_gets_finite_logits():
    cfg = tiny_config()
    params = init_params(cfg, 0)
    xyz = np.array([[60.0, 60.0, 200.0], [3.0, 0.0, -0.5]])
    cloud = PointCloud(xyz=xyz, intensity=np.array([0.5, 0.5]), labels=None)
    logits = model_forward(cloud, cfg, params)
    assert logits.data.shape == (2, 4)
    assert np.isfinite(logits.data).all()


def test_model_forward_shapes_and_determinism():
    cfg = tiny_config()
    params = init_params(cfg, 1)
    cloud = tiny_cloud(rng_for(16))
    a = model_forward(cloud, cfg, params)
    reset_graph()
    b = model_forward(cloud, cfg, params)
    assert a.data.shape == (40, 4)
    np.testing.assert_array_equal(a.data, b.data)


def test_model_forward_padding_path():
    # grid dims that need padding up to the next multiple of 8
    cfg = tiny_config(bev_spec=GridSpec.bev(12, 12, -8.0, -8.0, 8.0, 8.0),
                      rv_spec=GridSpec.rv(20, 8))
    params = init_params(cfg, 2)
    cloud = tiny_cloud(rng_for(17), n=15)
    out = model_forward(cloud, cfg, params)
    assert out.data.shape == (15, 4)
    assert np.isfinite(out.data).all()


def test_model_permutation_equivariance():
    cfg = tiny_config()
    params = init_params(cfg, 3)
    cloud = tiny_cloud(rng_for(18), n=30)
    perm = rng_for(19).permutation(30)
    base = model_forward(cloud, cfg, params, training=True)
    reset_graph()
    permuted = PointCloud(xyz=cloud.xyz[perm], intensity=cloud.intensity[perm],
                          labels=None)
    out = model_forward(permuted, cfg, params, training=True)
    np.testing.assert_array_equal(out.data, base.data[perm])


@pytest.mark.parametrize("blocks,bin_,bout", [
    (1, (9,), (8,)),
    (2, (9, 8), (8, 12)),
    (3, (9, 8, 12), (8, 12, 10)),
])
def test_model_block_count_variants(blocks, bin_, bout):
    cfg = tiny_config(num_blocks=blocks, block_in_channels=bin_,
                      block_out_channels=bout)
    params = init_params(cfg, 4)
    out = model_forward(tiny_cloud(rng_for(20), n=10), cfg, params)
    assert out.data.shape == (10, 4)


def test_gradients_reach_every_parameter():
    cfg = tiny_config()
    params = init_params(cfg, 5)
    cloud = tiny_cloud(rng_for(21), n=60)
    logits = model_forward(cloud, cfg, params, training=True)
    backward(ad.sum_all(ad.mul(logits, logits)))
    dead = [n for n, t in params.tensors.items()
            if t.grad is None or not np.any(t.grad)]
    assert dead == []


def test_ablation_flags_change_registry():
    n_full = init_params(tiny_config(), 0)
    no_pb = init_params(tiny_config(use_point_branch=False), 0)
    # fusion input shrinks by the mlp width when the point branch is dropped
    assert (n_full.tensors["b0.fuse.m0.w"].data.shape[0]
            - no_pb.tensors["b0.fuse.m0.w"].data.shape[0]) == 8

    no_ddb = init_params(tiny_config(use_ddb=False), 0)
    assert "b0.bev.ds1.b.w" in n_full.tensors
    assert "b0.bev.ds1.b.w" not in no_ddb.tensors

    no_afpn = init_params(tiny_config(use_afpn=False), 0)
    assert "b0.bev.fpn2.gate.w" in n_full.tensors
    assert "b0.bev.fpn2.merge.w" in no_afpn.tensors
    assert "b0.bev.fpn2.gate.w" not in no_afpn.tensors

    late = init_params(tiny_config(use_point_fusion=False, num_blocks=1,
                                   block_in_channels=(9,),
                                   block_out_channels=(8,)), 0)
    assert "head_bev.w" in late.tensors and "head_rv.w" in late.tensors
    assert "head.w" not in late.tensors


def test_late_averaging_head_output_shape():
    cfg = tiny_config(use_point_fusion=False, num_blocks=1,
                      block_in_channels=(9,), block_out_channels=(8,))
    params = init_params(cfg, 6)
    out = model_forward(tiny_cloud(rng_for(22), n=12), cfg, params)
    assert out.data.shape == (12, 4)


def test_init_params_deterministic_and_seed_sensitive():
    cfg = tiny_config()
    a, b, c = init_params(cfg, 7), init_params(cfg, 7), init_params(cfg, 8)
    assert set(a.tensors) == set(b.tensors) == set(c.tensors)
    assert a.count() == c.count()
    for name in a.tensors:
        np.testing.assert_array_equal(a.tensors[name].data, b.tensors[name].data)
    assert any(not np.array_equal(a.tensors[n].data, c.tensors[n].data)
               for n in a.tensors)


def test_params_registry_guards():
    cfg = tiny_config()
    params = init_params(cfg, 9)
    with pytest.raises(KeyError):
        params.parameter("nonexistent.w", (3, 3), fan_in=3)
    with pytest.raises(ValueError):
        params.parameter("b0.mlp.w", (1, 1))  # wrong shape for existing name


def test_checkpoint_roundtrip_exact(tmp_path):
    cfg = tiny_config()
    params = init_params(cfg, 10)
    # perturb running stats so the roundtrip covers them too
    for st in params.bn_states.values():
        st.running_mean += np.float32(0.25)
        st.running_var *= np.float32(1.5)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, cfg, params, {"note": "x"})
    loaded, meta = load_checkpoint(path, cfg, seed=99)
    assert meta == {"note": "x"}
    for name in params.tensors:
        np.testing.assert_array_equal(loaded.tensors[name].data,
                                      params.tensors[name].data)
    for name in params.bn_states:
        np.testing.assert_array_equal(loaded.bn_states[name].running_mean,
                                      params.bn_states[name].running_mean)
        np.testing.assert_array_equal(loaded.bn_states[name].running_var,
                                      params.bn_states[name].running_var)

    cloud = tiny_cloud(rng_for(23), n=20)
    a = model_forward(cloud, cfg, params)
    reset_graph()
    b = model_forward(cloud, cfg, loaded)
    np.testing.assert_array_equal(a.data, b.data)


def test_checkpoint_digest_mismatch(tmp_path):
    cfg = tiny_config()
    params = init_params(cfg, 11)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, cfg, params)
    other = tiny_config(num_classes=5)
    with pytest.raises(ValueError):
        load_checkpoint(path, other)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        load_checkpoint(path, tiny_config())


def test_config_digest_stable_and_distinct():
    assert config_digest(tiny_config()) == config_digest(tiny_config())
    assert config_digest(tiny_config()) != config_digest(tiny_config(num_classes=5))
    assert config_digest(desk_config()) != config_digest(full_scale_config())


def test_desk_config_is_runnable_shape():
    cfg = desk_config()
    assert cfg.num_classes == 5
    assert cfg.block_in_channels == (9, 32)
    assert cfg.bev_spec.width % 8 == 0 and cfg.rv_spec.width % 8 == 0
