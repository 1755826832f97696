"""Fusion-network tests: shapes, block oracles, parameter accounting,
checkpoint round-trips, and the end-to-end gradient check."""

import numpy as np
import pytest
from scipy.special import erf

from wbfusion import engine
from wbfusion.engine import Tensor, gradient_check
from wbfusion.model import (
    PRESET_NAMES,
    ModelConfig,
    ModelParams,
    PresetStack,
    forward,
    forward_graph,
    gated_ffn,
    init_params,
    load_checkpoint,
    param_count,
    save_checkpoint,
    transposed_attention,
)


def random_stack(rng, h=8, w=8):
    return PresetStack(rng.random((5, h, w, 3)))


# ---------------------------------------------------------------------------
# configuration and parameter accounting


def test_param_count_default_in_budget():
    n = param_count(ModelConfig())
    assert 4000 <= n <= 10000
    # exact accounting of the default architecture
    assert n == 5946


def test_param_count_single_preset_is_smaller():
    assert param_count(ModelConfig(preset_count=1)) < param_count(ModelConfig())


def test_param_count_grows_with_expansion():
    base = param_count(ModelConfig())
    assert param_count(ModelConfig(ffn_expansion=4.0)) > base


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(feature_channels=16, attention_heads=3)
    with pytest.raises(ValueError, match="preset_count"):
        ModelConfig(preset_count=0)


def test_flatten_unflatten_roundtrip_bitexact():
    cfg = ModelConfig()
    params = init_params(cfg, seed=3)
    flat = params.flatten()
    assert flat.size == param_count(cfg)
    rebuilt = ModelParams.from_flat(flat, cfg)
    for (n1, t1), (n2, t2) in zip(params.named_tensors(), rebuilt.named_tensors()):
        assert n1 == n2
        assert np.array_equal(t1.data, t2.data)


def test_init_deterministic_in_seed():
    a = init_params(ModelConfig(), seed=11).flatten()
    b = init_params(ModelConfig(), seed=11).flatten()
    c = init_params(ModelConfig(), seed=12).flatten()
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


# ---------------------------------------------------------------------------
# forward contracts


def test_forward_shape_and_finite():
    rng = np.random.default_rng(0)
    stack = random_stack(rng)
    params = init_params(ModelConfig(), seed=0)
    out = forward(stack, params, ModelConfig())
    assert out.shape == (8, 8, 3)
    assert np.all(np.isfinite(out))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_forward_deterministic():
    rng = np.random.default_rng(1)
    stack = random_stack(rng)
    params = init_params(ModelConfig(), seed=0)
    a = forward(stack, params, ModelConfig())
    b = forward(stack, params, ModelConfig())
    assert np.array_equal(a, b)


def test_forward_rejects_wrong_channel_count():
    params = init_params(ModelConfig(), seed=0)
    with pytest.raises(ValueError, match="channels"):
        forward(np.zeros((8, 8, 12), dtype=np.float32), params, ModelConfig())


def test_training_output_unclamped_inference_clamped():
    rng = np.random.default_rng(2)
    stack = random_stack(rng)
    params = init_params(ModelConfig(), seed=5)
    graph_out = forward(stack, params, ModelConfig(), training=True)
    assert isinstance(graph_out, Tensor)
    clamped = forward(stack, params, ModelConfig())
    assert clamped.min() >= 0.0 and clamped.max() <= 1.0
    # raw network output at init does stray outside [0,1]
    assert graph_out.data.min() < 0.0 or graph_out.data.max() > 1.0


# ---------------------------------------------------------------------------
# transposed attention


def test_attention_map_shape_independent_of_image_size():
    cfg = ModelConfig()
    params = init_params(cfg, seed=1)
    ch = cfg.feature_channels // cfg.attention_heads
    for size in (8, 32):
        feats = Tensor(np.random.default_rng(size).random((size, size, 15)), dtype=np.float32)
        with engine.no_grad():
            _, attn = transposed_attention(feats, params, cfg.attention_heads, return_attention=True)
        assert attn.shape == (1, cfg.attention_heads, ch, ch)


def test_attention_rows_sum_to_one():
    cfg = ModelConfig()
    params = init_params(cfg, seed=2)
    feats = Tensor(np.random.default_rng(3).random((10, 12, 15)), dtype=np.float32)
    with engine.no_grad():
        _, attn = transposed_attention(feats, params, cfg.attention_heads, return_attention=True)
    assert np.abs(attn.sum(axis=-1) - 1.0).max() < 1e-5


def test_attention_matches_matrix_oracle():
    # 2x2x2 features, one head, hand-set projections, plain numpy arithmetic
    rng = np.random.default_rng(7)
    c = 2
    cfg = ModelConfig(preset_count=1, feature_channels=c, attention_heads=1)
    params = init_params(cfg, seed=0, dtype=np.float64)
    qkv_k = rng.normal(size=(1, 1, c, 3 * c))
    qkv_b = rng.normal(size=3 * c)
    dw_k = rng.normal(size=(3, 3, 3 * c))
    dw_b = rng.normal(size=3 * c)
    out_k = rng.normal(size=(1, 1, c, c))
    out_b = rng.normal(size=c)
    tau = np.array([1.7])
    params.attn_qkv_kernel.data = qkv_k.copy()
    params.attn_qkv_bias.data = qkv_b.copy()
    params.attn_dw_kernel.data = dw_k.copy()
    params.attn_dw_bias.data = dw_b.copy()
    params.attn_out_kernel.data = out_k.copy()
    params.attn_out_bias.data = out_b.copy()
    params.attn_temperature.data = tau.copy()

    feats = rng.random((2, 2, c))
    with engine.no_grad():
        got = transposed_attention(Tensor(feats, dtype=np.float64), params, 1)

    # oracle: same definition, independent numpy path
    from tests.test_engine import loop_depthwise

    qkv = feats.reshape(-1, c) @ qkv_k[0, 0] + qkv_b
    qkv = loop_depthwise(qkv.reshape(2, 2, 3 * c), dw_k, dw_b)
    q, k, v = [qkv[:, :, i * c : (i + 1) * c].reshape(-1, c).T for i in range(3)]  # [C, HW]
    qn = q / np.sqrt((q * q).sum(axis=1, keepdims=True) + 1e-12)
    kn = k / np.sqrt((k * k).sum(axis=1, keepdims=True) + 1e-12)
    logits = tau[0] * (kn @ qn.T)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    attn = e / e.sum(axis=1, keepdims=True)
    out = (attn @ v).T.reshape(2, 2, c)
    ref = out.reshape(-1, c) @ out_k[0, 0] + out_b
    assert np.abs(got.data.reshape(-1, c) - ref).max() < 1e-6


# ---------------------------------------------------------------------------
# gated feed-forward


def test_ffn_zero_input_zero_biases_gives_zero():
    cfg = ModelConfig()
    params = init_params(cfg, seed=4)
    params.ffn_in_bias.data[:] = 0.0
    params.ffn_dw_bias.data[:] = 0.0
    params.ffn_out_bias.data[:] = 0.0
    feats = Tensor(np.zeros((6, 6, 15), dtype=np.float32))
    with engine.no_grad():
        out = gated_ffn(feats, params, cfg.ffn_expansion)
    assert np.all(out.data == 0.0)


def test_ffn_preserves_shape():
    cfg = ModelConfig()
    params = init_params(cfg, seed=4)
    for shape in ((5, 9, 15), (2, 6, 4, 15)):
        feats = Tensor(np.random.default_rng(1).random(shape), dtype=np.float32)
        with engine.no_grad():
            out = gated_ffn(feats, params, cfg.ffn_expansion)
        assert out.shape == shape


def test_ffn_matches_step_by_step_oracle():
    rng = np.random.default_rng(8)
    c = 4
    cfg = ModelConfig(preset_count=1, feature_channels=c, attention_heads=1, ffn_expansion=2.0)
    params = init_params(cfg, seed=0, dtype=np.float64)
    hidden = cfg.ffn_hidden
    in_k = rng.normal(size=(1, 1, c, 2 * hidden))
    in_b = rng.normal(size=2 * hidden)
    dw_k = rng.normal(size=(3, 3, 2 * hidden))
    dw_b = rng.normal(size=2 * hidden)
    out_k = rng.normal(size=(1, 1, hidden, c))
    out_b = rng.normal(size=c)
    params.ffn_in_kernel.data = in_k.copy()
    params.ffn_in_bias.data = in_b.copy()
    params.ffn_dw_kernel.data = dw_k.copy()
    params.ffn_dw_bias.data = dw_b.copy()
    params.ffn_out_kernel.data = out_k.copy()
    params.ffn_out_bias.data = out_b.copy()

    feats = rng.random((3, 3, c))
    with engine.no_grad():
        got = gated_ffn(Tensor(feats, dtype=np.float64), params, 2.0)

    from tests.test_engine import loop_depthwise

    t = feats.reshape(-1, c) @ in_k[0, 0] + in_b
    t = loop_depthwise(t.reshape(3, 3, 2 * hidden), dw_k, dw_b)
    a, b = t[:, :, :hidden], t[:, :, hidden:]
    gelu_a = a * 0.5 * (1.0 + erf(a / np.sqrt(2.0)))
    ref = (gelu_a * b).reshape(-1, hidden) @ out_k[0, 0] + out_b
    assert np.abs(got.data.reshape(-1, c) - ref).max() < 1e-6


# ---------------------------------------------------------------------------
# end-to-end gradients and permutation sensitivity


def test_end_to_end_gradient_check_float64():
    cfg = ModelConfig()
    params = init_params(cfg, seed=9, dtype=np.float64)
    rng = np.random.default_rng(10)
    x = Tensor(rng.random((4, 4, 15)), dtype=np.float64)
    target = rng.random((4, 4, 3))

    def build():
        out = forward_graph(x, params, cfg)
        diff = engine.sub(out, Tensor(target, dtype=np.float64))
        return engine.mean_all(engine.mul(diff, diff))

    build_out = build
    # probe 10 random scalar parameters spread across all tensors
    params.zero_grad()
    loss = build()
    engine.backward(loss)
    tensors = params.tensor_list()
    sizes = np.array([t.size for t in tensors])
    flat_positions = np.random.default_rng(11).choice(sizes.sum(), size=10, replace=False)
    h = 1e-5
    for pos in flat_positions:
        ti = int(np.searchsorted(np.cumsum(sizes), pos, side="right"))
        offset = int(pos - np.concatenate([[0], np.cumsum(sizes)])[ti])
        tensor = tensors[ti]
        flat = tensor.data.reshape(-1)
        orig = flat[offset]
        flat[offset] = orig + h
        with engine.no_grad():
            fp = build().item()
        flat[offset] = orig - h
        with engine.no_grad():
            fm = build().item()
        flat[offset] = orig
        numeric = (fp - fm) / (2 * h)
        analytic = tensor.grad.reshape(-1)[offset]
        denom = max(abs(analytic), abs(numeric), 1e-8)
        assert abs(analytic - numeric) / denom < 1e-5


def test_end_to_end_gradcheck_small_leaves():
    # full finite differences over every element of a downsized model
    cfg = ModelConfig(preset_count=2, feature_channels=4, attention_heads=2, ffn_expansion=1.0)
    params = init_params(cfg, seed=13, dtype=np.float64)
    rng = np.random.default_rng(14)
    x = Tensor(rng.random((4, 4, 6)), dtype=np.float64)
    leaves = params.tensor_list()
    err = gradient_check(lambda: forward_graph(x, params, cfg), leaves, h=1e-5)
    assert err < 1e-5


def test_trained_model_is_permutation_sensitive():
    # quick fit so the conv-in weights differentiate the preset slots
    from wbfusion import synth
    from wbfusion.optim import AdamState, adam_step

    cfg = ModelConfig()
    params = init_params(cfg, seed=0)
    scenes = [synth.render_scene(synth.generate_scene(s, 16, 16)) for s in range(2)]
    xs = np.stack([np.float32(s.stack.concat()) for s in scenes])
    ts = np.stack([np.float32(s.gt) for s in scenes])
    adam = AdamState()
    tensors = params.tensor_list()
    for _ in range(30):
        params.zero_grad()
        pred = forward_graph(Tensor(xs), params, cfg)
        d = engine.sub(pred, Tensor(ts))
        engine.backward(engine.mean_all(engine.mul(d, d)))
        adam_step(tensors, [t.grad for t in tensors], adam, 1e-3)

    stack = scenes[0].stack
    base = forward(stack, params, cfg)
    permuted = PresetStack(stack.images[[1, 0, 3, 4, 2]])
    out = forward(permuted, params, cfg)
    assert not np.allclose(base, out, atol=1e-4)


# ---------------------------------------------------------------------------
# checkpoint io


def test_checkpoint_roundtrip_bitexact(tmp_path):
    cfg = ModelConfig()
    params = init_params(cfg, seed=21)
    path = tmp_path / "model.wbf"
    save_checkpoint(path, params)
    loaded, loaded_cfg = load_checkpoint(path)
    assert loaded_cfg == cfg
    for (n1, t1), (n2, t2) in zip(params.named_tensors(), loaded.named_tensors()):
        assert n1 == n2
        assert np.array_equal(t1.data, t2.data)
    # byte-identical on re-save
    save_checkpoint(tmp_path / "again.wbf", loaded)
    assert (tmp_path / "model.wbf").read_bytes() == (tmp_path / "again.wbf").read_bytes()


def test_checkpoint_magic_guard(tmp_path):
    path = tmp_path / "bogus.wbf"
    path.write_bytes(b"NOPE" + b"\0" * 64)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_header_fields(tmp_path):
    cfg = ModelConfig(preset_count=3, feature_channels=12, attention_heads=2, ffn_expansion=1.5)
    params = init_params(cfg, seed=2)
    path = tmp_path / "dst.wbf"
    save_checkpoint(path, params)
    blob = path.read_bytes()
    assert blob[:4] == b"WBF1"
    import struct

    p, c, heads, expansion = struct.unpack_from("<IIIf", blob, 4)
    assert (p, c, heads) == (3, 12, 2)
    assert expansion == pytest.approx(1.5)


def test_preset_stack_validation():
    rng = np.random.default_rng(1)
    with pytest.raises(ValueError, match="presets"):
        PresetStack(rng.random((4, 8, 8, 3)))
    with pytest.raises(ValueError, match=r"\[0,1\]"):
        PresetStack(rng.random((5, 8, 8, 3)) * 2.0)
