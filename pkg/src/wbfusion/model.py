"""Preset-fusion network: five white-balance renders in, corrected sRGB out.

Pipeline: channel-concat presets -> 3x3 conv to C features -> channel-wise
(transposed) multi-head attention with residual -> gated feed-forward with
residual -> 3x3 conv to RGB. Attention operates across channels, so its map
is C/heads x C/heads regardless of image size.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor

PRESET_NAMES = ("tungsten", "fluorescent", "daylight", "cloudy", "shade")

CHECKPOINT_MAGIC = b"WBF1"


@dataclass
class PresetStack:
    """Five sRGB renders of one scene, fixed order, values in [0,1].

    images: float array [P,H,W,3] ordered as PRESET_NAMES.
    """

    images: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise ValueError(f"PresetStack: expected [P,H,W,3], got {self.images.shape}")
        if self.images.shape[0] != len(PRESET_NAMES):
            raise ValueError(
                f"PresetStack: expected {len(PRESET_NAMES)} presets, got {self.images.shape[0]}"
            )
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < -1e-6 or hi > 1.0 + 1e-6:
            raise ValueError(f"PresetStack: values outside [0,1] (min {lo}, max {hi})")

    @property
    def height(self):
        return self.images.shape[1]

    @property
    def width(self):
        return self.images.shape[2]

    def concat(self, preset_indices=None):
        """Channel-wise concatenation [H,W,3*P], optionally of a preset subset."""
        imgs = self.images if preset_indices is None else self.images[list(preset_indices)]
        return np.concatenate(list(imgs), axis=2)


@dataclass(frozen=True)
class ModelConfig:
    preset_count: int = 5
    feature_channels: int = 15
    attention_heads: int = 3
    ffn_expansion: float = 2.0

    def __post_init__(self):
        if self.preset_count < 1:
            raise ValueError(f"preset_count must be >= 1, got {self.preset_count}")
        if self.feature_channels % self.attention_heads != 0:
            raise ValueError(
                f"feature_channels {self.feature_channels} not divisible by "
                f"attention_heads {self.attention_heads}"
            )
        if self.ffn_hidden < 1:
            raise ValueError(f"ffn_expansion {self.ffn_expansion} too small")

    @property
    def ffn_hidden(self):
        return int(round(self.ffn_expansion * self.feature_channels))


PARAM_ORDER = (
    "conv_in_kernel",
    "conv_in_bias",
    "ln1_gamma",
    "ln1_beta",
    "attn_qkv_kernel",
    "attn_qkv_bias",
    "attn_dw_kernel",
    "attn_dw_bias",
    "attn_temperature",
    "attn_out_kernel",
    "attn_out_bias",
    "ln2_gamma",
    "ln2_beta",
    "ffn_in_kernel",
    "ffn_in_bias",
    "ffn_dw_kernel",
    "ffn_dw_bias",
    "ffn_out_kernel",
    "ffn_out_bias",
    "conv_out_kernel",
    "conv_out_bias",
)


def param_shapes(config):
    """Ordered (name, shape) pairs for every trainable tensor."""
    c = config.feature_channels
    cin = 3 * config.preset_count
    h = config.ffn_hidden
    return [
        ("conv_in_kernel", (3, 3, cin, c)),
        ("conv_in_bias", (c,)),
        ("ln1_gamma", (c,)),
        ("ln1_beta", (c,)),
        ("attn_qkv_kernel", (1, 1, c, 3 * c)),
        ("attn_qkv_bias", (3 * c,)),
        ("attn_dw_kernel", (3, 3, 3 * c)),
        ("attn_dw_bias", (3 * c,)),
        ("attn_temperature", (config.attention_heads,)),
        ("attn_out_kernel", (1, 1, c, c)),
        ("attn_out_bias", (c,)),
        ("ln2_gamma", (c,)),
        ("ln2_beta", (c,)),
        ("ffn_in_kernel", (1, 1, c, 2 * h)),
        ("ffn_in_bias", (2 * h,)),
        ("ffn_dw_kernel", (3, 3, 2 * h)),
        ("ffn_dw_bias", (2 * h,)),
        ("ffn_out_kernel", (1, 1, h, c)),
        ("ffn_out_bias", (c,)),
        ("conv_out_kernel", (3, 3, c, 3)),
        ("conv_out_bias", (3,)),
    ]


def param_count(config):
    """Exact trainable parameter count for a config."""
    return sum(int(np.prod(shape)) for _, shape in param_shapes(config))


class ModelParams:
    """All trainable weights, addressable by name and flattenable in fixed order."""

    def __init__(self, config, tensors):
        names = [n for n, _ in param_shapes(config)]
        missing = set(names) - set(tensors)
        if missing:
            raise ValueError(f"ModelParams: missing tensors {sorted(missing)}")
        for name, shape in param_shapes(config):
            if tuple(tensors[name].data.shape) != shape:
                raise ValueError(
                    f"ModelParams: tensor {name} has shape {tensors[name].data.shape}, expected {shape}"
                )
        self.config = config
        self._tensors = {n: tensors[n] for n in names}

    def __getattr__(self, name):
        try:
            return self.__dict__["_tensors"][name]
        except KeyError:
            raise AttributeError(name) from None

    def tensor_list(self):
        return [self._tensors[n] for n in PARAM_ORDER]

    def named_tensors(self):
        return [(n, self._tensors[n]) for n in PARAM_ORDER]

    @property
    def dtype(self):
        return self._tensors["conv_in_kernel"].data.dtype

    def zero_grad(self):
        for t in self._tensors.values():
            t.zero_grad()

    def flatten(self):
        """Concatenate all tensors into one vector (PARAM_ORDER, row-major)."""
        return np.concatenate([t.data.ravel() for t in self.tensor_list()])

    @classmethod
    def from_flat(cls, vec, config, dtype=np.float32):
        vec = np.asarray(vec)
        if vec.size != param_count(config):
            raise ValueError(
                f"from_flat: vector length {vec.size} does not match param count {param_count(config)}"
            )
        tensors = {}
        offset = 0
        for name, shape in param_shapes(config):
            n = int(np.prod(shape))
            tensors[name] = Tensor(
                vec[offset : offset + n].reshape(shape).copy(), requires_grad=True, dtype=dtype
            )
            offset += n
        return cls(config, tensors)

    def snapshot(self):
        """Copies of all parameter arrays, for checkpoint selection."""
        return [t.data.copy() for t in self.tensor_list()]

    def restore(self, arrays):
        for t, a in zip(self.tensor_list(), arrays):
            t.data = a.copy()


def init_params(config, seed=0, dtype=np.float32):
    """Fan-in-scaled uniform conv kernels, zero biases, identity affines."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config):
        if name.endswith("_kernel"):
            fan_in = 9 if len(shape) == 3 else int(np.prod(shape[:3]))
            bound = math.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif name in ("ln1_gamma", "ln2_gamma", "attn_temperature"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# forward blocks


def _as_graph_4d(features):
    if features.ndim == 3:
        return engine.reshape(features, (1,) + features.shape), True
    if features.ndim == 4:
        return features, False
    raise ValueError(f"expected [H,W,C] or [N,H,W,C] features, got shape {features.shape}")


def transposed_attention(features, params, heads, return_attention=False):
    """Channel-wise multi-head attention (query/key swapped vs. spatial attention).

    Per head: channels become tokens of length H*W, Q/K are L2-normalized along
    the spatial axis, and the (C/heads)^2 map A = softmax(tau * K Q^T) mixes the
    value channels. Output is projected back to C by a 1x1 conv.
    """
    x, squeeze = _as_graph_4d(features)
    n, h, w, c = x.shape
    if c % heads != 0:
        raise ValueError(f"attention: channels {c} not divisible by heads {heads}")
    ch = c // heads
    hw = h * w

    qkv = engine.conv2d(x, params.attn_qkv_kernel, params.attn_qkv_bias)
    qkv = engine.depthwise_conv3x3(qkv, params.attn_dw_kernel, params.attn_dw_bias)

    def to_heads(t):
        t = engine.reshape(t, (n, hw, c))
        t = engine.transpose(t, (0, 2, 1))
        return engine.reshape(t, (n, heads, ch, hw))

    q = to_heads(engine.narrow(qkv, 3, 0, c))
    k = to_heads(engine.narrow(qkv, 3, c, c))
    v = to_heads(engine.narrow(qkv, 3, 2 * c, c))
    q = engine.l2_normalize(q, axis=3)
    k = engine.l2_normalize(k, axis=3)

    logits = engine.matmul(k, engine.transpose(q, (0, 1, 3, 2)))
    logits = engine.scale(logits, params.attn_temperature, axis=1)
    attn = engine.softmax(logits, axis=3)

    out = engine.matmul(attn, v)
    out = engine.reshape(out, (n, c, hw))
    out = engine.transpose(out, (0, 2, 1))
    out = engine.reshape(out, (n, h, w, c))
    out = engine.conv2d(out, params.attn_out_kernel, params.attn_out_bias)
    if squeeze:
        out = engine.reshape(out, (h, w, c))
    if return_attention:
        return out, attn.data
    return out


def gated_ffn(features, params, expansion):
    """Gated feed-forward: 1x1 expand, depthwise 3x3, GELU(a) * b gate, 1x1 project."""
    x, squeeze = _as_graph_4d(features)
    hidden = params.ffn_out_kernel.shape[2]
    if int(round(expansion * x.shape[-1])) != hidden:
        raise ValueError(
            f"gated_ffn: expansion {expansion} inconsistent with hidden width {hidden}"
        )
    t = engine.conv2d(x, params.ffn_in_kernel, params.ffn_in_bias)
    t = engine.depthwise_conv3x3(t, params.ffn_dw_kernel, params.ffn_dw_bias)
    a = engine.narrow(t, 3, 0, hidden)
    b = engine.narrow(t, 3, hidden, hidden)
    t = engine.mul(engine.gelu(a), b)
    t = engine.conv2d(t, params.ffn_out_kernel, params.ffn_out_bias)
    if squeeze:
        t = engine.reshape(t, t.shape[1:])
    return t


def forward_graph(x, params, config):
    """Differentiable forward pass on an input tensor [*,H,W,3P] -> [*,H,W,3]."""
    c_in = 3 * config.preset_count
    if x.shape[-1] != c_in:
        raise ValueError(
            f"forward: input has {x.shape[-1]} channels, config expects {c_in} (3*P)"
        )
    feats = engine.conv2d(x, params.conv_in_kernel, params.conv_in_bias)
    normed = engine.layer_norm(feats, params.ln1_gamma, params.ln1_beta)
    feats = engine.add(feats, transposed_attention(normed, params, config.attention_heads))
    normed = engine.layer_norm(feats, params.ln2_gamma, params.ln2_beta)
    feats = engine.add(feats, gated_ffn(normed, params, config.ffn_expansion))
    return engine.conv2d(feats, params.conv_out_kernel, params.conv_out_bias)


def forward(stack, params, config, training=False, preset_indices=None):
    """Fuse a preset stack into a corrected sRGB image.

    `stack` is a PresetStack or a pre-concatenated [H,W,3P] / [N,H,W,3P]
    array. Training mode returns the unclamped graph tensor; inference
    returns a clamped [0,1] numpy image.
    """
    if isinstance(stack, PresetStack):
        arr = stack.concat(preset_indices)
    else:
        arr = np.asarray(stack)
    x = Tensor(arr, dtype=params.dtype)
    if training:
        return forward_graph(x, params, config)
    with engine.no_grad():
        out = forward_graph(x, params, config)
    return np.clip(out.data, 0.0, 1.0)


# ---------------------------------------------------------------------------
# checkpoint io: magic "WBF1", config header, tensors in PARAM_ORDER as
# little-endian f32 with shape headers


def save_checkpoint(path, params):
    config = params.config
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack(
        "<IIIf",
        config.preset_count,
        config.feature_channels,
        config.attention_heads,
        config.ffn_expansion,
    )
    for _, tensor in params.named_tensors():
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelParams, ModelConfig)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a fusion checkpoint (bad magic {blob[:4]!r})")
    p, c, heads, expansion = struct.unpack_from("<IIIf", blob, 4)
    config = ModelConfig(
        preset_count=p,
        feature_channels=c,
        attention_heads=heads,
        ffn_expansion=round(float(expansion), 6),
    )
    offset = 4 + struct.calcsize("<IIIf")
    tensors = {}
    for name, shape in param_shapes(config):
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        if dims != shape:
            raise ValueError(f"{path}: tensor {name} has shape {dims}, expected {shape}")
        n = int(np.prod(dims))
        data = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(dims)
        offset += 4 * n
        tensors[name] = Tensor(data.copy(), requires_grad=True)
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return ModelParams(config, tensors), config
