"""Pixel-wise prediction head: residual backbone plus nested-skip upsampling head.

The backbone is a stack of basic residual blocks (two 3x3 convolutions) at
``len(widths)`` resolution levels, halving resolution between levels. The
``nested`` head builds the dense grid of skip nodes ``X[i, j]``; the
``plain`` head keeps only the single decoder path. Convolutions carry no
bias and are followed by a learned per-channel scale, so an all-zero input
maps to ``sigmoid(final bias)`` everywhere.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .errors import ConfigError
from .tensor import Tensor


@dataclass
class DecoderConfig:
    in_channels: int = 32
    widths: tuple = (16, 32, 64, 128)
    blocks: tuple = (2, 2, 2, 2)
    head: str = "nested"  # or "plain"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.blocks = tuple(int(b) for b in self.blocks)
        if not self.widths or len(self.widths) != len(self.blocks):
            raise ConfigError("widths and blocks must be non-empty and the same length")
        if min(self.widths) < 1 or min(self.blocks) < 1 or self.in_channels < 1:
            raise ConfigError("channel widths and block counts must be positive")
        if self.head not in ("nested", "plain"):
            raise ConfigError(f"head must be 'nested' or 'plain', got {self.head!r}")

    @property
    def levels(self):
        return len(self.widths)

    @classmethod
    def full(cls, in_channels=64, head="nested"):
        """Standard 18-layer widths."""
        return cls(in_channels, (64, 128, 256, 512), (2, 2, 2, 2), head)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["blocks"] = list(self.blocks)
        return d


def _conv(rng, cout, cin, k, dtype):
    std = math.sqrt(2.0 / (cin * k * k))
    return Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype), requires_grad=True)


def _scale(c, value, dtype):
    return Tensor(np.full((c, 1, 1), value, dtype=dtype), requires_grad=True)


def _head_inputs(config, i, j):
    w = config.widths
    if config.head == "nested":
        return j * w[i] + w[i + 1]
    return w[i] + w[i + 1]


def _head_nodes(config):
    L = config.levels
    if config.head == "nested":
        return [(i, j) for j in range(1, L) for i in range(L - j)]
    return [(i, L - 1 - i) for i in range(L - 2, -1, -1)]


def init_decoder_params(config, rng, dtype=np.float64):
    w = config.widths
    p = {
        "decoder.stem.w": _conv(rng, w[0], config.in_channels, 3, dtype),
        "decoder.stem.s": _scale(w[0], 1.0, dtype),
    }
    cin = w[0]
    for i, nb in enumerate(config.blocks):
        for b in range(nb):
            pre = f"decoder.l{i}.b{b}."
            cout = w[i]
            p[pre + "conv1"] = _conv(rng, cout, cin, 3, dtype)
            p[pre + "s1"] = _scale(cout, 1.0, dtype)
            p[pre + "conv2"] = _conv(rng, cout, cout, 3, dtype)
            p[pre + "s2"] = _scale(cout, 0.5, dtype)
            if cin != cout or (i > 0 and b == 0):
                p[pre + "proj"] = _conv(rng, cout, cin, 1, dtype)
                p[pre + "sp"] = _scale(cout, 1.0, dtype)
            cin = cout
    for i, j in _head_nodes(config):
        pre = f"decoder.head.x{i}_{j}."
        p[pre + "w"] = _conv(rng, w[i], _head_inputs(config, i, j), 3, dtype)
        p[pre + "s"] = _scale(w[i], 1.0, dtype)
    p["decoder.out.w"] = Tensor(
        rng.normal(0.0, 0.1 / math.sqrt(w[0]), size=(1, w[0], 1, 1)).astype(dtype), requires_grad=True
    )
    p["decoder.out.b"] = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
    return p


def _basic_block(x, params, pre, stride):
    h = ops.relu(ops.mul(ops.conv2d(x, params[pre + "conv1"], stride=stride), params[pre + "s1"]))
    h = ops.mul(ops.conv2d(h, params[pre + "conv2"]), params[pre + "s2"])
    if pre + "proj" in params:
        skip = ops.mul(ops.conv2d(x, params[pre + "proj"], stride=stride), params[pre + "sp"])
    else:
        skip = x
    return ops.relu(ops.add(h, skip))


def _head_node(inputs, params, i, j):
    pre = f"decoder.head.x{i}_{j}."
    x = ops.concat(inputs, axis=0)
    return ops.relu(ops.mul(ops.conv2d(x, params[pre + "w"]), params[pre + "s"]))


def backbone(Y, config, params):
    """Feature maps ``[X(0,0), ..., X(L-1,0)]`` at strides 1, 2, 4, ..."""
    x = ops.relu(ops.mul(ops.conv2d(Y, params["decoder.stem.w"]), params["decoder.stem.s"]))
    feats = []
    for i, nb in enumerate(config.blocks):
        for b in range(nb):
            stride = 2 if (i > 0 and b == 0) else 1
            x = _basic_block(x, params, f"decoder.l{i}.b{b}.", stride)
        feats.append(x)
    return feats


def decoder_forward(Y, config, params):
    """``D x H x W`` feature image -> ``H x W`` prediction in (0, 1)."""
    Y = Tensor(Y) if not isinstance(Y, Tensor) else Y
    if Y.ndim != 3 or Y.shape[0] != config.in_channels:
        raise ConfigError(
            f"decoder expects {config.in_channels} input channels, got feature image {Y.shape}"
        )
    _, H, W = Y.shape
    L = config.levels
    f = 2 ** (L - 1)
    Hp, Wp = -(-H // f) * f, -(-W // f) * f
    if (Hp, Wp) != (H, W):
        Y = ops.pad2d(Y, Hp, Wp)

    feats = backbone(Y, config, params)
    if config.head == "nested":
        X = {(i, 0): feats[i] for i in range(L)}
        for j in range(1, L):
            for i in range(L - j):
                inputs = [X[(i, t)] for t in range(j)] + [ops.upsample2x(X[(i + 1, j - 1)])]
                X[(i, j)] = _head_node(inputs, params, i, j)
        top = X[(0, L - 1)]
    else:
        top = feats[L - 1]
        for i in range(L - 2, -1, -1):
            top = _head_node([feats[i], ops.upsample2x(top)], params, i, L - 1 - i)

    logits = ops.conv2d(top, params["decoder.out.w"], params["decoder.out.b"])
    if (Hp, Wp) != (H, W):
        logits = ops.crop2d(logits, H, W)
    return ops.reshape(ops.sigmoid(logits), (H, W))
