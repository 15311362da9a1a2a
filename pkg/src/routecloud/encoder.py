"""Multi-scale grid-attention encoder.

Each stage compresses the points of every occupied grid into ``k`` latent
slots with a per-grid cross-attention, refines the resulting grid image with
a depthwise-convolution FFN, broadcasts the grid features back to the points
and lets every point read them with a second cross-attention over its ``k``
slots. Stages run sequentially at grid sizes 1, 2, 4, 8 (base cells); the
final point features are summed into the base raster.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .circuit_io import GridSpec, assign_grid, normalize
from .errors import ConfigError
from .ops import Segments
from .tensor import Tensor

DEFAULT_SCALES = (1, 2, 4, 8)


@dataclass
class EncoderConfig:
    n_stages: int = 4
    grid_scales: tuple = None
    d_model: int = 64
    k: int = 8
    base_resolution: tuple = (256, 256)
    attn_norm: str = "grid"  # or "global"
    ffn_kernel: int = 3

    def __post_init__(self):
        if not 1 <= int(self.n_stages) <= 4:
            raise ConfigError(f"n_stages must be 1-4, got {self.n_stages}")
        if self.grid_scales is None:
            self.grid_scales = DEFAULT_SCALES[: self.n_stages]
        self.grid_scales = tuple(int(s) for s in self.grid_scales)
        self.base_resolution = tuple(int(v) for v in self.base_resolution)
        if len(self.grid_scales) != self.n_stages:
            raise ConfigError(
                f"grid_scales has {len(self.grid_scales)} entries for {self.n_stages} stages"
            )
        if any(s < 1 for s in self.grid_scales):
            raise ConfigError("grid scales must be >= 1")
        if self.d_model < 1 or self.k < 1:
            raise ConfigError("d_model and k must be positive")
        if self.attn_norm not in ("grid", "global"):
            raise ConfigError(f"attn_norm must be 'grid' or 'global', got {self.attn_norm!r}")
        if self.ffn_kernel % 2 == 0:
            raise ConfigError("ffn_kernel must be odd")

    @classmethod
    def desk(cls, **overrides):
        """Small profile for CPU training at 64x64."""
        kw = dict(d_model=32, k=4, base_resolution=(64, 64))
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self):
        d = asdict(self)
        d["grid_scales"] = list(self.grid_scales)
        d["base_resolution"] = list(self.base_resolution)
        return d


@dataclass
class EncoderInput:
    """Per-circuit data the encoder needs; independent of parameters."""

    features: np.ndarray  # n x 4
    stages: list  # GridAssignment per stage
    raster: Segments = field(repr=False)  # point -> base cell (W*H segments)

    @property
    def n(self):
        return self.features.shape[0]


def node_features(nodes, coords):
    """``(x, y, w, h)`` rescaled to the base grid: centers in [-1, 1], sizes in cells."""
    W, H = coords.resolution
    if nodes.n == 0:
        return np.zeros((0, 4))
    x0, y0, x1, y1 = nodes.extent
    return np.column_stack([
        2.0 * coords.xy[:, 0] / W - 1.0,
        2.0 * coords.xy[:, 1] / H - 1.0,
        nodes.w * W / (x1 - x0),
        nodes.h * H / (y1 - y0),
    ])


def prepare(nodes, config):
    coords = normalize(nodes, config.base_resolution)
    stages = [assign_grid(coords, GridSpec(s, s)) for s in config.grid_scales]
    base = assign_grid(coords, GridSpec(1, 1))
    W, H = config.base_resolution
    raster = Segments(base.flat_cells[base.segment_of], W * H)
    return EncoderInput(node_features(nodes, coords), stages, raster)


def _normal(rng, shape, std, dtype):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_encoder_params(config, rng, dtype=np.float64):
    d, k = config.d_model, config.k
    l = k * d
    kk = config.ffn_kernel
    p = {
        "encoder.embed.w": _normal(rng, (4, d), 1.0 / math.sqrt(4), dtype),
        "encoder.embed.b": _zeros((d,), dtype),
    }
    for i in range(config.n_stages):
        pre = f"encoder.s{i}."
        p[pre + "latent"] = _normal(rng, (k, d), 0.02, dtype)
        for name in ("wk", "wv", "wq", "wk2", "wv2", "wo"):
            p[pre + name] = _normal(rng, (d, d), 1.0 / math.sqrt(d), dtype)
            p[pre + "b" + name[1:]] = _zeros((d,), dtype)
        p[pre + "ffn.w1"] = _normal(rng, (l, l), 1.0 / math.sqrt(l), dtype)
        p[pre + "ffn.b1"] = _zeros((l,), dtype)
        p[pre + "ffn.dw1"] = _normal(rng, (l, kk, kk), 1.0 / kk, dtype)
        p[pre + "ffn.dw2"] = _normal(rng, (l, kk, kk), 1.0 / kk, dtype)
        p[pre + "ffn.w2"] = _normal(rng, (l, l), 1.0 / math.sqrt(l), dtype)
        p[pre + "ffn.b2"] = _zeros((l,), dtype)
    return p


def embed_input(P, params):
    """Linear 4 -> d_model projection of per-node features."""
    return ops.linear(P, params["encoder.embed.w"], params["encoder.embed.b"])


def conv_ffn(rows, grid_shape, params, pre):
    """Pointwise -> DWConv -> GELU -> DWConv -> pointwise, residual around all of it.

    ``rows`` holds one ``l``-vector per grid cell in row-major order.
    """
    w, h = grid_shape
    l = rows.shape[1]
    hid = ops.linear(rows, params[pre + "ffn.w1"], params[pre + "ffn.b1"])
    img = ops.reshape(ops.transpose(hid), (l, h, w))
    img = ops.depthwise_conv2d(img, params[pre + "ffn.dw1"])
    img = ops.gelu(img)
    img = ops.depthwise_conv2d(img, params[pre + "ffn.dw2"])
    back = ops.transpose(ops.reshape(img, (l, h * w)))
    return ops.add(rows, ops.linear(back, params[pre + "ffn.w2"], params[pre + "ffn.b2"]))


def ga_stage(x, assign, config, params, index, trace=None):
    """One grid-attention stage on point features ``x`` (``n x d_model``)."""
    n = x.shape[0]
    if n == 0:
        return x
    d, k = config.d_model, config.k
    pre = f"encoder.s{index}."
    inv_sqrt_d = 1.0 / math.sqrt(d)

    # (1) latent codes attend to the points of each grid
    keys = ops.linear(x, params[pre + "wk"], params[pre + "bk"])
    vals = ops.linear(x, params[pre + "wv"], params[pre + "bv"])
    scores = ops.scale(ops.matmul(keys, ops.transpose(params[pre + "latent"])), inv_sqrt_d)
    if config.attn_norm == "grid":
        norm_seg = assign.segments
    else:
        norm_seg = Segments(np.zeros(n, dtype=np.int64), 1)
    alpha = ops.segmented_softmax(scores, norm_seg)  # n x k
    point_feat = ops.mul(ops.reshape(alpha, (n, k, 1)), ops.reshape(vals, (n, 1, d)))

    # (2) grid-wise features, (3) dense grid image with zero-padded empty grids
    grid_feat = ops.scatter_sum(ops.reshape(point_feat, (n, k * d)), assign.segments)
    w, h = assign.grid_shape
    image_rows = ops.scatter_sum(grid_feat, Segments(assign.flat_cells, w * h))

    # (4) exchange information between neighbouring grids
    image_rows = conv_ffn(image_rows, (w, h), params, pre)

    # (5) broadcast back to points
    cell_of_point = assign.flat_cells[assign.segment_of]
    slots = ops.reshape(ops.gather_rows(image_rows, cell_of_point), (n * k, d))

    # (6) each point queries its own k slots
    q = ops.linear(x, params[pre + "wq"], params[pre + "bq"])
    slot_keys = ops.reshape(ops.linear(slots, params[pre + "wk2"], params[pre + "bk2"]), (n, k, d))
    slot_vals = ops.reshape(ops.linear(slots, params[pre + "wv2"], params[pre + "bv2"]), (n, k, d))
    s2 = ops.scale(ops.sum(ops.mul(slot_keys, ops.reshape(q, (n, 1, d))), axis=2), inv_sqrt_d)
    a2 = ops.softmax(s2, axis=1)
    out = ops.sum(ops.mul(ops.reshape(a2, (n, k, 1)), slot_vals), axis=1)
    out = ops.add(x, ops.linear(out, params[pre + "wo"], params[pre + "bo"]))

    if trace is not None:
        trace.setdefault("stages", []).append(
            {"alpha": alpha.data, "segment_of": norm_seg.ids, "m": norm_seg.m, "grid_m": assign.m}
        )
    return out


def encode(inp, config, params, trace=None):
    """Run all stages and rasterize to a ``d_model x H x W`` image."""
    W, H = config.base_resolution
    d = config.d_model
    dtype = params["encoder.embed.w"].dtype
    if inp.n == 0:
        return Tensor(np.zeros((d, H, W), dtype=dtype))
    x = embed_input(Tensor(inp.features, dtype=dtype), params)
    for i, assign in enumerate(inp.stages):
        x = ga_stage(x, assign, config, params, i, trace)
    rows = ops.scatter_sum(x, inp.raster)  # (H*W) x d
    return ops.reshape(ops.transpose(rows), (d, H, W))


def encoder_forward(nodes, config, params, trace=None):
    """Raw node set -> raster feature image ``Y`` (channel-first ``D x H x W``)."""
    return encode(prepare(nodes, config), config, params, trace)
