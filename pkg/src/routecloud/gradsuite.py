"""Finite-difference gradient suites for every op and for the composed model.

``run_suite(name)`` returns a list of ``GradCheckReport``; ``name`` is one of
``ops``, ``encoder``, ``decoder``, ``loss`` or ``all``.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import ops
from .circuit_io import NodeSet, density_label
from .decoder import DecoderConfig, decoder_forward, init_decoder_params
from .encoder import EncoderConfig, encode, init_encoder_params, prepare
from .gradcheck import grad_check
from .lds import LdsWeightTable, weighted_mse
from .tensor import Tensor

SUITES = ("ops", "encoder", "decoder", "loss", "all")
TOL = 1e-4


def _sq(t):
    return ops.sum(ops.mul(t, t))


def _row_cases(shape):
    n, f = shape
    ramp = Tensor(np.arange(n * 2.0).reshape(n, 2))
    cols = Tensor(np.arange(f, dtype=float))
    grid = Tensor(np.arange(n * f, dtype=float).reshape(n, f))
    return [
        (f"add{shape}", lambda a, b: _sq(ops.add(a, b)), [shape, shape]),
        (f"add_bcast{shape}", lambda a, b: _sq(ops.add(a, b)), [shape, (f,)]),
        (f"sub{shape}", lambda a, b: _sq(ops.sub(a, b)), [shape, shape]),
        (f"mul{shape}", lambda a, b: _sq(ops.mul(a, b)), [shape, (1, f)]),
        (f"scale{shape}", lambda a: _sq(ops.scale(a, -1.7)), [shape]),
        (f"neg{shape}", lambda a: _sq(ops.neg(a) + 0.3), [shape]),
        (f"matmul{shape}", lambda a, b: _sq(ops.matmul(a, b)), [shape, (f, 3)]),
        (f"linear{shape}", lambda x, w, b: _sq(ops.linear(x, w, b)), [shape, (f, 2), (2,)]),
        (f"relu{shape}", lambda a: _sq(ops.relu(a)), [shape]),
        (f"gelu{shape}", lambda a: _sq(ops.gelu(a)), [shape]),
        (f"sigmoid{shape}", lambda a: _sq(ops.sigmoid(a)), [shape]),
        (f"mean{shape}", lambda a: _sq(ops.mean(ops.mul(a, a), axis=0)), [shape]),
        (f"sum_axis{shape}", lambda a: _sq(ops.sum(a, axis=1)), [shape]),
        (f"reshape{shape}", lambda a: _sq(ops.matmul(ops.reshape(a, (f, n)), ramp)), [shape]),
        (f"transpose{shape}", lambda a: _sq(ops.matmul(ops.transpose(a), ramp)), [shape]),
        (f"softmax{shape}", lambda a: _sq(ops.softmax(a) * cols), [shape]),
        (f"gather_rows{shape}", lambda a: _sq(ops.gather_rows(a, [0, n - 1, 0, n // 2])), [shape]),
        (f"scatter_sum{shape}", lambda a: _sq(ops.scatter_sum(a, np.arange(n) % 2, 3)), [shape]),
        (f"segmented_softmax{shape}", lambda a: _sq(ops.segmented_softmax(a, np.arange(n) % 2) * grid), [shape]),
    ]


def _image_cases(c, h, w):
    up = Tensor(np.arange(4.0 * c * h * w).reshape(c, 2 * h, 2 * w))
    return [
        (f"dwconv{(c, h, w)}", lambda x, k: _sq(ops.depthwise_conv2d(x, k)), [(c, h, w), (c, 3, 3)]),
        (f"conv2d{(c, h, w)}", lambda x, k, b: _sq(ops.conv2d(x, k, b)), [(c, h, w), (2, c, 3, 3), (2,)]),
        (f"conv2d_s2{(c, h, w)}", lambda x, k: _sq(ops.conv2d(x, k, stride=2)), [(c, h, w), (2, c, 3, 3)]),
        (f"upsample{(c, h, w)}", lambda x: _sq(ops.upsample2x(x) * up), [(c, h, w)]),
        (f"concat{(c, h, w)}", lambda x, y: _sq(ops.concat([x, y * 2.0])), [(c, h, w), (1, h, w)]),
        (f"pad_crop{(c, h, w)}", lambda x: _sq(ops.crop2d(ops.pad2d(x, h + 2, w + 1), h, w - 1)), [(c, h, w)]),
    ]


def op_cases():
    """``(name, fn, input shapes)`` for every differentiable op, three shapes each."""
    cases = []
    for shape in [(3, 4), (5, 2), (1, 6)]:
        cases += _row_cases(shape)
    for chw in [(2, 5, 4), (3, 3, 3), (1, 6, 7)]:
        cases += _image_cases(*chw)
    return cases


def check_op_case(case, tol=TOL):
    name, fn, shapes = case
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    return grad_check(fn, [rng.normal(size=s) for s in shapes], tol=tol, name=name)


# ---------------------------------------------------------------------------
# composed pieces: 1-stage encoder, tiny decoder, weighted loss
# ---------------------------------------------------------------------------

TINY_RES = (8, 8)


def tiny_configs():
    enc = EncoderConfig(n_stages=1, d_model=4, k=2, base_resolution=TINY_RES)
    dec = DecoderConfig(in_channels=4, widths=(4, 8), blocks=(1, 1))
    return enc, dec


def tiny_circuit(seed=7):
    """Six nodes on an 8x8 raster, with a few sharing grid cells."""
    rng = np.random.default_rng(seed)
    xy = rng.uniform(5.0, 75.0, size=(6, 2))
    xy[1] = xy[0] + 1.0  # same cell as node 0
    wh = rng.uniform(5.0, 20.0, size=(6, 2))
    return NodeSet.from_array(np.column_stack([xy, wh]), extent=(0.0, 0.0, 80.0, 80.0))


def _param_check(name, loss_of_params, params, max_checks, tol, seed):
    names = sorted(params)

    def f(*tensors):
        return loss_of_params(dict(zip(names, tensors)))

    rep = grad_check(f, [params[k] for k in names], tol=tol, name=name, max_checks=max_checks, seed=seed)
    rep.checked = list(zip(names, rep.checked))
    return rep


def encoder_report(tol=TOL, max_checks=8):
    enc, _ = tiny_configs()
    nodes = tiny_circuit()
    inp = prepare(nodes, enc)
    rng = np.random.default_rng(11)
    params = {k: v.data for k, v in init_encoder_params(enc, rng).items()}
    # perturb zero-initialized biases so every path carries signal
    params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in params.items()}
    probe = Tensor(rng.normal(size=(enc.d_model,) + TINY_RES[::-1]))

    def loss(p):
        return ops.sum(ops.mul(encode(inp, enc, p), probe))

    return _param_check("encoder(1 stage)", loss, params, max_checks, tol, seed=1)


def decoder_report(tol=TOL, max_checks=8, head="nested"):
    _, dec = tiny_configs()
    dec = DecoderConfig(dec.in_channels, dec.widths, dec.blocks, head)
    rng = np.random.default_rng(12)
    params = {k: v.data for k, v in init_decoder_params(dec, rng).items()}
    Y = rng.normal(size=(dec.in_channels,) + TINY_RES[::-1])
    target = rng.uniform(size=TINY_RES[::-1])

    def loss(p):
        return weighted_mse(decoder_forward(p.pop("Y"), dec, p), target)

    params["Y"] = Y
    return _param_check(f"decoder({head})", loss, params, max_checks, tol, seed=2)


def loss_report(tol=TOL):
    rng = np.random.default_rng(13)
    label = np.clip(rng.beta(0.5, 3.0, size=(6, 6)), 0, 1)
    table = LdsWeightTable.from_labels([label])
    pred = rng.uniform(size=(6, 6))
    return grad_check(lambda p: weighted_mse(p, label, table), [pred], tol=tol, name="lds_weighted_mse")


def composed_report(tol=TOL, max_checks=6):
    """Full pipeline: points -> 1-stage encoder -> tiny decoder -> LDS loss."""
    enc, dec = tiny_configs()
    nodes = tiny_circuit()
    label = density_label(nodes, TINY_RES)
    inp = prepare(nodes, enc)
    rng = np.random.default_rng(14)
    params = {k: v.data for k, v in init_encoder_params(enc, rng).items()}
    params.update({k: v.data for k, v in init_decoder_params(dec, rng).items()})
    params = {k: v + 0.05 * rng.normal(size=v.shape) for k, v in params.items()}
    table = LdsWeightTable.from_labels([label])

    def loss(p):
        return weighted_mse(decoder_forward(encode(inp, enc, p), dec, p), label, table)

    return _param_check("encoder+decoder+lds", loss, params, max_checks, tol, seed=3)


def run_suite(name="all", tol=TOL):
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    reports = []
    if name in ("ops", "all"):
        reports += [check_op_case(c, tol) for c in op_cases()]
    if name in ("encoder", "all"):
        reports.append(encoder_report(tol))
    if name in ("decoder", "all"):
        reports += [decoder_report(tol, head="nested"), decoder_report(tol, head="plain")]
    if name in ("loss", "all"):
        reports.append(loss_report(tol))
    if name == "all":
        reports.append(composed_report(tol))
    return reports
