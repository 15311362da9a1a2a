import numpy as np
import pytest

from routecloud import ops
from routecloud.circuit_io import NodeSet, gen_synthetic
from routecloud.encoder import (EncoderConfig, embed_input, encode, encoder_forward, ga_stage,
                                init_encoder_params, prepare)
from routecloud.errors import ConfigError
from routecloud.gradsuite import encoder_report
from routecloud.tensor import Tensor, no_grad


def small_config(**kw):
    base = dict(n_stages=2, d_model=4, k=2, base_resolution=(16, 16))
    base.update(kw)
    return EncoderConfig(**base)


def params_for(config, seed=0):
    return init_encoder_params(config, np.random.default_rng(seed))


@pytest.fixture
def circuit():
    nodes, _ = gen_synthetic(5, 300, 3, base_resolution=(16, 16))
    return nodes


class TestConfig:
    def test_default_scales(self):
        assert EncoderConfig().grid_scales == (1, 2, 4, 8)

    @pytest.mark.parametrize("stages", [1, 2, 3, 4])
    def test_scales_truncate_with_stage_count(self, stages):
        assert EncoderConfig(n_stages=stages).grid_scales == (1, 2, 4, 8)[:stages]

    def test_mismatched_scales(self):
        with pytest.raises(ConfigError):
            EncoderConfig(n_stages=2, grid_scales=(1, 2, 4))

    @pytest.mark.parametrize("stages", [0, 5])
    def test_stage_range(self, stages):
        with pytest.raises(ConfigError):
            EncoderConfig(n_stages=stages)

    def test_param_count_monotone_in_stages(self):
        counts = [sum(p.size for p in params_for(small_config(n_stages=s)).values()) for s in range(1, 5)]
        assert counts == sorted(counts) and len(set(counts)) == 4

    def test_latents_are_per_stage_and_small(self):
        p = params_for(EncoderConfig.desk())
        lat = [p[f"encoder.s{i}.latent"].data for i in range(4)]
        assert all(l.shape == (4, 32) for l in lat)
        assert 0.01 < np.std(np.concatenate([l.ravel() for l in lat])) < 0.03


class TestEmbed:
    def test_identity_padded_weights(self, rng):
        P = rng.normal(size=(7, 4))
        w = np.zeros((4, 6))
        w[:, :4] = np.eye(4)
        out = embed_input(Tensor(P), {"encoder.embed.w": Tensor(w), "encoder.embed.b": Tensor(np.zeros(6))})
        np.testing.assert_array_equal(out.data[:, :4], P)

    def test_empty(self):
        p = params_for(small_config())
        assert embed_input(Tensor(np.zeros((0, 4))), p).shape == (0, 4)


class TestStage:
    def test_shape_contract(self, rng):
        cfg = EncoderConfig(n_stages=1, d_model=4, k=2, base_resolution=(8, 8))
        nodes = NodeSet.from_array(np.column_stack([rng.uniform(0, 8, (5, 2)), np.ones((5, 2))]),
                                   extent=(0, 0, 8, 8))
        inp = prepare(nodes, cfg)
        x = embed_input(Tensor(inp.features), params_for(cfg))
        assert ga_stage(x, inp.stages[0], cfg, params_for(cfg), 0).shape == (5, 4)

    def test_lone_point_alpha_is_one(self):
        cfg = EncoderConfig(n_stages=1, d_model=4, k=2, base_resolution=(8, 8))
        arr = np.array([[0.5, 0.5, 1, 1], [0.6, 0.4, 1, 1], [5.5, 5.5, 1, 1]])
        inp = prepare(NodeSet.from_array(arr, extent=(0, 0, 8, 8)), cfg)
        trace = {}
        encode(inp, cfg, params_for(cfg), trace)
        alpha = trace["stages"][0]["alpha"]
        np.testing.assert_array_equal(alpha[2], [1.0, 1.0])
        np.testing.assert_allclose(alpha[0] + alpha[1], [1.0, 1.0], atol=1e-15)

    def test_empty_input(self):
        cfg = small_config()
        x = Tensor(np.zeros((0, 4)))
        inp = prepare(NodeSet.from_array(np.zeros((0, 4)), extent=(0, 0, 16, 16)), cfg)
        assert ga_stage(x, inp.stages[0], cfg, params_for(cfg), 0).shape == (0, 4)

    def test_attention_sums_to_one_per_grid_and_latent(self, circuit):
        cfg = small_config(n_stages=4)
        trace = {}
        encoder_forward(circuit, cfg, params_for(cfg), trace)
        for st in trace["stages"]:
            sums = ops.Segments(st["segment_of"], st["m"]).sum(st["alpha"])
            np.testing.assert_allclose(sums, 1.0, atol=1e-9)

    def test_global_norm_variant(self, circuit):
        cfg = small_config(attn_norm="global")
        trace = {}
        encoder_forward(circuit, cfg, params_for(cfg), trace)
        np.testing.assert_allclose(trace["stages"][0]["alpha"].sum(axis=0), 1.0, atol=1e-9)


class TestEncoderForward:
    def test_output_layout(self, circuit):
        cfg = small_config()
        Y = encoder_forward(circuit, cfg, params_for(cfg))
        assert Y.shape == (4, 16, 16)

    def test_empty_cells_are_exactly_zero(self, circuit):
        cfg = small_config()
        Y = encoder_forward(circuit, cfg, params_for(cfg)).data
        inp = prepare(circuit, cfg)
        occupied = np.zeros(16 * 16, dtype=bool)
        occupied[inp.raster.ids] = True
        assert not Y.reshape(4, -1)[:, ~occupied].any()

    def test_single_cell_circuit(self):
        cfg = small_config()
        arr = np.array([[3.2, 7.7, 0.5, 0.5], [3.9, 7.1, 0.2, 0.3], [3.5, 7.5, 1, 1]])
        Y = encoder_forward(NodeSet.from_array(arr, extent=(0, 0, 16, 16)), cfg, params_for(cfg)).data
        nz = np.argwhere(np.abs(Y).sum(axis=0) > 0)
        assert nz.tolist() == [[7, 3]]  # row = y cell, column = x cell

    def test_no_nodes_gives_zero_image(self):
        cfg = small_config()
        Y = encoder_forward(NodeSet.from_array(np.zeros((0, 4)), extent=(0, 0, 1, 1)), cfg, params_for(cfg))
        assert Y.shape == (4, 16, 16) and not Y.data.any()

    def test_permutation_invariance(self, circuit, rng):
        cfg = small_config(n_stages=4)
        p = params_for(cfg)
        perm = rng.permutation(circuit.n)
        with no_grad():
            a = encoder_forward(circuit, cfg, p).data
            b = encoder_forward(circuit.subset(perm), cfg, p).data
        assert np.abs(a - b).max() < 1e-6

    def test_float32_close_to_float64(self, circuit):
        cfg = small_config()
        p64 = params_for(cfg)
        p32 = init_encoder_params(cfg, np.random.default_rng(0), np.float32)
        a = encoder_forward(circuit, cfg, p64).data
        b = encoder_forward(circuit, cfg, p32).data
        assert b.dtype == np.float32
        np.testing.assert_allclose(b, a, rtol=1e-3, atol=1e-3)


def test_gradient_check_one_stage():
    rep = encoder_report(tol=1e-4)
    assert rep.passed, rep.line()
