import numpy as np
import pytest

from routecloud.decoder import DecoderConfig, decoder_forward, init_decoder_params
from routecloud.errors import ConfigError
from routecloud.gradsuite import decoder_report
from routecloud.tensor import no_grad


def params_for(config, seed=0):
    return init_decoder_params(config, np.random.default_rng(seed))


def n_params(config):
    return sum(p.size for p in params_for(config).values())


class TestConfig:
    def test_full_profile_widths(self):
        assert DecoderConfig.full().widths == (64, 128, 256, 512)

    @pytest.mark.parametrize("kw", [dict(widths=()), dict(widths=(4, 0), blocks=(1, 1)),
                                    dict(widths=(4, 8), blocks=(1,)), dict(head="fpn")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            DecoderConfig(**kw)

    def test_param_count_grows_with_depth(self):
        counts = [n_params(DecoderConfig(4, (4, 8, 16), b)) for b in [(1, 1, 1), (2, 1, 1), (2, 2, 2), (3, 3, 3)]]
        assert counts == sorted(counts) and len(set(counts)) == 4

    def test_nested_has_more_head_nodes(self):
        nested = params_for(DecoderConfig(4, (4, 8, 16), (1, 1, 1), "nested"))
        plain = params_for(DecoderConfig(4, (4, 8, 16), (1, 1, 1), "plain"))
        count = lambda p: len([k for k in p if k.startswith("decoder.head.") and k.endswith(".w")])
        assert (count(nested), count(plain)) == (3, 2)


class TestForward:
    @pytest.mark.parametrize("head", ["nested", "plain"])
    def test_shape_64(self, rng, head):
        cfg = DecoderConfig(in_channels=8, head=head)
        with no_grad():
            out = decoder_forward(rng.normal(size=(8, 64, 64)), cfg, params_for(cfg))
        assert out.shape == (64, 64)

    @pytest.mark.parametrize("hw", [(13, 7), (9, 16), (1, 1), (24, 10)])
    def test_non_divisible_sizes_are_padded_and_cropped(self, rng, hw):
        cfg = DecoderConfig(in_channels=3, widths=(4, 8, 8), blocks=(1, 1, 1))
        with no_grad():
            out = decoder_forward(rng.normal(size=(3,) + hw), cfg, params_for(cfg))
        assert out.shape == hw

    def test_zero_input_gives_half(self):
        cfg = DecoderConfig(in_channels=4, widths=(4, 8), blocks=(1, 1))
        out = decoder_forward(np.zeros((4, 8, 8)), cfg, params_for(cfg)).data
        assert (out == 0.5).all()

    def test_outputs_strictly_inside_unit_interval(self, rng):
        cfg = DecoderConfig(in_channels=4, widths=(4, 8), blocks=(1, 1))
        out = decoder_forward(50.0 * rng.normal(size=(4, 16, 16)), cfg, params_for(cfg)).data
        assert (out > 0).all() and (out < 1).all()

    def test_channel_mismatch(self, rng):
        cfg = DecoderConfig(in_channels=4, widths=(4, 8), blocks=(1, 1))
        with pytest.raises(ConfigError, match="4 input channels"):
            decoder_forward(rng.normal(size=(5, 8, 8)), cfg, params_for(cfg))


@pytest.mark.parametrize("head", ["nested", "plain"])
def test_gradient_check_tiny(head):
    rep = decoder_report(tol=1e-4, head=head)
    assert rep.passed, rep.line()
