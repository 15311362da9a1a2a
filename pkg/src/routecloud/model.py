"""Encoder + decoder bundled with their parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import DecoderConfig, decoder_forward, init_decoder_params
from .encoder import EncoderConfig, encode, init_encoder_params, prepare
from .errors import ConfigError
from .tensor import no_grad

PRECISIONS = {"f64": np.float64, "f32": np.float32}


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig.desk)
    decoder: DecoderConfig = None

    def __post_init__(self):
        if self.decoder is None:
            self.decoder = DecoderConfig(in_channels=self.encoder.d_model)
        if self.decoder.in_channels != self.encoder.d_model:
            raise ConfigError(
                f"decoder in_channels {self.decoder.in_channels} != encoder d_model {self.encoder.d_model}"
            )

    @classmethod
    def desk(cls, n_stages=4, head="nested"):
        enc = EncoderConfig.desk(n_stages=n_stages)
        return cls(enc, DecoderConfig(in_channels=enc.d_model, head=head))

    def to_dict(self):
        return {"encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict()}

    @classmethod
    def from_dict(cls, d):
        enc = EncoderConfig(**d.get("encoder", {}))
        dec_kw = dict(d.get("decoder", {}))
        dec_kw.setdefault("in_channels", enc.d_model)
        return cls(enc, DecoderConfig(**dec_kw))


class Model:
    """Parameters plus configuration; ``forward`` builds a fresh tape per call."""

    def __init__(self, config=None, seed=0, precision="f64", params=None):
        self.config = config or ModelConfig.desk()
        self.dtype = np.dtype(PRECISIONS[precision] if isinstance(precision, str) else precision)
        if params is None:
            rng = np.random.default_rng(seed)
            params = init_encoder_params(self.config.encoder, rng, self.dtype)
            params.update(init_decoder_params(self.config.decoder, rng, self.dtype))
        self.params = params

    @property
    def resolution(self):
        return self.config.encoder.base_resolution

    def n_params(self):
        return int(sum(p.size for p in self.params.values()))

    def prepare(self, nodes):
        return prepare(nodes, self.config.encoder)

    def forward(self, inp, trace=None):
        """Prepared input (or raw NodeSet) -> ``H x W`` prediction tensor."""
        if not hasattr(inp, "stages"):
            inp = self.prepare(inp)
        Y = encode(inp, self.config.encoder, self.params, trace)
        return decoder_forward(Y, self.config.decoder, self.params)

    def predict(self, inp):
        with no_grad():
            return self.forward(inp).data.astype(np.float64)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        return {k: v.data for k, v in self.params.items()}
