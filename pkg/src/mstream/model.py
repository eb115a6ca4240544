"""Model assembly: configuration, parameter initialization, forward paths.

A multi-stream model owns, per stream, an encoder, a frame-level attention
scorer and a CTC output projection; plus one stream-fusion scorer and one
letter decoder shared across streams. Parameters live in a flat name->tensor
map so checkpointing and gradient bookkeeping stay trivial.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from mstream import autograd as ag
from mstream.autograd import Tensor
from mstream.attention import AdditiveAttention, content_attention, stream_fusion
from mstream.data import Utterance, seeded_rng
from mstream.decoder import Decoder, run_teacher_forced
from mstream.encoder import EncoderConfig, conv_output_dim, encode_stream
from mstream import ctc as ctc_mod


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_streams: int = 2
    input_dims: tuple[int, ...] = (8, 8)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    att_dim: int = 32
    dec_cells: int = 30
    embed_dim: int = 16

    def __post_init__(self):
        if self.n_streams < 1:
            raise ValueError("need at least one stream")
        if len(self.input_dims) != self.n_streams:
            raise ValueError("need one input dim per stream")
        if self.vocab_size < 4:
            raise ValueError("vocabulary too small")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        d["encoder"]["subsample"] = list(self.encoder.subsample)
        d["encoder"]["conv_channels"] = list(self.encoder.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = d["encoder"]
        return cls(
            vocab_size=d["vocab_size"],
            n_streams=d["n_streams"],
            input_dims=tuple(d["input_dims"]),
            encoder=EncoderConfig(
                kind=enc["kind"], layers=enc["layers"], cells=enc["cells"],
                projection=enc["projection"], subsample=tuple(enc["subsample"]),
                conv_channels=tuple(enc["conv_channels"]),
            ),
            att_dim=d["att_dim"],
            dec_cells=d["dec_cells"],
            embed_dim=d["embed_dim"],
        )


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Seeded uniform init; LSTM forget-gate biases start at 1."""
    rng = seeded_rng(seed, "model-init")

    def u(*shape):
        return Tensor(rng.uniform(-0.08, 0.08, size=shape), requires_grad=True)

    def lstm_bias(h):
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0  # forget gate
        return Tensor(b, requires_grad=True)

    params: dict[str, Tensor] = {}
    enc = cfg.encoder
    for s in range(cfg.n_streams):
        in_dim = cfg.input_dims[s]
        if enc.kind == "convblstm":
            c1, c2 = enc.conv_channels
            chans = [(1, c1), (c1, c1), (c1, c2), (c2, c2)]
            for blk in range(2):
                for layer in range(2):
                    cin, cout = chans[2 * blk + layer]
                    params[f"enc{s}.conv{blk}{layer}.k"] = u(cout, cin, 3, 3)
                    params[f"enc{s}.conv{blk}{layer}.b"] = Tensor(np.zeros(cout), requires_grad=True)
            in_dim = conv_output_dim(in_dim, enc)
        for layer in range(enc.layers):
            for d in ("fwd", "bwd"):
                params[f"enc{s}.l{layer}.{d}.w_x"] = u(in_dim, 4 * enc.cells)
                params[f"enc{s}.l{layer}.{d}.w_h"] = u(enc.cells, 4 * enc.cells)
                params[f"enc{s}.l{layer}.{d}.b"] = lstm_bias(enc.cells)
            params[f"enc{s}.l{layer}.proj.w"] = u(2 * enc.cells, enc.projection)
            params[f"enc{s}.l{layer}.proj.b"] = Tensor(np.zeros(enc.projection), requires_grad=True)
            in_dim = enc.projection
        params[f"att{s}.w_q"] = u(cfg.dec_cells, cfg.att_dim)
        params[f"att{s}.w_x"] = u(enc.projection, cfg.att_dim)
        params[f"att{s}.b"] = Tensor(np.zeros(cfg.att_dim), requires_grad=True)
        params[f"att{s}.v"] = u(cfg.att_dim)
        params[f"ctc{s}.w"] = u(enc.projection, cfg.vocab_size)
        params[f"ctc{s}.b"] = Tensor(np.zeros(cfg.vocab_size), requires_grad=True)
    params["fusion.w_q"] = u(cfg.dec_cells, cfg.att_dim)
    params["fusion.w_x"] = u(enc.projection, cfg.att_dim)
    params["fusion.b"] = Tensor(np.zeros(cfg.att_dim), requires_grad=True)
    params["fusion.v"] = u(cfg.att_dim)
    params["dec.embed"] = u(cfg.vocab_size, cfg.embed_dim)
    params["dec.w_x"] = u(cfg.embed_dim + enc.projection, 4 * cfg.dec_cells)
    params["dec.w_h"] = u(cfg.dec_cells, 4 * cfg.dec_cells)
    params["dec.b"] = lstm_bias(cfg.dec_cells)
    params["dec.out.w"] = u(cfg.dec_cells, cfg.vocab_size)
    params["dec.out.b"] = Tensor(np.zeros(cfg.vocab_size), requires_grad=True)
    return params


@dataclass
class NormStats:
    """Per-stream feature mean/std captured on the training manifest."""

    mean: list[np.ndarray]
    std: list[np.ndarray]

    @classmethod
    def identity(cls, dims: tuple[int, ...]) -> "NormStats":
        return cls([np.zeros(d) for d in dims], [np.ones(d) for d in dims])

    @classmethod
    def fit(cls, corpus: list[Utterance]) -> "NormStats":
        n = len(corpus[0].streams)
        means, stds = [], []
        for s in range(n):
            stacked = np.concatenate([u.streams[s].frames for u in corpus], axis=0)
            means.append(stacked.mean(axis=0))
            stds.append(np.maximum(stacked.std(axis=0), 1e-8))
        return cls(means, stds)


class MultiStreamModel:
    """Binds a config, parameter map and normalization stats into the
    forward paths shared by training and search."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], norm: NormStats | None = None):
        self.cfg = cfg
        self.params = params
        self.norm = norm or NormStats.identity(cfg.input_dims)
        self.frame_attentions = [
            AdditiveAttention.from_params(params, f"att{s}") for s in range(cfg.n_streams)
        ]
        self.fusion = AdditiveAttention.from_params(params, "fusion")
        self.decoder = Decoder.from_params(params, "dec")

    def normalize(self, stream_index: int, frames: np.ndarray) -> np.ndarray:
        return (frames - self.norm.mean[stream_index]) / self.norm.std[stream_index]

    def encode_utterance(self, utt: Utterance) -> list[Tensor]:
        if len(utt.streams) != self.cfg.n_streams:
            raise ValueError(
                f"utterance {utt.id} has {len(utt.streams)} streams, model expects {self.cfg.n_streams}")
        return [
            encode_stream(self.normalize(s, feats.frames), self.cfg.encoder, self.params, f"enc{s}")
            for s, feats in enumerate(utt.streams)
        ]

    def ctc_logits(self, hidden: list[Tensor]) -> list[Tensor]:
        return [
            ag.add(ag.matmul(h, self.params[f"ctc{s}.w"]), self.params[f"ctc{s}.b"])
            for s, h in enumerate(hidden)
        ]

    def fused_context(self, q_prev: Tensor, hidden: list[Tensor],
                      h_projs: list[Tensor] | None = None):
        """Frame attention per stream then stream fusion.

        Returns (fused context, frame weight list, stream weights).
        """
        weights, contexts = [], []
        for s, h in enumerate(hidden):
            pre = h_projs[s] if h_projs is not None else None
            w, c = content_attention(q_prev, h, self.frame_attentions[s], h_proj=pre)
            weights.append(w)
            contexts.append(c)
        beta, fused = stream_fusion(q_prev, contexts, self.fusion)
        return fused, weights, beta

    def attention_log_prob(self, hidden: list[Tensor], label_ids) -> Tensor:
        """Teacher-forced log p of the labels plus end symbol (L+1 factors)."""
        h_projs = [att.precompute(h) for att, h in zip(self.frame_attentions, hidden)]

        def ctx(q_prev):
            fused, weights, beta = self.fused_context(q_prev, hidden, h_projs)
            return fused, (weights, beta)

        total, _, _ = run_teacher_forced(self.decoder, label_ids, ctx)
        return total
