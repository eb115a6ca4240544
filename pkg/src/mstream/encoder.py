"""Per-stream acoustic encoders.

Two kinds share one output contract (length exactly ceil(T/4)):

* ``blstm`` - stacked bidirectional LSTM layers, each followed by a linear
  projection, with temporal subsampling by frame dropping between layers
  (per-layer factors multiply to 4).
* ``convblstm`` - a small two-block convolutional front-end whose two 2x2
  max-pools provide the full x4 time reduction, then BLSTM layers with no
  recurrent subsampling.

Non-divisible lengths round up: frame dropping keeps indices 0, f, 2f, ...
and pooling keeps partial windows, so short utterances never lose their
final frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mstream import autograd as ag
from mstream.autograd import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "blstm"  # "blstm" or "convblstm"
    layers: int = 2
    cells: int = 32
    projection: int = 32
    subsample: tuple[int, ...] = (2, 2)
    conv_channels: tuple[int, int] = (4, 8)

    def __post_init__(self):
        if self.kind not in ("blstm", "convblstm"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "blstm":
            if len(self.subsample) != self.layers:
                raise ValueError("need one subsample factor per layer")
            if math.prod(self.subsample) != 4:
                raise ValueError(f"blstm subsample factors {self.subsample} must multiply to 4")
        # convblstm takes the full x4 from the conv front-end


def output_length(t: int) -> int:
    return -(-t // 4)  # ceil(T/4)


def conv_output_dim(input_dim: int, cfg: EncoderConfig) -> int:
    d = -(-input_dim // 2)
    d = -(-d // 2)
    return cfg.conv_channels[1] * d


def lstm_cell(x, h_prev, c_prev, w_x: Tensor, w_h: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Standard LSTM cell; gate order input, forget, output, candidate."""
    z = ag.add(ag.add(ag.matmul(x, w_x), ag.matmul(h_prev, w_h)), b)
    return ag.lstm_core(z, c_prev)


def _lstm_pass(xs: Tensor, w_x, w_h, b, reverse: bool) -> list[Tensor]:
    """Run one direction over a [T x D] tensor; returns a list of h rows."""
    t_len, _ = xs.shape
    hdim = w_h.shape[0]
    # the input projection of every frame is a single matmul
    pre = ag.add(ag.matmul(xs, w_x), b)
    h = Tensor(np.zeros(hdim))
    c = Tensor(np.zeros(hdim))
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    out: list[Tensor | None] = [None] * t_len
    for t in order:
        h, c = ag.lstm_step(pre[t], h, c, w_h)
        out[t] = h
    return out  # type: ignore[return-value]


def _blstm_layer(xs: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    fwd = _lstm_pass(xs, params[f"{prefix}.fwd.w_x"], params[f"{prefix}.fwd.w_h"],
                     params[f"{prefix}.fwd.b"], reverse=False)
    bwd = _lstm_pass(xs, params[f"{prefix}.bwd.w_x"], params[f"{prefix}.bwd.w_h"],
                     params[f"{prefix}.bwd.b"], reverse=True)
    both = ag.concat([ag.stack(fwd), ag.stack(bwd)], axis=1)
    return ag.add(ag.matmul(both, params[f"{prefix}.proj.w"]), params[f"{prefix}.proj.b"])


def _subsample_rows(xs: Tensor, factor: int) -> Tensor:
    if factor <= 1:
        return xs
    return xs[::factor]


def conv_frontend(frames, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Two conv blocks (2x conv3x3+relu, then 2x2 max-pool) over [T x D].

    Output is [ceil(ceil(T/2)/2) x (channels[1] * pooled D)], time-major with
    channel x frequency flattened per frame.
    """
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    t_len, _ = x.shape
    if t_len < 4:
        raise ValueError(f"conv front-end needs T >= 4, got T={t_len}")
    y = ag.reshape(x, (1, *x.shape))
    for blk in range(2):
        for layer in range(2):
            y = ag.relu(ag.conv2d(y, params[f"{prefix}.conv{blk}{layer}.k"],
                                  params[f"{prefix}.conv{blk}{layer}.b"]))
        y = ag.maxpool2x2(y)
    c_out, t_out, d_out = y.shape
    y = ag.transpose(y, (1, 0, 2))
    return ag.reshape(y, (t_out, c_out * d_out))


def encode_stream(frames, cfg: EncoderConfig, params: dict[str, Tensor],
                  prefix: str = "enc0") -> Tensor:
    """Map a [T x D] feature matrix to hidden vectors of length ceil(T/4)."""
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float64))
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"encoder input must be a non-empty T x D matrix, got {x.shape}")
    if cfg.kind == "convblstm":
        x = conv_frontend(x, params, prefix)
        factors = (1,) * cfg.layers
    else:
        factors = cfg.subsample
    for layer in range(cfg.layers):
        x = _blstm_layer(x, params, f"{prefix}.l{layer}")
        x = _subsample_rows(x, factors[layer])
    return x
