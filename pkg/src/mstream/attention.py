"""Content attention, frame level and stream level.

Both levels share one scoring form: score = v . tanh(W q + V x + b), where q
is the previous decoder state and x is either an encoder hidden vector
(frame level, one scorer per stream) or a per-stream context vector (stream
level, one scorer applied to every stream). Weights are the softmax of the
scores, so each level emits a simplex; the output is the weighted sum of
what it attends over.
"""

from __future__ import annotations

import numpy as np

from mstream import autograd as ag
from mstream.autograd import Tensor


class AdditiveAttention:
    """tanh-additive scorer bound to its four parameter tensors."""

    def __init__(self, w_q: Tensor, w_x: Tensor, b: Tensor, v: Tensor):
        self.w_q = w_q
        self.w_x = w_x
        self.b = b
        self.v = v

    @classmethod
    def from_params(cls, params: dict[str, Tensor], prefix: str) -> "AdditiveAttention":
        return cls(params[f"{prefix}.w_q"], params[f"{prefix}.w_x"],
                   params[f"{prefix}.b"], params[f"{prefix}.v"])

    def precompute(self, h: Tensor) -> Tensor:
        """V-projection of a [T x H] hidden matrix, reusable across steps."""
        return ag.matmul(h, self.w_x)

    def score_rows(self, q_prev: Tensor, h_proj: Tensor) -> Tensor:
        q = ag.matmul(q_prev, self.w_q)
        e = ag.tanh(ag.add(ag.add(h_proj, q), self.b))
        return ag.matmul(e, self.v)

    def score_one(self, q_prev: Tensor, x: Tensor) -> Tensor:
        """Scalar score of a single vector (used at the stream level)."""
        e = ag.tanh(ag.add(ag.add(ag.matmul(x, self.w_x), ag.matmul(q_prev, self.w_q)), self.b))
        return ag.matmul(e, self.v)


def content_attention(q_prev, h, att: AdditiveAttention,
                      h_proj: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Attend over hidden vectors [T x H]; returns (weights [T], context [H]).

    ``h_proj`` may carry ``att.precompute(h)`` when the caller loops over
    decoding steps.
    """
    h = h if isinstance(h, Tensor) else Tensor(h)
    if h.data.ndim != 2 or h.shape[0] < 1:
        raise ValueError(f"attention needs a non-empty T x H matrix, got {h.shape}")
    q_prev = q_prev if isinstance(q_prev, Tensor) else Tensor(q_prev)
    if h_proj is None:
        h_proj = att.precompute(h)
    weights = ag.softmax(att.score_rows(q_prev, h_proj))
    context = ag.matmul(weights, h)
    return weights, context


def stream_fusion(q_prev, contexts: list[Tensor],
                  att: AdditiveAttention) -> tuple[Tensor, Tensor]:
    """Weight per-stream context vectors into one fused context.

    One scorer is applied to every stream's context; the softmax of the
    scores is the stream weight vector. With a single stream this reduces to
    the identity (weight [1.0]); adding a stream adds exactly one summand.
    """
    if not contexts:
        raise ValueError("stream fusion needs at least one context")
    width = contexts[0].shape
    for c in contexts:
        if c.shape != width:
            raise ag.ShapeMismatch(f"context widths differ: {width} vs {c.shape}")
    q_prev = q_prev if isinstance(q_prev, Tensor) else Tensor(q_prev)
    scores = ag.concat([ag.reshape(att.score_one(q_prev, c), (1,)) for c in contexts])
    beta = ag.softmax(scores)
    fused = ag.matmul(beta, ag.stack(contexts))
    return beta, fused
