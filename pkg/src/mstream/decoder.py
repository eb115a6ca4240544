"""Recurrent letter decoder over fused context vectors.

Each step consumes the embedding of the previous token concatenated with the
fused context, runs one LSTM cell, and emits a log distribution over the
vocabulary with the blank id masked out (blank belongs to CTC only; the
sos/eos id acts as the end symbol).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mstream import autograd as ag
from mstream.autograd import Tensor
from mstream.data import BLANK_ID, EOS_ID


@dataclass
class DecoderState:
    h: Tensor
    c: Tensor
    prev_token: int


class Decoder:
    def __init__(self, embed: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor,
                 w_out: Tensor, b_out: Tensor):
        self.embed = embed
        self.w_x = w_x
        self.w_h = w_h
        self.b = b
        self.w_out = w_out
        self.b_out = b_out
        self.cells = w_h.shape[0]
        self.vocab_size = w_out.shape[1]
        mask = np.zeros(self.vocab_size)
        mask[BLANK_ID] = -np.inf
        self._blank_mask = Tensor(mask)

    @classmethod
    def from_params(cls, params: dict[str, Tensor], prefix: str = "dec") -> "Decoder":
        return cls(params[f"{prefix}.embed"], params[f"{prefix}.w_x"],
                   params[f"{prefix}.w_h"], params[f"{prefix}.b"],
                   params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])

    def initial_state(self) -> DecoderState:
        zeros = np.zeros(self.cells)
        return DecoderState(Tensor(zeros), Tensor(zeros), EOS_ID)

    def step(self, state: DecoderState, context: Tensor) -> tuple[DecoderState, Tensor]:
        """One decoding step; returns the new state and a normalized
        log distribution over the vocabulary (blank excluded)."""
        if not 0 <= state.prev_token < self.embed.shape[0]:
            raise ValueError(f"token id {state.prev_token} outside vocabulary "
                             f"of size {self.embed.shape[0]}")
        x = ag.concat([self.embed[state.prev_token], context])
        z = ag.add(ag.matmul(x, self.w_x), self.b)
        h, c = ag.lstm_step(z, state.h, state.c, self.w_h)
        logits = ag.add(ag.add(ag.matmul(h, self.w_out), self.b_out), self._blank_mask)
        return DecoderState(h, c, -1), ag.log_softmax(logits)


def run_teacher_forced(decoder: Decoder, label_ids, fused_context_fn):
    """Drive the decoder over the true labels plus the end symbol.

    ``fused_context_fn(q_prev)`` produces the (attention context, extras)
    pair for the current step given the previous decoder hidden state.
    Returns (total log prob Tensor, per-step log prob Tensors, extras list).
    """
    state = decoder.initial_state()
    targets = list(label_ids) + [EOS_ID]
    for t in targets:
        if not 0 <= t < decoder.vocab_size or t == BLANK_ID:
            raise ValueError(f"label id {t} outside the decoder's output space")
    step_logps: list[Tensor] = []
    extras = []
    total: Tensor | None = None
    for l, target in enumerate(targets):
        context, extra = fused_context_fn(state.h)
        extras.append(extra)
        state, logdist = decoder.step(state, context)
        state.prev_token = target
        lp = logdist[target]
        step_logps.append(lp)
        total = lp if total is None else ag.add(total, lp)
    return total, step_logps, extras
