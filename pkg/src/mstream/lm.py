"""Character-level LSTM language model for shallow fusion.

The LM scores the same token inventory as the decoder (everything except
blank, with sos/eos as the sequence delimiter), so its per-step log
probabilities drop straight into the joint decoding objective with the LM
weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mstream import autograd as ag
from mstream.autograd import Tensor
from mstream.data import BLANK_ID, EOS_ID, LabelSequence, seeded_rng


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    embed_dim: int = 12
    cells: int = 24
    lr: float = 1.0
    epochs: int = 20
    batch_size: int = 8
    grad_clip: float = 5.0
    seed: int = 0


@dataclass
class LmState:
    h: Tensor
    c: Tensor
    last_token: int


class RnnLm:
    def __init__(self, params: dict[str, Tensor]):
        self.params = params
        self.cells = params["lm.w_h"].shape[0]
        self.vocab_size = params["lm.out.w"].shape[1]
        mask = np.zeros(self.vocab_size)
        mask[BLANK_ID] = -np.inf
        self._blank_mask = Tensor(mask)

    def initial_state(self) -> LmState:
        zeros = np.zeros(self.cells)
        return LmState(Tensor(zeros), Tensor(zeros), EOS_ID)

    def step(self, state: LmState, token_id: int) -> tuple[LmState, Tensor]:
        """Consume ``token_id``; returns the next state and the normalized
        log distribution over the following token (blank masked)."""
        p = self.params
        if not 0 <= token_id < self.vocab_size:
            raise ValueError(f"token id {token_id} outside vocabulary of size {self.vocab_size}")
        x = p["lm.embed"][token_id]
        z = ag.add(ag.matmul(x, p["lm.w_x"]), p["lm.b"])
        h, c = ag.lstm_step(z, state.h, state.c, p["lm.w_h"])
        logits = ag.add(ag.add(ag.matmul(h, p["lm.out.w"]), p["lm.out.b"]), self._blank_mask)
        return LmState(h, c, token_id), ag.log_softmax(logits)

    def sequence_log_prob(self, ids) -> Tensor:
        """log p(ids, eos) accumulated stepwise from the start symbol."""
        state = self.initial_state()
        total: Tensor | None = None
        prev = EOS_ID
        for target in list(ids) + [EOS_ID]:
            state, dist = self.step(state, prev)
            lp = dist[target]
            total = lp if total is None else ag.add(total, lp)
            prev = target
        return total


def init_lm_params(cfg: LmConfig, seed: int | None = None) -> dict[str, Tensor]:
    rng = seeded_rng(cfg.seed if seed is None else seed, "lm-init")

    def u(*shape):
        return Tensor(rng.uniform(-0.08, 0.08, size=shape), requires_grad=True)

    h, e, v = cfg.cells, cfg.embed_dim, cfg.vocab_size
    params = {
        "lm.embed": u(v, e),
        "lm.w_x": u(e, 4 * h),
        "lm.w_h": u(h, 4 * h),
        "lm.b": Tensor(np.zeros(4 * h), requires_grad=True),
        "lm.out.w": u(h, v),
        "lm.out.b": Tensor(np.zeros(v), requires_grad=True),
    }
    return params


def perplexity(lm: RnnLm, corpus: list[LabelSequence]) -> float:
    """exp of the mean per-token negative log likelihood (eos included)."""
    total, tokens = 0.0, 0
    with ag.no_grad():
        for seq in corpus:
            total += float(lm.sequence_log_prob(seq.ids).data)
            tokens += len(seq.ids) + 1
    return math.exp(-total / tokens)


def lm_train(corpus: list[LabelSequence], cfg: LmConfig) -> tuple[dict[str, Tensor], list[dict]]:
    """Minimize sequence cross-entropy with clipped SGD.

    Returns the trained parameters and a per-epoch log of
    ``{"epoch", "loss", "perplexity"}``. Deterministic given the config seed.
    """
    if not corpus:
        raise ValueError("LM training corpus is empty")
    params = init_lm_params(cfg)
    lm = RnnLm(params)
    order = np.arange(len(corpus))
    log: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        seeded_rng(cfg.seed, "lm-shuffle", epoch).shuffle(order)
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            ag.zero_grads(params.values())
            for i in batch:
                loss = ag.neg(lm.sequence_log_prob(corpus[i].ids))
                total += float(loss.data)
                ag.backward(loss)
            _sgd_step(params, cfg.lr, cfg.grad_clip, len(batch))
        ppl = perplexity(lm, corpus)
        log.append({"epoch": epoch, "loss": total / len(order), "perplexity": ppl})
    return params, log


def _sgd_step(params: dict[str, Tensor], lr: float, clip: float, batch_size: int) -> None:
    norm_sq = 0.0
    for p in params.values():
        if p.grad is not None:
            norm_sq += float((p.grad ** 2).sum())
    norm = math.sqrt(norm_sq) / batch_size
    factor = (clip / norm) if clip > 0 and norm > clip else 1.0
    for p in params.values():
        if p.grad is not None:
            p.data -= lr * factor * p.grad / batch_size
