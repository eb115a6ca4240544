"""CTC: forward-algorithm log likelihood, prefix scoring, and helpers.

The loss side runs the standard forward recursion over the blank-augmented
label lattice in log space on the autograd graph, so gradients come from
reverse-mode differentiation and are verified against finite differences.
The decode side is a stateful prefix scorer over fixed per-frame log
probabilities (plain numpy; no gradients needed during search).
"""

from __future__ import annotations

import numpy as np

from mstream import autograd as ag
from mstream.autograd import Tensor
from mstream.data import BLANK_ID, EOS_ID
from mstream.errors import ScorerStateError

NEG_INF = -np.inf


def _augmented(labels: list[int]) -> list[int]:
    aug = [BLANK_ID]
    for c in labels:
        aug.append(c)
        aug.append(BLANK_ID)
    return aug


def ctc_log_prob(logits, labels) -> Tensor:
    """log p(labels | logits) marginalized over all CTC alignments.

    ``logits`` is a [T x V] tensor of unnormalized scores; ``labels`` a list
    of token ids without blanks (may be empty: the all-blank path). Returns
    -inf when the label sequence is unreachable (T too short), which is a
    probability-zero statement, not an error.
    """
    labels = list(labels)
    if any(c == BLANK_ID for c in labels):
        raise ValueError("labels may not contain the blank id")
    x = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
    t_len, vocab = x.shape
    if t_len < 1:
        raise ValueError("need at least one frame")
    if any(not 0 <= c < vocab for c in labels):
        raise ValueError(f"label id outside vocabulary of size {vocab}")
    log_probs = ag.log_softmax(x, axis=-1)

    aug = _augmented(labels)
    s_len = len(aug)
    aug_idx = np.array(aug, dtype=np.intp)
    # positions allowed to skip over the preceding blank (distinct letters)
    skip_mask = np.full(s_len, NEG_INF)
    for s in range(2, s_len):
        if aug[s] != BLANK_ID and aug[s] != aug[s - 2]:
            skip_mask[s] = 0.0
    skip = Tensor(skip_mask)
    ninf1 = Tensor([NEG_INF])
    ninf2 = Tensor([NEG_INF, NEG_INF])

    init = np.full(s_len, NEG_INF)
    init[0] = 0.0
    if s_len > 1:
        init[1] = 0.0
    alpha = ag.add(Tensor(init), ag.take(log_probs[0], aug_idx))
    for t in range(1, t_len):
        stay = alpha
        prev1 = ag.concat([ninf1, alpha[:-1]]) if s_len > 1 else None
        moved = ag.logaddexp(stay, prev1) if prev1 is not None else stay
        if s_len > 2:
            prev2 = ag.concat([ninf2, alpha[:-2]])
            moved = ag.logaddexp(moved, ag.add(prev2, skip))
        alpha = ag.add(moved, ag.take(log_probs[t], aug_idx))
    if s_len == 1:
        return alpha[0]
    return ag.logsumexp(alpha[-2:])


def combine_stream_scores(scores: list) -> "Tensor | float":
    """Equal-weight mean of per-encoder CTC log probabilities."""
    if not scores:
        raise ValueError("need at least one stream score")
    if isinstance(scores[0], Tensor):
        total = scores[0]
        for s in scores[1:]:
            total = ag.add(total, s)
        return ag.scale(total, 1.0 / len(scores))
    return float(sum(scores) / len(scores))


def greedy_collapse(log_probs: np.ndarray) -> list[int]:
    """Frame-wise argmax, merge repeats, drop blanks."""
    best = np.asarray(log_probs).argmax(axis=-1)
    out: list[int] = []
    prev = -1
    for b in best:
        if b != prev and b != BLANK_ID:
            out.append(int(b))
        prev = b
    return out


class CtcPrefixScorer:
    """Incremental prefix probabilities for one utterance's CTC output.

    ``score_all(prefix)`` returns, for every candidate next token, the log
    probability that the CTC output starts with ``prefix + (token,)``; the
    eos column instead holds the probability of ``prefix`` as the complete
    output, which equals :func:`ctc_log_prob` of the same labels. States are
    cached per prefix, so a prefix must have been reached through its parent
    (beam hypotheses always are); anything else raises
    :class:`ScorerStateError`.
    """

    def __init__(self, logits: np.ndarray, eos: int = EOS_ID):
        x = np.asarray(logits, dtype=np.float64)
        mx = x.max(axis=1, keepdims=True)
        self.x = x = x - mx - np.log(np.exp(x - mx).sum(axis=1, keepdims=True))
        self.t_len, self.vocab = x.shape
        self.eos = eos
        # forward variables of the empty prefix: nothing emitted yet, so the
        # non-blank row is impossible and the blank row accumulates blanks
        r = np.full((self.t_len, 2), NEG_INF)
        r[0, 1] = x[0, BLANK_ID]
        for t in range(1, self.t_len):
            r[t, 1] = r[t - 1, 1] + x[t, BLANK_ID]
        self._root = (r, 0.0)
        self._ext: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray]] = {}

    def _state(self, prefix: tuple[int, ...]) -> tuple[np.ndarray, float]:
        if not prefix:
            return self._root
        parent = prefix[:-1]
        cached = self._ext.get(parent)
        if cached is None:
            raise ScorerStateError(
                f"prefix {prefix} was not reached through this scorer's cache lineage")
        psi_all, r_all = cached
        last = prefix[-1]
        return r_all[:, :, last], float(psi_all[last])

    def score_all(self, prefix: tuple[int, ...]) -> np.ndarray:
        """Cumulative prefix log probabilities for every next token id."""
        prefix = tuple(prefix)
        cached = self._ext.get(prefix)
        if cached is not None:
            return cached[0]
        r_prev, _ = self._state(prefix)
        out_len = len(prefix)
        x = self.x
        t_len, vocab = self.t_len, self.vocab

        r_sum = np.logaddexp(r_prev[:, 0], r_prev[:, 1])
        if out_len >= t_len:
            # no frames left to emit another token; only termination survives
            log_psi = np.full(vocab, NEG_INF)
            log_psi[self.eos] = r_sum[-1]
            self._ext[prefix] = (log_psi, np.full((t_len, 2, vocab), NEG_INF))
            return log_psi
        log_phi = np.tile(r_sum[:, None], (1, vocab))
        if prefix:
            # repeating the last letter must go through a blank
            log_phi[:, prefix[-1]] = r_prev[:, 1]

        r = np.full((t_len, 2, vocab), NEG_INF)
        start = max(1, out_len)
        if out_len == 0:
            r[0, 0] = x[0]
        log_psi = r[start - 1, 0].copy()
        for t in range(start, t_len):
            r[t, 0] = np.logaddexp(r[t - 1, 0], log_phi[t - 1]) + x[t]
            r[t, 1] = np.logaddexp(r[t - 1, 0], r[t - 1, 1]) + x[t, BLANK_ID]
            log_psi = np.logaddexp(log_psi, log_phi[t - 1] + x[t])
        log_psi[self.eos] = r_sum[-1]
        log_psi[BLANK_ID] = NEG_INF
        self._ext[prefix] = (log_psi, r)
        return log_psi

    def score(self, prefix, next_token: int) -> float:
        """Incremental log probability of extending ``prefix`` by one token.

        The empty prefix has cumulative probability 1, so cumulative scores
        are recovered by summing increments along a hypothesis.
        """
        prefix = tuple(prefix)
        _, psi_prefix = self._state(prefix)
        return float(self.score_all(prefix)[next_token] - psi_prefix)
