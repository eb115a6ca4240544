"""Joint label-synchronous beam search with stream fusion and LM fusion.

Each step extends every live hypothesis by one output token. A candidate's
score change combines the attention decoder's log probability, the change in
the equal-weight mean of the per-stream CTC prefix scores, and the LM log
probability, weighted by the CTC weight, its complement, and the LM weight.
Hypotheses that emit the end symbol are finalized; results come back sorted
by total score with lexicographic token order breaking ties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mstream import autograd as ag
from mstream.ctc import CtcPrefixScorer
from mstream.data import BLANK_ID, EOS_ID, Utterance, Vocabulary
from mstream.decoder import DecoderState, run_teacher_forced
from mstream.lm import LmState, RnnLm
from mstream.model import MultiStreamModel


@dataclass(frozen=True)
class SearchResult:
    tokens: tuple[int, ...]
    total: float
    att_score: float
    ctc_score: float
    lm_score: float
    truncated: bool = False


@dataclass
class _Hyp:
    tokens: tuple[int, ...]
    att: float
    ctc: tuple[float, ...]  # cumulative per-stream prefix scores
    lm: float
    state: DecoderState
    lm_state: LmState | None


def _total(hyp_att: float, ctc_scores, lm: float, ctc_weight: float, lm_weight: float) -> float:
    ctc = float(np.mean(ctc_scores)) if ctc_scores else 0.0
    return ctc_weight * ctc + (1.0 - ctc_weight) * hyp_att + lm_weight * lm


def joint_beam_search(
    model: MultiStreamModel,
    utt: Utterance,
    beam: int = 8,
    ctc_weight: float = 0.3,
    lm_weight: float = 0.0,
    lm: RnnLm | None = None,
    max_len: int | None = None,
    nbest: int | None = None,
) -> list[SearchResult]:
    """Decode one utterance; returns finished hypotheses, best first.

    ``max_len`` caps the number of emitted tokens and defaults to the
    encoder output length (the shortest stream's). If nothing finishes,
    the best unfinished hypothesis is returned flagged as truncated.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if not 0.0 <= ctc_weight <= 1.0:
        raise ValueError("ctc weight must lie in [0, 1]")
    with ag.no_grad():
        hidden = model.encode_utterance(utt)
        use_lm = lm is not None and lm_weight != 0.0
        scorers: list[CtcPrefixScorer] = []
        if ctc_weight > 0.0:
            scorers = [CtcPrefixScorer(lg.data) for lg in model.ctc_logits(hidden)]
        if max_len is None:
            max_len = min(h.shape[0] for h in hidden)
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        return _search(model, hidden, scorers, beam, ctc_weight, lm_weight,
                       lm if use_lm else None, max_len, nbest or beam)


def _search(model, hidden, scorers, beam, ctc_weight, lm_weight, lm, max_len, nbest):
    h_projs = [att.precompute(h) for att, h in zip(model.frame_attentions, hidden)]
    vocab_size = model.decoder.vocab_size
    letters = [c for c in range(vocab_size) if c not in (BLANK_ID, EOS_ID)]

    root = _Hyp(
        tokens=(),
        att=0.0,
        ctc=tuple(0.0 for _ in scorers),
        lm=0.0,
        state=model.decoder.initial_state(),
        lm_state=lm.initial_state() if lm else None,
    )
    live = [root]
    finished: list[SearchResult] = []

    for step in range(max_len + 1):
        last = step == max_len  # length cap: only the end symbol may follow
        expansions: list[tuple[float, tuple[int, ...], _Hyp, bool]] = []
        for hyp in live:
            fused, _, _ = model.fused_context(hyp.state.h, hidden, h_projs)
            state, logdist = model.decoder.step(hyp.state, fused)
            att_row = logdist.data
            psi_rows = [sc.score_all(hyp.tokens) for sc in scorers]
            lm_row = None
            lm_state = None
            if lm is not None:
                prev = hyp.tokens[-1] if hyp.tokens else EOS_ID
                lm_state, lm_dist = lm.step(hyp.lm_state, prev)
                lm_row = lm_dist.data

            def expanded(token: int) -> tuple[float, tuple[int, ...], _Hyp, bool]:
                att = hyp.att + float(att_row[token])
                ctc = tuple(float(r[token]) for r in psi_rows)
                lm_score = hyp.lm + (float(lm_row[token]) if lm_row is not None else 0.0)
                done = token == EOS_ID
                tokens = hyp.tokens if done else hyp.tokens + (token,)
                new = _Hyp(tokens, att, ctc, lm_score,
                           DecoderState(state.h, state.c, token), lm_state)
                total = _total(att, ctc, lm_score, ctc_weight, lm_weight)
                return (total, tokens + ((EOS_ID,) if done else ()), new, done)

            expansions.append(expanded(EOS_ID))
            if not last:
                for c in letters:
                    expansions.append(expanded(c))

        expansions.sort(key=lambda e: (-e[0], e[1]))
        live = []
        for total, _, hyp, done in expansions[:beam]:
            if done:
                finished.append(SearchResult(
                    hyp.tokens, total, hyp.att,
                    float(np.mean(hyp.ctc)) if hyp.ctc else 0.0, hyp.lm))
            else:
                live.append(hyp)
        if not live:
            break

    finished.sort(key=lambda r: (-r.total, r.tokens))
    if not finished:
        # nothing ever emitted the end symbol within the cap
        best = max(live, key=lambda h: _total(h.att, h.ctc, h.lm, ctc_weight, lm_weight)) if live else root
        return [SearchResult(best.tokens,
                             _total(best.att, best.ctc, best.lm, ctc_weight, lm_weight),
                             best.att,
                             float(np.mean(best.ctc)) if best.ctc else 0.0,
                             best.lm, truncated=True)]
    return finished[:nbest]


def dump_attention(model: MultiStreamModel, utt: Utterance, token_ids,
                   vocab: Vocabulary) -> dict:
    """Teacher-forced re-run of a hypothesis recording both attention levels.

    Returns the attention-dump record: per-stream frame attention rows (one
    per emitted token) and the per-step stream weights.
    """
    token_ids = list(token_ids)
    if not token_ids:
        raise ValueError("cannot dump attention for an empty hypothesis")
    with ag.no_grad():
        hidden = model.encode_utterance(utt)
        h_projs = [att.precompute(h) for att, h in zip(model.frame_attentions, hidden)]

        def ctx(q_prev):
            fused, weights, beta = model.fused_context(q_prev, hidden, h_projs)
            return fused, (weights, beta)

        _, _, extras = run_teacher_forced(model.decoder, token_ids, ctx)
    # drop the final end-symbol step: rows align with the emitted tokens
    steps = extras[:len(token_ids)]
    n_streams = len(hidden)
    frame_attention = [
        [steps[l][0][s].data.tolist() for l in range(len(steps))]
        for s in range(n_streams)
    ]
    stream_attention = [steps[l][1].data.tolist() for l in range(len(steps))]
    return {
        "utt": utt.id,
        "tokens": [vocab.tokens[i] for i in token_ids],
        "frame_attention": frame_attention,
        "stream_attention": stream_attention,
    }
