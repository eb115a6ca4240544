"""Multi-task objective and the optimization loop.

The per-utterance loss is the negative of a weighted combination: the CTC
weight multiplies the equal-weight mean of the per-encoder CTC log
probabilities, its complement multiplies the teacher-forced attention log
probability. Optimization is plain SGD over accumulated utterance gradients
with global-norm clipping and halve-on-plateau learning-rate decay, which
keeps runs bit-reproducible from the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mstream import autograd as ag
from mstream.autograd import Tensor
from mstream.ctc import combine_stream_scores, ctc_log_prob
from mstream.data import Utterance, seeded_rng
from mstream.metrics import edit_distance
from mstream.model import ModelConfig, MultiStreamModel, NormStats, init_params
from mstream.search import joint_beam_search


@dataclass(frozen=True)
class TrainConfig:
    ctc_weight: float = 0.5  # trade-off between the CTC and attention terms
    lr: float = 1.0
    epochs: int = 15
    batch_size: int = 8
    seed: int = 0
    grad_clip: float = 5.0
    lr_decay: float = 0.5
    dev_beam: int = 4
    dev_ctc_weight: float = 0.3
    stop_dev_cer: float | None = None
    unreachable_penalty: float = 1e4

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc weight must lie in [0, 1]")


def multi_task_loss(model: MultiStreamModel, utt: Utterance, ctc_weight: float,
                    unreachable_penalty: float = 1e4, warn=None) -> Tensor:
    """Negated joint objective for one utterance (lower is better).

    A CTC head whose label sequence is unreachable (too few frames) would
    contribute -inf; it is replaced by a large finite penalty so training
    continues, and reported through ``warn``.
    """
    if not 0.0 <= ctc_weight <= 1.0:
        raise ValueError("ctc weight must lie in [0, 1]")
    hidden = model.encode_utterance(utt)
    labels = utt.transcript.ids
    att = model.attention_log_prob(hidden, labels)
    if ctc_weight == 0.0:
        return ag.neg(att)
    terms = []
    for s, logits in enumerate(model.ctc_logits(hidden)):
        lp = ctc_log_prob(logits, labels)
        if np.isneginf(lp.data):
            if warn is not None:
                warn(f"{utt.id}: stream {s} cannot reach {len(labels)} labels "
                     f"in {logits.shape[0]} frames; applying penalty")
            lp = Tensor(-unreachable_penalty)
        terms.append(lp)
    ctc = combine_stream_scores(terms)
    return ag.neg(ag.add(ag.scale(ctc, ctc_weight), ag.scale(att, 1.0 - ctc_weight)))


def _clipped_sgd_step(params: dict[str, Tensor], lr: float, clip: float, count: int) -> None:
    norm_sq = 0.0
    for p in params.values():
        if p.grad is not None:
            norm_sq += float((p.grad ** 2).sum())
    norm = math.sqrt(norm_sq) / count
    factor = (clip / norm) if clip > 0 and norm > clip else 1.0
    for p in params.values():
        if p.grad is not None:
            p.data -= lr * factor * p.grad / count


def dev_cer(model: MultiStreamModel, dev: list[Utterance], beam: int,
            ctc_weight: float) -> float:
    errors, ref_len = 0, 0
    for utt in dev:
        hyp = joint_beam_search(model, utt, beam=beam, ctc_weight=ctc_weight)[0]
        counts = edit_distance(utt.transcript.ids, hyp.tokens)
        errors += counts.distance
        ref_len += len(utt.transcript.ids)
    return errors / max(1, ref_len)


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    norm: NormStats
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    diverged: bool = False


def train(corpus: list[Utterance], dev: list[Utterance], model_cfg: ModelConfig,
          cfg: TrainConfig, warn=None) -> TrainResult:
    """Gradient descent on the joint objective; returns the best-dev params.

    Deterministic given ``cfg.seed``: it fixes the initialization and every
    epoch's shuffle. A non-finite loss aborts the run and the result carries
    the last good (best-dev) parameters with ``diverged`` set.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    params = init_params(model_cfg, cfg.seed)
    norm = NormStats.fit(corpus)
    model = MultiStreamModel(model_cfg, params, norm)
    result = TrainResult(params=_snapshot(params), norm=norm)
    best_dev = math.inf
    lr = cfg.lr
    order = np.arange(len(corpus))
    for epoch in range(1, cfg.epochs + 1):
        seeded_rng(cfg.seed, "shuffle", epoch).shuffle(order)
        train_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            ag.zero_grads(params.values())
            for i in batch:
                loss = multi_task_loss(model, corpus[int(i)], cfg.ctc_weight,
                                       cfg.unreachable_penalty, warn)
                value = float(loss.data)
                if not math.isfinite(value):
                    result.diverged = True
                    result.log.append({"epoch": epoch, "train_loss": value,
                                       "dev_loss": None, "dev_cer": None})
                    return result
                train_loss += value
                ag.backward(loss)
            _clipped_sgd_step(params, lr, cfg.grad_clip, len(batch))
        with ag.no_grad():
            dev_loss = float(np.mean([
                float(multi_task_loss(model, u, cfg.ctc_weight,
                                      cfg.unreachable_penalty).data)
                for u in dev])) if dev else train_loss / len(order)
        cer = dev_cer(model, dev, cfg.dev_beam, cfg.dev_ctc_weight) if dev else math.nan
        result.log.append({
            "epoch": epoch,
            "train_loss": train_loss / len(order),
            "dev_loss": dev_loss,
            "dev_cer": cer,
        })
        if dev_loss < best_dev:
            best_dev = dev_loss
            result.params = _snapshot(params)
            result.best_epoch = epoch
        else:
            lr *= cfg.lr_decay
        if cfg.stop_dev_cer is not None and cer <= cfg.stop_dev_cer:
            break
    return result


def _snapshot(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}
