import dataclasses

import numpy as np
import pytest

from mstream.data import ToyGrammar, synth_corpus
from mstream.encoder import EncoderConfig
from mstream.lm import LmConfig, RnnLm, lm_train
from mstream.model import ModelConfig, MultiStreamModel, NormStats, init_params
from mstream.training import TrainConfig, train

TINY_GRAMMAR = ToyGrammar(letters="abc", words=("ab", "ca", "bc", "a"),
                          max_words=2, dim=6)


def tiny_model_config(n_streams=2, vocab_size=None, kind="blstm"):
    vocab_size = vocab_size or len(TINY_GRAMMAR.vocabulary())
    return ModelConfig(
        vocab_size=vocab_size,
        n_streams=n_streams,
        input_dims=(TINY_GRAMMAR.dim,) * n_streams,
        encoder=EncoderConfig(kind=kind, layers=2, cells=6, projection=6,
                              subsample=(2, 2), conv_channels=(2, 3)),
        att_dim=5,
        dec_cells=6,
        embed_dim=4,
    )


def make_tiny_model(seed=0, n_streams=2, kind="blstm"):
    cfg = tiny_model_config(n_streams=n_streams, kind=kind)
    params = init_params(cfg, seed=seed)
    return MultiStreamModel(cfg, params, NormStats.identity(cfg.input_dims))


@pytest.fixture(scope="session")
def tiny_trained():
    """A small trained 2-stream model plus LM on the 3-letter grammar.

    Shared by the search equivalence tests and acceptance criterion 4; kept
    deliberately tiny so exhaustive enumeration of all label sequences up to
    length 3 stays fast.
    """
    grammar = TINY_GRAMMAR
    vocab = grammar.vocabulary()
    corpus = synth_corpus(dataclasses.replace(grammar, sigma=0.3), 48, 2, seed=11)
    dev = synth_corpus(dataclasses.replace(grammar, sigma=0.3), 8, 2, seed=12)
    cfg = tiny_model_config()
    result = train(corpus, dev, cfg, TrainConfig(epochs=6, lr=1.0, seed=3))
    model = MultiStreamModel(cfg, result.params, result.norm)
    lm_params, _ = lm_train([u.transcript for u in corpus],
                            LmConfig(vocab_size=len(vocab), embed_dim=4, cells=8,
                                     epochs=4, seed=5))
    return model, RnnLm(lm_params), vocab


@pytest.fixture(scope="session")
def toy_training():
    """Training on the standard 6-letter toy corpus (acceptance criterion 8).

    Returns (train log, model, vocab, dev corpus, elapsed seconds).
    """
    import time

    grammar = ToyGrammar(sigma=0.2)
    vocab = grammar.vocabulary()
    corpus = synth_corpus(grammar, 200, 2, seed=1)
    dev = synth_corpus(grammar, 30, 2, seed=2)
    cfg = ModelConfig(vocab_size=len(vocab), n_streams=2, input_dims=(8, 8))
    tc = TrainConfig(epochs=30, lr=1.5, lr_decay=0.7, seed=0, stop_dev_cer=0.02)
    start = time.monotonic()
    result = train(corpus, dev, cfg, tc)
    elapsed = time.monotonic() - start
    model = MultiStreamModel(cfg, result.params, result.norm)
    return result, model, vocab, dev, elapsed
