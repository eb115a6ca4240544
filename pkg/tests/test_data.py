import dataclasses
import json

import numpy as np
import pytest

from mstream import data
from mstream.data import (
    GRAMMARS,
    FeatureSequence,
    LabelSequence,
    ToyGrammar,
    Utterance,
    Vocabulary,
    corrupt_stream,
    read_features,
    read_manifest,
    render_text,
    save_corpus,
    synth_corpus,
    write_features,
)
from mstream.errors import DataFormatError


def test_fmat_round_trip_values(tmp_path):
    rng = np.random.default_rng(0)
    mat = rng.normal(size=(7, 5)).astype(np.float32).astype(np.float64)
    path = tmp_path / "x.fmat"
    write_features(path, mat)
    back = read_features(path)
    np.testing.assert_array_equal(back.frames, mat)


def test_fmat_file_round_trip_is_byte_exact(tmp_path):
    rng = np.random.default_rng(1)
    p1, p2 = tmp_path / "a.fmat", tmp_path / "b.fmat"
    write_features(p1, rng.normal(size=(9, 3)))
    write_features(p2, read_features(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_fmat_bad_magic(tmp_path):
    path = tmp_path / "bad.fmat"
    path.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(DataFormatError) as err:
        read_features(path)
    assert err.value.offset == 0


def test_fmat_truncated_payload(tmp_path):
    path = tmp_path / "short.fmat"
    import struct

    blob = b"FMAT" + struct.pack("<III", 1, 3, 4) + b"\0" * (4 * 11)
    path.write_bytes(blob)
    with pytest.raises(DataFormatError) as err:
        read_features(path)
    assert "3x4" in str(err.value)
    assert err.value.offset is not None


def test_fmat_bad_version(tmp_path):
    import struct

    path = tmp_path / "v9.fmat"
    path.write_bytes(b"FMAT" + struct.pack("<III", 9, 1, 1) + b"\0" * 4)
    with pytest.raises(DataFormatError):
        read_features(path)


def test_vocabulary_reserved_and_round_trip(tmp_path):
    vocab = ToyGrammar().vocabulary()
    assert vocab.tokens[:3] == ["<blank>", "<sos/eos>", "<unk>"]
    assert " " in vocab.tokens
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    assert Vocabulary.load(path) == vocab


def test_vocabulary_rejects_bad_reserved():
    with pytest.raises(ValueError):
        Vocabulary(["<blank>", "<unk>", "<sos/eos>", "a"])
    with pytest.raises(ValueError):
        Vocabulary(["<blank>", "<sos/eos>", "<unk>"])


def test_encode_unknown_maps_to_unk():
    vocab = ToyGrammar().vocabulary()
    seq = vocab.encode("aZb")
    assert seq.ids[1] == data.UNK_ID
    assert vocab.decode([seq.ids[0], seq.ids[2]]) == "ab"


def test_label_sequence_rejects_reserved_ids():
    with pytest.raises(ValueError):
        LabelSequence((data.BLANK_ID,))
    with pytest.raises(ValueError):
        LabelSequence(())


def test_synth_deterministic():
    g = ToyGrammar(sigma=0.5)
    a = synth_corpus(g, 10, 2, seed=1)
    b = synth_corpus(g, 10, 2, seed=1)
    for ua, ub in zip(a, b):
        assert ua.id == ub.id and ua.transcript == ub.transcript
        for sa, sb in zip(ua.streams, ub.streams):
            np.testing.assert_array_equal(sa.frames, sb.frames)


def test_synth_prefix_stable_in_corpus_size():
    g = ToyGrammar(sigma=0.3)
    small = synth_corpus(g, 5, 2, seed=4)
    big = synth_corpus(g, 9, 2, seed=4)
    np.testing.assert_array_equal(small[4].streams[1].frames, big[4].streams[1].frames)


def test_synth_sigma_zero_is_pure_templates():
    g = ToyGrammar(sigma=0.0)
    vocab = g.vocabulary()
    (utt,) = synth_corpus(g, 1, 1, seed=7)
    text = vocab.decode(utt.transcript.ids)
    np.testing.assert_array_equal(utt.streams[0].frames, render_text(g, text))


def test_synth_transcripts_parse_under_grammar():
    g = ToyGrammar(sigma=0.2)
    vocab = g.vocabulary()
    for utt in synth_corpus(g, 100, 1, seed=9):
        assert g.accepts(vocab.decode(utt.transcript.ids))


def test_synth_needs_a_stream():
    with pytest.raises(ValueError):
        synth_corpus(ToyGrammar(), 1, 0, seed=0)


def test_grammar_validation():
    with pytest.raises(ValueError):
        ToyGrammar(words=("xyz",))
    with pytest.raises(ValueError):
        ToyGrammar(words=())
    with pytest.raises(ValueError):
        ToyGrammar(min_words=3, max_words=2)
    with pytest.raises(ValueError):
        ToyGrammar(interference=1.5)


def test_corrupt_sigma_zero_identity():
    (utt,) = synth_corpus(ToyGrammar(sigma=0.1), 1, 2, seed=3)
    out = corrupt_stream(utt, 0, 0.0, seed=5)
    np.testing.assert_array_equal(out.streams[0].frames, utt.streams[0].frames)


def test_corrupt_leaves_other_streams_untouched():
    (utt,) = synth_corpus(ToyGrammar(sigma=0.1), 1, 2, seed=3)
    out = corrupt_stream(utt, 0, 1.0, seed=5)
    assert out.streams[1] is utt.streams[1]
    assert not np.array_equal(out.streams[0].frames, utt.streams[0].frames)
    assert out.streams[0].frames.shape == utt.streams[0].frames.shape


def test_corrupt_noise_statistics():
    utt = Utterance("u", (FeatureSequence(np.ones((400, 40))),), LabelSequence((3,)))
    out = corrupt_stream(utt, 0, 1.0, seed=11)
    diff = out.streams[0].frames - utt.streams[0].frames
    n = diff.size
    assert abs(diff.mean()) < 3.0 / np.sqrt(n)
    assert abs(diff.std() - 1.0) < 5.0 / np.sqrt(2 * n)


def test_corrupt_invalid_index():
    (utt,) = synth_corpus(ToyGrammar(), 1, 2, seed=0)
    with pytest.raises(ValueError):
        corrupt_stream(utt, 2, 1.0, seed=0)


def test_outage_hits_at_most_one_stream():
    g = ToyGrammar(interference=1.0)
    vocab = g.vocabulary()
    for utt in synth_corpus(g, 20, 2, seed=13):
        clean = render_text(g, vocab.decode(utt.transcript.ids))
        changed = [not np.array_equal(s.frames, clean) for s in utt.streams]
        assert sum(changed) == 1


def test_manifest_round_trip(tmp_path):
    g = ToyGrammar(sigma=0.2)
    vocab = g.vocabulary()
    utts = synth_corpus(g, 4, 2, seed=21)
    manifest = save_corpus(tmp_path, utts, vocab)
    back = read_manifest(manifest, vocab)
    assert [u.id for u in back] == [u.id for u in utts]
    for ua, ub in zip(utts, back):
        assert ua.transcript == ub.transcript
        for sa, sb in zip(ua.streams, ub.streams):
            # on-disk features are float32
            np.testing.assert_allclose(sa.frames, sb.frames, atol=1e-6)


def test_manifest_missing_field(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps({"id": "u", "streams": []}) + "\n")
    with pytest.raises(DataFormatError) as err:
        read_manifest(path, ToyGrammar().vocabulary())
    assert "text" in str(err.value)


def test_manifest_bad_json(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text("{nope\n")
    with pytest.raises(DataFormatError):
        read_manifest(path, ToyGrammar().vocabulary())


def test_grammar_presets_exist():
    assert "letters6" in GRAMMARS and "letters3" in GRAMMARS
    for g in GRAMMARS.values():
        assert len(g.vocabulary()) >= 4


def test_seeded_rng_is_platform_stable_and_key_sensitive():
    a = data.seeded_rng(1, "x").normal(size=3)
    b = data.seeded_rng(1, "x").normal(size=3)
    c = data.seeded_rng(1, "y").normal(size=3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
