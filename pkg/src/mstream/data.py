"""Feature/label file formats, manifests, and the synthetic two-stream corpus.

On-disk formats
---------------
FMAT feature file (binary, little-endian):
    magic ``FMAT`` (4 bytes), u32 version=1, u32 T, u32 D, then T*D float32
    values row-major. Readers upcast to float64.

Vocabulary file: UTF-8 text, one token per line; the 0-based line number is
the token id. Lines 0, 1, 2 must be ``<blank>``, ``<sos/eos>``, ``<unk>``.
Lines keep leading/trailing spaces (a single-space token is legal), only the
newline is stripped.

Manifest: UTF-8 text, one JSON object per line with fields
``{"id": str, "streams": [path, ...], "text": str}``. Stream paths are
resolved relative to the manifest's directory. ``text`` is tokenized per
character against the vocabulary; unknown characters map to the unk id.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mstream.errors import DataFormatError

FMAT_MAGIC = b"FMAT"
FMAT_VERSION = 1

BLANK_ID = 0
EOS_ID = 1  # doubles as the start symbol
UNK_ID = 2
RESERVED_TOKENS = ("<blank>", "<sos/eos>", "<unk>")


def seeded_rng(seed: int, *keys) -> np.random.Generator:
    """A PCG64 generator derived from ``seed`` and a tuple of mix-in keys.

    String keys are hashed with blake2b so streams are reproducible across
    platforms and python processes (no salted builtin hash).
    """
    entropy = [int(seed)]
    for k in keys:
        if isinstance(k, str):
            entropy.append(int.from_bytes(hashlib.blake2b(k.encode("utf-8"), digest_size=8).digest(), "little"))
        else:
            entropy.append(int(k))
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class FeatureSequence:
    """One stream's acoustic feature matrix, T frames by D dims."""

    frames: np.ndarray

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ValueError(f"features must be a T x D matrix with T,D >= 1, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("features contain non-finite values")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def D(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class LabelSequence:
    """Token ids of the transcript; never contains blank or sos/eos."""

    ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) < 1:
            raise ValueError("label sequence must be non-empty")
        if any(i in (BLANK_ID, EOS_ID) for i in self.ids):
            raise ValueError("label sequence may not contain the blank or sos/eos id")


@dataclass(frozen=True)
class Utterance:
    id: str
    streams: tuple[FeatureSequence, ...]
    transcript: LabelSequence

    def __post_init__(self):
        if not self.streams:
            raise ValueError("utterance needs at least one stream")


class Vocabulary:
    """Ordered distinct tokens with the three reserved ids at the front."""

    def __init__(self, tokens: list[str]):
        if len(tokens) < 4:
            raise ValueError("vocabulary needs the 3 reserved tokens plus at least one letter")
        if tuple(tokens[:3]) != RESERVED_TOKENS:
            raise ValueError(f"vocabulary must start with {RESERVED_TOKENS}, got {tokens[:3]}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be distinct")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @classmethod
    def from_letters(cls, letters: str) -> "Vocabulary":
        return cls(list(RESERVED_TOKENS) + list(letters))

    def encode(self, text: str) -> LabelSequence:
        return LabelSequence(tuple(self._ids.get(ch, UNK_ID) for ch in text))

    def decode(self, ids) -> str:
        return "".join(self.tokens[i] for i in ids)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls(lines)


def write_features(path, features: FeatureSequence | np.ndarray) -> None:
    frames = features.frames if isinstance(features, FeatureSequence) else np.asarray(features)
    t, d = frames.shape
    payload = frames.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(FMAT_MAGIC)
        fh.write(struct.pack("<III", FMAT_VERSION, t, d))
        fh.write(payload)


def read_features(path) -> FeatureSequence:
    blob = Path(path).read_bytes()
    if blob[:4] != FMAT_MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r}, expected {FMAT_MAGIC!r}", offset=0)
    if len(blob) < 16:
        raise DataFormatError(f"{path}: truncated header", offset=len(blob))
    version, t, d = struct.unpack("<III", blob[4:16])
    if version != FMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}", offset=4)
    expected = 16 + 4 * t * d
    if len(blob) != expected:
        raise DataFormatError(
            f"{path}: header promises {t}x{d} floats ({expected} bytes) but file has {len(blob)}",
            offset=min(len(blob), expected),
        )
    frames = np.frombuffer(blob, dtype="<f4", offset=16).astype(np.float64).reshape(t, d)
    return FeatureSequence(frames)


def write_manifest(path, entries: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e, ensure_ascii=False) + "\n")


def read_manifest(path, vocab: Vocabulary) -> list[Utterance]:
    """Load a manifest and its features; paths resolve against the manifest dir."""
    base = Path(path).parent
    utts = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}:{ln + 1}: not valid JSON: {e}") from e
            missing = {"id", "streams", "text"} - rec.keys()
            if missing:
                raise DataFormatError(f"{path}:{ln + 1}: missing fields {sorted(missing)}")
            streams = tuple(read_features(base / p) for p in rec["streams"])
            utts.append(Utterance(rec["id"], streams, vocab.encode(rec["text"])))
    return utts


@dataclass(frozen=True)
class ToyGrammar:
    """A tiny word grammar plus the rendering recipe for its letters.

    Transcripts are 1..max words from ``words`` joined by single spaces.
    Every vocabulary letter (including the space) renders to a fixed
    letter-specific template of ``frames_per_token`` frames of ``dim``
    values in {-1, +1}; renderings add seeded Gaussian noise at ``sigma``.
    When ``sigma_jitter`` is true the per-(utterance, stream) noise level is
    drawn uniformly from [0, sigma] instead of being constant, so streams of
    one utterance differ in reliability the way real parallel arrays do.

    ``interference`` is the per-utterance probability of an outage on one
    stream (chosen uniformly), the desk-scale stand-in for one far array
    picking up cross-talk or heavy room noise while the others stay usable:
    half of the outages mostly replace the stream (mix ratio 0.7..1.0) with
    the rendering of a random other sentence plus unit-variance noise, the
    other half add strong Gaussian noise (sigma 0.8..1.4). Such utterances
    are only recoverable by leaning on the surviving streams.
    """

    letters: str = "abcdef"
    words: tuple[str, ...] = ("ab", "cad", "de", "feb", "ace", "bad")
    min_words: int = 1
    max_words: int = 2
    frames_per_token: int = 5
    dim: int = 8
    sigma: float = 0.0
    sigma_jitter: bool = False
    interference: float = 0.0

    def __post_init__(self):
        if not self.words or not self.letters:
            raise ValueError("grammar needs at least one word and one letter")
        bad = [w for w in self.words if not w or any(c not in self.letters for c in w)]
        if bad:
            raise ValueError(f"words {bad} use letters outside {self.letters!r}")
        if self.min_words < 1 or self.max_words < self.min_words:
            raise ValueError("need 1 <= min_words <= max_words")
        if not 0.0 <= self.interference <= 1.0:
            raise ValueError("interference must lie in [0, 1]")

    def vocabulary(self) -> Vocabulary:
        return Vocabulary.from_letters(" " + self.letters)

    def accepts(self, text: str) -> bool:
        parts = text.split(" ")
        return (
            self.min_words <= len(parts) <= self.max_words
            and all(p in self.words for p in parts)
        )


GRAMMARS = {
    "letters6": ToyGrammar(),
    "letters3": ToyGrammar(
        letters="abc", words=("ab", "ca", "bc", "a"), max_words=2, dim=6,
    ),
}


def letter_template(letter: str, frames: int, dim: int) -> np.ndarray:
    """Deterministic +-1 pattern for one letter; independent of corpus seed."""
    rng = seeded_rng(0, f"template:{letter}:{frames}:{dim}")
    return rng.choice(np.array([-1.0, 1.0]), size=(frames, dim))


def render_text(grammar: ToyGrammar, text: str) -> np.ndarray:
    rows = [letter_template(ch, grammar.frames_per_token, grammar.dim) for ch in text]
    return np.concatenate(rows, axis=0)


def _sample_text(grammar: ToyGrammar, rng: np.random.Generator) -> str:
    n = int(rng.integers(grammar.min_words, grammar.max_words + 1))
    return " ".join(grammar.words[int(rng.integers(len(grammar.words)))] for _ in range(n))


def synth_corpus(
    grammar: ToyGrammar,
    n_utts: int,
    n_streams: int,
    seed: int,
) -> list[Utterance]:
    """Deterministic synthetic corpus: same transcript rendered per stream.

    All randomness derives from ``seed`` (transcripts, noise); utterance i of
    a corpus does not depend on ``n_utts``, so corpora of different sizes
    share a prefix.
    """
    if n_streams < 1:
        raise ValueError("need at least one stream")
    vocab = grammar.vocabulary()
    utts = []
    for i in range(n_utts):
        utt_id = f"utt{i:04d}"
        text = _sample_text(grammar, seeded_rng(seed, "text", utt_id))
        clean = render_text(grammar, text)
        victim = -1
        if grammar.interference > 0.0:
            outage_rng = seeded_rng(seed, "outage", utt_id)
            if outage_rng.uniform() < grammar.interference:
                victim = int(outage_rng.integers(n_streams))
        streams = []
        for s in range(n_streams):
            rng = seeded_rng(seed, "noise", utt_id, s)
            frames = clean
            if s == victim:
                if rng.uniform() < 0.5:
                    mix = float(rng.uniform(0.7, 1.0))
                    other = render_text(grammar, _sample_text(grammar, rng))
                    reps = -(-clean.shape[0] // other.shape[0])
                    other = np.tile(other, (reps, 1))[:clean.shape[0]]
                    frames = (1.0 - mix) * clean + mix * other \
                        + rng.normal(0.0, 1.0, size=clean.shape)
                else:
                    frames = clean + rng.normal(0.0, float(rng.uniform(0.8, 1.4)),
                                                size=clean.shape)
            sigma = grammar.sigma
            if grammar.sigma_jitter:
                sigma = float(rng.uniform(0.0, grammar.sigma))
            if sigma > 0.0:
                frames = frames + rng.normal(0.0, sigma, size=frames.shape)
            streams.append(FeatureSequence(frames))
        utts.append(Utterance(utt_id, tuple(streams), vocab.encode(text)))
    return utts


def corrupt_features(frames: np.ndarray, utt_id: str, stream_index: int,
                     noise_sigma: float, seed: int) -> np.ndarray:
    """Feature matrix plus seeded zero-mean Gaussian noise."""
    if noise_sigma < 0:
        raise ValueError("noise sigma must be >= 0")
    if noise_sigma == 0.0:
        return frames.copy()
    rng = seeded_rng(seed, "corrupt", utt_id, stream_index)
    return frames + rng.normal(0.0, noise_sigma, size=frames.shape)


def corrupt_stream(utt: Utterance, stream_index: int, noise_sigma: float, seed: int) -> Utterance:
    """Copy of ``utt`` with zero-mean Gaussian noise added to one stream."""
    if not 0 <= stream_index < len(utt.streams):
        raise ValueError(f"stream index {stream_index} out of range for {len(utt.streams)} streams")
    streams = list(utt.streams)
    streams[stream_index] = FeatureSequence(
        corrupt_features(streams[stream_index].frames, utt.id, stream_index, noise_sigma, seed))
    return Utterance(utt.id, tuple(streams), utt.transcript)


def save_corpus(out_dir, utts: list[Utterance], vocab: Vocabulary) -> Path:
    """Write FMAT files, vocab.txt and manifest.jsonl; returns manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    entries = []
    for u in utts:
        paths = []
        for s, feats in enumerate(u.streams):
            rel = f"{u.id}.s{s}.fmat"
            write_features(out / rel, feats)
            paths.append(rel)
        entries.append({"id": u.id, "streams": paths, "text": vocab.decode(u.transcript.ids)})
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, entries)
    return manifest
