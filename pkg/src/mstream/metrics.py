"""Levenshtein alignment and corpus-level CER/WER scoring."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field


@dataclass(frozen=True)
class EditCounts:
    substitutions: int
    deletions: int
    insertions: int

    @property
    def distance(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def edit_distance(ref, hyp) -> EditCounts:
    """Unit-cost Levenshtein alignment of two token sequences.

    Ties break deterministically: substitution is preferred over deletion,
    deletion over insertion. A deletion is a reference token absent from the
    hypothesis; an insertion is an extra hypothesis token.
    """
    nr, nh = len(ref), len(hyp)
    # dp[i][j] = (distance, S, D, I) for ref[:i] vs hyp[:j]
    dp = [[(0, 0, 0, 0)] * (nh + 1) for _ in range(nr + 1)]
    for i in range(1, nr + 1):
        dp[i][0] = (i, 0, i, 0)
    for j in range(1, nh + 1):
        dp[0][j] = (j, 0, 0, j)
    for i in range(1, nr + 1):
        for j in range(1, nh + 1):
            d, s_, dl, ins = dp[i - 1][j - 1]
            if ref[i - 1] == hyp[j - 1]:
                dp[i][j] = (d, s_, dl, ins)
                continue
            cands = (
                (d + 1, s_ + 1, dl, ins),  # substitution
                (dp[i - 1][j][0] + 1, dp[i - 1][j][1], dp[i - 1][j][2] + 1, dp[i - 1][j][3]),  # deletion
                (dp[i][j - 1][0] + 1, dp[i][j - 1][1], dp[i][j - 1][2], dp[i][j - 1][3] + 1),  # insertion
            )
            best = min(range(3), key=lambda k: (cands[k][0], k))
            dp[i][j] = cands[best]
    d, s_, dl, ins = dp[nr][nh]
    return EditCounts(s_, dl, ins)


def tokenize(text: str, unit: str) -> list[str]:
    if unit == "char":
        return list(text)
    if unit == "word":
        return [w for w in text.strip().split(" ") if w]
    raise ValueError(f"unknown unit {unit!r}, expected 'char' or 'word'")


@dataclass
class ScoreReport:
    """Aggregated edit statistics; the corpus rate is error mass over
    reference mass, not a mean of per-utterance rates."""

    unit: str
    per_utt: dict[str, dict] = field(default_factory=dict)
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_tokens: int = 0

    @property
    def error_rate(self) -> float:
        errors = self.substitutions + self.deletions + self.insertions
        if self.ref_tokens == 0:
            return 0.0 if errors == 0 else 1.0
        return errors / self.ref_tokens

    def to_dict(self) -> dict:
        key = "cer" if self.unit == "char" else "wer"
        return {
            key: self.error_rate,
            "unit": self.unit,
            "substitutions": self.substitutions,
            "deletions": self.deletions,
            "insertions": self.insertions,
            "ref_tokens": self.ref_tokens,
            "utterances": len(self.per_utt),
        }


def score_corpus(refs: dict[str, str], hyps: dict[str, str], unit: str = "char",
                 warn=None) -> ScoreReport:
    """Score hypothesis texts against references by utterance id.

    Hypothesis ids must be a subset of reference ids; a reference with no
    hypothesis is scored as fully deleted (with a warning).
    """
    extra = sorted(set(hyps) - set(refs))
    if extra:
        raise ValueError(f"hypothesis ids not present in references: {extra}")
    warn = warn or (lambda msg: print(msg, file=sys.stderr))
    report = ScoreReport(unit=unit)
    for utt_id in sorted(refs):
        ref_toks = tokenize(refs[utt_id], unit)
        if utt_id in hyps:
            hyp_toks = tokenize(hyps[utt_id], unit)
        else:
            warn(f"warning: no hypothesis for {utt_id}; counting as deletions")
            hyp_toks = []
        counts = edit_distance(ref_toks, hyp_toks)
        report.per_utt[utt_id] = {
            "substitutions": counts.substitutions,
            "deletions": counts.deletions,
            "insertions": counts.insertions,
            "ref_tokens": len(ref_toks),
        }
        report.substitutions += counts.substitutions
        report.deletions += counts.deletions
        report.insertions += counts.insertions
        report.ref_tokens += len(ref_toks)
    return report


def read_trn(path) -> dict[str, str]:
    """Read an ``utt_id<TAB>text`` file into a dict."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            utt_id, _, text = line.partition("\t")
            out[utt_id] = text
    return out


def write_trn(path, texts: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, text in texts.items():
            fh.write(f"{utt_id}\t{text}\n")
