"""Frame-aligned character sequences (FACS).

Character-level alignments are turned into one token per fixed-length frame:
each character repeats for as many frames as it lasts, and frames without
speech carry a reserved null token rendered as ``*``.

Times are quantized to whole microseconds before any comparison, so frame
assignment is exact integer arithmetic. A frame ``k`` covers
``[k * frame_ms, (k + 1) * frame_ms)`` and takes the symbol of the segment
``[start, end)`` that contains its midpoint.
"""

from __future__ import annotations

import functools
import hashlib
import io
import json
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence, Union

import numpy as np

from rhythmid._io import atomic_write_text

PAD, NULL, UNK = 0, 1, 2
NULL_CHAR = "*"
UNK_CHAR = "\ufffd"
RESERVED_NAMES = ("<pad>", "<null>", "<unk>")
DEFAULT_FRAME_MS = 20

Source = Union[str, os.PathLike, BinaryIO, io.TextIOBase]


class AlignmentError(ValueError):
    """A record that violates the alignment invariants."""

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


def _to_us(seconds: float) -> int:
    return int(round(seconds * 1_000_000))


@dataclass(frozen=True)
class CharSegment:
    symbol: str
    start_s: float
    end_s: float

    @property
    def start_us(self) -> int:
        return _to_us(self.start_s)

    @property
    def end_us(self) -> int:
        return _to_us(self.end_s)


@dataclass
class AlignedUtterance:
    utt_id: str
    speaker_id: str
    duration_s: float
    segments: list[CharSegment] = field(default_factory=list)

    def validate(self) -> None:
        """Raise :class:`AlignmentError` if any invariant is broken."""
        if not self.duration_s > 0:
            raise AlignmentError("bad_duration", f"{self.utt_id}: duration {self.duration_s} is not positive")
        dur = _to_us(self.duration_s)
        prev_start = prev_end = None
        for seg in self.segments:
            if len(seg.symbol) != 1:
                raise AlignmentError("malformed", f"{self.utt_id}: symbol {seg.symbol!r} is not one character")
            s, e = seg.start_us, seg.end_us
            if e <= s:
                raise AlignmentError("non_monotonic", f"{self.utt_id}: segment end {seg.end_s} <= start {seg.start_s}")
            if prev_start is not None and s < prev_start:
                raise AlignmentError("non_monotonic", f"{self.utt_id}: segments not sorted by start")
            if prev_end is not None and s < prev_end:
                raise AlignmentError("overlap", f"{self.utt_id}: segment at {seg.start_s} overlaps its predecessor")
            if s < 0 or e > dur:
                raise AlignmentError("out_of_range", f"{self.utt_id}: segment [{seg.start_s}, {seg.end_s}) outside utterance")
            prev_start, prev_end = s, e

    def to_record(self) -> dict:
        return {
            "utt_id": self.utt_id,
            "speaker": self.speaker_id,
            "duration": self.duration_s,
            "chars": [{"c": s.symbol, "start": s.start_s, "end": s.end_s} for s in self.segments],
        }


@dataclass
class ParseResult:
    utterances: list[AlignedUtterance]
    discards: Counter
    discarded_ids: list[tuple[int, str, str]] = field(default_factory=list)

    @property
    def n_discarded(self) -> int:
        return sum(self.discards.values())


def _record_to_utterance(obj) -> AlignedUtterance:
    if not isinstance(obj, dict):
        raise AlignmentError("malformed", "record is not an object")
    try:
        utt_id = obj["utt_id"]
        speaker = obj["speaker"]
        duration = obj["duration"]
        chars = obj["chars"]
    except KeyError as exc:
        raise AlignmentError("malformed", f"missing field {exc}") from None
    if not isinstance(utt_id, str) or not isinstance(speaker, str) or not isinstance(chars, list):
        raise AlignmentError("malformed", "wrong field types")
    if isinstance(duration, bool) or not isinstance(duration, (int, float)):
        raise AlignmentError("malformed", "duration is not a number")
    segments = []
    for ch in chars:
        try:
            c, start, end = ch["c"], ch["start"], ch["end"]
        except (KeyError, TypeError):
            raise AlignmentError("malformed", f"{utt_id}: bad character entry") from None
        if not isinstance(c, str) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in (start, end)):
            raise AlignmentError("malformed", f"{utt_id}: bad character entry")
        segments.append(CharSegment(c.lower(), float(start), float(end)))
    utt = AlignedUtterance(utt_id, speaker, float(duration), segments)
    utt.validate()
    return utt


def _open_lines(source: Source) -> Iterable[bytes]:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            yield from fh
    elif isinstance(source, io.TextIOBase):
        for line in source:
            yield line.encode("utf-8")
    else:
        yield from source


def parse_alignment_file(source: Source) -> ParseResult:
    """Read alignment JSON lines, keeping valid utterances and tallying the rest.

    Each discarded record is counted under one reason: ``malformed``,
    ``bad_duration``, ``non_monotonic``, ``overlap`` or ``out_of_range``.
    I/O failures propagate; a bad line never does.
    """
    utterances: list[AlignedUtterance] = []
    discards: Counter = Counter()
    dropped: list[tuple[int, str, str]] = []
    for lineno, raw in enumerate(_open_lines(source), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw.decode("utf-8"))
            utterances.append(_record_to_utterance(obj))
        except AlignmentError as exc:
            discards[exc.reason] += 1
            dropped.append((lineno, obj.get("utt_id", "") if isinstance(obj, dict) else "", exc.reason))
        except (UnicodeDecodeError, json.JSONDecodeError):
            discards["malformed"] += 1
            dropped.append((lineno, "", "malformed"))
    return ParseResult(utterances, discards, dropped)


def write_alignment_file(path: str | os.PathLike, utterances: Iterable[AlignedUtterance]) -> None:
    lines = [json.dumps(u.to_record(), ensure_ascii=False) for u in utterances]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    symbols: tuple[str, ...]  # non-reserved symbols in id order, starting at id 3

    @functools.cached_property
    def symbol_to_id(self) -> dict[str, int]:
        return {s: i + 3 for i, s in enumerate(self.symbols)}

    @functools.cached_property
    def id_to_symbol(self) -> dict[int, str]:
        table = {PAD: RESERVED_NAMES[0], NULL: NULL_CHAR, UNK: UNK_CHAR}
        table.update({i + 3: s for i, s in enumerate(self.symbols)})
        return table

    def __len__(self) -> int:
        return len(self.symbols) + 3

    def lookup(self, symbol: str) -> int:
        return self.symbol_to_id.get(symbol, UNK)

    def to_text(self) -> str:
        rows = [f"{i}\t{name}" for i, name in enumerate(RESERVED_NAMES)]
        rows += [f"{i + 3}\t{s}" for i, s in enumerate(self.symbols)]
        return "".join(r + "\n" for r in rows)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        entries = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line:
                continue
            idx, sep, sym = line.partition("\t")
            if not sep or not idx.isdigit():
                raise ValueError(f"vocabulary line {lineno}: expected 'id<TAB>symbol'")
            entries.append((int(idx), sym))
        if [e[1] for e in entries[:3]] != list(RESERVED_NAMES) or [e[0] for e in entries[:3]] != [0, 1, 2]:
            raise ValueError("vocabulary must start with the reserved entries <pad>, <null>, <unk>")
        symbols = []
        for expected, (idx, sym) in enumerate(entries[3:], start=3):
            if idx != expected or len(sym) != 1:
                raise ValueError(f"vocabulary entry {idx}\t{sym!r} is out of order or not a single character")
            symbols.append(sym)
        return cls(tuple(symbols))


def _usable(symbol: str) -> bool:
    return not symbol.isspace() and symbol not in (NULL_CHAR, UNK_CHAR)


def build_vocabulary(utterances: Sequence[AlignedUtterance]) -> Vocabulary:
    """Reserved ids first, then every observed symbol in lexicographic order."""
    if not utterances:
        raise ValueError("cannot build a vocabulary from zero utterances")
    seen = {seg.symbol.lower() for u in utterances for seg in u.segments}
    return Vocabulary(tuple(sorted(s for s in seen if _usable(s))))


def load_vocabulary(path: str | os.PathLike) -> Vocabulary:
    return Vocabulary.from_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------


@dataclass
class FacsSequence:
    token_ids: np.ndarray
    utt_id: str = ""
    speaker_id: str = ""
    frame_ms: int = DEFAULT_FRAME_MS

    def __len__(self) -> int:
        return len(self.token_ids)


def n_frames(duration_s: float, frame_ms: int) -> int:
    return _to_us(duration_s) // (frame_ms * 1000)


def facs_encode(utt: AlignedUtterance, vocab: Vocabulary, frame_ms: int = DEFAULT_FRAME_MS) -> FacsSequence:
    if frame_ms <= 0:
        raise ValueError("frame_ms must be positive")
    n = n_frames(utt.duration_s, frame_ms)
    # midpoint of frame k in microseconds: (2k + 1) * frame_ms * 500
    mids = (2 * np.arange(n, dtype=np.int64) + 1) * (frame_ms * 500)
    tokens = np.full(n, NULL, dtype=np.int64)
    segs = [s for s in utt.segments if not s.symbol.isspace()]
    if segs and n:
        starts = np.array([s.start_us for s in segs], dtype=np.int64)
        ends = np.array([s.end_us for s in segs], dtype=np.int64)
        ids = np.array([vocab.lookup(s.symbol.lower()) for s in segs], dtype=np.int64)
        j = np.searchsorted(starts, mids, side="right") - 1
        inside = (j >= 0) & (mids < ends[np.maximum(j, 0)])
        tokens[inside] = ids[j[inside]]
    return FacsSequence(tokens, utt.utt_id, utt.speaker_id, frame_ms)


def facs_to_string(seq: FacsSequence | Sequence[int], vocab: Vocabulary) -> str:
    ids = seq.token_ids if isinstance(seq, FacsSequence) else seq
    table = vocab.id_to_symbol
    out = []
    for t in ids:
        t = int(t)
        if t == PAD or t not in table:
            raise ValueError(f"token id {t} cannot be rendered")
        out.append(table[t])
    return "".join(out)


def facs_decode(text: str, vocab: Vocabulary) -> list[tuple[str, int]]:
    """Split a FACS string into maximal runs of ``(symbol, frame_count)``.

    The null character comes back as ``"*"``.
    """
    known = set(vocab.symbols) | {NULL_CHAR, UNK_CHAR}
    runs: list[tuple[str, int]] = []
    for ch in text:
        if ch not in known:
            raise ValueError(f"character {ch!r} is not in the vocabulary")
        if runs and runs[-1][0] == ch:
            runs[-1] = (ch, runs[-1][1] + 1)
        else:
            runs.append((ch, 1))
    return runs


def facs_from_string(text: str, vocab: Vocabulary, utt_id: str = "", speaker_id: str = "",
                     frame_ms: int = DEFAULT_FRAME_MS) -> FacsSequence:
    mapping = dict(vocab.symbol_to_id)
    mapping.update({NULL_CHAR: NULL, UNK_CHAR: UNK})
    try:
        ids = np.array([mapping[c] for c in text], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"character {exc.args[0]!r} is not in the vocabulary") from None
    return FacsSequence(ids, utt_id, speaker_id, frame_ms)


def truncate(seq: FacsSequence, max_tokens: int) -> FacsSequence:
    if max_tokens <= 0:
        raise ValueError("max_tokens must be positive")
    return FacsSequence(seq.token_ids[:max_tokens].copy(), seq.utt_id, seq.speaker_id, seq.frame_ms)


# ---------------------------------------------------------------------------
# FACS corpus files
# ---------------------------------------------------------------------------


def write_facs_corpus(path: str | os.PathLike, seqs: Iterable[FacsSequence], vocab: Vocabulary) -> None:
    rows = [f"{s.utt_id}\t{s.speaker_id}\t{facs_to_string(s, vocab)}\n" for s in seqs]
    atomic_write_text(path, "".join(rows))


def read_facs_corpus(path: str | os.PathLike, vocab: Vocabulary) -> list[FacsSequence]:
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected utt_id<TAB>speaker_id<TAB>facs")
            seqs.append(facs_from_string(parts[2], vocab, parts[0], parts[1]))
    return seqs


def encode_corpus(utterances: Iterable[AlignedUtterance], vocab: Vocabulary,
                  frame_ms: int = DEFAULT_FRAME_MS) -> list[FacsSequence]:
    """Encode every utterance, ordered by ``utt_id``."""
    return [facs_encode(u, vocab, frame_ms) for u in sorted(utterances, key=lambda u: u.utt_id)]
