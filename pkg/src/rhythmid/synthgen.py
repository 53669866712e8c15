"""Synthetic speakers with individual character-duration signatures.

Each speaker has a mean duration (in frames) per character, a per-character
dispersion and a pause habit between words. A single variability level scales
all the randomness: at 0 a speaker says the same text identically every time,
larger values make utterances of the same speaker drift apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from rhythmid.facs import DEFAULT_FRAME_MS, AlignedUtterance, CharSegment
from rhythmid.fusion import XVectorTable
from rhythmid.metrics import ConfusionMatrix, balanced_accuracy

ALPHABET = "abcdefghijklmnopqrstuvwxyz"

TEXTS = (
    "the quick brown fox jumps over the lazy dog",
    "pack my box with five dozen liquor jugs",
    "how vexingly quick daft zebras jump",
    "sphinx of black quartz judge my vow",
    "the five boxing wizards jump quickly",
    "jackdaws love my big sphinx of quartz",
    "we promptly judged antique ivory buckles",
    "a wizard quickly jinxed the gnomes",
    "bright vixens jump dozy fowl quack",
    "waltz bad nymph for quick jigs vex",
    "glib jocks quiz nymph to vex dwarf",
    "my girl wove six dozen plaid jackets",
    "crazy fredrick bought many jewels",
    "just keep examining every low bid quoted",
    "six big devils from japan quickly forgot",
    "she stepped boldly into the room",
)

LEAD_FRAMES = 2
TRAIL_FRAMES = 2


@dataclass
class SpeakerRhythmProfile:
    speaker_id: str
    mean_frames: dict[str, float]
    dispersion: dict[str, float]
    pause_prob: float
    pause_mean: float
    pause_sd: float

    def __post_init__(self):
        if any(m < 1 for m in self.mean_frames.values()):
            raise ValueError("mean frames must be >= 1")
        if any(d < 0 for d in self.dispersion.values()) or self.pause_sd < 0:
            raise ValueError("dispersions must be >= 0")
        if not 0.0 <= self.pause_prob <= 1.0:
            raise ValueError("pause_prob must be in [0, 1]")

    def signature(self, alphabet: str) -> np.ndarray:
        return np.array([self.mean_frames[c] for c in alphabet])


def gen_profiles(n_speakers: int, base_alphabet: str = ALPHABET, separation: float = 1.0,
                 rng: np.random.Generator | None = None, dispersion: float = 1.0) -> list[SpeakerRhythmProfile]:
    """Speaker profiles whose mean durations spread around shared base values.

    Per-character means are ``base + separation * N(0, 1)`` (floored at one
    frame); the pause habit spreads the same way. ``separation == 0`` yields
    identical profiles.
    """
    if not base_alphabet:
        raise ValueError("alphabet is empty")
    if n_speakers < 2 or separation < 0:
        raise ValueError("need n_speakers >= 2 and separation >= 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    alphabet = "".join(sorted(set(base_alphabet)))
    base = rng.uniform(2.0, 5.0, size=len(alphabet))
    width = len(str(n_speakers - 1))
    profiles = []
    for s in range(n_speakers):
        means = np.maximum(1.0, base + separation * rng.normal(size=len(alphabet)))
        offsets = rng.normal(size=2)
        profiles.append(
            SpeakerRhythmProfile(
                speaker_id=f"spk{s:0{width}d}",
                mean_frames=dict(zip(alphabet, means.tolist())),
                dispersion={c: dispersion for c in alphabet},
                pause_prob=float(np.clip(0.5 + 0.2 * separation * offsets[0], 0.0, 1.0)),
                pause_mean=float(max(1.0, 4.0 + separation * offsets[1])),
                pause_sd=1.0,
            )
        )
    return profiles


def _pause_probability(p: float, variability: float) -> float:
    """Pause chance sharpened to a deterministic habit as variability goes to 0."""
    if variability == 0:
        return 1.0 if p >= 0.5 else 0.0
    if p in (0.0, 1.0):
        return p
    logit = math.log(p / (1.0 - p)) / variability
    return 1.0 / (1.0 + math.exp(-max(min(logit, 50.0), -50.0)))


def _frames(mean: float, sd: float, rng: np.random.Generator, floor: int) -> int:
    value = mean + sd * rng.normal() if sd > 0 else mean
    return max(floor, int(round(value)))


def _speak(profile: SpeakerRhythmProfile, text: str, utt_id: str, variability: float,
           rng: np.random.Generator, frame_ms: int) -> AlignedUtterance:
    step = frame_ms / 1000.0
    frame = LEAD_FRAMES
    segments = []
    words = text.split()
    p_pause = _pause_probability(profile.pause_prob, variability)
    for w, word in enumerate(words):
        if w:
            if p_pause == 1.0 or (p_pause > 0.0 and rng.random() < p_pause):
                frame += _frames(profile.pause_mean, profile.pause_sd * variability, rng, 1)
        for ch in word:
            n = _frames(profile.mean_frames[ch], profile.dispersion[ch] * variability, rng, 1)
            segments.append(CharSegment(ch, round(frame * step, 6), round((frame + n) * step, 6)))
            frame += n
    frame += TRAIL_FRAMES
    return AlignedUtterance(utt_id, profile.speaker_id, round(frame * step, 6), segments)


def gen_corpus(profiles: Sequence[SpeakerRhythmProfile], texts: Sequence[str] = TEXTS,
               n_utts_per_speaker: int = 20, variability: float = 1.0,
               rng: np.random.Generator | None = None, frame_ms: int = DEFAULT_FRAME_MS) -> list[AlignedUtterance]:
    """Utterances for every speaker; each speaker draws from its own child generator."""
    if not texts:
        raise ValueError("texts is empty")
    if n_utts_per_speaker < 1 or variability < 0:
        raise ValueError("need n_utts_per_speaker >= 1 and variability >= 0")
    needed = {c for t in texts for c in t.lower() if not c.isspace()}
    for profile in profiles:
        if needed - profile.mean_frames.keys():
            raise ValueError(f"texts use characters outside the profile alphabet: {sorted(needed - profile.mean_frames.keys())}")
    rng = rng if rng is not None else np.random.default_rng(0)
    out = []
    for profile, child in zip(profiles, rng.spawn(len(profiles))):
        for u in range(n_utts_per_speaker):
            text = texts[int(child.integers(len(texts)))].lower()
            utt_id = f"{profile.speaker_id}-{u:04d}"
            out.append(_speak(profile, text, utt_id, variability, child, frame_ms))
    return out


def gen_xvectors(profiles: Sequence[SpeakerRhythmProfile], utterances: Sequence[AlignedUtterance],
                 informativeness: float = 0.9, dim: int = 64,
                 rng: np.random.Generator | None = None) -> XVectorTable:
    """Per-utterance vectors ``informativeness * center + (1 - informativeness) * noise``."""
    if dim < 2 or not 0.0 <= informativeness <= 1.0:
        raise ValueError("need dim >= 2 and informativeness in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng(0)
    centers = {p.speaker_id: rng.normal(size=dim) for p in profiles}
    table = XVectorTable(dim)
    for utt in utterances:
        noise = rng.normal(size=dim)
        table.entries[utt.utt_id] = informativeness * centers[utt.speaker_id] + (1.0 - informativeness) * noise
    return table


# ---------------------------------------------------------------------------
# Nearest-centroid oracle over per-character mean durations
# ---------------------------------------------------------------------------


def duration_features(utt: AlignedUtterance, alphabet: str = ALPHABET, frame_ms: int = DEFAULT_FRAME_MS) -> np.ndarray:
    """Mean duration in frames per character (NaN where the character is absent)."""
    sums = np.zeros(len(alphabet))
    counts = np.zeros(len(alphabet))
    index = {c: i for i, c in enumerate(alphabet)}
    for seg in utt.segments:
        i = index.get(seg.symbol)
        if i is not None:
            sums[i] += (seg.end_s - seg.start_s) * 1000.0 / frame_ms
            counts[i] += 1
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def centroid_oracle(train: Sequence[AlignedUtterance], test: Sequence[AlignedUtterance],
                    alphabet: str = ALPHABET) -> float:
    """Balanced accuracy of a nearest-centroid classifier on duration features."""
    speakers = sorted({u.speaker_id for u in train})
    index = {s: i for i, s in enumerate(speakers)}
    feats = np.array([duration_features(u, alphabet) for u in train])
    labels = np.array([index[u.speaker_id] for u in train])
    centroids = np.full((len(speakers), len(alphabet)), np.nan)
    for k in range(len(speakers)):
        rows = feats[labels == k]
        present = ~np.isnan(rows).all(axis=0)
        centroids[k, present] = np.nanmean(rows[:, present], axis=0)
    global_mean = np.nanmean(feats, axis=0)
    centroids = np.where(np.isnan(centroids), global_mean, centroids)
    preds, truth = [], []
    for u in test:
        f = duration_features(u, alphabet)
        ok = ~np.isnan(f)
        d = ((centroids[:, ok] - f[ok]) ** 2).sum(axis=1)
        preds.append(int(np.argmin(d)))
        truth.append(index[u.speaker_id])
    return balanced_accuracy(ConfusionMatrix.from_predictions(truth, preds, len(speakers)))
