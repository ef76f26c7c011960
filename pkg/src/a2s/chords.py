"""Chord label parsing and chord-annotation files.

Labels follow the Harte et al. shorthand syntax used by most chord
annotation corpora: ``<root>:<quality>[/<degree>]`` (e.g. ``C:maj``,
``A:min7``, ``G:maj/5``) plus ``N`` for no-chord.  A bare root (``C``)
means a major triad.

Annotation file format, one chord span per line::

    start_beat<TAB>end_beat<TAB>label

Beat positions are floats on the song's beat axis.  A no-chord frame keeps
an all-zero chroma but, to satisfy the one-hot invariant of the 36-d frame
layout, carries root=0 and bass=0; the empty chroma is what marks silence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AnnotationGap, DataError
from .symbolic import CHORD_DIM, N_CHORD_FRAMES, ChordProgression

PITCH_CLASSES = {
    "C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11,
}

# shorthand -> chord-tone intervals in semitones above the root
QUALITY_INTERVALS = {
    "maj": (0, 4, 7),
    "min": (0, 3, 7),
    "dim": (0, 3, 6),
    "aug": (0, 4, 8),
    "maj7": (0, 4, 7, 11),
    "min7": (0, 3, 7, 10),
    "7": (0, 4, 7, 10),
    "dim7": (0, 3, 6, 9),
    "hdim7": (0, 3, 6, 10),
    "minmaj7": (0, 3, 7, 11),
    "maj6": (0, 4, 7, 9),
    "min6": (0, 3, 7, 9),
    "6": (0, 4, 7, 9),
    "9": (0, 2, 4, 7, 10),
    "maj9": (0, 2, 4, 7, 11),
    "min9": (0, 2, 3, 7, 10),
    "sus2": (0, 2, 7),
    "sus4": (0, 5, 7),
    "sus4(b7)": (0, 5, 7, 10),
    "11": (0, 2, 4, 5, 7, 10),
    "13": (0, 2, 4, 7, 9, 10),
    "5": (0, 7),
    "1": (0,),
}

# scale degree -> semitones above the root (for slash-bass notation)
DEGREE_SEMITONES = {
    "1": 0, "b2": 1, "2": 2, "#2": 3, "b3": 3, "3": 4, "4": 5, "#4": 6,
    "b5": 6, "5": 7, "#5": 8, "b6": 8, "6": 9, "bb7": 9, "b7": 10, "7": 11,
    "b9": 1, "9": 2, "#9": 3, "11": 5, "#11": 6, "b13": 8, "13": 9,
}


def _parse_root(token: str) -> int:
    if not token or token[0].upper() not in PITCH_CLASSES:
        raise DataError(f"unknown chord root in label {token!r}")
    pc = PITCH_CLASSES[token[0].upper()]
    for ch in token[1:]:
        if ch == "#":
            pc += 1
        elif ch == "b":
            pc -= 1
        else:
            raise DataError(f"unknown accidental {ch!r} in chord root {token!r}")
    return pc % 12


def parse_chord_label(label: str) -> tuple[int, np.ndarray, int]:
    """Parse one label into (root pitch class, 12-d chroma, bass pitch class).

    'N' yields root 0, all-zero chroma, bass 0.  The bass pitch class is
    always included in the chroma (an inversion's bass note sounds).
    """
    label = label.strip()
    if label in ("N", "X", ""):
        return 0, np.zeros(12, dtype=np.float32), 0
    if "/" in label:
        body, degree = label.split("/", 1)
    else:
        body, degree = label, "1"
    if ":" in body:
        root_token, quality = body.split(":", 1)
    else:
        root_token, quality = body, "maj"
    quality = quality.strip() or "maj"
    root = _parse_root(root_token.strip())
    if quality not in QUALITY_INTERVALS:
        raise DataError(f"unknown chord quality {quality!r} in label {label!r}")
    degree = degree.strip()
    if degree not in DEGREE_SEMITONES:
        raise DataError(f"unknown bass degree {degree!r} in label {label!r}")
    chroma = np.zeros(12, dtype=np.float32)
    for iv in QUALITY_INTERVALS[quality]:
        chroma[(root + iv) % 12] = 1.0
    bass = (root + DEGREE_SEMITONES[degree]) % 12
    chroma[bass] = 1.0
    return root, chroma, bass


def chord_frame(label: str) -> np.ndarray:
    """36-d per-beat frame for one label: root(12) + chroma(12) + bass(12)."""
    root, chroma, bass = parse_chord_label(label)
    frame = np.zeros(CHORD_DIM, dtype=np.float32)
    frame[root] = 1.0
    frame[12:24] = chroma
    frame[24 + bass] = 1.0
    return frame


@dataclass
class ChordSpan:
    start_beat: float
    end_beat: float
    label: str


def read_chord_annotation(path) -> list[ChordSpan]:
    """Read `start_beat<TAB>end_beat<TAB>label` lines; blank lines ignored."""
    spans = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            try:
                start, end = float(parts[0]), float(parts[1])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad beat value ({exc})") from None
            if end <= start:
                raise DataError(f"{path}:{lineno}: end_beat must exceed start_beat")
            spans.append(ChordSpan(start, end, parts[2]))
    spans.sort(key=lambda s: s.start_beat)
    return spans


def label_at_beat(spans: list[ChordSpan], beat: float) -> str | None:
    for s in spans:
        if s.start_beat <= beat < s.end_beat:
            return s.label
    return None


def progression_for_window(spans: list[ChordSpan], start_beat: float,
                           strict: bool = False) -> ChordProgression:
    """Per-beat chord frames for the 8-beat window starting at `start_beat`.

    Uncovered beats become no-chord frames unless `strict`, in which case an
    AnnotationGap is raised (inference refuses to guess).
    """
    frames = np.zeros((N_CHORD_FRAMES, CHORD_DIM), dtype=np.float32)
    for b in range(N_CHORD_FRAMES):
        label = label_at_beat(spans, start_beat + b)
        if label is None:
            if strict:
                raise AnnotationGap(f"no chord annotation at beat {start_beat + b}")
            label = "N"
        frames[b] = chord_frame(label)
    return ChordProgression(frames)
