"""Symbolic segment types, grid conversions, transposition and feature extraction.

A segment is 2 bars = 8 beats on a 32-step grid (quarter-beat resolution).
All operations here are pure functions on immutable values.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation, MalformedRoll

N_STEPS = 32            # 8 beats x 4 steps per beat
STEPS_PER_BEAT = 4
N_BEATS = 8
N_PITCHES = 128
MAX_DURATION = 32       # durations live in {1..32}
BASS_PITCH_LIMIT = 48   # pitches strictly below this count as bass
INTENSITY_NORM = 8      # simultaneous-onset count is divided by this, clamped
N_CHORD_FRAMES = 8      # one chord frame per beat
CHORD_DIM = 36          # root(12) + chroma(12) + bass(12)


@dataclass(frozen=True, order=True)
class NoteEvent:
    """One note on the segment grid."""
    onset_step: int
    pitch: int
    duration_steps: int

    def validate(self):
        if not 0 <= self.onset_step < N_STEPS:
            raise ContractViolation(f"onset_step {self.onset_step} outside [0,{N_STEPS})")
        if not 0 <= self.pitch < N_PITCHES:
            raise ContractViolation(f"pitch {self.pitch} outside MIDI range")
        if self.duration_steps < 1:
            raise ContractViolation(f"duration_steps {self.duration_steps} < 1")


class SegmentScore:
    """An 8-beat arrangement segment: notes sorted by (onset_step, pitch).

    The constructor canonicalizes its input: notes are sorted, duplicate
    (onset, pitch) pairs merged keeping the longer duration, durations
    clipped so that onset + duration <= 32, and a note is truncated at the
    next onset of the same pitch (piano-roll semantics: a re-struck key
    cuts the previous note).
    """

    __slots__ = ("notes",)

    n_steps = N_STEPS

    def __init__(self, notes: Iterable[NoteEvent] = ()):
        merged: dict[tuple[int, int], int] = {}
        for n in notes:
            n.validate()
            key = (n.onset_step, n.pitch)
            dur = min(n.duration_steps, N_STEPS - n.onset_step)
            if key not in merged or merged[key] < dur:
                merged[key] = dur
        by_pitch: dict[int, list[tuple[int, int]]] = {}
        for (o, p), d in sorted(merged.items()):
            by_pitch.setdefault(p, []).append((o, d))
        out = []
        for p, events in by_pitch.items():
            for i, (o, d) in enumerate(events):
                if i + 1 < len(events):
                    d = min(d, events[i + 1][0] - o)
                out.append(NoteEvent(o, p, d))
        self.notes: tuple[NoteEvent, ...] = tuple(sorted(out))

    def __len__(self):
        return len(self.notes)

    def __eq__(self, other):
        return isinstance(other, SegmentScore) and self.notes == other.notes

    def __hash__(self):
        return hash(self.notes)

    def __repr__(self):
        return f"SegmentScore({len(self.notes)} notes)"

    def is_empty(self) -> bool:
        return not self.notes

    def onsets_at(self, step: int) -> list[NoteEvent]:
        return [n for n in self.notes if n.onset_step == step]


@dataclass
class PianoRoll:
    """Binary onset/sustain matrices of shape (32, 128)."""
    onset: np.ndarray
    sustain: np.ndarray

    def __post_init__(self):
        for name, m in (("onset", self.onset), ("sustain", self.sustain)):
            if m.shape != (N_STEPS, N_PITCHES):
                raise ContractViolation(f"{name} matrix must be {N_STEPS}x{N_PITCHES}, got {m.shape}")

    @classmethod
    def zeros(cls) -> "PianoRoll":
        return cls(np.zeros((N_STEPS, N_PITCHES), dtype=np.uint8),
                   np.zeros((N_STEPS, N_PITCHES), dtype=np.uint8))

    def stack(self) -> np.ndarray:
        """Two-channel float view (2, 32, 128): onset first, sustain second."""
        return np.stack([self.onset, self.sustain]).astype(np.float32)


@dataclass
class ChordProgression:
    """Eight per-beat 36-d frames: root one-hot, chroma multi-hot, bass one-hot."""
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.shape != (N_CHORD_FRAMES, CHORD_DIM):
            raise ContractViolation(
                f"chord frames must be {N_CHORD_FRAMES}x{CHORD_DIM}, got {self.frames.shape}")
        root, chroma, bass = self.frames[:, :12], self.frames[:, 12:24], self.frames[:, 24:]
        if not (np.allclose(root.sum(axis=1), 1.0) and np.allclose(bass.sum(axis=1), 1.0)):
            raise ContractViolation("root and bass sub-vectors must each be one-hot")
        if np.any((chroma != 0.0) & (chroma != 1.0)):
            raise ContractViolation("chroma sub-vector must be binary")

    def __eq__(self, other):
        return isinstance(other, ChordProgression) and np.array_equal(self.frames, other.frames)

    def chroma(self) -> np.ndarray:
        return self.frames[:, 12:24]

    def roots(self) -> np.ndarray:
        return self.frames[:, :12].argmax(axis=1)

    def basses(self) -> np.ndarray:
        return self.frames[:, 24:].argmax(axis=1)


@dataclass
class SymbolicFeatures:
    """Three 32-step series in [0,1]: bass onset, melody onset, rhythmic intensity."""
    bass_onset: np.ndarray
    melody_onset: np.ndarray
    rhythmic_intensity: np.ndarray

    def __post_init__(self):
        for name in ("bass_onset", "melody_onset", "rhythmic_intensity"):
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if arr.shape != (N_STEPS,):
                raise ContractViolation(f"{name} must have length {N_STEPS}")
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ContractViolation(f"{name} must lie in [0,1]")
            setattr(self, name, arr)

    def stack(self) -> np.ndarray:
        """(32, 3) array, columns ordered bass, melody, intensity."""
        return np.stack([self.bass_onset, self.melody_onset, self.rhythmic_intensity], axis=1)


def score_to_pianoroll(score: SegmentScore) -> PianoRoll:
    """Rasterize a score: onset marks note starts, sustain covers full durations."""
    roll = PianoRoll.zeros()
    for n in score.notes:
        roll.onset[n.onset_step, n.pitch] = 1
        roll.sustain[n.onset_step:n.onset_step + n.duration_steps, n.pitch] = 1
    return roll


def pianoroll_to_score(roll: PianoRoll) -> SegmentScore:
    """Inverse of score_to_pianoroll on its image.

    Raises MalformedRoll when sustain appears without a preceding onset or
    sustained step (continuity violation).
    """
    notes = []
    for p in range(N_PITCHES):
        onset_col = roll.onset[:, p]
        sustain_col = roll.sustain[:, p]
        t = 0
        while t < N_STEPS:
            if sustain_col[t] and not onset_col[t] and (t == 0 or not sustain_col[t - 1]):
                raise MalformedRoll(f"sustain without onset at step {t}, pitch {p}")
            if onset_col[t]:
                if not sustain_col[t]:
                    raise MalformedRoll(f"onset without sustain at step {t}, pitch {p}")
                dur = 1
                while t + dur < N_STEPS and sustain_col[t + dur] and not onset_col[t + dur]:
                    dur += 1
                notes.append(NoteEvent(t, p, dur))
                t += dur
            else:
                t += 1
    return SegmentScore(notes)


def transpose(score: SegmentScore, semitones: int) -> SegmentScore:
    """Shift every pitch; notes leaving the MIDI range are dropped."""
    kept = []
    for n in score.notes:
        p = n.pitch + semitones
        if 0 <= p < N_PITCHES:
            kept.append(NoteEvent(n.onset_step, p, n.duration_steps))
    return SegmentScore(kept)


def transpose_chord(prog: ChordProgression, semitones: int) -> ChordProgression:
    """Circularly rotate root, chroma and bass sub-vectors by `semitones` mod 12."""
    k = semitones % 12
    f = prog.frames
    rotated = np.concatenate(
        [np.roll(f[:, :12], k, axis=1),
         np.roll(f[:, 12:24], k, axis=1),
         np.roll(f[:, 24:], k, axis=1)], axis=1)
    return ChordProgression(rotated)


def extract_bass_onset(score: SegmentScore) -> np.ndarray:
    """1 at step t iff some note with pitch < 48 onsets at t."""
    series = np.zeros(N_STEPS, dtype=np.float32)
    for n in score.notes:
        if n.pitch < BASS_PITCH_LIMIT:
            series[n.onset_step] = 1.0
    return series


def extract_melody_onset(melody: SegmentScore) -> np.ndarray:
    """1 at step t iff any melody note onsets at t."""
    series = np.zeros(N_STEPS, dtype=np.float32)
    for n in melody.notes:
        series[n.onset_step] = 1.0
    return series


def extract_rhythmic_intensity(score: SegmentScore) -> np.ndarray:
    """min(onset count, 8)/8 per step."""
    counts = np.zeros(N_STEPS, dtype=np.float32)
    for n in score.notes:
        counts[n.onset_step] += 1.0
    return np.minimum(counts, INTENSITY_NORM) / INTENSITY_NORM


def extract_features(score: SegmentScore, melody: SegmentScore) -> SymbolicFeatures:
    """Ground-truth feature series r for one (arrangement, melody) pair."""
    return SymbolicFeatures(
        bass_onset=extract_bass_onset(score),
        melody_onset=extract_melody_onset(melody),
        rhythmic_intensity=extract_rhythmic_intensity(score),
    )
