"""Deterministic synthetic songs for demos and tests.

Each song gets a rendered WAV (sine partials plus onset clicks), matching
accompaniment/melody MIDI, beat and chord annotations, and a manifest row.
Everything derives from the seed, so fixtures are bit-stable across runs.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .chords import parse_chord_label
from .midi_io import write_midi
from .symbolic import NoteEvent, SegmentScore, N_STEPS, STEPS_PER_BEAT

PROGRESSION_POOL = [
    ["C:maj", "G:maj", "A:min", "F:maj"],
    ["A:min", "F:maj", "C:maj", "G:maj"],
    ["D:min", "G:maj", "C:maj", "A:min"],
    ["C:maj", "A:min", "D:min", "G:maj"],
    ["F:maj", "G:maj", "E:min", "A:min"],
    ["G:maj", "D:maj", "E:min", "C:maj"],
    ["E:min", "C:maj", "G:maj", "D:maj"],
    ["A:min", "G:maj", "F:maj", "E:min"],
]

PATTERNS = ("block", "arpeggio", "alberti", "offbeat")


def _chord_pitches(label: str) -> list[int]:
    root, chroma, bass = parse_chord_label(label)
    tones = sorted(60 + int(pc) for pc in np.nonzero(chroma)[0])
    return tones[:4] or [60]


def _segment_notes(labels: list[str], pattern: str) -> SegmentScore:
    """One 8-beat accompaniment segment; 2 beats (8 steps) per chord label."""
    notes = []
    for ci, label in enumerate(labels):
        base = ci * 8
        root, chroma, bass = parse_chord_label(label)
        if not chroma.any():
            continue
        tones = _chord_pitches(label)
        bass_pitch = 36 + bass  # always below 48: drives the bass-onset feature
        if pattern == "block":
            notes.append(NoteEvent(base, bass_pitch, 8))
            for p in tones:
                notes.append(NoteEvent(base, p, 4))
                notes.append(NoteEvent(base + 4, p, 4))
        elif pattern == "arpeggio":
            notes.append(NoteEvent(base, bass_pitch, 8))
            seq = tones + tones[-2:0:-1] if len(tones) > 2 else tones * 2
            for i in range(4):
                notes.append(NoteEvent(base + 2 * i, seq[i % len(seq)], 2))
        elif pattern == "alberti":
            notes.append(NoteEvent(base, bass_pitch, 4))
            notes.append(NoteEvent(base + 4, bass_pitch, 4))
            lo, hi = tones[0], tones[-1]
            mid = tones[len(tones) // 2]
            for i, p in enumerate((lo, hi, mid, hi, lo, hi, mid, hi)):
                notes.append(NoteEvent(base + i, p, 1))
        else:  # offbeat
            notes.append(NoteEvent(base, bass_pitch, 8))
            for p in tones:
                notes.append(NoteEvent(base + 2, p, 2))
                notes.append(NoteEvent(base + 6, p, 2))
    return SegmentScore(notes)


def _segment_melody(labels: list[str], rng: np.random.Generator) -> SegmentScore:
    notes = []
    for ci, label in enumerate(labels):
        root, chroma, _ = parse_chord_label(label)
        if not chroma.any():
            continue
        tones = [72 + int(pc) for pc in np.nonzero(chroma)[0]]
        for b in range(2):
            pitch = int(rng.choice(tones))
            notes.append(NoteEvent(ci * 8 + b * 4, pitch, 4))
    return SegmentScore(notes)


def _midi_to_freq(pitch: int) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


def render_audio(segments: list[SegmentScore], bpm: float, sr: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Additive-synthesis rendering with per-onset clicks."""
    step_sec = 60.0 / bpm / STEPS_PER_BEAT
    total = int(np.ceil(len(segments) * N_STEPS * step_sec * sr)) + sr // 2
    out = np.zeros(total)
    for seg_idx, seg in enumerate(segments):
        for n in seg.notes:
            onset = (seg_idx * N_STEPS + n.onset_step) * step_sec
            dur = max(n.duration_steps * step_sec, 0.05)
            i0 = int(onset * sr)
            t = np.arange(int(dur * sr)) / sr
            f = _midi_to_freq(n.pitch)
            env = np.exp(-2.5 * t)
            tone = env * (np.sin(2 * np.pi * f * t) + 0.35 * np.sin(4 * np.pi * f * t))
            tone[-min(64, len(tone)):] *= np.linspace(1, 0, min(64, len(tone)))
            out[i0:i0 + len(tone)] += 0.22 * tone
            click = rng.standard_normal(160) * np.exp(-np.arange(160) / 40.0)
            out[i0:i0 + 160] += 0.05 * click
    peak = np.abs(out).max()
    if peak > 0:
        out *= 0.7 / peak
    return out


def make_song(out_dir: Path, song_id: str, n_segments: int, bpm: float,
              sr: int, seed: int, meter: str = "4/4") -> dict:
    """Write one synthetic song's assets; returns its manifest row."""
    rng = np.random.default_rng(seed)
    seg_scores, seg_melodies, chord_lines = [], [], []
    for s in range(n_segments):
        labels = PROGRESSION_POOL[int(rng.integers(len(PROGRESSION_POOL)))]
        pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
        seg_scores.append(_segment_notes(labels, pattern))
        seg_melodies.append(_segment_melody(labels, rng))
        for ci, label in enumerate(labels):
            start = s * 8 + ci * 2
            chord_lines.append(f"{start}\t{start + 2}\t{label}")

    out_dir.mkdir(parents=True, exist_ok=True)
    acc_path = out_dir / f"{song_id}_acc.mid"
    mel_path = out_dir / f"{song_id}_mel.mid"
    wav_path = out_dir / f"{song_id}.wav"
    beats_path = out_dir / f"{song_id}_beats.txt"
    chords_path = out_dir / f"{song_id}_chords.txt"

    write_midi(acc_path, seg_scores, bpm=bpm)
    write_midi(mel_path, seg_melodies, bpm=bpm)

    audio = render_audio(seg_scores, bpm, sr, rng)
    wavfile.write(wav_path, sr, (audio * 32767).astype(np.int16))

    n_beats = n_segments * 8 + 1  # include the right edge of the last window
    beats_per_bar = 4 if meter == "4/4" else 2
    with open(beats_path, "w", encoding="utf-8") as fh:
        for k in range(n_beats):
            fh.write(f"{k * 60.0 / bpm:.6f}\t{1 if k % beats_per_bar == 0 else 0}\n")
    with open(chords_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(chord_lines) + "\n")

    return {"song_id": song_id, "audio": wav_path.name, "midi_acc": acc_path.name,
            "midi_mel": mel_path.name, "beats": beats_path.name,
            "chords": chords_path.name, "meter": meter}


def make_demo_dataset(out_dir, n_songs: int = 10, n_segments: int = 2, seed: int = 0,
                      bpms=(95.0, 100.0, 110.0, 90.0), sr: int = 16000) -> Path:
    """A small multi-song dataset with mixed tempi; returns the manifest path."""
    out = Path(out_dir)
    rows = []
    for i in range(n_songs):
        bpm = bpms[i % len(bpms)]
        rows.append(make_song(out, f"song{i:03d}", n_segments, bpm, sr, seed * 1000 + i))
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["song_id", "audio", "midi_acc", "midi_mel",
                                                "beats", "chords", "meter"])
        writer.writeheader()
        writer.writerows(rows)
    return manifest


def make_overfit_fixture(out_dir, seed: int = 7) -> Path:
    """Eight diverse segments (2 songs x 4) at exactly 95 BPM / 16 kHz."""
    out = Path(out_dir)
    rows = [make_song(out, f"fix{i}", 4, 95.0, 16000, seed * 100 + i) for i in range(2)]
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["song_id", "audio", "midi_acc", "midi_mel",
                                                "beats", "chords", "meter"])
        writer.writeheader()
        writer.writerows(rows)
    return manifest
