import struct

import numpy as np
import pytest

from a2s.chords import (chord_frame, parse_chord_label, progression_for_window,
                        read_chord_annotation)
from a2s.errors import AnnotationGap, DataError
from a2s.midi_io import (OUTPUT_VELOCITY, TICKS_PER_QUARTER, read_midi,
                         write_midi)
from a2s.symbolic import NoteEvent, SegmentScore, transpose_chord


def chroma_set(chroma):
    return set(np.nonzero(chroma)[0].tolist())


def test_parse_c_major():
    root, chroma, bass = parse_chord_label("C:maj")
    assert (root, bass) == (0, 0)
    assert chroma_set(chroma) == {0, 4, 7}


def test_parse_a_min7():
    root, chroma, bass = parse_chord_label("A:min7")
    assert (root, bass) == (9, 9)
    assert chroma_set(chroma) == {9, 0, 4, 7}


def test_parse_slash_bass():
    root, chroma, bass = parse_chord_label("G:maj/5")
    assert root == 7 and bass == 2
    assert chroma_set(chroma) == {7, 11, 2}


def test_parse_no_chord():
    root, chroma, bass = parse_chord_label("N")
    assert not chroma.any()
    frame = chord_frame("N")
    assert frame[:12].sum() == 1 and frame[24:].sum() == 1  # one-hot invariant kept


def test_parse_bare_root_and_flats():
    root, chroma, _ = parse_chord_label("Bb")
    assert root == 10 and chroma_set(chroma) == {10, 2, 5}


def test_parse_bad_labels():
    for label in ("H:maj", "C:weird", "C:maj/42"):
        with pytest.raises(DataError):
            parse_chord_label(label)


def test_transpose_chord_rotate_oracle():
    rng = np.random.default_rng(0)
    labels = ["C:maj", "A:min7", "G:maj/5", "D:min", "F:maj"]
    frames = np.stack([chord_frame(labels[int(rng.integers(5))]) for _ in range(8)])
    from a2s.symbolic import ChordProgression
    prog = ChordProgression(frames)
    for k in range(-11, 12):
        got = transpose_chord(prog, k).frames
        expect = np.concatenate([np.roll(frames[:, :12], k % 12, axis=1),
                                 np.roll(frames[:, 12:24], k % 12, axis=1),
                                 np.roll(frames[:, 24:], k % 12, axis=1)], axis=1)
        assert np.array_equal(got, expect)
    assert transpose_chord(prog, 0) == prog
    assert transpose_chord(prog, 12) == prog


def test_c_major_transposed_up_two_is_d():
    from a2s.symbolic import ChordProgression
    prog = ChordProgression(np.stack([chord_frame("C:maj")] * 8))
    up = transpose_chord(prog, 2)
    assert (up.roots() == 2).all()
    assert chroma_set(up.frames[0, 12:24]) == {2, 6, 9}


def test_chord_annotation_file(tmp_path):
    p = tmp_path / "chords.txt"
    p.write_text("0\t2\tC:maj\n2\t4\tA:min\n4\t8\tG:maj\n")
    spans = read_chord_annotation(p)
    assert len(spans) == 3
    prog = progression_for_window(spans, 0.0)
    assert prog.roots().tolist() == [0, 0, 9, 9, 7, 7, 7, 7]


def test_chord_window_gap_fills_or_raises(tmp_path):
    p = tmp_path / "chords.txt"
    p.write_text("0\t4\tC:maj\n")
    spans = read_chord_annotation(p)
    lenient = progression_for_window(spans, 0.0)
    assert not lenient.chroma()[4:].any()  # uncovered beats become no-chord
    with pytest.raises(AnnotationGap):
        progression_for_window(spans, 0.0, strict=True)


def test_chord_annotation_bad_lines(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("0\t2\n")
    with pytest.raises(DataError):
        read_chord_annotation(p)
    p.write_text("2\t1\tC:maj\n")
    with pytest.raises(DataError):
        read_chord_annotation(p)


# --- MIDI codec ---------------------------------------------------------


def test_midi_roundtrip_segments(tmp_path):
    scores = [
        SegmentScore([NoteEvent(0, 60, 4), NoteEvent(0, 36, 8), NoteEvent(8, 64, 2)]),
        SegmentScore([NoteEvent(4, 67, 4), NoteEvent(31, 72, 1)]),
    ]
    path = tmp_path / "out.mid"
    write_midi(path, scores)
    notes = read_midi(path)
    assert len(notes) == 5
    assert all(n.velocity == OUTPUT_VELOCITY for n in notes)
    step_sec = 60.0 / 95 / 4
    recon = {(round(n.onset_sec / step_sec), n.pitch,
              round(n.duration_sec / step_sec)) for n in notes}
    expect = set()
    for i, s in enumerate(scores):
        for n in s.notes:
            expect.add((32 * i + n.onset_step, n.pitch, n.duration_steps))
    assert recon == expect


def test_midi_deterministic_bytes(tmp_path):
    scores = [SegmentScore([NoteEvent(0, 60, 4), NoteEvent(2, 65, 2)])]
    a, b = tmp_path / "a.mid", tmp_path / "b.mid"
    write_midi(a, scores)
    write_midi(b, scores)
    assert a.read_bytes() == b.read_bytes()


def _track(events: bytes) -> bytes:
    return b"MTrk" + struct.pack(">I", len(events)) + events


def test_midi_type1_and_running_status(tmp_path):
    # two tracks: tempo-only track, then notes using running status
    tempo = bytes([0x00, 0xFF, 0x51, 0x03]) + (500000).to_bytes(3, "big") \
        + bytes([0x00, 0xFF, 0x2F, 0x00])
    notes = bytes([
        0x00, 0x90, 60, 80,     # note on C4
        0x60, 62, 90,           # running status: note on D4 after 96 ticks
        0x60, 0x80, 60, 0,      # note off C4
        0x00, 62, 0,            # running status: note off D4
        0x00, 0xFF, 0x2F, 0x00,
    ])
    data = b"MThd" + struct.pack(">IHHH", 6, 1, 2, 96) + _track(tempo) + _track(notes)
    p = tmp_path / "t1.mid"
    p.write_bytes(data)
    out = read_midi(p)
    assert [n.pitch for n in out] == [60, 62]
    assert out[0].onset_sec == pytest.approx(0.0)
    assert out[1].onset_sec == pytest.approx(0.5)  # 96 ticks at 120 BPM
    assert out[0].duration_sec == pytest.approx(1.0)


def test_midi_rejects_garbage(tmp_path):
    p = tmp_path / "x.mid"
    p.write_bytes(b"RIFFnotmidi")
    with pytest.raises(DataError):
        read_midi(p)


def test_midi_velocity_zero_is_note_off(tmp_path):
    notes = bytes([
        0x00, 0x90, 70, 100,
        0x30, 0x90, 70, 0,      # vel-0 note-on acts as note-off
        0x00, 0xFF, 0x2F, 0x00,
    ])
    data = b"MThd" + struct.pack(">IHHH", 6, 0, 1, 96) + _track(notes)
    p = tmp_path / "v0.mid"
    p.write_bytes(data)
    out = read_midi(p)
    assert len(out) == 1 and out[0].duration_sec == pytest.approx(0.25)
