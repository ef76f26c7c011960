"""Minimal Standard MIDI File codec.

Reads type 0 and type 1 files (running status, tempo map, note-on with
velocity 0 as note-off) into timed notes in seconds; writes single-track
type 0 files at a fixed tempo with a fixed velocity, which is all the
arrangement output needs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import DataError
from .symbolic import N_STEPS, STEPS_PER_BEAT, SegmentScore

TICKS_PER_QUARTER = 480
DEFAULT_TEMPO_US = 500000  # 120 BPM, the SMF default
OUTPUT_BPM = 95
OUTPUT_VELOCITY = 80


@dataclass
class TimedNote:
    onset_sec: float
    pitch: int
    duration_sec: float
    velocity: int = OUTPUT_VELOCITY


def _encode_vlq(value: int) -> bytes:
    if value < 0:
        raise ValueError("negative delta time")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _decode_vlq(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise DataError("variable-length quantity longer than 4 bytes")


def write_midi(path, scores: Sequence[SegmentScore], bpm: float = OUTPUT_BPM,
               velocity: int = OUTPUT_VELOCITY):
    """Write consecutive 8-beat segments as one type-0 track at `bpm`.

    Step k of segment i lands on tick (32*i + k) * 120 at 480 ticks/quarter
    (beats are quarters).  Velocity is constant.
    """
    step_ticks = TICKS_PER_QUARTER // STEPS_PER_BEAT
    tempo_us = round(60_000_000 / bpm)
    # (tick, order, status, pitch) with note-offs sorted before note-ons at a tick
    events: list[tuple[int, int, int, int]] = []
    for seg_idx, score in enumerate(scores):
        base = seg_idx * N_STEPS
        for n in score.notes:
            on = (base + n.onset_step) * step_ticks
            off = (base + n.onset_step + n.duration_steps) * step_ticks
            events.append((on, 1, 0x90, n.pitch))
            events.append((off, 0, 0x80, n.pitch))
    events.sort()

    track = bytearray()
    track += _encode_vlq(0) + bytes([0xFF, 0x51, 0x03]) + struct.pack(">I", tempo_us)[1:]
    track += _encode_vlq(0) + bytes([0xFF, 0x58, 0x04, 4, 2, 24, 8])
    tick = 0
    for ev_tick, _, status, pitch in events:
        track += _encode_vlq(ev_tick - tick)
        vel = velocity if status == 0x90 else 0
        track += bytes([status, pitch, vel])
        tick = ev_tick
    track += _encode_vlq(0) + bytes([0xFF, 0x2F, 0x00])

    with open(path, "wb") as fh:
        fh.write(b"MThd" + struct.pack(">IHHH", 6, 0, 1, TICKS_PER_QUARTER))
        fh.write(b"MTrk" + struct.pack(">I", len(track)))
        fh.write(track)


def _read_chunks(data: bytes):
    pos = 0
    while pos + 8 <= len(data):
        tag = data[pos:pos + 4]
        (length,) = struct.unpack(">I", data[pos + 4:pos + 8])
        yield tag, data[pos + 8:pos + 8 + length]
        pos += 8 + length


def _parse_track(data: bytes) -> list[tuple[int, int, int, int]]:
    """Return (tick, status, data1, data2) events; meta tempo kept as status 0xFF51."""
    events = []
    pos = 0
    tick = 0
    running = None
    while pos < len(data):
        delta, pos = _decode_vlq(data, pos)
        tick += delta
        byte = data[pos]
        if byte == 0xFF:
            meta_type = data[pos + 1]
            length, npos = _decode_vlq(data, pos + 2)
            payload = data[npos:npos + length]
            if meta_type == 0x51 and length == 3:
                tempo = (payload[0] << 16) | (payload[1] << 8) | payload[2]
                events.append((tick, 0xFF51, tempo, 0))
            pos = npos + length
            if meta_type == 0x2F:
                break
            running = None
        elif byte in (0xF0, 0xF7):
            length, npos = _decode_vlq(data, pos + 1)
            pos = npos + length
            running = None
        else:
            if byte & 0x80:
                status = byte
                pos += 1
                running = status
            else:
                if running is None:
                    raise DataError("running status without prior status byte")
                status = running
            kind = status & 0xF0
            if kind in (0xC0, 0xD0):
                events.append((tick, status, data[pos], 0))
                pos += 1
            else:
                events.append((tick, status, data[pos], data[pos + 1]))
                pos += 2
    return events


def read_midi(path) -> list[TimedNote]:
    """Parse an SMF file into timed notes (seconds), all tracks merged."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != b"MThd":
        raise DataError(f"{path}: not a Standard MIDI File")
    chunks = list(_read_chunks(data))
    tag, header = chunks[0]
    fmt, ntrks, division = struct.unpack(">HHH", header[:6])
    if fmt not in (0, 1):
        raise DataError(f"{path}: unsupported SMF format {fmt}")
    if division & 0x8000:
        raise DataError(f"{path}: SMPTE time division is not supported")

    all_events: list[tuple[int, int, int, int]] = []
    for tag, body in chunks[1:]:
        if tag == b"MTrk":
            all_events.extend(_parse_track(body))
    all_events.sort(key=lambda e: e[0])

    # tempo map: (tick, tempo_us), then tick -> seconds
    tempo_changes = [(0, DEFAULT_TEMPO_US)]
    for tick, status, d1, _ in all_events:
        if status == 0xFF51:
            tempo_changes.append((tick, d1))

    def tick_to_sec(tick: int) -> float:
        sec = 0.0
        prev_tick, tempo = tempo_changes[0]
        for t, new_tempo in tempo_changes[1:]:
            if t >= tick:
                break
            sec += (t - prev_tick) * tempo / 1e6 / division
            prev_tick, tempo = t, new_tempo
        return sec + (tick - prev_tick) * tempo / 1e6 / division

    notes: list[TimedNote] = []
    active: dict[int, list[tuple[int, int]]] = {}
    for tick, status, d1, d2 in all_events:
        kind = status & 0xF0
        if kind == 0x90 and d2 > 0:
            active.setdefault(d1, []).append((tick, d2))
        elif kind == 0x80 or (kind == 0x90 and d2 == 0):
            stack = active.get(d1)
            if stack:
                on_tick, vel = stack.pop(0)
                notes.append(TimedNote(tick_to_sec(on_tick), d1,
                                       max(tick_to_sec(tick) - tick_to_sec(on_tick), 1e-6), vel))
    notes.sort(key=lambda n: (n.onset_sec, n.pitch))
    return notes
